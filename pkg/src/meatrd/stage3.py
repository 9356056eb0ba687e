"""Stage III: latent multimodal reconstruction error and one-class hypersphere objective."""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Adam, Model
from .stage1 import DivergenceError, to_nchw

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
COLLAPSE_VAR = 1e-10


class CollapseError(RuntimeError):
    """The fused embedding became constant across spots."""


def adaptive_beta(zbar: float) -> float:
    """Image weight chosen from the mean per-spot zero proportion of the expression matrix."""
    if not 0.0 <= zbar <= 1.0:
        raise ValueError("zero proportion must lie in [0, 1]")
    if zbar <= 0.95:
        return 0.5
    return 0.5 + 0.5 / (1.0 + np.exp(-200.0 * (zbar - 0.975)))


def compute_center(errors) -> np.ndarray:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim != 2 or errors.shape[0] == 0:
        raise ValueError("need a nonempty (n, d) array of error vectors")
    return errors.mean(axis=0)


class OccNet(Model):
    """Image encoder E2 (light ResNet), gene encoder E3 (MLP) and the fusion FFN."""

    widths = (16, 32, 64, 64)
    strides = (1, 2, 2, 2)

    def __init__(self, n_genes: int, embed_dim: int = 256, occ_dim: int = 256, channels: int = 3,
                 patch_size: int = 32, seed: int = 0):
        super().__init__()
        self.n_genes, self.D, self.occ_dim = n_genes, embed_dim, occ_dim
        self.channels, self.patch_size = channels, patch_size
        rng = np.random.default_rng(seed)
        self.conv(rng, "e2.stem", channels, 16, 3)
        c = 16
        for i, (w, s) in enumerate(zip(self.widths, self.strides)):
            self.conv(rng, f"e2.r{i}.a", c, w, 3)
            self.conv(rng, f"e2.r{i}.b", w, w, 3)
            if s != 1 or w != c:
                self.conv(rng, f"e2.r{i}.sc", c, w, 1)
            c = w
        side = patch_size // 2 // int(np.prod(self.strides))
        self.flat = c * side * side
        self.dense(rng, "e2.fc", self.flat, embed_dim)
        self.dense(rng, "e3.0", n_genes, 512)
        self.dense(rng, "e3.1", 512, embed_dim)
        self.dense(rng, "ffn.0", embed_dim, occ_dim)
        self.dense(rng, "ffn.1", occ_dim, occ_dim, bias=False)

    def encode_image(self, P: Tensor) -> Tensor:
        h = ad.leaky_relu(self.conv2d(P, "e2.stem", stride=2, padding=1))
        for i, s in enumerate(self.strides):
            y = ad.leaky_relu(self.conv2d(h, f"e2.r{i}.a", stride=s, padding=1))
            y = self.conv2d(y, f"e2.r{i}.b", stride=1, padding=1)
            sc = self.conv2d(h, f"e2.r{i}.sc", stride=s, padding=0) if f"e2.r{i}.sc.w" in self.params else h
            h = ad.leaky_relu(y + sc)
        return self.linear(ad.reshape(h, (h.shape[0], self.flat)), "e2.fc")

    def encode_genes(self, x) -> Tensor:
        x = ad._as_tensor(x)
        if x.shape[-1] != self.n_genes:
            raise ValueError(f"expected {self.n_genes} genes, got {x.shape[-1]}")
        return self.linear(ad.leaky_relu(self.linear(x, "e3.0")), "e3.1")

    def pre_fusion(self, P, x, beta: float) -> Tensor:
        """``beta * e_img/|e_img| + (1 - beta) * e_gene/|e_gene|`` for NCHW patches."""
        if not 0.0 <= beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        e_img = self.encode_image(ad._as_tensor(P))
        e_gene = self.encode_genes(x)
        return (beta * (e_img / ad.l2_norm(e_img, axis=1, eps=NORM_EPS))
                + (1.0 - beta) * (e_gene / ad.l2_norm(e_gene, axis=1, eps=NORM_EPS)))

    def fuse(self, P, x, beta: float) -> Tensor:
        v = self.pre_fusion(P, x, beta)
        return self.linear(ad.leaky_relu(self.linear(v, "ffn.0")), "ffn.1")

    def latent_error(self, P, x, P_t, x_t, beta: float, target: str = "rec") -> Tensor:
        """``Z_fused - Z~_fused``; with ``target="embedding"`` the fused original alone."""
        Z = self.fuse(P, x, beta)
        if target == "embedding":
            return Z
        return Z - self.fuse(P_t, x_t, beta)


def latent_fuse(model: OccNet, p, x, beta: float = 0.5) -> np.ndarray:
    """Fused embedding of ``(h, w, C)`` or ``(B, h, w, C)`` patches and matching expression rows."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 3
    with ad.no_grad():
        out = model.fuse(Tensor(to_nchw(p[None] if single else p)), np.atleast_2d(x), beta).data
    return out[0] if single else out


def latent_recon_error(model: OccNet, p, p_t, x, x_t, beta: float = 0.5) -> np.ndarray:
    return latent_fuse(model, p, x, beta) - latent_fuse(model, p_t, x_t, beta)


class OccTrainer:
    """Trains the hypersphere objective on reference spots and scores new spots.

    ``target="rec"`` uses latent reconstruction errors; ``"embedding"`` uses the
    fused embedding of the original spot only.
    """

    def __init__(self, model: OccNet, beta: float = 0.5, target: str = "rec", recompute_center: bool = True):
        if target not in ("rec", "embedding"):
            raise ValueError(f"unknown target {target!r}")
        if not 0.0 <= beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        self.model, self.beta, self.target = model, beta, target
        self.recompute_center = recompute_center
        self.center: np.ndarray | None = None

    def _error(self, P, x, P_t, x_t, idx) -> Tensor:
        return self.model.latent_error(Tensor(to_nchw(P[idx])), x[idx], Tensor(to_nchw(P_t[idx])), x_t[idx],
                                       self.beta, self.target)

    def errors(self, P, x, P_t, x_t, batch_size: int = 256, check_collapse: bool = False) -> np.ndarray:
        """Latent errors for every spot (no gradient)."""
        out, fused = [], []
        with ad.no_grad():
            for s in range(0, len(P), batch_size):
                idx = np.arange(s, min(s + batch_size, len(P)))
                out.append(self._error(P, x, P_t, x_t, idx).data)
                if check_collapse:
                    fused.append(self.model.fuse(Tensor(to_nchw(P[idx])), x[idx], self.beta).data)
        if check_collapse and len(P) > 1:
            var = float(np.concatenate(fused).var(axis=0).mean())
            if var < COLLAPSE_VAR:
                raise CollapseError(f"fused embeddings collapsed (variance {var:.3g})")
        return np.concatenate(out)

    def fit(self, P, x, P_t, x_t, epochs: int = 5, batch_size: int = 128, lr: float = 1e-4,
            seed: int = 0) -> dict:
        """Algorithm loop: recompute ``c`` each epoch, then descend ``|l - c|^2`` over shuffled batches."""
        history: dict[str, list[float]] = {"loss": [], "center_loss": []}
        self.center = compute_center(self.errors(P, x, P_t, x_t, check_collapse=True))
        if epochs == 0:
            return history
        opt = Adam(self.model.parameters(), lr=lr)
        rng = np.random.default_rng(seed)
        n = len(P)
        for epoch in range(epochs):
            if epoch > 0 and self.recompute_center:
                self.center = compute_center(self.errors(P, x, P_t, x_t, check_collapse=True))
            c = self.center
            total = 0.0
            order = rng.permutation(n)
            for s in range(0, n, batch_size):
                idx = order[s:s + batch_size]
                opt.zero_grad()
                try:
                    d = self._error(P, x, P_t, x_t, idx) - c
                    per = ad.sum_(d * d, axis=1)
                    ad.backward(ad.mean(per))
                except ad.NonFiniteError as exc:
                    raise DivergenceError(f"stage III diverged in epoch {epoch}: {exc}") from exc
                opt.step()
                total += float(per.data.sum())
            history["loss"].append(total / n)
            log.info("stage III epoch %d/%d L_occ %.6f", epoch + 1, epochs, history["loss"][-1])
        errs = self.errors(P, x, P_t, x_t, check_collapse=True)
        if self.recompute_center:
            self.center = compute_center(errs)
        history["center_loss"].append(float(np.mean(np.sum((errs - self.center) ** 2, axis=1))))
        return history

    def score(self, P, x, P_t, x_t, batch_size: int = 256) -> np.ndarray:
        """Squared distance of each spot's latent error to the center."""
        if self.center is None:
            raise RuntimeError("trainer is not fitted")
        errs = self.errors(P, x, P_t, x_t, batch_size)
        return np.sum((errs - self.center) ** 2, axis=1)


def anomaly_score(errors, center) -> np.ndarray:
    """``|l_rec - c|^2`` for each row of ``errors``."""
    d = np.atleast_2d(np.asarray(errors, dtype=np.float64)) - np.asarray(center, dtype=np.float64)
    return np.sum(d * d, axis=1)
