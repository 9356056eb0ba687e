"""Stage I: patch autoencoder pretrained with an SSIM + L1 objective."""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Adam, Model

log = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def to_nchw(patches: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(patches, dtype=np.float64).transpose(0, 3, 1, 2))


def ssim_batch(x: Tensor, y: Tensor) -> Tensor:
    """Global-statistics SSIM per sample for NCHW tensors, averaged over channels."""
    x, y = ad._as_tensor(x), ad._as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"ssim shape mismatch {x.shape} vs {y.shape}")
    mx = ad.mean(x, axis=(2, 3), keepdims=True)
    my = ad.mean(y, axis=(2, 3), keepdims=True)
    dx, dy = x - mx, y - my
    vx = ad.mean(dx * dx, axis=(2, 3))
    vy = ad.mean(dy * dy, axis=(2, 3))
    cxy = ad.mean(dx * dy, axis=(2, 3))
    mx, my = ad.reshape(mx, vx.shape), ad.reshape(my, vy.shape)
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return ad.mean(num / den, axis=1)


def ssim(x, y) -> float:
    """SSIM between two ``(h, w, C)`` patches."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim shape mismatch {x.shape} vs {y.shape}")
    return ssim_batch(Tensor(to_nchw(x[None])), Tensor(to_nchw(y[None]))).item()


def image_recon_loss(p: Tensor, p_hat: Tensor) -> Tensor:
    """Per-sample ``-SSIM + mean |p - p_hat|`` for NCHW tensors, shape (B,)."""
    if p.shape != p_hat.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {p_hat.shape}")
    l1 = ad.mean(ad.abs_(p - p_hat), axis=(1, 2, 3))
    return -ssim_batch(p, p_hat) + l1


def stage1_loss(p, p_hat) -> float:
    """Pretraining loss between two ``(h, w, C)`` patches."""
    p, p_hat = np.asarray(p, dtype=np.float64), np.asarray(p_hat, dtype=np.float64)
    if p.shape != p_hat.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {p_hat.shape}")
    return image_recon_loss(Tensor(to_nchw(p[None])), Tensor(to_nchw(p_hat[None]))).item()


class PatchAutoencoder(Model):
    """Four-level convolutional U-Net; the bottleneck dense layer yields the embedding.

    Encoder: stride-2 3x3 convs 3->8->16->32->64 (32x32 -> 2x2), then a dense
    map to ``embed_dim``. The decoder mirrors it with 4x4 transposed convs and
    concatenates the three intermediate encoder activations.
    """

    channels = (8, 16, 32, 64)

    def __init__(self, embed_dim: int = 256, in_channels: int = 3, patch_size: int = 32, seed: int = 0):
        super().__init__()
        if patch_size % 16:
            raise ValueError("patch_size must be a multiple of 16")
        self.embed_dim = embed_dim
        self.in_channels = in_channels
        self.patch_size = patch_size
        rng = np.random.default_rng(seed)
        c = (in_channels,) + self.channels
        for i in range(4):
            self.conv(rng, f"enc{i}", c[i], c[i + 1], 3)
        self.flat = self.channels[-1] * (patch_size // 16) ** 2
        self.dense(rng, "enc.fc", self.flat, embed_dim)
        self.dense(rng, "dec.fc", embed_dim, self.flat)
        self.conv(rng, "up0", 64, 32, 4, transposed=True)
        self.conv(rng, "up1", 64, 16, 4, transposed=True)
        self.conv(rng, "up2", 32, 8, 4, transposed=True)
        self.conv(rng, "up3", 16, in_channels, 4, transposed=True)

    def _encode(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        skips = []
        h = x
        for i in range(4):
            h = ad.leaky_relu(self.conv2d(h, f"enc{i}", stride=2, padding=1))
            skips.append(h)
        z = self.linear(ad.reshape(h, (h.shape[0], self.flat)), "enc.fc")
        return z, skips[:3]

    def encode_tensor(self, x: Tensor) -> Tensor:
        return self._encode(x)[0]

    def reconstruct_tensor(self, x: Tensor) -> Tensor:
        z, (s0, s1, s2) = self._encode(x)
        side = self.patch_size // 16
        h = ad.leaky_relu(self.linear(z, "dec.fc"))
        h = ad.reshape(h, (h.shape[0], self.channels[-1], side, side))
        h = ad.leaky_relu(self.deconv2d(h, "up0"))
        h = ad.leaky_relu(self.deconv2d(ad.concat([h, s2], axis=1), "up1"))
        h = ad.leaky_relu(self.deconv2d(ad.concat([h, s1], axis=1), "up2"))
        return ad.sigmoid(self.deconv2d(ad.concat([h, s0], axis=1), "up3"))

    def encode(self, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Embeddings for ``(N, h, w, C)`` patches."""
        out = []
        with ad.no_grad():
            for s in range(0, len(patches), batch_size):
                out.append(self.encode_tensor(Tensor(to_nchw(patches[s:s + batch_size]))).data)
        return np.concatenate(out) if out else np.zeros((0, self.embed_dim))

    def reconstruct(self, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with ad.no_grad():
            for s in range(0, len(patches), batch_size):
                r = self.reconstruct_tensor(Tensor(to_nchw(patches[s:s + batch_size]))).data
                out.append(r.transpose(0, 2, 3, 1))
        return np.concatenate(out)

    def mean_loss(self, patches: np.ndarray, batch_size: int = 256) -> float:
        total = 0.0
        with ad.no_grad():
            for s in range(0, len(patches), batch_size):
                x = Tensor(to_nchw(patches[s:s + batch_size]))
                total += float(image_recon_loss(x, self.reconstruct_tensor(x)).data.sum())
        return total / len(patches)


def pretrain_stage1(patches: np.ndarray, epochs: int = 30, batch_size: int = 128, lr: float = 1e-4,
                    embed_dim: int = 256, seed: int = 0, model: PatchAutoencoder | None = None):
    """Train the patch autoencoder; returns ``(model, history)``.

    ``history`` holds the mean loss over all patches before training and after
    each epoch.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if model is None:
        model = PatchAutoencoder(embed_dim=embed_dim, in_channels=patches.shape[3],
                                 patch_size=patches.shape[1], seed=seed)
    history = [model.mean_loss(patches)]
    if epochs == 0:
        return model, history
    rng = np.random.default_rng(seed + 1)
    opt = Adam(model.parameters(), lr=lr)
    for epoch in range(epochs):
        order = rng.permutation(len(patches))
        for s in range(0, len(order), batch_size):
            x = Tensor(to_nchw(patches[order[s:s + batch_size]]))
            opt.zero_grad()
            try:
                loss = ad.mean(image_recon_loss(x, model.reconstruct_tensor(x)))
                ad.backward(loss)
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"stage I diverged in epoch {epoch}: {exc}") from exc
            opt.step()
        try:
            history.append(model.mean_loss(patches))
        except ad.NonFiniteError as exc:
            raise DivergenceError(f"stage I diverged in epoch {epoch}: {exc}") from exc
        if not np.isfinite(history[-1]):
            raise DivergenceError(f"stage I loss is non-finite after epoch {epoch}")
        log.info("stage I epoch %d/%d loss %.5f", epoch + 1, epochs, history[-1])
    return model, history
