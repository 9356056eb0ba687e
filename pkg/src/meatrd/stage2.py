"""Stage II: masked graph dual-attention transformer (MGDAT) and its decoders.

Each target spot is reconstructed from its 3-hop out-neighbourhood with its
own image and gene attributes replaced by learnable mask tokens. Two
propagation modes are supported:

* ``exact``: one private copy of the 3-hop subgraph per target.
* ``batched``: the union of the targets' 3-hop subgraphs is propagated once,
  with every target masked; transformer attention pairs are the union of the
  per-target subgraph pairs. For a single target both modes coincide.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import SpotGraph, _conflict_sets, sample_batches
from .nn import Adam, Model
from .stage1 import DivergenceError, PatchAutoencoder, image_recon_loss, to_nchw

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def sce_loss(x: Tensor, x_tilde: Tensor, gamma: float = 2.0) -> Tensor:
    """Scaled cosine error per row, ``(1 - cos(x, x_tilde)) ** gamma``."""
    x, x_tilde = ad._as_tensor(x), ad._as_tensor(x_tilde)
    if x.shape != x_tilde.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_tilde.shape}")
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if x.ndim == 1:
        x, x_tilde = ad.reshape(x, (1, -1)), ad.reshape(x_tilde, (1, -1))
    nx = ad.power(ad.sum_(x * x, axis=1) + NORM_EPS ** 2, 0.5)
    ny = ad.power(ad.sum_(x_tilde * x_tilde, axis=1) + NORM_EPS ** 2, 0.5)
    cos = ad.sum_(x * x_tilde, axis=1) / (nx * ny)
    return ad.power(1.0 - cos, gamma)


def spot_losses(P, P_tilde, x, x_tilde, alpha: float = 0.5, gamma: float = 2.0) -> tuple[Tensor, Tensor, Tensor]:
    """Per-spot ``(total, image, gene)`` reconstruction losses.

    Patches are NCHW tensors, expressions are ``(B, G)``.
    """
    l_img = image_recon_loss(ad._as_tensor(P), ad._as_tensor(P_tilde))
    l_gene = sce_loss(x, x_tilde, gamma)
    return alpha * l_img + (1.0 - alpha) * l_gene, l_img, l_gene


def stage2_loss(P, P_tilde, x, x_tilde, alpha: float = 0.5, gamma: float = 2.0,
                reduction: str = "sum") -> float:
    """Mixed image/gene reconstruction loss for ``(B, h, w, C)`` patches and ``(B, G)`` rows."""
    P, P_tilde = np.asarray(P, dtype=np.float64), np.asarray(P_tilde, dtype=np.float64)
    if P.ndim == 3:
        P, P_tilde = P[None], P_tilde[None]
    total, _, _ = spot_losses(Tensor(to_nchw(P)), Tensor(to_nchw(P_tilde)),
                              np.atleast_2d(x), np.atleast_2d(x_tilde), alpha, gamma)
    if reduction == "sum":
        return float(total.data.sum())
    if reduction == "mean":
        return float(total.data.mean())
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# subgraph batches
# ---------------------------------------------------------------------------

@dataclass
class SubgraphBatch:
    """Local token layout for one forward pass.

    ``nodes[t]`` is the spot id of token ``t``; GAT edges ``src <- dst`` and
    transformer pairs ``query <- key`` use local token indices.
    """

    nodes: np.ndarray
    targets: np.ndarray        # spot ids of the reconstructed spots
    target_tok: np.ndarray     # token index of each target
    masked_tok: np.ndarray     # tokens whose block-0 inputs are mask tokens
    edge_src: np.ndarray
    edge_dst: np.ndarray
    pair_q: np.ndarray
    pair_k: np.ndarray
    dec_seg: np.ndarray        # gene decoder edges: target position ...
    dec_tok: np.ndarray        # ... <- token (out-neighbours plus the target itself)

    @property
    def n_tokens(self) -> int:
        return len(self.nodes)


def _hop_arrays(graph: SpotGraph, targets, hops: int) -> list[np.ndarray]:
    return [np.asarray(graph.khop(int(t), hops), dtype=np.int64) for t in targets]


def _induced_edges(graph: SpotGraph, nodes: np.ndarray, local: np.ndarray):
    src = np.repeat(np.arange(len(nodes)), graph.k)
    dst_global = graph.out_neighbors[nodes].reshape(-1)
    dst = local[dst_global]
    keep = dst >= 0
    return src[keep], dst[keep]


def _decoder_edges(graph: SpotGraph, targets: np.ndarray, local: np.ndarray, target_tok: np.ndarray):
    nb = local[graph.out_neighbors[targets]]                       # (B, k)
    tok = np.concatenate([nb, target_tok[:, None]], axis=1)
    seg = np.repeat(np.arange(len(targets)), tok.shape[1])
    return seg, tok.reshape(-1)


def build_exact_batch(graph: SpotGraph, targets, hops: int = 3, mask: bool = True) -> SubgraphBatch:
    """One private copy of the ``hops``-hop subgraph per target."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("empty batch")
    parts = _hop_arrays(graph, targets, hops)
    nodes, src, dst, pq, pk, dseg, dtok, ttok = [], [], [], [], [], [], [], []
    off = 0
    for b, (t, sub) in enumerate(zip(targets, parts)):
        local = np.full(graph.n, -1, dtype=np.int64)
        local[sub] = np.arange(len(sub)) + off
        s, d = _induced_edges(graph, sub, local)
        src.append(s + off)
        dst.append(d)
        m = len(sub)
        pq.append(np.repeat(np.arange(m), m) + off)
        pk.append(np.tile(np.arange(m), m) + off)
        tok = np.append(local[graph.out_neighbors[t]], off)
        dseg.append(np.full(len(tok), b))
        dtok.append(tok)
        ttok.append(off)                      # root is first in BFS order
        nodes.append(sub)
        off += m
    ttok = np.asarray(ttok, dtype=np.int64)
    return SubgraphBatch(
        nodes=np.concatenate(nodes), targets=targets, target_tok=ttok,
        masked_tok=ttok if mask else np.zeros(0, dtype=np.int64),
        edge_src=np.concatenate(src), edge_dst=np.concatenate(dst),
        pair_q=np.concatenate(pq), pair_k=np.concatenate(pk),
        dec_seg=np.concatenate(dseg), dec_tok=np.concatenate(dtok),
    )


def build_union_batch(graph: SpotGraph, targets, hops: int = 3, mask: bool = True) -> SubgraphBatch:
    """Propagate once over the union of the targets' subgraphs."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("empty batch")
    parts = _hop_arrays(graph, targets, hops)
    nodes = np.unique(np.concatenate(parts))
    local = np.full(graph.n, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    src, dst = _induced_edges(graph, nodes, local)
    keys = np.unique(np.concatenate([
        (local[s][:, None] * len(nodes) + local[s][None, :]).reshape(-1) for s in parts
    ]))
    ttok = local[targets]
    dseg, dtok = _decoder_edges(graph, targets, local, ttok)
    return SubgraphBatch(
        nodes=nodes, targets=targets, target_tok=ttok,
        masked_tok=ttok if mask else np.zeros(0, dtype=np.int64),
        edge_src=src, edge_dst=dst,
        pair_q=keys // len(nodes), pair_k=keys % len(nodes),
        dec_seg=dseg, dec_tok=dtok,
    )


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Mgdat(Model):
    """Gene rasterizer, MGDAT blocks and the two decoders.

    Parameters
    ----------
    n_genes : int
        Width of the preprocessed expression rows.
    embed_dim : int
        D, width of the image and gene attributes.
    bottleneck_dim : int
        D', width of the fused bottleneck embedding.
    fusion : {"bottleneck", "concat"}
        ``concat`` drops the transformer and feeds ``[Z_img || Z_gene]`` to both
        graph attentions.
    """

    def __init__(self, n_genes: int, embed_dim: int = 256, bottleneck_dim: int = 16, blocks: int = 3,
                 gat_heads: int = 2, trm_layers: int = 2, trm_heads: int = 4, d2_stages: int = 3,
                 patch_size: int = 32, channels: int = 3, fusion: str = "bottleneck", seed: int = 0):
        super().__init__()
        if bottleneck_dim >= embed_dim:
            raise ValueError("bottleneck_dim must be smaller than embed_dim")
        if bottleneck_dim % trm_heads:
            raise ValueError("bottleneck_dim must be divisible by trm_heads")
        if fusion not in ("bottleneck", "concat"):
            raise ValueError(f"unknown fusion {fusion!r}")
        if patch_size != 4 * 2 ** d2_stages:
            raise ValueError("patch_size must equal 4 * 2**d2_stages")
        self.n_genes, self.D, self.Dp = n_genes, embed_dim, bottleneck_dim
        self.blocks, self.gat_heads = blocks, gat_heads
        self.trm_layers, self.trm_heads = trm_layers, trm_heads
        self.d2_stages, self.patch_size, self.channels = d2_stages, patch_size, channels
        self.fusion = fusion
        rng = np.random.default_rng(seed)
        D, Dp = embed_dim, bottleneck_dim

        self.dense(rng, "rast.0", n_genes, 512)
        self.dense(rng, "rast.1", 512, D)
        self.add("mask.img", np.zeros(D))
        self.add("mask.gene", np.zeros(D))
        h_in = D + Dp if fusion == "bottleneck" else 2 * D
        for l in range(blocks):
            if fusion == "bottleneck":
                for j in range(trm_layers):
                    w_in = 2 * D if j == 0 else Dp
                    for q in "qkv":
                        self.dense(rng, f"b{l}.trm{j}.{q}", w_in, Dp, bias=False)
                    self.dense(rng, f"b{l}.trm{j}.o", Dp, Dp)
                    self.dense(rng, f"b{l}.trm{j}.ff0", Dp, 2 * Dp)
                    self.dense(rng, f"b{l}.trm{j}.ff1", 2 * Dp, Dp)
            for m in ("img", "gene"):
                for h in range(gat_heads):
                    self.dense(rng, f"b{l}.gat.{m}{h}", h_in, D, bias=False)
                    self.add(f"b{l}.gat.{m}{h}.att", glorot_vec(rng, D))
        # D2: dense to 64x4x4, residual upsampling stages, 3x3 output conv
        c = 64
        self.dense(rng, "d2.fc", D, c * 16)
        for s in range(d2_stages):
            self.conv(rng, f"d2.up{s}", c, c // 2, 4, transposed=True)
            self.conv(rng, f"d2.res{s}", c // 2, c // 2, 3)
            c //= 2
        self.conv(rng, "d2.out", c, channels, 3)
        # D3: single graph-attention layer D -> G over N_i and i
        self.dense(rng, "d3", D, n_genes, bias=False)
        self.add("d3.att", glorot_vec(rng, n_genes))

    # -- components ----------------------------------------------------------
    def rasterize(self, x) -> Tensor:
        x = ad._as_tensor(x)
        if x.shape[-1] != self.n_genes:
            raise ValueError(f"expected {self.n_genes} genes, got {x.shape[-1]}")
        return self.linear(ad.leaky_relu(self.linear(x, "rast.0")), "rast.1")

    def _attention(self, x: Tensor, l: int, j: int, pair_q, pair_k) -> Tensor:
        n, H, dh = x.shape[0], self.trm_heads, self.Dp // self.trm_heads
        q = ad.reshape(self.linear(x, f"b{l}.trm{j}.q"), (n, H, dh))
        k = ad.reshape(self.linear(x, f"b{l}.trm{j}.k"), (n, H, dh))
        v = ad.reshape(self.linear(x, f"b{l}.trm{j}.v"), (n, H, dh))
        logits = ad.sum_(ad.index_rows(q, pair_q) * ad.index_rows(k, pair_k), axis=2) * (1.0 / np.sqrt(dh))
        a = ad.segment_softmax(logits, pair_q, n)                               # (P, H)
        msg = ad.reshape(a, a.shape + (1,)) * ad.index_rows(v, pair_k)
        out = ad.reshape(ad.segment_sum(msg, pair_q, n), (n, self.Dp))
        return self.linear(out, f"b{l}.trm{j}.o")

    def fuse_bottleneck(self, Z_img, Z_gene, l: int, pair_q=None, pair_k=None) -> Tensor:
        """Bottleneck transformer over node tokens ``[Z_img || Z_gene]``.

        ``pair_q``/``pair_k`` list the allowed query/key token pairs; by default
        every token attends to every token.
        """
        Z_img, Z_gene = ad._as_tensor(Z_img), ad._as_tensor(Z_gene)
        n = Z_img.shape[0]
        if n == 0:
            raise ValueError("empty node set")
        if Z_gene.shape[0] != n:
            raise ValueError("row counts differ")
        if pair_q is None:
            pair_q, pair_k = np.repeat(np.arange(n), n), np.tile(np.arange(n), n)
        x = ad.concat([Z_img, Z_gene], axis=1)
        for j in range(self.trm_layers):
            a = self._attention(x, l, j, pair_q, pair_k)
            x = a if j == 0 else x + a
            x = x + self.linear(ad.leaky_relu(self.linear(x, f"b{l}.trm{j}.ff0")), f"b{l}.trm{j}.ff1")
        return x

    def _gat(self, h: Tensor, name: str, src, dst) -> Tensor:
        n = h.shape[0]
        acc = None
        for hd in range(self.gat_heads):
            wh = self.linear(h, f"{name}{hd}")
            e = ad.leaky_relu(ad.index_rows(wh, src) + ad.index_rows(wh, dst))
            logit = ad.matmul(e, ad.reshape(self.params[f"{name}{hd}.att"], (self.D, 1)))
            a = ad.segment_softmax(logit, src, n)                                   # (E, 1)
            agg = ad.segment_sum(a * ad.index_rows(wh, dst), src, n)
            acc = agg if acc is None else acc + agg
        return ad.leaky_relu(acc * (1.0 / self.gat_heads))

    def mgdat_block(self, Z_img, Z_gene, l: int, src, dst, pair_q=None, pair_k=None):
        """One block: bottleneck fusion then per-modality graph attention over out-neighbours."""
        Z_img, Z_gene = ad._as_tensor(Z_img), ad._as_tensor(Z_gene)
        if self.fusion == "bottleneck":
            fb = self.fuse_bottleneck(Z_img, Z_gene, l, pair_q, pair_k)
            h_img, h_gene = ad.concat([Z_img, fb], axis=1), ad.concat([Z_gene, fb], axis=1)
        else:
            h_img = h_gene = ad.concat([Z_img, Z_gene], axis=1)
        return self._gat(h_img, f"b{l}.gat.img", src, dst), self._gat(h_gene, f"b{l}.gat.gene", src, dst)

    def decode_image(self, Z: Tensor) -> Tensor:
        h = ad.leaky_relu(self.linear(Z, "d2.fc"))
        h = ad.reshape(h, (Z.shape[0], 64, 4, 4))
        for s in range(self.d2_stages):
            up = ad.leaky_relu(self.deconv2d(h, f"d2.up{s}"))
            h = up + ad.leaky_relu(self.conv2d(up, f"d2.res{s}", stride=1, padding=1))
        return ad.sigmoid(self.conv2d(h, "d2.out", stride=1, padding=1))

    def decode_genes(self, Z_gene: Tensor, target_tok, dec_seg, dec_tok) -> Tensor:
        toks = np.unique(np.concatenate([dec_tok, target_tok]))
        pos = np.searchsorted(toks, dec_tok)
        tpos = np.searchsorted(toks, target_tok)
        wz = self.linear(ad.index_rows(Z_gene, toks), "d3")
        e = ad.leaky_relu(ad.index_rows(wz, tpos[dec_seg]) + ad.index_rows(wz, pos))
        logit = ad.matmul(e, ad.reshape(self.params["d3.att"], (self.n_genes, 1)))
        a = ad.segment_softmax(logit, dec_seg, len(target_tok))
        return ad.segment_sum(a * ad.index_rows(wz, pos), dec_seg, len(target_tok))

    # -- full pass -----------------------------------------------------------
    def forward(self, batch: SubgraphBatch, z, x, decode_image: bool = True) -> tuple[Tensor, Tensor | None]:
        """Reconstruct the batch targets.

        ``z`` holds image attributes and ``x`` expression rows for every token
        of the batch (already gathered). Returns NCHW patches (``None`` when
        ``decode_image`` is off) and ``(B, G)`` expression reconstructions.
        """
        z, x = ad._as_tensor(z), ad._as_tensor(x)
        n = batch.n_tokens
        Z_img, Z_gene = z, self.rasterize(x)
        if batch.masked_tok.size:
            flag = np.zeros((n, 1))
            flag[batch.masked_tok] = 1.0
            Z_img = Z_img * (1.0 - flag) + flag * ad.reshape(self.params["mask.img"], (1, self.D))
            Z_gene = Z_gene * (1.0 - flag) + flag * ad.reshape(self.params["mask.gene"], (1, self.D))
        for l in range(self.blocks):
            Z_img, Z_gene = self.mgdat_block(Z_img, Z_gene, l, batch.edge_src, batch.edge_dst,
                                             batch.pair_q, batch.pair_k)
        P = self.decode_image(ad.index_rows(Z_img, batch.target_tok)) if decode_image else None
        xt = self.decode_genes(Z_gene, batch.target_tok, batch.dec_seg, batch.dec_tok)
        return P, xt


def glorot_vec(rng, n: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (n + 1))
    return rng.uniform(-lim, lim, size=n)


# ---------------------------------------------------------------------------
# training and reconstruction
# ---------------------------------------------------------------------------

@dataclass
class Stage2Inputs:
    """Arrays consumed by Stage II for one dataset."""

    z: np.ndarray          # (N, D) image attributes from E1
    expr: np.ndarray       # (N, G)
    patches: np.ndarray    # (N, h, w, C)
    graph: SpotGraph


class MgdatTrainer:
    """Runs masked forward passes, training and full reconstruction.

    ``mode`` is ``"batched"`` or ``"exact"``; ``mask=False`` disables
    target-node masking; ``encoder`` plus ``finetune_e1`` lets gradients reach E1.
    """

    def __init__(self, model: Mgdat, alpha: float = 0.5, gamma: float = 2.0, mode: str = "batched",
                 mask: bool = True, hops: int = 3, encoder: PatchAutoencoder | None = None,
                 finetune_e1: bool = False):
        if mode not in ("batched", "exact"):
            raise ValueError(f"unknown mode {mode!r}")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if finetune_e1 and encoder is None:
            raise ValueError("finetune_e1 needs the Stage I encoder")
        self.model, self.alpha, self.gamma = model, alpha, gamma
        self.mode, self.mask, self.hops = mode, mask, hops
        self.encoder, self.finetune_e1 = encoder, finetune_e1
        self._conflicts: dict[int, list[set[int]]] = {}
        self._warned = False

    def build(self, graph: SpotGraph, targets) -> SubgraphBatch:
        builder = build_exact_batch if self.mode == "exact" else build_union_batch
        return builder(graph, targets, self.hops, self.mask)

    def _image_attr(self, data: Stage2Inputs, nodes: np.ndarray):
        if self.finetune_e1:
            return self.encoder.encode_tensor(Tensor(to_nchw(data.patches[nodes])))
        return data.z[nodes]

    def batch_losses(self, data: Stage2Inputs, batch: SubgraphBatch):
        # with alpha == 0 the image branch carries no loss weight, so D2 is skipped
        skip = self.alpha == 0.0
        P_t, x_t = self.model.forward(batch, self._image_attr(data, batch.nodes), data.expr[batch.nodes],
                                      decode_image=not skip)
        if skip:
            l_gene = sce_loss(data.expr[batch.targets], x_t, self.gamma)
            P_t = Tensor(np.zeros((len(batch.targets),) + to_nchw(data.patches[:1]).shape[1:]))
            return l_gene, Tensor(np.zeros(len(batch.targets))), l_gene, P_t, x_t
        P = Tensor(to_nchw(data.patches[batch.targets]))
        total, l_img, l_gene = spot_losses(P, P_t, data.expr[batch.targets], x_t, self.alpha, self.gamma)
        return total, l_img, l_gene, P_t, x_t

    def batches(self, data: Stage2Inputs, batch_size: int, rng=None) -> list[np.ndarray]:
        """Targets spread at least ``hops`` apart when feasible, else topped up with a warning."""
        order = np.arange(data.graph.n) if rng is None else rng.permutation(data.graph.n)
        key = id(data.graph)
        if key not in self._conflicts:
            self._conflicts[key] = _conflict_sets(data.graph, self.hops)
        out, n_conf = sample_batches(data.graph, order, batch_size, self.hops, self._conflicts[key])
        if n_conf and not self._warned:
            log.warning("%d of %d targets share a batch with a spot within %d hops", n_conf, data.graph.n, self.hops)
            self._warned = True
        return out

    def reconstruct(self, data: Stage2Inputs, batch_size: int = 128, seed: int = 0):
        """Reconstruct every spot once as a masked target.

        Targets are batched in a seeded random order, as in training, so spots
        admitted despite a spacing conflict are scattered over the slide.

        Returns ``(patches (N,h,w,C), expr (N,G), losses)`` where ``losses`` is a
        dict of per-spot ``total``/``image``/``gene`` arrays.
        """
        n = data.graph.n
        P_out = np.zeros(data.patches.shape)
        x_out = np.zeros(data.expr.shape)
        losses = {k: np.zeros(n) for k in ("total", "image", "gene")}
        with ad.no_grad():
            for tg in self.batches(data, batch_size, np.random.default_rng(seed)):
                batch = self.build(data.graph, tg)
                total, li, lg, P_t, x_t = self.batch_losses(data, batch)
                P_out[tg] = P_t.data.transpose(0, 2, 3, 1)
                x_out[tg] = x_t.data
                losses["total"][tg], losses["image"][tg], losses["gene"][tg] = total.data, li.data, lg.data
        return P_out, x_out, losses

    def fit(self, data: Stage2Inputs, epochs: int = 10, batch_size: int = 128, lr: float = 1e-4,
            seed: int = 0, eval_initial: bool = False) -> dict:
        """Train with Adam; returns a history dict of per-epoch mean losses."""
        history: dict[str, list[float]] = {"loss": [], "image": [], "gene": []}
        if eval_initial:
            _, _, init = self.reconstruct(data, batch_size, seed)
            history["initial"] = [float(init[k].mean()) for k in ("total", "image", "gene")]
        if epochs == 0:
            return history
        params = self.model.parameters()
        if self.finetune_e1:
            params += self.encoder.parameters("enc")
        opt = Adam(params, lr=lr)
        rng = np.random.default_rng(seed)
        for epoch in range(epochs):
            sums = np.zeros(3)
            for tg in self.batches(data, batch_size, rng):
                batch = self.build(data.graph, tg)
                opt.zero_grad()
                try:
                    total, li, lg, _, _ = self.batch_losses(data, batch)
                    ad.backward(ad.mean(total))
                except ad.NonFiniteError as exc:
                    raise DivergenceError(f"stage II diverged in epoch {epoch}: {exc}") from exc
                opt.step()
                sums += [total.data.sum(), li.data.sum(), lg.data.sum()]
            for key, v in zip(("loss", "image", "gene"), sums / data.graph.n):
                history[key].append(float(v))
            log.info("stage II epoch %d/%d loss %.5f", epoch + 1, epochs, history["loss"][-1])
        return history
