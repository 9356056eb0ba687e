"""Spatial transcriptomics dataset container, MTDS file format and preprocessing."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

log = logging.getLogger(__name__)

MTDS_MAGIC = b"MTDS"
MTDS_VERSION = 1

TAG_EXPR, TAG_COORDS, TAG_PATCHES, TAG_LABELS, TAG_GENE_IDS = 1, 2, 3, 4, 5


class DatasetFormatError(ValueError):
    """Malformed MTDS container."""


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SpatialDataset:
    """Spots with an expression matrix, array coordinates and RGB patches.

    ``patches`` is ``(N, h, w, C)`` with values in [0, 1].
    """

    expr: np.ndarray
    coords: np.ndarray
    patches: np.ndarray
    labels: np.ndarray | None = None
    gene_ids: tuple[str, ...] = ()

    def __post_init__(self):
        expr = np.asarray(self.expr, dtype=np.float64)
        coords = np.asarray(self.coords, dtype=np.float64)
        patches = np.asarray(self.patches, dtype=np.float64)
        object.__setattr__(self, "expr", expr)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "patches", patches)
        if expr.ndim != 2 or expr.shape[0] == 0:
            raise EmptyDatasetError("dataset has no spots")
        n = expr.shape[0]
        if coords.shape != (n, 2):
            raise ValueError(f"coords must be ({n}, 2), got {coords.shape}")
        if patches.ndim != 4 or patches.shape[0] != n:
            raise ValueError(f"patches must be ({n}, h, w, C), got {patches.shape}")
        if np.any(expr < 0):
            raise ValueError("expression matrix has negative entries")
        if len(np.unique(coords, axis=0)) != n:
            raise ValueError("spot coordinates must be unique")
        if self.labels is not None:
            labels = np.asarray(self.labels).astype(np.int64)
            if labels.shape != (n,) or not np.isin(labels, (0, 1)).all():
                raise ValueError("labels must be an N-vector of 0/1")
            object.__setattr__(self, "labels", labels)
        gene_ids = tuple(self.gene_ids) or tuple(f"g{j}" for j in range(expr.shape[1]))
        if len(gene_ids) != expr.shape[1]:
            raise ValueError("gene_ids length does not match the number of genes")
        object.__setattr__(self, "gene_ids", gene_ids)

    @property
    def n_spots(self) -> int:
        return self.expr.shape[0]

    @property
    def n_genes(self) -> int:
        return self.expr.shape[1]

    def with_expr(self, expr: np.ndarray, gene_ids: Sequence[str] | None = None) -> "SpatialDataset":
        return replace(self, expr=expr, gene_ids=tuple(gene_ids) if gene_ids is not None else ())

    def select_genes(self, idx) -> "SpatialDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return replace(self, expr=self.expr[:, idx], gene_ids=tuple(self.gene_ids[i] for i in idx))

    def subset(self, spots) -> "SpatialDataset":
        spots = np.asarray(spots, dtype=np.intp)
        return replace(
            self,
            expr=self.expr[spots],
            coords=self.coords[spots],
            patches=self.patches[spots],
            labels=None if self.labels is None else self.labels[spots],
        )


@dataclass
class PreprocessReport:
    genes_removed: int = 0
    hvg_selected: int = 0
    zero_proportion_mean: float = 0.0
    kept_genes: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# MTDS container
# ---------------------------------------------------------------------------

def _section(tag: int, payload: bytes) -> bytes:
    return struct.pack("<BQ", tag, len(payload)) + payload


def save_dataset(d: SpatialDataset, path) -> None:
    n, g = d.expr.shape
    h, w, c = d.patches.shape[1:]
    out = bytearray(MTDS_MAGIC + struct.pack("<H", MTDS_VERSION))
    out += _section(TAG_EXPR, struct.pack("<II", n, g) + d.expr.astype("<f4").tobytes())
    out += _section(TAG_COORDS, d.coords.astype("<f4").tobytes())
    pix = np.clip(np.rint(d.patches * 255.0), 0, 255).astype(np.uint8)
    out += _section(TAG_PATCHES, struct.pack("<HHH", h, w, c) + pix.tobytes())
    if d.labels is not None:
        out += _section(TAG_LABELS, d.labels.astype(np.uint8).tobytes())
    if d.gene_ids:
        ids = bytearray()
        for gid in d.gene_ids:
            raw = gid.encode("utf-8")
            ids += struct.pack("<I", len(raw)) + raw
        out += _section(TAG_GENE_IDS, bytes(ids))
    Path(path).write_bytes(bytes(out))


def load_dataset(path) -> SpatialDataset:
    """Read an MTDS file; patch bytes are scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    if buf[:4] != MTDS_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 6 or struct.unpack_from("<H", buf, 4)[0] != MTDS_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version")
    off = 6
    sections: dict[int, bytes] = {}
    while off < len(buf):
        if off + 9 > len(buf):
            raise DatasetFormatError(f"{path}: truncated section header")
        tag, length = struct.unpack_from("<BQ", buf, off)
        off += 9
        if off + length > len(buf):
            raise DatasetFormatError(f"{path}: section {tag} length {length} exceeds file")
        sections[tag] = buf[off:off + length]
        off += length
    for tag in (TAG_EXPR, TAG_COORDS, TAG_PATCHES):
        if tag not in sections:
            raise DatasetFormatError(f"{path}: missing required section {tag}")

    raw = sections[TAG_EXPR]
    n, g = struct.unpack_from("<II", raw, 0)
    if n == 0:
        raise EmptyDatasetError(f"{path}: dataset has no spots")
    if len(raw) != 8 + 4 * n * g:
        raise DatasetFormatError(f"{path}: expr section length mismatch")
    expr = np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, g).astype(np.float64)
    if np.any(expr < 0):
        raise DatasetFormatError(f"{path}: negative counts")

    raw = sections[TAG_COORDS]
    if len(raw) != 8 * n:
        raise DatasetFormatError(f"{path}: coords section length mismatch")
    coords = np.frombuffer(raw, dtype="<f4").reshape(n, 2).astype(np.float64)

    raw = sections[TAG_PATCHES]
    h, w, c = struct.unpack_from("<HHH", raw, 0)
    if len(raw) != 6 + n * h * w * c:
        raise DatasetFormatError(f"{path}: patches section length mismatch")
    patches = np.frombuffer(raw, dtype=np.uint8, offset=6).reshape(n, h, w, c) / 255.0

    labels = None
    if TAG_LABELS in sections:
        raw = sections[TAG_LABELS]
        if len(raw) != n:
            raise DatasetFormatError(f"{path}: labels section length mismatch")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    gene_ids: list[str] = []
    if TAG_GENE_IDS in sections:
        raw, pos = sections[TAG_GENE_IDS], 0
        while pos < len(raw):
            (ln,) = struct.unpack_from("<I", raw, pos)
            gene_ids.append(raw[pos + 4:pos + 4 + ln].decode("utf-8"))
            pos += 4 + ln
        if len(gene_ids) != g:
            raise DatasetFormatError(f"{path}: expected {g} gene ids, found {len(gene_ids)}")
    return SpatialDataset(expr=expr, coords=coords, patches=patches, labels=labels, gene_ids=tuple(gene_ids))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def filter_genes(d: SpatialDataset, min_spots: int = 10) -> tuple[SpatialDataset, PreprocessReport]:
    """Drop genes with nonzero counts in fewer than ``min_spots`` spots."""
    if min_spots < 1:
        raise ValueError("min_spots must be >= 1")
    keep = np.flatnonzero((d.expr > 0).sum(axis=0) >= min_spots)
    if keep.size == 0:
        raise ValueError(f"no gene is detected in at least {min_spots} spots")
    report = PreprocessReport(genes_removed=d.n_genes - keep.size)
    return d.select_genes(keep), report


def normalize_log(d: SpatialDataset) -> SpatialDataset:
    """Library-size normalize to the median row sum, then ``log1p``."""
    totals = d.expr.sum(axis=1)
    if np.any(totals <= 0):
        raise ValueError(f"{int(np.sum(totals <= 0))} spot(s) have zero total counts")
    scale = np.median(totals) / totals
    return d.with_expr(np.log1p(d.expr * scale[:, None]), d.gene_ids)


def hvg_ranking(expr: np.ndarray) -> np.ndarray:
    """Gene indices sorted by decreasing variance, ties by index ascending."""
    var = expr.var(axis=0)
    return np.lexsort((np.arange(var.size), -var))


def select_hvg(d: SpatialDataset, n_top: int) -> SpatialDataset:
    if n_top <= 0:
        raise ValueError("n_top must be positive")
    if n_top > d.n_genes:
        raise ValueError(f"n_top={n_top} exceeds the {d.n_genes} available genes")
    keep = np.sort(hvg_ranking(d.expr)[:n_top])
    return d.select_genes(keep)


def zero_proportion_mean(d: SpatialDataset | np.ndarray) -> float:
    """Mean over spots of the fraction of zero entries in each row."""
    expr = d.expr if isinstance(d, SpatialDataset) else np.asarray(d)
    return float(np.mean(np.mean(expr == 0, axis=1)))


def concat_datasets(datasets: Sequence[SpatialDataset], spacing: float | None = None) -> SpatialDataset:
    """Pool datasets over their shared genes.

    Coordinates of later datasets are shifted along x so that spots of different
    slides never become spatial neighbours.
    """
    if len(datasets) == 1:
        return datasets[0]
    shared = [g for g in datasets[0].gene_ids if all(g in set(d.gene_ids) for d in datasets[1:])]
    if not shared:
        raise ValueError("datasets share no genes")
    exprs, coords, patches, labels = [], [], [], []
    shift = 0.0
    for d in datasets:
        pos = {g: j for j, g in enumerate(d.gene_ids)}
        exprs.append(d.expr[:, [pos[g] for g in shared]])
        c = d.coords.copy()
        c[:, 0] += shift - c[:, 0].min()
        shift = c[:, 0].max() + (spacing if spacing is not None else 100.0)
        coords.append(c)
        patches.append(d.patches)
        labels.append(d.labels if d.labels is not None else np.zeros(d.n_spots, dtype=np.int64))
    return SpatialDataset(
        expr=np.vstack(exprs), coords=np.vstack(coords), patches=np.concatenate(patches),
        labels=np.concatenate(labels), gene_ids=tuple(shared),
    )


def _select_ids(d: SpatialDataset, ids: Sequence[str]) -> SpatialDataset:
    pos = {g: j for j, g in enumerate(d.gene_ids)}
    missing = [g for g in ids if g not in pos]
    if missing:
        raise ValueError(f"dataset lacks {len(missing)} required genes, e.g. {missing[:3]}")
    return d.select_genes([pos[g] for g in ids])


class Preprocessor(TransformerMixin, BaseEstimator):
    """Gene filter, library-size log normalisation and HVG selection.

    ``fit`` learns the retained and highly variable gene ids from reference
    data; ``transform`` applies the same gene lists to any dataset. With
    ``hvg_mode="per_dataset"`` HVGs are ranked within each reference dataset
    and the per-dataset top lists are merged by best rank.
    """

    def __init__(self, min_spots: int = 10, n_hvg: int = 3000, hvg_mode: str = "pooled"):
        self.min_spots = min_spots
        self.n_hvg = n_hvg
        self.hvg_mode = hvg_mode

    def fit(self, X, y=None):
        datasets = list(X) if isinstance(X, (list, tuple)) else [X]
        if self.hvg_mode not in ("pooled", "per_dataset"):
            raise ValueError(f"unknown hvg_mode {self.hvg_mode!r}")
        if self.n_hvg <= 0:
            raise ValueError("n_hvg must be positive")
        pooled = concat_datasets(datasets)
        filtered, report = filter_genes(pooled, self.min_spots)
        n_top = self.n_hvg
        if n_top > filtered.n_genes:
            log.warning("n_hvg=%d exceeds the %d retained genes; keeping all", n_top, filtered.n_genes)
            n_top = filtered.n_genes
        if self.hvg_mode == "pooled":
            normed = normalize_log(filtered)
            keep = np.sort(hvg_ranking(normed.expr)[:n_top])
        else:
            best = np.full(filtered.n_genes, np.iinfo(np.int64).max)
            for d in datasets:
                normed = normalize_log(_select_ids(d, filtered.gene_ids))
                rank = np.empty(filtered.n_genes, dtype=np.int64)
                rank[hvg_ranking(normed.expr)] = np.arange(filtered.n_genes)
                best = np.minimum(best, rank)
            keep = np.sort(np.lexsort((np.arange(filtered.n_genes), best))[:n_top])
        self.filtered_genes_ = tuple(filtered.gene_ids)
        self.hvg_genes_ = tuple(filtered.gene_ids[i] for i in keep)
        report.hvg_selected = len(self.hvg_genes_)
        report.zero_proportion_mean = zero_proportion_mean(pooled)
        report.kept_genes = list(self.hvg_genes_)
        self.report_ = report
        return self

    def transform(self, X):
        check_is_fitted(self, "hvg_genes_")
        if isinstance(X, (list, tuple)):
            return [self.transform(d) for d in X]
        d = normalize_log(_select_ids(X, self.filtered_genes_))
        return _select_ids(d, self.hvg_genes_)
