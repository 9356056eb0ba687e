"""Synthetic reference/target spot datasets and the ablation benchmark harness."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import SpatialDataset, save_dataset
from .graph import hex_lattice, square_lattice
from .metrics import EvalResult, evaluate, result_row, write_eval_csv

log = logging.getLogger(__name__)

TISSUE_WAVELENGTH = 8.0  # lattice units
PROGRAM_WIDTH = 0.25


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings; ``anomaly_radius=None`` sizes the disk from ``anomaly_fraction``."""

    n_spots: int = 2000
    n_ref_spots: int = 400
    grid: str = "hex"
    n_genes: int = 200
    anomaly_fraction: float = 0.1
    anomaly_radius: float | None = None
    gene_shift: float = 1.5
    shifted_gene_fraction: float = 0.3
    image_shift: float = 0.25
    dropout_rate: float = 0.0
    n_programs: int = 3
    patch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.grid not in ("hex", "square"):
            raise ValueError(f"grid must be 'hex' or 'square', got {self.grid!r}")
        if not 0.0 <= self.anomaly_fraction < 1.0:
            raise ValueError("anomaly_fraction must lie in [0, 1)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.n_spots < 2 or self.n_ref_spots < 2 or self.n_genes < 1:
            raise ValueError("need at least 2 spots and 1 gene")
        if not 0.0 < self.shifted_gene_fraction <= 1.0:
            raise ValueError("shifted_gene_fraction must lie in (0, 1]")


PRESETS = {
    "standard": SynthConfig(),
    "camouflaged": SynthConfig(image_shift=0.0),
}


def preset(name: str, **overrides) -> SynthConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass(frozen=True)
class AnomalyRegion:
    center: tuple[float, float]
    radius: float


def _lattice(n: int, grid: str) -> np.ndarray:
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    pts = hex_lattice(rows, cols) if grid == "hex" else square_lattice(rows, cols)
    return pts[:n]


@dataclass
class _Tissue:
    """Slide-independent tissue identity shared by reference and target."""

    base: np.ndarray
    loadings: np.ndarray
    colors: np.ndarray
    shift_sign: np.ndarray


def _tissue(cfg: SynthConfig, rng: np.random.Generator) -> _Tissue:
    G, K = cfg.n_genes, cfg.n_programs
    base = np.exp(rng.normal(np.log(8.0), 1.0, size=G))
    loadings = rng.normal(0.0, 0.6, size=(K, G))
    colors = rng.uniform(0.15, 0.45, size=(K, 3))
    n_shift = max(1, int(round(cfg.shifted_gene_fraction * G)))
    sign = np.zeros(G)
    picked = rng.choice(G, size=n_shift, replace=False)
    sign[picked] = rng.choice([-1.0, 1.0], size=n_shift)
    return _Tissue(base, loadings, colors, sign)


def _fields(coords: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Program activities in [0, 1] along one latent tissue axis.

    The axis is a smooth random field rank-transformed to a uniform marginal,
    so every slide, however small, covers the same range of normal tissue states.
    """
    acc = np.zeros(len(coords))
    for _ in range(3):
        theta = rng.uniform(0, 2 * np.pi)
        lam = TISSUE_WAVELENGTH * rng.uniform(0.75, 1.25)
        w = 2 * np.pi / lam * np.array([np.cos(theta), np.sin(theta)])
        acc += np.sin(coords @ w + rng.uniform(0, 2 * np.pi))
    rank = np.argsort(np.argsort(acc, kind="stable"), kind="stable")
    t = (rank + 0.5) / len(acc)
    mu = np.linspace(0.0, 1.0, k) if k > 1 else np.array([0.5])
    return np.exp(-((t[:, None] - mu[None, :]) ** 2) / (2 * PROGRAM_WIDTH ** 2))


def _render(fields: np.ndarray, tissue: _Tissue, size: int, bright: np.ndarray, freq_shift: np.ndarray,
            rng: np.random.Generator) -> np.ndarray:
    n = len(fields)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    weights = fields / fields.sum(axis=1, keepdims=True)
    color = weights @ tissue.colors + 0.25 + bright[:, None]
    theta = np.pi * fields[:, 0] + rng.uniform(-0.2, 0.2, size=n)
    freq = 2 * np.pi * (0.08 + 0.06 * fields[:, 1] + freq_shift)
    phase = rng.uniform(0, 2 * np.pi, size=n)
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    tex = 0.12 * np.sin(freq[:, None, None] * proj + phase[:, None, None])
    patches = color[:, None, None, :] + tex[..., None] * np.array([1.0, 0.8, 0.6])
    patches += rng.normal(0.0, 0.02, size=patches.shape)
    return np.clip(patches, 0.0, 1.0)


def _counts(fields: np.ndarray, tissue: _Tissue, shift: np.ndarray, dropout: float,
            rng: np.random.Generator) -> np.ndarray:
    n = len(fields)
    log_rate = np.log(tissue.base)[None, :] + (fields - 0.5) @ tissue.loadings
    log_rate = log_rate + shift[:, None] * tissue.shift_sign[None, :]
    lib = np.exp(rng.normal(0.0, 0.2, size=n))
    counts = rng.poisson(np.exp(log_rate) * lib[:, None]).astype(np.float64)
    if dropout > 0:
        counts[rng.random(counts.shape) < dropout] = 0.0
    empty = counts.sum(axis=1) == 0
    if np.any(empty):
        # keep every spot normalisable
        counts[empty, rng.integers(0, counts.shape[1], size=int(empty.sum()))] = 1.0
    return counts


def _region(coords: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, AnomalyRegion]:
    n = len(coords)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    half = float(np.min(hi - lo)) / 2.0
    if cfg.anomaly_radius is None and cfg.anomaly_fraction == 0:
        return np.zeros(n, dtype=np.int64), AnomalyRegion((float("nan"), float("nan")), 0.0)
    if cfg.anomaly_radius is not None and cfg.anomaly_radius > half:
        raise ValueError(f"anomaly disk radius {cfg.anomaly_radius} exceeds the lattice half-width {half:.2f}")
    mid = (lo + hi) / 2.0
    center = mid + rng.uniform(-0.25, 0.25, size=2) * (hi - lo) / 2.0
    dist = np.linalg.norm(coords - center, axis=1)
    if cfg.anomaly_radius is not None:
        radius = float(cfg.anomaly_radius)
        labels = (dist <= radius).astype(np.int64)
    else:
        q = int(round(cfg.anomaly_fraction * n))
        order = np.lexsort((np.arange(n), dist))
        labels = np.zeros(n, dtype=np.int64)
        labels[order[:q]] = 1
        radius = float(dist[order[q - 1]]) if q else 0.0
        if radius > half:
            raise ValueError(f"anomaly disk (radius {radius:.2f}) does not fit the lattice")
    return labels, AnomalyRegion((float(center[0]), float(center[1])), radius)


def _slide(n: int, cfg: SynthConfig, tissue: _Tissue, rng: np.random.Generator,
           anomalous: bool) -> tuple[SpatialDataset, AnomalyRegion | None]:
    coords = _lattice(n, cfg.grid)
    fields = _fields(coords, cfg.n_programs, rng)
    if anomalous:
        labels, region = _region(coords, cfg, rng)
    else:
        labels, region = np.zeros(n, dtype=np.int64), None
    a = labels.astype(np.float64)
    patches = _render(fields, tissue, cfg.patch_size, bright=cfg.image_shift * a,
                      freq_shift=0.4 * cfg.image_shift * a, rng=rng)
    expr = _counts(fields, tissue, cfg.gene_shift * a, cfg.dropout_rate, rng)
    gene_ids = tuple(f"gene{j:04d}" for j in range(cfg.n_genes))
    return SpatialDataset(expr=expr, coords=coords, patches=patches, labels=labels, gene_ids=gene_ids), region


def generate_with_info(cfg: SynthConfig) -> tuple[SpatialDataset, SpatialDataset, AnomalyRegion]:
    """Reference (inliers only), target (one anomalous disk) and the disk geometry."""
    root = np.random.SeedSequence(cfg.seed)
    s_tissue, s_ref, s_tgt = (np.random.default_rng(s) for s in root.spawn(3))
    tissue = _tissue(cfg, s_tissue)
    reference, _ = _slide(cfg.n_ref_spots, cfg, tissue, s_ref, anomalous=False)
    target, region = _slide(cfg.n_spots, cfg, tissue, s_tgt, anomalous=True)
    return reference, target, region


def generate(cfg: SynthConfig) -> tuple[SpatialDataset, SpatialDataset]:
    reference, target, _ = generate_with_info(cfg)
    return reference, target


def write_pair(cfg: SynthConfig, out_dir) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reference, target, region = generate_with_info(cfg)
    paths = {"reference": str(out / "reference.mtds"), "target": str(out / "target.mtds")}
    save_dataset(reference, paths["reference"])
    save_dataset(target, paths["target"])
    info = {"config": asdict(cfg), "anomaly_center": list(region.center), "anomaly_radius": region.radius,
            "n_anomalies": int(target.labels.sum())}
    paths["synth"] = str(out / "synth.json")
    Path(paths["synth"]).write_text(json.dumps(info, indent=2), encoding="utf-8")
    return paths


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATIONS = ("full", "st_only", "image_only", "no_mgdat", "no_tnm", "no_re", "no_oc")

# A 400-spot reference gives 4 optimiser steps per epoch at batch 128, so the
# benchmark raises the Stage I and II learning rates; Stage III and everything
# else keep the defaults.
BENCH_CONFIG = {"stage1.lr": 1e-3, "stage2.lr": 1e-3}


@dataclass
class AblationRunner:
    """Fits ablation variants on one reference/target pair, reusing shared stages.

    Stage I is shared by every variant; Stage II is shared by variants whose
    Stage II surgery is identical (``full``, ``no_re`` and ``no_oc``).
    """

    reference: SpatialDataset
    target: SpatialDataset
    config: dict
    models: dict = field(default_factory=dict)
    _stage1: object = None
    _stage2: dict = field(default_factory=dict)

    def fit(self, variant: str, **overrides):
        from .pipeline import MEATRD, VARIANTS

        if variant not in VARIANTS:
            raise ValueError(f"unknown ablation variant {variant!r}")
        key = (variant, tuple(sorted(overrides.items())))
        if key in self.models:
            return self.models[key]
        params = {**self.config, "ablation": variant, **overrides}
        from . import config as cfgmod

        model = MEATRD(**cfgmod.to_params(cfgmod.validate(params)))
        s2key = (VARIANTS[variant].stage2_key(), params.get("mgdat.finetune_e1", False))
        model.fit(self.reference, stage1=self._stage1, stage2=self._stage2.get(s2key))
        self._stage1 = model.encoder_
        if not params.get("mgdat.finetune_e1", False):
            self._stage2[s2key] = model.stage2_
        self.models[key] = model
        return model

    def run(self, variant: str, **overrides) -> EvalResult:
        model = self.fit(variant, **overrides)
        return evaluate(model.score_samples(self.target), self.target.labels)


def run_ablation(variant: str, datasets: tuple[SpatialDataset, SpatialDataset], cfg: dict | None = None) -> EvalResult:
    """Fit one variant on ``datasets = (reference, target)`` and evaluate on the target."""
    reference, target = datasets
    return AblationRunner(reference, target, dict(cfg or {})).run(variant)


def run_benchmark(out_dir, seeds=(0, 1, 2), variants=ABLATIONS, synth: SynthConfig | None = None,
                  config: dict | None = None) -> dict:
    """Ablation sweep over seeds; writes MTDS pairs, ``eval.csv`` and ``benchmark.json``.

    ``config`` entries override :data:`BENCH_CONFIG`.
    """
    config = {**BENCH_CONFIG, **(config or {})}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synth = synth or PRESETS["standard"]
    rows = []
    runs = []
    for seed in seeds:
        scfg = replace(synth, seed=int(seed))
        paths = write_pair(scfg, out / f"seed{seed}")
        reference, target = generate(scfg)
        runner = AblationRunner(reference, target, {**(config or {}), "seed": int(seed)})
        for v in variants:
            res = runner.run(v)
            log.info("seed %d %s AUC %.4f F1 %.4f", seed, v, res.auc, res.f1)
            rows.append(result_row(res, seed=int(seed), variant=v))
        runs.append({"seed": int(seed), "synth": asdict(scfg), "data": paths})
    csv_path = out / "eval.csv"
    write_eval_csv(csv_path, rows)
    manifest = {"kind": "benchmark", "seeds": [int(s) for s in seeds], "variants": list(variants),
                "config": config, "runs": runs, "results": str(csv_path)}
    (out / "benchmark.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return {"rows": rows, "manifest": manifest}
