"""Pipeline configuration with flat dotted keys."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

VARIANTS = ("full", "st_only", "image_only", "no_mgdat", "no_tnm", "no_re", "no_oc")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "ablation": "full",
    "graph.k": 6,
    "preprocess.min_spots": 10,
    "preprocess.n_hvg": 3000,
    "preprocess.hvg_mode": "pooled",
    "model.embed_dim": 256,
    "mgdat.blocks": 3,
    "mgdat.heads": 2,
    "mgdat.bottleneck_dim": 16,
    "mgdat.trm_layers": 2,
    "mgdat.trm_heads": 4,
    "mgdat.d2_stages": 3,
    "mgdat.hops": 3,
    "mgdat.exact_subgraph": False,
    "mgdat.finetune_e1": False,
    "loss.alpha": 0.5,
    "loss.gamma": 2.0,
    "occ.beta": 0.5,
    "occ.adaptive_beta": False,
    "occ.dim": 256,
    "occ.recompute_center": True,
    "stage1.epochs": 30,
    "stage1.batch": 128,
    "stage1.lr": 1e-4,
    "stage2.epochs": 10,
    "stage2.batch": 128,
    "stage2.lr": 1e-4,
    "stage3.epochs": 5,
    "stage3.batch": 128,
    "stage3.lr": 1e-4,
    "em.max_iter": 200,
    "em.tol": 1e-6,
    "em.a": 1.0,
    "em.b": 10.0,
    "em.kappa0": 0.01,
    "em.nu0": 3.0,
    "em.variance_form": "normalized",
}


class ConfigError(ValueError):
    """Malformed or out-of-range configuration."""


def param_name(key: str) -> str:
    """Dotted config key to estimator parameter name."""
    return key.replace(".", "_")


def validate(cfg: dict[str, Any]) -> dict[str, Any]:
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    out = dict(DEFAULTS)
    for k, v in cfg.items():
        ref = DEFAULTS[k]
        if isinstance(ref, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{k} must be a boolean")
        elif isinstance(ref, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{k} must be an integer")
        elif isinstance(ref, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{k} must be a number")
            v = float(v)
        elif isinstance(ref, str) and not isinstance(v, str):
            raise ConfigError(f"{k} must be a string")
        out[k] = v
    if out["ablation"] not in VARIANTS:
        raise ConfigError(f"ablation must be one of {VARIANTS}")
    if out["preprocess.hvg_mode"] not in ("pooled", "per_dataset"):
        raise ConfigError("preprocess.hvg_mode must be 'pooled' or 'per_dataset'")
    if out["em.variance_form"] not in ("normalized", "printed"):
        raise ConfigError("em.variance_form must be 'normalized' or 'printed'")
    for k in ("graph.k", "preprocess.min_spots", "preprocess.n_hvg", "model.embed_dim", "mgdat.blocks",
              "mgdat.heads", "mgdat.bottleneck_dim", "occ.dim", "stage1.batch", "stage2.batch",
              "stage3.batch", "em.max_iter"):
        if out[k] < 1:
            raise ConfigError(f"{k} must be >= 1")
    for k in ("stage1.epochs", "stage2.epochs", "stage3.epochs"):
        if out[k] < 0:
            raise ConfigError(f"{k} must be >= 0")
    if not 0.0 < out["loss.alpha"] < 1.0:
        raise ConfigError("loss.alpha must lie strictly between 0 and 1")
    if not 0.0 < out["occ.beta"] < 1.0:
        raise ConfigError("occ.beta must lie strictly between 0 and 1")
    if out["loss.gamma"] < 1.0:
        raise ConfigError("loss.gamma must be >= 1")
    if out["mgdat.bottleneck_dim"] >= out["model.embed_dim"]:
        raise ConfigError("mgdat.bottleneck_dim must be smaller than model.embed_dim")
    return out


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Read a JSON object of dotted keys, apply ``overrides`` and validate."""
    cfg: dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        cfg.update(raw)
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return validate(cfg)


def to_params(cfg: dict[str, Any]) -> dict[str, Any]:
    return {param_name(k): v for k, v in cfg.items()}


def from_params(params: dict[str, Any]) -> dict[str, Any]:
    names = {param_name(k): k for k in DEFAULTS}
    return {names[k]: v for k, v in params.items() if k in names}


def stage_seed(master: int, stage: str) -> int:
    """Per-stage seeds derived from the master seed by fixed offsets."""
    offsets = {"stage1": 101, "stage2": 202, "stage3": 303, "synth": 404}
    return int(master) * 1000 + offsets[stage]
