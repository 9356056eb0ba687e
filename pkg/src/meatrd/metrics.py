"""Evaluation: rank AUC and F1 at the true-prevalence cut."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class EvalResult:
    auc: float
    f1: float
    precision: float
    recall: float
    threshold_used: float


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(np.int64).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, y


def _ranks(s: np.ndarray) -> np.ndarray:
    """1-based average ranks (ties share the mean rank)."""
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    first = np.r_[True, sorted_s[1:] != sorted_s[:-1]]
    group = np.cumsum(first) - 1
    starts = np.flatnonzero(first)
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0
    out = np.empty(len(s))
    out[order] = avg[group]
    return out


def auc(scores, labels) -> float:
    """Mann-Whitney probability that a positive outranks a negative, ties counted 1/2."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes")
    r = _ranks(s)
    return float((r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def top_q(scores, q: int) -> np.ndarray:
    """Indices of the ``q`` highest scores; ties at the cut go to the smaller index."""
    s = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(s)), -s))
    return order[:q]


def f1_at_prevalence(scores, labels) -> EvalResult:
    """Call exactly as many top-scoring spots positive as there are true anomalies."""
    s, y = _check(scores, labels)
    q = int(y.sum())
    if q == 0:
        raise ValueError("no positive labels")
    pred = np.zeros(len(s), dtype=np.int64)
    chosen = top_q(s, q)
    pred[chosen] = 1
    tp = int(np.sum((pred == 1) & (y == 1)))
    precision = tp / q
    recall = tp / q
    f1 = 0.0 if tp == 0 else 2 * precision * recall / (precision + recall)
    a = auc(s, y) if q < len(y) else float("nan")
    return EvalResult(auc=a, f1=f1, precision=precision, recall=recall, threshold_used=float(s[chosen[-1]]))


def evaluate(scores, labels) -> EvalResult:
    return f1_at_prevalence(scores, labels)


def write_eval_csv(path, rows: list[dict]) -> None:
    """Rows are dicts holding EvalResult fields plus any identifying columns."""
    if not rows:
        raise ValueError("no rows to write")
    metric_cols = [f.name for f in fields(EvalResult)]
    extra = [k for k in rows[0] if k not in metric_cols]
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=extra + metric_cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def result_row(result: EvalResult, **ids) -> dict:
    return {**ids, **asdict(result)}


def summary_line(result: EvalResult, name: str = "") -> str:
    head = f"{name}: " if name else ""
    return (f"{head}AUC={result.auc:.4f} F1={result.f1:.4f} precision={result.precision:.4f} "
            f"recall={result.recall:.4f} threshold={result.threshold_used:.6g}")
