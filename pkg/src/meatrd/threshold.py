"""MAP-EM fit of a two-component Gaussian mixture over anomaly scores.

Component 1 is the anomalous (higher-mean) component. The anomaly weight has a
Beta(a, b) prior and each component's (mean, variance) a Normal-Inverse-chi^2
prior whose hyperparameters come from inlier reference scores.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GmmPriors:
    m0: float
    kappa0: float = 0.01
    s0_sq: float = 1.0
    nu0: float = 3.0
    a: float = 1.0
    b: float = 10.0

    def __post_init__(self):
        if self.kappa0 <= 0 or self.nu0 <= 0 or self.s0_sq <= 0:
            raise ValueError("kappa0, nu0 and s0_sq must be positive")
        if self.a < 1 or self.b < 1:
            raise ValueError("Beta hyperparameters must be >= 1")

    @property
    def pi_mode(self) -> float:
        den = self.a + self.b - 2.0
        return (self.a - 1.0) / den if den > 0 else 0.0


@dataclass
class GmmFit:
    pi1: float
    mu1: float
    var1: float
    mu2: float
    var2: float
    responsibilities: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)), repr=False)
    iterations: int = 0
    converged: bool = False
    degenerate: bool = False
    log_posterior: list[float] = field(default_factory=list)

    def params(self) -> np.ndarray:
        return np.array([self.pi1, self.mu1, self.mu2, self.var1, self.var2])


def init_priors(reference_scores, kappa0: float = 0.01, nu0: float = 3.0, a: float = 1.0,
                b: float = 10.0) -> GmmPriors:
    """Prior hyperparameters from inlier reference scores (population variance)."""
    d = np.asarray(reference_scores, dtype=np.float64).ravel()
    if d.size < 2:
        raise ValueError("need at least 2 reference scores")
    if not np.all(np.isfinite(d)):
        raise ValueError("reference scores must be finite")
    m0 = float(d.mean())
    s0 = float(np.mean((d - m0) ** 2))
    if s0 < VAR_FLOOR:
        log.warning("reference scores are constant; s0^2 floored to %g", VAR_FLOOR)
        s0 = VAR_FLOOR
    return GmmPriors(m0=m0, kappa0=kappa0, s0_sq=s0, nu0=nu0, a=a, b=b)


def _log_normal(d: np.ndarray, mu: float, var: float) -> np.ndarray:
    return -0.5 * (LOG_2PI + np.log(var) + (d - mu) ** 2 / var)


def _log_weighted(d: np.ndarray, fit: GmmFit) -> np.ndarray:
    """(N, 2) array of ``log pi_k + log N(d | mu_k, var_k)``."""
    with np.errstate(divide="ignore"):
        lp = np.log([fit.pi1, 1.0 - fit.pi1])
    return np.column_stack([lp[0] + _log_normal(d, fit.mu1, fit.var1),
                            lp[1] + _log_normal(d, fit.mu2, fit.var2)])


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True)))[:, 0]


def e_step(scores, fit: GmmFit) -> np.ndarray:
    """Posterior component memberships, rows summing to one."""
    d = np.asarray(scores, dtype=np.float64).ravel()
    if not np.all(np.isfinite(d)):
        raise ValueError("scores must be finite")
    lw = _log_weighted(d, fit)
    return np.exp(lw - _logsumexp_rows(lw)[:, None])


def m_step(scores, resp, priors: GmmPriors, variance_form: str = "normalized") -> GmmFit:
    """MAP update of (pi1, mu_k, var_k) from soft memberships.

    ``variance_form="printed"`` uses the unnormalised scatter
    ``nu0 s0^2 + sum z d^2 + kappa0 m0^2 - zbar m_k^2`` as the posterior ``s_k^2``;
    ``"normalized"`` divides the conjugate scatter (with ``kappa_k m_k^2``) by
    ``nu_k``. Both plug into ``var_k = nu_k s_k^2 / (nu_k + 3)``.
    """
    d = np.asarray(scores, dtype=np.float64).ravel()
    resp = np.asarray(resp, dtype=np.float64).reshape(len(d), 2)
    p = priors
    zbar = resp.sum(axis=0)
    a_t, b_t = p.a + zbar[0], p.b + zbar[1]
    den = a_t + b_t - 2.0
    pi1 = (a_t - 1.0) / den if den > 0 else 0.0
    mus, vars_ = [], []
    for k in range(2):
        nu_k = p.nu0 + zbar[k]
        kappa_k = p.kappa0 + zbar[k]
        m_k = (resp[:, k] @ d + p.kappa0 * p.m0) / kappa_k
        sum_d2 = resp[:, k] @ (d * d)
        if variance_form == "printed":
            s_k = p.nu0 * p.s0_sq + sum_d2 + p.kappa0 * p.m0 ** 2 - zbar[k] * m_k ** 2
        elif variance_form == "normalized":
            s_k = (p.nu0 * p.s0_sq + sum_d2 + p.kappa0 * p.m0 ** 2 - kappa_k * m_k ** 2) / nu_k
        else:
            raise ValueError(f"unknown variance_form {variance_form!r}")
        mus.append(float(m_k))
        vars_.append(max(float(nu_k * s_k / (nu_k + 3.0)), VAR_FLOOR))
    fit = GmmFit(pi1=float(pi1), mu1=mus[0], var1=vars_[0], mu2=mus[1], var2=vars_[1], responsibilities=resp)
    if fit.mu1 < fit.mu2:
        fit = GmmFit(pi1=1.0 - fit.pi1, mu1=fit.mu2, var1=fit.var2, mu2=fit.mu1, var2=fit.var1,
                     responsibilities=resp[:, ::-1].copy())
    return fit


def _log_nix(mu: float, var: float, p: GmmPriors) -> float:
    half = 0.5 * p.nu0
    log_inv_chi2 = (half * math.log(half) - math.lgamma(half) + half * math.log(p.s0_sq)
                    - (half + 1.0) * math.log(var) - p.nu0 * p.s0_sq / (2.0 * var))
    return float(_log_normal(np.array([mu]), p.m0, var / p.kappa0)[0]) + log_inv_chi2


def _xlogy(x: float, y: float) -> float:
    if x == 0:
        return 0.0
    return x * math.log(y) if y > 0 else -math.inf


def log_posterior(scores, fit: GmmFit, priors: GmmPriors) -> float:
    """Observed-data log posterior ``log p(D | theta) + log p(theta)`` (up to no constant)."""
    d = np.asarray(scores, dtype=np.float64).ravel()
    ll = float(_logsumexp_rows(_log_weighted(d, fit)).sum()) if d.size else 0.0
    p = priors
    log_beta = (math.lgamma(p.a + p.b) - math.lgamma(p.a) - math.lgamma(p.b)
                + _xlogy(p.a - 1.0, fit.pi1) + _xlogy(p.b - 1.0, 1.0 - fit.pi1))
    return ll + log_beta + _log_nix(fit.mu1, fit.var1, p) + _log_nix(fit.mu2, fit.var2, p)


def initial_fit(scores, priors: GmmPriors) -> GmmFit:
    d = np.asarray(scores, dtype=np.float64).ravel()
    return GmmFit(pi1=max(priors.pi_mode, 0.05), mu1=float(np.percentile(d, 90)), var1=priors.s0_sq,
                  mu2=float(np.median(d)), var2=priors.s0_sq)


def fit_map_em(target_scores, reference_scores=None, priors: GmmPriors | None = None,
               max_iter: int = 200, tol: float = 1e-6, variance_form: str = "normalized") -> GmmFit:
    """Alternate E and M steps until the largest parameter change falls below ``tol``."""
    d = np.asarray(target_scores, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("target scores are empty")
    if not np.all(np.isfinite(d)):
        raise ValueError("target scores must be finite")
    if priors is None:
        if reference_scores is None:
            raise ValueError("need reference scores or explicit priors")
        priors = init_priors(reference_scores)
    fit = initial_fit(d, priors)
    history = [log_posterior(d, fit, priors)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        resp = e_step(d, fit)
        new = m_step(d, resp, priors, variance_form)
        delta = float(np.max(np.abs(new.params() - fit.params())))
        fit = new
        history.append(log_posterior(d, fit, priors))
        if delta < tol:
            converged = True
            break
    fit.responsibilities = e_step(d, fit)
    fit.iterations, fit.converged, fit.log_posterior = it, converged, history
    fit.degenerate = bool(np.var(d) < VAR_FLOOR)
    if fit.degenerate:
        log.warning("all target scores are identical; the mixture fit is degenerate")
    return fit


def posterior_anomaly(scores, fit: GmmFit) -> np.ndarray:
    """``Q_{i,1}``, the plug-in posterior probability of the anomalous component."""
    return e_step(scores, fit)[:, 0]


def classify(scores, fit: GmmFit) -> np.ndarray:
    return (posterior_anomaly(scores, fit) > 0.5).astype(np.int64)


def decision_boundary(fit: GmmFit) -> np.ndarray:
    """Scores where both weighted component densities are equal (sorted real roots)."""
    if fit.pi1 <= 0.0 or fit.pi1 >= 1.0:
        return np.zeros(0)
    # log pi1 - log var1/2 - (d-mu1)^2/(2 var1) = log pi2 - log var2/2 - (d-mu2)^2/(2 var2)
    A = 0.5 / fit.var2 - 0.5 / fit.var1
    B = fit.mu1 / fit.var1 - fit.mu2 / fit.var2
    C = (math.log(fit.pi1) - math.log(1 - fit.pi1) - 0.5 * math.log(fit.var1) + 0.5 * math.log(fit.var2)
         - fit.mu1 ** 2 / (2 * fit.var1) + fit.mu2 ** 2 / (2 * fit.var2))
    if abs(A) < 1e-15:
        return np.array([-C / B]) if B != 0 else np.zeros(0)
    disc = B * B - 4 * A * C
    if disc < 0:
        return np.zeros(0)
    r = np.sqrt(disc)
    return np.sort(np.array([(-B - r) / (2 * A), (-B + r) / (2 * A)]))


def fit_report(fit: GmmFit, priors: GmmPriors, labels=None) -> dict:
    """JSON-serialisable summary of a fit."""
    rep = {
        "priors": asdict(priors),
        "log_posterior": [float(v) for v in fit.log_posterior],
        "final": {"pi1": fit.pi1, "mu1": fit.mu1, "var1": fit.var1, "mu2": fit.mu2, "var2": fit.var2},
        "iterations": fit.iterations,
        "converged": fit.converged,
        "degenerate": fit.degenerate,
    }
    if labels is not None:
        labels = np.asarray(labels)
        rep["label_counts"] = {"anomaly": int(labels.sum()), "normal": int((labels == 0).sum())}
    return rep


def write_report(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)


class MapEmThreshold(BaseEstimator):
    """Estimator wrapper: ``fit(target_scores, reference_scores)`` then ``predict``."""

    def __init__(self, kappa0: float = 0.01, nu0: float = 3.0, a: float = 1.0, b: float = 10.0,
                 max_iter: int = 200, tol: float = 1e-6, variance_form: str = "normalized"):
        self.kappa0 = kappa0
        self.nu0 = nu0
        self.a = a
        self.b = b
        self.max_iter = max_iter
        self.tol = tol
        self.variance_form = variance_form

    def fit(self, scores, reference_scores=None):
        scores = _check_scores(scores)
        ref = scores if reference_scores is None else _check_scores(reference_scores)
        self.priors_ = init_priors(ref, self.kappa0, self.nu0, self.a, self.b)
        self.fit_ = fit_map_em(scores, priors=self.priors_, max_iter=self.max_iter, tol=self.tol,
                               variance_form=self.variance_form)
        return self

    def predict_proba(self, scores) -> np.ndarray:
        check_is_fitted(self, "fit_")
        return e_step(_check_scores(scores), self.fit_)

    def predict(self, scores) -> np.ndarray:
        check_is_fitted(self, "fit_")
        return classify(_check_scores(scores), self.fit_)

    def report(self, scores=None) -> dict:
        check_is_fitted(self, "fit_")
        labels = None if scores is None else self.predict(scores)
        return fit_report(self.fit_, self.priors_, labels)


def _check_scores(scores) -> np.ndarray:
    d = np.asarray(scores, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("scores are empty")
    if not np.all(np.isfinite(d)):
        raise ValueError("scores must be finite")
    return d
