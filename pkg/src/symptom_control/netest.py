"""Per-patient symptom-network estimation.

Pipeline: Kendall tau-b matrix over time -> partial correlations through the
inverse of that matrix -> per-cell significance -> Benjamini-Yekutieli
step-up over the 210 unique off-diagonal cells.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from scipy import stats

from .exceptions import (
    DegenerateInputError,
    InsufficientDataError,
    NonInvertibleError,
    ValidationError,
)
from .model import SymptomSeries

Backend = Literal["analytic", "permutation", "auto"]

# below this many observations "auto" switches to the permutation backend
AUTO_ANALYTIC_MIN_OBS = 10
# pairs per chunk when accumulating sign products; bounds peak memory for pooled data
_PAIR_CHUNK = 250_000


@dataclass(frozen=True)
class NetworkConfig:
    alpha: float = 0.05
    ridge_tol: float = 1e-6
    ridge_cap: float = 0.1
    backend: Backend = "auto"
    n_permutations: int = 1000
    seed: int | None = None
    # subtract (varying items - 2) controlled variables from n in the analytic test
    control_df: bool = False

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        if self.backend not in ("analytic", "permutation", "auto"):
            raise ValidationError(f"unknown significance backend {self.backend!r}")
        if self.ridge_tol <= 0 or self.ridge_cap < 0:
            raise ValidationError("ridge_tol must be > 0 and ridge_cap >= 0")
        if self.n_permutations < 1:
            raise ValidationError("n_permutations must be >= 1")


@dataclass(frozen=True)
class SymptomNetwork:
    a: np.ndarray
    pvalues: np.ndarray
    mask: np.ndarray
    n_obs: int
    diagnostics: dict[str, Any] = field(default_factory=dict)
    patient_id: str | None = None

    @property
    def n_nodes(self) -> int:
        return self.a.shape[0]

    @property
    def n_edges(self) -> int:
        return int(np.triu(self.mask, 1).sum())

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "n_obs": self.n_obs,
            "a": self.a.tolist(),
            "mask": self.mask.astype(bool).tolist(),
            "pvalues": self.pvalues.tolist(),
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SymptomNetwork":
        return cls(
            a=np.asarray(d["a"], dtype=float),
            pvalues=np.asarray(d["pvalues"], dtype=float),
            mask=np.asarray(d["mask"], dtype=bool),
            n_obs=int(d["n_obs"]),
            diagnostics=dict(d.get("diagnostics", {})),
            patient_id=d.get("patient_id"),
        )

    def edge_table(self) -> str:
        """Long-format CSV with one row per unique item pair (1-based item labels)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["item_i", "item_j", "weight", "pvalue", "retained"])
        iu, ju = np.triu_indices(self.n_nodes, 1)
        for i, j in zip(iu, ju):
            w.writerow([i + 1, j + 1, repr(float(self.a[i, j])), repr(float(self.pvalues[i, j])),
                        int(bool(self.mask[i, j]))])
        return buf.getvalue()


def _pair_signs(x: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Sign differences for all pairs (i, j), start <= i < stop, i < j.

    ``x`` has shape (n, k); the result has shape (n_pairs, k).
    """
    blocks = [np.sign(x[i + 1:] - x[i]) for i in range(start, stop)]
    if not blocks:
        return np.zeros((0, x.shape[1]))
    return np.concatenate(blocks, axis=0)


def _sign_products(x: np.ndarray) -> np.ndarray:
    """Sum over unordered time pairs of sign(dx_a) * sign(dx_b) for all item pairs."""
    n, k = x.shape
    out = np.zeros((k, k))
    i = 0
    while i < n - 1:
        stop, pairs = i, 0
        while stop < n - 1 and pairs < _PAIR_CHUNK:
            pairs += n - 1 - stop
            stop += 1
        s = _pair_signs(x, i, stop)
        out += s.T @ s
        i = stop
    return out


def kendall_tau_b(x, y) -> float:
    """Tie-corrected Kendall correlation; NaN when either input is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("kendall_tau_b needs two 1-D vectors of equal length")
    if x.size < 2:
        raise InsufficientDataError("kendall_tau_b needs at least 2 observations")
    iu, ju = np.triu_indices(x.size, 1)
    dx = np.sign(x[ju] - x[iu])
    dy = np.sign(y[ju] - y[iu])
    denom = np.sqrt(np.abs(dx).sum() * np.abs(dy).sum())
    if denom == 0:
        return float("nan")
    return float(np.clip((dx * dy).sum() / denom, -1.0, 1.0))


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, SymptomSeries):
        return data.items.astype(float)
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ValidationError("expected an observation-by-item matrix")
    return x


def kendall_matrix(data, return_constant: bool = False):
    """Matrix of pairwise tau-b values over observations.

    ``data`` is a SymptomSeries or an (n_obs, k) array. Constant items get zero
    off-diagonal entries (diagonal stays 1). Raises DegenerateInputError when
    every item is constant.
    """
    x = _as_matrix(data)
    n, k = x.shape
    if n < 2:
        raise InsufficientDataError("need at least 2 observations")
    constant = np.ptp(x, axis=0) == 0
    if constant.all():
        raise DegenerateInputError("all items are constant; no variance to estimate a network")
    prod = _sign_products(x)
    ties = np.diag(prod).copy()  # number of untied pairs per item
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = prod / np.sqrt(np.outer(ties, ties))
    tau[constant, :] = 0.0
    tau[:, constant] = 0.0
    tau = np.clip(tau, -1.0, 1.0)
    tau = (tau + tau.T) / 2
    np.fill_diagonal(tau, 1.0)
    if return_constant:
        return tau, np.flatnonzero(constant).tolist()
    return tau


def partial_from_correlation(r, ridge_tol: float = 1e-6, ridge_cap: float = 0.1):
    """Partial correlations given all other variables, via the inverse of ``r``.

    Returns ``(partial, ridge)``. When the smallest eigenvalue of ``r`` is below
    ``ridge_tol`` a uniform diagonal inflation lifting it exactly to
    ``ridge_tol`` is applied first; ``ridge`` is that amount (0 otherwise).
    """
    r = np.asarray(r, dtype=float)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValidationError("correlation matrix must be square")
    if not np.allclose(r, r.T, atol=1e-10, rtol=0):
        raise ValidationError("correlation matrix must be symmetric")
    r = (r + r.T) / 2
    lam_min = float(np.linalg.eigvalsh(r)[0])
    ridge = 0.0
    if lam_min < ridge_tol:
        ridge = ridge_tol - lam_min
        if ridge > ridge_cap:
            raise NonInvertibleError(
                f"smallest eigenvalue {lam_min:.3g} needs ridge {ridge:.3g} > cap {ridge_cap:.3g}")
        r = r + ridge * np.eye(r.shape[0])
    q = np.linalg.inv(r)
    d = np.sqrt(np.diag(q))
    p = -q / np.outer(d, d)
    p = np.clip((p + p.T) / 2, -1.0, 1.0)
    np.fill_diagonal(p, 1.0)
    return p, ridge


def _tau_sd(n: float) -> float:
    """Null standard deviation of Kendall's tau for n untied observations."""
    return math.sqrt(2.0 * (2 * n + 5) / (9.0 * n * (n - 1)))


def taub_null_sd(x: np.ndarray) -> np.ndarray:
    """Tie-corrected null standard deviation of tau-b for every item pair."""
    n, k = x.shape
    n0 = n * (n - 1) / 2.0
    n1 = np.zeros(k)
    vt = np.zeros(k)
    a1 = np.zeros(k)
    a2 = np.zeros(k)
    for i in range(k):
        _, t = np.unique(x[:, i], return_counts=True)
        t = t.astype(float)
        n1[i] = np.sum(t * (t - 1) / 2)
        vt[i] = np.sum(t * (t - 1) * (2 * t + 5))
        a1[i] = np.sum(t * (t - 1))
        a2[i] = np.sum(t * (t - 1) * (t - 2))
    v0 = n * (n - 1) * (2 * n + 5)
    var_s = (v0 - vt[:, None] - vt[None, :]) / 18.0 + np.outer(a1, a1) / (2.0 * n * (n - 1))
    if n > 2:
        var_s += np.outer(a2, a2) / (9.0 * n * (n - 1) * (n - 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        sd = np.sqrt(np.maximum(var_s, 0.0) / np.outer(n0 - n1, n0 - n1))
    return sd


def _analytic_pvalues(p: np.ndarray, n: int, g: int, x: np.ndarray | None) -> np.ndarray:
    n_eff = n - g
    if x is None:
        z = np.abs(p) / _tau_sd(n_eff)
    else:
        sd = taub_null_sd(x) * (_tau_sd(n_eff) / _tau_sd(n))
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(sd > 0, np.abs(p) / sd, 0.0)
    pv = 2.0 * stats.norm.sf(z)
    np.fill_diagonal(pv, 1.0)
    return np.clip(pv, 0.0, 1.0)


def _permutation_pvalues(x, observed, ridge_tol, ridge_cap, n_permutations, seed):
    """Two-sided permutation p-values.

    For row item i the time order of item i alone is shuffled; the Kendall row
    of i and the full partial matrix are recomputed for every shuffle. The
    (i, j) p-value with i < j is taken from shuffles of item i.
    """
    n, k = x.shape
    rng = np.random.default_rng(seed)
    tau, constant = kendall_matrix(x, return_constant=True)
    iu, ju = np.triu_indices(n, 1)
    signs = np.sign(x[ju] - x[iu])  # (pairs, k)
    untied = np.abs(signs).sum(axis=0)
    pv = np.ones((k, k))
    abs_obs = np.abs(observed)
    for i in range(k - 1):
        if i in constant:
            continue
        perms = np.argsort(rng.random((n_permutations, n)), axis=1)
        xi = x[:, i][perms]  # (P, n)
        si = np.sign(xi[:, ju] - xi[:, iu])  # (P, pairs)
        with np.errstate(divide="ignore", invalid="ignore"):
            row = (si @ signs) / np.sqrt(untied[i] * untied)
        row[:, constant] = 0.0
        mats = np.broadcast_to(tau, (n_permutations, k, k)).copy()
        mats[:, i, :] = row
        mats[:, :, i] = row
        mats[:, i, i] = 1.0
        lam_min = np.linalg.eigvalsh(mats)[:, 0]
        ridge = np.where(lam_min < ridge_tol, ridge_tol - lam_min, 0.0)
        ridge = np.minimum(ridge, max(ridge_cap, 0.0))
        mats += ridge[:, None, None] * np.eye(k)
        q = np.linalg.inv(mats)
        qd = np.sqrt(np.einsum("pii->pi", q))
        prow = -q[:, i, :] / (qd[:, i:i + 1] * qd)
        exceed = (np.abs(prow) >= abs_obs[i] - 1e-12).sum(axis=0)
        vals = (1.0 + exceed) / (1.0 + n_permutations)
        pv[i, i + 1:] = vals[i + 1:]
        pv[i + 1:, i] = vals[i + 1:]
    np.fill_diagonal(pv, 1.0)
    return pv


def partial_significance(p, n: int, g: int = 0, backend: Backend = "analytic", *, data=None,
                         n_permutations: int = 1000, seed: int | None = None,
                         ridge_tol: float = 1e-6, ridge_cap: float = 0.1) -> np.ndarray:
    """Two-sided p-values for the off-diagonal partial Kendall correlations.

    Analytic backend: normal approximation with effective sample size
    ``n - g``. Without ``data`` the tie-free Kendall variance is used; with the
    observation matrix the per-pair tie-corrected tau-b variance is used
    instead (ordinal items are heavily tied). The permutation backend needs
    ``data`` and an explicit ``seed``.
    """
    p = np.asarray(p, dtype=float)
    x = None if data is None else _as_matrix(data)
    if backend == "auto":
        backend = "analytic" if n > g + 2 and n >= AUTO_ANALYTIC_MIN_OBS else "permutation"
    if backend == "analytic":
        if n <= g + 2:
            raise InsufficientDataError(f"analytic test needs n > g + 2 (n={n}, g={g})")
        return _analytic_pvalues(p, n, g, x)
    if backend == "permutation":
        if x is None:
            raise ValidationError("permutation backend needs the observation matrix")
        if seed is None:
            raise ValidationError("permutation backend needs an explicit seed")
        if x.shape[0] < 3:
            raise InsufficientDataError("permutation test needs at least 3 observations")
        return _permutation_pvalues(x, p, ridge_tol, ridge_cap, n_permutations, seed)
    raise ValidationError(f"unknown significance backend {backend!r}")


def fdr_by(pvals, alpha: float = 0.05) -> np.ndarray:
    """Benjamini-Yekutieli step-up rejections (valid under arbitrary dependence)."""
    p = np.asarray(pvals, dtype=float).ravel()
    m = p.size
    if m == 0:
        return np.zeros(0, dtype=bool)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValidationError("p-values must lie in [0, 1]")
    c_m = np.sum(1.0 / np.arange(1, m + 1))
    order = np.argsort(p, kind="stable")
    thresholds = np.arange(1, m + 1) * alpha / (m * c_m)
    below = np.flatnonzero(p[order] <= thresholds)
    reject = np.zeros(m, dtype=bool)
    if below.size:
        reject[order[: below[-1] + 1]] = True
    return reject


def estimate_network(series, cfg: NetworkConfig | None = None) -> SymptomNetwork:
    """Estimate the thresholded partial-correlation network of one series.

    ``series`` may be a SymptomSeries or a raw (n_obs, k) matrix.
    """
    cfg = cfg or NetworkConfig()
    x = _as_matrix(series)
    n, k = x.shape
    tau, constant = kendall_matrix(x, return_constant=True)
    partial, ridge = partial_from_correlation(tau, cfg.ridge_tol, cfg.ridge_cap)
    varying = k - len(constant)
    g = max(varying - 2, 0) if cfg.control_df else 0
    backend = cfg.backend
    if backend == "auto":
        backend = "analytic" if n > g + 2 and n >= AUTO_ANALYTIC_MIN_OBS else "permutation"
    seed = cfg.seed
    if backend == "permutation" and seed is None:
        seed = 0
    pv = partial_significance(partial, n, g, backend, data=x, n_permutations=cfg.n_permutations,
                              seed=seed, ridge_tol=cfg.ridge_tol, ridge_cap=cfg.ridge_cap)
    iu, ju = np.triu_indices(k, 1)
    reject = fdr_by(pv[iu, ju], cfg.alpha)
    mask = np.zeros((k, k), dtype=bool)
    mask[iu[reject], ju[reject]] = True
    mask |= mask.T
    a = np.where(mask, partial, 0.0)
    np.fill_diagonal(a, 0.0)
    eig = np.linalg.eigvalsh(tau + ridge * np.eye(k))
    diagnostics = {
        "zero_variance_items": [int(c) + 1 for c in constant],
        "ridge": float(ridge),
        "condition_number": float(eig[-1] / eig[0]) if eig[0] > 0 else float("inf"),
        "backend": backend,
        "controlled_variables": int(g),
        "n_tests": int(iu.size),
        "n_edges": int(reject.sum()),
    }
    if backend == "permutation":
        diagnostics["n_permutations"] = int(cfg.n_permutations)
        diagnostics["seed"] = int(seed)
    pid = series.patient_id if isinstance(series, SymptomSeries) else None
    for arr in (a, pv, mask):
        arr.setflags(write=False)
    return SymptomNetwork(a=a, pvalues=pv, mask=mask, n_obs=n, diagnostics=diagnostics, patient_id=pid)
