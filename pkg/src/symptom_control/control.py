"""Network control: minimum-energy inputs and exact-controllability driver nodes.

Dynamics are ``dx/dt = A x + B u``. The optimal-control route solves the
two-point boundary-value problem through the exponential of the Hamiltonian
block matrix; the Gramian route is an independent closed form for S = 0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np
from scipy.linalg import expm, qr

from .exceptions import (
    IllConditionedError,
    InternalConsistencyError,
    NonConvergentError,
    NumericalOverflowError,
    ValidationError,
)
from .model import SymptomSeries

logger = logging.getLogger(__name__)

SOLVE_RESIDUAL_TOL = 1e-6


@dataclass(frozen=True)
class ControlConfig:
    """Parameters of the optimal control problem.

    ``input_spec`` is ``"identity"``, a sequence of node indices (0-based)
    receiving one unit input column each, or an explicit N x M matrix.
    ``boundary_tol`` is relative: a trajectory converges when
    ``||x(T) - x_T|| <= boundary_tol * (1 + ||x0||)``.
    """

    horizon_T: float = 1.0
    rho: float = 1.0
    use_state_cost: bool = False
    input_spec: Any = "identity"
    step: float = 0.001
    boundary_tol: float = 1e-5
    normalize_a: bool = False

    def __post_init__(self):
        if not self.horizon_T > 0:
            raise ValidationError("horizon_T must be > 0")
        if not self.rho > 0:
            raise ValidationError("rho must be > 0")
        if not 0 < self.step <= self.horizon_T:
            raise ValidationError("step must satisfy 0 < step <= horizon_T")
        if not self.boundary_tol > 0:
            raise ValidationError("boundary_tol must be > 0")

    @property
    def n_steps(self) -> int:
        return max(int(round(self.horizon_T / self.step)), 1)

    def input_matrix(self, n: int) -> np.ndarray:
        spec = self.input_spec
        if isinstance(spec, str):
            if spec != "identity":
                raise ValidationError(f"unknown input_spec {spec!r}")
            return np.eye(n)
        arr = np.asarray(spec)
        if arr.ndim == 2:
            if arr.shape[0] != n:
                raise ValidationError(f"input matrix has {arr.shape[0]} rows, expected {n}")
            return arr.astype(float)
        nodes = [int(i) for i in arr.ravel()]
        if any(not 0 <= i < n for i in nodes):
            raise ValidationError(f"input node indices must lie in [0, {n})")
        b = np.zeros((n, len(nodes)))
        b[nodes, np.arange(len(nodes))] = 1.0
        return b


@dataclass(frozen=True)
class ControlTrajectory:
    times: np.ndarray
    u: np.ndarray  # (n_times, M)
    x: np.ndarray  # (n_times, N)
    energy: float
    boundary_error: float
    converged: bool


@dataclass(frozen=True)
class EnergySeries:
    patient_id: str
    days: np.ndarray
    bdi_sum: np.ndarray
    e0: np.ndarray
    converged: np.ndarray
    boundary_error: np.ndarray
    excluded: bool = False
    reason: str | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.e0)


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Stabilising transform ``A / (1 + |lambda_max|) - I``."""
    lam = np.max(np.abs(np.linalg.eigvals(a))) if a.size else 0.0
    return a / (1.0 + lam) - np.eye(a.shape[0])


def _hamiltonian(a, b, rho, s, xt):
    n = a.shape[0]
    h = np.zeros((2 * n + 1, 2 * n + 1))
    h[:n, :n] = a
    h[:n, n:2 * n] = -(b @ b.T) / (2.0 * rho)
    h[n:2 * n, :n] = -2.0 * s
    h[n:2 * n, n:2 * n] = -a.T
    h[n:2 * n, 2 * n] = 2.0 * s @ xt
    return h


def _check_dims(a, b, x0, xt):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError("A must be square")
    if b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ValidationError("B must have as many rows as A")
    x0 = np.asarray(x0, dtype=float)
    xt = np.asarray(xt, dtype=float)
    if x0.shape[0] != a.shape[0] or xt.shape[0] != a.shape[0]:
        raise ValidationError("state vectors must match the dimension of A")
    return a, b, x0, xt


def _solve_batch(a, b, x0s, xt, cfg: ControlConfig, keep_trajectory=False):
    """Solve the boundary-value problem for every column of ``x0s`` at once.

    Returns a dict with energies, boundary errors, solve residuals, finiteness
    flags and (optionally) the trajectories of the first column.
    """
    n = a.shape[0]
    k = x0s.shape[1]
    s = np.eye(n) if cfg.use_state_cost else np.zeros((n, n))
    h = _hamiltonian(a, b, cfg.rho, s, xt)
    T = cfg.horizon_T
    steps = cfg.n_steps
    dt = T / steps
    with np.errstate(all="ignore"):
        e = expm(h * T)
        e11, e12, e13 = e[:n, :n], e[:n, n:2 * n], e[:n, 2 * n]
        rhs = xt[:, None] - e11 @ x0s - e13[:, None]
        finite = np.isfinite(e).all()
        if finite:
            try:
                p0 = np.linalg.solve(e12, rhs)
            except np.linalg.LinAlgError:
                p0 = np.linalg.lstsq(e12, rhs, rcond=None)[0]
            resid = np.linalg.norm(e12 @ p0 - rhs, axis=0) / (1.0 + np.linalg.norm(rhs, axis=0))
        else:
            p0 = np.full((n, k), np.nan)
            resid = np.full(k, np.inf)

        step_exp = expm(h * dt)
        bt = b.T / (2.0 * cfg.rho)
        z0 = np.vstack([x0s, p0, np.ones((1, k))])
        traj_x, traj_u = [], []
        if keep_trajectory:
            z = z0
            u = -bt @ z[n:2 * n]
            energy = 0.5 * (u * u).sum(axis=0)
            traj_x.append(z[:n, 0].copy())
            traj_u.append(u[:, 0].copy())
            for i in range(1, steps + 1):
                z = step_exp @ z
                u = -bt @ z[n:2 * n]
                usq = (u * u).sum(axis=0)
                energy = energy + (usq if i < steps else 0.5 * usq)
                traj_x.append(z[:n, 0].copy())
                traj_u.append(u[:, 0].copy())
        else:
            # trapezoid sum of |u_i|^2 is a quadratic form in z0
            c = np.zeros((b.shape[1], 2 * n + 1))
            c[:, n:2 * n] = -bt
            g = c.T @ c
            q, z_map = _power_sum(step_exp, g, steps + 1)
            phi_t = _power(step_exp, steps)
            q = q - 0.5 * g - 0.5 * (phi_t.T @ g @ phi_t)
            energy = np.einsum("ik,ij,jk->k", z0, q, z0)
            z = phi_t @ z0
        energy = energy * dt
        boundary = np.linalg.norm(z[:n] - xt[:, None], axis=0)
        finite_cols = np.isfinite(z).all(axis=0) & np.isfinite(energy) & np.isfinite(resid)
    out = {
        "energy": energy,
        "boundary_error": boundary,
        "residual": resid,
        "finite": finite_cols,
        "cond_e12": float(np.linalg.cond(e12)) if finite else float("inf"),
    }
    if keep_trajectory:
        out["times"] = np.linspace(0.0, T, steps + 1)
        out["x"] = np.array(traj_x)
        out["u"] = np.array(traj_u)
    return out


def _power(m: np.ndarray, k: int) -> np.ndarray:
    return np.linalg.matrix_power(m, k)


def _power_sum(phi: np.ndarray, g: np.ndarray, count: int):
    """``sum_{i<count} (phi^i)^T g phi^i`` and ``phi^count`` by binary doubling."""
    size = phi.shape[0]
    acc_s, acc_p = np.zeros_like(g), np.eye(size)
    blk_s, blk_p = g.copy(), phi.copy()
    while count:
        if count & 1:
            acc_s = acc_s + acc_p.T @ blk_s @ acc_p
            acc_p = blk_p @ acc_p
        count >>= 1
        if count:
            blk_s = blk_s + blk_p.T @ blk_s @ blk_p
            blk_p = blk_p @ blk_p
    return acc_s, acc_p


def _converged(res, x0s, cfg):
    tol = cfg.boundary_tol * (1.0 + np.linalg.norm(x0s, axis=0))
    return res["finite"] & (res["residual"] <= SOLVE_RESIDUAL_TOL) & (res["boundary_error"] <= tol)


def optimal_control(a, b, x0, xt, cfg: ControlConfig | None = None) -> ControlTrajectory:
    """Minimum-energy trajectory from ``x0`` to ``xt`` over ``[0, T]``.

    Raises NonConvergentError when the costate solve is unreliable or the
    boundary condition is missed, NumericalOverflowError on non-finite values.
    """
    cfg = cfg or ControlConfig()
    a, b, x0, xt = _check_dims(a, b, x0, xt)
    res = _solve_batch(a, b, x0[:, None], xt, cfg, keep_trajectory=True)
    if not res["finite"][0]:
        raise NumericalOverflowError(
            f"non-finite values in the Hamiltonian solve (cond(E12)={res['cond_e12']:.3g}, "
            f"spectral radius of A={np.max(np.abs(np.linalg.eigvals(a))):.3g})")
    if res["residual"][0] > SOLVE_RESIDUAL_TOL:
        raise NonConvergentError(
            f"costate solve residual {res['residual'][0]:.3g} > {SOLVE_RESIDUAL_TOL} "
            f"(cond(E12)={res['cond_e12']:.3g})")
    tol = cfg.boundary_tol * (1.0 + np.linalg.norm(x0))
    if res["boundary_error"][0] > tol:
        raise NonConvergentError(f"boundary error {res['boundary_error'][0]:.3g} > {tol:.3g}")
    return ControlTrajectory(
        times=res["times"], u=res["u"], x=res["x"],
        energy=float(res["energy"][0]), boundary_error=float(res["boundary_error"][0]),
        converged=True,
    )


def min_energy_gramian(a, b, x0, xt, T: float = 1.0, n_steps: int = 1000, cond_max: float = 1e12):
    """Closed-form minimum energy through the controllability Gramian.

    ``W_T`` is obtained from one block exponential (Van Loan's construction).
    Returns ``(energy, u)`` where ``u`` is sampled on ``n_steps + 1`` grid points.
    """
    a, b, x0, xt = _check_dims(a, b, x0, xt)
    w = controllability_gramian(a, b, T)
    cond = np.linalg.cond(w)
    if not np.isfinite(cond) or cond > cond_max:
        raise IllConditionedError(f"Gramian condition number {cond:.3g} exceeds {cond_max:.3g}")
    r = xt - expm(a * T) @ x0
    lam = np.linalg.solve(w, r)
    energy = float(r @ lam)
    # u*(t) = B^T exp(A^T (T - t)) lam, filled backward from t = T
    step = expm(a.T * (T / n_steps))
    v = lam.copy()
    u = np.empty((n_steps + 1, b.shape[1]))
    for i in range(n_steps, -1, -1):
        u[i] = b.T @ v
        v = step @ v
    return energy, u


def controllability_gramian(a, b, T: float = 1.0) -> np.ndarray:
    """``W_T = int_0^T exp(A t) B B^T exp(A^T t) dt`` via one block exponential."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.shape[0]
    c = np.zeros((2 * n, 2 * n))
    c[:n, :n] = -a
    c[:n, n:] = b @ b.T
    c[n:, n:] = a.T
    f = expm(c * T)
    w = f[n:, n:].T @ f[:n, n:]
    return (w + w.T) / 2


def energy_to_zero_form(a, b=None, T: float = 1.0) -> np.ndarray:
    """Matrix M with minimum energy from x0 to the origin equal to ``x0^T M x0``."""
    a = np.asarray(a, dtype=float)
    b = np.eye(a.shape[0]) if b is None else np.asarray(b, dtype=float)
    w = controllability_gramian(a, b, T)
    ea = expm(a * T)
    m = ea.T @ np.linalg.solve(w, ea)
    return (m + m.T) / 2


def _network_matrix(network) -> np.ndarray:
    return np.asarray(getattr(network, "a", network), dtype=float)


def energy_to_zero(network, x0, cfg: ControlConfig | None = None) -> float:
    """Energy needed to drive symptom state ``x0`` to the all-zero state."""
    cfg = cfg or ControlConfig()
    a = _network_matrix(network)
    x0 = np.asarray(x0, dtype=float)
    if np.any(x0 < 0) or np.any(x0 > 3):
        raise ValidationError("item scores must lie in [0, 3]")
    if cfg.normalize_a:
        a = normalize_adjacency(a)
    b = cfg.input_matrix(a.shape[0])
    return optimal_control(a, b, x0, np.zeros(a.shape[0]), cfg).energy


def batch_energy_to_zero(a, x0s, cfg: ControlConfig | None = None):
    """Energies for every row of ``x0s``; returns ``(e0, converged, boundary_error)``.

    Non-convergent rows are flagged rather than raised.
    """
    cfg = cfg or ControlConfig()
    a = np.asarray(a, dtype=float)
    if cfg.normalize_a:
        a = normalize_adjacency(a)
    x0s = np.asarray(x0s, dtype=float).T
    b = cfg.input_matrix(a.shape[0])
    res = _solve_batch(a, b, x0s, np.zeros(a.shape[0]), cfg)
    return res["energy"], _converged(res, x0s, cfg), res["boundary_error"]


def energy_series(series: SymptomSeries, network, cfg: ControlConfig | None = None) -> EnergySeries:
    """E0 at every observation of ``series``; non-convergence marks the patient excluded."""
    cfg = cfg or ControlConfig()
    x = series.items.astype(float)
    e0, conv, berr = batch_energy_to_zero(_network_matrix(network), x, cfg)
    excluded = not bool(np.all(conv))
    reason = None
    if excluded:
        bad = np.flatnonzero(~conv).tolist()
        reason = f"E0 did not converge at observations {bad}"
    meta = {"normalize_a": cfg.normalize_a, "horizon_T": cfg.horizon_T, "rho": cfg.rho,
            "step": cfg.step, "use_state_cost": cfg.use_state_cost}
    return EnergySeries(
        patient_id=series.patient_id, days=series.days, bdi_sum=series.sum_scores,
        e0=e0, converged=conv, boundary_error=berr, excluded=excluded, reason=reason, metadata=meta,
    )


# ----------------------------------------------------------------- controllability

@dataclass(frozen=True)
class DriverAnalysis:
    eigenvalues: list[tuple[complex, int]]
    lambda_m: complex
    n_d: int
    drivers: list[int]
    pbh_all: bool
    pbh_lambda_m: bool
    patient_id: str | None = None

    def to_dict(self) -> dict:
        lam = self.lambda_m
        return {
            "patient_id": self.patient_id,
            "n_d": self.n_d,
            "lambda_m": float(lam.real) if abs(lam.imag) == 0 else [float(lam.real), float(lam.imag)],
            "drivers": [d + 1 for d in self.drivers],
            "pbh_lambda_m": self.pbh_lambda_m,
            "pbh_all": self.pbh_all,
        }


def numerical_rank(m: np.ndarray, rank_tol: float = 1e-8) -> int:
    """Rank with singular values below ``rank_tol * sigma_max`` treated as zero."""
    if m.size == 0:
        return 0
    sv = np.linalg.svd(m, compute_uv=False)
    if sv[0] == 0:
        return 0
    return int(np.sum(sv > rank_tol * sv[0]))


def distinct_eigenvalues(a, rank_tol: float = 1e-8) -> list[complex]:
    a = np.asarray(a, dtype=float)
    if np.allclose(a, a.T, rtol=0, atol=0):
        lam = np.linalg.eigvalsh(a).astype(complex)
    else:
        lam = np.linalg.eigvals(a)
    radius = float(np.max(np.abs(lam))) if lam.size else 0.0
    tol = rank_tol * max(1.0, radius)
    order = np.lexsort((lam.imag, lam.real))
    clusters: list[list[complex]] = []
    for v in lam[order]:
        for c in clusters:
            if abs(v - c[0]) <= tol:
                c.append(v)
                break
        else:
            clusters.append([v])
    reps = []
    for c in clusters:
        m = complex(np.mean(c))
        if abs(m.imag) <= tol:
            m = complex(m.real, 0.0)
        reps.append(m)
    return reps


def _shifted(a, lam):
    n = a.shape[0]
    m = lam * np.eye(n) - a
    return m.real if lam.imag == 0 else m


def exact_controllability(a, rank_tol: float = 1e-8):
    """Minimum driver count as the maximal geometric eigenvalue multiplicity.

    Returns ``(n_d, table, lambda_m)`` where ``table`` lists
    ``(eigenvalue, multiplicity)`` pairs. Ties in multiplicity go to the larger
    ``|lambda|``, then to the positive one.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError("A must be square")
    if not np.isfinite(a).all():
        raise ValidationError("A must be finite")
    n = a.shape[0]
    table = [(lam, n - numerical_rank(_shifted(a, lam), rank_tol)) for lam in distinct_eigenvalues(a, rank_tol)]
    best = min(table, key=lambda t: (-t[1], -abs(t[0]), -t[0].real, -t[0].imag))
    return best[1], table, best[0]


def kalman_rank(a, b, rank_tol: float = 1e-8) -> int:
    """Rank of ``[B, AB, ..., A^(N-1) B]``.

    A is rescaled to unit spectral norm and each block to unit norm; neither
    changes the rank but both keep the powers on a common scale.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.shape[0]
    nrm = np.linalg.norm(a, 2)
    a_s = a / nrm if nrm > 0 else a
    blocks, blk = [], b
    for _ in range(n):
        bn = np.linalg.norm(blk, 2)
        blocks.append(blk / bn if bn > 0 else blk)
        blk = a_s @ blk
    return numerical_rank(np.hstack(blocks), rank_tol)


def pbh_verify(a, b, rank_tol: float = 1e-8):
    """PBH test: ``rank([lambda I - A, B]) = N`` for every distinct eigenvalue.

    Returns ``(ok, report)`` with one ``(eigenvalue, rank)`` entry per eigenvalue.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ValidationError("B must have as many rows as A")
    n = a.shape[0]
    report = []
    for lam in distinct_eigenvalues(a, rank_tol):
        m = np.hstack([_shifted(a, lam), b.astype(complex) if lam.imag else b])
        report.append((lam, numerical_rank(m, rank_tol)))
    return all(r == n for _, r in report), report


def _unit_columns(n, nodes):
    b = np.zeros((n, len(nodes)))
    b[list(nodes), np.arange(len(nodes))] = 1.0
    return b


def select_driver_nodes(a, rank_tol: float = 1e-8, patient_id: str | None = None) -> DriverAnalysis:
    """Driver nodes making ``[lambda_M I - A, B]`` full rank.

    Rows of ``lambda_M I - A`` are scanned from the last index down and kept as
    a basis when they raise the rank (checked with a pivoted QR); the rows left
    over are linearly dependent on the basis and become the drivers, which
    biases the choice toward low indices.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    n_d, table, lam_m = exact_controllability(a, rank_tol)
    c = _shifted(a, lam_m)
    basis: list[int] = []
    for i in range(n - 1, -1, -1):
        cand = basis + [i]
        if _qr_rank(c[cand], rank_tol, c) == len(cand):
            basis = cand
    drivers = sorted(set(range(n)) - set(basis))
    if len(drivers) != n_d:
        raise InternalConsistencyError(f"found {len(drivers)} dependent rows, expected {n_d}")
    b = _unit_columns(n, drivers)
    pbh_m = numerical_rank(np.hstack([c, b.astype(c.dtype)]), rank_tol) == n
    if not pbh_m:
        raise InternalConsistencyError("driver selection failed to restore full rank at lambda_M")
    pbh_all, _ = pbh_verify(a, b, rank_tol)
    return DriverAnalysis(
        eigenvalues=table, lambda_m=lam_m, n_d=n_d, drivers=drivers,
        pbh_all=pbh_all, pbh_lambda_m=pbh_m, patient_id=patient_id,
    )


def _qr_rank(rows, rank_tol, full):
    if rows.shape[0] == 0:
        return 0
    ref = np.linalg.norm(full, 2)
    if ref == 0:
        return 0
    r = qr(rows.T, mode="r", pivoting=True)[0]
    d = np.abs(np.diag(r))
    return int(np.sum(d > rank_tol * ref))


@dataclass(frozen=True)
class DriverSummary:
    n_networks: int
    median_n_d: float
    min_n_d: int
    max_n_d: int
    n_d_values: list[int]
    item_counts: list[int]  # index i -> count for item i+1
    ranking: list[int]  # 1-based item labels by decreasing driver frequency

    def to_dict(self) -> dict:
        return {
            "n_networks": self.n_networks,
            "median_n_d": self.median_n_d,
            "min_n_d": self.min_n_d,
            "max_n_d": self.max_n_d,
            "n_d_values": self.n_d_values,
            "item_counts": {str(i + 1): c for i, c in enumerate(self.item_counts)},
            "ranking": self.ranking,
        }


def driver_summary(analyses: Iterable, rank_tol: float = 1e-8, n_items: int | None = None) -> DriverSummary:
    """Cohort-level distribution of driver counts and per-item driver frequency.

    Accepts DriverAnalysis objects, SymptomNetworks or raw matrices.
    """
    items = list(analyses)
    if not items:
        raise ValidationError("driver_summary needs at least one network")
    res = []
    for x in items:
        if isinstance(x, DriverAnalysis):
            res.append(x)
        else:
            a = _network_matrix(x)
            n_items = n_items or a.shape[0]
            res.append(select_driver_nodes(a, rank_tol))
    if n_items is None:
        n_items = max(max(r.drivers, default=-1) for r in res) + 1
    counts = [0] * n_items
    for r in res:
        for d in r.drivers:
            counts[d] += 1
    nds = [r.n_d for r in res]
    ranking = [i + 1 for i in sorted(range(n_items), key=lambda i: (-counts[i], i))]
    return DriverSummary(
        n_networks=len(res), median_n_d=float(np.median(nds)), min_n_d=min(nds), max_n_d=max(nds),
        n_d_values=nds, item_counts=counts, ranking=ranking,
    )
