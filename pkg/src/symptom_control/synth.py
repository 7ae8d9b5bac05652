"""Synthetic cohorts with planted dynamics, plus a brute-force energy oracle."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from scipy.linalg import expm

from .control import energy_to_zero_form
from .exceptions import (
    DegenerateInputError,
    InfeasibleError,
    InsufficientDataError,
    NonInvertibleError,
    UndefinedCorrelationError,
    CollinearityError,
    ValidationError,
)
from .model import N_ITEMS, Cohort, SymptomSeries
from .netest import NetworkConfig, estimate_network
from .stats import spearman_partial

MAX_DISCRETE_RADIUS = 0.9


@dataclass(frozen=True)
class SynthSpec:
    """Generative design of a synthetic cohort.

    The latent item vector follows a mean-reverting process whose innovations
    have the random network as partial-correlation structure. Every step adds
    a uniform drift ``-coupling * (E0_t - E0_ref) / 21`` on all items, so a high
    control energy slows the next improvement; ``moderator_effect`` scales a
    patient's coupling by ``1 + moderator_effect * m`` for a standard-normal
    covariate ``m`` written to the ``moderator_column``.
    """

    seed: int
    n_patients: int = 50
    n_obs_min: int = 61
    n_obs_max: int = 61
    a_density: float = 0.05
    a_weight_range: tuple[float, float] = (0.4, 0.6)
    noise_sd: float = 0.5
    coupling_strength: float = 0.0
    moderator_effect: float = 0.0
    mean_level: float = 1.2
    persistence: float = 0.9
    day_gap_range: tuple[int, int] = (3, 14)
    burn_in: int = 20
    coupling_passes: int = 2
    moderator_column: str = "ctq"

    def __post_init__(self):
        if self.seed is None:
            raise ValidationError("seed is mandatory")
        object.__setattr__(self, "a_weight_range", tuple(float(w) for w in self.a_weight_range))
        object.__setattr__(self, "day_gap_range", tuple(int(d) for d in self.day_gap_range))
        checks = {
            "n_patients": self.n_patients >= 1,
            "n_obs_min": 2 <= self.n_obs_min,
            "n_obs_max": self.n_obs_max >= self.n_obs_min,
            "a_density": 0.0 <= self.a_density <= 1.0,
            "a_weight_range": len(self.a_weight_range) == 2 and self.a_weight_range[0] <= self.a_weight_range[1],
            "noise_sd": self.noise_sd >= 0,
            "coupling_strength": math.isfinite(self.coupling_strength),
            "moderator_effect": math.isfinite(self.moderator_effect),
            "persistence": 0.0 <= self.persistence <= 1.0,
            "day_gap_range": len(self.day_gap_range) == 2 and 1 <= self.day_gap_range[0] <= self.day_gap_range[1],
            "burn_in": self.burn_in >= 0,
            "coupling_passes": self.coupling_passes >= 1,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValidationError(f"invalid SynthSpec field {name!r}: {getattr(self, name)!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"invalid SynthSpec field {unknown[0]!r}: unknown field")
        if "seed" not in d:
            raise ValidationError("invalid SynthSpec field 'seed': missing (seed is mandatory)")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"invalid SynthSpec: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["a_weight_range"] = list(self.a_weight_range)
        d["day_gap_range"] = list(self.day_gap_range)
        return d


@dataclass
class GroundTruth:
    spec: SynthSpec
    patients: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "seed": self.spec.seed, "patients": self.patients}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def random_network(n_nodes: int, density: float, weight_range=(0.1, 0.5), seed=None) -> np.ndarray:
    """Symmetric Erdos-Renyi weighted matrix with zero diagonal."""
    if not 0.0 <= density <= 1.0:
        raise ValidationError("density must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n_nodes, 1)
    present = rng.random(iu.size) < density
    weights = rng.uniform(weight_range[0], weight_range[1], iu.size)
    a = np.zeros((n_nodes, n_nodes))
    a[iu, ju] = np.where(present, weights, 0.0)
    return a + a.T


def contract_dynamics(a: np.ndarray, max_radius: float = MAX_DISCRETE_RADIUS) -> tuple[np.ndarray, float]:
    """Rescale ``a`` so that its spectral radius is at most ``max_radius``."""
    radius = float(np.max(np.abs(np.linalg.eigvals(a)))) if a.size else 0.0
    if radius <= max_radius or radius == 0:
        return np.array(a, dtype=float), 1.0
    scale = max_radius / radius
    return a * scale, scale


def _day_gaps(rng, n_obs, day_gap):
    if callable(day_gap):
        gaps = np.array([float(day_gap(rng)) for _ in range(n_obs - 1)])
    else:
        lo, hi = day_gap
        gaps = rng.integers(lo, hi + 1, n_obs - 1).astype(float)
    if np.any(gaps <= 0):
        raise ValidationError("day gaps must be positive")
    return np.concatenate([[0.0], np.cumsum(gaps)])


def _quantize(z):
    return np.clip(np.rint(z), 0, 3).astype(np.int64)


def simulate_series(a, n_obs: int, noise_sd: float, day_gap=(3, 14), seed=None, *, x0=None,
                    mean_level: float = 0.0, patient_id: str = "sim", return_scale: bool = False):
    """Discrete linear dynamics observed through 0..3 quantisation.

    ``x_{k+1} = m + A_d (x_k - m) + eps`` with ``eps ~ N(0, noise_sd^2 I)`` and
    ``A_d`` the contracted copy of ``a``. ``day_gap`` is an inclusive integer
    range or a callable drawing one gap from the generator.
    """
    a = np.asarray(a, dtype=float)
    if a.shape != (N_ITEMS, N_ITEMS):
        raise ValidationError(f"dynamics matrix must be {N_ITEMS}x{N_ITEMS}")
    a_d, scale = contract_dynamics(a)
    rng = np.random.default_rng(seed)
    mean = np.full(N_ITEMS, float(mean_level))
    x = mean.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    latent = np.empty((n_obs, N_ITEMS))
    for k in range(n_obs):
        latent[k] = x
        x = mean + a_d @ (x - mean) + noise_sd * rng.standard_normal(N_ITEMS)
    days = _day_gaps(rng, n_obs, day_gap)
    series = SymptomSeries.from_arrays(patient_id, days, _quantize(latent))
    return (series, scale) if return_scale else series


def brute_force_energy(a, b, x0, xt, T: float = 1.0, n_steps: int = 1000, tol: float = 1e-8) -> float:
    """Minimum energy over piecewise-constant inputs on ``n_steps`` intervals.

    Raises InfeasibleError when the least-squares reachability residual exceeds
    ``tol * (1 + ||rhs||)``.
    """
    if n_steps < 100:
        raise ValidationError("n_steps must be >= 100")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    xt = np.asarray(xt, dtype=float)
    n, m = b.shape
    dt = T / n_steps
    blk = np.zeros((n + m, n + m))
    blk[:n, :n] = a
    blk[:n, n:] = b
    e = expm(blk * dt)
    f, g = e[:n, :n], e[:n, n:]
    # reach[:, k] block = F^(N-1-k) G
    reach = np.empty((n, n_steps * m))
    cur = g
    for k in range(n_steps - 1, -1, -1):
        reach[:, k * m:(k + 1) * m] = cur
        cur = f @ cur
    free = np.linalg.matrix_power(f, n_steps) @ x0
    rhs = xt - free
    u, *_ = np.linalg.lstsq(reach, rhs, rcond=None)
    resid = np.linalg.norm(reach @ u - rhs)
    if resid > tol * (1.0 + np.linalg.norm(rhs)):
        raise InfeasibleError(f"target unreachable: residual {resid:.3g}")
    return float(dt * np.sum(u * u))


def _coupled_path(rng_seed, n_obs, spec: SynthSpec, chol, m_energy, kappa):
    """One patient's latent path with the energy-dependent drift."""
    rng = np.random.default_rng(rng_seed)
    mean = np.full(N_ITEMS, spec.mean_level)
    e_ref = float(mean @ m_energy @ mean)
    z = mean + spec.noise_sd * (chol @ rng.standard_normal(N_ITEMS))
    obs = np.empty((n_obs, N_ITEMS), dtype=np.int64)
    energy = np.empty(n_obs)
    phi = spec.persistence
    for t in range(spec.burn_in + n_obs):
        x = _quantize(z)
        e = float(x @ m_energy @ x)
        if t >= spec.burn_in:
            obs[t - spec.burn_in] = x
            energy[t - spec.burn_in] = e
        z = (mean + phi * (z - mean) + spec.noise_sd * (chol @ rng.standard_normal(N_ITEMS))
             - kappa * (e - e_ref) / N_ITEMS)
    days = _day_gaps(rng, n_obs, spec.day_gap_range)
    return obs, energy, days


def _nan_to_none(v: float):
    return None if not math.isfinite(v) else v


def _planted(energy, obs, days):
    sums = obs.sum(axis=1).astype(float)
    try:
        return spearman_partial(energy[:-1], np.diff(sums), [sums[:-1], np.diff(days)])
    except (UndefinedCorrelationError, CollinearityError, InsufficientDataError):
        return float("nan")


def synth_cohort(spec: SynthSpec, network_cfg: NetworkConfig | None = None):
    """Generate a cohort and its ground-truth record.

    The coupling acts through the energy under a per-patient *coupling
    network*. On the first pass that is the innovation network itself; each
    further pass re-estimates the symptom network from the previous pass's
    observations (same random draws) and uses it instead, so the planted
    association refers to a network the estimator can actually see.
    """
    network_cfg = network_cfg or NetworkConfig(seed=0)
    root = np.random.SeedSequence(spec.seed)
    patient_seqs = root.spawn(spec.n_patients)
    width = max(3, len(str(spec.n_patients)))
    series, truth = [], GroundTruth(spec)
    for p, seq in enumerate(patient_seqs):
        pid = f"S{p + 1:0{width}d}"
        prng = np.random.default_rng(seq)
        n_obs = int(prng.integers(spec.n_obs_min, spec.n_obs_max + 1))
        a_dyn, scale = contract_dynamics(
            random_network(N_ITEMS, spec.a_density, spec.a_weight_range, prng), MAX_DISCRETE_RADIUS)
        chol = np.linalg.cholesky(np.linalg.inv(np.eye(N_ITEMS) - a_dyn))
        m_value = float(prng.standard_normal())
        kappa = spec.coupling_strength * max(0.0, 1.0 + spec.moderator_effect * m_value)
        path_seed = int(prng.integers(2 ** 63))
        a_couple = a_dyn
        passes = spec.coupling_passes if kappa != 0 else 1
        for k in range(passes):
            obs, energy, days = _coupled_path(path_seed, n_obs, spec, chol, energy_to_zero_form(a_couple), kappa)
            if k < passes - 1:
                try:
                    a_couple = np.array(estimate_network(obs, network_cfg).a)
                except (DegenerateInputError, NonInvertibleError, InsufficientDataError):
                    a_couple = np.zeros_like(a_dyn)
        moderators = {
            "age": float(prng.integers(18, 65)),
            "sex": float(prng.random() < 0.78),
            **{c: float(prng.standard_normal()) for c in
               ("prs_mdd", "prs_bd", "rs_total", "rs_accept", "rs_comp",
                "ancestry_c1", "ancestry_c2", "ancestry_c3")},
        }
        moderators[spec.moderator_column] = m_value
        series.append(SymptomSeries.from_arrays(pid, days, obs, moderators))
        truth.patients.append({
            "patient_id": pid,
            "n_obs": n_obs,
            "a_dynamics": a_dyn.tolist(),
            "dynamics_scale": scale,
            "a_coupling": a_couple.tolist(),
            "kappa": kappa,
            "planted_coupling": _nan_to_none(_planted(energy, obs, days)),
            "moderator_value": m_value,
        })
    cohort = Cohort(tuple(series), {"source": f"synth(seed={spec.seed})"})
    return cohort, truth
