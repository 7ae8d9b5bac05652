"""Group-level statistics linking control energy to future symptom change."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np
from scipy import stats as sps
from sklearn.linear_model import LinearRegression
from sklearn.model_selection import LeaveOneGroupOut, LeaveOneOut, cross_val_predict

from .control import EnergySeries
from .exceptions import (
    CollinearityError,
    DegenerateInputError,
    InsufficientDataError,
    UndefinedCorrelationError,
    ValidationError,
)
from .model import Cohort, Exclusion, SymptomSeries
from .netest import NetworkConfig, SymptomNetwork, estimate_network

R_CLAMP = 1.0 - 1e-12
MIN_TRANSITIONS = 5
# conditional rank variance below this counts as fully explained by the controls
_RESIDUAL_EPS = 1e-12
BASE_COVARIATES = ("age", "sex", "n_bdi")
ANCESTRY_COVARIATES = ("ancestry_c1", "ancestry_c2", "ancestry_c3")


@dataclass(frozen=True)
class CouplingResult:
    patient_id: str
    r: float
    z: float
    n_pairs: int
    controls_used: tuple[str, ...] = ("bdi_t", "delta_days")

    @property
    def n_measurements(self) -> int:
        return self.n_pairs + 1


@dataclass(frozen=True)
class GroupResult:
    n_patients: int
    mean_z: float
    mean_r: float
    t_stat: float
    df: int
    p_one_tailed: float
    ci95: tuple[float, float]
    alternative: str = "less"
    # one-sample t-test of the patient z values (df = n - 1), reported alongside
    p_one_sample: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "n": self.n_patients, "mean_z": self.mean_z, "mean_r": self.mean_r, "t": self.t_stat,
            "df": self.df, "p_one_tailed": self.p_one_tailed, "ci95": list(self.ci95),
            "alternative": self.alternative, "p_one_sample_z": self.p_one_sample,
        }


@dataclass(frozen=True)
class LoocvResult:
    mae_e0: float
    mae_bdi: float
    p_compare: float
    n_transitions: int
    n_patients: int
    granularity: str
    test: str = "paired two-sided t-test on per-transition absolute errors"
    degenerate_features: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "mae_e0": self.mae_e0, "mae_bdi": self.mae_bdi, "p_compare": self.p_compare,
            "n_transitions": self.n_transitions, "n_patients": self.n_patients,
            "granularity": self.granularity, "test": self.test,
            "degenerate_features": list(self.degenerate_features),
        }


@dataclass(frozen=True)
class ModerationResult:
    moderator: str
    n: int
    beta: float
    f_stat: float
    df1: int
    df2: int
    p_two_tailed: float
    covariates: tuple[str, ...]
    t_stat: float = float("nan")
    n_dropped: int = 0

    def to_dict(self) -> dict:
        return {
            "beta": self.beta, "f": self.f_stat, "df1": self.df1, "df2": self.df2,
            "p": self.p_two_tailed, "n_complete": self.n, "n_dropped": self.n_dropped,
            "covariates": list(self.covariates),
        }


# ------------------------------------------------------------------ correlations

def _ranks(v: np.ndarray, name: str) -> np.ndarray:
    r = sps.rankdata(v)
    if np.ptp(r) == 0:
        raise UndefinedCorrelationError(f"{name} is constant; correlation undefined")
    return r


def spearman_partial(x, y, controls: Sequence = ()) -> float:
    """Partial Spearman correlation of x and y given ``controls``.

    All variables are replaced by average ranks and the partial correlation is
    read off the precision of the rank correlation matrix (through the Schur
    complement of the control block). Returns 0 when x or y is completely
    determined by the controls.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    cs = [np.asarray(c, dtype=float) for c in controls]
    n = x.size
    if y.size != n or any(c.size != n for c in cs):
        raise ValidationError("all variables need the same length")
    if n <= len(cs) + 2:
        raise InsufficientDataError(f"need n > {len(cs) + 2} observations, got {n}")
    ranked = [_ranks(x, "x"), _ranks(y, "y")] + [_ranks(c, f"control {i}") for i, c in enumerate(cs)]
    r = np.corrcoef(np.vstack(ranked))
    s = r[:2, :2]
    if cs:
        rc = r[2:, 2:]
        if np.linalg.cond(rc) > 1e12:
            raise CollinearityError("control variables are collinear after ranking")
        # Schur complement = inverse of the (x, y) block of the precision matrix
        s = s - r[:2, 2:] @ np.linalg.solve(rc, r[2:, :2])
    vx, vy = s[0, 0], s[1, 1]
    if min(vx, vy) <= _RESIDUAL_EPS:
        # x or y is a function of the controls: nothing left to correlate
        return 0.0
    val = s[0, 1] / math.sqrt(vx * vy)
    if not math.isfinite(val):
        raise CollinearityError("rank correlation matrix is numerically singular")
    return float(np.clip(val, -1.0, 1.0))


def fisher_z(r: float) -> float:
    return float(np.arctanh(np.clip(r, -R_CLAMP, R_CLAMP)))


def patient_coupling(series: SymptomSeries, energies: EnergySeries,
                     min_transitions: int = MIN_TRANSITIONS) -> CouplingResult:
    """Partial Spearman correlation of E0 at t with the sum-score change to t+1.

    Controls are the sum score at t and the days between measurements; a
    control that is constant within the patient carries no information and is
    left out (recorded in ``controls_used``).
    """
    if energies.excluded:
        raise ValidationError(f"patient {series.patient_id!r} is excluded: {energies.reason}")
    sums = series.sum_scores.astype(float)
    days = series.days
    n_pairs = len(sums) - 1
    if n_pairs < min_transitions:
        raise InsufficientDataError(f"{n_pairs} transitions < minimum {min_transitions}")
    x = np.asarray(energies.e0, dtype=float)[:-1]
    y = np.diff(sums)
    candidates = {"bdi_t": sums[:-1], "delta_days": np.diff(days)}
    used = tuple(k for k, v in candidates.items() if np.ptp(v) > 0)
    r = spearman_partial(x, y, [candidates[k] for k in used])
    r = float(np.clip(r, -R_CLAMP, R_CLAMP))
    return CouplingResult(series.patient_id, r, fisher_z(r), n_pairs, used)


def cohort_couplings(pairs: Iterable[tuple[SymptomSeries, EnergySeries]],
                     min_transitions: int = MIN_TRANSITIONS):
    """Couplings for every (series, energies) pair; failures become Exclusions."""
    ok, dropped = [], []
    for s, e in pairs:
        try:
            ok.append(patient_coupling(s, e, min_transitions))
        except (InsufficientDataError, UndefinedCorrelationError, CollinearityError, ValidationError) as exc:
            dropped.append(Exclusion(s.patient_id, f"coupling: {exc}"))
    return ok, dropped


def group_inference(couplings: Sequence, alternative: Literal["less", "greater"] = "less") -> GroupResult:
    """Aggregate patient couplings by their mean Fisher z.

    The mean z is back-transformed to a correlation and tested with
    ``t = r sqrt((n - 2) / (1 - r^2))`` on n - 2 degrees of freedom, n being
    the number of patients.
    """
    z = np.array([c.z if hasattr(c, "z") else fisher_z(c) for c in couplings], dtype=float)
    n = z.size
    if n < 3:
        raise InsufficientDataError(f"group inference needs >= 3 patients, got {n}")
    mean_z = float(np.mean(z))
    mean_r = float(np.tanh(mean_z))
    df = n - 2
    t = mean_r * math.sqrt(df / (1.0 - mean_r ** 2)) if abs(mean_r) < 1 else math.copysign(math.inf, mean_r)
    p = float(sps.t.cdf(t, df) if alternative == "less" else sps.t.sf(t, df))
    sd = float(np.std(z, ddof=1))
    half = sps.t.ppf(0.975, n - 1) * sd / math.sqrt(n)
    ci = (float(np.tanh(mean_z - half)), float(np.tanh(mean_z + half)))
    if sd > 1e-12 * max(1.0, abs(mean_z)):
        p1 = float(sps.ttest_1samp(z, 0.0, alternative=alternative).pvalue)
    else:
        toward = mean_z < 0 if alternative == "less" else mean_z > 0
        p1 = 0.5 if mean_z == 0 else (0.0 if toward else 1.0)
    return GroupResult(n, mean_z, mean_r, float(t), df, p, ci, alternative, p1)


# ---------------------------------------------------------------------- LOOCV

def _pooled_transitions(pairs):
    e0, bdi, y, groups = [], [], [], []
    for s, e in pairs:
        sums = s.sum_scores.astype(float)
        if len(sums) < 2:
            continue
        e0.append(np.asarray(e.e0, dtype=float)[:-1])
        bdi.append(sums[:-1])
        y.append(np.diff(sums))
        groups.extend([s.patient_id] * (len(sums) - 1))
    if not y:
        raise InsufficientDataError("no transitions available")
    return np.concatenate(e0), np.concatenate(bdi), np.concatenate(y), np.array(groups)


def loocv_compare(pairs: Sequence[tuple[SymptomSeries, EnergySeries]],
                  granularity: Literal["subject", "observation"] = "subject") -> LoocvResult:
    """Cross-validated MAE of one-feature linear models for the sum-score change.

    Model 1 uses E0 at t, model 2 the sum score at t. ``granularity="subject"``
    holds out one patient at a time; ``"observation"`` one transition at a time.
    """
    pairs = list(pairs)
    if len({s.patient_id for s, _ in pairs}) < 3:
        raise InsufficientDataError("loocv_compare needs >= 3 patients")
    e0, bdi, y, groups = _pooled_transitions(pairs)
    if not (np.isfinite(e0).all() and np.isfinite(bdi).all()):
        raise DegenerateInputError("non-finite feature values")
    if granularity == "subject":
        splitter, kw = LeaveOneGroupOut(), {"groups": groups}
    elif granularity == "observation":
        splitter, kw = LeaveOneOut(), {}
    else:
        raise ValidationError(f"unknown granularity {granularity!r}")
    errors = {}
    degenerate = []
    for name, feat in (("e0", e0), ("bdi", bdi)):
        if np.ptp(feat) == 0:
            degenerate.append(name)
        pred = cross_val_predict(LinearRegression(), feat[:, None], y, cv=splitter, **kw)
        errors[name] = np.abs(y - pred)
    diff = errors["e0"] - errors["bdi"]
    if np.all(diff == 0):
        p = 1.0
    else:
        p = float(sps.ttest_rel(errors["e0"], errors["bdi"]).pvalue)
        if not math.isfinite(p):
            p = 1.0
    return LoocvResult(
        mae_e0=float(errors["e0"].mean()), mae_bdi=float(errors["bdi"].mean()), p_compare=p,
        n_transitions=int(y.size), n_patients=int(len(set(groups))), granularity=granularity,
        degenerate_features=tuple(degenerate),
    )


# ------------------------------------------------------------------ moderation

def _covariate_value(c, name: str, moderators: Mapping[str, Mapping[str, float]]):
    if name == "n_bdi":
        return float(c.n_measurements)
    v = moderators.get(c.patient_id, {}).get(name)
    return None if v is None or not math.isfinite(v) else float(v)


def _offending_columns(x: np.ndarray, names: Sequence[str]) -> list[str]:
    """Columns taking part in a linear dependence of the design."""
    _, sv, vt = np.linalg.svd(x / np.maximum(np.linalg.norm(x, axis=0), 1e-300), full_matrices=True)
    tol = max(x.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    rank = int(np.sum(sv > tol))
    null = vt[rank:]
    involved = np.any(np.abs(null) > 1e-8, axis=0)
    return [n for n, bad in zip(names, involved) if bad]


def moderation_ancova(couplings: Sequence[CouplingResult], moderators: Mapping[str, Mapping[str, float]],
                      moderator: str, covariates: Sequence[str] = BASE_COVARIATES) -> ModerationResult:
    """OLS of patient coupling z on a moderator plus covariates.

    Reports the moderator's partial F (= t^2) on (1, n - p) degrees of freedom.
    Patients missing any required value are dropped listwise. ``n_bdi`` is
    derived from the coupling itself.
    """
    covariates = tuple(covariates)
    rows, dropped = [], 0
    for c in couplings:
        vals = [_covariate_value(c, moderator, moderators)] + [_covariate_value(c, k, moderators) for k in covariates]
        if any(v is None for v in vals) or not math.isfinite(c.z):
            dropped += 1
            continue
        rows.append([c.z] + vals)
    p = len(covariates) + 2
    n = len(rows)
    if n < p + 1:
        raise InsufficientDataError(f"{n} complete cases; need >= {p + 1} for {moderator!r}")
    data = np.array(rows, dtype=float)
    y = data[:, 0]
    x = np.column_stack([np.ones(n), data[:, 1:]])
    names = ["intercept", moderator, *covariates]
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise CollinearityError(f"rank-deficient design; offending columns: {_offending_columns(x, names)}")
    beta, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ beta
    df2 = n - p
    sigma2 = float(resid @ resid) / df2
    xtx_inv = np.linalg.inv(x.T @ x)
    se = math.sqrt(sigma2 * xtx_inv[1, 1]) if sigma2 > 0 else 0.0
    if se > 0:
        t = float(beta[1] / se)
    else:
        t = 0.0 if beta[1] == 0 else math.copysign(math.inf, beta[1])
    f = t * t
    pval = float(sps.f.sf(f, 1, df2)) if math.isfinite(f) else 0.0
    return ModerationResult(moderator, n, float(beta[1]), f, 1, df2, pval, covariates, t, dropped)


def cross_sectional_network(cohort: Cohort | Iterable[SymptomSeries], cfg: NetworkConfig | None = None,
                            min_pooled: int = 30) -> SymptomNetwork:
    """Network estimated from all observations pooled across patients and time."""
    series = list(cohort)
    if not series:
        raise InsufficientDataError("no patients to pool")
    x = np.vstack([s.items for s in series]).astype(float)
    if x.shape[0] < min_pooled:
        raise InsufficientDataError(f"{x.shape[0]} pooled observations < {min_pooled}")
    net = estimate_network(x, cfg)
    return SymptomNetwork(net.a, net.pvalues, net.mask, net.n_obs,
                          {**net.diagnostics, "pooled_patients": len(series)}, "cross_sectional")
