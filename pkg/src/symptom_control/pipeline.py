"""End-to-end cohort analysis shared by the CLI and the acceptance checks.

Patients are processed independently (optionally in a process pool) and all
cohort-level aggregation runs over patients sorted by id, so results do not
depend on scheduling.
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .control import (
    ControlConfig,
    DriverAnalysis,
    EnergySeries,
    driver_summary,
    energy_series,
    select_driver_nodes,
)
from .exceptions import SymptomControlError, ValidationError
from .model import Cohort, Exclusion, SymptomSeries, filter_eligible
from .netest import NetworkConfig, SymptomNetwork, estimate_network
from .stats import (
    ANCESTRY_COVARIATES,
    BASE_COVARIATES,
    MIN_TRANSITIONS,
    CouplingResult,
    cohort_couplings,
    cross_sectional_network,
    group_inference,
    loocv_compare,
    moderation_ancova,
)

SCHEMA_VERSION = "1.0"

DEFAULT_MODERATION: dict[str, tuple[str, ...]] = {
    "prs_mdd": BASE_COVARIATES + ANCESTRY_COVARIATES,
    "prs_bd": BASE_COVARIATES + ANCESTRY_COVARIATES,
    "ctq": BASE_COVARIATES,
    "rs_total": BASE_COVARIATES,
    "rs_accept": BASE_COVARIATES,
    "rs_comp": BASE_COVARIATES,
}


@dataclass(frozen=True)
class AnalysisConfig:
    """Everything that determines a cohort analysis apart from the data."""

    network: NetworkConfig = field(default_factory=NetworkConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    seed: int = 0
    min_obs: int = 8
    min_transitions: int = MIN_TRANSITIONS
    loocv_granularity: str = "subject"
    rank_tol: float = 1e-8
    moderation: Mapping[str, Sequence[str]] = field(default_factory=lambda: dict(DEFAULT_MODERATION))
    cross_sectional: bool = True

    def __post_init__(self):
        if self.loocv_granularity not in ("subject", "observation"):
            raise ValidationError(f"unknown loocv granularity {self.loocv_granularity!r}")
        if self.min_transitions < 3:
            raise ValidationError("min_transitions must be >= 3")
        if self.rank_tol <= 0:
            raise ValidationError("rank_tol must be > 0")


def patient_seed(root_seed: int, patient_id: str) -> int:
    """Deterministic per-patient seed derived from the root seed and the id."""
    digest = hashlib.sha256(patient_id.encode("utf-8")).digest()
    seq = np.random.SeedSequence([int(root_seed), int.from_bytes(digest[:8], "little")])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class PatientOutcome:
    patient_id: str
    network: SymptomNetwork | None = None
    energies: EnergySeries | None = None
    drivers: DriverAnalysis | None = None
    exclusion: Exclusion | None = None
    driver_error: str | None = None


def analyze_patient(series: SymptomSeries, cfg: AnalysisConfig) -> PatientOutcome:
    """Network, energy series and driver analysis of one patient."""
    pid = series.patient_id
    net_cfg = replace(cfg.network, seed=patient_seed(cfg.seed, pid))
    try:
        net = estimate_network(series, net_cfg)
    except SymptomControlError as exc:
        return PatientOutcome(pid, exclusion=Exclusion(pid, f"network: {exc}"))
    net = replace(net, patient_id=pid)
    drivers, driver_error = None, None
    try:
        drivers = select_driver_nodes(net.a, cfg.rank_tol, patient_id=pid)
    except SymptomControlError as exc:
        driver_error = str(exc)
    try:
        energies = energy_series(series, net, cfg.control)
    except SymptomControlError as exc:
        return PatientOutcome(pid, net, drivers=drivers, exclusion=Exclusion(pid, f"energy: {exc}"),
                              driver_error=driver_error)
    exclusion = Exclusion(pid, f"energy: {energies.reason}") if energies.excluded else None
    return PatientOutcome(pid, net, energies, drivers, exclusion, driver_error)


def _analyze_star(args):
    return analyze_patient(*args)


@dataclass
class AnalysisResult:
    config: AnalysisConfig
    input_ids: list[str]
    outcomes: list[PatientOutcome]
    couplings: list[CouplingResult]
    exclusions: list[Exclusion]
    group: Any = None
    loocv: Any = None
    moderation: dict[str, Any] = field(default_factory=dict)
    drivers: Any = None
    cross_sectional: SymptomNetwork | None = None
    stage_errors: dict[str, str] = field(default_factory=dict)

    @property
    def analyzed_ids(self) -> list[str]:
        return [c.patient_id for c in self.couplings]

    def summary(self) -> dict:
        """Machine-readable summary; contains no timestamps or host details."""
        cfg = self.config
        out = {
            "schema_version": SCHEMA_VERSION,
            "config": {
                "seed": cfg.seed,
                "min_obs": cfg.min_obs,
                "min_transitions": cfg.min_transitions,
                "loocv_granularity": cfg.loocv_granularity,
                "rank_tol": cfg.rank_tol,
                "network": asdict(cfg.network),
                "control": _control_dict(cfg.control),
                "moderation": {k: list(v) for k, v in cfg.moderation.items()},
            },
            "counts": {
                "input": len(self.input_ids),
                "analyzed": len(self.couplings),
                "excluded": len(self.exclusions),
            },
            "analyzed": self.analyzed_ids,
            "exclusions": [e.to_dict() for e in self.exclusions],
            "couplings": [_coupling_dict(c) for c in self.couplings],
            "group": self.group.to_dict() if self.group is not None else None,
            "loocv": self.loocv.to_dict() if self.loocv is not None else None,
            "moderation": {k: v.to_dict() for k, v in self.moderation.items()},
            "drivers": self.drivers.to_dict() if self.drivers is not None else None,
            "networks": {
                o.patient_id: {"n_obs": o.network.n_obs, "n_edges": o.network.n_edges,
                               "diagnostics": o.network.diagnostics}
                for o in self.outcomes if o.network is not None
            },
            "cross_sectional": (
                {"n_obs": self.cross_sectional.n_obs, "n_edges": self.cross_sectional.n_edges,
                 "diagnostics": self.cross_sectional.diagnostics}
                if self.cross_sectional is not None else None
            ),
            "stage_errors": dict(sorted(self.stage_errors.items())),
        }
        return out


def _control_dict(c: ControlConfig) -> dict:
    d = asdict(c)
    spec = d["input_spec"]
    if isinstance(spec, np.ndarray):
        d["input_spec"] = spec.tolist()
    elif isinstance(spec, tuple):
        d["input_spec"] = list(spec)
    return d


def _coupling_dict(c: CouplingResult) -> dict:
    return {"patient_id": c.patient_id, "r": c.r, "z": c.z, "n_pairs": c.n_pairs,
            "controls_used": list(c.controls_used)}


def analyze_cohort(cohort: Cohort, cfg: AnalysisConfig | None = None,
                   moderators: Mapping[str, Mapping[str, float]] | None = None,
                   n_jobs: int = 1) -> AnalysisResult:
    """Run every per-patient and cohort-level stage.

    Per-stage failures are collected in ``stage_errors``; only an empty
    eligible cohort is reported through ``counts`` for the caller to act on.
    """
    cfg = cfg or AnalysisConfig()
    input_ids = sorted(cohort.patient_ids)
    eligible = filter_eligible(cohort, cfg.min_obs)
    exclusions = list(eligible.exclusions)
    patients = sorted(eligible.patients, key=lambda s: s.patient_id)
    if moderators is None:
        moderators = {s.patient_id: dict(s.moderators) for s in patients}

    jobs = [(s, cfg) for s in patients]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            outcomes = list(pool.map(_analyze_star, jobs, chunksize=max(1, len(jobs) // (4 * n_jobs))))
    else:
        outcomes = [analyze_patient(s, cfg) for s in patients]

    by_id = {s.patient_id: s for s in patients}
    usable = []
    for o in outcomes:
        if o.exclusion is not None:
            exclusions.append(o.exclusion)
        else:
            usable.append((by_id[o.patient_id], o.energies))
    couplings, dropped = cohort_couplings(usable, cfg.min_transitions)
    exclusions.extend(dropped)
    exclusions.sort(key=lambda e: e.patient_id)

    result = AnalysisResult(cfg, input_ids, outcomes, couplings, exclusions)
    errors = result.stage_errors
    kept = {c.patient_id for c in couplings}
    kept_pairs = [(s, e) for s, e in usable if s.patient_id in kept]

    try:
        result.group = group_inference(couplings)
    except SymptomControlError as exc:
        errors["group"] = str(exc)
    try:
        result.loocv = loocv_compare(kept_pairs, cfg.loocv_granularity)
    except SymptomControlError as exc:
        errors["loocv"] = str(exc)
    for name, covs in cfg.moderation.items():
        try:
            result.moderation[name] = moderation_ancova(couplings, moderators, name, tuple(covs))
        except SymptomControlError as exc:
            errors[f"moderation.{name}"] = str(exc)
    analyses = [o.drivers for o in outcomes if o.drivers is not None]
    for o in outcomes:
        if o.driver_error is not None:
            errors[f"drivers.{o.patient_id}"] = o.driver_error
    if analyses:
        result.drivers = driver_summary(analyses, cfg.rank_tol)
    if cfg.cross_sectional and patients:
        try:
            result.cross_sectional = cross_sectional_network(
                patients, replace(cfg.network, seed=patient_seed(cfg.seed, "cross_sectional")))
        except SymptomControlError as exc:
            errors["cross_sectional"] = str(exc)
    return result


def round_floats(obj, digits: int = 12):
    """Recursively round floats to ``digits`` significant digits for stable JSON."""
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
        return float(f"{obj:.{digits}g}")
    if isinstance(obj, (np.floating,)):
        return round_floats(float(obj), digits)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v, digits) for v in obj]
    return obj
