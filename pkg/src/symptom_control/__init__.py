"""Symptom networks as linear control systems: estimation, control energy and coupling tests."""

__version__ = "0.1.0"

from .control import (
    ControlConfig,
    batch_energy_to_zero,
    energy_series,
    energy_to_zero,
    exact_controllability,
    min_energy_gramian,
    optimal_control,
    pbh_verify,
    select_driver_nodes,
)
from .estimators import ControlEnergyTransformer, SymptomNetworkEstimator, check_item_matrix
from .model import Cohort, SymptomSeries, filter_eligible, parse_cohort
from .netest import NetworkConfig, SymptomNetwork, estimate_network, fdr_by, kendall_tau_b
from .pipeline import AnalysisConfig, analyze_cohort
from .stats import group_inference, loocv_compare, moderation_ancova, patient_coupling, spearman_partial
from .synth import SynthSpec, brute_force_energy, synth_cohort

__all__ = [
    "AnalysisConfig", "Cohort", "ControlConfig", "ControlEnergyTransformer", "NetworkConfig",
    "SymptomNetwork", "SymptomNetworkEstimator", "SymptomSeries", "SynthSpec", "analyze_cohort",
    "batch_energy_to_zero", "brute_force_energy", "check_item_matrix", "energy_series", "energy_to_zero",
    "estimate_network", "exact_controllability", "fdr_by", "filter_eligible", "group_inference",
    "kendall_tau_b", "loocv_compare", "min_energy_gramian", "moderation_ancova", "optimal_control",
    "parse_cohort", "patient_coupling", "pbh_verify", "select_driver_nodes", "spearman_partial",
    "synth_cohort",
]
