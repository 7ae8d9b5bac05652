"""scikit-learn style wrappers around network estimation and control energy.

Both estimators take an observation-by-item matrix ``X`` (rows in time order)
or a :class:`SymptomSeries`, so they slot into pipelines and ``clone``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted

from .control import ControlConfig, batch_energy_to_zero, select_driver_nodes
from .exceptions import ValidationError
from .model import SymptomSeries
from .netest import NetworkConfig, SymptomNetwork, estimate_network


def check_item_matrix(X, *, n_items: int | None = None, ordinal: bool = False, min_rows: int = 1) -> np.ndarray:
    """Validate an observation-by-item matrix and return it as float.

    ``ordinal=True`` additionally requires integer scores in 0..3.
    """
    if isinstance(X, SymptomSeries):
        X = X.items
    X = check_array(X, dtype=float, ensure_min_samples=min_rows, ensure_all_finite=True)
    if n_items is not None and X.shape[1] != n_items:
        raise ValidationError(f"expected {n_items} item columns, got {X.shape[1]}")
    if ordinal and (np.any(X != np.rint(X)) or X.min() < 0 or X.max() > 3):
        raise ValidationError("item scores must be integers in 0..3")
    return X


class SymptomNetworkEstimator(BaseEstimator):
    """Thresholded partial Kendall network of one patient's time series.

    Attributes set by ``fit``: ``network_``, ``adjacency_``, ``pvalues_``,
    ``mask_``, ``n_features_in_``.
    """

    def __init__(self, alpha=0.05, ridge_tol=1e-6, ridge_cap=0.1, backend="auto",
                 n_permutations=1000, seed=None, control_df=False):
        self.alpha = alpha
        self.ridge_tol = ridge_tol
        self.ridge_cap = ridge_cap
        self.backend = backend
        self.n_permutations = n_permutations
        self.seed = seed
        self.control_df = control_df

    def _config(self) -> NetworkConfig:
        return NetworkConfig(alpha=self.alpha, ridge_tol=self.ridge_tol, ridge_cap=self.ridge_cap,
                             backend=self.backend, n_permutations=self.n_permutations,
                             seed=self.seed, control_df=self.control_df)

    def fit(self, X, y=None):
        pid = X.patient_id if isinstance(X, SymptomSeries) else None
        X = check_item_matrix(X, min_rows=2)
        net = estimate_network(X, self._config())
        self.network_ = SymptomNetwork(net.a, net.pvalues, net.mask, net.n_obs, net.diagnostics, pid)
        self.adjacency_ = net.a
        self.pvalues_ = net.pvalues
        self.mask_ = net.mask
        self.n_features_in_ = X.shape[1]
        return self

    def drivers(self, rank_tol=1e-8):
        """Exact-controllability driver analysis of the fitted network."""
        check_is_fitted(self, "network_")
        return select_driver_nodes(self.adjacency_, rank_tol, patient_id=self.network_.patient_id)


class ControlEnergyTransformer(TransformerMixin, BaseEstimator):
    """Map each symptom state (row) to its minimum energy to reach zero.

    ``network`` may be a fixed adjacency matrix or SymptomNetwork; when it is
    None a network is estimated from the data passed to ``fit`` with a clone
    of ``network_estimator`` (default :class:`SymptomNetworkEstimator`).
    ``transform`` returns an (n, 1) array; per-row convergence flags of the
    last call are kept in ``converged_``.
    """

    def __init__(self, network=None, network_estimator=None, horizon_T=1.0, rho=1.0, step=0.001,
                 boundary_tol=1e-5, normalize_a=False, use_state_cost=False, input_spec="identity"):
        self.network = network
        self.network_estimator = network_estimator
        self.horizon_T = horizon_T
        self.rho = rho
        self.step = step
        self.boundary_tol = boundary_tol
        self.normalize_a = normalize_a
        self.use_state_cost = use_state_cost
        self.input_spec = input_spec

    def _config(self) -> ControlConfig:
        return ControlConfig(horizon_T=self.horizon_T, rho=self.rho, step=self.step,
                             boundary_tol=self.boundary_tol, normalize_a=self.normalize_a,
                             use_state_cost=self.use_state_cost, input_spec=self.input_spec)

    def fit(self, X, y=None):
        self._config()
        if self.network is not None:
            a = np.asarray(getattr(self.network, "a", self.network), dtype=float)
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise ValidationError("network must be a square matrix")
        else:
            est = clone(self.network_estimator) if self.network_estimator is not None else SymptomNetworkEstimator()
            est.fit(X)
            self.network_estimator_ = est
            a = est.adjacency_
        self.adjacency_ = a
        self.n_features_in_ = a.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "adjacency_")
        X = check_item_matrix(X, n_items=self.n_features_in_)
        if X.min() < 0 or X.max() > 3:
            raise ValidationError("item scores must lie in [0, 3]")
        e0, conv, _ = batch_energy_to_zero(self.adjacency_, X, self._config())
        self.converged_ = conv
        return e0[:, None]


__all__ = ["ControlEnergyTransformer", "SymptomNetworkEstimator", "check_item_matrix"]
