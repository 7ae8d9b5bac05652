import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from symptom_control.control import (
    ControlConfig,
    _power_sum,
    _solve_batch,
    batch_energy_to_zero,
    controllability_gramian,
    distinct_eigenvalues,
    driver_summary,
    energy_series,
    energy_to_zero,
    energy_to_zero_form,
    exact_controllability,
    kalman_rank,
    min_energy_gramian,
    normalize_adjacency,
    numerical_rank,
    optimal_control,
    pbh_verify,
    select_driver_nodes,
)
from symptom_control.exceptions import (
    IllConditionedError,
    InternalConsistencyError,
    NonConvergentError,
    ValidationError,
)
from symptom_control.model import SymptomSeries
from symptom_control.netest import SymptomNetwork


def random_symmetric(rng, n, radius=2.0):
    a = rng.uniform(-1, 1, size=(n, n))
    a = (a + a.T) / 2
    return a * radius / np.max(np.abs(np.linalg.eigvalsh(a)))


def gramian_quadrature(a, b, T=1.0, m=4000):
    """Composite Simpson rule for the Gramian integral (oracle)."""
    ts = np.linspace(0, T, 2 * m + 1)
    lam, v = np.linalg.eigh(a)
    vals = []
    for t in ts:
        e = (v * np.exp(lam * t)) @ v.T
        vals.append(e @ b @ b.T @ e.T)
    vals = np.array(vals)
    h = T / (2 * m)
    return h / 3 * (vals[0] + vals[-1] + 4 * vals[1:-1:2].sum(0) + 2 * vals[2:-1:2].sum(0))


def test_zero_dynamics_constant_input():
    traj = optimal_control(np.zeros((4, 4)), np.eye(4), [3, 0, 0, 0], np.zeros(4))
    assert traj.energy == pytest.approx(9.0, rel=1e-9)
    np.testing.assert_allclose(traj.u, np.tile([-3.0, 0, 0, 0], (1001, 1)), atol=1e-9)
    assert traj.converged and traj.boundary_error < 1e-9
    assert traj.times[0] == 0 and traj.times[-1] == 1 and len(traj.times) == 1001


def test_zero_to_zero_is_free(rng):
    a = random_symmetric(rng, 5)
    traj = optimal_control(a, np.eye(5), np.zeros(5), np.zeros(5))
    assert traj.energy == 0.0
    assert np.all(traj.u == 0)


def test_random_6x6_matches_gramian(rng):
    a = rng.uniform(-0.5, 0.5, size=(6, 6))
    a = (a + a.T) / 2
    x0, xt = rng.uniform(0, 3, 6), rng.uniform(0, 3, 6)
    traj = optimal_control(a, np.eye(6), x0, xt)
    e, u = min_energy_gramian(a, np.eye(6), x0, xt)
    assert traj.energy == pytest.approx(e, rel=1e-4)
    assert traj.boundary_error <= 1e-6
    np.testing.assert_allclose(traj.u, u, atol=1e-6)


def test_gramian_trivial_and_scalar():
    w = controllability_gramian(np.zeros((3, 3)), np.eye(3))
    np.testing.assert_allclose(w, np.eye(3), atol=1e-14)
    e, _ = min_energy_gramian(np.zeros((3, 3)), np.eye(3), [1, 2, 0], [0, 1, 1])
    assert e == pytest.approx(3.0, rel=1e-12)
    e, _ = min_energy_gramian([[1.0]], [[1.0]], [1.0], [0.0])
    assert e == pytest.approx(2 * math.e ** 2 / (math.e ** 2 - 1), rel=1e-12)
    w = controllability_gramian([[1.0]], [[1.0]])
    assert w[0, 0] == pytest.approx((math.e ** 2 - 1) / 2, rel=1e-12)


def test_gramian_matches_quadrature(rng):
    a = random_symmetric(rng, 5)
    b = rng.normal(size=(5, 2))
    np.testing.assert_allclose(controllability_gramian(a, b), gramian_quadrature(a, b), rtol=1e-9, atol=1e-12)


def test_gramian_ill_conditioned():
    a = np.zeros((2, 2))
    b = np.array([[1.0], [0.0]])
    with pytest.raises(IllConditionedError):
        min_energy_gramian(a, b, [1, 1], [0, 0])


def test_energy_form_matches_solver(rng):
    a = random_symmetric(rng, 8)
    m = energy_to_zero_form(a)
    x0 = rng.uniform(0, 3, 8)
    # the solver integrates on the step grid; the form is exact
    assert x0 @ m @ x0 == pytest.approx(optimal_control(a, np.eye(8), x0, np.zeros(8)).energy, rel=1e-5)


def test_expm_accuracy_against_eigendecomposition(rng):
    a = random_symmetric(rng, 21, radius=3.0)
    lam, v = np.linalg.eigh(a)
    np.testing.assert_allclose(expm(a), (v * np.exp(lam)) @ v.T, atol=1e-10, rtol=0)


def test_power_sum_matches_loop(rng):
    phi = rng.normal(size=(5, 5)) * 0.4
    g = rng.normal(size=(5, 5))
    g = g @ g.T
    for count in (1, 2, 7, 16, 1001):
        s, p = _power_sum(phi, g, count)
        ref, q = np.zeros_like(g), np.eye(5)
        for _ in range(count):
            ref += q.T @ g @ q
            q = phi @ q
        np.testing.assert_allclose(s, ref, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(p, q, rtol=1e-10, atol=1e-12)


def test_batch_closed_form_matches_trajectory_loop(rng):
    a = random_symmetric(rng, 21)
    x0s = rng.integers(0, 4, size=(21, 12)).astype(float)
    cfg = ControlConfig()
    fast = _solve_batch(a, np.eye(21), x0s, np.zeros(21), cfg)
    slow = _solve_batch(a, np.eye(21), x0s, np.zeros(21), cfg, keep_trajectory=True)
    np.testing.assert_allclose(fast["energy"], slow["energy"], rtol=1e-10)


def test_energy_to_zero_examples(rng):
    net = SymptomNetwork(np.zeros((21, 21)), np.ones((21, 21)), np.zeros((21, 21), bool), 30)
    assert energy_to_zero(net, np.zeros(21)) == 0.0
    x0 = rng.integers(0, 4, 21).astype(float)
    assert energy_to_zero(net, x0) == pytest.approx(float(x0 @ x0), rel=1e-9)
    with pytest.raises(ValidationError):
        energy_to_zero(net, np.full(21, 4.0))


def test_energy_quadratic_scaling(rng):
    a = random_symmetric(rng, 21)
    x0 = rng.uniform(0, 1.5, 21)
    e1 = energy_to_zero(a, x0)
    assert energy_to_zero(a, 2 * x0) == pytest.approx(4 * e1, rel=1e-6)


def test_energy_positive_and_boundary(rng):
    for _ in range(10):
        n = int(rng.integers(3, 12))
        a = random_symmetric(rng, n)
        x0 = rng.uniform(0, 3, n)
        traj = optimal_control(a, np.eye(n), x0, np.zeros(n))
        assert traj.energy > 0
        assert traj.boundary_error <= 1e-5 * (1 + np.linalg.norm(x0))


def test_step_refinement(rng):
    a = random_symmetric(rng, 10, radius=1.5)
    x0 = rng.uniform(0, 3, 10)
    coarse = optimal_control(a, np.eye(10), x0, np.zeros(10), ControlConfig(step=0.002)).energy
    fine = optimal_control(a, np.eye(10), x0, np.zeros(10), ControlConfig(step=0.001)).energy
    assert abs(coarse - fine) / fine < 1e-3


def test_state_cost_increases_energy(rng):
    a = random_symmetric(rng, 6)
    x0 = rng.uniform(0, 3, 6)
    plain = optimal_control(a, np.eye(6), x0, np.zeros(6)).energy
    costed = optimal_control(a, np.eye(6), x0, np.zeros(6), ControlConfig(use_state_cost=True))
    assert costed.converged and costed.boundary_error < 1e-6
    # the input sees a different objective; its control energy is at least the minimum
    assert costed.energy >= plain - 1e-9


def test_uncontrollable_input_does_not_converge():
    a = np.zeros((2, 2))
    b = np.array([[1.0], [0.0]])
    with pytest.raises(NonConvergentError):
        optimal_control(a, b, [1.0, 1.0], [0.0, 0.0])


def test_input_spec_variants():
    cfg = ControlConfig(input_spec=[0, 2])
    np.testing.assert_array_equal(cfg.input_matrix(3), [[1, 0], [0, 0], [0, 1]])
    with pytest.raises(ValidationError):
        ControlConfig(input_spec=[5]).input_matrix(3)
    with pytest.raises(ValidationError):
        ControlConfig(step=2.0)
    with pytest.raises(ValidationError):
        ControlConfig(rho=0)


def test_normalize_adjacency_stable(rng):
    a = random_symmetric(rng, 7, radius=4.0)
    assert np.max(np.linalg.eigvalsh(normalize_adjacency(a))) < 0


def test_energy_series_cardinality_and_zero_row(rng):
    items = rng.integers(0, 4, size=(15, 21))
    items[4] = 0
    s = SymptomSeries.from_arrays("p", np.arange(15) * 7, items)
    es = energy_series(s, random_symmetric(rng, 21, radius=1.0))
    assert len(es) == 15 and not es.excluded
    assert es.e0[4] == 0.0
    assert es.metadata["normalize_a"] is False


def test_energy_series_marks_nonconvergence(rng):
    items = rng.integers(0, 4, size=(9, 21))
    s = SymptomSeries.from_arrays("p", np.arange(9), items)
    # a huge eigenvalue spread makes E12 numerically singular
    a = np.diag(np.r_[np.full(10, 800.0), np.full(11, -800.0)])
    es = energy_series(s, a)
    assert es.excluded and "did not converge" in es.reason


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000), st.floats(0.1, 5))
def test_scaling_property(n, seed, c):
    rng = np.random.default_rng(seed)
    a = random_symmetric(rng, n)
    x0 = rng.uniform(0, 3, (1, n))
    e1, ok1, _ = batch_energy_to_zero(a, x0)
    e2, ok2, _ = batch_energy_to_zero(a, c * x0)
    assert ok1.all() and ok2.all()
    assert e2[0] == pytest.approx(c * c * e1[0], rel=1e-6)


# ---------------------------------------------------------------- drivers

def star(n_leaves=3):
    a = np.zeros((n_leaves + 1, n_leaves + 1))
    a[0, 1:] = a[1:, 0] = 1.0
    return a


def test_exact_controllability_examples():
    assert exact_controllability(np.diag([1.0, 2.0, 3.0]))[0] == 1
    n_d, table, lam = exact_controllability(np.zeros((5, 5)))
    assert n_d == 5 and lam == 0 and table == [(0, 5)]
    n_d, table, lam = exact_controllability(star())
    assert n_d == 2 and abs(lam) < 1e-12
    eig = sorted(float(np.real(l)) for l, _ in table)
    np.testing.assert_allclose(eig, [-math.sqrt(3), 0, math.sqrt(3)], atol=1e-10)


def test_multiplicities_sum_to_n_for_symmetric(rng):
    for _ in range(20):
        n = int(rng.integers(2, 12))
        a = np.round(random_symmetric(rng, n), 1)
        a[rng.random((n, n)) < 0.5] = 0
        a = np.triu(a, 1) + np.triu(a, 1).T
        _, table, _ = exact_controllability(a)
        assert sum(m for _, m in table) == n


def test_lambda_m_tie_break():
    # eigenvalues 2 (x2), -2 (x2), 0.5: both +-2 have multiplicity 2
    a = np.diag([2.0, 2.0, -2.0, -2.0, 0.5])
    n_d, _, lam = exact_controllability(a)
    assert n_d == 2 and lam == 2.0
    a = np.diag([-3.0, -3.0, 1.0, 1.0])
    assert exact_controllability(a)[2] == -3.0


def test_numerical_rank_and_clustering():
    assert numerical_rank(np.zeros((3, 3))) == 0
    assert numerical_rank(np.diag([1.0, 1e-12, 1.0])) == 2
    lam = distinct_eigenvalues(np.diag([1.0, 1.0 + 1e-12, 2.0]))
    assert len(lam) == 2


def test_drivers_zero_matrix():
    d = select_driver_nodes(np.zeros((3, 3)))
    assert d.drivers == [0, 1, 2] and d.n_d == 3 and d.pbh_all and d.pbh_lambda_m


def test_drivers_two_dyads():
    dyad = np.array([[0.0, 0.7], [0.7, 0.0]])
    a = np.block([[dyad, np.zeros((2, 2))], [np.zeros((2, 2)), dyad]])
    d = select_driver_nodes(a)
    assert d.n_d == 2 and d.pbh_lambda_m
    assert len({i // 2 for i in d.drivers}) == 2
    b = np.zeros((4, 2))
    b[d.drivers, [0, 1]] = 1
    assert kalman_rank(a, b) == 4


def test_drivers_distinct_spectrum(rng):
    a = random_symmetric(rng, 8)
    d = select_driver_nodes(a)
    assert d.n_d == 1 and d.pbh_lambda_m and len(d.drivers) == 1


def test_diagonal_exposes_lambda_m_only_gap():
    d = select_driver_nodes(np.diag([1.0, 2.0, 3.0]))
    assert d.n_d == 1 and d.pbh_lambda_m and not d.pbh_all
    assert d.to_dict()["drivers"] == [d.drivers[0] + 1]


def test_driver_minimality(rng):
    for _ in range(15):
        n = int(rng.integers(3, 10))
        a = np.zeros((n, n))
        m = rng.random((n, n)) < 0.3
        a[m] = 1.0
        a = np.triu(a, 1)
        a = a + a.T
        d = select_driver_nodes(a)
        lam_i = d.lambda_m * np.eye(n) - a
        for drop in d.drivers:
            keep = [x for x in d.drivers if x != drop]
            b = np.zeros((n, len(keep)))
            b[keep, range(len(keep))] = 1
            assert numerical_rank(np.hstack([lam_i, b])) < n


def test_pbh_examples():
    rng = np.random.default_rng(0)
    a = random_symmetric(rng, 5)
    assert pbh_verify(a, np.eye(5))[0]
    assert not pbh_verify(np.zeros((2, 2)), np.array([[1.0], [0.0]]))[0]
    path = np.diag(np.ones(3), 1) + np.diag(np.ones(3), -1)
    b = np.array([[1.0], [0], [0], [0]])
    ok, report = pbh_verify(path, b)
    assert ok and kalman_rank(path, b) == 4
    assert len(report) == 4


def test_pbh_agrees_with_kalman(rng):
    for _ in range(200):
        n = int(rng.integers(1, 9))
        a = np.zeros((n, n))
        a[rng.random((n, n)) < 0.4] = 1.0
        a = np.triu(a, 1)
        a = a + a.T
        m = int(rng.integers(1, n + 1))
        b = np.zeros((n, m))
        b[rng.integers(0, n, m), np.arange(m)] = 1
        assert pbh_verify(a, b)[0] == (kalman_rank(a, b) == n)


def test_driver_summary_examples(rng):
    s = driver_summary([np.zeros((21, 21))] * 3)
    assert s.median_n_d == 21 and all(c == 3 for c in s.item_counts)
    s = driver_summary([random_symmetric(rng, 21) for _ in range(4)])
    assert s.median_n_d == 1
    mats = [np.diag(rng.integers(0, 3, 6).astype(float)) for _ in range(5)]
    s = driver_summary(mats, n_items=6)
    assert s.n_d_values == [exact_controllability(m)[0] for m in mats]


def test_select_driver_internal_error_is_reported(monkeypatch):
    import symptom_control.control as ctl
    monkeypatch.setattr(ctl, "_qr_rank", lambda rows, rank_tol, full: 0)
    with pytest.raises(InternalConsistencyError):
        ctl.select_driver_nodes(np.diag([1.0, 1.0, 2.0]))
