"""Exact generator assembly, stationarity, adjointness and uniformization."""
import math

import numpy as np
import pytest

from deposim import equilibrium as eq
from deposim import oracle
from deposim.errors import SpaceTooLarge
from deposim.models import builtin

SE = builtin("SE")
PA = builtin("PAExclusion", c=0.3, a=1.0)
ZR = builtin("ZR", f=lambda z: float(z))
BL = builtin("BL", beta=0.5)


def test_state_space_enumeration_bijective():
    space = oracle.StateSpace(3, 0, 1)
    assert space.n_states == 8
    seen = set()
    for s in range(space.n_states):
        cfg = space.configs[s]
        assert space.encode(cfg) == s
        seen.add(tuple(cfg))
    assert len(seen) == 8


def test_state_space_size_guard():
    with pytest.raises(SpaceTooLarge):
        oracle.StateSpace(8, 0, 7)


def test_generator_rows_sum_to_zero():
    for spec, theta in ((SE, 0.0), (PA, 0.0)):
        gen = oracle.build_generator(spec, 6, theta=theta)
        rowsums = np.asarray(gen.Q.sum(axis=1)).ravel()
        assert np.abs(rowsums).max() < 1e-12
        offdiag = gen.Q.copy()
        offdiag.setdiag(0.0)
        assert offdiag.min() >= 0.0


def test_generator_se_l3_examples():
    gen = oracle.build_generator(SE, 3)
    space = gen.space
    # state 110: only the edge from the occupied site 1 into empty site 2 fires
    s = space.encode(np.array([1, 1, 0]))
    assert -gen.Q[s, s] == pytest.approx(1.0)
    target = space.encode(np.array([1, 0, 1]))
    assert gen.Q[s, target] == pytest.approx(1.0)
    # frozen all-ones state has a zero row
    s_frozen = space.encode(np.array([1, 1, 1]))
    assert gen.Q[s_frozen].count_nonzero() == 0


def test_particle_sectors_are_invariant():
    gen = oracle.build_generator(PA, 4)
    sums = gen.space.configs.sum(axis=1)
    coo = gen.Q.tocoo()
    mask = coo.row != coo.col
    assert np.all(sums[coo.row[mask]] == sums[coo.col[mask]])


def test_stationarity_se_and_pa():
    theta = eq.theta_of_rho(SE, 0.3)
    res, leak = oracle.stationarity_residual(SE, theta, 6)
    assert leak == 0.0
    assert res < 1e-12
    res, leak = oracle.stationarity_residual(PA, 0.0, 6)
    assert leak == 0.0
    assert res < 1e-10


def test_stationarity_non_multiple_of_three_is_diagnostic():
    # for these builtin families the residual happens to vanish on any ring
    res, _ = oracle.stationarity_residual(PA, 0.0, 5)
    assert res < 1e-12


def test_stationarity_capped_alphabet_reports_leak():
    res, leak = oracle.stationarity_residual(BL, 0.0, 3, cap=9)
    assert leak > 0.0
    assert res <= leak  # dropped transitions bound the imbalance


def test_adjoint_check_se():
    report = oracle.adjoint_check(SE, eq.theta_of_rho(SE, 0.3), 6, trials=100, seed=1)
    assert report.max_discrepancy < 1e-9
    assert report.min_dirichlet > -1e-12
    assert report.ok


def test_adjoint_check_pa():
    report = oracle.adjoint_check(PA, 0.0, 6, trials=50, seed=2)
    assert report.max_discrepancy < 1e-9


def test_adjoint_constant_functions():
    gen = oracle.build_generator(SE, 3)
    const = np.ones(gen.space.n_states)
    assert np.abs(gen.Q @ const).max() < 1e-12
    gen_star = oracle.build_generator(SE, 3, reversed_rates=True)
    assert np.abs(gen_star.Q @ const).max() < 1e-12


def test_exact_correlation_t0():
    theta = eq.theta_of_rho(SE, 0.3)
    assert oracle.exact_correlation(SE, theta, 6, 1, 0.0) == pytest.approx(0.0, abs=1e-13)
    assert oracle.exact_correlation(SE, theta, 6, 0, 0.0) == pytest.approx(0.21, abs=1e-12)


def test_correlation_sum_is_conserved():
    # sum_n E(w~_0(0) w~_n(t)) over the ring equals Var for every t
    theta = eq.theta_of_rho(SE, 0.5)
    for t in (0.0, 0.5, 1.5):
        total = sum(oracle.exact_correlation(SE, theta, 6, n, t) for n in range(6))
        assert total == pytest.approx(0.25, abs=1e-9)


def test_uniformization_bound_and_distribution():
    start = np.array([0, 1, 0, 1, 0, 1])
    d, err, space = oracle.exact_distribution(SE, 6, start, 0.5)
    assert err < 1e-10
    assert d.sum() == pytest.approx(1.0, abs=1e-9)
    assert d.min() >= -1e-15
    # mass should have left the start state
    assert d[space.encode(start)] < 1.0


def test_exact_distribution_t0_is_point_mass():
    start = np.array([1, 0, 0])
    d, err, space = oracle.exact_distribution(SE, 3, start, 0.0)
    assert err == 0.0
    assert d[space.encode(start)] == 1.0


def test_zr_capped_window_covers_mass():
    gen = oracle.build_generator(ZR, 3, cap=8, theta=0.0)
    mu = oracle.product_measure(ZR, 0.0, gen.space)
    assert mu.sum() == pytest.approx(1.0)
    # Poisson(1) mass essentially inside [0, 7]
    assert gen.leak_bound(mu) < 1e-3


def test_bl_window_is_centered_without_theta():
    gen = oracle.build_generator(BL, 3, cap=9)
    assert (gen.space.z_lo, gen.space.z_hi) == (-4, 4)
