"""Product-measure marginals, moments and closed-form cross-checks."""
import math

import numpy as np
import pytest
import scipy.stats

from deposim import equilibrium as eq
from deposim.errors import DeposimError, ThetaOutOfRange, Unsupported
from deposim.models import ModelSpec, SupportInterval, builtin

SE = builtin("SE")
PA = builtin("PAExclusion", c=0.3, a=1.0)
ZR = builtin("ZR", f=lambda z: float(z))
BL = builtin("BL", beta=0.5)
ALL = [SE, PA, ZR, BL]
IDS = ["SE", "PA", "ZR", "BL"]


# ---------------------------------------------------------------- f recovery
def test_f_from_rates_se_gauge():
    f = eq.f_from_rates(SE, f1=1.0)
    assert f(1) == 1.0


def test_f_from_rates_recovers_zr_f():
    f = eq.f_from_rates(ZR)
    for z in range(1, 11):
        assert f(z) == pytest.approx(float(z), rel=1e-14)


def test_f_from_rates_recovers_bl_f_from_rates_alone():
    # strip the family tag so recovery must go through the rate ratios
    bl_f = BL.f
    custom = ModelSpec(BL.support, BL.rate, "Custom", {})
    f = eq.f_from_rates(custom, f1=bl_f(1))
    for z in range(-5, 7):
        assert f(z) == pytest.approx(bl_f(z), rel=1e-12)


def test_f_from_rates_zero_denominator():
    frozen = ModelSpec(SupportInterval(0, 2), lambda z, y: 0.0)
    f = eq.f_from_rates(frozen)
    with pytest.raises(DeposimError):
        f(1)


# ---------------------------------------------------------------- factorials
def test_log_f_factorial_base_cases():
    f = eq.f_from_rates(ZR)
    assert eq.log_f_factorial(f, 0) == 0.0
    assert eq.log_f_factorial(f, 5) == pytest.approx(math.log(120.0), rel=1e-14)


def test_log_f_factorial_bl_closed_form():
    beta = 0.5
    f = BL.f
    for z in range(-8, 9):
        assert eq.log_f_factorial(f, z) == pytest.approx(beta * z * z / 2.0, abs=1e-12)


def test_log_f_factorial_recursion():
    f = eq.f_from_rates(PA)
    for z in (-1, 0):
        lhs = eq.log_f_factorial(f, z) + math.log(f(z + 1))
        assert lhs == pytest.approx(eq.log_f_factorial(f, z + 1), abs=1e-12)


# ---------------------------------------------------------------- theta range
def test_theta_bounds_finite_support():
    assert eq.theta_bounds(SE) == (-math.inf, math.inf)
    assert eq.theta_bounds(PA) == (-math.inf, math.inf)


def test_theta_bounds_zr_linear():
    assert eq.theta_bounds(ZR) == (-math.inf, math.inf)


def test_theta_bounds_zr_bounded_f():
    spec = builtin("ZR", f=lambda z: 1.0 - 0.5**z if z > 0 else 0.0)
    lo, hi = eq.theta_bounds(spec)
    assert lo == -math.inf
    assert abs(hi) < 1e-9  # lim log f = 0


def test_theta_bounds_bl():
    lo, hi = eq.theta_bounds(BL)
    assert lo == -math.inf and hi == math.inf


def test_theta_out_of_range():
    spec = builtin("ZR", f=lambda z: 1.0 - 0.5**z if z > 0 else 0.0)
    with pytest.raises(ThetaOutOfRange):
        eq.build_marginal(spec, 0.5)


# ---------------------------------------------------------------- marginals
def test_marginal_se_two_point():
    for theta in (-1.0, 0.0, 0.7):
        m = eq.build_marginal(SE, theta)
        assert (m.z_lo, m.z_hi) == (0, 1)
        expect = math.exp(theta) / (1.0 + math.exp(theta))
        assert m.weight(1) == pytest.approx(expect, rel=1e-14)
        assert m.tail_bound == 0.0


def test_marginal_zr_poisson():
    m = eq.build_marginal(ZR, 0.0, eps=1e-13)
    pois = scipy.stats.poisson(1.0)
    for z in range(m.z_lo, m.z_hi + 1):
        assert m.weight(z) == pytest.approx(pois.pmf(z), rel=1e-10, abs=1e-15)
    assert m.tail_bound < 1e-12


def test_marginal_bl_symmetric_gaussian_weights():
    m = eq.build_marginal(BL, 0.0)
    assert m.z_lo == -m.z_hi
    w0 = m.weight(0)
    for z in range(0, m.z_hi + 1):
        assert m.weight(z) == pytest.approx(w0 * math.exp(-0.25 * z * z), rel=1e-11)
        assert m.weight(-z) == pytest.approx(m.weight(z), rel=1e-12)
    rho = float(m.weights @ m.values)
    assert abs(rho) < 1e-14


@pytest.mark.parametrize("spec", ALL, ids=IDS)
@pytest.mark.parametrize("theta", [-0.8, 0.0, 0.5])
def test_marginal_ratio_identity(spec, theta):
    m = eq.build_marginal(spec, theta)
    f = eq.f_from_rates(spec)
    et = math.exp(theta)
    for z in range(m.z_lo, m.z_hi):
        ratio = m.weight(z + 1) / m.weight(z)
        assert ratio == pytest.approx(et / f(z + 1), rel=1e-12)


@pytest.mark.parametrize("spec", ALL, ids=IDS)
@pytest.mark.parametrize("theta", [-0.6, 0.0, 0.4])
def test_detailed_identity_eq7(spec, theta):
    """r(z+1, y-1) mu(z+1) mu(y-1) / (mu(z) mu(y)) = r(y, z) on the window."""
    m = eq.build_marginal(spec, theta)
    sup = spec.support
    lo = max(m.z_lo, int(sup.omega_min) if sup.finite_below else m.z_lo)
    hi = min(m.z_hi, int(sup.omega_max) if sup.finite_above else m.z_hi)
    for z in range(lo, hi):
        for y in range(lo + 1, hi + 1):
            lhs = (
                spec.rate(z + 1, y - 1)
                * m.weight(z + 1)
                * m.weight(y - 1)
                / (m.weight(z) * m.weight(y))
            )
            assert lhs == pytest.approx(spec.rate(y, z), abs=1e-10)


# ---------------------------------------------------------------- moments
def test_moments_se_bernoulli():
    theta = eq.theta_of_rho(SE, 0.3)
    mt = eq.moments(eq.build_marginal(SE, theta), SE)
    assert mt.rho == pytest.approx(0.3, abs=1e-12)
    assert mt.var == pytest.approx(0.21, abs=1e-12)
    assert mt.Er == pytest.approx(0.21, abs=1e-12)


def test_moments_zr_poisson():
    mt = eq.moments(eq.build_marginal(ZR, 0.0, eps=1e-14), ZR)
    assert mt.rho == pytest.approx(1.0, abs=1e-12)
    assert mt.var == pytest.approx(1.0, abs=1e-12)
    assert mt.m3 == pytest.approx(1.0, abs=1e-11)


def test_moments_bl_flux_is_two_cosh_theta():
    for theta in (0.0, 0.35):
        mt = eq.moments(eq.build_marginal(BL, theta, eps=1e-14), BL)
        assert mt.Er == pytest.approx(2.0 * math.cosh(theta), abs=1e-11)
    assert eq.moments(eq.build_marginal(BL, 0.0), BL).rho == pytest.approx(0.0, abs=1e-13)


# ---------------------------------------------------------------- rho <-> theta
def test_rho_theta_se_closed_form():
    assert eq.rho_of_theta(SE, 0.0) == pytest.approx(0.5, abs=1e-14)
    assert eq.theta_of_rho(SE, 0.5) == pytest.approx(0.0, abs=1e-10)
    rho = 0.3
    assert eq.theta_of_rho(SE, rho) == pytest.approx(math.log(rho / (1 - rho)), abs=1e-10)


def test_rho_theta_zr_exponential():
    for theta in (-0.5, 0.0, 0.8):
        assert eq.rho_of_theta(ZR, theta) == pytest.approx(math.exp(theta), rel=1e-11)


@pytest.mark.parametrize("spec", ALL, ids=IDS)
def test_rho_theta_round_trip(spec):
    grid = np.linspace(-0.9, 0.9, 7)
    rhos = [eq.rho_of_theta(spec, t) for t in grid]
    assert all(b > a for a, b in zip(rhos, rhos[1:]))  # strictly increasing
    for theta, rho in zip(grid, rhos):
        assert eq.theta_of_rho(spec, rho) == pytest.approx(theta, abs=1e-10)


# ---------------------------------------------------------------- flux
def test_hydro_flux_se():
    for rho in (0.2, 0.5, 0.7):
        assert eq.hydro_flux(SE, rho) == pytest.approx(rho * (1 - rho), abs=1e-11)


def test_hydro_flux_bl():
    for rho in (-0.4, 0.0, 0.6):
        theta = eq.theta_of_rho(BL, rho)
        assert eq.hydro_flux(BL, rho) == pytest.approx(2.0 * math.cosh(theta), rel=1e-9)


def test_hydro_flux_zr_linear_f():
    for rho in (0.5, 1.0, 2.0):
        assert eq.hydro_flux(ZR, rho) == pytest.approx(rho, rel=1e-10)


# ---------------------------------------------------------------- reversed rates
def test_reversed_rate_se_example():
    m = eq.build_marginal(SE, 0.3)
    assert eq.reversed_rate(SE, m, 0, 1, verify=True) == 1.0


def test_reversed_rate_boundary():
    m = eq.build_marginal(SE, 0.0)
    for z in (0, 1):
        assert eq.reversed_rate(SE, m, 1, z, verify=True) == SE.rate(z, 1) == 0.0


@pytest.mark.parametrize("spec", ALL, ids=IDS)
def test_reversed_rate_cross_check_window(spec):
    m = eq.build_marginal(spec, 0.5)
    lo = max(m.z_lo + 1, m.z_lo)
    for z in range(lo, m.z_hi):
        for y in range(lo + 1, m.z_hi):
            eq.reversed_rate(spec, m, z, y, verify=True)  # raises on mismatch


# ---------------------------------------------------------------- speeds
def test_speed_se_closed_form():
    theta = eq.theta_of_rho(SE, 0.3)
    assert eq.characteristic_speed_closed(SE, theta) == pytest.approx(0.4, abs=1e-10)


def test_speed_se_static_brute_force():
    # independent two-site Bernoulli enumeration of E(r* (w0~ + w1~)) / Var
    rho = 0.3
    theta = eq.theta_of_rho(SE, rho)
    p = {0: 1 - rho, 1: rho}
    num = 0.0
    for w0 in (0, 1):
        for w1 in (0, 1):
            rstar = SE.rate(w1, w0)
            num += p[w0] * p[w1] * rstar * ((w0 - rho) + (w1 - rho))
    var = rho * (1 - rho)
    expected = num / var
    assert expected == pytest.approx(0.4, abs=1e-12)
    m = eq.build_marginal(SE, theta)
    assert eq.characteristic_speed_static(SE, m) == pytest.approx(expected, abs=1e-12)


def test_speed_zr_is_one_for_linear_f():
    for theta in (-0.5, 0.0, 0.5):
        assert eq.characteristic_speed_closed(ZR, theta) == pytest.approx(1.0, rel=1e-10)


def test_speed_bl_zero_at_theta_zero():
    assert eq.characteristic_speed_closed(BL, 0.0) == 0.0
    m = eq.build_marginal(BL, 0.0)
    assert eq.characteristic_speed_static(BL, m) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("spec", [SE, ZR, BL], ids=["SE", "ZR", "BL"])
def test_speed_static_matches_closed_on_grid(spec):
    for theta in np.linspace(-1.0, 1.0, 21):
        m = eq.build_marginal(spec, float(theta), eps=1e-14)
        closed = eq.characteristic_speed_closed(spec, float(theta))
        static = eq.characteristic_speed_static(spec, m)
        assert static == pytest.approx(closed, abs=1e-9)


def test_speed_closed_unsupported_for_pa():
    with pytest.raises(Unsupported):
        eq.characteristic_speed_closed(PA, 0.0)


def test_pa_static_speed_brute_force():
    m = eq.build_marginal(PA, 0.0)
    w = {z: m.weight(z) for z in (-1, 0, 1)}
    rho = sum(z * p for z, p in w.items())
    var = sum((z - rho) ** 2 * p for z, p in w.items())
    num = 0.0
    for z0, p0 in w.items():
        for z1, p1 in w.items():
            num += p0 * p1 * PA.rate(z1, z0) * ((z0 - rho) + (z1 - rho))
    assert eq.characteristic_speed_static(PA, m) == pytest.approx(num / var, abs=1e-12)


# ---------------------------------------------------------------- certificate
def test_certificate_bl_positive_at_zero():
    mt = eq.moments(eq.build_marginal(BL, 0.0), BL)
    cert = eq.convexity_certificate(BL, 0.0)
    assert cert == pytest.approx(2.0 * mt.var, rel=1e-10)
    assert cert > 0.0


def test_certificate_zr_linear_is_zero_on_grid():
    for theta in np.linspace(-1.0, 1.0, 21):
        assert abs(eq.convexity_certificate(ZR, float(theta))) < 1e-10


def test_certificate_zr_strictly_convex_f():
    spec = builtin("ZR", f=lambda z: float(z + max(z - 1, 0)) if z > 0 else 0.0)
    grid = np.linspace(-1.0, 1.0, 9)
    assert max(eq.convexity_certificate(spec, float(t)) for t in grid) > 1e-4


def test_certificate_unsupported_for_se():
    with pytest.raises(Unsupported):
        eq.convexity_certificate(SE, 0.0)


# ---------------------------------------------------------------- lemma 3.3(ii)
@pytest.mark.parametrize("spec", ALL, ids=IDS)
@pytest.mark.parametrize("theta", [-0.4, 0.0, 0.5])
def test_correlation_kernel_normalization(spec, theta):
    """sum_z sum_{y>z} (y - rho) mu(y) = Var(omega)."""
    m = eq.build_marginal(spec, theta, eps=1e-14)
    w = m.weights
    vals = m.values.astype(float)
    rho = float(w @ vals)
    var = float(w @ (vals - rho) ** 2)
    g = (vals - rho) * w
    # tail sums T(z) = sum_{y > z} g(y) mu(y), then sum over window z
    tails = np.cumsum(g[::-1])[::-1]  # tails[k] = sum_{j >= k} g_j
    total = float(np.sum(tails[1:]))  # exclude y = z itself
    assert total == pytest.approx(var, abs=1e-9)


# ---------------------------------------------------------------- s-particle speed
def test_second_class_speed_limits_to_characteristic_speed():
    h = 1e-2
    for spec in (ZR, BL):
        for theta in (-0.5, 0.0, 0.5):
            c = eq.second_class_speed(spec, theta - h / 2, theta + h / 2)
            C = eq.characteristic_speed_closed(spec, theta)
            assert c == pytest.approx(C, abs=1e-2)


def test_second_class_speed_bl_value():
    # c(0, 0.5) = 2 (cosh 0.5 - 1) / (rho(0.5) - rho(0))
    rho2 = eq.rho_of_theta(BL, 0.5)
    expect = 2.0 * (math.cosh(0.5) - 1.0) / rho2
    assert eq.second_class_speed(BL, 0.0, 0.5) == pytest.approx(expect, rel=1e-12)


# ---------------------------------------------------------------- sampling
def test_sample_configuration_deterministic():
    m = eq.build_marginal(ZR, 0.0)
    a = eq.sample_configuration(m, 100, np.random.default_rng(7))
    b = eq.sample_configuration(m, 100, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_sample_configuration_clt_bands():
    m = eq.build_marginal(ZR, 0.0)
    n = 1_000_000
    draws = eq.sample_configuration(m, n, np.random.default_rng(123))
    assert draws.mean() == pytest.approx(1.0, abs=4.0 / math.sqrt(n))
    # Var(sample var) ~ (m4 - var^2)/n; Poisson(1): m4 = 10? use generous band
    assert draws.var() == pytest.approx(1.0, abs=4.0 * math.sqrt(4.0 / n))
