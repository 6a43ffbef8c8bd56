"""Stationary product measures, their moments and derived quantities.

The single-site marginal at chemical potential theta puts weight
e^{theta z} / f(z)! on slope value z, where f is recovered from the rate
function (or is the defining function for ZR/BL).  Everything downstream
of the marginal -- density, variance, hydrodynamic flux, characteristic
speed, convexity certificate -- reduces to window sums over a truncated
and normalized weight vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DeposimError, DivisionByZeroRate, ThetaOutOfRange, Unsupported
from .models import ModelSpec

_WINDOW_CAP = 200_000


def f_from_rates(spec: ModelSpec, f1: float = 1.0) -> Callable[[int], float]:
    """Recover the single-site function f(z) = r(z,0)/r(1,z-1) * f1.

    Defined for omega_min < z < omega_max + 1.  For ZR/BL the defining f
    is returned directly (same function up to the f(1) gauge).
    """
    if spec.f is not None:
        return spec.f
    if f1 <= 0:
        raise DeposimError("f(1) gauge must be positive")
    cache: dict[int, float] = {}
    sup = spec.support

    def f(z: int) -> float:
        if not (sup.omega_min < z < sup.omega_max + 1):
            raise DeposimError(f"f({z}) outside admissible range")
        if z not in cache:
            denom = spec.rate(1, z - 1)
            if denom == 0.0:
                raise DivisionByZeroRate(f"r(1, {z - 1}) = 0 while recovering f({z})")
            cache[z] = spec.rate(z, 0) / denom * f1
        return cache[z]

    return f


def log_f_factorial(f: Callable[[int], float], z: int) -> float:
    """log f(z)! with f(z)! the product f(1)...f(z), reciprocal form for z < 0."""
    if z == 0:
        return 0.0
    if z > 0:
        return sum(math.log(f(y)) for y in range(1, z + 1))
    return -sum(math.log(f(y)) for y in range(z + 1, 1))


def _log_f_limit(f: Callable[[int], float], sign: int) -> float:
    """lim log f(sign * z) as z -> infinity, probed on the truncation scale."""
    probes = (64, 128)
    vals = []
    for z in probes:
        try:
            v = f(sign * z)
        except OverflowError:
            return math.inf
        if v <= 0.0:
            return -math.inf
        if math.isinf(v):
            return math.inf
        vals.append(math.log(v))
    if abs(vals[-1] - vals[0]) <= 1e-9:
        return vals[-1]
    return math.inf if vals[-1] > vals[0] else -math.inf


def theta_bounds(spec: ModelSpec) -> tuple[float, float]:
    """(theta_lo, theta_hi): limits of log f at -/+ infinity, or -/+inf for
    finite support ends."""
    f = f_from_rates(spec)
    hi = math.inf if spec.support.finite_above else _log_f_limit(f, +1)
    lo = -math.inf if spec.support.finite_below else _log_f_limit(f, -1)
    return lo, hi


@dataclass(frozen=True)
class Marginal:
    """Truncated, normalized single-site marginal of the product measure."""

    theta: float
    z_lo: int
    z_hi: int
    weights: np.ndarray
    logZ: float
    tail_bound: float
    cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        s = float(self.weights.sum())
        if abs(s - 1.0) > 1e-14:
            raise DeposimError(f"marginal weights sum to {s}, not 1")
        cdf = np.cumsum(self.weights)
        cdf[-1] = 1.0
        object.__setattr__(self, "cdf", cdf)
        self.weights.setflags(write=False)

    @property
    def values(self) -> np.ndarray:
        return np.arange(self.z_lo, self.z_hi + 1, dtype=np.int64)

    def weight(self, z: int) -> float:
        """Probability of value z; zero outside the stored window."""
        if self.z_lo <= z <= self.z_hi:
            return float(self.weights[z - self.z_lo])
        return 0.0

    def covers(self, z: int) -> bool:
        return self.z_lo <= z <= self.z_hi


@dataclass(frozen=True)
class MomentTable:
    """Window moments used by the growth-fluctuation identities."""

    rho: float
    var: float
    m3: float
    Er: float
    Erstar_w0: float
    Erstar_w1: float


def build_marginal(spec: ModelSpec, theta: float, eps: float = 1e-12) -> Marginal:
    """Window the weights e^{theta z} / f(z)! so the excluded mass is < eps."""
    lo_b, hi_b = theta_bounds(spec)
    if not (lo_b < theta < hi_b):
        raise ThetaOutOfRange(f"theta={theta} outside ({lo_b}, {hi_b})")
    f = f_from_rates(spec)
    sup = spec.support
    et = math.exp(theta)

    # climb to the mode: weights rise while e^theta / f(z+1) > 1
    z0 = int(sup.omega_min) if sup.finite_below else 0
    steps = 0
    while z0 + 1 < sup.omega_max + 1 and f(z0 + 1) < et:
        z0 += 1
        steps += 1
        if steps > _WINDOW_CAP:
            raise ThetaOutOfRange(f"mode search exceeded cap at theta={theta}")
    while z0 - 1 > sup.omega_min and f(z0) > et:
        z0 -= 1
        steps += 1
        if steps > _WINDOW_CAP:
            raise ThetaOutOfRange(f"mode search exceeded cap at theta={theta}")

    # log-weights relative to the mode, grown until geometric tails are < eps
    lw_up = [0.0]
    z_hi = z0
    tail_up = 0.0
    while True:
        if z_hi >= sup.omega_max:
            break
        q = et / f(z_hi + 1)
        w_edge = math.exp(lw_up[-1])
        if q < 0.5 and w_edge * q / (1.0 - q) < eps:
            tail_up = w_edge * q / (1.0 - q)
            break
        lw_up.append(lw_up[-1] + theta - math.log(f(z_hi + 1)))
        z_hi += 1
        if len(lw_up) > _WINDOW_CAP:
            raise ThetaOutOfRange(f"window exceeded cap above at theta={theta}")

    lw_down = []
    z_lo = z0
    tail_down = 0.0
    while True:
        if z_lo <= sup.omega_min:
            break
        q = f(z_lo) / et
        w_edge = math.exp(lw_down[-1] if lw_down else 0.0)
        if q < 0.5 and w_edge * q / (1.0 - q) < eps:
            tail_down = w_edge * q / (1.0 - q)
            break
        lw_down.append((lw_down[-1] if lw_down else 0.0) - theta + math.log(f(z_lo)))
        z_lo -= 1
        if len(lw_down) > _WINDOW_CAP:
            raise ThetaOutOfRange(f"window exceeded cap below at theta={theta}")

    lw = np.array(lw_down[::-1] + lw_up, dtype=np.float64)
    m = lw.max()
    raw = np.exp(lw - m)
    mass = float(raw.sum())
    weights = raw / raw.sum()
    # logZ relative to the true normalization: lw(z) = theta z - log f(z)!
    log_w_mode = theta * z0 - log_f_factorial(f, z0)
    logZ = log_w_mode + m + math.log(mass)
    return Marginal(
        theta=theta,
        z_lo=z_lo,
        z_hi=z_hi,
        weights=weights,
        logZ=logZ,
        tail_bound=(tail_up + tail_down) / mass,
    )


def rate_matrix(spec: ModelSpec, marginal: Marginal) -> np.ndarray:
    """r(z, y) tabulated over the marginal window (rows z, columns y)."""
    vals = marginal.values
    n = len(vals)
    out = np.empty((n, n), dtype=np.float64)
    for i, z in enumerate(vals):
        for j, y in enumerate(vals):
            out[i, j] = spec.rate(int(z), int(y))
    return out


def moments(marginal: Marginal, spec: ModelSpec) -> MomentTable:
    """Single- and two-site expectations under independent marginals."""
    w = marginal.weights
    vals = marginal.values.astype(np.float64)
    rho = float(w @ vals)
    centered = vals - rho
    var = float(w @ centered**2)
    m3 = float(w @ centered**3)
    R = rate_matrix(spec, marginal)
    wz = w * centered
    Er = float(w @ R @ w)
    Erstar_w0 = float(wz @ (R.T @ w))
    Erstar_w1 = float(w @ (R.T @ wz))
    if not np.isfinite([rho, var, m3, Er, Erstar_w0, Erstar_w1]).all():
        raise DeposimError("non-finite moment encountered")
    if var <= 0:
        raise DeposimError("variance must be positive")
    return MomentTable(rho, var, m3, Er, Erstar_w0, Erstar_w1)


def rho_of_theta(spec: ModelSpec, theta: float, eps: float = 1e-12) -> float:
    m = build_marginal(spec, theta, eps)
    return float(m.weights @ m.values)


def theta_of_rho(spec: ModelSpec, rho: float, tol: float = 1e-12) -> float:
    """Invert the strictly increasing density map by bisection."""
    lo_b, hi_b = theta_bounds(spec)
    lo = max(lo_b + 1e-9, -60.0) if math.isfinite(lo_b) else -1.0
    hi = min(hi_b - 1e-9, 60.0) if math.isfinite(hi_b) else 1.0

    def g(theta: float) -> float:
        return rho_of_theta(spec, theta) - rho

    # expand the bracket toward whichever bound is open
    for _ in range(200):
        if g(lo) <= 0.0:
            break
        if math.isfinite(lo_b):
            lo = (lo + lo_b) / 2.0 + 1e-12
        else:
            lo *= 2.0
        if lo < -700.0:
            raise ThetaOutOfRange(f"density {rho} unreachable from below")
    for _ in range(200):
        if g(hi) >= 0.0:
            break
        if math.isfinite(hi_b):
            hi = (hi + hi_b) / 2.0 - 1e-12
        else:
            hi *= 2.0
        if hi > 700.0:
            raise ThetaOutOfRange(f"density {rho} unreachable from above")
    if g(lo) > 0.0 or g(hi) < 0.0:
        raise ThetaOutOfRange(f"density {rho} not bracketed in ({lo_b}, {hi_b})")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def hydro_flux(spec: ModelSpec, rho: float) -> float:
    """H(rho): equilibrium growth rate at density rho."""
    theta = theta_of_rho(spec, rho)
    return moments(build_marginal(spec, theta), spec).Er


def reversed_rate(
    spec: ModelSpec,
    marginal: Marginal | None,
    z: int,
    y: int,
    verify: bool = False,
    tol: float = 1e-10,
) -> float:
    """Rate of the reversed process, r*(z, y) = r(y, z).

    With verify=True the detailed-balance form
    r(z+1, y-1) mu(z+1) mu(y-1) / (mu(z) mu(y)) is recomputed and must
    agree within tol wherever the marginal window covers the arguments.
    """
    value = spec.rate(y, z)
    if verify:
        if marginal is None:
            raise DeposimError("verification needs a marginal")
        sup = spec.support
        needed = [v for v in (z, y, z + 1, y - 1) if sup.contains(v)]
        if all(marginal.covers(v) for v in needed):
            mz, my = marginal.weight(z), marginal.weight(y)
            mz1 = marginal.weight(z + 1) if sup.contains(z + 1) else 0.0
            my1 = marginal.weight(y - 1) if sup.contains(y - 1) else 0.0
            if mz > 0.0 and my > 0.0:
                r_up = spec.rate(z + 1, y - 1) if sup.contains(z + 1) and sup.contains(y - 1) else 0.0
                alt = r_up * mz1 * my1 / (mz * my)
                if abs(alt - value) > tol * max(1.0, abs(value)):
                    raise DeposimError(
                        f"reversed-rate forms disagree at (z={z}, y={y}, "
                        f"theta={marginal.theta}): {value} vs {alt}"
                    )
    return value


def characteristic_speed_closed(spec: ModelSpec, theta: float) -> float:
    """Closed-form defect speed: SE 1-2rho, ZR e^theta/Var, BL 2sinh(theta)/Var."""
    if spec.family == "SE":
        return 1.0 - 2.0 * rho_of_theta(spec, theta)
    if spec.family == "ZR":
        var = moments(build_marginal(spec, theta, eps=1e-15), spec).var
        return math.exp(theta) / var
    if spec.family == "BL":
        var = moments(build_marginal(spec, theta, eps=1e-15), spec).var
        return 2.0 * math.sinh(theta) / var
    raise Unsupported(f"no closed-form characteristic speed for family {spec.family}")


def characteristic_speed_static(spec: ModelSpec, marginal: Marginal) -> float:
    """Speed from static two-site expectations: E(r* (w0~ + w1~)) / Var."""
    mt = moments(marginal, spec)
    return (mt.Erstar_w0 + mt.Erstar_w1) / mt.var


def convexity_certificate(spec: ModelSpec, theta: float) -> float:
    """Positive iff the hydrodynamic flux is strictly convex at theta.

    BL: (e^t + e^-t) Var - (e^t - e^-t) E(w~^3); ZR: e^t (Var - E(w~^3)).
    """
    mt = moments(build_marginal(spec, theta, eps=1e-15), spec)
    if spec.family == "BL":
        return (math.exp(theta) + math.exp(-theta)) * mt.var - (
            math.exp(theta) - math.exp(-theta)
        ) * mt.m3
    if spec.family == "ZR":
        return math.exp(theta) * (mt.var - mt.m3)
    raise Unsupported(f"no convexity certificate for family {spec.family}")


def second_class_speed(spec: ModelSpec, theta1: float, theta2: float) -> float:
    """Speed c(theta1, theta2) of the auxiliary walker riding the
    second-class particles between densities rho(theta1) < rho(theta2)."""
    rho1 = rho_of_theta(spec, theta1)
    rho2 = rho_of_theta(spec, theta2)
    if spec.family == "BL":
        return 2.0 * (math.cosh(theta2) - math.cosh(theta1)) / (rho2 - rho1)
    if spec.family == "ZR":
        return (math.exp(theta2) - math.exp(theta1)) / (rho2 - rho1)
    raise Unsupported(f"no second-class walker speed for family {spec.family}")


def sample_configuration(marginal: Marginal, L: int, rng: np.random.Generator) -> np.ndarray:
    """L iid draws via inverse CDF over the truncated window."""
    if L < 1:
        raise DeposimError("L must be >= 1")
    u = rng.random(L)
    idx = np.searchsorted(marginal.cdf, u, side="right")
    return (marginal.z_lo + idx).astype(np.int64)
