"""Rate functions for the four built-in model families plus custom rates.

A model is a pair (support interval, jump-rate function r).  A brick laid
on the column over edge (i, i+1) realizes the move
(omega_i, omega_{i+1}) -> (omega_i - 1, omega_{i+1} + 1) at rate
r(omega_i, omega_{i+1}).  The validators check the structural conditions
(monotonicity, the additive triple rule and the multiplicative triple
rule) that make the slope marginals a product measure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import InvalidParams

NEG_INF = float("-inf")
POS_INF = float("inf")

#: families with a built-in constructor
FAMILIES = ("SE", "PAExclusion", "ZR", "BL", "Custom")


@dataclass(frozen=True)
class SupportInterval:
    """Closed set of admissible slope values {z : omega_min <= z <= omega_max}.

    Either end may be infinite.  omega_min <= 0 and omega_max >= 1 always.
    """

    omega_min: float
    omega_max: float

    def __post_init__(self):
        if not self.omega_min <= 0:
            raise InvalidParams(f"omega_min must be <= 0, got {self.omega_min}")
        if not self.omega_max >= 1:
            raise InvalidParams(f"omega_max must be >= 1, got {self.omega_max}")
        for v in (self.omega_min, self.omega_max):
            if not (math.isinf(v) or float(v).is_integer()):
                raise InvalidParams(f"support bound {v} is not an integer or infinity")

    def contains(self, z: int) -> bool:
        return self.omega_min - 1 < z < self.omega_max + 1

    @property
    def finite_below(self) -> bool:
        return not math.isinf(self.omega_min)

    @property
    def finite_above(self) -> bool:
        return not math.isinf(self.omega_max)

    def box(self, half_width: int) -> range:
        """Finite truncation of the support, [-half_width, half_width] clipped."""
        lo = -half_width if not self.finite_below else int(self.omega_min)
        hi = half_width if not self.finite_above else int(self.omega_max)
        lo = max(lo, -half_width)
        hi = min(hi, half_width)
        return range(lo, hi + 1)


@dataclass(frozen=True)
class ModelSpec:
    """Immutable bundle of support, rate function and family metadata.

    The rate callable must be pure: deterministic, side-effect free, and
    defined for every pair of values in the support.
    """

    support: SupportInterval
    rate: Callable[[int, int], float]
    family: str = "Custom"
    params: dict = field(default_factory=dict)

    @property
    def f(self) -> Callable[[int], float] | None:
        """Defining single-site function for ZR/BL families, else None."""
        return self.params.get("f")


@dataclass
class ValidationReport:
    """Outcome of one structural validator; violations carry the witness."""

    name: str
    checked: int
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        state = "pass" if self.ok else f"FAIL ({len(self.violations)} violations)"
        return f"{self.name}: {state} over {self.checked} cases"


def _bl_extend(f_pos: Callable[[int], float]) -> Callable[[int], float]:
    """Extend f from z >= 1 to all of Z via the pairing f(z) f(-z+1) = 1."""

    def f(z: int) -> float:
        if z >= 1:
            return f_pos(z)
        # z <= 0: pairing with argument -z+1 >= 1
        return 1.0 / f_pos(-z + 1)

    return f


def table_function(values: Sequence[float], first_z: int = 1) -> Callable[[int], float]:
    """Monotone function from an explicit value list f(first_z), f(first_z+1), ...

    Beyond the last tabulated point the function continues linearly with
    the final increment, which preserves monotonicity and convexity of a
    convex table.
    """
    vals = [float(v) for v in values]
    if len(vals) < 2:
        raise InvalidParams("f_table needs at least two values")
    if any(b < a for a, b in zip(vals, vals[1:])):
        raise InvalidParams("f_table must be nondecreasing")
    last_slope = vals[-1] - vals[-2]
    n = len(vals)

    def f(z: int) -> float:
        k = z - first_z
        if k < 0:
            raise InvalidParams(f"f_table argument {z} below first_z={first_z}")
        if k < n:
            return vals[k]
        return vals[-1] + (k - (n - 1)) * last_slope

    return f


def bl_exponential_f(beta: float) -> Callable[[int], float]:
    """f(z) = exp(beta (z - 1/2)); satisfies the pairing identity exactly."""
    return lambda z: math.exp(beta * (z - 0.5))


def builtin(family: str, **params) -> ModelSpec:
    """Construct one of the built-in model families.

    SE          totally asymmetric simple exclusion, no parameters.
    PAExclusion particle-antiparticle exclusion; params c, a with 0 < c <= a/2.
    ZR          totally asymmetric zero range; param f (nondecreasing, f(0)=0)
                or f_table (values f(1), f(2), ...).
    BL          bricklayers; param beta (exponential f) or f / f_table for
                z >= 1, extended to z <= 0 by the pairing f(z) f(-z+1) = 1.
    """
    if family == "SE":
        support = SupportInterval(0, 1)
        return ModelSpec(support, lambda z, y: float(z * (1 - y)), "SE", {})

    if family == "PAExclusion":
        c = params.get("c")
        a = params.get("a")
        if c is None or a is None:
            raise InvalidParams("PAExclusion needs params c and a")
        c, a = float(c), float(a)
        if not (0.0 < c <= a / 2.0):
            raise InvalidParams(f"PAExclusion needs 0 < c <= a/2, got c={c}, a={a}")

        def pa_rate(z: int, y: int) -> float:
            if z == 0 and y == 0:
                return c
            if z == 0 and y == -1:
                return a / 2.0
            if z == 1 and y == 0:
                return a / 2.0
            if z == 1 and y == -1:
                return a
            return 0.0

        return ModelSpec(SupportInterval(-1, 1), pa_rate, "PAExclusion", {"c": c, "a": a})

    if family == "ZR":
        f = params.get("f")
        if f is None and "f_table" in params:
            f = table_function(params["f_table"], first_z=1)
        if f is None:
            raise InvalidParams("ZR needs param f or f_table")
        if "f_table" in params:
            fz = f

            def f_full(z: int) -> float:
                return 0.0 if z <= 0 else fz(z)

        else:
            f_user = f

            def f_full(z: int) -> float:
                return 0.0 if z < 0 else float(f_user(z))

        _probe_zr(f_full)
        spec_params = {"f": f_full}
        if "f_table" in params:
            spec_params["f_table"] = list(params["f_table"])
        return ModelSpec(
            SupportInterval(0, POS_INF), lambda z, y: f_full(z), "ZR", spec_params
        )

    if family == "BL":
        if "beta" in params:
            beta = float(params["beta"])
            if beta <= 0:
                raise InvalidParams("BL exponential f needs beta > 0")
            f_full = bl_exponential_f(beta)
            spec_params = {"f": f_full, "beta": beta}
        else:
            f = params.get("f")
            if f is None and "f_table" in params:
                f = table_function(params["f_table"], first_z=1)
            if f is None:
                raise InvalidParams("BL needs param beta, f or f_table")
            f_full = _bl_extend(f)
            spec_params = {"f": f_full}
            if "f_table" in params:
                spec_params["f_table"] = list(params["f_table"])
        _probe_bl(f_full)
        return ModelSpec(
            SupportInterval(NEG_INF, POS_INF),
            lambda z, y: f_full(z) + f_full(-y),
            "BL",
            spec_params,
        )

    raise InvalidParams(f"unknown family {family!r}; use one of {FAMILIES}")


def _probe_zr(f: Callable[[int], float], zmax: int = 64) -> None:
    if f(0) != 0.0:
        raise InvalidParams("ZR rate function needs f(0) = 0")
    prev = 0.0
    for z in range(1, zmax + 1):
        v = f(z)
        if v <= 0.0:
            raise InvalidParams(f"ZR rate function needs f(z) > 0 for z >= 1, f({z})={v}")
        if v < prev - 1e-12:
            raise InvalidParams(f"ZR rate function must be nondecreasing, breaks at z={z}")
        prev = v


def _probe_bl(f: Callable[[int], float], zmax: int = 32) -> None:
    report = bl_pairing_check(f, zmax)
    if not report.ok:
        z, err = report.violations[0]
        raise InvalidParams(f"BL pairing f(z) f(-z+1) = 1 fails at z={z} (|err|={err:.2e})")
    prev = f(-zmax)
    for z in range(-zmax + 1, zmax + 1):
        v = f(z)
        if v < prev - 1e-12:
            raise InvalidParams(f"BL rate function must be nondecreasing, breaks at z={z}")
        prev = v


def validate_monotonicity(spec: ModelSpec, half_width: int = 12) -> ValidationReport:
    """Check r(z+1, y) >= r(z, y) and r(y, z+1) <= r(y, z) on the truncation box."""
    box = spec.support.box(half_width)
    report = ValidationReport("monotonicity", 0)
    for z in box[:-1]:
        for y in box:
            report.checked += 2
            up = spec.rate(z + 1, y) - spec.rate(z, y)
            if up < -1e-12:
                report.violations.append(("first-argument", z, y, up))
            down = spec.rate(y, z + 1) - spec.rate(y, z)
            if down > 1e-12:
                report.violations.append(("second-argument", y, z, down))
    return report


def validate_sum_rule(spec: ModelSpec, half_width: int = 12) -> ValidationReport:
    """Check the additive triple identity over the truncation box cubed."""
    box = spec.support.box(half_width)
    r = spec.rate
    report = ValidationReport("sum-rule", 0)
    for x in box:
        for y in box:
            for z in box:
                report.checked += 1
                lhs = r(x, y) + r(y, z) + r(z, x)
                rhs = r(x, z) + r(z, y) + r(y, x)
                if abs(lhs - rhs) > 1e-12 * max(1.0, abs(lhs), abs(rhs)):
                    report.violations.append((x, y, z, lhs - rhs))
    return report


def validate_product_rule(spec: ModelSpec, half_width: int = 12) -> ValidationReport:
    """Check the multiplicative triple identity on the interior of the box."""
    box = spec.support.box(half_width)
    interior = [v for v in box if spec.support.omega_min < v < spec.support.omega_max + 1]
    r = spec.rate
    report = ValidationReport("product-rule", 0)
    for x in interior:
        for y in interior:
            for z in interior:
                report.checked += 1
                lhs = r(x, y - 1) * r(y, z - 1) * r(z, x - 1)
                rhs = r(x, z - 1) * r(z, y - 1) * r(y, x - 1)
                if abs(lhs - rhs) > 1e-10 * max(1.0, abs(lhs), abs(rhs)):
                    report.violations.append((x, y, z, lhs - rhs))
    return report


def bl_pairing_check(f: Callable[[int], float], zmax: int) -> ValidationReport:
    """Check |f(z) f(-z+1) - 1| < 1e-12 for z in [-zmax, zmax+1]."""
    report = ValidationReport("bl-pairing", 0)
    for z in range(-zmax, zmax + 2):
        report.checked += 1
        err = abs(f(z) * f(-z + 1) - 1.0)
        if err > 1e-12:
            report.violations.append((z, err))
    return report


def validate_all(spec: ModelSpec, half_width: int = 12) -> list[ValidationReport]:
    """Run every structural validator that applies to this spec."""
    reports = [
        validate_monotonicity(spec, half_width),
        validate_sum_rule(spec, half_width),
        validate_product_rule(spec, half_width),
    ]
    if spec.family == "BL":
        reports.append(bl_pairing_check(spec.f, half_width))
    return reports
