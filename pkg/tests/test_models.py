"""Rate-function construction and structural validators."""
import math

import pytest

from deposim.errors import InvalidParams
from deposim.models import (
    ModelSpec,
    SupportInterval,
    bl_pairing_check,
    builtin,
    table_function,
    validate_all,
    validate_monotonicity,
    validate_product_rule,
    validate_sum_rule,
)


def test_se_rates():
    se = builtin("SE")
    assert se.rate(1, 0) == 1.0
    assert se.rate(1, 1) == 0.0
    assert se.rate(0, 0) == 0.0
    assert se.rate(0, 1) == 0.0


def test_pa_exclusion_rates():
    pa = builtin("PAExclusion", c=0.3, a=1.0)
    assert pa.rate(1, -1) == 1.0
    assert pa.rate(0, 0) == 0.3
    assert pa.rate(0, -1) == 0.5
    assert pa.rate(1, 0) == 0.5
    # everything else vanishes
    assert pa.rate(-1, 0) == 0.0
    assert pa.rate(0, 1) == 0.0


def test_pa_exclusion_invalid_params():
    with pytest.raises(InvalidParams):
        builtin("PAExclusion", c=0.6, a=1.0)
    with pytest.raises(InvalidParams):
        builtin("PAExclusion", c=-0.1, a=1.0)
    with pytest.raises(InvalidParams):
        builtin("PAExclusion", c=0.3)


def test_bl_exponential_rate_value():
    bl = builtin("BL", beta=0.5)
    # r(0, 0) = f(0) + f(0) = 2 exp(-beta/2)
    assert bl.rate(0, 0) == pytest.approx(2.0 * math.exp(-0.25), rel=1e-14)


def test_boundary_rates_vanish():
    se = builtin("SE")
    pa = builtin("PAExclusion", c=0.3, a=1.0)
    for y in (0, 1):
        assert se.rate(0, y) == 0.0
        assert se.rate(y, 1) == 0.0
    for y in (-1, 0, 1):
        assert pa.rate(-1, y) == 0.0
        assert pa.rate(y, 1) == 0.0


def test_rate_referential_transparency():
    bl = builtin("BL", beta=0.5)
    vals = {(z, y): bl.rate(z, y) for z in range(-6, 7) for y in range(-6, 7)}
    for (z, y), v in vals.items():
        assert bl.rate(z, y) == v  # bit-identical on repeat


@pytest.mark.parametrize(
    "spec",
    [
        builtin("SE"),
        builtin("PAExclusion", c=0.3, a=1.0),
        builtin("ZR", f=lambda z: float(z)),
        builtin("BL", beta=0.5),
    ],
    ids=["SE", "PA", "ZR", "BL"],
)
def test_builtins_pass_all_validators(spec):
    for report in validate_all(spec, half_width=12):
        assert report.ok, str(report)


def test_monotonicity_brute_force_se():
    se = builtin("SE")
    report = validate_monotonicity(se, half_width=12)
    assert report.ok
    # spot-check the four pairs by hand
    for y in (0, 1):
        assert se.rate(1, y) >= se.rate(0, y)
        assert se.rate(y, 1) <= se.rate(y, 0)


def test_monotonicity_fails_for_decreasing_rate():
    bad = ModelSpec(SupportInterval(-float("inf"), float("inf")), lambda z, y: float(-z))
    report = validate_monotonicity(bad, half_width=3)
    assert not report.ok
    assert any(v[0] == "first-argument" for v in report.violations)


def test_sum_rule_se_example():
    se = builtin("SE")
    r = se.rate
    x, y, z = 1, 0, 1
    assert r(x, y) + r(y, z) + r(z, x) == pytest.approx(1.0)
    assert r(x, z) + r(z, y) + r(y, x) == pytest.approx(1.0)
    assert validate_sum_rule(se, half_width=12).ok


def test_sum_rule_pa_brute_force():
    pa = builtin("PAExclusion", c=0.3, a=1.0)
    r = pa.rate
    for x in (-1, 0, 1):
        for y in (-1, 0, 1):
            for z in (-1, 0, 1):
                lhs = r(x, y) + r(y, z) + r(z, x)
                rhs = r(x, z) + r(z, y) + r(y, x)
                assert lhs == pytest.approx(rhs, abs=1e-12)


def test_product_rule_examples():
    zr = builtin("ZR", f=lambda z: float(z))
    assert validate_product_rule(zr, half_width=8).ok

    bl = builtin("BL", beta=0.5)
    r = bl.rate
    x, y, z = 2, 0, -1
    lhs = r(x, y - 1) * r(y, z - 1) * r(z, x - 1)
    rhs = r(x, z - 1) * r(z, y - 1) * r(y, x - 1)
    assert lhs == pytest.approx(rhs, rel=1e-12)
    assert validate_product_rule(bl, half_width=8).ok


def test_product_rule_negative_control():
    bad = ModelSpec(
        SupportInterval(-float("inf"), float("inf")),
        lambda z, y: math.exp(0.1 * z * y * y),
    )
    assert not validate_product_rule(bad, half_width=3).ok


def test_bl_pairing_exponential_exact():
    bl = builtin("BL", beta=0.5)
    assert bl_pairing_check(bl.f, zmax=20).ok


def test_bl_pairing_from_table_by_construction():
    # f given on z >= 1 only; the negative branch comes from the pairing
    bl = builtin("BL", f=lambda z: float(max(z, 1)))
    assert bl_pairing_check(bl.f, zmax=10).ok
    assert bl.f(-2) == pytest.approx(1.0 / 3.0)


def test_bl_pairing_constant_two_fails():
    report = bl_pairing_check(lambda z: 2.0, zmax=5)
    assert not report.ok
    assert all(err == pytest.approx(3.0) for _, err in report.violations)


def test_zr_param_validation():
    with pytest.raises(InvalidParams):
        builtin("ZR", f=lambda z: 1.0)  # f(0) != 0
    with pytest.raises(InvalidParams):
        builtin("ZR", f_table=[2.0, 1.0])  # decreasing
    with pytest.raises(InvalidParams):
        builtin("ZR")


def test_bl_param_validation():
    with pytest.raises(InvalidParams):
        builtin("BL", beta=0.0)
    with pytest.raises(InvalidParams):
        builtin("BL")
    # f(1) < 1 cannot satisfy monotonicity together with the pairing
    with pytest.raises(InvalidParams):
        builtin("BL", f=lambda z: 0.5 * z)


def test_table_function_extension():
    f = table_function([1.0, 2.0, 4.0])
    assert f(1) == 1.0 and f(3) == 4.0
    assert f(5) == pytest.approx(8.0)  # continues with the last increment
    with pytest.raises(InvalidParams):
        table_function([1.0])


def test_support_interval_invariants():
    with pytest.raises(InvalidParams):
        SupportInterval(1, 2)
    with pytest.raises(InvalidParams):
        SupportInterval(0, 0)
    s = SupportInterval(0, 1)
    assert s.contains(0) and s.contains(1) and not s.contains(2)
    assert list(s.box(12)) == [0, 1]
