from fractions import Fraction

import numpy as np
import pytest

from qcdistort.services.cantor import (
    RationalPower,
    ahlfors_scan,
    build_cantor,
    build_nested_family,
    cantor_dimension,
    dyadic_scales,
    get_gauge,
    h_measure_check,
    integer_power,
    integer_power_check,
    parse_rational,
    select_branching,
)


class TestRationals:
    def test_parse(self):
        assert parse_rational("1/4") == Fraction(1, 4)
        assert parse_rational(" 3 / 8 ") == Fraction(3, 8)
        assert parse_rational("2") == Fraction(2)

    def test_decimal_rejected(self):
        with pytest.raises(ValueError, match="p/q"):
            parse_rational("0.25")

    def test_zero_denominator(self):
        with pytest.raises(ValueError, match="Zero denominator"):
            parse_rational("1/0")


class TestCantorApprox:
    def test_first_generation(self):
        cantor = build_cantor("1/4", 1)
        first, second = cantor.generations[1]
        assert first.left == Fraction(1, 6) and first.length == Fraction(1, 4)
        assert second.left == Fraction(7, 12) and second.right == Fraction(5, 6)

    def test_generation_sizes(self, cantor_quarter):
        assert cantor_quarter.exact
        assert cantor_quarter.depth == 6
        for n, gen in enumerate(cantor_quarter.generations):
            assert len(gen) == 2**n
            assert all(iv.length == Fraction(1, 4**n) for iv in gen)

    def test_children_nest_inside_parents(self, cantor_quarter):
        for parents, children in zip(cantor_quarter.generations, cantor_quarter.generations[1:]):
            for i, child in enumerate(children):
                assert parents[i // 2].contains(child)

    def test_depth_zero(self):
        cantor = build_cantor("1/4", 0)
        assert cantor.intervals(0).tolist() == [[0.0, 1.0]]

    def test_natural_measure_sums_to_one(self, cantor_quarter):
        measure = cantor_quarter.natural_measure()
        for g in range(cantor_quarter.depth + 1):
            assert measure.total(g) == 1

    def test_float_mode_matches_exact(self):
        exact = build_cantor("1/8", 4)
        approx = build_cantor("1/8", 4, exact=False)
        assert not approx.exact
        assert np.allclose(exact.intervals(4), approx.intervals(4), rtol=0, atol=1e-15)

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError, match="alpha must lie"):
            build_cantor("3/5", 3)

    def test_exact_mode_needs_rational(self):
        with pytest.raises(ValueError, match="rational"):
            build_cantor(0.25, 2, exact=True)

    def test_dimension(self):
        assert cantor_dimension("1/4") == pytest.approx(0.5)
        assert cantor_dimension("1/8") == pytest.approx(1.0 / 3.0)


class TestIntegerPowers:
    def test_rational_alpha(self):
        assert integer_power("1/4", 1) == 4
        assert integer_power("1/8", 2) == 64
        assert integer_power("2/5", 1) is None

    def test_root_alpha(self):
        alpha = RationalPower(Fraction(1, 8), 2)
        assert integer_power(alpha, 1) is None
        assert integer_power(alpha, 2) == 8
        assert integer_power_check(alpha) == 2

    def test_no_power_found(self):
        assert integer_power_check("2/5", kmax=6) is None

    def test_float_alpha(self):
        assert integer_power(0.125, 1) == 8


class TestNestedFamilies:
    def test_layout(self):
        family = build_nested_family([8, 16])
        assert family.child_counts == (2, 4)
        assert family.bottoms(1).tolist() == [0.25, 0.5]
        assert len(family.generations[2]) == 8
        assert family.length(2) == Fraction(1, 128)

    def test_small_branching_rejected(self):
        with pytest.raises(ValueError, match="at least 4"):
            build_nested_family([8, 3])

    def test_leaf_cap_stops_materializing(self):
        family = build_nested_family([8, 8, 8], leaf_cap=3)
        assert family.depth == 3
        assert family.materialized_depth == 1
        with pytest.raises(ValueError, match="not materialized"):
            family.bottoms(2)


class TestGauges:
    def test_unknown_gauge(self):
        with pytest.raises(ValueError, match="Unknown gauge"):
            get_gauge("cube")

    def test_linear_gauge_never_passes(self):
        report = h_measure_check(build_nested_family([8, 64]), get_gauge("linear"))
        assert not report.passed
        assert report.per_generation == [False, False]

    def test_sqrt_gauge_needs_large_branching(self):
        small = h_measure_check(build_nested_family([16]), get_gauge("sqrt"))
        large = h_measure_check(build_nested_family([256]), get_gauge("sqrt"))
        assert not small.passed
        assert large.passed

    def test_select_branching(self):
        selection = select_branching(get_gauge("sqrt"), 2, budget=0.2)
        assert selection.passed
        assert selection.budget_sum <= 0.2
        assert all(n >= 4 for n in selection.branching)
        assert selection.report.passed


class TestAhlforsScan:
    def test_uniform_points(self):
        pts = (np.arange(1000) + 0.5) / 1000
        scan = ahlfors_scan(pts, np.full(1000, 1e-3), 1.0, dyadic_scales(1, 6))
        assert 1.0 <= scan.constant < 3.0
        assert len(scan.rows) == 1000 * 6

    def test_cantor_leaves(self):
        cantor = build_cantor("1/4", 8)
        scan = ahlfors_scan(cantor.leaf_centers(), cantor.natural_measure().weights(8), 0.5, dyadic_scales(1, 12))
        assert np.isfinite(scan.constant)
        assert scan.worst_side in ("upper", "lower")

    def test_scale_above_diameter(self):
        with pytest.raises(ValueError, match="Scales must lie"):
            ahlfors_scan([0.0, 0.5], [1.0, 1.0], 1.0, [2.0])
