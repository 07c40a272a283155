import math

import numpy as np
import pytest
import scipy.sparse as sp
import shapely

from qcdistort.services.modulus import (
    BallCover,
    BaseMeasure,
    DiscreteMeasureFamily,
    GridRegion,
    brute_force_modulus,
    delta_exponent,
    discrete_modulus,
    dmod_vanishing_bound,
    extremal_length_grid,
    product_family,
    prolong_density,
    product_modulus_exact,
    property_suite,
)


def _family(rows):
    return DiscreteMeasureFamily.from_dense(rows)


class TestFamilies:
    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            _family([[1.0, -0.5]])

    def test_atom_ids_must_match(self):
        with pytest.raises(ValueError, match="atom ids"):
            DiscreteMeasureFamily.from_dense([[1.0, 1.0]], atom_ids=["a"])

    def test_degenerate_rows(self):
        family = _family([[1.0, 0.0], [0.0, 0.0]])
        assert family.degenerate
        assert family.degenerate_rows.tolist() == [1]

    def test_product_family_shape(self):
        family, base = product_family([1.0, 2.0, 0.5], [1.0, 3.0])
        assert family.tag == "product"
        assert family.n_measures == 2 and family.n_atoms == 6
        assert base.weights.sum() == pytest.approx(3.5 * 4.0)
        assert family.oracle == {"lambda_E": 3.5, "nu_Y": 4.0}


class TestSolver:
    def test_two_disjoint_atoms(self, solver):
        result = solver.solve(_family([[1.0, 0.0], [0.0, 1.0]]), BaseMeasure(np.ones(2)), 2.0)
        assert result.status == "converged"
        assert abs(result.value - 2.0) < 1e-5
        assert np.allclose(result.rho, 1.0, atol=1e-5)
        assert sorted(result.active) == [0, 1]

    def test_shared_measure(self, solver):
        result = solver.solve(_family([[1.0, 1.0]]), BaseMeasure(np.ones(2)), 2.0)
        assert abs(result.value - 0.5) < 1e-6

    def test_dual_bound_certifies(self, solver):
        family = _family([[1.0, 0.5, 0.0], [0.0, 1.0, 2.0], [1.0, 0.0, 1.0]])
        result = solver.solve(family, BaseMeasure([1.0, 2.0, 0.5]), 3.0)
        assert result.converged
        assert result.dual_bound <= result.value * (1 + 1e-9)
        assert result.certified_gap <= 1e-6
        assert result.worst_violation < 1e-8

    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
    def test_product_oracle(self, solver, p):
        family, base = product_family([1.0, 2.0, 0.5], [1.0, 1.0])
        exact = product_modulus_exact(3.5, 2.0, p)
        result = solver.solve(family, base, p)
        assert abs(result.value - exact) / exact < 1e-5

    def test_degenerate_family_is_infinite(self, solver):
        result = solver.solve(_family([[1.0, 0.0], [0.0, 0.0]]), BaseMeasure(np.ones(2)), 2.0)
        assert math.isinf(result.value)
        assert result.status == "infinite"
        assert result.converged
        assert result.degenerate_row == 1

    def test_free_atom(self, solver):
        result = solver.solve(_family([[1.0, 1.0]]), BaseMeasure([0.0, 1.0]), 2.0)
        assert result.value == 0.0
        assert result.status == "trivial"

    def test_empty_family(self, solver):
        family = DiscreteMeasureFamily(sp.csr_matrix((0, 3)))
        assert solver.solve(family, BaseMeasure(np.ones(3)), 2.0).value == 0.0

    def test_p_one_rejected(self, solver):
        with pytest.raises(ValueError, match="p must exceed 1"):
            solver.solve(_family([[1.0]]), BaseMeasure([1.0]), 1.0)

    def test_base_size_mismatch(self, solver):
        with pytest.raises(ValueError, match="atoms"):
            solver.solve(_family([[1.0, 1.0]]), BaseMeasure([1.0]), 2.0)

    def test_history_recorded(self, solver):
        result = solver.solve(_family([[1.0, 1.0], [1.0, 0.0]]), BaseMeasure(np.ones(2)), 2.0)
        assert result.history
        assert result.history[-1].dual <= result.history[-1].primal * (1 + 1e-12)


class TestProperties:
    def test_brute_force_agrees(self, solver):
        family = _family([[1.0, 1.0]])
        base = BaseMeasure(np.ones(2))
        assert abs(brute_force_modulus(family, base, 2.0) - 0.5) < 1e-2

    def test_brute_force_size_limit(self):
        with pytest.raises(ValueError, match="at most 4 atoms"):
            brute_force_modulus(_family([[1.0] * 5]), BaseMeasure(np.ones(5)), 2.0)

    def test_property_suite(self, solver):
        report = property_suite(solver, trials=5, oracle_trials=2, seed=7)
        assert report.passed
        assert report.trials == 5
        assert report.max_oracle_error < 1e-2


class TestDiscreteModulus:
    def test_overlapping_cover_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            BallCover(np.array([[0.0], [0.1]]), np.array([0.1, 0.1]), shrink=1.0)

    def test_incidence(self):
        cover = BallCover.dyadic_intervals(2)
        matrix = cover.incidence([np.array([0.1, 0.2]), np.array([0.9])])
        assert matrix.toarray().tolist() == [[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]

    def test_segment_spreads_weight(self, solver):
        segment = np.linspace(0.0, 1.0, 1025)
        result = discrete_modulus([segment], BallCover.dyadic_intervals(3), 2.0, solver)
        assert abs(result.value - 0.125) < 1e-5

    def test_delta_exponent_slopes(self, solver):
        segment = np.linspace(0.0, 1.0, 1025)
        covers = [BallCover.dyadic_intervals(level) for level in (2, 3, 4)]
        report = delta_exponent([segment], covers, [1.5, 2.0], solver)
        assert report.slopes[0] == pytest.approx(-0.5, abs=1e-3)
        assert report.slopes[1] == pytest.approx(-1.0, abs=1e-3)
        assert report.estimate == 1.5
        assert not report.monotonicity_flags

    def test_delta_exponent_needs_three_levels(self, solver):
        with pytest.raises(ValueError, match="at least 3"):
            delta_exponent([np.array([0.5])], [BallCover.dyadic_intervals(1)], [2.0], solver)

    def test_vanishing_bound(self):
        assert dmod_vanishing_bound(2.0, 0.5) == 4.0
        with pytest.raises(ValueError, match="positive"):
            dmod_vanishing_bound(2.0, 0.0)


class TestExtremalLength:
    def test_unit_square(self, solver):
        square = shapely.box(0.0, 0.0, 1.0, 1.0)
        ends = (shapely.LineString([(0, 0), (0, 1)]), shapely.LineString([(1, 0), (1, 1)]))
        result = extremal_length_grid(square, 8, ends, solver)
        assert result.status == "converged"
        assert abs(result.value - 1.0) < 1e-3

    def test_long_rectangle(self, solver):
        rect = shapely.box(0.0, 0.0, 3.0, 1.0)
        ends = (shapely.LineString([(0, 0), (0, 1)]), shapely.LineString([(3, 0), (3, 1)]))
        result = extremal_length_grid(rect, 4, ends, solver)
        assert abs(result.value - 3.0) < 3e-3

    def test_entry_pixels_each_contribute_a_path(self, solver):
        square = shapely.box(0.0, 0.0, 1.0, 1.0)
        ends = (shapely.LineString([(0, 0), (0, 1)]), shapely.LineString([(1, 0), (1, 1)]))
        result = extremal_length_grid(square, 8, ends, solver)
        assert result.trace[1][1] == 8
        assert result.paths == 8
        assert result.rounds <= 4

    def test_coarse_seed_matches(self, solver):
        rect = shapely.box(0.0, 0.0, 3.0, 1.0)
        ends = (shapely.LineString([(0, 0), (0, 1)]), shapely.LineString([(3, 0), (3, 1)]))
        result = extremal_length_grid(rect, 8, ends, solver, coarse_from=2)
        assert abs(result.value - 3.0) < 3e-3
        lower, upper = result.bounds
        assert lower <= result.value <= upper
        assert result.grid.resolution == 8

    def test_prolong_density(self):
        coarse = GridRegion.from_polygon(shapely.box(0.0, 0.0, 2.0, 1.0), 1)
        fine = GridRegion.from_polygon(shapely.box(0.0, 0.0, 2.0, 1.0), 2)
        rho = np.where(coarse.pixels[:, 0] == 0, 1.0, 3.0)
        out = prolong_density(coarse, rho, fine)
        assert out.tolist() == np.where(fine.pixels[:, 0] < 2, 1.0, 3.0).tolist()

    def test_prolong_needs_integer_factor(self):
        coarse = GridRegion.from_polygon(shapely.box(0.0, 0.0, 1.0, 1.0), 2)
        fine = GridRegion.from_polygon(shapely.box(0.0, 0.0, 1.0, 1.0), 3)
        with pytest.raises(ValueError, match="does not refine"):
            prolong_density(coarse, np.ones(4), fine)

    def test_disconnected_ends(self, solver):
        region = shapely.union_all([shapely.box(0.0, 0.0, 0.375, 1.0), shapely.box(0.625, 0.0, 1.0, 1.0)])
        ends = (shapely.LineString([(0, 0), (0, 1)]), shapely.LineString([(1, 0), (1, 1)]))
        result = extremal_length_grid(region, 8, ends, solver)
        assert math.isinf(result.value)
        assert result.status == "disconnected"

    def test_grid_region_fractions(self):
        region = GridRegion.from_polygon(shapely.box(0.0, 0.0, 0.75, 0.5), 2)
        assert len(region.pixels) == 2
        assert sorted(region.fractions.tolist()) == [0.5, 1.0]
        assert region.areas.sum() == pytest.approx(0.375)
