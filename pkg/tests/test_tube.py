import math
import time

import numpy as np
import pytest

from qcdistort.exceptions import NonConvergenceError
from qcdistort.services.cantor import build_cantor
from qcdistort.services.tube import (
    ThinnedTube,
    TubeService,
    assemble_generation,
    build_base_map,
    build_snake_tube,
    compose_generations,
    diameter_ledger,
    exponent_limits,
    extremal_bracket,
    fiber_images,
    measure_c1,
    round_corners,
    separation_ledger,
    slice_breaks,
    thin_to_modulus,
    tube_ends,
    tube_map,
    tube_params,
    tube_polygon,
)


@pytest.fixture
def eighth_tube():
    return build_snake_tube(tube_params("1/8", 2))


@pytest.fixture
def quarter_tube():
    return build_snake_tube(tube_params("1/4", 1))


@pytest.fixture
def tube_service(test_settings):
    return TubeService(test_settings)


@pytest.fixture
def eighth_thinned(eighth_tube):
    return ThinnedTube(eighth_tube, 0.75, 0.25, 64.0, 64.0)


@pytest.fixture
def eighth_cantor():
    return build_cantor("1/8", 2)


@pytest.fixture
def eighth_base(eighth_thinned, eighth_cantor):
    return build_base_map(eighth_thinned, eighth_cantor)


@pytest.fixture
def eighth_composed(eighth_base, eighth_cantor):
    return compose_generations([assemble_generation(eighth_base, eighth_cantor, g) for g in (1, 2)])


class TestParams:
    def test_eighth_k2(self):
        params = tube_params("1/8", 2)
        assert (params.N, params.m, params.M) == (64, 5, 51)
        assert params.cols == 21 and params.rows == 5
        assert params.n_tubes == 4
        assert not params.small_n
        assert params.bracket_holds

    def test_small_parameters_flagged(self):
        params = tube_params("1/4", 1)
        assert (params.N, params.m, params.M) == (4, 1, 2)
        assert params.cols == 3
        assert params.small_n

    def test_non_integer_power_rejected(self):
        with pytest.raises(ValueError, match="integer"):
            tube_params("2/5", 1)

    def test_size_limit(self):
        with pytest.raises(ValueError, match="Supported sizes"):
            tube_params("1/8", 5)


class TestSnakeLayout:
    def test_cells_and_corners(self, eighth_tube):
        assert eighth_tube.n_cells == 51
        assert eighth_tube.corner_count == 20
        assert eighth_tube.deviations == []
        assert not eighth_tube.asymmetric
        assert eighth_tube.cells[0] == (0, 0)
        assert eighth_tube.cells[-1] == (20, 0)

    def test_sweeps_leave_top_row_free(self, eighth_tube):
        rows = {r for _, r in eighth_tube.cells}
        assert rows == {0, 1, 2, 3}
        p = eighth_tube.params
        assert eighth_tube.n_cells == 1 + 2 ** (p.k - 1) * p.m**2

    def test_cells_are_edge_adjacent(self, eighth_tube):
        for (c0, r0), (c1, r1) in zip(eighth_tube.cells, eighth_tube.cells[1:]):
            assert abs(c1 - c0) + abs(r1 - r0) == 1

    def test_single_row_records_deviation(self, quarter_tube):
        assert quarter_tube.cells == [(0, 0), (1, 0), (2, 0)]
        assert quarter_tube.corner_count == 0
        assert any("M = 2" in note for note in quarter_tube.deviations)


class TestPolygons:
    def test_full_width_area(self, eighth_tube):
        assert tube_polygon(eighth_tube).area == pytest.approx(51.0)

    def test_chamfer_removes_corner_triangles(self, eighth_tube):
        assert round_corners(eighth_tube, 0.25).area == pytest.approx(51.0 - 20 * 0.03125)

    def test_thin_tube_area(self, quarter_tube):
        assert tube_polygon(quarter_tube, 0.5).area == pytest.approx(1.5)

    def test_width_bounds(self, eighth_tube):
        with pytest.raises(ValueError, match="Tube width"):
            tube_polygon(eighth_tube, 0.0)

    def test_chamfer_bounds(self, eighth_tube):
        with pytest.raises(ValueError, match="Chamfer"):
            round_corners(eighth_tube, 0.5)

    def test_ends_on_grid_sides(self, eighth_tube):
        entry, exit_ = tube_ends(eighth_tube, 0.5)
        assert entry.bounds == (0.0, 0.25, 0.0, 0.75)
        assert exit_.bounds == (21.0, 0.25, 21.0, 0.75)


class TestBracket:
    def test_upper_bound_only_for_small_m(self, eighth_tube):
        bracket = extremal_bracket(eighth_tube, 40.0)
        assert bracket.lower is None
        assert bracket.upper == 51.0
        assert bracket.holds

    def test_length_above_cell_count(self, eighth_tube):
        assert not extremal_bracket(eighth_tube, 60.0).holds


class TestThinning:
    def test_inverse_width_law(self, quarter_tube):
        thinned = thin_to_modulus(quarter_tube, 4.0, lambda w: 3.0 / w)
        assert thinned.width == pytest.approx(0.75)
        assert thinned.modulus == pytest.approx(4.0)
        assert [s.width for s in thinned.trace] == pytest.approx([1.0, 0.75])

    def test_bisects_nonlinear_length(self, quarter_tube):
        thinned = thin_to_modulus(quarter_tube, 10.0, lambda w: 2.0 / w**1.5, tol=1e-3)
        assert abs(thinned.modulus - 10.0) <= 1e-2
        assert len(thinned.trace) > 2

    def test_already_too_long(self, quarter_tube):
        with pytest.raises(NonConvergenceError, match="already exceeds") as exc:
            thin_to_modulus(quarter_tube, 4.0, lambda w: 5.0 / w)
        assert exc.value.trace == [(1.0, 5.0)]

    def test_length_growing_with_width(self, quarter_tube):
        with pytest.raises(NonConvergenceError, match="grows with width"):
            thin_to_modulus(quarter_tube, 4.0, lambda w: 3.0 * w)

    def test_disconnected_ends(self, quarter_tube):
        with pytest.raises(NonConvergenceError, match="disconnected"):
            thin_to_modulus(quarter_tube, 4.0, lambda w: math.inf)

    def test_target_must_be_positive(self, quarter_tube):
        with pytest.raises(ValueError, match="positive"):
            thin_to_modulus(quarter_tube, 0.0, lambda w: 1.0)

    def test_slice_breaks(self, eighth_tube):
        thinned = ThinnedTube(eighth_tube, 0.5, 0.25, 82.0, 64.0)
        breaks = slice_breaks(thinned)
        assert len(breaks) == 52
        assert breaks[0] == 0.0 and breaks[-1] == pytest.approx(1.0)
        assert np.all(np.diff(breaks) > 0)
        assert breaks[1] == pytest.approx(2.0 / 82.0)

    def test_corner_share_floor(self, eighth_tube):
        thinned = ThinnedTube(eighth_tube, 0.5, 0.25, 64.0, 64.0)
        gaps = np.diff(slice_breaks(thinned, corner_floor=0.25))
        corners = np.asarray(eighth_tube.corners)
        assert gaps[corners].min() == pytest.approx(0.5 / 72.0)


class TestExtremalLength:
    def test_straight_tube(self, tube_service, quarter_tube):
        result = tube_service.extremal_length(quarter_tube, 1.0, resolution=4)
        assert abs(result.value - 3.0) < 1e-2

    def test_thin_hits_target(self, tube_service, quarter_tube):
        thinned = tube_service.thin(quarter_tube, 4.0, resolution=8)
        assert thinned.width == pytest.approx(0.75, rel=0.015)
        assert abs(thinned.modulus - 4.0) <= 0.04

    @pytest.mark.slow
    def test_eighth_construction_within_five_minutes(self, tube_service):
        start = time.perf_counter()
        built = tube_service.construct("1/8", 2, 1)
        assert time.perf_counter() - start < 300.0
        assert built.bracket.holds
        assert abs(built.thinned.modulus - 64.0) <= 0.64
        assert built.base.separation > 0


class TestExponents:
    def test_unit_constant_reaches_limits(self):
        report = exponent_limits("1/8", 2, 1.0)
        assert report.s == pytest.approx(1.5)
        assert report.S == pytest.approx(0.5)
        assert report.s == pytest.approx(report.s_limit)
        assert report.S == pytest.approx(report.S_limit)
        assert report.t == pytest.approx(1.0 / 3.0)

    def test_smaller_constant_moves_away(self):
        report = exponent_limits("1/8", 2, 0.5)
        assert report.s < report.s_limit
        assert report.S < report.S_limit

    def test_constant_must_be_positive(self):
        with pytest.raises(ValueError, match="positive"):
            exponent_limits("1/8", 2, 0.0)

    def test_constant_too_large(self):
        with pytest.raises(ValueError, match="too large"):
            exponent_limits("1/8", 2, 32.0)


class TestMaps:
    def test_tube_map_lands_in_tube_band(self, eighth_thinned):
        tmap = tube_map(eighth_thinned)
        assert tmap.n_pieces > 0
        pts = np.array([[0.5, 1.0 / 128], [0.1, 0.001], [0.9, 0.015]])
        images = tmap.apply(pts)
        assert np.all((images[:, 0] >= 0.0) & (images[:, 0] <= 1.0))
        assert np.all((images[:, 1] >= 0.0) & (images[:, 1] <= 5.0 / 21.0 + 1e-12))

    def test_tube_map_modulus_mismatch(self, eighth_thinned):
        tube_map(eighth_thinned, rect_modulus=64.5)
        with pytest.raises(ValueError, match="does not match"):
            tube_map(eighth_thinned, rect_modulus=70.0)

    def test_base_map_ledger(self, eighth_base):
        assert len(eighth_base.bottoms) == 4
        assert eighth_base.height == pytest.approx(1.0 / 64)
        assert eighth_base.separation > 0
        assert eighth_base.predicted_ratio == pytest.approx(4.0)
        assert eighth_base.width_ratio == pytest.approx(0.75 * 64 / 21)
        ledger = eighth_base.dilatation_ledger()
        assert set(ledger) == {"tube", "corner", "complement"}
        assert all(1.0 <= k < math.inf for k in ledger.values())
        doc = eighth_base.to_document()
        assert doc["pieces"] == eighth_base.tmap.n_pieces
        assert len(doc["bottoms"]) == 4

    def test_base_map_fixes_top_and_bottom(self, eighth_base):
        t = np.linspace(0.0, 1.0, 100)
        for y in (0.0, 1.0):
            edge = np.column_stack([t, np.full_like(t, y)])
            assert np.allclose(eighth_base.tmap.apply(edge), edge, atol=1e-9)

    def test_rectangles_go_to_their_tubes(self, eighth_base):
        centers = np.column_stack([np.full(4, 0.5), eighth_base.bottoms + 0.5 * eighth_base.height])
        images = eighth_base.tmap.apply(centers)
        for j, (_, y) in enumerate(images):
            assert (1 + 5 * j) / 21 <= y <= (6 + 5 * j) / 21

    def test_base_map_needs_depth_k(self, eighth_thinned):
        with pytest.raises(ValueError, match="need at least k=2"):
            build_base_map(eighth_thinned, build_cantor("1/8", 1))


class TestGenerations:
    def test_rectangle_counts(self, eighth_base, eighth_cantor):
        first = assemble_generation(eighth_base, eighth_cantor, 1)
        second = assemble_generation(eighth_base, eighth_cantor, 2)
        assert first.n_rectangles == 1 and first.stage.side == 1.0
        assert second.n_rectangles == 4
        assert second.stage.side == pytest.approx(1.0 / 64)

    def test_generation_index(self, eighth_base, eighth_cantor):
        with pytest.raises(ValueError, match="at least 1"):
            assemble_generation(eighth_base, eighth_cantor, 0)
        with pytest.raises(ValueError, match="generation 3 needs 4"):
            assemble_generation(eighth_base, eighth_cantor, 3)

    def test_later_stages_act_inside_rectangles(self, eighth_base, eighth_composed):
        assert eighth_composed.depth == 2
        # y = 1/2 lies between the generation-2 intervals
        pts = np.array([[0.3, 0.5], [0.7, 0.5], [0.5, 0.1]])
        assert np.allclose(eighth_composed.apply(pts), eighth_base.tmap.apply(pts))


class TestLedgers:
    def test_diameter_ledger(self, eighth_composed, eighth_cantor):
        params = tube_params("1/8", 2)
        ledger = diameter_ledger(eighth_composed, eighth_cantor, params, 1, samples=4, max_squares=16)
        assert ledger.total_squares == 64
        assert len(ledger.indices) == 16
        assert np.allclose(ledger.masses, 1.0 / 64)
        assert np.all((ledger.diameters > 0) & (ledger.diameters < 1))
        c1 = measure_c1([ledger], params)
        assert c1 == pytest.approx(ledger.diameters.min() * 8.0 * 2.0)

    def test_diameter_ledger_off_the_set(self, eighth_composed, eighth_cantor):
        with pytest.raises(ValueError, match="not inside"):
            diameter_ledger(eighth_composed, eighth_cantor, tube_params("1/8", 2), 1, y=0.5)

    def test_ledger_depth(self, eighth_composed, eighth_cantor):
        with pytest.raises(ValueError, match="generation 2 needs 4"):
            diameter_ledger(eighth_composed, eighth_cantor, tube_params("1/8", 2), 2)

    def test_c1_needs_ledgers(self):
        with pytest.raises(ValueError, match="No diameter ledgers"):
            measure_c1([], tube_params("1/8", 2))

    def test_separation_ledger(self, eighth_composed, eighth_cantor):
        ledger = separation_ledger(eighth_composed, eighth_cantor, tube_params("1/8", 2), 1, samples=1024)
        assert len(ledger.distances) == 3
        assert ledger.min_distance == min(ledger.distances) > 0
        assert ledger.c2 == pytest.approx(ledger.min_distance * 64)

    def test_fiber_images(self, eighth_composed, eighth_cantor):
        fibers = fiber_images(eighth_composed, eighth_cantor, tube_params("1/8", 2), 1, samples=256, count=2)
        assert len(fibers.horizontal) == 2
        for _, points in fibers.horizontal:
            assert points.shape == (256, 2)
            assert points[0, 0] == pytest.approx(0.0, abs=1e-9)
            assert points[-1, 0] == pytest.approx(1.0, abs=1e-9)
        assert [x for x, _ in fibers.vertical] == [0.25, 0.5, 0.75]
        assert all(points.shape == (4, 2) for _, points in fibers.vertical)
