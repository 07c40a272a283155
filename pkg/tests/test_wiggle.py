from types import SimpleNamespace

import numpy as np
import pytest

from qcdistort.services.cantor import build_nested_family
from qcdistort.services.wiggle import (
    BendMap,
    OscillationReport,
    ScaleRow,
    WiggleService,
    bend_map,
    build_stage,
    compose_stages,
    composed_ratio_bound,
    default_branching,
    inscribe_polyline,
    offset_tube,
    oscillation_report,
    smootherstep,
    smootherstep_slope,
    wiggle_base_map,
)


@pytest.fixture
def wiggle_service(test_settings):
    return WiggleService(test_settings)


@pytest.fixture
def flat_bend():
    return bend_map(amplitude=0.0)


def _sine_curve(pts):
    out = np.array(pts, dtype=float)
    out[:, 1] += 0.25 * np.sin(2.0 * np.pi * out[:, 0])
    return out


class TestSmoothing:
    def test_endpoints(self):
        assert smootherstep(np.array([-1.0, 0.0, 0.5, 1.0, 2.0])).tolist() == [0.0, 0.0, 0.5, 1.0, 1.0]

    def test_slope(self):
        assert smootherstep_slope(np.array([0.0, 0.5, 1.0])).tolist() == [0.0, 1.875, 0.0]


class TestBendMap:
    def test_default_bend_lifts_the_middle(self):
        bend = bend_map()
        assert np.allclose(bend([[0.5, 0.5]]), [[0.5, 0.625]])
        assert np.allclose(bend([[0.05, 0.5], [0.5, 0.0]]), [[0.05, 0.5], [0.5, 0.0]])

    def test_default_bend_is_orientation_preserving(self):
        bend = bend_map()
        ticks = np.linspace(0.0, 1.0, 65)
        xx, yy = np.meshgrid(ticks, ticks)
        assert bend.jacobian_determinant(np.column_stack([xx.ravel(), yy.ravel()])).min() > 0

    def test_large_amplitude_folds(self):
        with pytest.raises(ValueError, match="folds"):
            bend_map(amplitude=0.2)

    def test_negative_amplitude(self):
        with pytest.raises(ValueError, match="nonnegative"):
            bend_map(amplitude=-0.1)

    def test_support_order(self):
        with pytest.raises(ValueError, match="b support"):
            bend_map(b_support=(0.5, 0.4))

    def test_flat(self, flat_bend):
        assert flat_bend.is_flat
        assert not BendMap().is_flat


class TestPolyTubes:
    def test_inscribed_vertices(self):
        gamma = inscribe_polyline(bend_map().horizontal(0.5), 8)
        assert gamma.shape == (9, 2)
        assert np.allclose(gamma[:, 0], np.arange(9) / 8)
        assert gamma[4, 1] == pytest.approx(0.625)
        assert gamma[0, 1] == pytest.approx(0.5)

    def test_inscribe_needs_two_segments(self):
        with pytest.raises(ValueError, match="at least 2"):
            inscribe_polyline(bend_map().horizontal(0.5), 1)

    def test_straight_offset(self):
        tube = offset_tube([[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]])
        assert np.allclose(tube.offset, [[0.0, 0.5], [0.5, 0.5], [1.0, 0.5]])
        assert tube.n == 2
        assert tube.angle_deviation == pytest.approx(0.0, abs=1e-12)

    def test_right_angle_rejected(self):
        with pytest.raises(ValueError, match="90 degrees"):
            offset_tube([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])

    def test_zero_length_segment(self):
        with pytest.raises(ValueError, match="zero-length"):
            offset_tube([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])


class TestBaseMaps:
    def test_branching_lower_bound(self, flat_bend):
        with pytest.raises(ValueError, match="at least 4"):
            wiggle_base_map(flat_bend, 3)

    def test_flat_bend_gives_identity(self, flat_bend):
        base = wiggle_base_map(flat_bend, 8)
        assert len(base.tubes) == 2
        assert base.bottoms.tolist() == [0.25, 0.5]
        pts = np.random.default_rng(2).random((100, 2))
        assert np.allclose(base.tmap.apply(pts), pts)
        assert base.tube_k == pytest.approx(1.0)
        assert base.extension_k == pytest.approx(1.0)

    def test_boundary_fixed_under_bend(self):
        base = wiggle_base_map(bend_map(), 10)
        t = np.linspace(0.0, 1.0, 21)
        edges = np.concatenate([
            np.column_stack([t, np.zeros_like(t)]),
            np.column_stack([t, np.ones_like(t)]),
            np.column_stack([np.zeros_like(t), t]),
            np.column_stack([np.ones_like(t), t]),
        ])
        assert np.allclose(base.tmap.apply(edges), edges)
        assert base.tube_k > 1.0

    def test_bent_tube_constant_is_shared(self):
        bases = {n: wiggle_base_map(bend_map(), n) for n in (10, 20, 40)}
        c = (bases[10].tube_k - 1.0) * 10
        for n, base in bases.items():
            assert base.tube_k <= 1.0 + 2.0 * c / n
        assert bases[40].tube_k < bases[20].tube_k < bases[10].tube_k

    def test_bent_extension_stays_bounded(self):
        ext = [wiggle_base_map(bend_map(), n).extension_k for n in (10, 20, 40)]
        # gap cells are sheared by the bend slope 0.625, (1 + s) / (1 - s) = 4.33
        assert max(ext) < 5.0
        assert max(ext) / min(ext) < 1.25


class TestStages:
    def test_stage_checks_branching(self, flat_bend):
        family = build_nested_family([8, 8])
        with pytest.raises(ValueError, match="not 12"):
            build_stage(family, 1, 12, flat_bend)
        with pytest.raises(ValueError, match="Level must lie"):
            build_stage(family, 3, 8, flat_bend)

    def test_flat_composition(self, flat_bend):
        family = build_nested_family([8, 8])
        stages = [build_stage(family, level, 8, flat_bend) for level in (1, 2)]
        composition = compose_stages(stages)
        assert composition.budget_sum == pytest.approx(0.25)
        assert composition.composed_max_k == pytest.approx(1.0)
        assert composition.budget_pass
        assert composition.to_document()["stages"][1]["rectangles"] == 2
        assert composition.composed_ratio == pytest.approx(1.0)
        assert composition.ratio_within_limit

    def test_ratio_bound_multiplies_outer_tubes(self):
        def fake(index, k, tube_k):
            tmap = SimpleNamespace(max_dilatation=lambda: k)
            return SimpleNamespace(index=index, base=SimpleNamespace(tmap=tmap, tube_k=tube_k))

        stages = [fake(2, 4.0, 1.3), fake(1, 3.0, 1.4), fake(3, 4.0, 1.2)]
        assert composed_ratio_bound(stages) == pytest.approx(1.4 * 1.3 * 4.0 / 3.0)
        assert composed_ratio_bound(stages[1:2]) == pytest.approx(1.0)

    def test_bent_composition_ratio_is_ledgered(self):
        family = build_nested_family([10, 20])
        stages = [build_stage(family, level, n, bend_map()) for level, n in ((1, 10), (2, 20))]
        composition = compose_stages(stages)
        first, second = stages[0].base, stages[1].base
        expected = max(1.0, first.tube_k * second.tmap.max_dilatation() / first.tmap.max_dilatation())
        assert composition.ratio_bound == pytest.approx(expected)
        assert 1.0 < composition.composed_ratio
        assert composition.ratio_within_bound
        doc = composition.to_document()
        assert doc["composed_ratio"] == pytest.approx(composition.composed_ratio)
        assert doc["ratio_limit"] == pytest.approx(1.10)

    def test_single_bent_stage_ratio(self):
        family = build_nested_family([10])
        composition = compose_stages([build_stage(family, 1, 10, bend_map())])
        assert composition.composed_ratio <= 1.0 + 1e-9
        assert composition.ratio_within_limit


class TestOscillation:
    def test_straight_line_is_never_flagged(self):
        report = oscillation_report(lambda pts: pts, 0.5, [0, 4, 8], samples_exponent=10)
        assert report.flagged_exponents == []
        assert [r.length for r in report.rows] == pytest.approx([1.0, 1.0, 1.0])

    def test_sine_flagged_only_at_coarse_scale(self):
        report = oscillation_report(_sine_curve, 0.5, [0, 10], samples_exponent=12)
        assert report.flagged_exponents == [0]
        assert report.bands == [(0, 0)]
        assert report.rows[0].max_deviation == pytest.approx(0.25, abs=0.01)

    def test_scale_finer_than_sampling(self):
        with pytest.raises(ValueError, match="finer"):
            oscillation_report(lambda pts: pts, 0.5, [12], samples_exponent=10)

    def test_stage_scales_split_bands(self):
        flagged = {0, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}
        rows = [ScaleRow(e, 2.0**-e, 0.2 if e in flagged else 0.0, int(e in flagged), 1.0) for e in range(13)]
        runs = OscillationReport(0.5, 0.1, rows)
        assert runs.bands == [(0, 0), (2, 11)]
        staged = OscillationReport(0.5, 0.1, rows, stage_scales=[1.0, 0.1, 0.005],
                                   stage_lengths=[1.0, 1.06, 1.12, 1.19])
        assert staged.band_ranges() == [(0, 3), (4, 7), (8, 12)]
        assert staged.bands == [(0, 3), (4, 7), (8, 11)]
        assert staged.growth() == pytest.approx([1.06, 1.12 / 1.06, 1.19 / 1.12])
        assert staged.to_document()["bands"] == [[0, 3], [4, 7], [8, 11]]

    def test_stage_maps_need_matching_scales(self):
        with pytest.raises(ValueError, match="stage maps"):
            oscillation_report(lambda pts: pts, 0.5, [0], samples_exponent=8, stage_maps=[lambda pts: pts])

    def test_identity_stages_add_no_length(self):
        report = oscillation_report(lambda pts: pts, 0.5, [0, 4], samples_exponent=8,
                                    stage_scales=[1.0, 0.125], stage_maps=[lambda pts: pts] * 2)
        assert report.growth() == pytest.approx([1.0, 1.0])
        assert report.bands == []


class TestWiggleService:
    def test_default_branching(self):
        assert default_branching(3) == (10, 20, 40)

    def test_depth_must_be_positive(self, wiggle_service):
        with pytest.raises(ValueError, match="depth"):
            wiggle_service.construct(0)

    def test_mesh_limit(self, wiggle_service):
        with pytest.raises(ValueError, match="mesh limit"):
            wiggle_service.construct(1, branching=[600])

    def test_flat_construction(self, wiggle_service):
        construction = wiggle_service.construct(1, amplitude=0.0)
        assert construction.branching == (10,)
        assert len(construction.stages) == 1
        assert construction.composition.budget_sum == pytest.approx(0.1)
        assert construction.notes == []

    def test_large_branching_is_tabulated_only(self, wiggle_service):
        construction = wiggle_service.construct(2, branching=[8, 600], amplitude=0.0)
        assert len(construction.stages) == 1
        assert any("1 of 2" in note for note in construction.notes)

    def test_weak_budget_noted(self, wiggle_service):
        construction = wiggle_service.construct(3, branching=[4, 4, 4], amplitude=0.0)
        assert any("budget sum" in note for note in construction.notes)

    def test_deep_point(self, wiggle_service):
        family = build_nested_family([8, 8])
        assert wiggle_service.deep_point(family, 1) == pytest.approx(0.5625)

    def test_first_generation_oscillates(self, wiggle_service):
        built = wiggle_service.construct(1)
        report = wiggle_service.oscillation(built, 1, range(0, 7))
        assert report.y == pytest.approx(0.5)
        assert report.rows[0].max_deviation >= 0.12
        assert report.bands[0][0] == 0
        assert report.growth()[0] >= wiggle_service.min_band_growth

    @pytest.mark.slow
    def test_third_generation_bands_and_growth(self, wiggle_service):
        built = wiggle_service.construct(3)
        report = wiggle_service.oscillation(built, 3, range(0, 13))
        assert len(report.bands) == 3
        assert len(report.growth()) == 3
        assert min(report.growth()) >= wiggle_service.min_band_growth
        lengths = [r.length for r in report.rows]
        assert all(b >= a - 1e-12 for a, b in zip(lengths, lengths[1:]))
        assert built.composition.ratio_within_bound
        assert built.composition.constant_consistent
