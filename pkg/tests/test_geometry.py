import math

import numpy as np
import pytest

from qcdistort.services.geometry import (
    AffinePiece,
    ComposedMap,
    Point2,
    TiledStage,
    Triangle,
    TriangulatedMap,
    affine_between,
    apply,
    circle_distortion,
    compose_pieces,
    dilatation_of,
    locality_ledger,
    max_dilatation,
    triangulate_quads,
)

UNIT = Triangle(((0.0, 0.0), (1.0, 0.0), (0.0, 1.0)))


class TestPrimitives:
    def test_point_rejects_nan(self):
        with pytest.raises(ValueError, match="finite"):
            Point2(float("nan"), 0.0)

    def test_clockwise_triangle_rejected(self):
        with pytest.raises(ValueError, match="counterclockwise"):
            Triangle(((0.0, 0.0), (0.0, 1.0), (1.0, 0.0)))

    def test_orientation_reversing_piece_rejected(self):
        with pytest.raises(ValueError, match="orientation"):
            AffinePiece(UNIT, np.array([[1.0, 0.0], [0.0, -1.0]]), np.zeros(2))

    def test_affine_between_sends_vertices(self):
        dst = ((1.0, 1.0), (3.0, 1.0), (1.0, 2.0))
        piece = affine_between(UNIT, dst)
        assert np.allclose(piece(UNIT.array), np.array(dst))


class TestDilatation:
    def test_horizontal_stretch(self):
        piece = AffinePiece(UNIT, np.diag([2.0, 1.0]), np.zeros(2))
        dil = dilatation_of(piece)
        assert abs(dil.mu - 1.0 / 3.0) < 1e-12
        assert abs(dil.K - 2.0) < 1e-12

    def test_rotation_is_conformal(self):
        c, s = math.cos(0.7), math.sin(0.7)
        piece = AffinePiece(UNIT, np.array([[c, -s], [s, c]]), np.array([0.3, -0.2]))
        assert abs(dilatation_of(piece).K - 1.0) < 1e-12

    def test_composition_is_submultiplicative(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = rng.normal(size=(2, 2))
            b = rng.normal(size=(2, 2))
            if np.linalg.det(a) <= 0:
                a[0] *= -1
            if np.linalg.det(b) <= 0:
                b[0] *= -1
            outer = AffinePiece(UNIT, a, np.zeros(2))
            inner = AffinePiece(UNIT, b, np.zeros(2))
            both = compose_pieces(outer, inner)
            assert dilatation_of(both).K <= dilatation_of(outer).K * dilatation_of(inner).K * (1 + 1e-9)

    def test_circle_distortion_matches_affine_k(self):
        matrix = np.diag([3.0, 1.0])
        h = circle_distortion(lambda pts: pts @ matrix.T, (0.5, 0.5), 0.1, samples=256)
        assert abs(h - 3.0) < 1e-9

    def test_circle_distortion_rejects_bad_radius(self):
        with pytest.raises(ValueError, match="r > 0"):
            circle_distortion(lambda pts: pts, (0.0, 0.0), 0.0)


class TestTriangulatedMap:
    def test_identity_fixes_points(self):
        tmap = TriangulatedMap.identity()
        pts = np.array([[0.1, 0.2], [0.9, 0.9], [0.5, 0.5], [1.0, 1.0]])
        assert np.allclose(tmap.apply(pts), pts)
        assert max_dilatation(tmap) == pytest.approx(1.0)

    def test_fan_map_values(self, fan_map):
        assert fan_map.n_pieces == 4
        assert np.allclose(fan_map.apply([[0.5, 0.5]]), [[0.6, 0.5]])
        p = apply(fan_map, Point2(0.3, 0.25))
        assert abs(p.x - 0.35) < 1e-12 and abs(p.y - 0.25) < 1e-12
        assert fan_map.max_dilatation() > 1.0

    def test_boundary_is_fixed(self, fan_map):
        t = np.linspace(0.0, 1.0, 11)
        edge = np.column_stack([t, np.zeros_like(t)])
        assert np.allclose(fan_map.apply(edge), edge)

    def test_flipped_image_rejected(self):
        src = np.array([[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]])
        img = np.array([[[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]])
        with pytest.raises(ValueError, match="flipped"):
            TriangulatedMap(src, img)

    def test_point_outside_domain(self, fan_map):
        with pytest.raises(ValueError, match="outside"):
            fan_map.apply([[2.0, 2.0]])

    def test_document_preserves_map(self, fan_map):
        again = TriangulatedMap.from_document(fan_map.to_document())
        pts = np.random.default_rng(0).random((50, 2))
        assert np.allclose(again.apply(pts), fan_map.apply(pts))

    def test_document_version_checked(self, fan_map):
        doc = fan_map.to_document()
        doc["schema_version"] = 99
        with pytest.raises(ValueError, match="schema_version"):
            TriangulatedMap.from_document(doc)

    def test_quads_must_share_edges(self):
        quads = np.array([
            [[0, 0], [1, 0], [1, 1], [0, 1]],
            [[2, 0], [3, 0], [3, 1], [2, 1]],
        ], dtype=float)
        with pytest.raises(ValueError, match="share an edge"):
            triangulate_quads(quads)


class TestStages:
    def test_tiled_stage_copies_base(self, fan_map):
        stage = TiledStage(1, fan_map, [0.0], 0.5)
        images, _, labels = stage.evaluate([[0.25, 0.25], [0.75, 0.25], [0.5, 0.75]])
        assert np.allclose(images, [[0.3, 0.25], [0.8, 0.25], [0.5, 0.75]])
        assert labels[2] == "identity"

    def test_overlapping_rectangles_rejected(self, fan_map):
        with pytest.raises(ValueError, match="overlap"):
            TiledStage(1, fan_map, [0.0, 0.25], 0.5)

    def test_composition_order(self, fan_map):
        composed = ComposedMap([TiledStage(2, fan_map, [0.0], 0.5), TiledStage(1, fan_map, [0.0], 1.0)])
        assert np.allclose(composed.apply([[0.25, 0.25]]), [[0.35, 0.25]])
        ev = composed.evaluate([[0.25, 0.25]])
        assert np.allclose(ev.images, [[0.35, 0.25]])
        assert ev.stage_dilatations.shape == (1, 2)
        assert ev.dilatation[0] <= ev.stage_dilatations[0].prod() * (1 + 1e-9)

    def test_stages_must_be_consecutive(self, fan_map):
        with pytest.raises(ValueError, match="consecutively"):
            ComposedMap([TiledStage(2, fan_map, [0.0], 0.5)])

    def test_locality_ledger(self, fan_map):
        composed = ComposedMap([TiledStage(1, fan_map, [0.0], 1.0), TiledStage(2, fan_map, [0.0], 0.5)])
        pts = np.random.default_rng(1).random((200, 2))
        ledger = locality_ledger(composed, pts)
        assert ledger.samples == 200
        assert ledger.max_nonconformal_stages <= 2
        assert ledger.composed_max_k <= fan_map.max_dilatation() ** 2 * (1 + 1e-9)
