"""Planar primitives, affine pieces and piecewise-linear maps.

Dilatation of an affine piece is computed in closed form from its linear
part. Point location in a TriangulatedMap uses a centroid k-d tree with
barycentric tests on the nearest candidates.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from qcdistort.models.schemas import SCHEMA_VERSION, LocalityDocument, TrianglePiece, TriangulatedMapDocument

logger = logging.getLogger(__name__)

EDGE_EPS = 1e-12
SNAP_EPS = 1e-9
_BRUTE_CHUNK = 2_000_000


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError(f"Point coordinates must be finite, got ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


def signed_area(a, b, c) -> float:
    return 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def signed_areas(triangles: np.ndarray) -> np.ndarray:
    """Signed areas of a (T, 3, 2) triangle array."""
    t = np.asarray(triangles, dtype=float)
    e1 = t[:, 1] - t[:, 0]
    e2 = t[:, 2] - t[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


@dataclass(frozen=True)
class Triangle:
    vertices: tuple

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) != 3:
            raise ValueError(f"Triangle needs 3 vertices, got {len(verts)}")
        area = signed_area(*verts)
        if not area > 0:
            raise ValueError(
                f"Triangle {verts} must be nondegenerate and counterclockwise (signed area {area})"
            )
        object.__setattr__(self, "vertices", verts)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.vertices, dtype=float)

    @property
    def area(self) -> float:
        return signed_area(*self.vertices)


@dataclass(frozen=True, eq=False)
class AffinePiece:
    source: Triangle
    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float).reshape(2, 2)
        t = np.array(self.translation, dtype=float).reshape(2)
        det = float(np.linalg.det(m))
        if not det > 0:
            raise ValueError(f"Affine piece must preserve orientation, determinant {det}")
        m.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.matrix.T + self.translation

    @property
    def image(self) -> Triangle:
        return Triangle(tuple(map(tuple, self(self.source.array))))


@dataclass(frozen=True)
class Dilatation:
    mu: complex
    K: float

    def __post_init__(self):
        if not abs(self.mu) < 1:
            raise ValueError(f"Beltrami coefficient must satisfy |mu| < 1, got {self.mu}")


def _as_triangle(tri) -> Triangle:
    return tri if isinstance(tri, Triangle) else Triangle(tuple(map(tuple, np.asarray(tri, float))))


def affine_between(src, dst) -> AffinePiece:
    """Unique affine map sending the vertices of src to those of dst in order."""
    src_t = _as_triangle(src)
    dst_t = _as_triangle(dst)
    s = src_t.array
    d = dst_t.array
    basis = np.column_stack([s[1] - s[0], s[2] - s[0]])
    target = np.column_stack([d[1] - d[0], d[2] - d[0]])
    matrix = target @ np.linalg.inv(basis)
    translation = d[0] - matrix @ s[0]
    return AffinePiece(source=src_t, matrix=matrix, translation=translation)


def compose_pieces(outer: AffinePiece, inner: AffinePiece) -> AffinePiece:
    """outer ∘ inner, kept on the source triangle of inner."""
    matrix = outer.matrix @ inner.matrix
    translation = outer.matrix @ inner.translation + outer.translation
    return AffinePiece(source=inner.source, matrix=matrix, translation=translation)


def beltrami_coefficients(matrices) -> np.ndarray:
    """mu = f_zbar / f_z for each 2x2 linear part; rejects orientation reversal."""
    m = np.asarray(matrices, dtype=float).reshape(-1, 2, 2)
    a, b, c, d = m[:, 0, 0], m[:, 0, 1], m[:, 1, 0], m[:, 1, 1]
    det = a * d - b * c
    if np.any(det <= 0):
        bad = int(np.argmax(det <= 0))
        raise ValueError(f"Linear part {bad} is not orientation preserving (det {det[bad]})")
    f_z = 0.5 * ((a + d) + 1j * (c - b))
    f_zbar = 0.5 * ((a - d) + 1j * (c + b))
    return f_zbar / f_z


def dilatation_from_mu(mu) -> np.ndarray:
    k = np.abs(mu)
    return (1.0 + k) / (1.0 - k)


def linear_dilatation(matrices) -> np.ndarray:
    return dilatation_from_mu(beltrami_coefficients(matrices))


def dilatation_of(piece: AffinePiece) -> Dilatation:
    mu = complex(beltrami_coefficients(piece.matrix)[0])
    return Dilatation(mu=mu, K=float(dilatation_from_mu(mu)))


class TriangulatedMap:
    """Piecewise-affine homeomorphism given by matching source and image triangles."""

    def __init__(self, source, image, labels: Sequence[str] | None = None):
        src = np.asarray(source, dtype=float).reshape(-1, 3, 2)
        img = np.asarray(image, dtype=float).reshape(-1, 3, 2)
        if src.shape != img.shape or len(src) == 0:
            raise ValueError(f"Source and image triangulations differ in shape: {src.shape} vs {img.shape}")
        src_area = signed_areas(src)
        img_area = signed_areas(img)
        if np.any(src_area <= 0):
            bad = int(np.argmax(src_area <= 0))
            raise ValueError(f"Source triangle {bad} is degenerate or clockwise (area {src_area[bad]})")
        if np.any(img_area <= 0):
            bad = int(np.argmax(img_area <= 0))
            raise ValueError(f"Image triangle {bad} is degenerate or flipped (area {img_area[bad]})")

        self._source = src
        self._image = img
        basis = np.stack([src[:, 1] - src[:, 0], src[:, 2] - src[:, 0]], axis=-1)
        target = np.stack([img[:, 1] - img[:, 0], img[:, 2] - img[:, 0]], axis=-1)
        self._inv_basis = np.linalg.inv(basis)
        self._matrices = target @ self._inv_basis
        self._translations = img[:, 0] - np.einsum("tij,tj->ti", self._matrices, src[:, 0])
        self._tree = cKDTree(src.mean(axis=1))
        if labels is None:
            self.labels = np.full(len(src), "piece", dtype=object)
        else:
            if len(labels) != len(src):
                raise ValueError(f"Expected {len(src)} labels, got {len(labels)}")
            self.labels = np.asarray(labels, dtype=object)

    @classmethod
    def from_mesh(cls, source_vertices, image_vertices, triangles, labels=None) -> "TriangulatedMap":
        tri = np.asarray(triangles, dtype=int)
        sv = np.asarray(source_vertices, dtype=float)
        iv = np.asarray(image_vertices, dtype=float)
        return cls(sv[tri], iv[tri], labels)

    @classmethod
    def from_pieces(cls, pieces: Sequence[AffinePiece], labels=None) -> "TriangulatedMap":
        src = np.stack([p.source.array for p in pieces])
        img = np.stack([p(p.source.array) for p in pieces])
        return cls(src, img, labels)

    @classmethod
    def identity(cls, x0: float = 0.0, y0: float = 0.0, x1: float = 1.0, y1: float = 1.0) -> "TriangulatedMap":
        quad = np.array([[[x0, y0], [x1, y0], [x1, y1], [x0, y1]]])
        return triangulate_quads(quad).map_to(quad)

    @property
    def n_pieces(self) -> int:
        return len(self._source)

    @property
    def source_triangles(self) -> np.ndarray:
        return self._source

    @property
    def image_triangles(self) -> np.ndarray:
        return self._image

    @property
    def matrices(self) -> np.ndarray:
        return self._matrices

    @property
    def translations(self) -> np.ndarray:
        return self._translations

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        flat = self._source.reshape(-1, 2)
        lo = flat.min(axis=0)
        hi = flat.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def pieces(self) -> list[AffinePiece]:
        return [
            AffinePiece(Triangle(tuple(map(tuple, s))), m, t)
            for s, m, t in zip(self._source, self._matrices, self._translations)
        ]

    def _barycentric(self, pts: np.ndarray, cand: np.ndarray) -> np.ndarray:
        rel = pts[:, None, :] - self._source[cand, 0]
        l12 = np.einsum("mkij,mkj->mki", self._inv_basis[cand], rel)
        l0 = 1.0 - l12.sum(axis=-1, keepdims=True)
        return np.concatenate([l0, l12], axis=-1)

    def locate(self, points) -> np.ndarray:
        """Index of the source triangle containing each point."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if not np.all(np.isfinite(pts)):
            raise ValueError("Points must have finite coordinates")
        result = np.full(len(pts), -1, dtype=int)
        pending = np.arange(len(pts))
        k = min(8, self.n_pieces)
        while pending.size:
            _, cand = self._tree.query(pts[pending], k=k)
            cand = np.asarray(cand).reshape(len(pending), k)
            lam = self._barycentric(pts[pending], cand)
            inside = lam.min(axis=-1) >= -EDGE_EPS
            found = inside.any(axis=1)
            first = inside.argmax(axis=1)
            result[pending[found]] = cand[found, first[found]]
            pending = pending[~found]
            if k >= min(64, self.n_pieces):
                break
            k = min(k * 4, 64, self.n_pieces)
        if pending.size:
            result[pending] = self._locate_brute(pts[pending])
        return result

    def _locate_brute(self, pts: np.ndarray) -> np.ndarray:
        out = np.empty(len(pts), dtype=int)
        step = max(1, _BRUTE_CHUNK // self.n_pieces)
        everything = np.arange(self.n_pieces)
        for start in range(0, len(pts), step):
            chunk = pts[start:start + step]
            cand = np.broadcast_to(everything, (len(chunk), self.n_pieces))
            margin = self._barycentric(chunk, cand).min(axis=-1)
            best = margin.argmax(axis=1)
            worst = margin[np.arange(len(chunk)), best]
            if np.any(worst < -SNAP_EPS):
                bad = chunk[int(np.argmin(worst))]
                raise ValueError(f"Point ({bad[0]}, {bad[1]}) lies outside the map domain")
            out[start:start + step] = best
        return out

    def evaluate(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Images, linear parts and piece indices for a batch of points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        idx = self.locate(pts)
        mats = self._matrices[idx]
        images = np.einsum("nij,nj->ni", mats, pts) + self._translations[idx]
        return images, mats, idx

    def apply(self, points) -> np.ndarray:
        return self.evaluate(points)[0]

    def beltrami(self) -> np.ndarray:
        return beltrami_coefficients(self._matrices)

    def dilatations(self) -> np.ndarray:
        return dilatation_from_mu(self.beltrami())

    def max_dilatation(self, label: str | None = None) -> float:
        k = self.dilatations()
        if label is not None:
            k = k[self.labels == label]
        return float(k.max()) if k.size else 1.0

    def aspect_ratios(self) -> np.ndarray:
        """Longest edge over the altitude onto it, per source triangle."""
        t = self._source
        edges = np.stack([t[:, 1] - t[:, 0], t[:, 2] - t[:, 1], t[:, 0] - t[:, 2]], axis=1)
        longest = np.linalg.norm(edges, axis=-1).max(axis=1)
        return longest**2 / (2.0 * signed_areas(t))

    def to_document(self) -> dict:
        pieces = [
            TrianglePiece(source=s.tolist(), matrix=m.tolist(), translation=t.tolist(), label=str(label))
            for s, m, t, label in zip(self._source, self._matrices, self._translations, self.labels)
        ]
        return TriangulatedMapDocument(pieces=pieces).model_dump(mode="json")

    @classmethod
    def from_document(cls, doc: dict) -> "TriangulatedMap":
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"Unsupported triangulated map schema_version: {version}")
        pieces = TriangulatedMapDocument.model_validate({"pieces": doc.get("pieces") or []}).pieces
        if not pieces:
            raise ValueError("Triangulated map document has no pieces")
        src = np.array([p.source for p in pieces], dtype=float)
        mats = np.array([p.matrix for p in pieces], dtype=float)
        trans = np.array([p.translation for p in pieces], dtype=float)
        img = np.einsum("tij,tvj->tvi", mats, src) + trans[:, None, :]
        return cls(src, img, [p.label for p in pieces])


def apply(tmap: TriangulatedMap, p):
    """Image of a Point2 (returned as Point2) or of an (N, 2) array."""
    if isinstance(p, Point2):
        x, y = tmap.apply(p.as_array())[0]
        return Point2(float(x), float(y))
    return tmap.apply(p)


def max_dilatation(tmap: TriangulatedMap) -> float:
    return tmap.max_dilatation()


@dataclass(frozen=True, eq=False)
class QuadTriangulation:
    """Source quads split along the diagonal from their first vertex."""
    quads: np.ndarray
    triangles: np.ndarray

    def map_to(self, image_quads, labels: Sequence[str] | None = None) -> TriangulatedMap:
        img = np.asarray(image_quads, dtype=float).reshape(-1, 4, 2)
        if img.shape != self.quads.shape:
            raise ValueError(f"Image quads {img.shape} do not match source quads {self.quads.shape}")
        tri_labels = None if labels is None else [lab for lab in labels for _ in range(2)]
        return TriangulatedMap(self.triangles, _split_quads(img), tri_labels)


def _split_quads(quads: np.ndarray) -> np.ndarray:
    first = quads[:, [0, 1, 2]]
    second = quads[:, [0, 2, 3]]
    return np.stack([first, second], axis=1).reshape(-1, 3, 2)


def _check_convex(quads: np.ndarray) -> None:
    edges = np.roll(quads, -1, axis=1) - quads
    nxt = np.roll(edges, -1, axis=1)
    cross = edges[..., 0] * nxt[..., 1] - edges[..., 1] * nxt[..., 0]
    bad = np.flatnonzero(~np.all(cross > 0, axis=1))
    if bad.size:
        raise ValueError(f"Quad {int(bad[0])} is not strictly convex and counterclockwise")


def triangulate_quads(quads, strip: bool = True) -> QuadTriangulation:
    """Split each counterclockwise quad (first vertex lower-left) into two triangles."""
    q = np.asarray(quads, dtype=float).reshape(-1, 4, 2)
    if len(q) == 0:
        raise ValueError("No quads to triangulate")
    _check_convex(q)
    if strip:
        for i in range(len(q) - 1):
            a = {tuple(np.round(v, 12)) for v in q[i]}
            b = {tuple(np.round(v, 12)) for v in q[i + 1]}
            if len(a & b) < 2:
                raise ValueError(f"Quads {i} and {i + 1} do not share an edge")
    return QuadTriangulation(quads=q, triangles=_split_quads(q))


def circle_distortion(evaluate: Callable[[np.ndarray], np.ndarray], center, r: float, samples: int = 256) -> float:
    """max/min of |f(y) - f(x)| over |y - x| = r."""
    if r <= 0 or samples < 3:
        raise ValueError(f"Need r > 0 and at least 3 samples, got r={r}, samples={samples}")
    c = np.asarray(center, dtype=float).reshape(2)
    theta = 2.0 * np.pi * np.arange(samples) / samples
    ring = c + r * np.column_stack([np.cos(theta), np.sin(theta)])
    images = np.asarray(evaluate(np.vstack([c, ring])), dtype=float)
    dist = np.linalg.norm(images[1:] - images[0], axis=1)
    if dist.min() == 0:
        return float("inf")
    return float(dist.max() / dist.min())


@dataclass(frozen=True, eq=False)
class TiledStage:
    """A base map on Q copied into each square of side `side` along horizontal rectangles.

    Rectangle r is [0, 1] x [bottoms[r], bottoms[r] + side]; outside every
    rectangle the stage is the identity.
    """
    index: int
    base: TriangulatedMap
    bottoms: np.ndarray
    side: float

    def __post_init__(self):
        bottoms = np.sort(np.asarray(self.bottoms, dtype=float).reshape(-1))
        if not 0 < self.side <= 1:
            raise ValueError(f"Square side must lie in (0, 1], got {self.side}")
        if bottoms.size > 1 and np.any(np.diff(bottoms) < self.side - EDGE_EPS):
            raise ValueError("Stage rectangles overlap")
        object.__setattr__(self, "bottoms", bottoms)

    @property
    def squares_per_rectangle(self) -> int:
        return int(round(1.0 / self.side))

    def contains(self, points) -> np.ndarray:
        y = np.atleast_2d(np.asarray(points, dtype=float))[:, 1]
        r = np.searchsorted(self.bottoms, y + EDGE_EPS, side="right") - 1
        ok = r >= 0
        ok[ok] = y[ok] <= self.bottoms[r[ok]] + self.side + EDGE_EPS
        return ok

    def evaluate(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        images = pts.copy()
        mats = np.broadcast_to(np.eye(2), (len(pts), 2, 2)).copy()
        labels = np.full(len(pts), "identity", dtype=object)
        inside = self.contains(pts)
        if not inside.any():
            return images, mats, labels
        sub = pts[inside]
        r = np.searchsorted(self.bottoms, sub[:, 1] + EDGE_EPS, side="right") - 1
        bottom = self.bottoms[r]
        q = np.clip(np.floor(sub[:, 0] / self.side), 0, self.squares_per_rectangle - 1)
        origin = np.column_stack([q * self.side, bottom])
        local = np.clip((sub - origin) / self.side, 0.0, 1.0)
        img_local, m, idx = self.base.evaluate(local)
        images[inside] = origin + self.side * img_local
        mats[inside] = m
        labels[inside] = self.base.labels[idx]
        return images, mats, labels


@dataclass
class ComposedEvaluation:
    images: np.ndarray
    jacobians: np.ndarray
    stage_dilatations: np.ndarray
    stage_labels: np.ndarray

    @property
    def dilatation(self) -> np.ndarray:
        return linear_dilatation(self.jacobians)


class ComposedMap:
    """g_n = f_1 ∘ ... ∘ f_n for nested tiled stages."""

    def __init__(self, stages: Sequence[TiledStage]):
        if not stages:
            raise ValueError("At least one stage is required")
        ordered = sorted(stages, key=lambda s: s.index)
        indices = [s.index for s in ordered]
        if indices != list(range(1, len(ordered) + 1)):
            raise ValueError(f"Stages must be indexed 1..n consecutively, got {indices}")
        for outer, inner in zip(ordered, ordered[1:]):
            ends = np.column_stack([
                np.full(2 * len(inner.bottoms), 0.5),
                np.concatenate([inner.bottoms, inner.bottoms + inner.side]),
            ])
            if not outer.contains(ends).all():
                raise ValueError(f"Stage {inner.index} is not nested inside stage {outer.index}")
        self.stages = ordered

    @property
    def depth(self) -> int:
        return len(self.stages)

    def evaluate(self, points) -> ComposedEvaluation:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        jac = np.broadcast_to(np.eye(2), (len(pts), 2, 2)).copy()
        stage_k = np.ones((len(pts), self.depth))
        stage_labels = np.empty((len(pts), self.depth), dtype=object)
        for stage in reversed(self.stages):
            pts, mats, labels = stage.evaluate(pts)
            jac = mats @ jac
            stage_k[:, stage.index - 1] = linear_dilatation(mats)
            stage_labels[:, stage.index - 1] = labels
        return ComposedEvaluation(pts, jac, stage_k, stage_labels)

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        for stage in reversed(self.stages):
            pts = stage.evaluate(pts)[0]
        return pts


@dataclass
class LocalityLedger:
    samples: int
    max_nonconformal_stages: int
    multi_stage_fraction: float
    composed_max_k: float
    stage_max_k: list[float]
    slack: float

    def to_document(self) -> dict:
        return LocalityDocument(
            samples=self.samples,
            max_nonconformal_stages=self.max_nonconformal_stages,
            multi_stage_fraction=self.multi_stage_fraction,
            composed_max_k=self.composed_max_k,
            stage_max_k=self.stage_max_k,
            slack=self.slack,
        ).model_dump(mode="json")


def locality_ledger(composed: ComposedMap, points) -> LocalityLedger:
    """How many stages distort each sample point, and how far the composed K exceeds the worst stage."""
    ev = composed.evaluate(points)
    active = (ev.stage_dilatations > 1.0 + 1e-9).sum(axis=1)
    stage_max = ev.stage_dilatations.max(axis=0)
    composed_k = float(ev.dilatation.max())
    return LocalityLedger(
        samples=len(active),
        max_nonconformal_stages=int(active.max()),
        multi_stage_fraction=float(np.mean(active > 1)),
        composed_max_k=composed_k,
        stage_max_k=[float(k) for k in stage_max],
        slack=composed_k / max(float(stage_max.max()), 1.0),
    )

