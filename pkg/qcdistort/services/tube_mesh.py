"""Conforming triangulations of snake-tube layouts and their Tutte parametrizations.

The layout lives on a grid of unit cells scaled by 1/cols. Every cell is cut
along the band offsets of the tube width, each face is fanned from its centroid,
and the source position of every vertex comes from a mean-value Tutte
embedding with the tube and complement boundaries pinned to rectangles.
"""
import logging
from collections import defaultdict
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from qcdistort.services.geometry import TriangulatedMap

logger = logging.getLogger(__name__)

Direction = tuple[int, int]


def band_offsets(width: float) -> tuple[float, ...]:
    """Cut positions inside a unit cell for a band of the given width."""
    if width >= 1.0 - 1e-12:
        return (0.0, 0.5)
    return (0.0, (1.0 - width) / 2.0, 0.5, (1.0 + width) / 2.0)


def in_band(u: float, v: float, d_in: Direction, d_out: Direction, width: float) -> bool:
    """Whether the cell-local point (u, v) lies in the band entering along d_in and leaving along d_out."""
    lo, hi = (1.0 - width) / 2.0, (1.0 + width) / 2.0
    if lo <= u <= hi and lo <= v <= hi:
        return True
    for dx, dy in ((-d_in[0], -d_in[1]), d_out):
        if dx:
            x0, x1 = (0.5, 1.0) if dx > 0 else (0.0, 0.5)
            if x0 <= u <= x1 and lo <= v <= hi:
                return True
        else:
            y0, y1 = (0.5, 1.0) if dy > 0 else (0.0, 0.5)
            if lo <= u <= hi and y0 <= v <= y1:
                return True
    return False


def mean_value_weights(vertices: np.ndarray, triangles: np.ndarray) -> sp.csr_matrix:
    """w_ij = (tan(a/2) + tan(b/2)) / |v_i - v_j| summed over the triangles at edge ij."""
    n = len(vertices)
    pts = vertices[triangles]
    rows, cols, vals = [], [], []
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        u = pts[:, b] - pts[:, a]
        v = pts[:, c] - pts[:, a]
        lu = np.linalg.norm(u, axis=1)
        lv = np.linalg.norm(v, axis=1)
        cross = np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
        half_tan = cross / (lu * lv + np.einsum("ij,ij->i", u, v))
        rows += [triangles[:, a], triangles[:, a]]
        cols += [triangles[:, b], triangles[:, c]]
        vals += [half_tan / lu, half_tan / lv]
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()


def tutte_embedding(vertices: np.ndarray, triangles: np.ndarray, fixed: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Solve for the free vertices as mean-value combinations of their neighbours."""
    out = positions.copy()
    used = np.zeros(len(vertices), dtype=bool)
    used[triangles.ravel()] = True
    free = np.flatnonzero(used & ~fixed)
    pinned = np.flatnonzero(used & fixed)
    if free.size == 0:
        return out
    W = mean_value_weights(vertices, triangles)
    degree = np.asarray(W.sum(axis=1)).ravel()
    L = (sp.diags(degree) - W).tocsr()
    L_ff = L[free][:, free].tocsc()
    rhs = W[free][:, pinned] @ positions[pinned]
    for axis in range(2):
        out[free, axis] = spsolve(L_ff, rhs[:, axis])
    return out


class LayoutMesh:
    """Mesh of copies of one snake layout stacked in a grid, with optional complement regions."""

    def __init__(
        self,
        cells: Sequence[tuple[int, int]],
        directions: Sequence[tuple[Direction, Direction]],
        corners: Sequence[bool],
        width: float,
        chamfer: float,
        cols: int,
        rows: int,
        band_rows: Sequence[int],
        with_complement: bool = True,
    ):
        if not 0 < width <= 1:
            raise ValueError(f"Tube width must lie in (0, 1], got {width}")
        if not 0 <= chamfer < 0.5:
            raise ValueError(f"Chamfer must lie in [0, 1/2), got {chamfer}")
        if with_complement and rows != cols:
            raise ValueError("A layout with complement regions must fill a square grid")
        self.cols, self.rows = cols, rows
        self.n_tubes = len(band_rows)
        self.with_complement = with_complement
        self.corner_pieces = np.asarray(corners, dtype=bool)

        offs = band_offsets(width)
        K = len(offs)
        cuts = offs + (1.0,)
        centers = [0.5 * (cuts[a] + cuts[a + 1]) for a in range(K)]
        x_lines = np.array([(c + o) / cols for c in range(cols) for o in offs] + [1.0])
        y_lines = np.array([(r + o) / cols for r in range(rows) for o in offs] + [rows / cols])
        nx, ny = len(x_lines), len(y_lines)
        self.nx, self.ny = nx, ny
        gx, gy = np.meshgrid(x_lines, y_lines, indexing="xy")
        coords = [np.column_stack([gx.ravel(), gy.ravel()])]
        extra: list[tuple[float, float]] = []

        def new_vertex(x: float, y: float) -> int:
            extra.append((x, y))
            return nx * ny + len(extra) - 1

        lookup: dict[tuple[int, int], tuple[int, int]] = {}
        for j, base in enumerate(band_rows):
            for i, (c, r) in enumerate(cells):
                if (c, base + r) in lookup:
                    raise ValueError(f"Tubes {lookup[(c, base + r)][0]} and {j} share cell ({c}, {base + r})")
                lookup[(c, base + r)] = (j, i)

        nfx, nfy = K * cols, K * rows
        kind = np.full((nfy, nfx), -1, dtype=int)
        piece = np.full((nfy, nfx), -1, dtype=int)
        for (col, row), (j, i) in lookup.items():
            d_in, d_out = directions[i]
            for b in range(K):
                for a in range(K):
                    if in_band(centers[a], centers[b], d_in, d_out, width):
                        kind[row * K + b, col * K + a] = j
                        piece[row * K + b, col * K + a] = i

        replaced: dict[tuple[int, int], tuple[int, int, int]] = {}
        inserts: dict[tuple[int, int], list[int]] = defaultdict(list)
        cut_triangles: list[list[int]] = []
        if chamfer > 0:
            half = width / 2.0
            for (col, row), (j, i) in lookup.items():
                if not corners[i]:
                    continue
                d_in, d_out = directions[i]
                ox = 0.5 + half * (d_in[0] - d_out[0])
                oy = 0.5 + half * (d_in[1] - d_out[1])
                p1 = (ox - chamfer * width * d_in[0], oy - chamfer * width * d_in[1])
                p2 = (ox + chamfer * width * d_out[0], oy + chamfer * width * d_out[1])
                a = int(np.argmin(np.abs(np.asarray(offs) - min(0.5, ox))))
                b = int(np.argmin(np.abs(np.asarray(offs) - min(0.5, oy))))
                fx, fy = col * K + a, row * K + b
                if kind[fy, fx] != j:
                    raise ValueError(f"Corner face of piece {i} is not inside tube {j}")
                o_vid = (fy + (1 if oy > 0.5 else 0)) * nx + fx + (1 if ox > 0.5 else 0)
                v1 = new_vertex((col + p1[0]) / cols, (row + p1[1]) / cols)
                v2 = new_vertex((col + p2[0]) / cols, (row + p2[1]) / cols)
                replaced[(fy, fx)] = (o_vid, v1, v2)
                for (ny_, nx_), vid in (((fy - d_out[1], fx - d_out[0]), v1), ((fy + d_in[1], fx + d_in[0]), v2)):
                    if not (0 <= ny_ < nfy and 0 <= nx_ < nfx) or kind[ny_, nx_] != -1:
                        raise ValueError(f"Chamfer of piece {i} in tube {j} does not border the complement")
                    inserts[(ny_, nx_)].append(vid)
                cut_triangles.append([o_vid, v1, v2])

        vertices = np.vstack(coords + ([np.array(extra)] if extra else []))

        polys: list[list[int]] = []
        poly_kind: list[int] = []
        poly_piece: list[int] = []
        for fy in range(nfy):
            for fx in range(nfx):
                k = int(kind[fy, fx])
                if k < 0 and not with_complement:
                    continue
                ring = [fy * nx + fx, fy * nx + fx + 1, (fy + 1) * nx + fx + 1, (fy + 1) * nx + fx]
                if (fy, fx) in replaced:
                    o_vid, v1, v2 = replaced[(fy, fx)]
                    ring.remove(o_vid)
                    ring += [v1, v2]
                ring += inserts.get((fy, fx), [])
                center = vertices[[fy * nx + fx, (fy + 1) * nx + fx + 1]].mean(axis=0)
                polys.append(self._sorted_ring(vertices, ring, center))
                poly_kind.append(k)
                poly_piece.append(int(piece[fy, fx]))
        if with_complement:
            for tri in cut_triangles:
                polys.append(self._sorted_ring(vertices, tri, vertices[tri].mean(axis=0)))
                poly_kind.append(-1)
                poly_piece.append(-1)

        self.polys = polys
        self.poly_piece = np.asarray(poly_piece, dtype=int)
        region = np.asarray(poly_kind, dtype=int)
        self.n_components = 0
        if with_complement:
            region = self._label_components(vertices, polys, region)
        self.poly_region = region

        self._vertices_before_fan = len(vertices)
        self.vertices, self.triangles, self.triangle_region, self.labels = self._fan(vertices)
        self.fixed = self._fixed_vertices()
        self.split_edges = self._split_dividing_edges()
        logger.info(
            f"Layout mesh: {len(self.vertices)} vertices, {len(self.triangles)} triangles, "
            f"{self.n_tubes} tubes, {self.n_components} complement regions, {self.split_edges} split edges"
        )

    @staticmethod
    def _sorted_ring(vertices: np.ndarray, ring: list[int], center: np.ndarray) -> list[int]:
        rel = vertices[ring] - center
        order = np.argsort(np.arctan2(rel[:, 1], rel[:, 0]))
        return [ring[o] for o in order]

    def _label_components(self, vertices: np.ndarray, polys: list[list[int]], region: np.ndarray) -> np.ndarray:
        comp = np.flatnonzero(region < 0)
        position = {int(p): n for n, p in enumerate(comp)}
        owners: dict[tuple[int, int], list[int]] = defaultdict(list)
        for p in comp:
            ring = polys[p]
            for a, b in zip(ring, ring[1:] + ring[:1]):
                owners[(min(a, b), max(a, b))].append(position[int(p)])
        src, dst = [], []
        for faces in owners.values():
            if len(faces) == 2:
                src.append(faces[0])
                dst.append(faces[1])
        graph = sp.coo_matrix((np.ones(len(src)), (src, dst)), shape=(len(comp), len(comp)))
        count, labels = connected_components(graph, directed=False)
        expected = self.n_tubes + 1
        if count != expected:
            raise ValueError(f"Tubes touch or overlap: the complement has {count} regions instead of {expected}")

        # order regions bottom to top by where they meet the left side
        height = np.full(count, np.inf)
        for n, p in enumerate(comp):
            ring_pts = vertices[polys[p]]
            if np.any(ring_pts[:, 0] == 0.0):
                height[labels[n]] = min(height[labels[n]], float(ring_pts[:, 1].mean()))
        if not np.all(np.isfinite(height)):
            raise ValueError("A complement region does not reach the left side of the square")
        rank = np.empty(count, dtype=int)
        rank[np.argsort(height)] = np.arange(count)
        out = region.copy()
        out[comp] = self.n_tubes + rank[labels]
        self.n_components = count
        return out

    def _fan(self, vertices: np.ndarray):
        coords = [vertices]
        extra = []
        tris, tri_region, labels = [], [], []
        base = len(vertices)
        for p, ring in enumerate(self.polys):
            c = base + len(extra)
            extra.append(vertices[ring].mean(axis=0))
            r = int(self.poly_region[p])
            if r < self.n_tubes:
                label = "corner" if self.corner_pieces[self.poly_piece[p]] else "tube"
            else:
                label = "complement"
            for a, b in zip(ring, ring[1:] + ring[:1]):
                tris.append((c, a, b))
                tri_region.append(r)
                labels.append(label)
        if extra:
            coords.append(np.array(extra))
        return np.vstack(coords), np.asarray(tris, dtype=int), np.asarray(tri_region, dtype=int), labels

    def _directed_boundary(self, region: int) -> tuple[dict[int, int], dict[tuple[int, int], int]]:
        edges: dict[tuple[int, int], int] = {}
        for p in np.flatnonzero(self.poly_region == region):
            ring = self.polys[p]
            for a, b in zip(ring, ring[1:] + ring[:1]):
                edges[(a, b)] = int(self.poly_piece[p])
        nxt, pieces = {}, {}
        for (a, b), i in edges.items():
            if (b, a) not in edges:
                if a in nxt:
                    raise ValueError(f"Boundary of region {region} is not a simple loop at vertex {a}")
                nxt[a] = b
                pieces[(a, b)] = i
        return nxt, pieces

    def _fixed_vertices(self) -> np.ndarray:
        fixed = np.zeros(len(self.vertices), dtype=bool)
        for j in range(self.n_tubes):
            nxt, _ = self._directed_boundary(j)
            fixed[list(nxt)] = True
        if self.with_complement:
            grid = np.arange(self.nx * self.ny)
            ix, iy = grid % self.nx, grid // self.nx
            on_frame = (ix == 0) | (ix == self.nx - 1) | (iy == 0) | (iy == self.ny - 1)
            fixed[grid[on_frame]] = True
        return fixed

    def _split_dividing_edges(self) -> int:
        """Split interior edges whose endpoints are both pinned, so the embedding stays one-to-one."""
        owners: dict[tuple[int, int], list[int]] = defaultdict(list)
        for t, tri in enumerate(self.triangles):
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                if self.fixed[a] and self.fixed[b]:
                    owners[(min(a, b), max(a, b))].append(t)
        dividing = {
            edge: faces for edge, faces in owners.items()
            if len(faces) == 2 and self.triangle_region[faces[0]] == self.triangle_region[faces[1]]
        }
        if not dividing:
            return 0
        vertices = list(self.vertices)
        midpoint = {}
        for edge in dividing:
            midpoint[edge] = len(vertices)
            vertices.append(0.5 * (self.vertices[edge[0]] + self.vertices[edge[1]]))
        tris, regions, labels = [], [], []
        for t, tri in enumerate(self.triangles):
            out = [tuple(tri)]
            for k in range(3):
                a, b, c = tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]
                m = midpoint.get((min(a, b), max(a, b)))
                if m is not None:
                    out = [(a, m, c), (m, b, c)]
                    break
            for new in out:
                tris.append(new)
                regions.append(self.triangle_region[t])
                labels.append(self.labels[t])
        self.vertices = np.asarray(vertices)
        self.triangles = np.asarray(tris, dtype=int)
        self.triangle_region = np.asarray(regions, dtype=int)
        self.labels = labels
        self.fixed = np.concatenate([self.fixed, np.zeros(len(midpoint), dtype=bool)])
        return len(dividing)

    # --- Parametrization ---
    def _walk_tube(self, j: int):
        nxt, pieces = self._directed_boundary(j)
        x = self.vertices[:, 0]
        entry = [v for v in nxt if x[v] == 0.0]
        if not entry:
            raise ValueError(f"Tube {j} does not reach the left side")
        start = min(entry, key=lambda v: self.vertices[v, 1])
        limit = len(nxt) + 1

        def follow(v: int, stop) -> tuple[list[tuple[int, int, int]], int]:
            edges = []
            for _ in range(limit):
                w = nxt[v]
                edges.append((v, w, pieces[(v, w)]))
                v = w
                if stop(v):
                    return edges, v
            raise ValueError(f"Boundary walk of tube {j} does not close")

        right, v = follow(start, lambda u: x[u] == 1.0)
        exit_edge, v = follow(v, lambda u: x[nxt[u]] != 1.0)
        left, v = follow(v, lambda u: x[u] == 0.0)
        entry_edge, v = follow(v, lambda u: u == start)
        exit_vertices = [right[-1][1]] + [e[1] for e in exit_edge]
        entry_vertices = [left[-1][1]] + [e[1] for e in entry_edge]
        left_forward = [(b, a, i) for a, b, i in reversed(left)]
        return right, left_forward, exit_vertices, entry_vertices

    def _side_parameters(self, edges: list[tuple[int, int, int]], breaks: np.ndarray) -> dict[int, float]:
        groups: list[tuple[int, list[tuple[int, int]]]] = []
        for a, b, i in edges:
            if groups and groups[-1][0] == i:
                groups[-1][1].append((a, b))
            else:
                if groups and i < groups[-1][0]:
                    raise ValueError("Tube boundary pieces are not ordered along the spine")
                groups.append((i, [(a, b)]))
        params = {edges[0][0]: 0.0}
        start = 0.0
        for g, (i, chain) in enumerate(groups):
            end = 1.0 if g == len(groups) - 1 else float(breaks[i + 1])
            lengths = np.array([np.linalg.norm(self.vertices[b] - self.vertices[a]) for a, b in chain])
            total = lengths.sum()
            cum = np.cumsum(lengths) / total if total > 0 else np.ones(len(chain))
            for (a, b), f in zip(chain, cum):
                params[b] = start + (end - start) * float(f)
            start = end
        return params

    def source_positions(self, breaks: Sequence[float], bottoms: Sequence[float], height: float) -> np.ndarray:
        """Pinned boundary positions for every tube and the frame, then the Tutte solve."""
        breaks = np.asarray(breaks, dtype=float)
        if len(bottoms) != self.n_tubes:
            raise ValueError(f"Expected {self.n_tubes} source rectangles, got {len(bottoms)}")
        src = np.full_like(self.vertices, np.nan)
        ys = self.vertices[:, 1]
        left_knots, right_knots = [(0.0, 0.0)], [(0.0, 0.0)]
        for j, bottom in enumerate(bottoms):
            top = bottom + height
            right, left, exit_v, entry_v = self._walk_tube(j)
            for v, s in self._side_parameters(right, breaks).items():
                src[v] = (s, bottom)
            for v, s in self._side_parameters(left, breaks).items():
                src[v] = (s, top)
            for side_x, side in ((0.0, entry_v), (1.0, exit_v)):
                lo, hi = ys[side].min(), ys[side].max()
                for v in side:
                    src[v] = (side_x, bottom + height * (ys[v] - lo) / (hi - lo))
                (left_knots if side_x == 0.0 else right_knots).extend([(lo, bottom), (hi, top)])

        if self.with_complement:
            frame = self.fixed & np.isnan(src[:, 0])
            for side_x, knots in ((0.0, left_knots), (1.0, right_knots)):
                knots = knots + [(self.rows / self.cols, 1.0)]
                img = np.array([k[0] for k in knots])
                pre = np.array([k[1] for k in knots])
                if np.any(np.diff(img) <= 0) or np.any(np.diff(pre) <= 0):
                    raise ValueError("Tube entries are not ordered along the side of the square")
                on_side = frame & (self.vertices[:, 0] == side_x)
                src[on_side] = np.column_stack([np.full(on_side.sum(), side_x), np.interp(ys[on_side], img, pre)])
            rest = frame & np.isnan(src[:, 0])
            src[rest] = self.vertices[rest]

        missing = self.fixed & np.isnan(src[:, 0])
        if missing.any():
            raise ValueError(f"{int(missing.sum())} pinned vertices have no boundary position")
        return tutte_embedding(self.vertices, self.triangles, self.fixed, np.nan_to_num(src))

    def to_map(self, source: np.ndarray, region: int | None = None) -> TriangulatedMap:
        mask = np.ones(len(self.triangles), dtype=bool) if region is None else self.triangle_region == region
        labels = [lab for lab, keep in zip(self.labels, mask) if keep]
        return TriangulatedMap.from_mesh(source, self.vertices, self.triangles[mask], labels)
