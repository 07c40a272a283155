"""Snake-tube construction: maps of the unit square that send the generation rectangles of E_alpha to thin winding tubes."""
import logging
import math
from dataclasses import dataclass, field
from math import isqrt
from typing import Callable, Sequence

import numpy as np
import shapely
from scipy.spatial import cKDTree

from qcdistort.config import Settings
from qcdistort.exceptions import NonConvergenceError
from qcdistort.models.schemas import (
    ExponentDocument,
    LengthBracketDocument,
    SeparationDocument,
    SnakeTubeDocument,
    ThinnedTubeDocument,
    TubeBaseMapDocument,
    TubeParamsDocument,
)
from qcdistort.services.cantor import CantorApprox, RationalPower, as_alpha, build_cantor, cantor_dimension, integer_power
from qcdistort.services.geometry import ComposedMap, LocalityLedger, TiledStage, TriangulatedMap, locality_ledger
from qcdistort.services.modulus import ExtremalLengthResult, GridRegion, ModulusSolver, extremal_length_grid
from qcdistort.services.tube_mesh import LayoutMesh

logger = logging.getLogger(__name__)

MAX_K = 4
MAX_N = 4096
_CHUNK = 256


# --- Parameters and layout ---
@dataclass(frozen=True)
class TubeParams:
    alpha: RationalPower | float
    k: int
    N: int
    m: int
    M: int
    small_n: bool
    bracket_holds: bool

    @property
    def rows(self) -> int:
        return self.m

    @property
    def cols(self) -> int:
        return 2**self.k * self.m + 1

    @property
    def n_tubes(self) -> int:
        return 2**self.k

    @property
    def expected_corners(self) -> int:
        return 2**self.k * self.m

    def to_document(self) -> dict:
        return TubeParamsDocument(
            alpha=str(self.alpha), k=self.k, N=self.N, m=self.m, M=self.M,
            grid=(self.rows, self.cols), small_n=self.small_n, bracket_holds=self.bracket_holds,
        ).model_dump(mode="json")


def tube_params(alpha, k: int) -> TubeParams:
    a = as_alpha(alpha)
    N = integer_power(a, k)
    if N is None:
        raise ValueError(f"alpha^-k must be an integer, got alpha={a}, k={k}")
    if k > MAX_K or N > MAX_N:
        raise ValueError(f"Supported sizes are k <= {MAX_K} and N <= {MAX_N}, got k={k}, N={N}")
    m = isqrt((N - 1) // 2 ** (k - 1))
    if m < 1:
        raise ValueError(f"No snake fits for alpha={a}, k={k}: m = 0")
    M = m * m * 2 ** (k - 1) + 1
    bracket = 2 * M >= N and M <= N
    params = TubeParams(a, k, N, m, M, small_n=N < 64, bracket_holds=bracket)
    if params.small_n or not bracket:
        logger.warning(f"Small tube parameters alpha={a}, k={k}: N={N}, M={M}, N/2 <= M <= N is {bracket}")
    return params


@dataclass(eq=False)
class SnakeTube:
    params: TubeParams
    cells: list[tuple[int, int]]
    directions: list[tuple[tuple[int, int], tuple[int, int]]]
    corners: list[bool]
    deviations: list[str] = field(default_factory=list)
    asymmetric: bool = False

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def corner_count(self) -> int:
        return sum(self.corners)

    def to_document(self) -> dict:
        return SnakeTubeDocument(
            params=self.params.to_document(),
            cells=self.cells,
            corners=[i for i, c in enumerate(self.corners) if c],
            n_cells=self.n_cells,
            corner_count=self.corner_count,
            deviations=self.deviations,
            asymmetric=self.asymmetric,
        ).model_dump(mode="json")


def build_snake_tube(params: TubeParams) -> SnakeTube:
    """Vertical sweeps of m - 1 cells in the odd columns, joined by one-cell steps along the even columns.

    Sweeps cover rows 0..m-2 and leave row m - 1 of each band empty, so stacked bands keep
    a clear row between neighbouring tubes. That gives M = 1 + 2^(k-1) m^2 cells and 2^k m corners.
    """
    m, cols = params.m, params.cols
    if m == 1:
        cells = [(c, 0) for c in range(cols)]
    else:
        cells = [(0, 0)]
        for i in range(2 ** (params.k - 1) * m):
            col = 2 * i + 1
            sweep = range(m - 1) if i % 2 == 0 else range(m - 2, -1, -1)
            cells += [(col, r) for r in sweep]
            cells.append((col + 1, cells[-1][1]))

    if len(set(cells)) != len(cells):
        raise ValueError("Snake layout repeats a cell")
    for (c0, r0), (c1, r1) in zip(cells, cells[1:]):
        if abs(c1 - c0) + abs(r1 - r0) != 1:
            raise ValueError(f"Cells ({c0}, {r0}) and ({c1}, {r1}) are not edge-adjacent")
    if cells[0][0] != 0 or cells[-1][0] != cols - 1 or any(not 0 <= r < m for _, r in cells):
        raise ValueError(f"Snake layout does not fit the {m} x {cols} grid")

    steps = [(b[0] - a[0], b[1] - a[1]) for a, b in zip(cells, cells[1:])]
    d_in = [(1, 0)] + steps
    d_out = steps + [(1, 0)]
    directions = list(zip(d_in, d_out))
    corners = [a != b for a, b in directions]

    deviations = []
    if len(cells) != params.M:
        deviations.append(f"layout uses {len(cells)} cells, M = {params.M}")
    if sum(corners) != params.expected_corners:
        deviations.append(f"layout has {sum(corners)} corner cells, 2^k m = {params.expected_corners}")
    asymmetric = cells[-1][1] != cells[0][1]
    if asymmetric:
        deviations.append("exit row differs from entry row; side traces are not periodic")
    for note in deviations:
        logger.warning(f"Snake tube m={m}, k={params.k}: {note}")
    return SnakeTube(params, cells, directions, corners, deviations, asymmetric)


def _band_boxes(col: int, row: int, d_in, d_out, width: float) -> list:
    lo, hi = (1.0 - width) / 2.0, (1.0 + width) / 2.0
    boxes = [shapely.box(col + lo, row + lo, col + hi, row + hi)]
    for dx, dy in ((-d_in[0], -d_in[1]), d_out):
        if dx:
            x0, x1 = (0.5, 1.0) if dx > 0 else (0.0, 0.5)
            boxes.append(shapely.box(col + x0, row + lo, col + x1, row + hi))
        else:
            y0, y1 = (0.5, 1.0) if dy > 0 else (0.0, 0.5)
            boxes.append(shapely.box(col + lo, row + y0, col + hi, row + y1))
    return boxes


def corner_cuts(tube: SnakeTube, width: float, chamfer: float) -> list:
    """Triangles removed at the outer corner of every turning cell."""
    cuts = []
    half = width / 2.0
    for (col, row), (d_in, d_out), corner in zip(tube.cells, tube.directions, tube.corners):
        if not corner:
            continue
        ox = col + 0.5 + half * (d_in[0] - d_out[0])
        oy = row + 0.5 + half * (d_in[1] - d_out[1])
        cw = chamfer * width
        cuts.append(shapely.Polygon([
            (ox, oy),
            (ox - cw * d_in[0], oy - cw * d_in[1]),
            (ox + cw * d_out[0], oy + cw * d_out[1]),
        ]))
    return cuts


def tube_polygon(tube: SnakeTube, width: float = 1.0, chamfer: float = 0.0):
    """The tube of the given relative width in cell units, with its corners cut."""
    if not 0 < width <= 1:
        raise ValueError(f"Tube width must lie in (0, 1], got {width}")
    pieces = []
    for (col, row), (d_in, d_out) in zip(tube.cells, tube.directions):
        pieces += _band_boxes(col, row, d_in, d_out, width)
    region = shapely.union_all(pieces)
    if chamfer > 0:
        region = region.difference(shapely.union_all(corner_cuts(tube, width, chamfer)))
    if region.geom_type != "Polygon":
        raise ValueError(f"Tube region is a {region.geom_type}, expected one polygon")
    return region


def tube_ends(tube: SnakeTube, width: float = 1.0):
    """Entry and exit edges of the tube on the two vertical sides of its grid."""
    y0 = tube.cells[0][1] + 0.5
    y1 = tube.cells[-1][1] + 0.5
    x1 = float(tube.params.cols)
    half = width / 2.0
    return (
        shapely.LineString([(0.0, y0 - half), (0.0, y0 + half)]),
        shapely.LineString([(x1, y1 - half), (x1, y1 + half)]),
    )


def round_corners(tube: SnakeTube, chamfer: float):
    if not 0 < chamfer < 0.5:
        raise ValueError(f"Chamfer must lie in (0, 1/2); larger cuts self-intersect the tube, got {chamfer}")
    return tube_polygon(tube, 1.0, chamfer)


@dataclass
class LengthBracket:
    length: float
    lower: float | None
    upper: float
    half: float
    holds: bool

    def to_document(self) -> dict:
        return LengthBracketDocument(
            length=self.length, lower=self.lower, upper=self.upper, half=self.half, holds=bool(self.holds),
        ).model_dump(mode="json")


def extremal_bracket(tube: SnakeTube, length: float) -> LengthBracket:
    """M - 3 * 2^k m <= lambda <= M for rounded tubes with m >= 12; only the upper bound below that."""
    p = tube.params
    lower = float(p.M - 3 * 2**p.k * p.m) if p.m >= 12 else None
    upper = float(tube.n_cells)
    holds = length <= upper * (1 + 1e-9) and (lower is None or length >= lower)
    return LengthBracket(length, lower, upper, tube.n_cells / 2.0, holds)


# --- Thinning ---
@dataclass
class ThinningStep:
    width: float
    length: float


@dataclass(eq=False)
class ThinnedTube:
    tube: SnakeTube
    width: float
    chamfer: float
    modulus: float
    target: float
    trace: list[ThinningStep] = field(default_factory=list)

    @property
    def polygon(self):
        return tube_polygon(self.tube, self.width, self.chamfer)

    def to_document(self) -> dict:
        return ThinnedTubeDocument(
            width=self.width,
            chamfer=self.chamfer,
            modulus=self.modulus,
            target=self.target,
            trace=[(s.width, s.length) for s in self.trace],
        ).model_dump(mode="json")


def _check_monotone(trace: list[ThinningStep], tol: float) -> None:
    ordered = sorted(trace, key=lambda s: s.width)
    for a, b in zip(ordered, ordered[1:]):
        if b.width > a.width and b.length > a.length * (1 + tol):
            raise NonConvergenceError(
                f"Extremal length grows with width between w={a.width:.6g} and w={b.width:.6g}",
                [(s.width, s.length) for s in trace],
            )


def thin_to_modulus(
    tube: SnakeTube,
    target: float,
    length_of: Callable[[float], float],
    chamfer: float = 0.25,
    tol: float = 0.01,
    max_iter: int = 40,
    monotone_tol: float = 0.005,
) -> ThinnedTube:
    """Find the width whose extremal length matches the target, by bisection guided by lambda ~ 1/w."""
    if target <= 0:
        raise ValueError(f"Target modulus must be positive, got {target}")
    trace: list[ThinningStep] = []

    def measure(width: float) -> float:
        length = float(length_of(width))
        trace.append(ThinningStep(width, length))
        logger.info(f"thinning step w={width:.6f}: lambda={length:.6g} (target {target})")
        _check_monotone(trace, monotone_tol)
        return length

    length = measure(1.0)
    if not math.isfinite(length):
        raise NonConvergenceError("Tube ends are disconnected", [(s.width, s.length) for s in trace])
    if length > target * (1 + tol):
        raise NonConvergenceError(
            f"Extremal length {length:.6g} already exceeds the target {target}; thinning cannot lower it",
            [(s.width, s.length) for s in trace],
        )
    if abs(length - target) <= tol * target:
        return ThinnedTube(tube, 1.0, chamfer, length, target, trace)

    w_hi, len_hi = 1.0, length
    w_lo = len_lo = None
    width = length / target
    for _ in range(max_iter):
        length = measure(width)
        if abs(length - target) <= tol * target:
            return ThinnedTube(tube, width, chamfer, length, target, trace)
        if length < target:
            w_hi, len_hi = width, length
        else:
            w_lo, len_lo = width, length
        if w_lo is None:
            width = w_hi * len_hi / target * 0.97
        else:
            frac = (1.0 / target - 1.0 / len_lo) / (1.0 / len_hi - 1.0 / len_lo)
            width = w_lo + min(max(frac, 0.1), 0.9) * (w_hi - w_lo)
        if width <= 1e-6:
            break
    raise NonConvergenceError(
        f"Thinning did not reach modulus {target} within {max_iter} steps",
        [(s.width, s.length) for s in trace],
    )


def slice_breaks(thinned: ThinnedTube, corner_floor: float = 0.25) -> np.ndarray:
    """Cut points of the source rectangle, one slice per tube cell, sized by conformal length."""
    corners = np.asarray(thinned.tube.corners, dtype=bool)
    w = thinned.width
    n_corner = int(corners.sum())
    n_straight = len(corners) - n_corner
    corner_weight = 0.0
    if n_corner:
        corner_weight = max(corner_floor / w, (thinned.modulus - n_straight / w) / n_corner)
    weights = np.where(corners, corner_weight, 1.0 / w)
    return np.concatenate([[0.0], np.cumsum(weights)]) / weights.sum()


# --- Maps ---
def tube_map(
    thinned: ThinnedTube,
    rect_modulus: float | None = None,
    bottom: float = 0.0,
    match_tol: float = 0.01,
    corner_floor: float = 0.25,
) -> TriangulatedMap:
    """PL map from [0, 1] x [bottom, bottom + 1/modulus] onto the tube drawn at scale 1/cols."""
    modulus = thinned.modulus if rect_modulus is None else float(rect_modulus)
    if abs(modulus - thinned.modulus) > match_tol * thinned.modulus:
        raise ValueError(f"Rectangle modulus {modulus} does not match the tube modulus {thinned.modulus:.6g}")
    tube = thinned.tube
    mesh = LayoutMesh(
        tube.cells, tube.directions, tube.corners, thinned.width, thinned.chamfer,
        tube.params.cols, tube.params.rows, [0], with_complement=False,
    )
    source = mesh.source_positions(slice_breaks(thinned, corner_floor), [bottom], 1.0 / modulus)
    return mesh.to_map(source)


@dataclass(eq=False)
class TubeBaseMap:
    thinned: ThinnedTube
    mesh: LayoutMesh
    source: np.ndarray
    tmap: TriangulatedMap
    bottoms: np.ndarray
    height: float
    separation: float
    periodic_defect: float
    width_ratio: float
    predicted_ratio: float

    def tube_map(self, j: int) -> TriangulatedMap:
        return self.mesh.to_map(self.source, region=j)

    def dilatation_ledger(self) -> dict[str, float]:
        return {label: self.tmap.max_dilatation(label) for label in ("tube", "corner", "complement")}

    def to_document(self) -> dict:
        return TubeBaseMapDocument(
            pieces=int(self.tmap.n_pieces),
            height=self.height,
            bottoms=self.bottoms.tolist(),
            separation=self.separation,
            periodic_defect=self.periodic_defect,
            width_ratio=self.width_ratio,
            predicted_ratio=self.predicted_ratio,
            max_dilatation=self.dilatation_ledger(),
        ).model_dump(mode="json")


def placed_tubes(thinned: ThinnedTube) -> list:
    """Tube polygons inside the unit square, one per generation rectangle, bottom to top."""
    p = thinned.tube.params
    poly = thinned.polygon
    scale = 1.0 / p.cols
    return [
        shapely.transform(poly, lambda pts, r=1 + j * p.m: (pts + np.array([0.0, r])) * scale)
        for j in range(p.n_tubes)
    ]


def build_base_map(thinned: ThinnedTube, cantor: CantorApprox, corner_floor: float = 0.25) -> TubeBaseMap:
    """The first-stage map of Q: R_j onto T_j, with the complement regions stretched between them."""
    p = thinned.tube.params
    if cantor.depth < p.k:
        raise ValueError(f"Cantor approximation has depth {cantor.depth}, need at least k={p.k}")
    intervals = cantor.intervals(p.k)
    if len(intervals) != p.n_tubes:
        raise ValueError(f"Expected {p.n_tubes} generation-{p.k} intervals, got {len(intervals)}")
    height = 1.0 / p.N
    if not np.allclose(intervals[:, 1], height, rtol=1e-9):
        raise ValueError("Generation rectangles do not have modulus N")
    bottoms = np.sort(intervals[:, 0])

    tubes = placed_tubes(thinned)
    gaps = [shapely.distance(a, b) for a, b in zip(tubes, tubes[1:])]
    gaps += [tubes[0].bounds[1], 1.0 - tubes[-1].bounds[3]]
    separation = float(min(gaps))
    if separation <= 0:
        raise ValueError("Tubes overlap after placement or touch the top and bottom edges")

    tube = thinned.tube
    mesh = LayoutMesh(
        tube.cells, tube.directions, tube.corners, thinned.width, thinned.chamfer,
        p.cols, p.cols, [1 + j * p.m for j in range(p.n_tubes)], with_complement=True,
    )
    source = mesh.source_positions(slice_breaks(thinned, corner_floor), bottoms, height)
    tmap = mesh.to_map(source)

    ys = np.linspace(0.0, 1.0, 101)
    left = tmap.apply(np.column_stack([np.zeros_like(ys), ys]))
    right = tmap.apply(np.column_stack([np.ones_like(ys), ys]))
    periodic = float(np.abs(right - left - np.array([1.0, 0.0])).max())

    width_ratio = thinned.width * p.N / p.cols
    predicted = (2.0 * float(p.alpha)) ** (-p.k / 2.0)
    base = TubeBaseMap(thinned, mesh, source, tmap, bottoms, height, separation, periodic, width_ratio, predicted)
    logger.info(
        f"Base map: {tmap.n_pieces} pieces, separation {separation:.4g}, periodic defect {periodic:.2e}, "
        f"max K {base.dilatation_ledger()}"
    )
    return base


@dataclass(eq=False)
class GenerationMap:
    index: int
    base: TubeBaseMap
    stage: TiledStage

    @property
    def n_rectangles(self) -> int:
        return len(self.stage.bottoms)

    def max_dilatation(self) -> float:
        return self.base.tmap.max_dilatation()


def assemble_generation(base: TubeBaseMap, cantor: CantorApprox, gen: int) -> GenerationMap:
    """Stage gen: the base map copied into every square of the generation (gen - 1) k rectangles."""
    p = base.thinned.tube.params
    if gen < 1:
        raise ValueError(f"Generation index must be at least 1, got {gen}")
    level = (gen - 1) * p.k
    if cantor.depth < level:
        raise ValueError(f"Cantor approximation has depth {cantor.depth}, generation {gen} needs {level}")
    bottoms = cantor.intervals(level)[:, 0]
    stage = TiledStage(gen, base.tmap, bottoms, float(p.N) ** (1 - gen))
    return GenerationMap(gen, base, stage)


def compose_generations(maps: Sequence[GenerationMap]) -> ComposedMap:
    return ComposedMap([m.stage for m in maps])


# --- Ledgers ---
def _square_diameters(composed: ComposedMap, corners: np.ndarray, side: float, samples: int) -> np.ndarray:
    t = np.arange(samples) / samples
    ring = np.concatenate([
        np.column_stack([t, np.zeros_like(t)]),
        np.column_stack([np.ones_like(t), t]),
        np.column_stack([1.0 - t, np.ones_like(t)]),
        np.column_stack([np.zeros_like(t), 1.0 - t]),
    ])
    out = np.empty(len(corners))
    for start in range(0, len(corners), _CHUNK):
        block = corners[start:start + _CHUNK]
        pts = (block[:, None, :] + side * ring[None, :, :]).reshape(-1, 2)
        images = composed.apply(np.clip(pts, 0.0, 1.0)).reshape(len(block), len(ring), 2)
        diff = images[:, :, None, :] - images[:, None, :, :]
        out[start:start + _CHUNK] = np.sqrt((diff**2).sum(axis=-1)).max(axis=(1, 2))
    return out


@dataclass
class DiameterLedger:
    generation: int
    orientation: str
    position: float
    side: float
    total_squares: int
    indices: np.ndarray
    masses: np.ndarray
    diameters: np.ndarray

    def rows(self) -> list[list]:
        return [[int(i), float(m), float(d)] for i, m, d in zip(self.indices, self.masses, self.diameters)]


def _subsample(total: int, cap: int) -> np.ndarray:
    if total <= cap:
        return np.arange(total)
    return np.unique(np.linspace(0, total - 1, cap).round().astype(int))


def diameter_ledger(
    composed: ComposedMap,
    cantor: CantorApprox,
    params: TubeParams,
    generation: int,
    y: float | None = None,
    samples: int = 16,
    max_squares: int = 4096,
) -> DiameterLedger:
    """Image diameters of the generation squares covering the horizontal segment [0, 1] x {y}."""
    level = generation * params.k
    if cantor.depth < level:
        raise ValueError(f"Cantor approximation has depth {cantor.depth}, generation {generation} needs {level}")
    intervals = cantor.intervals(level)
    if y is None:
        left, length = intervals[len(intervals) // 2]
        y = left + 0.5 * length
    hit = np.flatnonzero((intervals[:, 0] <= y) & (y <= intervals[:, 0] + intervals[:, 1]))
    if hit.size == 0:
        raise ValueError(f"y={y} is not inside a generation-{level} interval")
    bottom = intervals[hit[0], 0]
    side = 1.0 / params.N**generation
    total = params.N**generation
    idx = _subsample(total, max_squares)
    corners = np.column_stack([idx * side, np.full(len(idx), bottom)])
    diameters = _square_diameters(composed, corners, side, samples)
    return DiameterLedger(generation, "horizontal", float(y), side, total, idx,
                          np.full(len(idx), 1.0 / total), diameters)


def vertical_diameter_ledger(
    composed: ComposedMap,
    cantor: CantorApprox,
    params: TubeParams,
    generation: int,
    x: float = 0.5,
    samples: int = 16,
    max_squares: int = 4096,
) -> DiameterLedger:
    """Image diameters of the generation squares covering {x} x E."""
    level = generation * params.k
    if cantor.depth < level:
        raise ValueError(f"Cantor approximation has depth {cantor.depth}, generation {generation} needs {level}")
    intervals = cantor.intervals(level)
    side = 1.0 / params.N**generation
    col = min(int(x / side), params.N**generation - 1)
    idx = _subsample(len(intervals), max_squares)
    corners = np.column_stack([np.full(len(idx), col * side), intervals[idx, 0]])
    diameters = _square_diameters(composed, corners, side, samples)
    return DiameterLedger(generation, "vertical", float(x), side, len(intervals), idx,
                          np.full(len(idx), 1.0 / len(intervals)), diameters)


def measure_c1(ledgers: Sequence[DiameterLedger], params: TubeParams) -> float:
    """Largest C1 with diam >= C1^n N^(-n/2) 2^(-kn/2) on every horizontal ledger."""
    values = []
    for ledger in ledgers:
        n = ledger.generation
        scaled = float(ledger.diameters.min()) * params.N ** (n / 2.0) * 2.0 ** (params.k * n / 2.0)
        values.append(scaled ** (1.0 / n))
    if not values:
        raise ValueError("No diameter ledgers to measure C1 from")
    c1 = min(values)
    logger.info(f"Measured C1 = {c1:.4g} from generations {[l.generation for l in ledgers]}")
    return c1


@dataclass
class ExponentReport:
    s: float
    S: float
    s_limit: float
    S_limit: float
    t: float
    c1: float
    denominator: float

    def to_document(self) -> dict:
        return ExponentDocument(
            s=self.s, S=self.S, s_limit=self.s_limit, S_limit=self.S_limit,
            t=self.t, C1=self.c1, denominator=self.denominator,
        ).model_dump(mode="json")


def exponent_limits(alpha, k: int, c1: float) -> ExponentReport:
    """s = log N / D and S = log 2^k / D with D = -log C1 + (1/2) log N + (k/2) log 2."""
    if c1 <= 0:
        raise ValueError(f"C1 must be positive, got {c1}")
    a = as_alpha(alpha)
    log_n = -k * math.log(float(a))
    denominator = -math.log(c1) + 0.5 * log_n + 0.5 * k * math.log(2.0)
    if denominator <= 0:
        raise ValueError(f"C1={c1} is too large for k={k}: exponent denominator {denominator:.4g} <= 0")
    t = cantor_dimension(a)
    return ExponentReport(
        s=log_n / denominator,
        S=k * math.log(2.0) / denominator,
        s_limit=2.0 / (1.0 + t),
        S_limit=2.0 * t / (1.0 + t),
        t=t,
        c1=c1,
        denominator=denominator,
    )


@dataclass
class SeparationLedger:
    generation: int
    distances: list[float]
    min_distance: float
    c2: float

    def to_document(self) -> dict:
        return SeparationDocument(
            generation=self.generation, distances=self.distances, min_distance=self.min_distance, C2=self.c2,
        ).model_dump(mode="json")


def separation_ledger(
    composed: ComposedMap,
    cantor: CantorApprox,
    params: TubeParams,
    generation: int,
    samples: int = 65536,
) -> SeparationLedger:
    """Distances between images of neighbouring generation rectangles, with C2 = (d N^n)^(1/n)."""
    level = generation * params.k
    if cantor.depth < level:
        raise ValueError(f"Cantor approximation has depth {cantor.depth}, generation {generation} needs {level}")
    intervals = cantor.intervals(level)
    per_edge = max(64, min(samples // max(len(intervals), 1), 16 * params.N**generation))
    xs = np.linspace(0.0, 1.0, per_edge)
    side_ts = np.linspace(0.0, 1.0, 17)
    images = []
    for left, length in intervals:
        pts = np.concatenate([
            np.column_stack([xs, np.full(per_edge, left)]),
            np.column_stack([xs, np.full(per_edge, left + length)]),
            np.column_stack([np.zeros(17), left + length * side_ts]),
            np.column_stack([np.ones(17), left + length * side_ts]),
        ])
        images.append(composed.apply(pts))
    distances = []
    for lower, upper in zip(images, images[1:]):
        d, _ = cKDTree(lower).query(upper)
        distances.append(float(d.min()))
    min_distance = min(distances) if distances else math.inf
    c2 = (min_distance * params.N**generation) ** (1.0 / generation) if distances else math.inf
    return SeparationLedger(generation, distances, min_distance, c2)


@dataclass
class FiberImages:
    generation: int
    horizontal: list[tuple[float, np.ndarray]]
    vertical: list[tuple[float, np.ndarray]]


def fiber_images(
    composed: ComposedMap,
    cantor: CantorApprox,
    params: TubeParams,
    generation: int,
    samples: int = 65536,
    xs: Sequence[float] = (0.25, 0.5, 0.75),
    count: int = 3,
) -> FiberImages:
    """Images of horizontal fibres through deep intervals and of vertical fibres {x} x E."""
    level = generation * params.k
    if cantor.depth < level:
        raise ValueError(f"Cantor approximation has depth {cantor.depth}, generation {generation} needs {level}")
    centers = cantor.leaf_centers(level)
    picks = np.unique(np.linspace(0, len(centers) - 1, count).round().astype(int))
    t = np.linspace(0.0, 1.0, samples)
    horizontal = [(float(centers[i]), composed.apply(np.column_stack([t, np.full(samples, centers[i])])))
                  for i in picks]
    leaves = cantor.leaf_centers()
    vertical = [(float(x), composed.apply(np.column_stack([np.full(len(leaves), x), leaves]))) for x in xs]
    return FiberImages(generation, horizontal, vertical)


# --- Service ---
@dataclass(eq=False)
class TubeConstruction:
    params: TubeParams
    tube: SnakeTube
    rounded: object
    rounded_length: ExtremalLengthResult
    bracket: LengthBracket
    thinned: ThinnedTube
    cantor: CantorApprox
    base: TubeBaseMap
    generations: list[GenerationMap]
    composed: ComposedMap


class TubeService:
    def __init__(self, settings: Settings):
        cfg = settings.tube_config
        mcfg = settings.modulus_config
        self.chamfer = float(cfg.get("chamfer", 0.25))
        self.resolution = int(cfg.get("resolution", 8))
        self.thinning_tol = float(cfg.get("thinning_tol", 0.01))
        self.thinning_max_iter = int(cfg.get("thinning_max_iter", 40))
        self.monotone_tol = float(cfg.get("monotone_tol", 0.005))
        self.corner_floor = float(cfg.get("corner_share_floor", 0.25))
        self.boundary_samples = int(cfg.get("boundary_samples", 16))
        self.max_ledger_squares = int(cfg.get("max_ledger_squares", 4096))
        self.fiber_samples = int(cfg.get("fiber_samples", 65536))
        self.path_batch = int(mcfg.get("path_batch", 32))
        self.max_rounds = int(mcfg.get("max_rounds", 400))
        self.loose_gap = float(mcfg.get("path_gap_tol", 1e-4))
        self.loose_feasibility = float(mcfg.get("path_feasibility_tol", 1e-5))
        self.prune_slack = float(mcfg.get("path_prune_slack", 0.25))
        # tube lengths only need to resolve the thinning tolerance
        self.path_tol = float(cfg.get("path_tol", 1e-3))
        self.coarse_resolution = int(cfg.get("coarse_resolution", 1))
        self.solver = ModulusSolver(settings)

    def extremal_length(self, tube: SnakeTube, width: float = 1.0, chamfer: float | None = None,
                        resolution: int | None = None) -> ExtremalLengthResult:
        chamfer = self.chamfer if chamfer is None else chamfer
        resolution = resolution or self.resolution
        region = GridRegion.from_polygon(tube_polygon(tube, width, chamfer), resolution)
        return extremal_length_grid(
            region, resolution, tube_ends(tube, width), self.solver, self.path_batch, self.path_tol,
            self.max_rounds, coarse_from=self.coarse_resolution, loose_gap=self.loose_gap,
            loose_feasibility=self.loose_feasibility, prune_slack=self.prune_slack,
        )

    def thin(self, tube: SnakeTube, target: float | None = None, chamfer: float | None = None,
             resolution: int | None = None) -> ThinnedTube:
        chamfer = self.chamfer if chamfer is None else chamfer
        target = float(tube.params.N) if target is None else float(target)
        return thin_to_modulus(
            tube,
            target,
            lambda w: self.extremal_length(tube, w, chamfer, resolution).value,
            chamfer=chamfer,
            tol=self.thinning_tol,
            max_iter=self.thinning_max_iter,
            monotone_tol=self.monotone_tol,
        )

    def construct(self, alpha, k: int, generations: int, chamfer: float | None = None,
                  resolution: int | None = None) -> TubeConstruction:
        if generations < 1:
            raise ValueError(f"At least one generation is required, got {generations}")
        chamfer = self.chamfer if chamfer is None else chamfer
        params = tube_params(alpha, k)
        tube = build_snake_tube(params)
        rounded = round_corners(tube, chamfer)
        rounded_length = self.extremal_length(tube, 1.0, chamfer, resolution)
        bracket = extremal_bracket(tube, rounded_length.value)
        logger.info(f"Rounded tube: lambda={rounded_length.value:.6g}, bracket holds: {bracket.holds}")
        thinned = self.thin(tube, params.N, chamfer, resolution)
        cantor = build_cantor(params.alpha, generations * k)
        base = build_base_map(thinned, cantor, self.corner_floor)
        maps = [assemble_generation(base, cantor, g) for g in range(1, generations + 1)]
        composed = compose_generations(maps)
        return TubeConstruction(params, tube, rounded, rounded_length, bracket, thinned, cantor, base, maps, composed)
