"""Wiggled-tube construction: a bend map copied into ever thinner parallel tubes, composed over generations."""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import shapely
from scipy.spatial import ConvexHull, QhullError

from qcdistort.config import Settings
from qcdistort.models.schemas import CompositionDocument, OscillationDocument, WiggleStageRow
from qcdistort.services.cantor import (
    BranchingSelection,
    HMeasureReport,
    NestedIntervalFamily,
    build_nested_family,
    get_gauge,
    h_measure_check,
    select_branching,
)
from qcdistort.services.geometry import (
    ComposedMap,
    LocalityLedger,
    TiledStage,
    TriangulatedMap,
    locality_ledger,
    triangulate_quads,
)

logger = logging.getLogger(__name__)

_DENSE_PER_SEGMENT = 64


def smootherstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def smootherstep_slope(t):
    inside = (t > 0.0) & (t < 1.0)
    t = np.clip(t, 0.0, 1.0)
    return np.where(inside, 30.0 * t * t * (1.0 - t) ** 2, 0.0)


# --- Bend map ---
@dataclass(frozen=True)
class BendMap:
    """(x, y) -> (x, y + a b(x) c(y)) with b a bump peaking at the middle of its support and c a plateau bump."""
    amplitude: float = 0.125
    b_support: tuple[float, float] = (0.125, 0.875)
    c_plateau: tuple[float, float] = (0.25, 0.75)
    c_support: tuple[float, float] = (0.0, 1.0)

    def b(self, x):
        lo, hi = self.b_support
        mid = 0.5 * (lo + hi)
        x = np.asarray(x, dtype=float)
        return np.where(x <= mid, smootherstep((x - lo) / (mid - lo)), smootherstep((hi - x) / (hi - mid)))

    def db(self, x):
        lo, hi = self.b_support
        mid = 0.5 * (lo + hi)
        x = np.asarray(x, dtype=float)
        return np.where(
            x <= mid,
            smootherstep_slope((x - lo) / (mid - lo)) / (mid - lo),
            -smootherstep_slope((hi - x) / (hi - mid)) / (hi - mid),
        )

    def c(self, y):
        (s0, s1), (p0, p1) = self.c_support, self.c_plateau
        y = np.asarray(y, dtype=float)
        return np.where(y <= p0, smootherstep((y - s0) / (p0 - s0)),
                        np.where(y >= p1, smootherstep((s1 - y) / (s1 - p1)), 1.0))

    def dc(self, y):
        (s0, s1), (p0, p1) = self.c_support, self.c_plateau
        y = np.asarray(y, dtype=float)
        return np.where(y <= p0, smootherstep_slope((y - s0) / (p0 - s0)) / (p0 - s0),
                        np.where(y >= p1, -smootherstep_slope((s1 - y) / (s1 - p1)) / (s1 - p1), 0.0))

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = pts.copy()
        out[:, 1] += self.amplitude * self.b(pts[:, 0]) * self.c(pts[:, 1])
        return out

    def jacobian_determinant(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return 1.0 + self.amplitude * self.b(pts[:, 0]) * self.dc(pts[:, 1])

    def horizontal(self, y: float) -> Callable[[np.ndarray], np.ndarray]:
        """Sampler of the image of [0, 1] x {y}."""
        return lambda t: self(np.column_stack([t, np.full(len(t), y)]))

    @property
    def is_flat(self) -> bool:
        return self.amplitude == 0.0


def bend_map(
    amplitude: float = 0.125,
    b_support: Sequence[float] = (0.125, 0.875),
    c_plateau: Sequence[float] = (0.25, 0.75),
    c_support: Sequence[float] = (0.0, 1.0),
    grid: int = 129,
) -> BendMap:
    b_lo, b_hi = (float(v) for v in b_support)
    s0, s1 = (float(v) for v in c_support)
    p0, p1 = (float(v) for v in c_plateau)
    if not 0.0 <= b_lo < b_hi <= 1.0:
        raise ValueError(f"b support must lie inside [0, 1], got {tuple(b_support)}")
    if not 0.0 <= s0 < p0 <= p1 < s1 <= 1.0:
        raise ValueError(f"c needs support [s0, s1] strictly containing its plateau, got {tuple(c_support)}, {tuple(c_plateau)}")
    if amplitude < 0:
        raise ValueError(f"Bend amplitude must be nonnegative, got {amplitude}")
    bend = BendMap(float(amplitude), (b_lo, b_hi), (p0, p1), (s0, s1))

    ticks = np.linspace(0.0, 1.0, grid)
    xx, yy = np.meshgrid(ticks, ticks)
    det = bend.jacobian_determinant(np.column_stack([xx.ravel(), yy.ravel()]))
    # ramp midpoints carry the steepest slope of c
    ramp = np.array([[0.5 * (b_lo + b_hi), 0.5 * (s0 + p0)], [0.5 * (b_lo + b_hi), 0.5 * (p1 + s1)]])
    worst = float(min(det.min(), bend.jacobian_determinant(ramp).min()))
    if worst <= 0:
        raise ValueError(f"Bend map folds: Jacobian determinant reaches {worst:.4g} on the check grid")
    logger.debug(f"Bend map amplitude {amplitude}: min Jacobian {worst:.4g}")
    return bend


# --- Polygonal tubes ---
def inscribe_polyline(curve: Callable[[np.ndarray], np.ndarray], n: int) -> np.ndarray:
    """Vertices z_k on the curve where x = k/n, for a curve that is a graph over x."""
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    t = np.linspace(0.0, 1.0, n * _DENSE_PER_SEGMENT + 1)
    dense = np.asarray(curve(t), dtype=float)
    if np.any(np.diff(dense[:, 0]) <= 0):
        raise ValueError("Curve is not a graph over x: sampled x is not strictly increasing")
    xs = np.arange(n + 1) / n
    if dense[0, 0] > 1e-12 or dense[-1, 0] < 1.0 - 1e-12:
        raise ValueError(f"Curve spans x in [{dense[0, 0]}, {dense[-1, 0]}], expected [0, 1]")
    return np.column_stack([xs, np.interp(xs, dense[:, 0], dense[:, 1])])


@dataclass(eq=False)
class PolyTube:
    gamma: np.ndarray
    offset: np.ndarray
    quads: np.ndarray
    angle_deviation: float

    @property
    def n(self) -> int:
        return len(self.quads)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _quad_angles(quads: np.ndarray) -> np.ndarray:
    prev = np.roll(quads, 1, axis=1) - quads
    nxt = np.roll(quads, -1, axis=1) - quads
    cos = (prev * nxt).sum(axis=-1) / (np.linalg.norm(prev, axis=-1) * np.linalg.norm(nxt, axis=-1))
    return np.arccos(np.clip(cos, -1.0, 1.0))


def offset_tube(gamma) -> PolyTube:
    """Offset each vertex along the bisecting normal by the length of the segment before it."""
    z = np.asarray(gamma, dtype=float)
    if len(z) < 3:
        raise ValueError("Polyline needs at least two segments")
    seg = np.diff(z, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    if np.any(lengths <= 0):
        raise ValueError(f"Polyline has a zero-length segment at {int(np.argmin(lengths))}")
    tangents = seg / lengths[:, None]
    turn = (tangents[:-1] * tangents[1:]).sum(axis=1)
    if np.any(turn <= 0):
        raise ValueError(f"Polyline turns by 90 degrees or more at vertex {int(np.argmin(turn)) + 1}")

    normals = np.column_stack([-tangents[:, 1], tangents[:, 0]])
    vertex_normals = np.vstack([normals[:1], _unit(normals[:-1] + normals[1:]), normals[-1:]])
    offset_len = np.concatenate([lengths[:1], lengths])
    w = z + offset_len[:, None] * vertex_normals

    if not shapely.LineString(w).is_simple:
        raise ValueError("Offset polyline self-intersects")
    quads = np.stack([z[:-1], z[1:], w[1:], w[:-1]], axis=1)
    edges = np.roll(quads, -1, axis=1) - quads
    nxt = np.roll(edges, -1, axis=1)
    cross = edges[..., 0] * nxt[..., 1] - edges[..., 1] * nxt[..., 0]
    bad = np.flatnonzero(~np.all(cross > 0, axis=1))
    if bad.size:
        raise ValueError(f"Offset tube folds at segment {int(bad[0])}")
    deviation = float(np.abs(_quad_angles(quads) - 0.5 * np.pi).max())
    return PolyTube(z, w, quads, deviation)


# --- Stages ---
@dataclass(eq=False)
class WiggleBaseMap:
    n: int
    tmap: TriangulatedMap
    tubes: list[PolyTube]
    bottoms: np.ndarray

    @property
    def tube_k(self) -> float:
        return self.tmap.max_dilatation("tube")

    @property
    def extension_k(self) -> float:
        return self.tmap.max_dilatation("complement")

    @property
    def angle_deviation(self) -> float:
        return max(t.angle_deviation for t in self.tubes) if self.tubes else 0.0


def wiggle_base_map(bend: BendMap, n: int) -> WiggleBaseMap:
    """PL map of Q sending the floor(n/4) rows [0, 1] x [1/4 + 2i/n, 1/4 + (2i+1)/n] onto bent tubes."""
    if n < 4:
        raise ValueError(f"Branching must be at least 4, got {n}")
    h = 1.0 / n
    bottoms = 0.25 + 2.0 * h * np.arange(n // 4)
    tubes = [offset_tube(inscribe_polyline(bend.horizontal(b), n)) for b in bottoms]
    xs = np.arange(n + 1) * h

    for i, tube in enumerate(tubes):
        ceiling = tubes[i + 1].gamma[:, 1] if i + 1 < len(tubes) else np.ones(n + 1)
        if np.any(tube.offset[:, 1] >= ceiling) or tube.gamma[:, 1].min() <= 0:
            raise ValueError(f"Tubes overlap for branching {n}: tube {i} reaches the next one")

    # rows of source quads bottom to top, each paired with its image rows
    src_rows = [np.zeros(n + 1)]
    img_rows = [np.column_stack([xs, np.zeros(n + 1)])]
    labels = []
    for b, tube in zip(bottoms, tubes):
        src_rows += [np.full(n + 1, b), np.full(n + 1, b + h)]
        img_rows += [tube.gamma, tube.offset]
    src_rows.append(np.ones(n + 1))
    img_rows.append(np.column_stack([xs, np.ones(n + 1)]))

    src_quads, img_quads = [], []
    for r in range(len(src_rows) - 1):
        label = "tube" if r % 2 == 1 else "complement"
        lo = np.column_stack([xs, src_rows[r]])
        hi = np.column_stack([xs, src_rows[r + 1]])
        src_quads.append(np.stack([lo[:-1], lo[1:], hi[1:], hi[:-1]], axis=1))
        ilo, ihi = img_rows[r], img_rows[r + 1]
        img_quads.append(np.stack([ilo[:-1], ilo[1:], ihi[1:], ihi[:-1]], axis=1))
        labels += [label] * n
    tri = triangulate_quads(np.concatenate(src_quads), strip=False)
    tmap = tri.map_to(np.concatenate(img_quads), labels)
    return WiggleBaseMap(n, tmap, tubes, bottoms)


@dataclass(eq=False)
class WiggleStage:
    index: int
    n: int
    base: WiggleBaseMap
    stage: TiledStage

    def ledger_row(self) -> dict:
        return WiggleStageRow(
            stage=self.index,
            n=self.n,
            tube_k=self.base.tube_k,
            extension_k=self.base.extension_k,
            angle_deviation=self.base.angle_deviation,
            rectangles=len(self.stage.bottoms),
        ).model_dump(mode="json")


def build_stage(family: NestedIntervalFamily, level: int, n: int, bend: BendMap) -> WiggleStage:
    """Stage `level`: the bend base map for n copied into every square of the level - 1 rectangles."""
    if not 1 <= level <= family.depth:
        raise ValueError(f"Level must lie in [1, {family.depth}], got {level}")
    if family.branching[level - 1] != n:
        raise ValueError(f"Family branching at level {level} is {family.branching[level - 1]}, not {n}")
    base = wiggle_base_map(bend, n)
    stage = TiledStage(level, base.tmap, family.bottoms(level - 1), float(family.length(level - 1)))
    logger.info(f"Wiggle stage {level}: n={n}, tube K={base.tube_k:.6f}, extension K={base.extension_k:.4f}")
    return WiggleStage(level, n, base, stage)


@dataclass(eq=False)
class WiggleComposition:
    composed: ComposedMap
    stages: list[WiggleStage]
    budget_sum: float
    constant: float
    constant_consistent: bool
    composed_max_k: float
    tube_composed_max_k: float
    budget_bound: float
    budget_pass: bool
    composed_ratio: float
    ratio_bound: float
    locality: LocalityLedger
    ratio_limit: float = 1.10
    locality_bound: int = 2

    @property
    def locality_within_bound(self) -> bool:
        return self.locality.max_nonconformal_stages <= self.locality_bound

    @property
    def ratio_within_limit(self) -> bool:
        return self.composed_ratio <= self.ratio_limit

    @property
    def ratio_within_bound(self) -> bool:
        return self.composed_ratio <= self.ratio_bound * (1 + 1e-9)

    def to_document(self) -> dict:
        return CompositionDocument(
            stages=[s.ledger_row() for s in self.stages],
            budget_sum=self.budget_sum,
            constant=self.constant,
            constant_consistent=self.constant_consistent,
            composed_max_k=self.composed_max_k,
            tube_composed_max_k=self.tube_composed_max_k,
            budget_bound=self.budget_bound,
            budget_pass=self.budget_pass,
            composed_ratio=self.composed_ratio,
            ratio_bound=self.ratio_bound,
            ratio_limit=self.ratio_limit,
            ratio_within_limit=self.ratio_within_limit,
            ratio_within_bound=self.ratio_within_bound,
            locality=self.locality.to_document(),
            locality_bound=self.locality_bound,
            locality_within_bound=self.locality_within_bound,
        ).model_dump(mode="json")


def _composition_samples(stages: Sequence[WiggleStage], grid: int = 129, per_row: int = 257) -> np.ndarray:
    ticks = (np.arange(grid) + 0.5) / grid
    xx, yy = np.meshgrid(ticks, ticks)
    pts = [np.column_stack([xx.ravel(), yy.ravel()])]
    deepest = stages[-1].stage
    rows = deepest.bottoms[np.unique(np.linspace(0, len(deepest.bottoms) - 1, 32).round().astype(int))]
    xs = (np.arange(per_row) + 0.5) / per_row
    for frac in (0.3, 0.5, 0.7):
        for b in rows:
            pts.append(np.column_stack([xs, np.full(per_row, b + frac * deepest.side)]))
    return np.concatenate(pts)


def composed_ratio_bound(stages: Sequence[WiggleStage]) -> float:
    """Largest composed K the stage ledgers allow, over the max K of the first stage.

    Stage j only acts inside the tubes of stages 1..j-1, so at any point the
    composed K is at most K_tube(1) ... K_tube(j-1) K(j) for the deepest active j.
    """
    stages = sorted(stages, key=lambda s: s.index)
    carried, reach = 1.0, 1.0
    for stage in stages:
        reach = max(reach, carried * stage.base.tmap.max_dilatation())
        carried *= stage.base.tube_k
    return reach / stages[0].base.tmap.max_dilatation()


def compose_stages(stages: Sequence[WiggleStage], points=None, ratio_limit: float = 1.10) -> WiggleComposition:
    """g_k = f_1 o ... o f_k with its dilatation budget ledger."""
    stages = sorted(stages, key=lambda s: s.index)
    composed = ComposedMap([s.stage for s in stages])
    pts = _composition_samples(stages) if points is None else np.atleast_2d(np.asarray(points, dtype=float))
    ev = composed.evaluate(pts)

    budget_sum = math.fsum(1.0 / s.n for s in stages)
    constants = [(s.base.tube_k - 1.0) * s.n for s in stages]
    constant = max(constants)
    consistent = all(c <= 2.0 * constants[0] + 1e-12 for c in constants)

    in_tubes = np.all(np.isin(ev.stage_labels, ["tube", "identity"]), axis=1)
    k = ev.dilatation
    tube_k = float(k[in_tubes].max()) if in_tubes.any() else 1.0
    bound = math.exp(constant * budget_sum)
    first = stages[0].base.tmap.max_dilatation()
    composition = WiggleComposition(
        composed=composed,
        stages=list(stages),
        budget_sum=budget_sum,
        constant=constant,
        constant_consistent=consistent,
        composed_max_k=float(k.max()),
        tube_composed_max_k=tube_k,
        budget_bound=bound,
        budget_pass=tube_k <= bound * (1 + 1e-9),
        composed_ratio=float(k.max()) / first,
        ratio_bound=composed_ratio_bound(stages),
        locality=locality_ledger(composed, pts),
        ratio_limit=ratio_limit,
    )
    if not composition.ratio_within_limit:
        logger.warning(f"Composed K is {composition.composed_ratio:.4f} times the first stage's, "
                       f"limit {ratio_limit}, stage ledgers allow {composition.ratio_bound:.4f}")
    if not composition.locality_within_bound:
        logger.warning(f"{composition.locality.max_nonconformal_stages} stages distort a single sample point")
    return composition


# --- Oscillation ---
@dataclass
class ScaleRow:
    exponent: int
    delta: float
    max_deviation: float
    flagged_windows: int
    length: float

    @property
    def flagged(self) -> bool:
        return self.flagged_windows > 0


@dataclass
class OscillationReport:
    """Per-scale chord deviations and inscribed lengths of one image curve.

    With `stage_scales` (the square side of each stage) the dyadic exponents are
    split into one band per stage, starting at ceil(log2(1 / side)); band growth
    is then the inscribed length gained when that stage is composed in, taken
    from `stage_lengths` (L of g_0, g_1, ..., g_k at the finest sampling).
    Without them, bands are runs of consecutive flagged scales.
    """
    y: float
    threshold: float
    rows: list[ScaleRow] = field(default_factory=list)
    stage_scales: list[float] = field(default_factory=list)
    stage_lengths: list[float] = field(default_factory=list)

    @property
    def flagged_exponents(self) -> list[int]:
        return [r.exponent for r in self.rows if r.flagged]

    def band_ranges(self) -> list[tuple[int, int]]:
        """Exponent range owned by each stage; empty ranges have hi < lo."""
        if not self.rows:
            return []
        starts = [max(0, math.ceil(math.log2(1.0 / s) - 1e-9)) for s in self.stage_scales]
        last = max(r.exponent for r in self.rows)
        return [(lo, starts[j + 1] - 1 if j + 1 < len(starts) else last) for j, lo in enumerate(starts)]

    @property
    def bands(self) -> list[tuple[int, int]]:
        flagged = self.flagged_exponents
        if self.stage_scales:
            out = []
            for lo, hi in self.band_ranges():
                inside = [e for e in flagged if lo <= e <= hi]
                if inside:
                    out.append((inside[0], inside[-1]))
            return out
        out: list[tuple[int, int]] = []
        for e in flagged:
            if out and out[-1][1] == e - 1:
                out[-1] = (out[-1][0], e)
            else:
                out.append((e, e))
        return out

    def growth(self) -> list[float]:
        """Per stage L(g_j) / L(g_(j-1)); without stage lengths, L(delta) / L(2 delta) at each flagged scale."""
        if len(self.stage_lengths) > 1:
            return [b / a for a, b in zip(self.stage_lengths, self.stage_lengths[1:])]
        by_exp = {r.exponent: r.length for r in self.rows}
        return [by_exp[e] / by_exp[e - 1] for e in self.flagged_exponents if e - 1 in by_exp]

    def to_document(self) -> dict:
        return OscillationDocument(
            y=self.y,
            threshold=self.threshold,
            rows=[(r.exponent, r.delta, r.max_deviation, r.flagged_windows, r.length) for r in self.rows],
            bands=self.bands,
            growth=self.growth(),
            stage_scales=self.stage_scales,
            stage_lengths=self.stage_lengths,
        ).model_dump(mode="json")


def _diameter(pts: np.ndarray) -> float:
    try:
        pts = pts[ConvexHull(pts).vertices]
    except (QhullError, ValueError):
        pts = np.vstack([pts[::max(1, len(pts) // 512)], pts[-1:]])
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((diff**2).sum(axis=-1)).max())


def _polyline_length(points: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def oscillation_report(
    evaluate: Callable[[np.ndarray], np.ndarray],
    y: float,
    exponents: Sequence[int],
    threshold: float = 0.1,
    samples_exponent: int = 14,
    stage_scales: Sequence[float] = (),
    stage_maps: Sequence[Callable[[np.ndarray], np.ndarray]] = (),
) -> OscillationReport:
    """Chord deviations of the image of [0, 1] x {y} in dyadic windows, and inscribed lengths L(delta).

    `stage_maps` are g_1, ..., g_k; their lengths at the finest sampling give the per-stage growth.
    """
    exponents = sorted(int(e) for e in exponents)
    if exponents and exponents[-1] > samples_exponent:
        raise ValueError(f"Scale 2^-{exponents[-1]} is finer than the sampling 2^-{samples_exponent}")
    if stage_maps and len(stage_maps) != len(stage_scales):
        raise ValueError(f"Got {len(stage_maps)} stage maps for {len(stage_scales)} stage scales")
    if any(not 0 < s <= 1 for s in stage_scales):
        raise ValueError(f"Stage scales must lie in (0, 1], got {list(stage_scales)}")
    n = 2**samples_exponent
    xs = np.arange(n + 1) / n
    line = np.column_stack([xs, np.full(n + 1, y)])
    image = evaluate(line)
    report = OscillationReport(y=float(y), threshold=threshold, stage_scales=[float(s) for s in stage_scales])
    if stage_maps:
        report.stage_lengths = [_polyline_length(line)] + [_polyline_length(g(line)) for g in stage_maps]
    for e in exponents:
        step = n >> e
        nodes = image[::step]
        length = _polyline_length(nodes)
        windows = image[np.arange(2**e)[:, None] * step + np.arange(step + 1)[None, :]]
        chord = windows[:, -1] - windows[:, 0]
        chord_len = np.hypot(chord[:, 0], chord[:, 1])
        rel = windows - windows[:, :1]
        cross = np.abs(rel[..., 0] * chord[:, None, 1] - rel[..., 1] * chord[:, None, 0]).max(axis=1)
        dev = cross / np.maximum(chord_len, 1e-300)
        worst, flagged = 0.0, 0
        # straight windows have deviation at rounding level
        for w in np.flatnonzero(dev > 1e-9 * np.maximum(chord_len, 1e-12)):
            normalized = float(dev[w]) / _diameter(windows[w])
            worst = max(worst, normalized)
            flagged += normalized >= threshold
        report.rows.append(ScaleRow(e, 2.0**-e, worst, int(flagged), length))
    return report


# --- Service ---
@dataclass(eq=False)
class WiggleConstruction:
    bend: BendMap
    branching: tuple[int, ...]
    family: NestedIntervalFamily
    stages: list[WiggleStage]
    composition: WiggleComposition
    h_report: HMeasureReport | None = None
    selection: BranchingSelection | None = None
    notes: list[str] = field(default_factory=list)


def default_branching(depth: int, base: int = 10) -> tuple[int, ...]:
    return tuple(base * 2**j for j in range(depth))


class WiggleService:
    def __init__(self, settings: Settings):
        cfg = settings.wiggle_config
        self.amplitude = float(cfg.get("amplitude", 0.125))
        self.b_support = tuple(cfg.get("b_support", (0.125, 0.875)))
        self.c_plateau = tuple(cfg.get("c_plateau", (0.25, 0.75)))
        self.c_support = tuple(cfg.get("c_support", (0.0, 1.0)))
        self.jacobian_grid = int(cfg.get("jacobian_grid", 129))
        self.branching_base = int(cfg.get("branching_base", 10))
        self.budget_limit = float(cfg.get("budget_limit", 0.2))
        self.budget_warning = float(cfg.get("budget_warning", 0.5))
        self.oscillation_threshold = float(cfg.get("oscillation_threshold", 0.1))
        self.min_band_growth = float(cfg.get("min_band_growth", 1.05))
        self.composed_ratio_limit = float(cfg.get("composed_ratio_limit", 1.10))
        self.selector_start = int(cfg.get("selector_start", 8))
        self.selector_max_checks = int(cfg.get("selector_max_checks", 10_000))
        self.max_mesh_branching = int(cfg.get("max_mesh_branching", 512))
        self.leaf_cap = int(settings.cantor_config.get("leaf_cap", 200_000))

    def bend(self, amplitude: float | None = None) -> BendMap:
        return bend_map(
            self.amplitude if amplitude is None else amplitude,
            self.b_support, self.c_plateau, self.c_support, self.jacobian_grid,
        )

    def select(self, gauge: str, depth: int) -> BranchingSelection:
        return select_branching(get_gauge(gauge), depth, self.budget_limit, self.selector_start, self.selector_max_checks)

    def construct(
        self,
        depth: int,
        branching: Sequence[int] | None = None,
        gauge: str | None = None,
        table_depth: int | None = None,
        amplitude: float | None = None,
    ) -> WiggleConstruction:
        if depth < 1:
            raise ValueError(f"depth must be at least 1, got {depth}")
        notes: list[str] = []
        selection = None
        h_report = None
        if branching is None and gauge is not None:
            selection = self.select(gauge, max(depth, table_depth or depth))
            h_report = selection.report
            branching = selection.branching
            if not selection.passed:
                notes.append(f"branching search for gauge {gauge} did not pass")
        elif branching is None:
            branching = default_branching(depth, self.branching_base)
        branching = tuple(int(n) for n in branching)
        if gauge is not None and h_report is None:
            h_report = h_measure_check(build_nested_family(branching, leaf_cap=0), get_gauge(gauge))

        usable = 0
        while usable < min(depth, len(branching)) and branching[usable] <= self.max_mesh_branching:
            usable += 1
        if usable < depth:
            notes.append(f"maps built for {usable} of {depth} generations; branching beyond "
                         f"{self.max_mesh_branching} is tabulated only")
        if usable == 0:
            raise ValueError(f"First branching value {branching[0]} exceeds the mesh limit {self.max_mesh_branching}")

        budget = math.fsum(1.0 / n for n in branching[:depth])
        if budget > self.budget_warning:
            notes.append(f"budget sum {budget:.4g} exceeds {self.budget_warning}; dilatation bound is weak")
            logger.warning(notes[-1])

        family = build_nested_family(branching[:usable], leaf_cap=self.leaf_cap)
        if family.materialized_depth < usable - 1:
            raise ValueError(f"Nested family materializes only {family.materialized_depth} generations "
                             f"within the leaf cap {self.leaf_cap}")
        bend = self.bend(amplitude)
        stages = [build_stage(family, level, branching[level - 1], bend) for level in range(1, usable + 1)]
        composition = compose_stages(stages, ratio_limit=self.composed_ratio_limit)
        return WiggleConstruction(bend, branching, family, stages, composition, h_report, selection, notes)

    def deep_point(self, family: NestedIntervalFamily, level: int) -> float:
        """Center of the middle interval at the given level."""
        level = min(level, family.materialized_depth)
        bottoms = family.bottoms(level)
        return float(bottoms[len(bottoms) // 2] + 0.5 * float(family.length(level)))

    def oscillation(self, built: WiggleConstruction, level: int, exponents: Sequence[int]) -> OscillationReport:
        """Oscillation of g_k along the line through the deep point of `level`, banded per stage."""
        stages = built.composition.stages
        prefixes = [ComposedMap([s.stage for s in stages[:j]]).apply for j in range(1, len(stages) + 1)]
        return oscillation_report(
            built.composition.composed.apply,
            self.deep_point(built.family, level),
            exponents,
            self.oscillation_threshold,
            stage_scales=[s.stage.side for s in stages],
            stage_maps=prefixes,
        )
