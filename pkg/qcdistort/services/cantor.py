"""Cantor sets E_alpha, nested interval families, gauges and regularity scans."""
import logging
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from qcdistort.models.schemas import CantorDocument, NestedFamilyDocument

logger = logging.getLogger(__name__)

_RATIONAL_RE = re.compile(r"^\s*(\d+)\s*(?:/\s*(\d+)\s*)?$")
_MAX_DOUBLING_EXPONENT = 1 << 16
_LOG2 = math.log(2.0)


def parse_rational(text: str) -> Fraction:
    """Parse a "p/q" (or integer) string exactly."""
    match = _RATIONAL_RE.match(str(text))
    if not match:
        raise ValueError(f"Rational parameters must be given as 'p/q', got {text!r}")
    den = int(match.group(2) or 1)
    if den == 0:
        raise ValueError(f"Zero denominator in {text!r}")
    return Fraction(int(match.group(1)), den)


@dataclass(frozen=True)
class RationalPower:
    """A positive number given exactly by value**root == base."""
    base: Fraction
    root: int = 1

    def __post_init__(self):
        object.__setattr__(self, "base", Fraction(self.base))
        if self.root < 1:
            raise ValueError(f"root must be a positive integer, got {self.root}")
        if self.base <= 0:
            raise ValueError(f"base must be positive, got {self.base}")

    def __float__(self) -> float:
        return float(self.base) ** (1.0 / self.root)

    @property
    def exact(self) -> Fraction | None:
        return self.base if self.root == 1 else None

    def __str__(self) -> str:
        return str(self.base) if self.root == 1 else f"({self.base})^(1/{self.root})"


def as_alpha(alpha) -> RationalPower | float:
    if isinstance(alpha, RationalPower):
        value = alpha
    elif isinstance(alpha, Fraction):
        value = RationalPower(alpha)
    elif isinstance(alpha, str):
        value = RationalPower(parse_rational(alpha))
    else:
        value = float(alpha)
    if not 0 < float(value) < 0.5:
        raise ValueError(f"alpha must lie in (0, 1/2), got {value}")
    return value


@dataclass(frozen=True)
class Interval:
    left: Fraction | float
    length: Fraction | float

    @property
    def right(self):
        return self.left + self.length

    def contains(self, other: "Interval") -> bool:
        return self.left <= other.left and other.right <= self.right

    def as_floats(self) -> tuple[float, float]:
        return float(self.left), float(self.length)


@dataclass
class NaturalMeasure:
    """Per-generation interval masses; children split the parent mass equally."""
    masses: list[list[Fraction | float]]

    def total(self, generation: int):
        values = self.masses[generation]
        if values and isinstance(values[0], Fraction):
            return sum(values, Fraction(0))
        return math.fsum(values)

    def weights(self, generation: int) -> np.ndarray:
        return np.array([float(m) for m in self.masses[generation]])


@dataclass
class CantorApprox:
    alpha: RationalPower | float
    generations: list[list[Interval]]
    exact: bool

    @property
    def depth(self) -> int:
        return len(self.generations) - 1

    def intervals(self, generation: int) -> np.ndarray:
        """(count, 2) float array of (left, length)."""
        return np.array([iv.as_floats() for iv in self.generations[generation]], dtype=float)

    def leaf_centers(self, generation: int | None = None) -> np.ndarray:
        arr = self.intervals(self.depth if generation is None else generation)
        return arr[:, 0] + 0.5 * arr[:, 1]

    def natural_measure(self) -> NaturalMeasure:
        masses = []
        for n, gen in enumerate(self.generations):
            mass = Fraction(1, 2**n) if self.exact else 0.5**n
            masses.append([mass] * len(gen))
        return NaturalMeasure(masses)

    def to_document(self) -> dict:
        return CantorDocument(
            alpha=str(self.alpha),
            exact=self.exact,
            generations=[
                [[str(iv.left), str(iv.length)] if self.exact else [float(iv.left), float(iv.length)]
                 for iv in gen]
                for gen in self.generations
            ],
        ).model_dump(mode="json")


def build_cantor(alpha, depth: int, exact: bool | None = None) -> CantorApprox:
    """Generations 0..depth of E_alpha: each interval keeps two children of relative length alpha."""
    a = as_alpha(alpha)
    if depth < 0:
        raise ValueError(f"depth must be nonnegative, got {depth}")
    rational = isinstance(a, RationalPower) and a.exact is not None
    if exact is None:
        exact = rational
    if exact and not rational:
        raise ValueError(f"Exact mode needs a rational alpha, got {a}")
    if exact:
        ratio = a.exact
        one = Fraction(1)
        zero = Fraction(0)
    else:
        ratio = float(a)
        one = 1.0
        zero = 0.0
    gap = (one - 2 * ratio) / 3
    second = one - gap - ratio

    generations = [[Interval(zero, one)]]
    for _ in range(depth):
        nxt = []
        for iv in generations[-1]:
            child_len = ratio * iv.length
            nxt.append(Interval(iv.left + gap * iv.length, child_len))
            nxt.append(Interval(iv.left + second * iv.length, child_len))
        generations.append(nxt)
    logger.debug(f"Built E_{a} to depth {depth} ({'exact' if exact else 'float'} mode)")
    return CantorApprox(alpha=a, generations=generations, exact=exact)


def cantor_dimension(alpha) -> float:
    """t = -log 2 / log alpha."""
    return -_LOG2 / math.log(float(as_alpha(alpha)))


def _integer_root(n: int, r: int) -> int | None:
    if r == 1:
        return n
    guess = round(n ** (1.0 / r)) if n.bit_length() < 1000 else round(math.exp(math.log(n) / r))
    for c in (guess - 1, guess, guess + 1):
        if c > 0 and c**r == n:
            return c
    return None


def integer_power(alpha, k: int, tol: float = 1e-9) -> int | None:
    """alpha**(-k) when it is an integer, else None."""
    a = as_alpha(alpha)
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if isinstance(a, RationalPower):
        value = (1 / a.base) ** k
        if value.denominator != 1:
            return None
        return _integer_root(value.numerator, a.root)
    value = a ** (-k)
    nearest = round(value)
    return int(nearest) if abs(value - nearest) <= tol * max(1.0, value) else None


def integer_power_check(alpha, kmax: int = 10, tol: float = 1e-9) -> int | None:
    """Smallest k in 1..kmax with alpha**(-k) an integer."""
    for k in range(1, kmax + 1):
        if integer_power(alpha, k, tol) is not None:
            return k
    return None


# --- Gauges ---
@dataclass(frozen=True)
class GaugeFunction:
    """A gauge h supplied through log h as a function of log t."""
    name: str
    log_h: Callable[[float], float]
    superlinear: bool = True

    def __call__(self, t: float) -> float:
        return math.exp(self.log_h(math.log(t)))

    def check_increasing(self, log_lo: float, log_hi: float, samples: int = 65) -> None:
        grid = np.linspace(log_lo, log_hi, samples)
        values = [self.log_h(float(v)) for v in grid]
        if any(b < a - 1e-12 for a, b in zip(values, values[1:])):
            raise ValueError(f"Gauge {self.name} is not increasing on [e^{log_lo:.3g}, e^{log_hi:.3g}]")


def _tlog(log_t: float) -> float:
    # t log(1/t) below 1/e, continued linearly above so the gauge stays increasing
    return log_t + math.log(-log_t) if log_t <= -1.0 else log_t


GAUGES = {
    "linear": GaugeFunction("linear", lambda log_t: log_t, superlinear=False),
    "sqrt": GaugeFunction("sqrt", lambda log_t: 0.5 * log_t),
    "tlog": GaugeFunction("tlog", _tlog),
}


def get_gauge(name: str) -> GaugeFunction:
    try:
        return GAUGES[name]
    except KeyError:
        raise ValueError(f"Unknown gauge: {name}. Supported: {', '.join(sorted(GAUGES))}") from None


# --- Nested families ---
@dataclass
class NestedIntervalFamily:
    branching: tuple[int, ...]
    child_counts: tuple[int, ...]
    log_lengths: tuple[float, ...]
    generations: list[list[Interval]]

    @property
    def depth(self) -> int:
        return len(self.branching)

    @property
    def materialized_depth(self) -> int:
        return len(self.generations) - 1

    def length(self, generation: int) -> Fraction:
        return Fraction(1, math.prod(self.branching[:generation]))

    def parent_count(self, generation: int) -> int:
        return math.prod(self.child_counts[:generation])

    def bottoms(self, generation: int) -> np.ndarray:
        if generation > self.materialized_depth:
            raise ValueError(
                f"Generation {generation} is not materialized (limit {self.materialized_depth})"
            )
        return np.array([float(iv.left) for iv in self.generations[generation]])

    def natural_measure(self) -> NaturalMeasure:
        masses = []
        for g, gen in enumerate(self.generations):
            masses.append([Fraction(1, self.parent_count(g))] * len(gen))
        return NaturalMeasure(masses)

    def to_document(self) -> dict:
        return NestedFamilyDocument(
            branching=[str(n) for n in self.branching],
            child_counts=[str(c) for c in self.child_counts],
            log_lengths=[float(v) for v in self.log_lengths],
            generations=[[[str(iv.left), str(iv.length)] for iv in gen] for gen in self.generations],
        ).model_dump(mode="json")


def build_nested_family(branching: Sequence[int], depth: int | None = None, leaf_cap: int = 200_000) -> NestedIntervalFamily:
    """Children of I: floor(n/4) intervals of length |I|/n at pitch 2|I|/n from the start of its middle half."""
    branching = tuple(int(n) for n in branching)
    if depth is None:
        depth = len(branching)
    if depth < 0 or depth > len(branching):
        raise ValueError(f"depth must lie in [0, {len(branching)}], got {depth}")
    branching = branching[:depth]
    for level, n in enumerate(branching, start=1):
        if n < 4:
            raise ValueError(f"Branching value {n} at level {level} must be at least 4")
    counts = tuple(n // 4 for n in branching)

    log_lengths = [0.0]
    for n in branching:
        log_lengths.append(log_lengths[-1] - math.log(n))

    generations = [[Interval(Fraction(0), Fraction(1))]]
    for n, c in zip(branching, counts):
        if len(generations[-1]) * c > leaf_cap:
            logger.info(f"Nested family materialized to generation {len(generations) - 1} (leaf cap {leaf_cap})")
            break
        nxt = []
        for iv in generations[-1]:
            child = iv.length / n
            start = iv.left + iv.length / 4
            nxt.extend(Interval(start + 2 * i * child, child) for i in range(c))
        generations.append(nxt)
    return NestedIntervalFamily(branching, counts, tuple(log_lengths), generations)


@dataclass
class HMeasureRow:
    generation: int
    parents: int
    children_per_parent: int
    lhs_log: float
    rhs_log: float
    passed: bool


@dataclass
class HMeasureReport:
    gauge: str
    rows: list[HMeasureRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.passed for r in self.rows)

    @property
    def per_generation(self) -> list[bool]:
        return [r.passed for r in self.rows]


def _level_passes(gauge: GaugeFunction, log_parent: float, n: int) -> tuple[float, float]:
    lhs = math.log(n // 4) + gauge.log_h(log_parent - math.log(n))
    rhs = _LOG2 + gauge.log_h(log_parent)
    return lhs, rhs


def h_measure_check(family: NestedIntervalFamily, gauge: GaugeFunction) -> HMeasureReport:
    """Per generation: does sum over children of h(|I_j|) reach 2 h(|I|) for every parent?"""
    if family.depth < 1:
        raise ValueError("h_measure_check needs a family of depth at least 1")
    gauge.check_increasing(family.log_lengths[-1], 0.0)
    report = HMeasureReport(gauge=gauge.name)
    for g in range(1, family.depth + 1):
        lhs, rhs = _level_passes(gauge, family.log_lengths[g - 1], family.branching[g - 1])
        report.rows.append(HMeasureRow(
            generation=g,
            parents=family.parent_count(g - 1),
            children_per_parent=family.child_counts[g - 1],
            lhs_log=lhs,
            rhs_log=rhs,
            passed=lhs >= rhs - 1e-12,
        ))
    return report


@dataclass
class BranchingSelection:
    gauge: str
    branching: tuple[int, ...]
    passed: bool
    budget_sum: float
    checks: int
    report: HMeasureReport | None = None


def select_branching(
    gauge: GaugeFunction,
    depth: int,
    budget: float = 0.2,
    start: int = 8,
    max_checks: int = 10_000,
) -> BranchingSelection:
    """Greedy doubling search for n_1..n_depth passing the h-measure check with sum 1/n_k <= budget."""
    if depth < 1:
        raise ValueError(f"depth must be at least 1, got {depth}")
    if start < 4:
        raise ValueError(f"start must be at least 4, got {start}")
    branching: list[int] = []
    log_parent = 0.0
    checks = 0

    def ok(n: int) -> bool:
        nonlocal checks
        checks += 1
        lhs, rhs = _level_passes(gauge, log_parent, n)
        return lhs >= rhs - 1e-12

    for k in range(1, depth + 1):
        floor_n = max(start, math.ceil(2**k / budget))
        base = start << max(0, math.ceil(math.log2(floor_n / start)))
        if ok(base):
            exponent = 0
        else:
            lo, hi = 0, 1
            while not ok(base << hi):
                lo, hi = hi, hi * 2
                if hi > _MAX_DOUBLING_EXPONENT or checks >= max_checks:
                    branching.append(base << lo)
                    logger.warning(f"Branching search for gauge {gauge.name} failed at level {k}")
                    return BranchingSelection(gauge.name, tuple(branching), False,
                                              math.fsum(1 / n for n in branching), checks)
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if ok(base << mid):
                    hi = mid
                else:
                    lo = mid
            exponent = hi
        n = base << exponent
        branching.append(n)
        log_parent -= math.log(n)
        logger.debug(f"Level {k}: n = 2^{n.bit_length() - 1}")

    family = build_nested_family(branching, leaf_cap=0)
    report = h_measure_check(family, gauge)
    total = math.fsum(1 / n for n in branching)
    return BranchingSelection(gauge.name, tuple(branching), report.passed and total <= budget, total, checks, report)


# --- Regularity ---
@dataclass
class AhlforsRow:
    center: tuple[float, ...]
    radius: float
    mass: float
    ratio: float


@dataclass
class AhlforsScan:
    d: float
    constant: float
    worst_center: tuple[float, ...]
    worst_radius: float
    worst_side: str
    rows: list[AhlforsRow] = field(default_factory=list)


def dyadic_scales(lo_exp: int, hi_exp: int) -> list[float]:
    """2^-hi_exp .. 2^-lo_exp, coarse first."""
    return [2.0 ** (-j) for j in range(lo_exp, hi_exp + 1)]


def ahlfors_scan(points, weights, d: float, scales: Sequence[float]) -> AhlforsScan:
    """Smallest C with r^d / C <= mass(B(x, r)) <= C r^d over atoms x and the given radii."""
    if d <= 0:
        raise ValueError(f"d must be positive, got {d}")
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    w = np.asarray(weights, dtype=float).reshape(-1)
    if len(pts) == 0 or len(w) != len(pts):
        raise ValueError("Need a nonempty point set with one weight per point")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("Weights must be nonnegative with positive total")
    diam = float(np.max(pts.max(axis=0) - pts.min(axis=0))) if pts.shape[1] == 1 else float(
        np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    radii = [float(r) for r in scales]
    if not radii or any(r <= 0 or r > diam * (1 + 1e-12) for r in radii):
        raise ValueError(f"Scales must lie in (0, {diam}]")

    rows: list[AhlforsRow] = []
    if pts.shape[1] == 1:
        order = np.argsort(pts[:, 0], kind="stable")
        xs = pts[order, 0]
        cum = np.concatenate([[0.0], np.cumsum(w[order])])
        for r in radii:
            hi = np.searchsorted(xs, xs + r, side="left")
            lo = np.searchsorted(xs, xs - r, side="right")
            masses = cum[hi] - cum[lo]
            rows.extend(AhlforsRow((float(x),), r, float(m), float(m / r**d)) for x, m in zip(xs, masses))
    else:
        tree = cKDTree(pts)
        for r in radii:
            hits = tree.query_ball_point(pts, r * (1 - 1e-12))
            masses = np.array([w[h].sum() for h in hits])
            rows.extend(AhlforsRow(tuple(map(float, x)), r, float(m), float(m / r**d)) for x, m in zip(pts, masses))

    ratios = np.array([row.ratio for row in rows])
    upper = int(np.argmax(ratios))
    lower = int(np.argmin(ratios))
    if ratios[upper] >= 1.0 / ratios[lower]:
        worst, side, constant = rows[upper], "upper", float(ratios[upper])
    else:
        worst, side, constant = rows[lower], "lower", float(1.0 / ratios[lower])
    logger.info(f"Ahlfors scan d={d}: C = {constant:.4g} ({side} bound at r={worst.radius:.3g})")
    return AhlforsScan(d, max(constant, 1.0), worst.center, worst.radius, side, rows)
