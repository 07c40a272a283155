"""Dimension estimates (box counting, mass-distribution exponents) and checks of the dimension-distortion bounds.

Box dimension stands in for Hausdorff dimension throughout; the sets measured
here are self-similar or images of self-similar sets under PL maps.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from qcdistort.config import Settings
from qcdistort.models.schemas import (
    BoundsDocument,
    BoxCountDocument,
    CheckDocument,
    CorollaryDocument,
    ExpansionDocument,
    MassCertificateDocument,
)

logger = logging.getLogger(__name__)

_MAX_EXPONENT = 40

PASS = "pass"
FAIL = "fail"
INCONCLUSIVE = "inconclusive"


# --- Box counting ---
@dataclass
class BoxCountResult:
    exponents: list[int]
    counts: list[int]
    slope: float
    intercept: float
    residual: float
    rms: float
    confidence: tuple[float, float]
    level: float
    estimate: float | None
    monotone: bool = True

    @property
    def scales(self) -> list[float]:
        return [2.0**-e for e in self.exponents]

    def to_document(self) -> dict:
        return BoxCountDocument(
            exponents=[int(e) for e in self.exponents],
            counts=[int(c) for c in self.counts],
            slope=self.slope,
            intercept=self.intercept,
            residual=self.residual,
            rms=self.rms,
            confidence=self.confidence,
            level=self.level,
            estimate=self.estimate,
            monotone=bool(self.monotone),
        ).model_dump(mode="json")

    @classmethod
    def from_document(cls, doc: dict) -> "BoxCountResult":
        estimate = doc.get("estimate")
        return cls(
            exponents=[int(e) for e in doc["exponents"]],
            counts=[int(c) for c in doc["counts"]],
            slope=float(doc["slope"]),
            intercept=float(doc["intercept"]),
            residual=float(doc["residual"]),
            rms=float(doc["rms"]),
            confidence=tuple(float(c) for c in doc["confidence"]),
            level=float(doc["level"]),
            estimate=None if estimate is None else float(estimate),
            monotone=bool(doc.get("monotone", True)),
        )


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("Box counting needs a nonempty (n, d) point array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("Box counting needs a bounded set: found non-finite coordinates")
    return pts


def densify_polyline(vertices, spacing: float) -> np.ndarray:
    """Points along a polyline no more than `spacing` apart."""
    v = np.asarray(vertices, dtype=float)
    seg = np.diff(v, axis=0)
    steps = np.maximum(1, np.ceil(np.linalg.norm(seg, axis=1) / spacing).astype(int))
    parts = [v[i] + np.outer(np.arange(s) / s, seg[i]) for i, s in enumerate(steps)]
    return np.vstack(parts + [v[-1:]])


def box_counts(points, exponent: int, offsets: int = 4) -> int:
    """Fewest occupied boxes of side 2^-exponent over `offsets` shifted grids."""
    pts = _as_points(points)
    side = 2.0**-exponent
    best = None
    for j in range(offsets):
        shift = side * j / offsets
        cells = np.floor((pts + shift) / side).astype(np.int64)
        count = len(np.unique(cells, axis=0))
        best = count if best is None else min(best, count)
    return int(best)


def default_window(points, offsets: int = 4) -> tuple[int, int]:
    """Drop the top octave below the set's extent and stop two octaves before counts saturate."""
    pts = _as_points(points)
    extent = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    if extent <= 0:
        raise ValueError("Box counting window is degenerate: the set is a single point")
    top = math.ceil(math.log2(1.0 / extent)) + 1
    saturation = len(np.unique(pts, axis=0)) / 2
    e = top
    while e < _MAX_EXPONENT and box_counts(pts, e, offsets) < saturation:
        e += 1
    return top, e - 2


def box_dimension(
    points,
    window: tuple[int, int] | None = None,
    offsets: int = 4,
    min_scales: int = 4,
    residual_limit: float = 0.1,
    confidence: float = 0.95,
) -> BoxCountResult:
    """Slope of log2 counts against log2(1/side) over dyadic sides 2^-lo .. 2^-hi."""
    pts = _as_points(points)
    lo, hi = window if window is not None else default_window(pts, offsets)
    exponents = list(range(int(lo), int(hi) + 1))
    if len(exponents) < min_scales:
        raise ValueError(f"Box counting window 2^-{lo}..2^-{hi} has {len(exponents)} scales, need {min_scales}")
    counts = [box_counts(pts, e, offsets) for e in exponents]
    monotone = all(b >= a for a, b in zip(counts, counts[1:]))
    if not monotone:
        logger.warning(f"Box counts are not monotone over window {lo}..{hi}: {counts}")

    x = np.array(exponents, dtype=float)
    y = np.log2(np.array(counts, dtype=float))
    fit = stats.linregress(x, y)
    rms = float(np.sqrt(np.mean((y - (fit.intercept + fit.slope * x)) ** 2)))
    stderr = float(fit.stderr) if np.isfinite(fit.stderr) else 0.0
    half = float(stats.t.ppf(0.5 + confidence / 2.0, len(x) - 2)) * stderr
    estimate = float(fit.slope) if stderr <= residual_limit else None
    if estimate is None:
        logger.warning(f"Box dimension fit residual {stderr:.3g} exceeds {residual_limit}; no headline estimate")
    logger.debug(f"Box counting {lo}..{hi}: slope {fit.slope:.4f} +- {half:.4f}")
    return BoxCountResult(
        exponents=exponents,
        counts=counts,
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        residual=stderr,
        rms=rms,
        confidence=(float(fit.slope) - half, float(fit.slope) + half),
        level=confidence,
        estimate=estimate,
        monotone=monotone,
    )


# --- Mass distribution ---
@dataclass
class MassCertificate:
    s: float
    constant: float
    masses: np.ndarray
    diameters: np.ndarray
    flagged: list[int] = field(default_factory=list)

    def rows(self) -> list[list[float]]:
        ratios = self.masses / self.diameters**self.s
        return [[float(m), float(d), float(r)] for m, d, r in zip(self.masses, self.diameters, ratios)]

    def holds(self) -> bool:
        return bool(np.all(self.masses <= self.constant * self.diameters**self.s * (1 + 1e-9)))

    def to_document(self) -> dict:
        return MassCertificateDocument(
            s=self.s, C=self.constant, rows=len(self.masses), flagged_rows=[int(r) for r in self.flagged],
        ).model_dump(mode="json")


def mass_exponent(
    masses,
    diameters,
    root_mass: float = 1.0,
    root_diameter: float = math.sqrt(2.0),
    pitch: float = 1e-3,
    s_max: float = 8.0,
) -> MassCertificate:
    """Largest s with mu(Q) <= C diam(f(Q))^s on every row, C = root_mass / root_diameter^s.

    Masses and diameters are measured against the root square so that s is the
    exponent of a mass distribution normalized to the whole image.
    """
    mu = np.asarray(masses, dtype=float).reshape(-1)
    diam = np.asarray(diameters, dtype=float).reshape(-1)
    if len(mu) == 0 or len(mu) != len(diam):
        raise ValueError("Mass ledger must be nonempty with one diameter per mass")
    if root_mass <= 0 or root_diameter <= 0:
        raise ValueError("Root mass and diameter must be positive")
    flagged = [int(i) for i in np.flatnonzero(diam <= 0)]
    if flagged:
        logger.warning(f"Excluding {len(flagged)} ledger rows with zero image diameter")
    keep = diam > 0
    mu, diam = mu[keep], diam[keep]
    if len(mu) == 0:
        raise ValueError("Every ledger row has zero diameter")

    log_mu = np.log(mu / root_mass)
    log_d = np.log(diam / root_diameter)

    def admissible(s: float) -> bool:
        return bool(np.all(log_mu <= s * log_d + 1e-12))

    if not admissible(0.0):
        raise ValueError("A ledger row carries more mass than the root")
    lo, hi = 0.0, s_max
    if admissible(hi):
        lo = hi
    while hi - lo > pitch:
        mid = 0.5 * (lo + hi)
        if admissible(mid):
            lo = mid
        else:
            hi = mid
    return MassCertificate(lo, root_mass / root_diameter**lo, mu, diam, flagged)


# --- Checks ---
@dataclass
class Check:
    name: str
    value: float
    bound: float
    tol: float
    residual: float = 0.0
    status: str = PASS
    detail: str = ""

    def to_document(self) -> dict:
        return CheckDocument(
            name=self.name, value=self.value, bound=self.bound, tol=self.tol,
            residual=self.residual, status=self.status, detail=self.detail,
        ).model_dump(mode="json")


def _value(estimate) -> tuple[float, float, bool]:
    """(value, residual, withheld) for a BoxCountResult or a plain number."""
    if isinstance(estimate, BoxCountResult):
        return estimate.slope, estimate.residual, estimate.estimate is None
    return float(estimate), 0.0, False


def judge(name: str, value: float, bound: float, tol: float, residual: float, withheld: bool,
           upper: bool = True, detail: str = "") -> Check:
    ok = value <= bound + tol if upper else value >= bound - tol
    status = PASS if ok else FAIL
    if withheld or (status == PASS and residual > tol):
        status = INCONCLUSIVE
    return Check(name, value, bound, tol, residual, status, detail)


@dataclass
class BoundsReport:
    d: float
    horizontal_bound: float
    vertical_bound: float
    horizontal_inf: float
    vertical_inf: float
    checks: list[Check] = field(default_factory=list)
    quantifier: str = ""

    @property
    def status(self) -> str:
        return overall_status(self.checks)

    def to_document(self) -> dict:
        return BoundsDocument(
            d=self.d,
            horizontal_bound=self.horizontal_bound,
            vertical_bound=self.vertical_bound,
            horizontal_inf=self.horizontal_inf,
            vertical_inf=self.vertical_inf,
            checks=[c.to_document() for c in self.checks],
            quantifier=self.quantifier,
            status=self.status,
        ).model_dump(mode="json")


def overall_status(checks: Sequence[Check]) -> str:
    statuses = {c.status for c in checks}
    if FAIL in statuses:
        return FAIL
    if INCONCLUSIVE in statuses or not statuses:
        return INCONCLUSIVE
    return PASS


def _infimum(estimates) -> tuple[float, float, bool]:
    values = [_value(e) for e in estimates]
    if not values:
        raise ValueError("At least one fibre estimate is required")
    i = int(np.argmin([v[0] for v in values]))
    return values[i][0], max(v[1] for v in values), any(v[2] for v in values)


def verify_thm12(
    d: float,
    horizontal: Sequence,
    vertical: Sequence,
    tol_horizontal: float = 0.2,
    tol_vertical: float = 0.15,
    sharp_eps: float | None = None,
) -> BoundsReport:
    """inf over horizontal fibres <= 2/(d+1), inf over vertical fibres <= 2d/(d+1), and optionally the sharpness gap."""
    if not 0 < d <= 1:
        raise ValueError(f"d must lie in (0, 1], got {d}")
    h_bound = 2.0 / (d + 1.0)
    v_bound = 2.0 * d / (d + 1.0)
    h_inf, h_res, h_withheld = _infimum(horizontal)
    v_inf, v_res, v_withheld = _infimum(vertical)
    checks = [
        judge("horizontal_upper", h_inf, h_bound, tol_horizontal, h_res, h_withheld),
        judge("vertical_upper", v_inf, v_bound, tol_vertical, v_res, v_withheld),
    ]
    if sharp_eps is not None:
        checks.append(judge("horizontal_sharpness", h_inf, h_bound, sharp_eps, h_res, h_withheld, upper=False))
    quantifier = f"infimum over {len(horizontal)} sampled horizontal and {len(vertical)} sampled vertical fibres"
    report = BoundsReport(d, h_bound, v_bound, h_inf, v_inf, checks, quantifier)
    logger.info(f"Fibre bounds for d={d:.4g}: {report.status}")
    return report


@dataclass
class ExpansionReport:
    lhs: float
    rhs: float
    checks: list[Check] = field(default_factory=list)

    @property
    def status(self) -> str:
        return overall_status(self.checks)

    def to_document(self) -> dict:
        return ExpansionDocument(
            lhs=self.lhs,
            rhs=self.rhs,
            slack=self.rhs - self.lhs,
            checks=[c.to_document() for c in self.checks],
            status=self.status,
        ).model_dump(mode="json")


def verify_expansion(dim_e, dim_y, dim_product, fibers: Sequence, dim_image_product, tol: float = 0.06) -> ExpansionReport:
    """dim(E x Y) / dim E <= dim f(E x Y) / inf_y dim f(E x {y}), and dim(E x Y) = dim E + dim Y."""
    e, e_res, e_w = _value(dim_e)
    y, y_res, y_w = _value(dim_y)
    p, p_res, p_w = _value(dim_product)
    fp, fp_res, fp_w = _value(dim_image_product)
    f_inf, f_res, f_w = _infimum(fibers)
    if e <= 0 or f_inf <= 0:
        raise ValueError("Dimensions of E and of the fibre images must be positive")
    lhs, rhs = p / e, fp / f_inf
    residual = max(e_res, p_res, fp_res, f_res)
    checks = [
        judge("fiberwise_expansion", lhs, rhs, tol, residual, e_w or p_w or fp_w or f_w),
        Check("product_rule", p, e + y, tol, max(p_res, e_res, y_res),
              PASS if abs(p - (e + y)) <= tol else FAIL),
    ]
    if checks[1].status == PASS and (p_w or e_w or y_w or checks[1].residual > tol):
        checks[1].status = INCONCLUSIVE
    return ExpansionReport(lhs, rhs, checks)


@dataclass
class CorollaryReport:
    delta: float
    eps: float
    bound: float
    limit: float
    achieved: float | None = None
    tol: float = 0.05
    status: str = INCONCLUSIVE

    def to_document(self) -> dict:
        return CorollaryDocument(
            delta=self.delta, eps=self.eps, bound=self.bound, limit=self.limit,
            achieved=self.achieved, tol=self.tol, status=self.status,
        ).model_dump(mode="json")


def corollary_size(delta: float, eps: float, achieved=None, tol: float = 0.05) -> CorollaryReport:
    """Bound 2/delta - 1 - eps on the exceptional set, compared with an achieved estimate when given."""
    if delta <= 1:
        raise ValueError(f"delta must exceed 1, got {delta}")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    limit = 2.0 / delta - 1.0
    bound = limit - eps
    if bound <= 0:
        raise ValueError(f"2/delta - 1 - eps must be positive, got {bound:.6g}")
    report = CorollaryReport(delta, eps, bound, limit, tol=tol)
    if achieved is not None:
        value, residual, withheld = _value(achieved)
        report.achieved = value
        report.status = PASS if abs(value - limit) <= tol else FAIL
        if withheld or (report.status == PASS and residual > tol):
            report.status = INCONCLUSIVE
    return report


def translate_exception_bound(d: float, d_prime: float, D_prime: float, N: float, n: float) -> float:
    """min(d/d' D' - d, N - n) bounds the dimension of translates whose image dimension exceeds d'."""
    if d_prime <= 0:
        raise ValueError(f"d' must be positive, got {d_prime}")
    return min(d / d_prime * D_prime - d, N - n)


def verify_compression(dim_e, dim_fe, dim_x, dim_fx, tol: float = 0.05) -> Check:
    """dim f(E) / dim E <= dim f(X) / dim X."""
    e, e_res, e_w = _value(dim_e)
    fe, fe_res, fe_w = _value(dim_fe)
    x, x_res, x_w = _value(dim_x)
    fx, fx_res, fx_w = _value(dim_fx)
    if e <= 0 or x <= 0:
        raise ValueError("dim E and dim X must be positive")
    return judge("compression", fe / e, fx / x, tol, max(e_res, fe_res, x_res, fx_res), e_w or fe_w or x_w or fx_w)


def subset_fiber_bound(dim_f: float, d: float, eps: float) -> float:
    """2 dim F / (d + 1) - eps: vertical fibres over F subset E keep at least this dimension."""
    if not 0 <= dim_f <= d:
        raise ValueError(f"dim F must lie in [0, d={d}], got {dim_f}")
    if eps < 0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    return 2.0 * dim_f / (d + 1.0) - eps


class DimensionService:
    def __init__(self, settings: Settings):
        cfg = settings.dimension_config
        self.offsets = int(cfg.get("offsets", 4))
        self.min_scales = int(cfg.get("min_scales", 4))
        self.residual_limit = float(cfg.get("residual_limit", 0.1))
        self.confidence = float(cfg.get("confidence", 0.95))
        self.tol_exact = float(cfg.get("tol_exact", 0.05))
        self.tol_horizontal = float(cfg.get("tol_horizontal", 0.2))
        self.tol_vertical = float(cfg.get("tol_vertical", 0.15))
        self.tol_product = float(cfg.get("tol_product", 0.06))
        self.mass_pitch = float(cfg.get("mass_pitch", 1e-3))
        self.mass_s_max = float(cfg.get("mass_s_max", 8.0))

    def box_dimension(self, points, window: tuple[int, int] | None = None) -> BoxCountResult:
        return box_dimension(points, window, self.offsets, self.min_scales, self.residual_limit, self.confidence)

    def mass_exponent(self, masses, diameters, root_mass: float = 1.0, root_diameter: float = math.sqrt(2.0)) -> MassCertificate:
        return mass_exponent(masses, diameters, root_mass, root_diameter, self.mass_pitch, self.mass_s_max)

    def verify_thm12(self, d: float, horizontal: Sequence, vertical: Sequence, sharp_eps: float | None = None) -> BoundsReport:
        return verify_thm12(d, horizontal, vertical, self.tol_horizontal, self.tol_vertical, sharp_eps)
