import logging
from pathlib import Path

import numpy as np

from qcdistort.config import Settings
from qcdistort.dependencies import get_artifact_writer, get_dimension_service, get_renderer, get_tube_service
from qcdistort.exceptions import NonConvergenceError
from qcdistort.models.schemas import RunManifest, TubeRunConfig
from qcdistort.services.cantor import build_cantor, cantor_dimension
from qcdistort.services.dimension import FAIL, PASS, BoxCountResult
from qcdistort.services.geometry import circle_distortion
from qcdistort.services.tube import (
    diameter_ledger,
    exponent_limits,
    fiber_images,
    measure_c1,
    placed_tubes,
    separation_ledger,
    tube_params,
    tube_polygon,
    vertical_diameter_ledger,
)

logger = logging.getLogger(__name__)

MASS_AGREEMENT_TOL = 0.15
_VERTICAL_DEPTH = 12
_PRODUCT_SAMPLES = 4096
_PRODUCT_ROWS = 256
_CIRCLE_GRID = 4
_CIRCLE_RADIUS = 1e-4


def _gap_point(intervals: np.ndarray) -> float:
    """Middle of the widest gap between consecutive intervals: a fibre off the exceptional set."""
    order = np.argsort(intervals[:, 0])
    lefts, lengths = intervals[order, 0], intervals[order, 1]
    ends = lefts + lengths
    gaps = lefts[1:] - ends[:-1]
    if gaps.size == 0:
        return float(ends[0] + 0.5 * (1.0 - ends[0]))
    i = int(np.argmax(gaps))
    return float(ends[i] + 0.5 * gaps[i])


def _circle_rows(composed) -> list[list[float]]:
    """Metric distortion on small circles next to the Beltrami dilatation at the centre."""
    ticks = (np.arange(_CIRCLE_GRID) + 0.5) / _CIRCLE_GRID
    centers = np.array([(x, y) for y in ticks for x in ticks])
    local_k = composed.evaluate(centers).dilatation
    return [[float(c[0]), float(c[1]), _CIRCLE_RADIUS, circle_distortion(composed.apply, c, _CIRCLE_RADIUS), float(k)]
            for c, k in zip(centers, local_k)]


def _fiber_estimates(dims, fibers, writer, orientation: str) -> list[dict]:
    out = []
    for position, points in fibers:
        try:
            box = dims.box_dimension(points)
        except ValueError as e:
            writer.flag(f"{orientation} fiber at {position:.6g} skipped: {e}")
            continue
        out.append({"position": position, **box.to_document()})
    return out


def cmd_tube(config: TubeRunConfig, out_dir: Path, settings: Settings) -> RunManifest:
    params = tube_params(config.alpha, config.k)
    service = get_tube_service(settings)
    dims = get_dimension_service(settings)
    renderer = get_renderer(settings)
    writer = get_artifact_writer(out_dir, "tube", config.seed, config.model_dump(mode="json"), settings)
    with writer:
        if params.small_n:
            writer.flag(f"small parameters: N={params.N} < 64, constants are not in the asymptotic regime")
        if not params.bracket_holds:
            writer.flag(f"snake length M={params.M} is outside [N/2, N] for N={params.N}")

        writer.phase("construct")
        try:
            built = service.construct(config.alpha, config.k, config.generations, config.chamfer, config.resolution)
        except NonConvergenceError as e:
            writer.write_json("thinning_trace.json", {"error": str(e), "trace": e.trace})
            raise
        tube, thinned, base = built.tube, built.thinned, built.base

        writer.write_json("params.json", {
            "params": params.to_document(),
            "tube": tube.to_document(),
            "rounded_length": built.rounded_length.value,
            "rounded_status": built.rounded_length.status,
            "bracket": built.bracket.to_document(),
        })
        writer.write_json("thinning.json", thinned.to_document())
        writer.write_json("base_map.json", base.to_document())
        if not built.bracket.holds:
            writer.flag(f"rounded tube length {built.bracket.length:.6g} is outside its bracket")
        writer.check("thinning", PASS if abs(thinned.modulus - thinned.target) <= service.thinning_tol * thinned.target
                     else FAIL)

        writer.phase("render")
        cell_box = (-0.1, -0.1, params.cols + 0.1, params.rows + 0.1)
        grid = (params.cols, params.rows)
        writer.write_svg("tube_snake.svg", renderer.polygons([tube_polygon(tube, 1.0, 0.0)], cell_box, grid=grid))
        writer.write_svg("tube_rounded.svg", renderer.polygons([built.rounded], cell_box, grid=grid))
        writer.write_svg("tube_thinned.svg", renderer.polygons([thinned.polygon], cell_box, grid=grid))
        writer.write_svg("tubes_placed.svg", renderer.polygons(placed_tubes(thinned), (0.0, 0.0, 1.0, 1.0)))
        writer.write_svg("base_map.svg", renderer.triangulation(base.tmap, "image"))

        writer.phase("ledgers")
        dil_rows = [[0, label, k] for label, k in base.dilatation_ledger().items()]
        dil_rows += [[g.index, "stage", g.max_dilatation()] for g in built.generations]
        writer.write_csv("dilatation.csv", ["generation", "label", "max_k"], dil_rows)
        writer.write_csv("circle_distortion.csv", ["x", "y", "radius", "H", "K"], _circle_rows(built.composed))

        composed, cantor = built.composed, built.cantor
        horizontal, vertical = [], []
        for n in range(1, config.generations + 1):
            horizontal.append(diameter_ledger(composed, cantor, params, n, samples=service.boundary_samples,
                                              max_squares=service.max_ledger_squares))
            vertical.append(vertical_diameter_ledger(composed, cantor, params, n, samples=service.boundary_samples,
                                                     max_squares=service.max_ledger_squares))
        writer.write_csv(
            "diameters.csv",
            ["generation", "orientation", "position", "index", "mass", "diameter"],
            ([ledger.generation, ledger.orientation, ledger.position, *row]
             for ledger in horizontal + vertical for row in ledger.rows()),
        )
        separations = [separation_ledger(composed, cantor, params, n, service.fiber_samples)
                       for n in range(1, config.generations + 1)]
        writer.write_json("separation.json", {"generations": [s.to_document() for s in separations]})

        writer.phase("exponents")
        c1 = measure_c1(horizontal, params)
        report = exponent_limits(params.alpha, params.k, c1)
        masses = np.concatenate([ledger.masses for ledger in horizontal])
        diameters = np.concatenate([ledger.diameters for ledger in horizontal])
        certificate = dims.mass_exponent(masses, diameters)
        gap = abs(certificate.s - report.s)
        mass_status = PASS if gap <= MASS_AGREEMENT_TOL else FAIL
        writer.write_json("exponents.json", {
            **report.to_document(),
            "mass_check": {**certificate.to_document(), "formula_s": report.s, "difference": gap,
                           "tol": MASS_AGREEMENT_TOL, "status": mass_status},
            "C2": min(s.c2 for s in separations),
        })
        writer.check("mass_exponent", mass_status)

        writer.phase("fibers")
        t = cantor_dimension(params.alpha)
        deep = build_cantor(params.alpha, max(config.generations * params.k, _VERTICAL_DEPTH), exact=False)
        images = fiber_images(composed, deep, params, config.generations, service.fiber_samples,
                              count=config.fiber_count)
        h_est = _fiber_estimates(dims, images.horizontal, writer, "horizontal")
        v_est = _fiber_estimates(dims, images.vertical, writer, "vertical")
        writer.write_json("fibers.json", {"d": t, "generation": images.generation,
                                          "horizontal": h_est, "vertical": v_est})

        level = config.generations * params.k
        xs = np.linspace(0.0, 1.0, _PRODUCT_SAMPLES)
        ys = deep.leaf_centers(level)
        ys = ys[np.unique(np.linspace(0, len(ys) - 1, min(len(ys), _PRODUCT_ROWS)).round().astype(int))]
        product = composed.apply(np.column_stack([np.tile(xs, len(ys)), np.repeat(ys, len(xs))]))
        generic_y = _gap_point(cantor.intervals(level))
        generic = composed.apply(np.column_stack([xs, np.full(len(xs), generic_y)]))
        for name, points, position in (("product.json", product, None), ("generic_fiber.json", generic, generic_y)):
            try:
                writer.write_json(name, {"position": position, **dims.box_dimension(points).to_document()})
            except ValueError as e:
                writer.flag(f"{name} estimate skipped: {e}")
        curves = [pts for _, pts in images.horizontal]
        lo, hi = np.vstack(curves).min(axis=0), np.vstack(curves).max(axis=0)
        pad = 0.02 * float(max(hi - lo))
        writer.write_svg("image_curves.svg", renderer.curves(
            curves, (float(lo[0] - pad), float(lo[1] - pad), float(hi[0] + pad), float(hi[1] + pad)), frame=False))

        if h_est and v_est:
            bounds = dims.verify_thm12(
                t,
                [BoxCountResult.from_document(e) for e in h_est],
                [BoxCountResult.from_document(e) for e in v_est],
                sharp_eps=config.sharp_eps,
            )
            writer.write_json("bounds.json", bounds.to_document())
            writer.check("fiber_bounds", bounds.status)
        else:
            writer.flag("no fiber estimates survived; fiber bounds not checked")
        logger.info(f"Tube run alpha={params.alpha} k={params.k}: s={report.s:.4f}, S={report.S:.4f}, C1={c1:.4g}")
    return writer.manifest
