import logging
from pathlib import Path

import numpy as np

from qcdistort.config import Settings
from qcdistort.dependencies import get_artifact_writer, get_renderer, get_wiggle_service
from qcdistort.models.schemas import RunManifest, WiggleRunConfig
from qcdistort.services.cantor import GAUGES, build_nested_family, get_gauge, h_measure_check
from qcdistort.services.dimension import FAIL, PASS
from qcdistort.services.wiggle import default_branching

logger = logging.getLogger(__name__)

WARNING = "warning"
_MAX_RENDERED_PIECES = 20_000
_CURVE_SAMPLES = 4097


def _resolve_branching(config: WiggleRunConfig, base: int):
    if config.branching == "auto":
        if config.gauge is None:
            raise ValueError("Automatic branching needs a gauge name")
        return None
    if config.branching is None:
        return default_branching(config.depth, base)
    if len(config.branching) < config.depth:
        raise ValueError(f"Branching list has {len(config.branching)} values, depth {config.depth} needs more")
    return tuple(config.branching)


def cmd_wiggle(config: WiggleRunConfig, out_dir: Path, settings: Settings) -> RunManifest:
    service = get_wiggle_service(settings)
    renderer = get_renderer(settings)
    branching = _resolve_branching(config, service.branching_base)
    if config.gauge is not None:
        get_gauge(config.gauge)
    lo_exp, hi_exp = config.oscillation_exponents
    if not 0 <= lo_exp <= hi_exp:
        raise ValueError(f"Oscillation exponents must satisfy 0 <= lo <= hi, got {config.oscillation_exponents}")

    writer = get_artifact_writer(out_dir, "wiggle", config.seed, config.model_dump(mode="json"), settings)
    with writer:
        writer.phase("construct")
        built = service.construct(config.depth, branching, config.gauge, config.table_depth, config.amplitude)
        for note in built.notes:
            writer.flag(note)
        comp = built.composition
        writer.write_json("branching.json", {
            "branching": list(built.branching),
            "gauge": config.gauge,
            "selected": built.selection is not None,
            "selection_passed": None if built.selection is None else built.selection.passed,
            "selection_checks": None if built.selection is None else built.selection.checks,
            "mesh_generations": len(built.stages),
        })

        writer.phase("budget")
        writer.write_json("composition.json", comp.to_document())
        writer.write_csv(
            "budget.csv",
            ["stage", "n", "inverse_n", "tube_k", "extension_k", "angle_deviation", "stage_bound", "rectangles"],
            ([r["stage"], r["n"], 1.0 / r["n"], r["tube_k"], r["extension_k"], r["angle_deviation"],
              1.0 + comp.constant / r["n"], r["rectangles"]] for r in (s.ledger_row() for s in built.stages)),
        )
        if comp.budget_sum > service.budget_warning:
            writer.check("dilatation_budget", WARNING)
        else:
            writer.check("dilatation_budget", PASS if comp.budget_pass else FAIL)
        writer.check("stage_constant", PASS if comp.constant_consistent else FAIL)
        if comp.ratio_within_limit:
            writer.check("composed_ratio", PASS)
        else:
            writer.check("composed_ratio", WARNING if comp.ratio_within_bound else FAIL)
            writer.flag(f"composed K is {comp.composed_ratio:.4f} times the first stage's "
                        f"(limit {comp.ratio_limit}); stage ledgers allow {comp.ratio_bound:.4f}")

        writer.phase("h_measure")
        gauges = [config.gauge] if config.gauge else sorted(n for n, g in GAUGES.items() if g.superlinear)
        table_family = build_nested_family(built.branching, leaf_cap=0)
        h_rows = []
        for name in gauges:
            report = built.h_report if name == config.gauge and built.h_report is not None else \
                h_measure_check(table_family, get_gauge(name))
            h_rows += [[name, r.generation, r.parents, r.children_per_parent, r.lhs_log, r.rhs_log, r.passed]
                       for r in report.rows[:config.table_depth]]
            if name == config.gauge:
                writer.check("h_measure", PASS if all(r.passed for r in report.rows[:config.table_depth]) else FAIL)
        writer.write_csv("h_measure.csv",
                         ["gauge", "generation", "parents", "children_per_parent", "lhs_log", "rhs_log", "passed"],
                         h_rows)

        writer.phase("oscillation")
        composed = comp.composed
        exponents = list(range(lo_exp, hi_exp + 1))
        curves = []
        deepest = None
        for level in range(1, len(built.stages) + 1):
            report = service.oscillation(built, level, exponents)
            writer.write_json(f"oscillation_{level}.json", report.to_document())
            xs = np.linspace(0.0, 1.0, _CURVE_SAMPLES)
            curves.append(composed.apply(np.column_stack([xs, np.full(len(xs), report.y)])))
            deepest = report
        if built.bend.is_flat:
            writer.check("oscillation", PASS if not deepest.flagged_exponents else FAIL)
        else:
            growth_ok = all(g >= service.min_band_growth for g in deepest.growth())
            enough = len(deepest.bands) >= len(built.stages)
            writer.check("oscillation", PASS if growth_ok and enough else FAIL)

        writer.phase("render")
        for stage in built.stages:
            tmap = stage.base.tmap
            if tmap.n_pieces <= _MAX_RENDERED_PIECES:
                drawing = renderer.triangulation(tmap, "image")
            else:
                lines = [t.gamma for t in stage.base.tubes] + [t.offset for t in stage.base.tubes]
                drawing = renderer.curves(lines)
            writer.write_svg(f"stage_{stage.index}.svg", drawing)
        pts = np.vstack(curves)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = 0.02 * float(max(hi - lo))
        writer.write_svg("image_curves.svg", renderer.curves(
            curves, (float(lo[0] - pad), float(lo[1] - pad), float(hi[0] + pad), float(hi[1] + pad)), frame=False))
        logger.info(f"Wiggle run: branching {list(built.branching)[:config.depth]}, budget {comp.budget_sum:.4g}, "
                    f"composed K {comp.composed_max_k:.4f}")
    return writer.manifest
