import logging
from collections import defaultdict
from pathlib import Path

from qcdistort.config import Settings
from qcdistort.dependencies import get_artifact_writer, get_dimension_service
from qcdistort.models.schemas import CantorRunConfig, RunManifest
from qcdistort.services.cantor import ahlfors_scan, build_cantor, cantor_dimension, dyadic_scales, integer_power_check
from qcdistort.services.dimension import FAIL, INCONCLUSIVE, PASS

logger = logging.getLogger(__name__)

_SCAN_DEPTH = 12


def _regularity_document(scan) -> dict:
    by_radius = defaultdict(list)
    for row in scan.rows:
        by_radius[row.radius].append(row.ratio)
    return {
        "d": scan.d,
        "constant": scan.constant,
        "worst_center": list(scan.worst_center),
        "worst_radius": scan.worst_radius,
        "worst_side": scan.worst_side,
        "scales": [[r, min(v), max(v)] for r, v in sorted(by_radius.items(), reverse=True)],
    }


def cmd_cantor(config: CantorRunConfig, out_dir: Path, settings: Settings) -> RunManifest:
    cfg = settings.cantor_config
    dims = get_dimension_service(settings)
    writer = get_artifact_writer(out_dir, "cantor", config.seed, config.model_dump(mode="json"), settings)
    with writer:
        writer.phase("build")
        exact = config.depth <= int(cfg.get("exact_depth_limit", 16))
        cantor = build_cantor(config.alpha, config.depth, exact=exact)
        t = cantor_dimension(cantor.alpha)
        k = integer_power_check(cantor.alpha, int(cfg.get("integer_power_kmax", 10)),
                                float(cfg.get("float_tolerance", 1e-9)))
        doc = cantor.to_document()
        doc.update({"depth": cantor.depth, "dimension": t, "integer_power_k": k})
        writer.write_json("intervals.json", doc)

        leaves = cantor.intervals(cantor.depth)
        masses = cantor.natural_measure().weights(cantor.depth)
        writer.write_csv("measure.csv", ["index", "left", "length", "mass"],
                         ([i, float(left), float(length), float(m)] for i, ((left, length), m) in
                          enumerate(zip(leaves, masses))))

        writer.phase("regularity")
        scan_depth = min(cantor.depth, _SCAN_DEPTH)
        centers = cantor.leaf_centers(scan_depth)
        finest = float(cantor.alpha) ** scan_depth
        extent = float(centers.max() - centers.min())
        scales = [r for r in dyadic_scales(1, config.ahlfors_scales) if finest <= r <= extent]
        if len(scales) >= 2:
            scan = ahlfors_scan(centers, cantor.natural_measure().weights(scan_depth), t, scales)
            writer.write_json("regularity.json", _regularity_document(scan))
        else:
            writer.flag(f"depth {cantor.depth} leaves fewer than two scales for the regularity scan")
            writer.write_json("regularity.json", {"d": t, "constant": None, "scales": []})

        writer.phase("box_count")
        tol = dims.tol_exact
        try:
            box = dims.box_dimension(cantor.leaf_centers(), config.box_window)
        except ValueError as e:
            writer.flag(f"box counting skipped: {e}")
            writer.write_json("box_count.json", {"estimate": None, "reason": str(e), "expected": t})
            writer.check("box_dimension", INCONCLUSIVE)
        else:
            if box.estimate is None:
                status = INCONCLUSIVE
            else:
                status = PASS if abs(box.slope - t) <= tol else FAIL
            writer.write_json("box_count.json", {**box.to_document(), "expected": t, "tol": tol, "status": status})
            writer.check("box_dimension", status)
            logger.info(f"E_{cantor.alpha} depth {cantor.depth}: box slope {box.slope:.4f}, expected {t:.4f}")
    return writer.manifest
