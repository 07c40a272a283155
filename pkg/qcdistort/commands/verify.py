import logging
from pathlib import Path

from qcdistort.config import Settings
from qcdistort.dependencies import get_artifact_writer, get_dimension_service, get_modulus_solver
from qcdistort.exceptions import InputError
from qcdistort.models.schemas import RunManifest, VerifyRunConfig
from qcdistort.services.artifacts import load_manifest, parse_float, read_json_artifact
from qcdistort.services.dimension import (
    FAIL,
    INCONCLUSIVE,
    PASS,
    BoxCountResult,
    Check,
    corollary_size,
    judge,
    overall_status,
    subset_fiber_bound,
    translate_exception_bound,
    verify_compression,
    verify_expansion,
)
from qcdistort.services.modulus import property_suite

logger = logging.getLogger(__name__)


def _artifact(run_dir: Path, manifest: RunManifest, name: str):
    if name not in {a.name for a in manifest.artifacts}:
        return None
    return read_json_artifact(run_dir, name)


def _tube_checks(run_dir: Path, manifest: RunManifest, dims, eps: float) -> list[Check]:
    fibers = _artifact(run_dir, manifest, "fibers.json")
    if fibers is None or not fibers["horizontal"] or not fibers["vertical"]:
        return [Check("fiber_bounds", 0.0, 0.0, 0.0, status=INCONCLUSIVE, detail="no stored fibre estimates")]
    t = float(fibers["d"])
    horizontal = [BoxCountResult.from_document(e) for e in fibers["horizontal"]]
    vertical = [BoxCountResult.from_document(e) for e in fibers["vertical"]]
    sharp_eps = manifest.config.get("sharp_eps")
    report = dims.verify_thm12(t, horizontal, vertical, sharp_eps=sharp_eps)
    checks = list(report.checks)

    h_inf = report.horizontal_inf
    h_res = max(b.residual for b in horizontal)
    v_res = max(b.residual for b in vertical)
    lower = subset_fiber_bound(t, t, eps)
    checks.append(judge("vertical_lower", report.vertical_inf, lower, dims.tol_vertical, v_res,
                        any(b.estimate is None for b in vertical), upper=False,
                        detail=f"2 dim F/(d+1) - eps with F = E, eps = {eps}"))

    if h_inf > 1.0:
        # translates E + y of the unit segment whose image exceeds h_inf form a copy of E
        bound = translate_exception_bound(1.0, h_inf, 2.0, 2.0, 1.0)
        checks.append(judge("exceptional_translates", t, bound, dims.tol_horizontal, h_res, False,
                            detail="dim E against min(d/d' D' - d, N - n)"))
        try:
            corollary = corollary_size(h_inf, eps, achieved=t, tol=dims.tol_horizontal)
        except ValueError as e:
            checks.append(Check("corollary_consistency", t, 0.0, dims.tol_horizontal, h_res, INCONCLUSIVE,
                                detail=str(e)))
        else:
            checks.append(Check("corollary_consistency", t, corollary.limit, dims.tol_horizontal, h_res,
                                corollary.status, detail=f"2/delta - 1 at delta = {h_inf:.4g}"))
    else:
        checks.append(Check("exceptional_translates", t, 0.0, dims.tol_horizontal, h_res, INCONCLUSIVE,
                            detail=f"horizontal fibre estimate {h_inf:.4g} does not exceed 1"))

    product = _artifact(run_dir, manifest, "product.json")
    if product is not None:
        expansion = verify_expansion(1.0, t, 1.0 + t, horizontal, BoxCountResult.from_document(product),
                                     dims.tol_product)
        checks.extend(expansion.checks)
    generic = _artifact(run_dir, manifest, "generic_fiber.json")
    if generic is not None:
        checks.append(verify_compression(1.0, BoxCountResult.from_document(generic), 2.0, 2.0, dims.tol_exact))
    return checks


def _cantor_checks(run_dir: Path, manifest: RunManifest, dims) -> list[Check]:
    box = _artifact(run_dir, manifest, "box_count.json")
    if box is None or "slope" not in box:
        return [Check("box_dimension", 0.0, 0.0, dims.tol_exact, status=INCONCLUSIVE, detail="no box count")]
    result = BoxCountResult.from_document(box)
    expected = float(box["expected"])
    status = PASS if abs(result.slope - expected) <= dims.tol_exact else FAIL
    if result.estimate is None:
        status = INCONCLUSIVE
    return [Check("box_dimension", result.slope, expected, dims.tol_exact, result.residual, status)]


def _modulus_checks(run_dir: Path, manifest: RunManifest) -> list[Check]:
    oracle = _artifact(run_dir, manifest, "oracle.json")
    if oracle is None:
        return []
    return [Check("product_oracle", parse_float(oracle["relative_error"]), 0.0, float(oracle["tol"]),
                  status=oracle["status"], detail=f"exact {oracle['exact']}")]


def _wiggle_checks(run_dir: Path, manifest: RunManifest) -> list[Check]:
    comp = _artifact(run_dir, manifest, "composition.json")
    if comp is None:
        return []
    return [Check("dilatation_budget", float(comp["tube_composed_max_k"]), float(comp["budget_bound"]), 0.0,
                  status=manifest.checks.get("dilatation_budget", PASS if comp["budget_pass"] else FAIL),
                  detail=f"sum 1/n = {comp['budget_sum']:.4g}")]


def _table(rows: list[tuple[str, Check]]) -> str:
    header = f"{'source':<24} {'check':<26} {'status':<13} {'value':>12} {'bound':>12}"
    lines = [header, "-" * len(header)]
    for source, c in rows:
        lines.append(f"{source:<24} {c.name:<26} {c.status:<13} {c.value:>12.6g} {c.bound:>12.6g}")
    return "\n".join(lines) + "\n"


def cmd_verify(config: VerifyRunConfig, out_dir: Path, settings: Settings) -> RunManifest:
    dims = get_dimension_service(settings)
    runs = []
    for entry in config.runs:
        run_dir = Path(entry)
        manifest = load_manifest(run_dir)
        if any(f.startswith("aborted") for f in manifest.flags):
            raise InputError(f"Run {run_dir} did not complete; refusing to verify it")
        runs.append((run_dir, manifest))

    writer = get_artifact_writer(out_dir, "verify", config.seed, config.model_dump(mode="json"), settings)
    with writer:
        writer.phase("runs")
        rows: list[tuple[str, Check]] = []
        sources = []
        for run_dir, manifest in runs:
            source = f"{manifest.command}:{run_dir.name}"
            if manifest.command == "tube":
                checks = _tube_checks(run_dir, manifest, dims, config.eps)
            elif manifest.command == "cantor":
                checks = _cantor_checks(run_dir, manifest, dims)
            elif manifest.command == "modulus":
                checks = _modulus_checks(run_dir, manifest)
            elif manifest.command == "wiggle":
                checks = _wiggle_checks(run_dir, manifest)
            else:
                checks = []
            rows += [(source, c) for c in checks]
            sources.append({"run": run_dir.as_posix(), "command": manifest.command,
                            "artifacts": len(manifest.artifacts), "flags": manifest.flags,
                            "stored_checks": manifest.checks})

        corollary = corollary_size(config.delta, config.eps)
        if config.property_trials or config.oracle_trials:
            writer.phase("modulus_properties")
            suite = property_suite(get_modulus_solver(settings), config.property_trials, config.oracle_trials,
                                   seed=config.seed)
            rows.append(("modulus", Check("property_suite", float(suite.max_oracle_error), 1e-2, 0.0,
                                          status=PASS if suite.passed else FAIL,
                                          detail=f"{suite.trials} random families")))
            suite_doc = suite.to_document()
        else:
            suite_doc = None

        checks = [c for _, c in rows]
        status = overall_status(checks) if checks else PASS
        for source, c in rows:
            writer.check(f"{source}/{c.name}", c.status)
        writer.write_json("verify.json", {
            "status": status,
            "runs": sources,
            "checks": [{"source": s, **c.to_document()} for s, c in rows],
            "corollary": corollary.to_document(),
            "property_suite": suite_doc,
        })
        writer.write_text("verify.txt", _table(rows) + f"\noverall: {status}\n"
                          f"exceptional set bound 2/delta - 1 - eps = {corollary.bound:.6g} "
                          f"(delta {config.delta}, eps {config.eps})\n")
        logger.info(f"Verified {len(runs)} runs: {status}")
    return writer.manifest
