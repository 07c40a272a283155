import json
import logging
import math
from pathlib import Path

from pydantic import ValidationError

from qcdistort.config import Settings
from qcdistort.dependencies import get_artifact_writer, get_modulus_solver
from qcdistort.exceptions import InputError, NonConvergenceError
from qcdistort.models.schemas import FamilyDocument, ModulusRunConfig, RunManifest
from qcdistort.services.artifacts import sha256_file
from qcdistort.services.dimension import FAIL, PASS
from qcdistort.services.modulus import (
    BaseMeasure,
    DiscreteMeasureFamily,
    product_family,
    product_modulus_exact,
)

logger = logging.getLogger(__name__)

ORACLE_TOL = 1e-6


def load_family(path: str | Path) -> tuple[DiscreteMeasureFamily, BaseMeasure]:
    """Read a family file: dense measure rows with an optional base measure, or product factor weights."""
    path = Path(path)
    try:
        doc = FamilyDocument.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except FileNotFoundError as e:
        raise InputError(f"Family file {path} does not exist") from e
    except (json.JSONDecodeError, ValidationError) as e:
        raise InputError(f"Malformed family file {path}: {e}") from e

    if doc.product is not None:
        family, base = product_family(doc.product.e_weights, doc.product.y_weights)
        if doc.tag:
            family.tag = doc.tag
        return family, base
    if not doc.measures:
        raise InputError(f"Family file {path} has neither measures nor a product specification")
    widths = {len(row) for row in doc.measures}
    if len(widths) != 1:
        raise InputError(f"Measure rows in {path} have different lengths {sorted(widths)}")
    family = DiscreteMeasureFamily.from_dense(doc.measures, atom_ids=list(doc.atoms or []), tag=doc.tag)
    base = BaseMeasure(doc.base if doc.base is not None else [1.0] * family.n_atoms)
    return family, base


def cmd_modulus(config: ModulusRunConfig, out_dir: Path, settings: Settings) -> RunManifest:
    family_path = Path(config.family_file)
    family, base = load_family(family_path)
    digest = sha256_file(family_path)
    if config.family_sha256 is not None and config.family_sha256 != digest:
        raise InputError(f"Family file {family_path} does not match the configured hash")
    solver = get_modulus_solver(settings)

    echo = config.model_dump(mode="json")
    echo["family_sha256"] = digest
    writer = get_artifact_writer(out_dir, "modulus", config.seed, echo, settings)
    with writer:
        writer.phase("solve")
        result = solver.solve(family, base, config.p)
        doc = result.to_document()
        doc.update({"tag": family.tag, "measures": family.n_measures, "atoms": family.n_atoms})
        writer.write_json("modulus.json", doc)
        writer.write_csv("iterations.csv", ["iteration", "primal", "dual", "worst_violation"],
                         ([s.iteration, s.primal, s.dual, s.worst_violation] for s in result.history))
        if result.status == "infinite":
            writer.flag(f"degenerate family: measure {result.degenerate_row} is zero, modulus is infinite")

        if family.tag == "product":
            if family.oracle:
                exact = product_modulus_exact(family.oracle["lambda_E"], family.oracle["nu_Y"], config.p)
                error = abs(result.value - exact) / max(abs(exact), 1e-300) if math.isfinite(result.value) else math.inf
                status = PASS if error <= ORACLE_TOL else FAIL
                writer.write_json("oracle.json", {
                    "exact": exact,
                    "solved": result.value,
                    "relative_error": error,
                    "tol": ORACLE_TOL,
                    "status": status,
                    **family.oracle,
                })
                writer.check("product_oracle", status)
            else:
                writer.flag("family tagged product without factor weights; oracle comparison skipped")

        if not result.converged:
            raise NonConvergenceError(
                f"Modulus solve stopped with status {result.status} after {result.iterations} steps",
                [(s.iteration, s.primal, s.dual) for s in result.history],
            )
        logger.info(f"Modulus p={config.p}: {result.value:.10g} ({result.status})")
    return writer.manifest
