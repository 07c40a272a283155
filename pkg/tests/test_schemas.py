import math

import pytest
from pydantic import ValidationError

from qcdistort.models.schemas import (
    SCHEMA_VERSION,
    LocalityDocument,
    ModulusDocument,
    OscillationDocument,
    ThinnedTubeDocument,
)
from qcdistort.services.tube import ThinnedTube, ThinningStep, build_snake_tube, tube_params


def _modulus(**overrides):
    fields = dict(value=2.0, p=2.0, rho=[0.5, 0.5], active=[0], iterations=3, certified_gap=1e-9,
                  dual_bound=1.99, kkt_residual=0.0, worst_violation=0.0, status="converged")
    fields.update(overrides)
    return ModulusDocument(**fields)


class TestDocuments:
    def test_schema_version_stamped(self):
        assert _modulus().model_dump(mode="json")["schema_version"] == SCHEMA_VERSION

    def test_nonfinite_floats_tagged(self):
        doc = _modulus(value=math.inf, dual_bound=-math.inf, kkt_residual=math.nan).model_dump(mode="json")
        assert doc["value"] == "inf"
        assert doc["dual_bound"] == "-inf"
        assert doc["kkt_residual"] == "nan"
        assert doc["p"] == 2.0

    def test_python_dump_keeps_floats(self):
        assert _modulus(value=math.inf).model_dump()["value"] == math.inf

    def test_missing_field_rejected(self):
        with pytest.raises(ValidationError):
            LocalityDocument(samples=10, max_nonconformal_stages=1)

    def test_nested_tuples(self):
        doc = OscillationDocument(
            y=0.5, threshold=0.01, rows=[(4, 0.0625, math.inf, 37, 1.06)], bands=[(0, 3)],
            growth=[1.06], stage_scales=[1.0], stage_lengths=[1.0, 1.06],
        ).model_dump(mode="json")
        assert doc["bands"] == [[0, 3]]
        assert doc["rows"] == [[4, 0.0625, "inf", 37, 1.06]]

    def test_service_document_matches_model(self):
        tube = build_snake_tube(tube_params("1/8", 2))
        thinned = ThinnedTube(tube, 0.5, 0.25, 64.2, 64.0, [ThinningStep(1.0, 40.0), ThinningStep(0.5, 64.2)])
        doc = thinned.to_document()
        assert ThinnedTubeDocument.model_validate(doc).trace == [(1.0, 40.0), (0.5, 64.2)]
        assert doc["trace"] == [[1.0, 40.0], [0.5, 64.2]]
