import json

import pytest

from qcdistort.services.cantor import build_cantor
from qcdistort.services.geometry import TriangulatedMap


@pytest.fixture
def test_settings(tmp_path):
    from qcdistort.config import Settings
    return Settings(
        output_root=str(tmp_path / "runs"),
        default_seed=0,
        lock_timeout_s=0.0,
    )


@pytest.fixture
def solver(test_settings):
    from qcdistort.services.modulus import ModulusSolver
    return ModulusSolver(test_settings)


@pytest.fixture
def cantor_quarter():
    return build_cantor("1/4", 6)


@pytest.fixture
def fan_map():
    """Unit square fanned from its centre, with the centre pushed right to (0.6, 0.5)."""
    corners = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    triangles = [(0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)]
    return TriangulatedMap.from_mesh(corners + [(0.5, 0.5)], corners + [(0.6, 0.5)], triangles)


@pytest.fixture
def write_config(tmp_path):
    """Write a JSON document under tmp_path and return its path."""
    def _write(name: str, document) -> str:
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(document), encoding="utf-8")
        return str(path)
    return _write


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-size construction tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size construction, run with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
