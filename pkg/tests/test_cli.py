import json
import time

import pytest

from qcdistort.config import Settings
from qcdistort.main import EXIT_INPUT, EXIT_NONCONVERGENCE, EXIT_OK, main
from qcdistort.services.artifacts import MANIFEST_NAME, load_manifest, read_json_artifact


@pytest.fixture
def cli_settings(test_settings, monkeypatch):
    monkeypatch.setattr("qcdistort.main.get_settings", lambda: test_settings)
    return test_settings


def _run(command, config_path, out_dir, *extra):
    argv = [command, "--out", str(out_dir)]
    if config_path is not None:
        argv += ["--config", str(config_path)]
    return main(argv + list(extra))


class TestCantorCommand:
    def test_default_run(self, cli_settings, write_config, tmp_path):
        path = write_config("cantor.json", {"alpha": "1/4", "depth": 10})
        assert _run("cantor", path, tmp_path / "out") == EXIT_OK
        manifest = load_manifest(tmp_path / "out")
        assert manifest.checks["box_dimension"] == "pass"
        names = [a.name for a in manifest.artifacts]
        assert {"intervals.json", "measure.csv", "regularity.json", "box_count.json"} <= set(names)

    def test_depth_zero(self, cli_settings, write_config, tmp_path):
        path = write_config("cantor.json", {"alpha": "1/4", "depth": 0})
        assert _run("cantor", path, tmp_path / "out") == EXIT_OK
        manifest = load_manifest(tmp_path / "out")
        assert manifest.checks["box_dimension"] == "inconclusive"
        intervals = read_json_artifact(tmp_path / "out", "intervals.json")
        assert intervals["depth"] == 0

    def test_alpha_out_of_range(self, cli_settings, write_config, tmp_path):
        path = write_config("cantor.json", {"alpha": "3/5"})
        assert _run("cantor", path, tmp_path / "out") == EXIT_INPUT

    def test_unknown_field(self, cli_settings, write_config, tmp_path):
        path = write_config("cantor.json", {"alpha": "1/4", "colour": "red"})
        assert _run("cantor", path, tmp_path / "out") == EXIT_INPUT

    def test_command_mismatch(self, cli_settings, write_config, tmp_path):
        path = write_config("cantor.json", {"command": "tube"})
        assert _run("cantor", path, tmp_path / "out") == EXIT_INPUT

    def test_missing_config(self, cli_settings, tmp_path):
        assert _run("cantor", tmp_path / "absent.json", tmp_path / "out") == EXIT_INPUT

    def test_seed_override(self, cli_settings, write_config, tmp_path):
        path = write_config("cantor.json", {"depth": 4, "seed": 1})
        assert _run("cantor", path, tmp_path / "out", "--seed", "5") == EXIT_OK
        assert load_manifest(tmp_path / "out").seed == 5

    def test_reruns_are_byte_identical(self, cli_settings, write_config, tmp_path):
        path = write_config("cantor.json", {"alpha": "1/8", "depth": 4})
        assert _run("cantor", path, tmp_path / "a") == EXIT_OK
        assert _run("cantor", path, tmp_path / "b") == EXIT_OK
        assert (tmp_path / "a" / MANIFEST_NAME).read_bytes() == (tmp_path / "b" / MANIFEST_NAME).read_bytes()


class TestModulusCommand:
    def test_two_atoms(self, cli_settings, write_config, tmp_path):
        write_config("family.json", {"schema_version": 1, "measures": [[1, 0], [0, 1]]})
        path = write_config("modulus.json", {"family_file": "family.json", "p": 2})
        assert _run("modulus", path, tmp_path / "out") == EXIT_OK
        doc = read_json_artifact(tmp_path / "out", "modulus.json")
        assert abs(doc["value"] - 2.0) < 1e-5
        assert doc["status"] == "converged"

    def test_product_oracle(self, cli_settings, write_config, tmp_path):
        write_config("family.json", {"tag": "product", "product": {"e_weights": [1, 2, 0.5], "y_weights": [1, 1]}})
        path = write_config("modulus.json", {"family_file": "family.json", "p": 2})
        assert _run("modulus", path, tmp_path / "out") == EXIT_OK
        assert load_manifest(tmp_path / "out").checks["product_oracle"] == "pass"

    def test_degenerate_family(self, cli_settings, write_config, tmp_path, capsys):
        write_config("family.json", {"measures": [[1, 0], [0, 0]]})
        path = write_config("modulus.json", {"family_file": "family.json"})
        assert _run("modulus", path, tmp_path / "out") == EXIT_OK
        assert read_json_artifact(tmp_path / "out", "modulus.json")["value"] == "inf"
        assert "degenerate family" in capsys.readouterr().err

    def test_malformed_family(self, cli_settings, write_config, tmp_path):
        write_config("family.json", {"measures": "rows"})
        path = write_config("modulus.json", {"family_file": "family.json"})
        assert _run("modulus", path, tmp_path / "out") == EXIT_INPUT

    def test_ragged_family(self, cli_settings, write_config, tmp_path):
        write_config("family.json", {"measures": [[1, 0], [1]]})
        path = write_config("modulus.json", {"family_file": "family.json"})
        assert _run("modulus", path, tmp_path / "out") == EXIT_INPUT

    def test_hash_mismatch(self, cli_settings, write_config, tmp_path):
        write_config("family.json", {"measures": [[1, 1]]})
        path = write_config("modulus.json", {"family_file": "family.json", "family_sha256": "0" * 64})
        assert _run("modulus", path, tmp_path / "out") == EXIT_INPUT

    def test_solver_cap_exits_nonconverged(self, test_settings, monkeypatch, write_config, tmp_path, capsys):
        capped = Settings(
            output_root=test_settings.output_root,
            lock_timeout_s=0.0,
            yaml_config={"modulus": {"max_iterations": 1}},
        )
        monkeypatch.setattr("qcdistort.main.get_settings", lambda: capped)
        write_config("family.json", {"tag": "product", "product": {"e_weights": [1, 2], "y_weights": [1, 1]}})
        path = write_config("modulus.json", {"family_file": "family.json"})
        assert _run("modulus", path, tmp_path / "capped") == EXIT_NONCONVERGENCE
        assert "max_iterations" in capsys.readouterr().err
        assert load_manifest(tmp_path / "capped").flags == ["aborted: NonConvergenceError"]

        verify = write_config("verify.json", {"runs": ["capped"], "property_trials": 0, "oracle_trials": 0})
        assert _run("verify", verify, tmp_path / "verify") == EXIT_INPUT


class TestTubeCommand:
    def test_non_power_alpha(self, cli_settings, write_config, tmp_path):
        path = write_config("tube.json", {"alpha": "2/5", "k": 1})
        assert _run("tube", path, tmp_path / "out") == EXIT_INPUT

    def test_k_out_of_range(self, cli_settings, write_config, tmp_path):
        path = write_config("tube.json", {"alpha": "1/8", "k": 5})
        assert _run("tube", path, tmp_path / "out") == EXIT_INPUT

    @pytest.mark.slow
    def test_eighth_end_to_end(self, cli_settings, write_config, tmp_path):
        path = write_config("tube.json", {"alpha": "1/8", "k": 2, "generations": 2})
        start = time.perf_counter()
        assert _run("tube", path, tmp_path / "out") == EXIT_OK
        assert time.perf_counter() - start < 300.0
        manifest = load_manifest(tmp_path / "out")
        assert manifest.checks["thinning"] == "pass"
        assert manifest.checks["mass_exponent"] == "pass"
        assert manifest.checks.get("fiber_bounds", "inconclusive") != "fail"
        thinning = read_json_artifact(tmp_path / "out", "thinning.json")
        assert abs(thinning["modulus"] - 64.0) <= 0.64
        params = read_json_artifact(tmp_path / "out", "params.json")
        assert params["bracket"]["holds"]


class TestWiggleCommand:
    def test_flat_bend(self, cli_settings, write_config, tmp_path):
        path = write_config("wiggle.json", {"depth": 1, "amplitude": 0.0, "table_depth": 3,
                                            "oscillation_exponents": [0, 6]})
        assert _run("wiggle", path, tmp_path / "out") == EXIT_OK
        manifest = load_manifest(tmp_path / "out")
        assert manifest.checks["oscillation"] == "pass"
        assert manifest.checks["dilatation_budget"] == "pass"
        assert "stage_1.svg" in [a.name for a in manifest.artifacts]

    def test_short_branching_list(self, cli_settings, write_config, tmp_path):
        path = write_config("wiggle.json", {"depth": 2, "branching": [10]})
        assert _run("wiggle", path, tmp_path / "out") == EXIT_INPUT

    def test_auto_needs_gauge(self, cli_settings, write_config, tmp_path):
        path = write_config("wiggle.json", {"depth": 1, "branching": "auto"})
        assert _run("wiggle", path, tmp_path / "out") == EXIT_INPUT


class TestVerifyCommand:
    def test_verifies_cantor_run(self, cli_settings, write_config, tmp_path):
        cantor = write_config("cantor.json", {"alpha": "1/4", "depth": 10})
        assert _run("cantor", cantor, tmp_path / "cantor") == EXIT_OK
        path = write_config("verify.json", {"runs": ["cantor"], "property_trials": 3, "oracle_trials": 1})
        assert _run("verify", path, tmp_path / "verify") == EXIT_OK
        doc = read_json_artifact(tmp_path / "verify", "verify.json")
        assert doc["status"] == "pass"
        assert [c["name"] for c in doc["checks"]] == ["box_dimension", "property_suite"]

    def test_missing_run(self, cli_settings, write_config, tmp_path):
        path = write_config("verify.json", {"runs": ["nowhere"], "property_trials": 0, "oracle_trials": 0})
        assert _run("verify", path, tmp_path / "verify") == EXIT_INPUT

    def test_corrupted_manifest(self, cli_settings, write_config, tmp_path):
        cantor = write_config("cantor.json", {"depth": 4})
        assert _run("cantor", cantor, tmp_path / "cantor") == EXIT_OK
        (tmp_path / "cantor" / MANIFEST_NAME).write_text(json.dumps({"command": "cantor"}))
        path = write_config("verify.json", {"runs": ["cantor"], "property_trials": 0, "oracle_trials": 0})
        assert _run("verify", path, tmp_path / "verify") == EXIT_INPUT
