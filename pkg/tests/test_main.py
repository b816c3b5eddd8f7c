import json

import pytest

from gmc.errors import ConfigError, PreconditionError
from gmc.experiments import ExperimentResult
from gmc.fields import load_field
from gmc.main import EXIT_ERROR, EXIT_FAILED, EXIT_OK, hashed_payload, load_config, main, resolve_output_dir
from gmc.utils import config_hash

SMALL_RUN = {
    "kind": "sample-field",
    "kernel": {"family": "ExactLog", "dimension": 1},
    "construction": "refinement",
    "grid": {"points_per_axis": 64},
    "ladder": {"coarsest": 0.25, "n_levels": 3},
    "n_replicas": 4,
    "master_seed": 5,
}


@pytest.fixture
def write_config(tmp_path):
    """Writes a config payload to a JSON file and returns its path"""

    def _write(payload, name="config.json"):
        path = tmp_path / name
        path.write_text(payload if isinstance(payload, str) else json.dumps(payload))
        return str(path)

    return _write


@pytest.mark.cli
class TestConfigLoading:
    """Test config validation and its error paths"""

    def test_missing_kernel(self, write_config):
        """A non-suite config without a kernel names the kernel key"""
        payload = {k: v for k, v in SMALL_RUN.items() if k != "kernel"}
        with pytest.raises(ConfigError) as excinfo:
            load_config(write_config(payload))
        assert excinfo.value.key_path == "kernel"

    def test_unknown_key(self, write_config):
        """Unknown top-level keys are rejected"""
        with pytest.raises(ConfigError) as excinfo:
            load_config(write_config({**SMALL_RUN, "replicas": 3}))
        assert excinfo.value.key_path == "replicas"

    def test_invalid_kernel_field(self, write_config):
        """Nested validation errors carry the dotted key path"""
        payload = {**SMALL_RUN, "kernel": {"family": "ExactLog", "dimension": 1, "colour": "red"}}
        with pytest.raises(ConfigError) as excinfo:
            load_config(write_config(payload))
        assert excinfo.value.key_path == "kernel.colour"

    def test_bad_json(self, write_config):
        """Malformed JSON is a config error"""
        with pytest.raises(ConfigError):
            load_config(write_config("{not json"))

    def test_missing_file(self, tmp_path):
        """A missing config file is a config error"""
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")

    def test_seed_override(self, write_config):
        """--seed replaces the master seed"""
        assert load_config(write_config(SMALL_RUN), seed=99).master_seed == 99

    def test_hash_ignores_workers_and_output_dir(self, write_config):
        """Scheduling fields do not change the config hash"""
        plain = load_config(write_config(SMALL_RUN, "a.json"))
        scheduled = load_config(write_config({**SMALL_RUN, "workers": 3, "output_dir": "elsewhere"}, "b.json"))
        assert config_hash(hashed_payload(plain)) == config_hash(hashed_payload(scheduled))

    def test_output_dir_from_environment(self, write_config, monkeypatch, tmp_path):
        """GMC_OUTPUT_DIR is used when neither flag nor config set a directory"""
        monkeypatch.setenv("GMC_OUTPUT_DIR", str(tmp_path / "env_out"))
        config = load_config(write_config(SMALL_RUN))
        assert resolve_output_dir(None, config) == tmp_path / "env_out"
        assert resolve_output_dir(str(tmp_path / "cli"), config) == tmp_path / "cli"


@pytest.mark.cli
class TestExitCodes:
    """Test how outcomes map to exit codes"""

    def test_config_error_exits_two(self, write_config, tmp_path):
        """Invalid configs exit with 2"""
        payload = {k: v for k, v in SMALL_RUN.items() if k != "kernel"}
        assert main(["run", write_config(payload), "--out", str(tmp_path / "out")]) == EXIT_ERROR

    def test_zero_workers_exits_two(self, write_config, tmp_path):
        """A worker count below one is rejected"""
        assert main(["run", write_config(SMALL_RUN), "--workers", "0", "--out", str(tmp_path / "out")]) == EXIT_ERROR

    def test_library_error_exits_two(self, write_config, tmp_path, mocker):
        """A raised library error is reported and exits with 2"""
        mocker.patch("gmc.main.run_experiment", side_effect=PreconditionError("field contains non-finite values"))
        assert main(["run", write_config(SMALL_RUN), "--out", str(tmp_path / "out")]) == EXIT_ERROR

    def test_failed_check_exits_one(self, write_config, tmp_path, mocker):
        """A completed run with a failing check exits with 1 and still writes the manifest"""
        result = ExperimentResult()
        result.add_table("t.csv", ("x",), [(1.0,)])
        result.check("always-fails", False, "forced")
        mocker.patch("gmc.main.run_experiment", return_value=result)
        out = tmp_path / "out"
        assert main(["run", write_config(SMALL_RUN), "--out", str(out)]) == EXIT_FAILED
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["checks"] == [{"name": "always-fails", "passed": False, "detail": "forced"}]
        assert manifest["outputs"] == ["t.csv"]

    def test_passing_checks_exit_zero(self, write_config, tmp_path, mocker):
        """All checks passing exits with 0"""
        result = ExperimentResult()
        result.check("fine", True)
        mocker.patch("gmc.main.run_experiment", return_value=result)
        assert main(["run", write_config(SMALL_RUN), "--out", str(tmp_path / "out")]) == EXIT_OK


@pytest.mark.cli
@pytest.mark.integration
class TestSampleFieldRun:
    """Test a small end-to-end sample-field run"""

    def test_outputs_and_manifest(self, write_config, tmp_path):
        """A run writes finalized tables, sidecars, the manifest and an optional dump"""
        out = tmp_path / "out"
        dump = tmp_path / "field.gmcf"
        config_path = write_config(SMALL_RUN)
        code = main(["sample-field", config_path, "--out", str(out), "--workers", "1", "--dump", str(dump)])
        assert code in (EXIT_OK, EXIT_FAILED)
        assert not list(out.glob("*.partial"))
        assert (out / "field_summary.csv").exists()
        assert (out / "field_summary.csv.manifest.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config_hash"] == config_hash(hashed_payload(load_config(config_path)))
        assert manifest["master_seed"] == 5
        assert manifest["workers"] == 1
        assert "field_summary.csv" in manifest["outputs"]
        values, cutoff = load_field(dump)
        assert values.shape == (64,)
        assert cutoff == 0.0625

    def test_reruns_are_byte_identical(self, write_config, tmp_path):
        """Same config and seed reproduce the same table bytes"""
        config_path = write_config(SMALL_RUN)
        main(["sample-field", config_path, "--out", str(tmp_path / "a"), "--workers", "1"])
        main(["sample-field", config_path, "--out", str(tmp_path / "b"), "--workers", "1"])
        first = (tmp_path / "a" / "field_summary.csv").read_bytes()
        assert first == (tmp_path / "b" / "field_summary.csv").read_bytes()
        assert len(first.splitlines()) == 1 + 4 * 3
