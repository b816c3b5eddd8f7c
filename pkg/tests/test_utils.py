import json
import math

import numpy as np
import pytest

from gmc.utils import (
    config_hash,
    csv_text,
    derive_rng,
    finalize_artifact,
    load_artifact,
    ndjson_text,
    resolve_workers,
    run_replicas,
    save_artifact,
    write_json,
    write_table,
)


@pytest.mark.unit
class TestResolveWorkers:
    """Test the worker-count precedence"""

    def test_cli_wins(self, monkeypatch):
        """The CLI flag overrides config and environment"""
        monkeypatch.setenv("GMC_WORKERS", "6")
        assert resolve_workers(3, 5) == 3

    def test_config_before_environment(self, monkeypatch):
        """Config value is used when no flag is given"""
        monkeypatch.setenv("GMC_WORKERS", "6")
        assert resolve_workers(None, 5) == 5

    def test_environment(self, monkeypatch):
        """GMC_WORKERS is the last explicit source"""
        monkeypatch.setenv("GMC_WORKERS", "4")
        assert resolve_workers() == 4

    def test_default_and_garbage(self, monkeypatch):
        """Unset or non-integer environment falls back to one worker"""
        monkeypatch.delenv("GMC_WORKERS", raising=False)
        assert resolve_workers() == 1
        monkeypatch.setenv("GMC_WORKERS", "many")
        assert resolve_workers() == 1


@pytest.mark.unit
class TestSeeds:
    """Test the seed lineage"""

    def test_same_cell_same_stream(self):
        """Identical (master, replica, level) give identical draws"""
        np.testing.assert_array_equal(derive_rng(1, 2, 3).random(5), derive_rng(1, 2, 3).random(5))

    def test_cells_are_distinct(self):
        """Neighbouring replicas and levels draw different streams"""
        base = derive_rng(1, 2, 3).random(5)
        assert not np.array_equal(base, derive_rng(1, 3, 3).random(5))
        assert not np.array_equal(base, derive_rng(1, 2, 4).random(5))
        assert not np.array_equal(base, derive_rng(2, 2, 3).random(5))


@pytest.mark.unit
class TestConfigHash:
    """Test the canonical config hash"""

    def test_key_order_irrelevant(self):
        """Hash depends on content, not key order"""
        assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})

    def test_content_sensitive(self):
        """Changing a value changes the hash"""
        assert config_hash({"a": 1}) != config_hash({"a": 2})
        assert len(config_hash({})) == 64


@pytest.mark.unit
class TestRunReplicas:
    """Test the replica worker pool"""

    def test_serial_order(self):
        """Results come back in argument order"""
        assert run_replicas(lambda x: x * x, [3, 1, 2], workers=1) == [9, 1, 4]

    def test_process_pool_order(self):
        """Pooled results keep argument order"""
        values = [float(v) for v in range(12)]
        assert run_replicas(math.sqrt, values, workers=2) == [math.sqrt(v) for v in values]


@pytest.mark.unit
class TestArtifacts:
    """Test artifact writing and loading"""

    def test_partial_then_finalize(self, tmp_path):
        """Partial artifacts are renamed on success"""
        partial = save_artifact("hello", tmp_path / "out" / "a.csv", partial=True)
        assert partial.name == "a.csv.partial"
        final = finalize_artifact(partial)
        assert final.name == "a.csv"
        assert not partial.exists()
        assert load_artifact(final) == "hello"

    def test_finalize_is_idempotent_for_final_names(self, tmp_path):
        """Finalizing a non-partial path leaves it alone"""
        path = save_artifact("x", tmp_path / "b.csv")
        assert finalize_artifact(path) == path

    def test_missing_artifact(self, tmp_path):
        """Loading a missing file returns None"""
        assert load_artifact(tmp_path / "missing.csv") is None

    def test_csv_floats_round_trip_exactly(self):
        """Floats are written with repr precision"""
        text = csv_text(("a", "b"), [(0.1, np.int64(3)), (1.0 / 3.0, "x")])
        lines = text.splitlines()
        assert lines[0] == "a,b"
        assert lines[1] == "0.1,3"
        assert float(lines[2].split(",")[0]) == 1.0 / 3.0

    def test_ndjson(self):
        """One sorted JSON object per line, numpy scalars converted"""
        text = ndjson_text([{"b": np.float64(1.5), "a": np.int64(2)}, {"c": None}])
        lines = text.splitlines()
        assert lines[0] == '{"a": 2, "b": 1.5}'
        assert json.loads(lines[1]) == {"c": None}

    def test_table_and_sidecar(self, tmp_path):
        """Tables come with a sidecar naming the config hash"""
        table, sidecar = write_table(tmp_path, "t.csv", ("x",), [(1,)], "abc")
        assert table.name == "t.csv.partial"
        assert json.loads(sidecar.read_text()) == {"config_hash": "abc", "table": "t.csv"}

    def test_write_json(self, tmp_path):
        """JSON writes are atomic and leave no temp file"""
        path = write_json(tmp_path / "m.json", {"v": np.arange(2)})
        assert json.loads(path.read_text()) == {"v": [0, 1]}
        assert not (tmp_path / "m.json.tmp").exists()
