import json
import os

import pandas as pd
import pytest

from backend.core_pipeline.data_export import (LOCK_FILE, ArtifactStore, export_run_summary, file_sha256,
                                               output_lock, stage_key, write_csv, write_json)
from backend.core_pipeline.errors import InputError, LockError, MissingArtifactError


def build_file(store, rel, text):
    def build():
        path = store.resolve(rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w") as f:
            f.write(text)
        return [rel], {"chars": len(text)}
    return build


def test_stage_key_depends_on_section_and_upstream():
    a = stage_key({"x": 1}, "up")
    assert a == stage_key({"x": 1}, "up")
    assert a != stage_key({"x": 2}, "up")
    assert a != stage_key({"x": 1}, "other")


def test_run_stage_caches(tmp_path):
    store = ArtifactStore(str(tmp_path))
    calls = []

    def build():
        calls.append(1)
        return build_file(store, "s/a.txt", "hello")()

    store.run_stage("s", "k1", build)
    store.run_stage("s", "k1", build)
    assert len(calls) == 1
    store.run_stage("s", "k2", build)
    assert len(calls) == 2
    rec = ArtifactStore(str(tmp_path)).record("s")
    assert rec.key == "k2"
    assert rec.artifacts["s/a.txt"] == file_sha256(str(tmp_path / "s" / "a.txt"))
    assert rec.summary == {"chars": 5}


def test_modified_artifact_is_not_fresh(tmp_path):
    store = ArtifactStore(str(tmp_path))
    store.run_stage("s", "k", build_file(store, "a.txt", "one"))
    (tmp_path / "a.txt").write_text("two")
    assert not store.is_fresh("s", "k")
    os.remove(tmp_path / "a.txt")
    assert not store.verify("s")


def test_missing_output_is_an_input_error(tmp_path):
    store = ArtifactStore(str(tmp_path))
    with pytest.raises(InputError):
        store.run_stage("s", "k", lambda: (["never.txt"], {}))


def test_require_names_the_command(tmp_path):
    store = ArtifactStore(str(tmp_path))
    with pytest.raises(MissingArtifactError) as err:
        store.require("sgpm", "pretrain")
    assert err.value.exit_code == 2
    assert "tokenwalk pretrain" in str(err.value)
    store.run_stage("sgpm", "k", build_file(store, "sgpm/x.bin", "w"))
    assert store.require("sgpm", "pretrain") == "k"


def test_unreadable_manifest_starts_fresh(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    assert ArtifactStore(str(tmp_path)).manifest.stages == {}


def test_output_lock(tmp_path):
    with output_lock(str(tmp_path)) as path:
        assert os.path.basename(path) == LOCK_FILE
        with pytest.raises(LockError):
            with output_lock(str(tmp_path)):
                pass
    assert not (tmp_path / LOCK_FILE).exists()


def test_summary_includes_eval_metrics(tmp_path):
    store = ArtifactStore(str(tmp_path), "abc")
    store.run_stage("s", "k", build_file(store, "a.txt", "x"))
    write_csv(store.resolve("eval/metrics.csv"), pd.DataFrame([{"dataset": "d", "mean": 0.5}]))
    summary = export_run_summary(store)
    assert summary["config_hash"] == "abc"
    assert summary["stages"]["s"]["artifacts"] == ["a.txt"]
    assert summary["metrics"] == [{"dataset": "d", "mean": 0.5}]
    assert json.loads((tmp_path / "summary.json").read_text()) == summary


def test_write_json_replaces_atomically(tmp_path):
    path = str(tmp_path / "d" / "x.json")
    write_json(path, {"a": 1})
    write_json(path, {"a": 2})
    with open(path) as f:
        assert json.load(f) == {"a": 2}
    assert not os.path.exists(path + ".tmp")
