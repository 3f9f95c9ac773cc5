# data_export.py - Run artifacts: manifest, content hashes, lock and summary export
#
# Layout under the run's output directory:
#   manifest.json           stage records (key, artifact sha256, timings)
#   config.resolved.json    the fully resolved RunConfig
#   dataset/ walks/ document/ sgpm/ tokens/ train/ eval/ analysis/ ablate/
#   summary.json            index of stages and headline numbers

import contextlib
import hashlib
import json
import logging
import os
import time
from datetime import datetime, timezone

import pandas as pd
from pydantic import BaseModel, Field

from . import __version__
from .errors import InputError, LockError, MissingArtifactError
from .run_config import digest

logger = logging.getLogger(__name__)

# --- Configuration ---
MANIFEST_FILE = "manifest.json"
LOCK_FILE = ".lock"
SUMMARY_FILE = "summary.json"
HASH_BLOCK = 1 << 20


class StageRecord(BaseModel):
    key: str
    artifacts: dict[str, str] = Field(default_factory=dict)  # relative path -> sha256
    seconds: float = 0.0
    finished_at: str = ""
    summary: dict = Field(default_factory=dict)


class RunManifest(BaseModel):
    tool_version: str = __version__
    config_hash: str = ""
    stages: dict[str, StageRecord] = Field(default_factory=dict)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(HASH_BLOCK), b""):
            h.update(block)
    return h.hexdigest()


def stage_key(section, *upstream):
    """Cache key of a stage: its config section plus the keys (or content
    hashes) of everything it consumes."""
    if hasattr(section, "model_dump"):
        section = section.model_dump(mode="json")
    return digest({"section": section, "upstream": list(upstream)})


def write_json(path, data):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(data, f, indent=2)
    os.replace(tmp, path)


def write_csv(path, frame):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False)


class ArtifactStore:
    """Manifest-backed view of one run directory."""

    def __init__(self, out_dir, config_hash=""):
        self.out_dir = os.path.abspath(out_dir)
        self.path = os.path.join(self.out_dir, MANIFEST_FILE)
        os.makedirs(self.out_dir, exist_ok=True)
        self.manifest = self._load()
        self.manifest.config_hash = config_hash or self.manifest.config_hash
        self.manifest.tool_version = __version__

    def _load(self):
        if not os.path.isfile(self.path):
            return RunManifest()
        try:
            with open(self.path) as f:
                return RunManifest.model_validate(json.load(f))
        except (json.JSONDecodeError, ValueError) as e:
            logger.warning("Ignoring unreadable manifest %s (%s)", self.path, e)
            return RunManifest()

    def save(self):
        write_json(self.path, self.manifest.model_dump(mode="json"))

    def resolve(self, rel):
        return os.path.join(self.out_dir, rel)

    def record(self, stage):
        return self.manifest.stages.get(stage)

    def verify(self, stage):
        """True when every recorded artifact of `stage` exists with its recorded hash."""
        rec = self.record(stage)
        if rec is None:
            return False
        for rel, sha in rec.artifacts.items():
            path = self.resolve(rel)
            if not os.path.isfile(path):
                logger.warning("Artifact %s of stage %s is missing", rel, stage)
                return False
            if file_sha256(path) != sha:
                logger.warning("Artifact %s of stage %s was modified; it will be rebuilt", rel, stage)
                return False
        return True

    def is_fresh(self, stage, key):
        rec = self.record(stage)
        return rec is not None and rec.key == key and self.verify(stage)

    def require(self, stage, command):
        """Key of a stage that cannot be rebuilt implicitly, or MissingArtifactError."""
        if not self.verify(stage):
            raise MissingArtifactError(f"{stage} artifacts in {self.out_dir}", command)
        return self.record(stage).key

    def commit(self, stage, key, artifacts, seconds, summary=None):
        hashes = {}
        for rel in artifacts:
            path = self.resolve(rel)
            if not os.path.isfile(path):
                raise InputError(f"stage {stage} did not produce {rel}")
            hashes[rel] = file_sha256(path)
        self.manifest.stages[stage] = StageRecord(
            key=key, artifacts=hashes, seconds=round(seconds, 3),
            finished_at=datetime.now(timezone.utc).isoformat(timespec="seconds"), summary=summary or {},
        )
        self.save()

    def run_stage(self, stage, key, build):
        """Run `build()` unless the stage is cached under `key`.

        build returns (artifact relative paths, summary dict).
        """
        if self.is_fresh(stage, key):
            logger.info("  -> %s: up to date (cache hit)", stage)
            return self.record(stage)
        started = time.perf_counter()
        artifacts, summary = build()
        self.commit(stage, key, artifacts, time.perf_counter() - started, summary)
        logger.info("  -> %s: done in %.1fs", stage, self.record(stage).seconds)
        return self.record(stage)


@contextlib.contextmanager
def output_lock(out_dir):
    """Exclusive lock on a run directory for the duration of one command."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, LOCK_FILE)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{path} exists: another run is using {out_dir} (remove the file if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(path)


def export_run_summary(store):
    """summary.json: one entry per stage with timings, artifact list and its summary."""
    stages = {
        name: {"seconds": rec.seconds, "finished_at": rec.finished_at, "artifacts": sorted(rec.artifacts),
               **rec.summary}
        for name, rec in store.manifest.stages.items()
    }
    metrics_path = store.resolve(os.path.join("eval", "metrics.csv"))
    summary = {
        "tool_version": store.manifest.tool_version,
        "config_hash": store.manifest.config_hash,
        "stages": stages,
    }
    if os.path.isfile(metrics_path):
        summary["metrics"] = pd.read_csv(metrics_path).to_dict(orient="records")
    write_json(store.resolve(SUMMARY_FILE), summary)
    return summary
