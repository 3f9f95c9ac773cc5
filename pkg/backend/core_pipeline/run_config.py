# run_config.py - Run configuration: sections, loading, hashing

import hashlib
import json
import logging
import os

from pydantic import Field

from .analysis import AnalysisConfig
from .dataset_io import DatasetConfig, SplitConfig
from .errors import ConfigError
from .graph_doc import DocumentConfig
from .settings import StrictModel, validate_model
from .sgpm import SgpmConfig
from .tokenphormer import TrainConfig
from .walk_engine import MixedWalkConfig

logger = logging.getLogger(__name__)

# --- Configuration ---
RESOLVED_FILE = "config.resolved.json"
HASH_LENGTH = 12
SEEDED_SECTIONS = ("split", "walks", "document", "sgpm", "model", "analysis")


class RunConfig(StrictModel):
    dataset: DatasetConfig
    split: SplitConfig = Field(default_factory=SplitConfig)
    walks: MixedWalkConfig = Field(default_factory=MixedWalkConfig)
    document: DocumentConfig = Field(default_factory=DocumentConfig)
    sgpm: SgpmConfig = Field(default_factory=SgpmConfig)
    model: TrainConfig = Field(default_factory=TrainConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def with_seed(self, seed):
        """Copy with `seed` pushed into every seeded section."""
        data = self.model_dump(mode="json")
        data["seed"] = seed
        for section in SEEDED_SECTIONS:
            data[section]["seed"] = seed
        return validate_model(RunConfig, data)

    def with_updates(self, section, **values):
        data = self.model_dump(mode="json")
        data[section].update(values)
        return validate_model(RunConfig, data)


def canonical_json(data):
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def digest(data):
    if hasattr(data, "model_dump"):
        data = data.model_dump(mode="json")
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def config_hash(cfg):
    """Short stable hash of the full resolved config (output_dir excluded)."""
    data = cfg.model_dump(mode="json")
    data.pop("output_dir", None)
    return digest(data)[:HASH_LENGTH]


def load_config(path, seed=None, output_dir=None):
    """Read a JSON run config, resolve the dataset path against the config's
    directory and apply CLI overrides."""
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")

    base = os.path.dirname(os.path.abspath(path))
    dataset = data.get("dataset")
    if isinstance(dataset, dict) and isinstance(dataset.get("path"), str) and not os.path.isabs(dataset["path"]):
        dataset["path"] = os.path.normpath(os.path.join(base, dataset["path"]))
    if output_dir is not None:
        data["output_dir"] = output_dir

    cfg = validate_model(RunConfig, data)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def save_resolved(cfg, directory):
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, RESOLVED_FILE)
    with open(path, "w") as f:
        json.dump(cfg.model_dump(mode="json"), f, indent=2, sort_keys=True)
    return path
