# dataset_io.py - Dataset ingestion, splits and the parquet dataset cache
#
# On-disk dataset layout (one directory per dataset):
#   edges.tsv     "u<TAB>v" per line, '#' comments allowed
#   features.csv  one row per node, d_F comma-separated floats, no header
#   labels.csv    one integer class per line

import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
from pydantic import Field, model_validator

from .errors import ConfigError, InputError
from .graph_core import build_graph, compute_metrics
from .settings import StrictModel

logger = logging.getLogger(__name__)

# --- Configuration ---
EDGES_FILE = "edges.tsv"
FEATURES_FILE = "features.csv"
LABELS_FILE = "labels.csv"
SPLIT_FILE = "split.json"
NODES_CACHE = "nodes.parquet"
EDGES_CACHE = "edges.parquet"
STATS_FILE = "stats.json"
RATIO_TOLERANCE = 1e-9


class DatasetConfig(StrictModel):
    path: str
    name: str | None = None


class SplitConfig(StrictModel):
    train: float = Field(0.6, ge=0.0, le=1.0)
    val: float = Field(0.2, ge=0.0, le=1.0)
    test: float = Field(0.2, ge=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _ratios_sum_to_one(self):
        total = self.train + self.val + self.test
        if abs(total - 1.0) > RATIO_TOLERANCE:
            raise ValueError(f"split ratios must sum to 1, got {total}")
        return self

    @property
    def ratios(self):
        return (self.train, self.val, self.test)


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    graph: object
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    @property
    def node_count(self):
        return self.graph.node_count

    @property
    def feature_dim(self):
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def to_dict(self):
        return {
            "seed": self.seed,
            "train": self.train.tolist(),
            "val": self.val.tolist(),
            "test": self.test.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            train=np.asarray(data["train"], dtype=np.int64),
            val=np.asarray(data["val"], dtype=np.int64),
            test=np.asarray(data["test"], dtype=np.int64),
            seed=int(data["seed"]),
        )


def _read_edges(path):
    edges, lines = [], []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected 'u<TAB>v', got {raw.strip()!r}")
            try:
                edges.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-integer node id in {raw.strip()!r}") from None
            lines.append(lineno)
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2), np.asarray(lines)


def _read_numeric_table(path, dtype):
    try:
        raw = pd.read_csv(path, header=None, dtype=str, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        raise InputError(f"{path}: file is empty") from None
    except pd.errors.ParserError as e:
        raise InputError(f"{path}: {e}") from None
    values = raw.apply(lambda col: pd.to_numeric(col, errors="coerce"))
    bad = values.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise InputError(f"{path}:{row + 1}: column {col + 1} is not numeric ({raw.iat[row, col]!r})")
    return values.to_numpy(dtype=dtype)


def load_dataset(directory, name=None):
    """Read edges.tsv, features.csv and labels.csv from `directory`."""
    paths = {f: os.path.join(directory, f) for f in (EDGES_FILE, FEATURES_FILE, LABELS_FILE)}
    for f, p in paths.items():
        if not os.path.isfile(p):
            raise InputError(f"{p}: {f} not found in dataset directory {directory}")

    features = _read_numeric_table(paths[FEATURES_FILE], np.float32)
    label_table = _read_numeric_table(paths[LABELS_FILE], np.float64)
    if label_table.shape[1] != 1:
        raise InputError(f"{paths[LABELS_FILE]}: expected one label per line, got {label_table.shape[1]} columns")
    labels = label_table[:, 0]
    if not np.all(labels == np.round(labels)):
        row = int(np.flatnonzero(labels != np.round(labels))[0])
        raise InputError(f"{paths[LABELS_FILE]}:{row + 1}: label {labels[row]} is not an integer")
    labels = labels.astype(np.int64)

    n = len(features)
    if len(labels) != n:
        raise InputError(
            f"{paths[LABELS_FILE]}: {len(labels)} labels but {paths[FEATURES_FILE]} has {n} rows"
        )
    if (labels < 0).any():
        row = int(np.flatnonzero(labels < 0)[0])
        raise InputError(f"{paths[LABELS_FILE]}:{row + 1}: negative class {labels[row]}")
    num_classes = int(labels.max()) + 1 if n else 0
    missing = np.setdiff1d(np.arange(num_classes), labels)
    if len(missing):
        raise InputError(f"{paths[LABELS_FILE]}: classes {missing.tolist()} never occur")

    edges, lines = _read_edges(paths[EDGES_FILE])
    try:
        graph = build_graph(edges, n, line_numbers=lines)
    except InputError as e:
        raise InputError(f"{paths[EDGES_FILE]}: {e}") from None

    name = name or os.path.basename(os.path.normpath(directory))
    logger.info("Loaded %s: %d nodes, %d edges, d_F=%d, %d classes",
                name, n, graph.edge_count, features.shape[1], num_classes)
    return Dataset(name, graph, features, labels, num_classes)


def write_dataset(directory, dataset):
    """Write a dataset in the directory layout load_dataset reads."""
    os.makedirs(directory, exist_ok=True)
    edges = dataset.graph.edges()
    with open(os.path.join(directory, EDGES_FILE), "w") as f:
        f.writelines(f"{u}\t{v}\n" for u, v in edges)
    pd.DataFrame(dataset.features).to_csv(
        os.path.join(directory, FEATURES_FILE), header=False, index=False, float_format="%.9g"
    )
    pd.Series(dataset.labels).to_csv(os.path.join(directory, LABELS_FILE), header=False, index=False)


def split_sizes(count, ratios):
    """floor(ratio * count) for val and test; train takes the remainder."""
    val = math.floor(ratios[1] * count + RATIO_TOLERANCE)
    test = math.floor(ratios[2] * count + RATIO_TOLERANCE)
    return count - val - test, val, test


def make_split(n, ratios, labels, seed):
    """Seeded, unstratified train/val/test partition of the labeled nodes."""
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios must be three non-negative numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > RATIO_TOLERANCE:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    labels = np.asarray(labels)
    if len(labels) != n:
        raise InputError(f"labels has {len(labels)} entries for {n} nodes")
    labeled = np.flatnonzero(labels >= 0)
    num_classes = len(np.unique(labels[labeled]))
    if len(labeled) < num_classes:
        raise ConfigError(f"{len(labeled)} labeled nodes cannot cover {num_classes} classes")

    n_train, n_val, _ = split_sizes(len(labeled), ratios)
    perm = labeled[np.random.default_rng(seed).permutation(len(labeled))]
    split = Split(
        train=np.sort(perm[:n_train]),
        val=np.sort(perm[n_train:n_train + n_val]),
        test=np.sort(perm[n_train + n_val:]),
        seed=seed,
    )
    logger.info("Split (seed=%d): train=%d val=%d test=%d", seed, len(split.train), len(split.val), len(split.test))
    return split


def save_split(path, split):
    with open(path, "w") as f:
        json.dump(split.to_dict(), f)


def load_split(path):
    try:
        with open(path) as f:
            return Split.from_dict(json.load(f))
    except FileNotFoundError:
        raise InputError(f"{path}: split file not found") from None
    except (KeyError, ValueError) as e:
        raise InputError(f"{path}: malformed split file ({e})") from None


def save_dataset_cache(directory, dataset, metrics=None):
    """Columnar cache of a loaded dataset plus a stats summary.

    nodes.parquet: one row per node (label, degree, f0..f{d-1})
    edges.parquet: one row per undirected edge (u < v)
    """
    os.makedirs(directory, exist_ok=True)
    nodes = pd.DataFrame(dataset.features, columns=[f"f{i}" for i in range(dataset.feature_dim)])
    nodes.insert(0, "degree", dataset.graph.degrees)
    nodes.insert(0, "label", dataset.labels)
    nodes.to_parquet(os.path.join(directory, NODES_CACHE), index=False)

    edges = dataset.graph.edges()
    pd.DataFrame({"u": edges[:, 0], "v": edges[:, 1]}).to_parquet(os.path.join(directory, EDGES_CACHE), index=False)

    metrics = metrics or compute_metrics(dataset.graph)
    stats = {
        "name": dataset.name,
        "nodes": dataset.node_count,
        "edges": dataset.graph.edge_count,
        "feature_dim": dataset.feature_dim,
        "num_classes": dataset.num_classes,
        "class_counts": np.bincount(dataset.labels, minlength=dataset.num_classes).tolist(),
        **metrics.as_dict(),
    }
    with open(os.path.join(directory, STATS_FILE), "w") as f:
        json.dump(stats, f, indent=2)
    return stats


def load_dataset_cache(directory):
    try:
        nodes = pd.read_parquet(os.path.join(directory, NODES_CACHE))
        edges = pd.read_parquet(os.path.join(directory, EDGES_CACHE))
        with open(os.path.join(directory, STATS_FILE)) as f:
            stats = json.load(f)
    except FileNotFoundError as e:
        raise InputError(f"dataset cache incomplete: {e.filename}") from None

    features = nodes[[c for c in nodes.columns if c.startswith("f")]].to_numpy(dtype=np.float32)
    labels = nodes["label"].to_numpy(dtype=np.int64)
    graph = build_graph(edges[["u", "v"]].to_numpy(), len(nodes))
    return Dataset(stats["name"], graph, features, labels, int(stats["num_classes"]))
