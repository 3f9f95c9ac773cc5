# synthetic.py - Stochastic block model datasets for tests and smoke runs

import logging

import numpy as np

from .dataset_io import Dataset
from .errors import ConfigError
from .graph_core import build_graph

logger = logging.getLogger(__name__)


def stochastic_block_model(sizes, p_in, p_out, seed=0):
    """Undirected SBM: each pair inside a block is linked with p_in, across
    blocks with p_out. Returns (graph, block labels)."""
    for p in (p_in, p_out):
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"edge probability must be in [0, 1], got {p}")
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = len(labels)
    rng = np.random.default_rng(seed)
    u, v = np.triu_indices(n, k=1)
    prob = np.where(labels[u] == labels[v], p_in, p_out)
    keep = rng.random(len(u)) < prob
    return build_graph(np.column_stack([u[keep], v[keep]]), n), labels


def make_sbm_dataset(sizes, p_in, p_out, feature_dim=None, noise=0.0, seed=0, name="sbm"):
    """SBM graph with block-indicator features (plus optional Gaussian noise).

    feature_dim defaults to the number of blocks; extra columns are pure noise.
    p_in > p_out gives a homophilous graph, p_in < p_out a heterophilous one.
    """
    graph, labels = stochastic_block_model(sizes, p_in, p_out, seed)
    blocks = len(sizes)
    feature_dim = feature_dim or blocks
    if feature_dim < blocks:
        raise ConfigError(f"feature_dim={feature_dim} cannot hold {blocks} block indicators")
    rng = np.random.default_rng(seed + 1)
    features = np.zeros((graph.node_count, feature_dim), dtype=np.float32)
    features[np.arange(graph.node_count), labels] = 1.0
    if noise > 0:
        features += rng.normal(0.0, noise, size=features.shape).astype(np.float32)
    logger.info("SBM %s: %d nodes, %d edges, %d blocks (p_in=%.3f, p_out=%.3f)",
                name, graph.node_count, graph.edge_count, blocks, p_in, p_out)
    return Dataset(name, graph, features, labels.astype(np.int64), blocks)


def path_graph(n):
    return build_graph([(i, i + 1) for i in range(n - 1)], n)


def cycle_graph(n):
    return build_graph([(i, (i + 1) % n) for i in range(n)], n)


def star_graph(leaves):
    """Node 0 is the center."""
    return build_graph([(0, i) for i in range(1, leaves + 1)], leaves + 1)
