# walk_engine.py - Transition models, walkers and mixed-walk generation
#
# Four walk kinds:
#   urw    uniform random walk          (node-level transition)
#   nbrw   non-backtracking random walk (edge-level transition)
#   njw    neighborhood jump walk       (node-level, jumps up to k hops)
#   nbnjw  non-backtracking jump walk   (njw with the previous node masked)
# Walk length always counts edges, so a walk of length l visits l + 1 nodes.

import functools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np
from pydantic import Field, field_validator, model_validator
from scipy import sparse

from .errors import InputError, LogicError
from .settings import StrictModel, worker_count

logger = logging.getLogger(__name__)

# --- Configuration ---
DEFAULT_JUMP_RADIUS = 3
WALKS_FILE = "walks.txt"
RATIO_TOLERANCE = 1e-9
NODES_PER_TASK = 64

# Purpose tags keep per-node random streams of different stages apart
STREAM_TAGS = {"walks": 1, "document": 2, "masking": 3, "shuffle": 4, "dropout": 5, "init": 6, "analysis": 7}


class WalkKind(str, Enum):
    URW = "urw"
    NBRW = "nbrw"
    NJW = "njw"
    NBNJW = "nbnjw"

    @property
    def non_backtracking(self):
        return self in (WalkKind.NBRW, WalkKind.NBNJW)

    @property
    def jumps(self):
        return self in (WalkKind.NJW, WalkKind.NBNJW)


WALK_KIND_ORDER = (WalkKind.URW, WalkKind.NBRW, WalkKind.NJW, WalkKind.NBNJW)


@functools.lru_cache(maxsize=64)
def _stream_key(seed, tag):
    words = np.random.SeedSequence([seed, STREAM_TAGS[tag]]).generate_state(2, np.uint64)
    return words


def stream_rng(seed, tag, node, index=0):
    """Counter-based generator for one (purpose, node, index) stream.

    Draws depend only on the arguments, never on which thread or in which order
    streams are consumed.
    """
    counter = np.array([0, 0, index, node], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=_stream_key(int(seed), tag), counter=counter))


class MixedWalkConfig(StrictModel):
    walks_per_node: int = Field(16, ge=0)
    walk_length: int = Field(4, ge=0)
    ratios: dict[WalkKind, float] = Field(
        default_factory=lambda: {WalkKind.URW: 0.25, WalkKind.NBRW: 0.25, WalkKind.NJW: 0.25, WalkKind.NBNJW: 0.25}
    )
    jump_radius: int = Field(DEFAULT_JUMP_RADIUS, ge=1)
    seed: int = 0

    @field_validator("ratios")
    @classmethod
    def _non_negative(cls, ratios):
        for kind, r in ratios.items():
            if r < 0:
                raise ValueError(f"ratio for {kind.value} is negative ({r})")
        return ratios

    @model_validator(mode="after")
    def _sum_to_one(self):
        total = sum(self.ratios.values())
        if abs(total - 1.0) > RATIO_TOLERANCE:
            raise ValueError(f"walk kind ratios must sum to 1, got {total}")
        return self

    def ratio(self, kind):
        return self.ratios.get(kind, 0.0)


@dataclass(frozen=True, eq=False)
class Walk:
    nodes: np.ndarray
    walk_kind: WalkKind
    truncated: bool = False

    @property
    def start(self):
        return int(self.nodes[0])

    @property
    def length(self):
        return len(self.nodes) - 1


@dataclass(frozen=True, eq=False)
class NodeTransitionModel:
    """Row-stochastic transition matrix in CSR form.

    Rows of isolated nodes are empty; `isolated` flags them. Column indices are
    sorted within each row.
    """
    indptr: np.ndarray
    indices: np.ndarray
    probs: np.ndarray
    walk_kind: WalkKind

    @property
    def node_count(self):
        return len(self.indptr) - 1

    @cached_property
    def isolated(self):
        return np.diff(self.indptr) == 0

    @cached_property
    def cumulative(self):
        # Row-wise running sums; the last entry of each row is pinned to 1
        counts = np.diff(self.indptr)
        cum = np.cumsum(self.probs)
        base = np.concatenate([[0.0], cum])[self.indptr[:-1]]
        cum = cum - np.repeat(base, counts)
        ends = self.indptr[1:][counts > 0]
        cum[ends - 1] = 1.0
        return cum

    def row(self, v):
        lo, hi = self.indptr[v], self.indptr[v + 1]
        return self.indices[lo:hi], self.probs[lo:hi]

    def to_sparse(self):
        n = self.node_count
        return sparse.csr_matrix((self.probs, self.indices, self.indptr), shape=(n, n))

    def to_dense(self):
        return self.to_sparse().toarray()


@dataclass(frozen=True, eq=False)
class EdgeTransitionRule:
    """Non-backtracking rule over directed edges (u -> v).

    From edge (u, v) the walker moves uniformly to any (v, y) with y != u; a
    dead end (deg v == 1) forces the reverse edge (v, u).
    """
    graph: object
    walk_kind: WalkKind = WalkKind.NBRW

    def probability(self, u, v, x, y):
        g = self.graph
        if not g.has_edge(u, v) or not g.has_edge(x, y) or x != v:
            return 0.0
        d = g.degree(v)
        if d == 1:
            return 1.0 if y == u else 0.0
        return 0.0 if y == u else 1.0 / (d - 1)


def uniform_transition(g):
    degrees = g.degrees.astype(np.float64)
    probs = np.repeat(np.divide(1.0, degrees, out=np.zeros_like(degrees), where=degrees > 0), g.degrees)
    return NodeTransitionModel(g.csr_offsets, g.csr_neighbors, probs, WalkKind.URW)


def nbrw_next(g, prev, cur, rng):
    """Next node of a non-backtracking walk currently on edge (prev, cur)."""
    if not g.has_edge(prev, cur):
        raise LogicError(f"({prev}, {cur}) is not an edge")
    d = g.degree(cur)
    if d == 1:
        return int(prev)
    nbrs = g.neighbors(cur)
    j = int(rng.integers(d - 1))
    if j >= np.searchsorted(nbrs, prev):
        j += 1
    return int(nbrs[j])


def njw_transition(g, k=DEFAULT_JUMP_RADIUS):
    """Neighborhood jump transition: (P + P^2 + ... + P^k) with the diagonal
    removed, then row-normalized (P is the uniform walk matrix)."""
    if k < 1:
        raise LogicError(f"jump radius must be >= 1, got {k}")
    p = uniform_transition(g).to_sparse().tocsr()
    step = p
    acc = p.copy()
    for _ in range(k - 1):
        step = step @ p
        acc = acc + step
    acc = acc.tolil()
    acc.setdiag(0)
    acc = acc.tocsr()
    acc.eliminate_zeros()
    acc.sort_indices()
    sums = np.asarray(acc.sum(axis=1)).ravel()
    scale = np.divide(1.0, sums, out=np.zeros_like(sums), where=sums > 0)
    acc = sparse.diags(scale) @ acc
    acc = acc.tocsr()
    acc.sort_indices()
    empty = int((sums == 0).sum())
    if empty:
        logger.debug("%d node(s) have no jump targets within %d hops", empty, k)
    return NodeTransitionModel(
        acc.indptr.astype(np.int64), acc.indices.astype(np.int64), acc.data.astype(np.float64), WalkKind.NJW
    )


def _choose(indices, cum_row, u):
    i = int(np.searchsorted(cum_row, u, side="right"))
    return int(indices[min(i, len(indices) - 1)])


def sample_walk(model, start, length, non_backtracking=False, rng=None):
    """Sample one walk of `length` edges from `start`.

    `model` is a NodeTransitionModel or an EdgeTransitionRule. With a node model
    and non_backtracking=True the previous node is excluded from each step,
    unless it is the only candidate. Isolated starts yield a one-node walk flagged
    as truncated, for any length.
    """
    rng = rng if rng is not None else np.random.default_rng()
    if isinstance(model, EdgeTransitionRule):
        return _sample_edge_walk(model, start, length, rng)

    kind = WalkKind.NBNJW if (non_backtracking and model.walk_kind == WalkKind.NJW) else model.walk_kind
    if not 0 <= start < model.node_count:
        raise InputError(f"start node {start} not in graph of {model.node_count} nodes")
    nodes = [int(start)]
    if model.indptr[start] == model.indptr[start + 1]:
        return Walk(np.asarray(nodes, dtype=np.int64), kind, truncated=True)
    prev, cur = -1, int(start)
    for _ in range(length):
        lo, hi = model.indptr[cur], model.indptr[cur + 1]
        if lo == hi:
            return Walk(np.asarray(nodes, dtype=np.int64), kind, truncated=True)
        ids = model.indices[lo:hi]
        nxt = None
        if non_backtracking and prev >= 0:
            pos = int(np.searchsorted(ids, prev))
            if pos < len(ids) and ids[pos] == prev and hi - lo > 1:
                p = model.probs[lo:hi].copy()
                p[pos] = 0.0
                total = p.sum()
                if total > 0:
                    nxt = _choose(ids, np.cumsum(p) / total, rng.random())
        if nxt is None:
            nxt = _choose(ids, model.cumulative[lo:hi], rng.random())
        prev, cur = cur, nxt
        nodes.append(cur)
    return Walk(np.asarray(nodes, dtype=np.int64), kind)


def _sample_edge_walk(rule, start, length, rng):
    g = rule.graph
    if not 0 <= start < g.node_count:
        raise InputError(f"start node {start} not in graph of {g.node_count} nodes")
    nodes = [int(start)]
    nbrs = g.neighbors(start)
    if not len(nbrs):
        return Walk(np.asarray(nodes, dtype=np.int64), rule.walk_kind, truncated=True)
    if length == 0:
        return Walk(np.asarray(nodes, dtype=np.int64), rule.walk_kind)
    prev, cur = int(start), int(nbrs[rng.integers(len(nbrs))])
    nodes.append(cur)
    for _ in range(length - 1):
        prev, cur = cur, nbrw_next(g, prev, cur, rng)
        nodes.append(cur)
    return Walk(np.asarray(nodes, dtype=np.int64), rule.walk_kind)


def apportion(total, ratios):
    """Split `total` into integer counts proportional to `ratios`.

    Floors first, then the leftover goes to the largest fractional parts; ties
    go to the earlier entry.
    """
    quotas = [total * r for r in ratios]
    counts = [int(np.floor(q + RATIO_TOLERANCE)) for q in quotas]
    left = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:max(left, 0)]:
        counts[i] += 1
    return counts


@dataclass(frozen=True, eq=False)
class WalkModels:
    """Transition models shared by every walk of a generation run."""
    uniform: NodeTransitionModel
    edge_rule: EdgeTransitionRule
    jump: NodeTransitionModel | None

    @classmethod
    def for_graph(cls, g, jump_radius=DEFAULT_JUMP_RADIUS, need_jump=True):
        return cls(uniform_transition(g), EdgeTransitionRule(g), njw_transition(g, jump_radius) if need_jump else None)

    def sample(self, kind, start, length, rng):
        if kind == WalkKind.URW:
            return sample_walk(self.uniform, start, length, False, rng)
        if kind == WalkKind.NBRW:
            return sample_walk(self.edge_rule, start, length, False, rng)
        return sample_walk(self.jump, start, length, kind == WalkKind.NBNJW, rng)


def generate_mixed_walks(g, cfg, workers=None):
    """Per node, cfg.walks_per_node walks split across kinds by cfg.ratios.

    Returns a list indexed by start node; each entry lists walks grouped by kind
    in URW, NBRW, NJW, NBNJW order. Walk j of node v draws from its own stream,
    so the result is identical for any worker count.
    """
    counts = apportion(cfg.walks_per_node, [cfg.ratio(k) for k in WALK_KIND_ORDER])
    plan = [k for k, c in zip(WALK_KIND_ORDER, counts) for _ in range(c)]
    need_jump = any(k.jumps for k in plan)
    models = WalkModels.for_graph(g, cfg.jump_radius, need_jump)
    logger.info("Generating %d walks/node (%s) of length %d over %d nodes",
                cfg.walks_per_node, ", ".join(f"{k.value}={c}" for k, c in zip(WALK_KIND_ORDER, counts)),
                cfg.walk_length, g.node_count)

    def run(block):
        return [
            [models.sample(kind, v, cfg.walk_length, stream_rng(cfg.seed, "walks", v, j))
             for j, kind in enumerate(plan)]
            for v in block
        ]

    blocks = [range(s, min(s + NODES_PER_TASK, g.node_count)) for s in range(0, g.node_count, NODES_PER_TASK)]
    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        result = [walks for part in pool.map(run, blocks) for walks in part]
    truncated = sum(w.truncated for walks in result for w in walks)
    if truncated:
        logger.warning("%d walk(s) truncated at isolated nodes", truncated)
    return result


def write_walks(path, walks_per_node, seed):
    """Text format: a '#kind=<k> seed=<s>' header whenever the kind changes,
    then one space-separated walk per line, node-major."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        current = None
        for walks in walks_per_node:
            for w in walks:
                if w.walk_kind != current:
                    current = w.walk_kind
                    f.write(f"#kind={current.value} seed={seed}\n")
                f.write(" ".join(map(str, w.nodes.tolist())) + "\n")


def read_walks(path, node_count):
    """Inverse of write_walks: walks grouped by their start node."""
    result = [[] for _ in range(node_count)]
    kind = None
    try:
        f = open(path)
    except FileNotFoundError:
        raise InputError(f"{path}: walks file not found") from None
    with f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                fields = dict(part.split("=", 1) for part in line[1:].split() if "=" in part)
                try:
                    kind = WalkKind(fields["kind"])
                except (KeyError, ValueError):
                    raise InputError(f"{path}:{lineno}: bad section header {line!r}") from None
                continue
            if kind is None:
                raise InputError(f"{path}:{lineno}: walk before any '#kind=' header")
            try:
                nodes = np.array(line.split(), dtype=np.int64)
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-integer node id") from None
            if nodes.min() < 0 or nodes.max() >= node_count:
                raise InputError(f"{path}:{lineno}: node id out of range 0..{node_count - 1}")
            result[nodes[0]].append(Walk(nodes, kind))
    return result
