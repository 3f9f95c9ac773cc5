# graph_core.py - Immutable undirected graph (CSR) and structural queries
#
# Nodes are dense ids 0..n-1. Neighbor lists are sorted ascending, which every
# consumer (walkers, vocabularies, hop operators) relies on for determinism.

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import InputError, LogicError
from .settings import worker_count

logger = logging.getLogger(__name__)

# --- Configuration ---
BFS_CHUNK = 256  # sources per all-pairs distance sweep


@dataclass(frozen=True, eq=False)
class Graph:
    node_count: int
    edge_count: int
    csr_offsets: np.ndarray
    csr_neighbors: np.ndarray

    def __post_init__(self):
        self.csr_offsets.setflags(write=False)
        self.csr_neighbors.setflags(write=False)

    @cached_property
    def degrees(self):
        d = np.diff(self.csr_offsets)
        d.setflags(write=False)
        return d

    def degree(self, v):
        return int(self.csr_offsets[v + 1] - self.csr_offsets[v])

    def neighbors(self, v):
        return self.csr_neighbors[self.csr_offsets[v]:self.csr_offsets[v + 1]]

    def has_edge(self, u, v):
        if not (0 <= u < self.node_count and 0 <= v < self.node_count):
            return False
        nbrs = self.neighbors(u)
        i = np.searchsorted(nbrs, v)
        return bool(i < len(nbrs) and nbrs[i] == v)

    @cached_property
    def adjacency(self):
        """Symmetric 0/1 adjacency as a float64 CSR matrix."""
        data = np.ones(len(self.csr_neighbors), dtype=np.float64)
        return sparse.csr_matrix(
            (data, self.csr_neighbors, self.csr_offsets),
            shape=(self.node_count, self.node_count),
        )

    def edges(self):
        """Each undirected edge once, as an (|E|, 2) array with u < v."""
        src = np.repeat(np.arange(self.node_count), self.degrees)
        keep = src < self.csr_neighbors
        return np.column_stack([src[keep], self.csr_neighbors[keep]])

    def __repr__(self):
        return f"Graph(n={self.node_count}, |E|={self.edge_count})"


@dataclass(frozen=True)
class GraphMetrics:
    radius: int
    diameter: int
    is_connected: bool
    is_bipartite: bool
    eccentricities: np.ndarray
    component_count: int
    largest_component_size: int

    def as_dict(self):
        return {
            "radius": self.radius,
            "diameter": self.diameter,
            "is_connected": self.is_connected,
            "is_bipartite": self.is_bipartite,
            "component_count": self.component_count,
            "largest_component_size": self.largest_component_size,
        }


def build_graph(edges, node_count, line_numbers=None):
    """Build a simple undirected graph from an edge list.

    Duplicate and reversed edges collapse into one; self-loops are dropped.
    Out-of-range ids raise InputError naming the offending edge (or source line
    when `line_numbers` is given).
    """
    if node_count < 0:
        raise InputError(f"node_count must be non-negative, got {node_count}")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)

    bad = np.flatnonzero((edges < 0).any(axis=1) | (edges >= node_count).any(axis=1))
    if len(bad):
        i = int(bad[0])
        where = f"line {line_numbers[i]}" if line_numbers is not None else f"edge {i}"
        raise InputError(
            f"{where}: node id out of range in ({edges[i, 0]}, {edges[i, 1]}); expected 0..{node_count - 1}"
        )

    loops = edges[:, 0] == edges[:, 1]
    if loops.any():
        logger.debug("Dropping %d self-loop(s)", int(loops.sum()))
    edges = edges[~loops]

    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    keys = np.unique(src * max(node_count, 1) + dst)
    src, dst = np.divmod(keys, max(node_count, 1))

    offsets = np.zeros(node_count + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=node_count), out=offsets[1:])
    neighbors = dst.astype(np.int64)
    if len(neighbors) % 2:
        raise LogicError("Adjacency is not symmetric after canonicalization")
    return Graph(node_count, len(neighbors) // 2, offsets, neighbors)


def bfs_distances(g, source):
    """Hop distance from `source` to every node; -1 where unreachable."""
    dist = np.full(g.node_count, -1, dtype=np.int64)
    dist[source] = 0
    frontier = np.array([source], dtype=np.int64)
    level = 0
    while len(frontier):
        level += 1
        starts, ends = g.csr_offsets[frontier], g.csr_offsets[frontier + 1]
        nxt = np.concatenate([g.csr_neighbors[a:b] for a, b in zip(starts, ends)])
        nxt = np.unique(nxt)
        nxt = nxt[dist[nxt] < 0]
        dist[nxt] = level
        frontier = nxt
    return dist


def k_hop_neighborhood(g, v, k):
    """Nodes at distance 1..k from v; v itself is not included."""
    if not 0 <= v < g.node_count:
        raise InputError(f"node {v} not in graph of {g.node_count} nodes")
    if k < 1:
        raise InputError(f"k must be at least 1, got {k}")
    seen = np.zeros(g.node_count, dtype=bool)
    seen[v] = True
    frontier = np.array([v], dtype=np.int64)
    for _ in range(k):
        if not len(frontier):
            break
        nxt = np.unique(np.concatenate([g.neighbors(u) for u in frontier]))
        nxt = nxt[~seen[nxt]]
        seen[nxt] = True
        frontier = nxt
    seen[v] = False
    return set(np.flatnonzero(seen).tolist())


def connected_components(g):
    """(component count, per-node component label)."""
    if g.node_count == 0:
        return 0, np.zeros(0, dtype=np.int64)
    count, labels = csgraph.connected_components(g.adjacency, directed=False)
    return int(count), labels


def largest_component(g):
    """Sorted node ids of the largest connected component (lowest label on ties)."""
    count, labels = connected_components(g)
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    sizes = np.bincount(labels)
    return np.flatnonzero(labels == int(np.argmax(sizes)))


def subgraph(g, nodes):
    """Induced subgraph on `nodes`; returns (graph, original ids in new order)."""
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    remap = np.full(g.node_count, -1, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    e = g.edges()
    keep = (remap[e[:, 0]] >= 0) & (remap[e[:, 1]] >= 0)
    return build_graph(remap[e[keep]], len(nodes)), nodes


def _eccentricity_chunk(adj, sources):
    dist = csgraph.shortest_path(adj, method="D", unweighted=True, indices=sources)
    dist[np.isinf(dist)] = -1
    return dist.max(axis=1).astype(np.int64)


def compute_metrics(g, workers=None):
    """Radius, diameter, connectivity and bipartiteness.

    Radius and diameter are taken over the largest component; eccentricities are
    per node within its own component. Results do not depend on `workers`.
    """
    n = g.node_count
    if n == 0:
        return GraphMetrics(0, 0, True, True, np.zeros(0, dtype=np.int64), 0, 0)

    count, labels = connected_components(g)
    adj = g.adjacency
    chunks = [np.arange(s, min(s + BFS_CHUNK, n)) for s in range(0, n, BFS_CHUNK)]
    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        ecc = np.concatenate(list(pool.map(lambda c: _eccentricity_chunk(adj, c), chunks)))
    ecc = np.maximum(ecc, 0)

    biggest = largest_component(g)
    radius = int(ecc[biggest].min())
    diameter = int(ecc[biggest].max())

    # 2-colour each component by BFS depth parity from its lowest-id node
    roots = np.array([np.flatnonzero(labels == c)[0] for c in range(count)])
    depth = csgraph.shortest_path(adj, method="D", unweighted=True, indices=roots)
    parity = depth[labels, np.arange(n)].astype(np.int64) % 2
    e = g.edges()
    is_bipartite = bool(np.all(parity[e[:, 0]] != parity[e[:, 1]])) if len(e) else True

    metrics = GraphMetrics(
        radius=radius,
        diameter=diameter,
        is_connected=count == 1,
        is_bipartite=is_bipartite,
        eccentricities=ecc,
        component_count=count,
        largest_component_size=len(biggest),
    )
    if count > 1:
        logger.warning("Graph has %d components; radius/diameter use the largest (%d nodes)", count, len(biggest))
    return metrics
