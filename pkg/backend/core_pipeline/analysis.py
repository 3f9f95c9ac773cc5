# analysis.py - Numerical checks of the walk and tokenization theory
#
# Stationary distributions of the walkers, degree fingerprints, coverage of
# label sequences ("information types") by sampled walks, hop-vs-walk
# discrimination of rooted graphs, and runtime scaling of the token encoder.

import bisect
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from pydantic import Field
from scipy import sparse

from .errors import ConfigError, InputError
from .graph_core import compute_metrics, connected_components
from .nn_kernel import Encoder, Linear, ParamStore, Tensor, cross_entropy
from .settings import StrictModel, worker_count
from .synthetic import cycle_graph, path_graph, star_graph
from .tokenphormer import readout
from .walk_engine import (WalkKind, WalkModels, njw_transition, stream_rng, uniform_transition)

logger = logging.getLogger(__name__)

# --- Configuration ---
BURN_IN_FRACTION = 0.1
MAX_INFO_TYPES = 100_000
MAX_ENUMERATED_WALKS = 1_000_000
STATIONARY_TOL = 1e-13
STATIONARY_MAX_ITER = 100_000


class AnalysisConfig(StrictModel):
    stationary_steps: int = Field(1_000_000, ge=10)
    stationary_kinds: list[WalkKind] = Field(default_factory=lambda: [WalkKind.URW, WalkKind.NBRW])
    coverage_k: int = Field(3, ge=1)
    coverage_walks: int = Field(2000, ge=1)
    coverage_eps: float = Field(0.1, gt=0.0)
    coverage_seeds: int = Field(50, ge=1)
    coverage_kind: WalkKind = WalkKind.URW
    coverage_start: int | None = None  # default: highest-degree node
    discrimination_k: int = Field(3, ge=1)
    complexity_tokens: list[int] = Field(default_factory=lambda: [16, 32, 64, 128])
    complexity_feature_dims: list[int] = Field(default_factory=lambda: [32, 64])
    complexity_nodes: int = Field(64, ge=1)
    complexity_d_h: int = Field(16, ge=1)
    complexity_repeats: int = Field(3, ge=1)
    seed: int = 0


# --- Stationary distributions ---

@dataclass(frozen=True, eq=False)
class StationaryReport:
    walk_kind: WalkKind
    exact: np.ndarray
    empirical: np.ndarray
    tv: float
    steps: int
    bipartite: bool

    def as_row(self, seed):
        return {"walk_kind": self.walk_kind.value, "steps": self.steps, "seed": seed, "tv": self.tv,
                "bipartite_warning": self.bipartite}


def exact_stationary(g, edge_weights=None):
    """pi(v) = d_v / 2|E|, or with weights pi(v) = sum_k w_vk / sum_ik w_ik."""
    if g.edge_count == 0:
        raise InputError("stationary distribution needs at least one edge")
    if edge_weights is None:
        pi = g.degrees / (2.0 * g.edge_count)
    else:
        w = np.asarray(edge_weights, dtype=np.float64)
        if w.shape != g.csr_neighbors.shape:
            raise InputError(f"edge_weights must align with the CSR neighbor array ({len(g.csr_neighbors)} entries)")
        src = np.repeat(np.arange(g.node_count), g.degrees)
        strength = np.bincount(src, weights=w, minlength=g.node_count)
        pi = strength / strength.sum()
    return pi.astype(np.float64)


def chain_stationary(model):
    """Stationary distribution of a node-level chain by lazy power iteration."""
    p = model.to_sparse().T.tocsr()
    active = ~model.isolated
    pi = active / active.sum()
    for _ in range(STATIONARY_MAX_ITER):
        nxt = 0.5 * (pi + p @ pi)
        if np.abs(nxt - pi).sum() < STATIONARY_TOL:
            return nxt / nxt.sum()
        pi = nxt
    logger.warning("Power iteration did not reach %.0e after %d steps", STATIONARY_TOL, STATIONARY_MAX_ITER)
    return pi / pi.sum()


def total_variation(p, q):
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum())


def _reverse_slots(g):
    # slot of (v -> u) for every slot of (u -> v)
    src = np.repeat(np.arange(g.node_count), g.degrees)
    keys = g.csr_neighbors * g.node_count + src
    return np.searchsorted(src * g.node_count + g.csr_neighbors, keys)


def _long_chain(g, kind, steps, rng, jump=None):
    """Visit counts of one chain of `steps` transitions after burn-in."""
    indptr = g.csr_offsets.tolist()
    indices = g.csr_neighbors.tolist()
    deg = g.degrees.tolist()
    u = rng.random(steps + 1).tolist()
    burn = int(BURN_IN_FRACTION * steps)
    counts = [0] * g.node_count
    cur = int(rng.integers(g.node_count))
    while deg[cur] == 0:
        cur = int(rng.integers(g.node_count))

    if kind == WalkKind.URW:
        for t in range(steps):
            cur = indices[indptr[cur] + int(u[t] * deg[cur])]
            if t >= burn:
                counts[cur] += 1
    elif kind == WalkKind.NBRW:
        rev = _reverse_slots(g).tolist()
        slot = indptr[cur] + int(u[steps] * deg[cur])
        cur = indices[slot]
        for t in range(steps):
            d = deg[cur]
            back = rev[slot]
            if d == 1:
                slot = back
            else:
                j = indptr[cur] + int(u[t] * (d - 1))
                slot = j + 1 if j >= back else j
            cur = indices[slot]
            if t >= burn:
                counts[cur] += 1
    elif kind == WalkKind.NJW:
        jp, ji = jump.indptr.tolist(), jump.indices.tolist()
        cum = jump.cumulative.tolist()
        for t in range(steps):
            lo, hi = jp[cur], jp[cur + 1]
            cur = ji[min(bisect.bisect_right(cum, u[t], lo, hi), hi - 1)]
            if t >= burn:
                counts[cur] += 1
    else:
        raise ConfigError(f"no closed-form stationary distribution for {kind.value}; use urw, nbrw or njw")
    return np.asarray(counts, dtype=np.float64)


def empirical_stationary(g, walk_kind, steps, seed, jump_radius=3, metrics=None):
    """Simulate one long walk and compare time-averaged visits with the exact
    stationary distribution (degree-proportional for urw/nbrw, the chain's own
    for njw)."""
    walk_kind = WalkKind(walk_kind)
    count, _ = connected_components(g)
    if count != 1:
        raise InputError(
            f"graph has {count} connected components; restrict it with "
            "graph_core.subgraph(g, graph_core.largest_component(g)) first"
        )
    metrics = metrics or compute_metrics(g)
    if metrics.is_bipartite:
        logger.warning("Graph is bipartite: reporting time-averaged visit frequencies")

    jump = njw_transition(g, jump_radius) if walk_kind == WalkKind.NJW else None
    exact = chain_stationary(jump) if jump is not None else exact_stationary(g)
    visits = _long_chain(g, walk_kind, steps, stream_rng(seed, "analysis", 0, steps), jump)
    empirical = visits / visits.sum()
    return StationaryReport(walk_kind, exact, empirical, total_variation(exact, empirical), steps,
                            metrics.is_bipartite)


def stationary_sweep(g, walk_kind, step_counts, seeds, workers=None):
    """TV distance for every (steps, seed) pair; chains run in parallel."""
    metrics = compute_metrics(g)
    jobs = [(s, seed) for s in step_counts for seed in seeds]
    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        reports = list(pool.map(lambda job: empirical_stationary(g, walk_kind, job[0], job[1], metrics=metrics), jobs))
    return pd.DataFrame([r.as_row(seed) for r, (_, seed) in zip(reports, jobs)])


# --- Degree fingerprints ---

def degree_fingerprint(g):
    if g.edge_count == 0:
        return np.zeros(g.node_count)
    return np.sort(g.degrees / (2.0 * g.edge_count))


def fingerprints_distinguish(ga, gb):
    fa, fb = degree_fingerprint(ga), degree_fingerprint(gb)
    if fa.shape != fb.shape:
        return True
    return not np.allclose(fa, fb, rtol=0.0, atol=1e-12)


# --- Coverage of information types ---

@dataclass(frozen=True, eq=False)
class CoverageReport:
    types: list
    exact: np.ndarray
    empirical: np.ndarray
    deviations: np.ndarray
    n_walks: int
    eps: float
    bound: float

    @property
    def max_deviation(self):
        return float(self.deviations.max()) if len(self.deviations) else 0.0

    @property
    def violation_fraction(self):
        return float((self.deviations > self.eps).mean()) if len(self.deviations) else 0.0

    def type_table(self):
        return pd.DataFrame({
            "type": ["-".join(map(str, t)) for t in self.types],
            "exact_probability": self.exact,
            "empirical_frequency": self.empirical,
            "deviation": self.deviations,
        })


def label_limited_transition(model, labels, label):
    """Transition matrix with every column whose node is not labelled `label` zeroed."""
    keep = (np.asarray(labels) == label).astype(np.float64)
    out = (model.to_sparse() @ sparse.diags(keep)).tocsr()
    out.eliminate_zeros()
    return out


def info_type_probability(model, labels, start, info_type):
    """Probability that a walk from `start` sees labels info_type[0], info_type[1], ...
    on its next len(info_type) nodes."""
    if len(info_type) < 1:
        raise ConfigError("information types have length >= 1")
    row = np.zeros(model.node_count)
    row[start] = 1.0
    for label in info_type:
        row = label_limited_transition(model, labels, label).T @ row
    return float(row.sum())


def enumerate_info_types(model, labels, start, k):
    """All length-k label sequences with nonzero probability from `start`."""
    alphabet = np.unique(labels)
    if len(alphabet) ** k > MAX_INFO_TYPES:
        raise ConfigError(f"{len(alphabet)}^{k} information types exceed {MAX_INFO_TYPES}; use a smaller k")
    limited = {int(l): label_limited_transition(model, labels, l).T.tocsr() for l in alphabet}
    row = np.zeros(model.node_count)
    row[start] = 1.0
    result = {}

    def visit(prefix, vec):
        if len(prefix) == k:
            result[tuple(prefix)] = float(vec.sum())
            return
        for label, mat in limited.items():
            nxt = mat @ vec
            if nxt.any():
                visit(prefix + [label], nxt)

    visit([], row)
    return result


def hoeffding_bound(eps, n):
    """exp(-2 eps^2 n) / n."""
    return float(np.exp(-2.0 * eps * eps * n) / n)


def coverage_experiment(g, labels, start, k, n_walks, eps, seed, walk_kind=WalkKind.URW, jump_radius=3):
    """Compare exact information-type probabilities with frequencies over
    n_walks sampled walks of length k from `start`."""
    walk_kind = WalkKind(walk_kind)
    if walk_kind.non_backtracking:
        raise ConfigError(f"coverage needs a node-level chain; {walk_kind.value} is non-backtracking")
    labels = np.asarray(labels)
    model = uniform_transition(g) if walk_kind == WalkKind.URW else njw_transition(g, jump_radius)
    exact = enumerate_info_types(model, labels, start, k)
    types = sorted(exact)

    models = WalkModels(model if walk_kind == WalkKind.URW else uniform_transition(g), None,
                        model if walk_kind == WalkKind.NJW else None)
    observed = {}
    for j in range(n_walks):
        walk = models.sample(walk_kind, start, k, stream_rng(seed, "analysis", start, j))
        key = tuple(int(l) for l in labels[walk.nodes[1:]])
        observed[key] = observed.get(key, 0) + 1
    unseen = set(observed) - set(exact)
    if unseen:
        types += sorted(unseen)

    p = np.array([exact.get(t, 0.0) for t in types])
    freq = np.array([observed.get(t, 0) / n_walks for t in types])
    return CoverageReport(types, p, freq, np.abs(freq - p), n_walks, eps, hoeffding_bound(eps, n_walks))


def coverage_sweep(g, labels, start, k, n_walks, eps, seeds, walk_kind=WalkKind.URW, workers=None):
    """One summary row per seed: max deviation, violation fraction and bound."""
    def run(seed):
        r = coverage_experiment(g, labels, start, k, n_walks, eps, seed, walk_kind)
        return {"seed": seed, "start": start, "k": k, "n_walks": n_walks, "eps": eps, "types": len(r.types),
                "max_deviation": r.max_deviation, "violation_fraction": r.violation_fraction, "bound": r.bound}

    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        return pd.DataFrame(list(pool.map(run, seeds)))


# --- Hop vs walk discrimination ---

@dataclass(frozen=True, eq=False)
class RootedGraph:
    graph: object
    root: int
    features: np.ndarray | None = None

    def feature_matrix(self):
        if self.features is None:
            return np.ones((self.graph.node_count, 1))
        return np.asarray(self.features, dtype=np.float64)


@dataclass
class DiscriminationReport:
    k: int
    hop_aggregates: dict = field(default_factory=dict)
    hop_distinguishes: bool = False
    walk_distinguishes: bool = False
    walk_distinguishes_by_kind: dict = field(default_factory=dict)
    nb_return_probability: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "k": self.k,
            "hop_aggregates": self.hop_aggregates,
            "hop_distinguishes": self.hop_distinguishes,
            "walk_distinguishes": self.walk_distinguishes,
            "walk_distinguishes_by_kind": self.walk_distinguishes_by_kind,
            "nb_return_probability": self.nb_return_probability,
        }


def _hop_rows(rooted, k):
    x = rooted.feature_matrix()
    a = rooted.graph.adjacency
    rows = [x[rooted.root]]
    cur = x
    for _ in range(k):
        cur = a @ cur
        rows.append(cur[rooted.root])
    return [np.asarray(r, dtype=np.float64) for r in rows]


def walk_signature(rooted, k, non_backtracking):
    """Exact distribution of anonymized walks of length 1..k from the root.

    A walk is recorded as its sequence of (feature vector, first-visit index)
    pairs, so node identities are hidden but revisits are not.
    """
    g = rooted.graph
    max_deg = int(g.degrees.max()) if g.node_count else 0
    if max_deg ** k > MAX_ENUMERATED_WALKS:
        raise ConfigError(f"enumerating {max_deg}^{k} walks exceeds {MAX_ENUMERATED_WALKS}; use a smaller k")
    feats = [tuple(np.round(r, 12)) for r in rooted.feature_matrix()]
    signature = {}

    def extend(path, prob):
        length = len(path) - 1
        if length:
            seen = {}
            key = tuple((feats[v], seen.setdefault(v, len(seen))) for v in path)
            signature[key] = signature.get(key, 0.0) + prob
        if length == k:
            return
        cur = path[-1]
        nbrs = g.neighbors(cur).tolist()
        if not nbrs:
            return
        if non_backtracking and length >= 1 and len(nbrs) > 1:
            nbrs = [y for y in nbrs if y != path[-2]]
        for y in nbrs:
            extend(path + [y], prob / len(nbrs))

    extend([rooted.root], 1.0)
    return signature


def _same_distribution(a, b, tol=1e-12):
    if set(a) != set(b):
        return False
    return all(abs(a[key] - b[key]) <= tol for key in a)


def return_probability(rooted, length):
    """Probability that a non-backtracking walk is back at the root after `length` steps."""
    sig = walk_signature(rooted, length, non_backtracking=True)
    return sum(p for key, p in sig.items() if len(key) == length + 1 and key[-1][1] == 0)


def hop_walk_discrimination(a, b, k):
    """Can hop aggregates (A^d X at the root, d <= k) or walk signatures tell
    two rooted graphs apart?"""
    report = DiscriminationReport(k)
    hops_a, hops_b = _hop_rows(a, k), _hop_rows(b, k)
    if len(hops_a[0]) != len(hops_b[0]):
        raise InputError("both rooted graphs need features of the same width")
    report.hop_aggregates = {"a": [h.tolist() for h in hops_a], "b": [h.tolist() for h in hops_b]}
    report.hop_distinguishes = any(not np.allclose(x, y, rtol=0.0, atol=1e-9) for x, y in zip(hops_a, hops_b))

    for name, nb in (("uniform", False), ("non_backtracking", True)):
        differs = not _same_distribution(walk_signature(a, k, nb), walk_signature(b, k, nb))
        report.walk_distinguishes_by_kind[name] = differs
    report.walk_distinguishes = any(report.walk_distinguishes_by_kind.values())
    report.nb_return_probability = {"a": return_probability(a, k), "b": return_probability(b, k)}
    return report


# --- Runtime scaling ---

@dataclass(frozen=True, eq=False)
class ComplexityReport:
    table: pd.DataFrame
    exponent: float
    space: pd.DataFrame


def space_estimate(width, layers, batch, n_tokens):
    """Floats held by one training step of the token encoder, split by term."""
    terms = {
        "weight_floats": width * width * layers,
        "attention_floats": batch * n_tokens * n_tokens,
        "activation_floats": batch * n_tokens * width,
    }
    terms["total_floats"] = sum(terms.values())
    return terms


def _probe_once(n_tokens, d_f, d_h, nodes, heads, layers, classes, rng):
    store = ParamStore(seed=int(rng.integers(2**31)))
    proj = Linear(store, "proj", d_f, d_h)
    encoder = Encoder(store, "encoder", d_h, layers, heads)
    w_a = store.create("readout.w", 2 * d_h, 1)
    head = Linear(store, "head", d_h, classes)
    x = Tensor(rng.normal(size=(nodes * n_tokens, d_f)))
    y = rng.integers(classes, size=nodes)
    started = time.perf_counter()
    h = encoder(proj(x), n_tokens)
    h_fin, _ = readout(h, w_a, n_tokens)
    cross_entropy(head(h_fin), y).backward()
    return time.perf_counter() - started, store.count()


def complexity_probe(token_counts, feature_dims, d_h=16, nodes=64, repeats=3, heads=1, layers=1,
                     classes=4, seed=0):
    """Forward+backward seconds per node for each (N_t, d_F); the log-log slope
    against N_t is fitted at the first feature width."""
    token_counts = sorted(token_counts)
    if len(token_counts) < 3 or token_counts[-1] < 4 * token_counts[0]:
        raise ConfigError("complexity probe needs >= 3 token counts spanning at least 4x")
    rng = np.random.default_rng(seed)
    rows, space = [], []
    for d_f in feature_dims:
        for n_t in token_counts:
            runs = [_probe_once(n_t, d_f, d_h, nodes, heads, layers, classes, rng) for _ in range(repeats)]
            seconds = min(r[0] for r in runs) / nodes
            rows.append({"N_t": n_t, "d_F": d_f, "seconds_per_node": seconds})
            space.append({"N_t": n_t, "d_F": d_f, "parameters": runs[0][1],
                          "token_floats_per_node": n_t * (d_f + d_h),
                          "attention_floats_per_node": heads * layers * n_t * n_t,
                          **space_estimate(d_h, layers, nodes, n_t)})
    table = pd.DataFrame(rows)
    first = table[table["d_F"] == feature_dims[0]]
    slope = float(np.polyfit(np.log(first["N_t"]), np.log(first["seconds_per_node"]), 1)[0])
    logger.info("Time per node grows as N_t^%.2f", slope)
    return ComplexityReport(table, slope, pd.DataFrame(space))


def reference_pairs():
    """Rooted pairs with known verdicts: C3 vs C6 (hop-blind, walk-visible)
    and P3 vs a 4-leaf star rooted at their centers (hop-visible at depth 1)."""
    return {
        "c3_vs_c6": (RootedGraph(cycle_graph(3), 0), RootedGraph(cycle_graph(6), 0)),
        "p3_vs_star4": (RootedGraph(path_graph(3), 1), RootedGraph(star_graph(4), 0)),
    }
