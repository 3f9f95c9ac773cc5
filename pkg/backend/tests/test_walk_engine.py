import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError

from backend.core_pipeline.errors import InputError, LogicError
from backend.core_pipeline.graph_core import build_graph
from backend.core_pipeline.walk_engine import (EdgeTransitionRule, MixedWalkConfig, WalkKind, apportion,
                                               generate_mixed_walks, nbrw_next, njw_transition, read_walks,
                                               sample_walk, stream_rng, uniform_transition, write_walks)
from backend.core_pipeline.synthetic import stochastic_block_model


def random_graph(n, seed, p=0.4):
    rng = np.random.default_rng(seed)
    u, v = np.triu_indices(n, k=1)
    keep = rng.random(len(u)) < p
    return build_graph(np.column_stack([u[keep], v[keep]]), n)


def dense_njw_oracle(g, k):
    a = np.zeros((g.node_count, g.node_count))
    for u, v in g.edges():
        a[u, v] = a[v, u] = 1.0
    deg = a.sum(axis=1)
    p = np.divide(a, deg[:, None], out=np.zeros_like(a), where=deg[:, None] > 0)
    acc = sum(np.linalg.matrix_power(p, i) for i in range(1, k + 1))
    np.fill_diagonal(acc, 0.0)
    sums = acc.sum(axis=1, keepdims=True)
    return np.divide(acc, sums, out=np.zeros_like(acc), where=sums > 0)


def test_uniform_rows(p3, triangle):
    ids, probs = uniform_transition(p3).row(1)
    assert ids.tolist() == [0, 2] and probs.tolist() == [0.5, 0.5]
    ids, probs = uniform_transition(triangle).row(0)
    assert probs.tolist() == [0.5, 0.5]


def test_rows_sum_to_one(karate):
    for model in (uniform_transition(karate), njw_transition(karate, 3)):
        sums = np.asarray(model.to_sparse().sum(axis=1)).ravel()
        assert np.allclose(sums, 1.0, atol=1e-12)


def test_nbrw_next_forced_and_unique(p3, triangle):
    rng = np.random.default_rng(0)
    assert nbrw_next(triangle, 0, 1, rng) == 2
    assert nbrw_next(p3, 1, 0, rng) == 1
    with pytest.raises(LogicError):
        nbrw_next(p3, 0, 2, rng)


def test_edge_rule_probabilities(p3, karate):
    rule = EdgeTransitionRule(karate)
    v = 0
    u = int(karate.neighbors(v)[0])
    total = sum(rule.probability(u, v, v, int(y)) for y in karate.neighbors(v))
    assert total == pytest.approx(1.0)
    assert rule.probability(u, v, v, u) == 0.0
    assert EdgeTransitionRule(p3).probability(1, 0, 0, 1) == 1.0


def test_njw_worked_rows(p3, triangle):
    m = njw_transition(p3, 2).to_dense()
    assert m[0].tolist() == pytest.approx([0.0, 2 / 3, 1 / 3], abs=1e-12)
    m = njw_transition(triangle, 2).to_dense()
    assert m[0].tolist() == pytest.approx([0.0, 0.5, 0.5], abs=1e-12)


def test_njw_radius_one_is_uniform(karate):
    assert np.abs(njw_transition(karate, 1).to_dense() - uniform_transition(karate).to_dense()).max() <= 1e-12


def test_njw_matches_dense_oracle():
    worst = 0.0
    for seed in range(100):
        n = 2 + seed % 7
        g = random_graph(n, seed)
        for k in (1, 2, 3):
            worst = max(worst, np.abs(njw_transition(g, k).to_dense() - dense_njw_oracle(g, k)).max())
    assert worst <= 1e-12


def test_walk_length_zero_and_isolated():
    g = build_graph([(0, 1)], 3)
    w = sample_walk(uniform_transition(g), 0, 0, rng=np.random.default_rng(0))
    assert w.nodes.tolist() == [0] and w.length == 0 and not w.truncated
    w = sample_walk(uniform_transition(g), 2, 5, rng=np.random.default_rng(0))
    assert w.truncated and w.nodes.tolist() == [2]
    with pytest.raises(InputError):
        sample_walk(uniform_transition(g), 3, 1)


@pytest.mark.parametrize("length", [0, 1, 4])
@pytest.mark.parametrize("kind", ["urw", "nbrw", "njw", "nbnjw"])
def test_isolated_start_is_flagged_for_every_kind_and_length(kind, length):
    g = build_graph([(0, 1)], 3)
    if kind == "nbrw":
        model, nb = EdgeTransitionRule(g), False
    elif kind == "urw":
        model, nb = uniform_transition(g), False
    else:
        model, nb = njw_transition(g, 2), kind == "nbnjw"
    w = sample_walk(model, 2, length, non_backtracking=nb, rng=np.random.default_rng(0))
    assert w.truncated and w.nodes.tolist() == [2]
    assert w.walk_kind == WalkKind(kind)


def test_nbrw_on_p3_is_forced(p3):
    w = sample_walk(EdgeTransitionRule(p3), 0, 2, rng=np.random.default_rng(1))
    assert w.nodes.tolist() == [0, 1, 2]
    assert w.walk_kind == WalkKind.NBRW


def test_single_edge_alternates():
    g = build_graph([(0, 1)], 2)
    w = sample_walk(EdgeTransitionRule(g), 0, 5, rng=np.random.default_rng(0))
    assert w.nodes.tolist() == [0, 1, 0, 1, 0, 1]


def test_nbrw_never_backtracks_outside_dead_ends():
    steps = 0
    for seed in range(20):
        g = random_graph(12, seed, p=0.3)
        rule = EdgeTransitionRule(g)
        for v in range(g.node_count):
            w = sample_walk(rule, v, 40, rng=stream_rng(seed, "walks", v)).nodes
            for i in range(1, len(w) - 1):
                if w[i - 1] == w[i + 1]:
                    assert g.degree(int(w[i])) == 1
            steps += len(w) - 1
    assert steps >= 5000


def test_nbnjw_avoids_previous(karate):
    model = njw_transition(karate, 2)
    rng = np.random.default_rng(5)
    for v in range(karate.node_count):
        w = sample_walk(model, v, 20, non_backtracking=True, rng=rng)
        assert w.walk_kind == WalkKind.NBNJW
        assert all(w.nodes[i - 1] != w.nodes[i + 1] for i in range(1, len(w.nodes) - 1))


@pytest.mark.slow
def test_uniform_first_step_frequencies(karate):
    model = uniform_transition(karate)
    rng = np.random.default_rng(0)
    trials = 100_000
    hits = np.bincount([sample_walk(model, 0, 1, rng=rng).nodes[1] for _ in range(trials)], minlength=34)
    nbrs = karate.neighbors(0)
    p = 1 / 16
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(hits[nbrs] - trials * p) <= 3 * sigma)
    assert hits.sum() == hits[nbrs].sum()


@pytest.mark.parametrize("total, ratios, expected", [
    (100, (0.25, 0.25, 0.25, 0.25), [25, 25, 25, 25]),
    (10, (0.4, 0.3, 0.2, 0.1), [4, 3, 2, 1]),
    (3, (0.25, 0.25, 0.25, 0.25), [1, 1, 1, 0]),
    (7, (0.5, 0.5, 0.0, 0.0), [4, 3, 0, 0]),
])
def test_apportion(total, ratios, expected):
    assert apportion(total, ratios) == expected


@given(st.integers(0, 200), st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4))
@settings(max_examples=50)
def test_apportion_sums(total, weights):
    ratios = [w / sum(weights) for w in weights]
    assert sum(apportion(total, ratios)) == total


def test_mixed_walks_counts_and_determinism():
    g, _ = stochastic_block_model([15, 15], 0.4, 0.05, seed=1)
    cfg = MixedWalkConfig(walks_per_node=10, walk_length=4, seed=7,
                          ratios={"urw": 0.4, "nbrw": 0.3, "njw": 0.2, "nbnjw": 0.1})
    a = generate_mixed_walks(g, cfg, workers=1)
    b = generate_mixed_walks(g, cfg, workers=8)
    for v in range(g.node_count):
        kinds = [w.walk_kind for w in a[v]]
        assert [kinds.count(k) for k in (WalkKind.URW, WalkKind.NBRW, WalkKind.NJW, WalkKind.NBNJW)] == [4, 3, 2, 1]
        assert all(w.start == v for w in a[v])
        assert [w.nodes.tolist() for w in a[v]] == [w.nodes.tolist() for w in b[v]]


def test_ratios_must_sum_to_one():
    with pytest.raises(ValidationError):
        MixedWalkConfig(ratios={"urw": 0.5, "nbrw": 0.2})


def test_walks_file_round_trip(tmp_path, karate):
    cfg = MixedWalkConfig(walks_per_node=4, walk_length=3, seed=2)
    walks = generate_mixed_walks(karate, cfg)
    path = tmp_path / "walks.txt"
    write_walks(str(path), walks, cfg.seed)
    assert path.read_text().startswith("#kind=urw seed=2\n")
    back = read_walks(str(path), karate.node_count)
    assert [[w.nodes.tolist() for w in ws] for ws in back] == [[w.nodes.tolist() for w in ws] for ws in walks]
    assert [w.walk_kind for w in back[5]] == [w.walk_kind for w in walks[5]]


def test_read_walks_rejects_headerless(tmp_path):
    path = tmp_path / "walks.txt"
    path.write_text("0 1 2\n")
    with pytest.raises(InputError, match="header"):
        read_walks(str(path), 3)
