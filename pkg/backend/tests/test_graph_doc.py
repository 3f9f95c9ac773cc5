import json

import numpy as np
import pytest

from backend.core_pipeline.errors import InputError
from backend.core_pipeline.graph_core import build_graph
from backend.core_pipeline.graph_doc import (CLS, MASK, PAD, SEP, UNK, InputRepresentationTables, Vocabulary,
                                             default_mean_length, encode_sentence, generate_document,
                                             input_representation, load_document, max_sentence_tokens,
                                             save_document, degree_bucket)
from backend.core_pipeline.nn_kernel import ParamStore, Tensor, check_gradients, precision, sum_all
from backend.core_pipeline.walk_engine import Walk, WalkKind


def test_vocabulary_layout():
    vocab = Vocabulary(3)
    assert vocab.size == 8
    assert Vocabulary(2708).size == 2713
    assert MASK == 4
    assert vocab.token(0) == 5 and vocab.node(7) == 2
    assert vocab.token(3) == UNK


def test_encode_basic():
    s = encode_sentence(Vocabulary(3), [0, 1, 2], 6)
    assert s.token_ids.tolist() == [CLS, 5, 6, 7, SEP, PAD]
    assert s.attention_mask.astype(int).tolist() == [1, 1, 1, 1, 1, 0]
    assert s.real_positions.tolist() == [1, 2, 3]
    assert not s.truncated


def test_encode_single_node_walk():
    s = encode_sentence(Vocabulary(3), Walk(np.array([2]), WalkKind.NBRW), 5)
    assert s.token_ids.tolist() == [CLS, 7, SEP, PAD, PAD]


def test_encode_truncates_before_sep():
    s = encode_sentence(Vocabulary(10), list(range(8)), 6)
    assert s.truncated
    assert s.token_ids.tolist() == [CLS, 5, 6, 7, 8, SEP]


def test_encode_unknown_node():
    s = encode_sentence(Vocabulary(3), [0, 9], 5)
    assert s.unknown_count == 1
    assert s.token_ids[2] == UNK


def test_encode_round_trip_strips_specials():
    vocab = Vocabulary(20)
    walk = [3, 7, 3, 11, 19]
    s = encode_sentence(vocab, walk, 12)
    assert [vocab.node(t) for t in s.token_ids[s.real_positions]] == walk


def test_degree_buckets():
    assert degree_bucket([0, 1, 2, 3, 4, 7, 8, 15, 16, 31, 32, 500]).tolist() == [0, 1, 2, 3, 4, 4, 5, 5, 6, 6, 7, 7]


def test_default_mean_length_is_capped():
    assert default_mean_length(5) == 5
    assert default_mean_length(0) == 1
    assert default_mean_length(80) == 32


def test_document_counts_and_starts(karate):
    doc = generate_document(karate, 10, 2, 4, 1.0, seed=1)
    assert doc.node_count == 34
    for v in range(34):
        assert len(doc.train[v]) == 10 and len(doc.val[v]) == 2
        assert all(w.start == v and w.length >= 1 for w in doc.train[v] + doc.val[v])
        assert all(w.walk_kind == WalkKind.NBRW for w in doc.train[v])


def test_document_is_deterministic_across_workers(karate):
    a = generate_document(karate, 5, 1, 3, 1.0, seed=9, workers=1)
    b = generate_document(karate, 5, 1, 3, 1.0, seed=9, workers=6)
    assert [[w.nodes.tolist() for w in ws] for ws in a.train] == [[w.nodes.tolist() for w in ws] for ws in b.train]


def test_document_length_distribution(karate):
    doc = generate_document(karate, 300, 0, 10, 1.0, seed=0)
    lengths = np.array([w.length for ws in doc.train for w in ws])
    assert len(lengths) >= 10_000
    assert abs(lengths.mean() - 10) < 0.05
    assert abs(lengths.std() - 1.0) < 0.1
    assert lengths.min() >= 1 and lengths.max() <= 40


def test_single_edge_document_alternates():
    g = build_graph([(0, 1)], 2)
    doc = generate_document(g, 3, 0, 4, 1.0, seed=2)
    for w in doc.train[0]:
        assert w.nodes.tolist() == [i % 2 for i in range(len(w.nodes))]


def test_document_save_load(tmp_path, karate):
    doc = generate_document(karate, 3, 1, 3, 1.0, seed=4)
    save_document(str(tmp_path), doc)
    back = load_document(str(tmp_path), karate.node_count)
    assert back.mean_length == 3 and back.seed == 4 and back.walks_per_node == 3
    assert [w.nodes.tolist() for w in back.val[12]] == [w.nodes.tolist() for w in doc.val[12]]


def test_document_meta_keys(tmp_path, karate):
    save_document(str(tmp_path), generate_document(karate, 2, 0, 3, 0.5, seed=1))
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert set(meta) == {"mu", "sigma", "seed", "walks_per_node"}
    assert meta == {"mu": 3, "sigma": 0.5, "seed": 1, "walks_per_node": 2}


def test_incomplete_meta_is_rejected(tmp_path, karate):
    save_document(str(tmp_path), generate_document(karate, 2, 0, 3, 0.5, seed=1))
    (tmp_path / "meta.json").write_text(json.dumps({"mu": 3, "seed": 1}))
    with pytest.raises(InputError, match="sigma"):
        load_document(str(tmp_path), karate.node_count)


def test_max_sentence_tokens():
    # longest expected sentence is ceil(mu + 4 sigma) edges: that many nodes plus one, then CLS and SEP
    assert max_sentence_tokens(10, 1.0) == 17
    assert max_sentence_tokens(3, 0.5) == 8
    assert max_sentence_tokens(2, 0.3) == 7


@pytest.mark.parametrize("mu, sigma", [(10, 1.0), (3, 0.5), (2, 0.3)])
def test_sentence_capacity_boundary(mu, sigma):
    max_len = max_sentence_tokens(mu, sigma)
    edges = int(np.ceil(mu + 4 * sigma))
    vocab = Vocabulary(edges + 2)
    fits = encode_sentence(vocab, list(range(edges + 1)), max_len)
    assert not fits.truncated
    assert fits.token_ids[edges + 2] == SEP and fits.attention_mask.sum() == max_len
    over = encode_sentence(vocab, list(range(edges + 2)), max_len)
    assert over.truncated and over.token_ids[-1] == SEP


def _tables(seed, d_h=4, max_len=6, nodes=3, feature_dim=2):
    store = ParamStore(seed=seed)
    return store, InputRepresentationTables(store, Vocabulary(nodes), feature_dim, d_h, max_len)


def test_only_token_table_gives_token_rows():
    store, tables = _tables(0)
    for name, p in store.items():
        if name != "embed.token":
            p.value = np.zeros_like(p.value)
    features = np.ones((3, 2), dtype=np.float32)
    s = encode_sentence(Vocabulary(3), [0, 1, 2], 6)
    out = input_representation(tables, s, features, np.array([1, 2, 1]))
    assert np.array_equal(out.value, tables.token.value[s.token_ids])


def test_positions_are_the_only_difference():
    store, tables = _tables(1)
    features = np.random.default_rng(0).normal(size=(3, 2)).astype(np.float32)
    degrees = np.array([1, 2, 1])
    ids = np.array([[5, 6, 7]])
    a = tables(ids, features, degrees, positions=np.array([0, 1, 2])).value
    b = tables(ids, features, degrees, positions=np.array([3, 4, 5])).value
    assert np.allclose(a - b, tables.position.value[[0, 1, 2]] - tables.position.value[[3, 4, 5]], atol=1e-6)


def test_special_tokens_get_no_feature_or_centrality():
    store, tables = _tables(2)
    features = np.full((3, 2), 5.0, dtype=np.float32)
    s = encode_sentence(Vocabulary(3), [1], 4)
    out = input_representation(tables, s, features, np.array([1, 2, 1])).value
    for pos in (0, 2, 3):
        expected = tables.token.value[s.token_ids[pos]] + tables.position.value[pos]
        assert np.allclose(out[pos], expected, atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_input_representation_gradients(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        store, tables = _tables(seed)
        for p in store.params.values():
            p.value = rng.normal(size=p.shape)
        features = rng.normal(size=(3, 2))
        degrees = np.array([1, 2, 1])
        s = encode_sentence(Vocabulary(3), [0, 1, 2, 1], 6)
        r = Tensor(rng.normal(size=(6, 4)))
        loss = lambda: sum_all(input_representation(tables, s, features, degrees) * r)
        assert check_gradients(loss, list(store.params.values())) < 1e-4
