import numpy as np
import pytest

from backend.core_pipeline.graph_doc import CLS, MASK, SEP, Vocabulary, encode_batch, encode_sentence, generate_document
from backend.core_pipeline.nn_kernel import check_gradients, cross_entropy, gather_rows, precision
from backend.core_pipeline.sgpm import (CHECKPOINT_FILE, HISTORY_FILE, SgpmConfig, SgpmModel, apply_masking,
                                        export_sgpm_tokens, load_sgpm_model, load_sgpm_tokens, mlm_loss,
                                        plan_batch_masking, plan_masking, pretrain, save_sgpm_tokens)
from backend.core_pipeline.synthetic import make_sbm_dataset

TINY = dict(d_h=8, layers=1, heads=1, dropout=0.0, batch_size=32, seed=3)


def _sentence(real, max_len=None):
    max_len = max_len or real + 4
    return encode_sentence(Vocabulary(real + 1), list(range(real)), max_len)


def test_mask_count_rounds():
    plan = plan_masking(_sentence(20), 0.15, np.random.default_rng(0))
    assert len(plan) == 3
    assert set(plan.positions.tolist()) <= set(range(1, 21))


def test_rate_zero_and_minimum_rule():
    s = _sentence(20)
    assert len(plan_masking(s, 0.0, np.random.default_rng(0))) == 1
    assert len(plan_masking(s, 0.0, np.random.default_rng(0), min_one=False)) == 0


def test_specials_never_masked():
    vocab = Vocabulary(30)
    rng = np.random.default_rng(1)
    walks = [list(rng.integers(30, size=rng.integers(1, 12))) for _ in range(10_000)]
    tokens, attn, _ = encode_batch(vocab, walks, 14)
    plan = plan_batch_masking(tokens, attn, 0.3, rng)
    masked = tokens[plan.rows, plan.positions]
    assert not np.isin(masked, [CLS, SEP, 0]).any()
    assert np.array_equal(plan.targets, masked)
    assert np.array_equal(np.unique(plan.rows), np.arange(10_000))


def test_masking_only_touches_planned_positions():
    s = _sentence(10)
    plan = plan_masking(s, 0.3, np.random.default_rng(4))
    masked = apply_masking(s.token_ids, plan)[0]
    changed = np.flatnonzero(masked != s.token_ids)
    assert changed.tolist() == plan.positions.tolist()
    assert (masked[changed] == MASK).all()


@pytest.fixture
def sbm():
    return make_sbm_dataset([20, 20], 0.3, 0.02, seed=5)


def _model(ds, **overrides):
    cfg = SgpmConfig(**{**TINY, **overrides})
    return SgpmModel(Vocabulary(ds.node_count), ds.features, ds.graph.degrees, cfg, max_len=8), cfg


def test_untrained_loss_is_near_uniform(sbm):
    model, _ = _model(sbm)
    rng = np.random.default_rng(0)
    walks = [list(rng.integers(40, size=5)) for _ in range(64)]
    tokens, attn, _ = encode_batch(model.vocab, walks, 8)
    plan = plan_batch_masking(tokens, attn, 0.15, rng)
    loss = model.masked_loss(tokens, attn, plan).value[0, 0]
    assert loss == pytest.approx(np.log(model.vocab.size), rel=0.05)


def test_mlm_loss_matches_gathered_cross_entropy(sbm):
    model, _ = _model(sbm)
    s = encode_sentence(model.vocab, [0, 3, 7, 3, 1], 8)
    plan = plan_masking(s, 0.5, np.random.default_rng(2))
    h = model.hidden(apply_masking(s.token_ids, plan), s.attention_mask[None, :])
    expected = cross_entropy(model.output(gather_rows(h, plan.positions)), plan.targets).value[0, 0]
    assert mlm_loss(model, s, plan).value[0, 0] == pytest.approx(expected, abs=1e-6)


def test_empty_plan_gives_zero_loss(sbm):
    model, _ = _model(sbm)
    s = encode_sentence(model.vocab, [0, 1], 8)
    plan = plan_masking(s, 0.0, np.random.default_rng(0), min_one=False)
    assert mlm_loss(model, s, plan).value[0, 0] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_mlm_loss_gradients(seed):
    ds = make_sbm_dataset([3, 3], 0.8, 0.2, seed=seed)
    with precision(np.float64):
        model, _ = _model(ds, d_h=4, seed=seed)
        rng = np.random.default_rng(seed)
        for p in model.store.params.values():
            p.value = p.value + rng.normal(size=p.shape) * 0.3
        s = encode_sentence(model.vocab, [0, 1, 2, 4], 8)
        plan = plan_masking(s, 0.5, rng)
        worst = check_gradients(lambda: mlm_loss(model, s, plan), list(model.store.params.values()))
    assert worst < 1e-4


def test_export_input_tokens_differ_only_by_token_rows():
    ds = make_sbm_dataset([4, 4], 1.0, 0.0, seed=1)
    model, _ = _model(ds)
    tokens = export_sgpm_tokens(model, "input")
    assert tokens.shape == (8, 8)
    # nodes 0 and 1 share block, degree and features
    diff = model.tables.token.value[5] - model.tables.token.value[6]
    assert np.allclose(tokens[0] - tokens[1], diff, atol=1e-6)


def test_contextual_export_shape(sbm):
    doc = generate_document(sbm.graph, 2, 1, 2, 0.5, seed=0)
    model, _ = _model(sbm)
    assert export_sgpm_tokens(model, "contextual", doc).shape == (40, 8)


def test_pretrain_is_deterministic_and_checkpoints(tmp_path, sbm):
    doc = generate_document(sbm.graph, 4, 1, 2, 1.0, seed=1)
    cfg = SgpmConfig(**{**TINY, "epochs": 2})
    a = pretrain(doc, sbm, cfg, output_dir=str(tmp_path))
    b = pretrain(doc, sbm, cfg)
    assert [r["train_loss"] for r in a.history] == [r["train_loss"] for r in b.history]
    assert [r["epoch"] for r in a.history] == [0, 1, 2]
    assert (tmp_path / CHECKPOINT_FILE).exists()
    assert len((tmp_path / HISTORY_FILE).read_text().splitlines()) == 3

    meta = {"mu": doc.mean_length, "sigma": doc.std_length}
    reloaded = load_sgpm_model(str(tmp_path / CHECKPOINT_FILE), sbm, meta, cfg)
    assert np.array_equal(export_sgpm_tokens(reloaded), export_sgpm_tokens(a.model))


def test_tokens_file_round_trip(tmp_path):
    tokens = np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32)
    save_sgpm_tokens(str(tmp_path), tokens, "sgpm/sgpm.ckpt")
    assert np.array_equal(load_sgpm_tokens(str(tmp_path)), tokens)
    assert (tmp_path / "sgpm_tokens.bin").stat().st_size == 5 * 3 * 4


@pytest.mark.slow
def test_pretraining_learns_the_document():
    ds = make_sbm_dataset([100, 100], 0.05, 0.005, seed=0)
    doc = generate_document(ds.graph, 10, 2, 4, 1.0, seed=0)
    cfg = SgpmConfig(d_h=64, layers=1, heads=1, dropout=0.0, lr=5e-3, batch_size=64, epochs=50, seed=0)
    result = pretrain(doc, ds, cfg)
    first = result.history[0]
    assert first["train_loss"] == pytest.approx(np.log(ds.node_count + 5), rel=0.05)
    assert result.best_val_loss <= 0.7 * first["val_loss"]

    tokens = export_sgpm_tokens(result.model)
    unit = tokens / np.linalg.norm(tokens, axis=1, keepdims=True)
    sim = unit @ unit.T
    same = ds.labels[:, None] == ds.labels[None, :]
    np.fill_diagonal(same, False)
    cross = ds.labels[:, None] != ds.labels[None, :]
    assert sim[same].mean() > sim[cross].mean()
