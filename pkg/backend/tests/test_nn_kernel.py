import numpy as np
import pytest

from backend.core_pipeline.errors import InputError, LogicError, NumericError
from backend.core_pipeline.nn_kernel import (Encoder, FeedForward, LayerNorm, Linear, MultiHeadSelfAttention,
                                             ParamStore, Tensor, add, attention, check_gradients, concat_cols,
                                             cross_entropy, dropout, gather_rows, layer_norm, load_checkpoint,
                                             matmul, mean_all, optimizer_step, precision, read_checkpoint, relu,
                                             save_checkpoint, segment_softmax, softmax_rows, sum_all)

GRAD_TOL = 1e-4
SEEDS = range(20)


def test_softmax_constant_row():
    y = softmax_rows(Tensor(np.full((1, 4), 3.0)))
    assert np.allclose(y.value, 0.25)


def test_softmax_rows_sum_to_one():
    y = softmax_rows(Tensor(np.random.default_rng(0).normal(size=(6, 9)) * 10))
    assert np.allclose(y.value.sum(axis=1), 1.0, atol=1e-6)


def test_layer_norm_constant_row_is_zero():
    store = ParamStore()
    ln = LayerNorm(store, "ln", 5)
    assert np.allclose(ln(Tensor(np.full((2, 5), 7.0))).value, 0.0)


def test_dropout_identity_when_off():
    x = Tensor(np.ones((3, 3)))
    assert dropout(x, 0.0, np.random.default_rng(0), training=True) is x
    assert dropout(x, 0.5, np.random.default_rng(0), training=False) is x


def test_dropout_inverted_scaling():
    x = Tensor(np.ones((200, 50)))
    y = dropout(x, 0.1, np.random.default_rng(0), training=True).value
    kept = y[y != 0]
    assert np.allclose(kept, np.float32(1 / 0.9), rtol=1e-6)
    assert abs(y.mean() - 1.0) < 0.02


def test_matmul_shape_error_names_shapes():
    with pytest.raises(LogicError, match=r"\(2, 3\) @ \(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_trips_numeric_error():
    with pytest.raises(NumericError):
        add(Tensor(np.array([[np.inf]])), Tensor(np.ones((1, 1))))


def test_single_token_attention_weight_is_one():
    store = ParamStore(seed=1)
    msa = MultiHeadSelfAttention(store, "msa", 4, 2)
    h = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    out = msa(h, seq_len=1)
    q, k, v = msa.q(h), msa.k(h), msa.v(h)
    a = attention(q, k, v, 1, 2)
    assert np.allclose(a.aux, 1.0)
    assert np.allclose(out.value, msa.o(v).value, atol=1e-6)


def test_identical_rows_attend_uniformly():
    h = np.tile(np.random.default_rng(2).normal(size=(1, 6)), (5, 1))
    t = Tensor(h)
    mask = np.array([[True, True, True, False, True]])
    a = attention(t, t, t, 5, 2, key_mask=mask)
    assert np.allclose(a.aux[0, :, :, 3], 0.0)
    assert np.allclose(a.aux[0, :, :, [0, 1, 2, 4]], 0.25)


def test_heads_must_divide_width():
    with pytest.raises(LogicError):
        MultiHeadSelfAttention(ParamStore(), "msa", 6, 4)


def test_ffn_zero_and_homogeneous():
    store = ParamStore(seed=3)
    f = FeedForward(store, "ffn", 4)
    assert np.allclose(f(Tensor(np.zeros((2, 4)))).value, 0.0)
    x = np.abs(np.random.default_rng(0).normal(size=(2, 4)))
    assert np.allclose(f(Tensor(2.5 * x)).value, 2.5 * f(Tensor(x)).value, atol=1e-5)


def test_cross_entropy_cases():
    assert cross_entropy(Tensor(np.array([[50.0, 0.0, 0.0]])), [0]).value[0, 0] < 1e-6
    assert cross_entropy(Tensor(np.zeros((4, 7))), [0, 1, 2, 3]).value[0, 0] == pytest.approx(np.log(7), rel=1e-6)
    with pytest.raises(InputError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_cross_entropy_matches_high_precision_oracle():
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(5, 3))
    targets = rng.integers(3, size=5)
    with precision(np.float64):
        got = cross_entropy(Tensor(logits), targets).value[0, 0]
    expected = np.mean([np.log(np.exp(row).sum()) - row[t] for row, t in zip(logits.astype(np.longdouble), targets)])
    assert abs(got - float(expected)) < 1e-6


def test_adamw_first_step():
    store = ParamStore()
    p = store.create("p", 1, 1, init="ones")
    p.grad = np.ones((1, 1))
    optimizer_step(store, lr=0.1, weight_decay=0.0)
    assert p.value[0, 0] == pytest.approx(0.9, abs=1e-6)


def test_adamw_zero_grad_and_decay():
    store = ParamStore()
    p = store.create("p", 1, 2, init="ones")
    p.grad = np.zeros((1, 2))
    optimizer_step(store, lr=0.1, weight_decay=0.0)
    assert np.array_equal(p.value, np.ones((1, 2)))
    p.grad = np.zeros((1, 2))
    optimizer_step(store, lr=0.1, weight_decay=0.1)
    assert np.allclose(p.value, 0.99)


# --- gradient checks (64-bit) ---

def _rng_tensor(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradients_elementwise_and_rows(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        x = _rng_tensor(rng, 4, 3)
        y = _rng_tensor(rng, 1, 3)
        w = _rng_tensor(rng, 6, 1)
        idx = rng.integers(4, size=6)
        seg = np.sort(rng.integers(3, size=6))
        weights = rng.normal(size=(6, 6))

        def loss():
            g = gather_rows(add(x, y) * x, idx)
            c = concat_cols([g, softmax_rows(g)])
            s = segment_softmax(matmul(c, Tensor(np.ones((6, 1)))) + w, seg, 3)
            return sum_all(matmul(c, Tensor(weights)) * s)

        assert check_gradients(loss, [x, y, w]) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_gradients_layer_norm(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        x, gain, bias = _rng_tensor(rng, 3, 5), _rng_tensor(rng, 1, 5), _rng_tensor(rng, 1, 5)
        r = rng.normal(size=(3, 5))
        assert check_gradients(lambda: sum_all(layer_norm(x, gain, bias) * Tensor(r)), [x, gain, bias]) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_gradients_attention(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        store = ParamStore(seed=seed)
        msa = MultiHeadSelfAttention(store, "msa", 4, 2)
        for p in store.params.values():
            p.value = rng.normal(size=p.shape) * 0.5
        h = _rng_tensor(rng, 2 * 3, 4)
        mask = np.array([[True, True, False], [True, True, True]])
        params = [h] + list(store.params.values())
        assert check_gradients(lambda: sum_all(msa(h, 3, mask)), params) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_gradients_ffn_and_encoder(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        store = ParamStore(seed=seed)
        enc = Encoder(store, "enc", 4, layers=2, heads=1)
        for p in store.params.values():
            p.value = p.value + rng.normal(size=p.shape) * 0.3
        h = _rng_tensor(rng, 2 * 3, 4)
        r = rng.normal(size=(6, 4))
        params = [h] + list(store.params.values())
        assert check_gradients(lambda: sum_all(enc(h, 3) * Tensor(r)), params) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_gradients_cross_entropy_head(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        store = ParamStore(seed=seed)
        lin = Linear(store, "head", 5, 3)
        x = _rng_tensor(rng, 4, 5)
        y = rng.integers(3, size=4)
        params = [x, lin.w, lin.b]
        assert check_gradients(lambda: cross_entropy(relu(lin(x)) + lin(x), y), params) < GRAD_TOL


def test_shift_invariant_parameter_passes_gradient_check():
    rng = np.random.default_rng(5)
    with precision(np.float64):
        x = _rng_tensor(rng, 3, 4)
        shift = _rng_tensor(rng, 1, 1)
        r = rng.normal(size=(3, 4))
        loss = lambda: sum_all(softmax_rows(add(x, shift)) * Tensor(r))
        loss().backward()
        assert abs(shift.grad[0, 0]) < 1e-12
        assert check_gradients(loss, [x, shift]) < GRAD_TOL


def test_gradient_check_flags_a_wrong_gradient():
    with precision(np.float64):
        x = Tensor(np.array([[0.5, -1.0]]), requires_grad=True)
        # detached copy in the graph: backward misses the second factor
        loss = lambda: sum_all(x * Tensor(x.value.copy()))
        assert check_gradients(loss, [x]) > 0.1


def test_mean_all_gradient():
    with precision(np.float64):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        mean_all(x).backward()
        assert np.allclose(x.grad, 1 / 6)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    store = ParamStore(seed=4)
    lin = Linear(store, "lin", 3, 2)
    x = Tensor(np.random.default_rng(0).normal(size=(5, 3)))
    lin.w.grad = np.ones(lin.w.shape)
    optimizer_step(store, 0.01)
    before = lin(x).value.copy()
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), store)
    assert path.read_bytes()[:4] == b"TKPF"

    other = ParamStore(seed=99)
    lin2 = Linear(other, "lin", 3, 2)
    load_checkpoint(str(path), other)
    assert np.array_equal(lin2(x).value, before)
    assert other.step == 1
    assert np.array_equal(other.m["lin.w"], store.m["lin.w"].astype(np.float32))


def test_resume_after_load_repeats_the_next_step(tmp_path):
    rng = np.random.default_rng(6)
    store = ParamStore(seed=4)
    lin = Linear(store, "lin", 3, 2)
    grads = [{"lin.w": rng.normal(size=(3, 2)).astype(np.float32),
              "lin.b": rng.normal(size=(1, 2)).astype(np.float32)} for _ in range(3)]
    for g in grads[:2]:
        optimizer_step(store, 0.01, 1e-4, grads=g)
    path = str(tmp_path / "mid.ckpt")
    save_checkpoint(path, store)
    optimizer_step(store, 0.01, 1e-4, grads=grads[2])

    resumed = ParamStore(seed=99)
    Linear(resumed, "lin", 3, 2)
    load_checkpoint(path, resumed)
    optimizer_step(resumed, 0.01, 1e-4, grads=grads[2])
    for name in store.params:
        assert np.array_equal(resumed.params[name].value, store.params[name].value)
        assert np.array_equal(resumed.m[name], store.m[name])
        assert np.array_equal(resumed.v[name], store.v[name])


def test_checkpoint_rejects_bad_files(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE")
    with pytest.raises(InputError, match="bad magic"):
        read_checkpoint(str(path))
    store = ParamStore()
    Linear(store, "a", 2, 2)
    save_checkpoint(str(path), store)
    other = ParamStore()
    Linear(other, "b", 2, 2)
    with pytest.raises(InputError, match="parameter names differ"):
        load_checkpoint(str(path), other)
