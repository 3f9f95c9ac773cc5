# nn_kernel.py - Reverse-mode autodiff over 2-D arrays, layers, AdamW, checkpoints
#
# Every Tensor is a 2-D numpy array. Batches of equal-length sequences are packed
# row-wise: B sequences of K rows each form one (B*K, d) tensor, and sequence-aware
# ops (attention, segment ops) take the grouping explicitly.

import contextlib
import logging
import os
import struct

import numpy as np
from scipy import sparse

from .errors import InputError, LogicError, NumericError

logger = logging.getLogger(__name__)

# --- Configuration ---
LAYER_NORM_EPS = 1e-5
INIT_STD = 0.02
CHECKPOINT_MAGIC = b"TKPF"
CHECKPOINT_VERSION = 1
GRAD_CHECK_STEP = 1e-6
GRAD_CHECK_FLOOR = 1e-3  # gradient norms below this are compared in absolute terms

_precision = {"dtype": np.float32}


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new leaf tensors are created with."""
    old = _precision["dtype"]
    _precision["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _precision["dtype"] = old


def default_dtype():
    return _precision["dtype"]


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "op", "aux", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, op="leaf", _parents=(), _backward=None):
        value = np.asarray(value)
        if value.ndim != 2:
            raise LogicError(f"Tensor must be 2-D, got shape {value.shape}")
        if op == "leaf":
            value = value.astype(default_dtype(), copy=False)
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.aux = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    def numpy(self):
        return self.value

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad."""
        if grad is None:
            if self.value.size != 1:
                raise LogicError(f"backward() without a gradient needs a scalar, got {self.shape}")
            grad = np.ones_like(self.value)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if p.requires_grad)

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def const(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(value, parents, backward, op):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite values produced by {op}")
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, op=op, _parents=parents if needs else (),
                  _backward=backward if needs else None)


def _unbroadcast(grad, shape):
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- Elementwise and linear algebra ---

def add(a, b):
    a, b = const(a), const(b)
    return _result(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = const(a), const(b)
    return _result(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    a, b = const(a), const(b)
    return _result(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)), "mul")


def scale(a, c):
    return _result(a.value * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b):
    a, b = const(a), const(b)
    if a.shape[1] != b.shape[0]:
        raise LogicError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _result(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def sparse_matmul(s, x):
    """Constant scipy sparse matrix times a tensor."""
    s = sparse.csr_matrix(s)
    dtype = x.value.dtype
    return _result(np.asarray(s @ x.value, dtype=dtype), (x,),
                   lambda g: (np.asarray(s.T @ g, dtype=dtype),), "sparse_matmul")


def relu(x):
    mask = x.value > 0
    return _result(x.value * mask, (x,), lambda g: (g * mask,), "relu")


def tanh(x):
    y = np.tanh(x.value)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def linear(x, w, b=None):
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def sum_all(x):
    return _result(x.value.sum(keepdims=True).reshape(1, 1), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean_all(x):
    n = x.value.size
    return _result(x.value.mean(keepdims=True).reshape(1, 1), (x,),
                   lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "mean")


# --- Row bookkeeping ---

def _scatter_matrix(index, rows):
    index = np.asarray(index, dtype=np.int64)
    data = np.ones(len(index))
    return sparse.csr_matrix((data, (index, np.arange(len(index)))), shape=(rows, len(index)))


def gather_rows(x, index):
    index = np.asarray(index, dtype=np.int64)
    if len(index) and (index.min() < 0 or index.max() >= x.shape[0]):
        raise LogicError(f"row index out of range for tensor with {x.shape[0]} rows")

    def backward(g):
        return (np.asarray(_scatter_matrix(index, x.shape[0]) @ g, dtype=g.dtype),)

    return _result(x.value[index], (x,), backward, "gather_rows")


def concat_cols(parts):
    parts = [const(p) for p in parts]
    widths = np.cumsum([p.shape[1] for p in parts])[:-1]
    return _result(np.concatenate([p.value for p in parts], axis=1), tuple(parts),
                   lambda g: tuple(np.split(g, widths, axis=1)), "concat_cols")


def concat_rows(parts):
    parts = [const(p) for p in parts]
    heights = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _result(np.concatenate([p.value for p in parts], axis=0), tuple(parts),
                   lambda g: tuple(np.split(g, heights, axis=0)), "concat_rows")


def segment_sum(x, segments, count):
    """Sum rows of x that share a segment id; output has `count` rows."""
    s = _scatter_matrix(segments, count)
    segments = np.asarray(segments, dtype=np.int64)
    return _result(np.asarray(s @ x.value, dtype=x.value.dtype), (x,), lambda g: (g[segments],), "segment_sum")


def segment_softmax(x, segments, count):
    """Softmax of a column vector within each segment."""
    if x.shape[1] != 1:
        raise LogicError(f"segment_softmax expects a column vector, got {x.shape}")
    segments = np.asarray(segments, dtype=np.int64)
    v = x.value[:, 0]
    top = np.full(count, -np.inf, dtype=v.dtype)
    np.maximum.at(top, segments, v)
    e = np.exp(v - top[segments])
    y = (e / np.bincount(segments, weights=e, minlength=count)[segments]).astype(v.dtype)[:, None]

    def backward(g):
        dot = np.bincount(segments, weights=(g * y)[:, 0], minlength=count)
        return (y * (g - dot[segments][:, None]),)

    return _result(y, (x,), backward, "segment_softmax")


# --- Normalization, softmax, dropout ---

def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    mu = x.value.mean(axis=1, keepdims=True)
    centered = x.value - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv_std
    d = x.shape[1]

    def backward(g):
        dxhat = g * gain.value
        dx = inv_std / d * (d * dxhat - dxhat.sum(axis=1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _result(xhat * gain.value + bias.value, (x, gain, bias), backward, "layer_norm")


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x):
    y = _softmax(x.value)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),), "softmax_rows")


def dropout(x, rate, rng, training):
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise LogicError(f"dropout rate must be < 1, got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.value.dtype) / (1.0 - rate)
    return _result(x.value * keep, (x,), lambda g: (g * keep,), "dropout")


# --- Attention ---

def attention(q, k, v, seq_len, heads, key_mask=None):
    """Scaled dot-product attention over packed sequences.

    q, k, v are (B*seq_len, d). key_mask is a (B, seq_len) boolean array with
    True on attendable positions. The attention weights are kept in `.aux` as a
    (B, heads, seq_len, seq_len) array.
    """
    rows, d = q.shape
    if rows % seq_len:
        raise LogicError(f"{rows} rows do not pack into sequences of {seq_len}")
    if d % heads:
        raise LogicError(f"model width {d} not divisible by {heads} heads")
    b, dk = rows // seq_len, d // heads
    shape = (b, seq_len, heads, dk)
    qh = q.value.reshape(shape).transpose(0, 2, 1, 3)
    kh = k.value.reshape(shape).transpose(0, 2, 1, 3)
    vh = v.value.reshape(shape).transpose(0, 2, 1, 3)
    scale_ = 1.0 / np.sqrt(dk)

    scores = qh @ kh.transpose(0, 1, 3, 2) * scale_
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool).reshape(b, seq_len)
        if not key_mask.any(axis=1).all():
            raise LogicError("every sequence needs at least one attendable position")
        scores = np.where(key_mask[:, None, None, :], scores, -np.inf)
    weights = _softmax(scores).astype(q.value.dtype)
    out = (weights @ vh).transpose(0, 2, 1, 3).reshape(rows, d)

    def backward(g):
        gh = g.reshape(shape).transpose(0, 2, 1, 3)
        dweights = gh @ vh.transpose(0, 1, 3, 2)
        dv = weights.transpose(0, 1, 3, 2) @ gh
        ds = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True)) * scale_
        dq = ds @ kh
        dk_ = ds.transpose(0, 1, 3, 2) @ qh
        pack = lambda t: t.transpose(0, 2, 1, 3).reshape(rows, d)
        return pack(dq), pack(dk_), pack(dv)

    result = _result(out, (q, k, v), backward, "attention")
    result.aux = weights
    return result


def multi_head_self_attention(h, params, mask=None, heads=1, seq_len=None):
    """MSA with output projection; `params` is a MultiHeadSelfAttention."""
    seq_len = seq_len or h.shape[0]
    q = params.q(h)
    k = params.k(h)
    v = params.v(h)
    return params.o(attention(q, k, v, seq_len, heads, mask))


def ffn(x, params):
    """Two-layer ReLU feed-forward; `params` is a FeedForward."""
    return params.outer(relu(params.inner(x)))


# --- Loss ---

def cross_entropy(logits, targets):
    """Mean softmax cross-entropy; targets are class indices."""
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if len(targets) != n:
        raise InputError(f"{len(targets)} targets for {n} rows of logits")
    if n == 0:
        raise InputError("cross_entropy needs at least one row")
    if targets.min() < 0 or targets.max() >= c:
        bad = int(targets[(targets < 0) | (targets >= c)][0])
        raise InputError(f"target class {bad} outside 0..{c - 1}")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(n), targets]).mean()

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        return (p * (g[0, 0] / n),)

    return _result(np.array([[loss]], dtype=logits.value.dtype), (logits,), backward, "cross_entropy")


# --- Parameters and layers ---

class ParamStore:
    """Named parameters plus AdamW moments and the step counter."""

    def __init__(self, seed=0):
        self.params = {}
        self.m = {}
        self.v = {}
        self.step = 0
        self.rng = np.random.default_rng(seed)

    def create(self, name, rows, cols, init="normal"):
        if name in self.params:
            raise LogicError(f"duplicate parameter name {name!r}")
        if init == "normal":
            value = self.rng.normal(0.0, INIT_STD, size=(rows, cols))
        elif init == "zeros":
            value = np.zeros((rows, cols))
        elif init == "ones":
            value = np.ones((rows, cols))
        else:
            raise LogicError(f"unknown init {init!r}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        # moments share the parameter dtype, which is what checkpoints store in 32-bit mode
        self.m[name] = np.zeros(t.shape, dtype=t.value.dtype)
        self.v[name] = np.zeros(t.shape, dtype=t.value.dtype)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def snapshot(self):
        return {name: p.value.copy() for name, p in self.params.items()}

    def restore(self, values):
        for name, value in values.items():
            self.params[name].value = value.copy()

    def cast(self, dtype):
        for p in self.params.values():
            p.value = p.value.astype(dtype)

    def count(self):
        return sum(p.value.size for p in self.params.values())


class Linear:
    def __init__(self, store, name, d_in, d_out, bias=True):
        self.w = store.create(f"{name}.w", d_in, d_out)
        self.b = store.create(f"{name}.b", 1, d_out, init="zeros") if bias else None

    def __call__(self, x):
        return linear(x, self.w, self.b)


class LayerNorm:
    def __init__(self, store, name, d):
        self.gain = store.create(f"{name}.gain", 1, d, init="ones")
        self.bias = store.create(f"{name}.bias", 1, d, init="zeros")

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias)


class FeedForward:
    def __init__(self, store, name, d):
        self.inner = Linear(store, f"{name}.inner", d, 2 * d)
        self.outer = Linear(store, f"{name}.outer", 2 * d, d)

    def __call__(self, x):
        return ffn(x, self)


class MultiHeadSelfAttention:
    def __init__(self, store, name, d, heads):
        if d % heads:
            raise LogicError(f"hidden width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(store, f"{name}.q", d, d)
        self.k = Linear(store, f"{name}.k", d, d)
        self.v = Linear(store, f"{name}.v", d, d)
        self.o = Linear(store, f"{name}.o", d, d)

    def __call__(self, h, seq_len, mask=None):
        return multi_head_self_attention(h, self, mask, self.heads, seq_len)


class EncoderLayer:
    """Pre-norm block: H' = MSA(LN(H)) + H; out = FFN(LN(H')) + H'."""

    def __init__(self, store, name, d, heads, dropout_rate=0.0):
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.msa = MultiHeadSelfAttention(store, f"{name}.msa", d, heads)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.ffn = FeedForward(store, f"{name}.ffn", d)
        self.dropout_rate = dropout_rate

    def __call__(self, h, seq_len, mask=None, rng=None, training=False):
        a = dropout(self.msa(self.ln1(h), seq_len, mask), self.dropout_rate, rng, training)
        h = add(a, h)
        f = dropout(self.ffn(self.ln2(h)), self.dropout_rate, rng, training)
        return add(f, h)


class Encoder:
    def __init__(self, store, name, d, layers, heads, dropout_rate=0.0):
        self.layers = [EncoderLayer(store, f"{name}.{i}", d, heads, dropout_rate) for i in range(layers)]

    def __call__(self, h, seq_len, mask=None, rng=None, training=False):
        for layer in self.layers:
            h = layer(h, seq_len, mask, rng, training)
        return h


# --- Optimizer ---

def optimizer_step(store, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8, grads=None):
    """One AdamW update with decoupled weight decay and bias correction.

    Parameters without a gradient are left untouched.
    """
    store.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for name, p in store.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.value = (p.value - lr * weight_decay * p.value - update).astype(p.value.dtype)


# --- Checkpoints ---
#
# Little-endian layout:
#   b"TKPF" | u32 version | u32 param count | param records
#   | u32 moment count | moment records ("m/<name>", "v/<name>") | u64 step
# record: u32 name length | utf-8 name | u32 rows | u32 cols | float32 values

def _write_record(f, name, array):
    raw = name.encode("utf-8")
    array = np.ascontiguousarray(array, dtype="<f4")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<II", *array.shape))
    f.write(array.tobytes())


def _read_exact(f, size, path):
    data = f.read(size)
    if len(data) != size:
        raise InputError(f"{path}: truncated checkpoint")
    return data


def _read_record(f, path):
    (length,) = struct.unpack("<I", _read_exact(f, 4, path))
    name = _read_exact(f, length, path).decode("utf-8")
    rows, cols = struct.unpack("<II", _read_exact(f, 8, path))
    values = np.frombuffer(_read_exact(f, 4 * rows * cols, path), dtype="<f4").reshape(rows, cols)
    return name, values.astype(np.float32)


def save_checkpoint(path, store, include_moments=True):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(store.params)))
        for name, p in store.items():
            _write_record(f, name, p.value)
        moments = list(store.params) if include_moments else []
        f.write(struct.pack("<I", 2 * len(moments)))
        for name in moments:
            _write_record(f, f"m/{name}", store.m[name])
            _write_record(f, f"v/{name}", store.v[name])
        f.write(struct.pack("<Q", store.step))
    os.replace(tmp, path)


def read_checkpoint(path):
    """Raw contents: (params, moments, step) with arrays keyed by name."""
    try:
        f = open(path, "rb")
    except FileNotFoundError:
        raise InputError(f"{path}: checkpoint not found") from None
    with f:
        if _read_exact(f, 4, path) != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not a checkpoint (bad magic)")
        version, count = struct.unpack("<II", _read_exact(f, 8, path))
        if version != CHECKPOINT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        params = dict(_read_record(f, path) for _ in range(count))
        (moment_count,) = struct.unpack("<I", _read_exact(f, 4, path))
        moments = dict(_read_record(f, path) for _ in range(moment_count))
        (step,) = struct.unpack("<Q", _read_exact(f, 8, path))
    return params, moments, step


def load_checkpoint(path, store):
    """Load values (and moments, when present) into an already-built store."""
    params, moments, step = read_checkpoint(path)
    missing = set(store.params) - set(params)
    extra = set(params) - set(store.params)
    if missing or extra:
        raise InputError(f"{path}: parameter names differ (missing {sorted(missing)}, unexpected {sorted(extra)})")
    for name, p in store.items():
        if params[name].shape != p.shape:
            raise InputError(f"{path}: {name} has shape {params[name].shape}, model expects {p.shape}")
        p.value = params[name].astype(p.value.dtype)
        if f"m/{name}" in moments:
            store.m[name] = moments[f"m/{name}"].astype(p.value.dtype)
            store.v[name] = moments[f"v/{name}"].astype(p.value.dtype)
    store.step = step
    return store


# --- Gradient checking ---

def numeric_gradient(loss_fn, param, h=1e-3):
    """Central-difference gradient of the scalar loss_fn() w.r.t. param.value."""
    grad = np.zeros_like(param.value, dtype=np.float64)
    flat = param.value.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn().value[0, 0])
        flat[i] = orig - h
        down = float(loss_fn().value[0, 0])
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return grad


def check_gradients(loss_fn, params, h=GRAD_CHECK_STEP):
    """Largest relative error between analytic and numeric gradients.

    Errors are ||analytic - numeric|| / max(||analytic||, ||numeric||, GRAD_CHECK_FLOOR)
    per parameter. Run under precision(np.float64) with dropout disabled.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad
        numeric = numeric_gradient(loss_fn, p, h)
        scale_ = max(np.linalg.norm(analytic), np.linalg.norm(numeric), GRAD_CHECK_FLOOR)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale_))
    return worst
