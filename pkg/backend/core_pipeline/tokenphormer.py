# tokenphormer.py - Token assembly, encoder, attentive readout and node classification
#
# Each target node becomes a token sequence
#   [sgpm token, hop tokens (hop 0..n_hop), walk tokens (m walks)]
# encoded by a Transformer without masking. The readout scores every token
# against the first one and sums the tokens with softmax weights; an MLP head
# maps the result to class logits.

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import Field, model_validator
from scipy import sparse

from .errors import ConfigError, InputError, LogicError, NumericError, TrainingDiverged
from .nn_kernel import (Encoder, Linear, ParamStore, Tensor, add, concat_cols, concat_rows, cross_entropy,
                        dropout, gather_rows, mul, optimizer_step, relu, save_checkpoint, scale,
                        segment_softmax, segment_sum, sparse_matmul, tanh)
from .settings import StrictModel
from .walk_engine import generate_mixed_walks, stream_rng

logger = logging.getLogger(__name__)

# --- Configuration ---
HOP_TOKENS_FILE = "hop_tokens.bin"
HOP_TOKENS_META_FILE = "hop_tokens.json"
MODEL_FILE = "model.ckpt"
HISTORY_FILE = "history.jsonl"
METRICS_COLUMNS = ["dataset", "config_hash", "mean", "std", "seeds"]
EVAL_BATCH = 4096
PE_BASE = 10000.0

SGPM, HOP, WALK = "sgpm", "hop", "walk"


class TrainConfig(StrictModel):
    d_h: int = Field(64, ge=2)
    layers: int = Field(1, ge=1)
    heads: int = Field(1, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    lr: float = Field(5e-3, gt=0.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    batch_size: int = Field(2000, ge=1)
    epochs: int = Field(500, ge=1)
    patience: int = Field(50, ge=1)
    seed: int = 0
    eval_seeds: list[int] = Field(default_factory=lambda: list(range(10)))
    n_hop: int = Field(3, ge=0)
    hop_normalization: Literal["raw", "row", "symmetric"] = "symmetric"
    include_hop0: bool = True
    walk_tokens: int | None = Field(None, ge=0)  # None: every generated walk
    walk_pooling: Literal["positional", "mean"] = "positional"
    use_sgpm: bool = True
    use_hop: bool = True
    use_walk: bool = True

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_h % self.heads:
            raise ValueError(f"d_h={self.d_h} is not divisible by heads={self.heads}")
        return self


# --- Hop tokens ---

@dataclass(frozen=True, eq=False)
class HopTokenSet:
    """Propagated features, shape (n, hops, d_F); projection happens in the model."""
    values: np.ndarray
    normalization: str
    include_hop0: bool

    @property
    def hop_count(self):
        return self.values.shape[1]


def propagation_operator(g, normalization):
    a = g.adjacency
    if normalization == "raw":
        return a
    if normalization == "row":
        deg = np.asarray(a.sum(axis=1)).ravel()
        return sparse.diags(np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)) @ a
    if normalization == "symmetric":
        a_tilde = a + sparse.identity(g.node_count, format="csr")
        inv_sqrt = 1.0 / np.sqrt(np.asarray(a_tilde.sum(axis=1)).ravel())
        return sparse.diags(inv_sqrt) @ a_tilde @ sparse.diags(inv_sqrt)
    raise ConfigError(f"unknown hop normalization {normalization!r}")


def hop_tokens(g, features, n_hop, normalization="symmetric", include_hop0=True):
    """Stack X, ÂX, ..., Â^n_hop X per node."""
    op = propagation_operator(g, normalization).tocsr()
    cur = np.asarray(features, dtype=np.float64)
    hops = [cur]
    for _ in range(n_hop):
        cur = op @ cur
        hops.append(cur)
    if not include_hop0:
        hops = hops[1:]
    if not hops:
        raise ConfigError("hop tokens requested with n_hop=0 and include_hop0 disabled")
    values = np.stack(hops, axis=1).astype(np.float32)
    return HopTokenSet(values, normalization, include_hop0)


def save_hop_tokens(directory, hop_set):
    os.makedirs(directory, exist_ok=True)
    np.ascontiguousarray(hop_set.values, dtype="<f4").tofile(os.path.join(directory, HOP_TOKENS_FILE))
    n, hops, d = hop_set.values.shape
    with open(os.path.join(directory, HOP_TOKENS_META_FILE), "w") as f:
        json.dump({"n": n, "hops": hops, "d_F": d, "normalization": hop_set.normalization,
                   "include_hop0": hop_set.include_hop0}, f, indent=2)


def load_hop_tokens(directory):
    try:
        with open(os.path.join(directory, HOP_TOKENS_META_FILE)) as f:
            meta = json.load(f)
        raw = np.fromfile(os.path.join(directory, HOP_TOKENS_FILE), dtype="<f4")
    except FileNotFoundError as e:
        raise InputError(f"hop tokens missing: {e.filename}") from None
    shape = (meta["n"], meta["hops"], meta["d_F"])
    if raw.size != np.prod(shape):
        raise InputError(f"{directory}/{HOP_TOKENS_FILE}: size does not match {shape}")
    return HopTokenSet(raw.reshape(shape).astype(np.float32), meta["normalization"], meta["include_hop0"])


# --- Walk tokens ---

def sinusoidal_encoding(length, d):
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(PE_BASE, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def walk_token_embed(walk, features, proj, pos_enc=None):
    """Mean over visited nodes of tanh(X_v W + b + PE[position]); (1, d_h) tensor."""
    nodes = walk.nodes
    z = proj(Tensor(features[nodes]))
    if pos_enc is not None:
        z = add(z, Tensor(pos_enc[:len(nodes)]))
    return scale(segment_sum(tanh(z), np.zeros(len(nodes), dtype=np.int64), 1), 1.0 / len(nodes))


@dataclass(frozen=True, eq=False)
class TokenInputs:
    """Precomputed, model-independent material for token assembly."""
    features: np.ndarray
    hops: HopTokenSet | None
    sgpm: np.ndarray | None
    walk_nodes: np.ndarray      # all walk nodes, walk j of node v at slot v*m + j
    walk_offsets: np.ndarray    # (n*m + 1,) offsets into walk_nodes
    walk_pe: np.ndarray | None  # (max walk length, d_h) position table; None for mean pooling
    walks_per_node: int

    @property
    def node_count(self):
        return len(self.features)


def prepare_token_inputs(features, cfg, hops=None, walks=None, sgpm=None):
    """Validate and pack token material for TokenphormerModel."""
    features = np.asarray(features, dtype=np.float32)
    n = len(features)
    if cfg.use_sgpm and sgpm is None:
        raise InputError("SGPM tokens are required (use_sgpm is on) but none were given")
    if sgpm is not None and len(sgpm) != n:
        raise InputError(f"SGPM tokens cover {len(sgpm)} nodes, dataset has {n}")
    if cfg.use_hop and hops is None:
        raise InputError("hop tokens are required (use_hop is on) but none were given")

    m = 0
    if cfg.use_walk:
        if walks is None:
            raise InputError("walk tokens are required (use_walk is on) but no walks were given")
        if len(walks) != n:
            raise InputError(f"walks cover {len(walks)} start nodes, dataset has {n}")
        available = min((len(w) for w in walks), default=0)
        m = available if cfg.walk_tokens is None else cfg.walk_tokens
        short = next((v for v, w in enumerate(walks) if len(w) < m), None)
        if short is not None:
            raise InputError(f"node {short} has {len(walks[short])} walks, {m} walk tokens requested")
        if m == 0:
            logger.warning("use_walk is on but zero walk tokens per node are available")

    chosen = [w for node_walks in (walks or []) for w in node_walks[:m]] if m else []
    lengths = np.array([len(w.nodes) for w in chosen], dtype=np.int64)
    offsets = np.zeros(len(chosen) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    flat = np.concatenate([w.nodes for w in chosen]) if chosen else np.zeros(0, dtype=np.int64)
    pe = None
    if chosen and cfg.walk_pooling == "positional":
        pe = sinusoidal_encoding(int(lengths.max()), cfg.d_h).astype(np.float32)
    return TokenInputs(features, hops if cfg.use_hop else None, sgpm if cfg.use_sgpm else None,
                       flat, offsets, pe, m)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    node: int
    tokens: Tensor
    kinds: tuple


# --- Model ---

class TokenphormerModel:
    def __init__(self, cfg, feature_dim, num_classes, hop_count, walks_per_node, sgpm_dim=None, seed=0):
        self.cfg = cfg
        self.hop_count = hop_count if cfg.use_hop else 0
        self.walks_per_node = walks_per_node if cfg.use_walk else 0
        self.seq_len = 1 + self.hop_count + self.walks_per_node
        self.num_classes = num_classes
        self.store = ParamStore(seed=seed)
        d = cfg.d_h
        self.sgpm_proj = Linear(self.store, "proj.sgpm", sgpm_dim, d) if cfg.use_sgpm else None
        # shared by all hops; also projects the raw-feature anchor when SGPM is off
        self.hop_proj = Linear(self.store, "proj.hop", feature_dim, d) if (cfg.use_hop or not cfg.use_sgpm) else None
        self.walk_proj = Linear(self.store, "proj.walk", feature_dim, d) if self.walks_per_node else None
        self.encoder = Encoder(self.store, "encoder", d, cfg.layers, cfg.heads, cfg.dropout)
        self.readout_w = self.store.create("readout.w", 2 * d, 1)
        self.hidden = Linear(self.store, "head.hidden", d, max(d // 2, 1))
        self.out = Linear(self.store, "head.out", max(d // 2, 1), num_classes)
        self.last_alpha = None

    @property
    def kinds(self):
        return (SGPM,) + (HOP,) * self.hop_count + (WALK,) * self.walks_per_node

    def sequences(self, nodes, inputs):
        """Packed token sequences for `nodes`: (B * seq_len, d_h)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        b = len(nodes)
        if self.sgpm_proj is not None:
            first = self.sgpm_proj(Tensor(inputs.sgpm[nodes]))
        else:
            first = self.hop_proj(Tensor(inputs.features[nodes]))
        parts = [first]
        if self.hop_count:
            hop_rows = inputs.hops.values[nodes].reshape(b * self.hop_count, -1)
            parts.append(self.hop_proj(Tensor(hop_rows)))
        if self.walks_per_node:
            parts.append(self._walk_tokens(nodes, inputs))
        stacked = concat_rows(parts)

        k, h, m = self.seq_len, self.hop_count, self.walks_per_node
        perm = np.empty(b * k, dtype=np.int64)
        base = np.arange(b) * k
        perm[base] = np.arange(b)
        for j in range(h):
            perm[base + 1 + j] = b + np.arange(b) * h + j
        for j in range(m):
            perm[base + 1 + h + j] = b + b * h + np.arange(b) * m + j
        return gather_rows(stacked, perm)

    def _walk_tokens(self, nodes, inputs):
        m = self.walks_per_node
        if inputs.walks_per_node < m:
            raise InputError(f"token inputs hold {inputs.walks_per_node} walks per node, model expects {m}")
        slots = (nodes[:, None] * inputs.walks_per_node + np.arange(m)[None, :]).reshape(-1)
        starts, ends = inputs.walk_offsets[slots], inputs.walk_offsets[slots + 1]
        lengths = ends - starts
        visits = np.concatenate([inputs.walk_nodes[s:e] for s, e in zip(starts, ends)])
        positions = np.arange(len(visits)) - np.repeat(np.cumsum(lengths) - lengths, lengths)
        positional = inputs.walk_pe is not None
        span = int(lengths.max()) if positional else 1
        # tanh input depends only on (node, position); each distinct pair is computed once
        pairs, cols = np.unique(visits * span + (positions if positional else 0), return_inverse=True)
        z = self.walk_proj(Tensor(inputs.features[pairs // span]))
        if positional:
            z = add(z, Tensor(inputs.walk_pe[pairs % span]))
        rows = np.repeat(np.arange(len(slots)), lengths)
        avg = sparse.csr_matrix((1.0 / lengths[rows], (rows, cols.ravel())), shape=(len(slots), len(pairs)))
        return sparse_matmul(avg, tanh(z))

    def encode(self, seq, batch, rng=None, training=False):
        return self.encoder(seq, self.seq_len, None, rng, training)

    def readout(self, h, batch):
        return readout(h, self.readout_w, self.seq_len)

    def forward(self, nodes, inputs, training=False, rng=None):
        nodes = np.asarray(nodes, dtype=np.int64)
        h = self.encode(self.sequences(nodes, inputs), len(nodes), rng, training)
        h_fin, alpha = self.readout(h, len(nodes))
        self.last_alpha = alpha.value.reshape(len(nodes), self.seq_len)
        z = dropout(relu(self.hidden(h_fin)), self.cfg.dropout, rng, training)
        return self.out(z)


def assemble_sequence(model, node, inputs):
    """Token sequence of one node, before encoding."""
    return TokenSequence(int(node), model.sequences([node], inputs), model.kinds)


def encode(seq, encoder, seq_len=None):
    """Run an encoder over one unmasked sequence (or packed sequences of seq_len)."""
    return encoder(seq, seq_len or seq.shape[0])


def readout(h, w_a, seq_len):
    """Attentive readout over packed sequences.

    logit_k = [H_1 || H_k] . w_a, alpha = softmax_k(logit), H_fin = sum_k alpha_k H_k.
    Returns (H_fin of shape (B, d), alpha of shape (B*seq_len, 1)).
    """
    rows = h.shape[0]
    if rows % seq_len:
        raise LogicError(f"{rows} rows do not pack into sequences of {seq_len}")
    b = rows // seq_len
    segments = np.repeat(np.arange(b), seq_len)
    first = gather_rows(h, segments * seq_len)
    alpha = segment_softmax(concat_cols([first, h]) @ w_a, segments, b)
    return segment_sum(mul(h, alpha), segments, b), alpha


# --- Training and evaluation ---

@dataclass
class TrainResult:
    model: TokenphormerModel
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0
    test_acc: float = 0.0
    seed: int = 0


def build_model(dataset, inputs, cfg, seed):
    hop_count = inputs.hops.hop_count if inputs.hops is not None else 0
    sgpm_dim = inputs.sgpm.shape[1] if inputs.sgpm is not None else None
    return TokenphormerModel(cfg, dataset.feature_dim, dataset.num_classes, hop_count,
                             inputs.walks_per_node, sgpm_dim, seed)


def predict(model, nodes, inputs, batch=EVAL_BATCH):
    nodes = np.asarray(nodes, dtype=np.int64)
    out = [model.forward(nodes[s:s + batch], inputs).value for s in range(0, len(nodes), batch)]
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def accuracy(model, nodes, labels, inputs):
    if not len(nodes):
        return float("nan")
    return float((predict(model, nodes, inputs).argmax(axis=1) == labels[nodes]).mean())


def train(dataset, split, inputs, cfg, seed=None, output_dir=None):
    """Mini-batch AdamW training with early stopping on validation accuracy.

    The parameters of the best validation epoch are restored before the test
    accuracy is measured.
    """
    seed = cfg.seed if seed is None else seed
    model = build_model(dataset, inputs, cfg, seed)
    labels = dataset.labels
    result = TrainResult(model, seed=seed, best_val_acc=-1.0)
    best = good = model.store.snapshot()
    wait = 0
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
    history_file = open(os.path.join(output_dir, HISTORY_FILE), "w") if output_dir else None
    logger.info("Training (seed=%d): %d tokens per node, %d parameters", seed, model.seq_len, model.store.count())
    try:
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            order = stream_rng(seed, "shuffle", epoch).permutation(split.train)
            total = 0.0
            try:
                for step, s in enumerate(range(0, len(order), cfg.batch_size)):
                    batch = order[s:s + cfg.batch_size]
                    model.store.zero_grad()
                    logits = model.forward(batch, inputs, training=True, rng=stream_rng(seed, "dropout", epoch, step))
                    loss = cross_entropy(logits, labels[batch])
                    loss.backward()
                    optimizer_step(model.store, cfg.lr, cfg.weight_decay)
                    total += float(loss.value[0, 0]) * len(batch)
            except NumericError as e:
                model.store.restore(good)
                raise TrainingDiverged(f"training diverged in epoch {epoch}: {e}", good, result.history) from e
            good = model.store.snapshot()

            val_acc = accuracy(model, split.val, labels, inputs)
            record = {"epoch": epoch, "train_loss": total / max(len(order), 1), "val_acc": val_acc,
                      "seconds": round(time.perf_counter() - started, 3)}
            result.history.append(record)
            if history_file:
                history_file.write(json.dumps(record) + "\n")
            if val_acc > result.best_val_acc:
                result.best_val_acc, result.best_epoch = val_acc, epoch
                best = model.store.snapshot()
                wait = 0
            else:
                wait += 1
                if wait >= cfg.patience:
                    logger.info("  -> early stop at epoch %d (best %d)", epoch, result.best_epoch)
                    break
            if epoch % 10 == 0:
                logger.debug("  epoch %d: loss %.4f val %.4f", epoch, record["train_loss"], val_acc)
    finally:
        if history_file:
            history_file.close()

    model.store.restore(best)
    result.test_acc = accuracy(model, split.test, labels, inputs)
    if output_dir:
        save_checkpoint(os.path.join(output_dir, MODEL_FILE), model.store)
    logger.info("  -> seed %d: best val %.4f (epoch %d), test %.4f",
                seed, result.best_val_acc, result.best_epoch, result.test_acc)
    return result


@dataclass(frozen=True)
class EvalResult:
    accuracies: dict
    mean: float
    std: float

    @property
    def seeds(self):
        return list(self.accuracies)

    def to_row(self, dataset_name, config_hash):
        return {"dataset": dataset_name, "config_hash": config_hash, "mean": self.mean, "std": self.std,
                "seeds": ";".join(str(s) for s in self.seeds)}


def summarize(accuracies):
    values = np.array(list(accuracies.values()), dtype=np.float64)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return EvalResult(dict(accuracies), float(values.mean()), std)


def evaluate(dataset, split, inputs, cfg, seeds=None, output_dir=None):
    """Retrain once per seed on a fixed split and tokens; report test accuracy
    mean and sample standard deviation."""
    seeds = list(cfg.eval_seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("evaluation needs at least one seed")
    accuracies = {}
    for seed in seeds:
        run_dir = os.path.join(output_dir, f"seed_{seed}") if output_dir else None
        accuracies[seed] = train(dataset, split, inputs, cfg, seed=seed, output_dir=run_dir).test_acc
    result = summarize(accuracies)
    logger.info("Test accuracy over %d seeds: %.4f +/- %.4f", len(seeds), result.mean, result.std)
    return result


def write_metrics(path, rows):
    """metrics.csv: dataset,config_hash,mean,std,seeds (seeds joined by ';')."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pd.DataFrame(rows, columns=METRICS_COLUMNS).to_csv(path, index=False)


def sweep_walk_tokens(dataset, split, cfg, walk_cfg, counts, hops=None, sgpm=None, seeds=None):
    """Accuracy as a function of walk tokens per node; walks are regenerated
    for each count with the configured kind ratios."""
    rows = []
    for m in counts:
        walks = generate_mixed_walks(dataset.graph, walk_cfg.model_copy(update={"walks_per_node": m}))
        run_cfg = cfg.model_copy(update={"walk_tokens": m, "use_walk": m > 0 and cfg.use_walk})
        inputs = prepare_token_inputs(dataset.features, run_cfg, hops=hops, walks=walks, sgpm=sgpm)
        result = evaluate(dataset, split, inputs, run_cfg, seeds)
        rows.append({"walk_tokens": m, "mean": result.mean, "std": result.std,
                     "seeds": ";".join(str(s) for s in result.seeds)})
    return pd.DataFrame(rows)
