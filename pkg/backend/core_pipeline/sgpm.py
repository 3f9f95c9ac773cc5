# sgpm.py - Masked-node pre-training over the graph document and token export
#
# The model reads encoded sentences through the input representation tables and
# a pre-norm Transformer encoder, and predicts the original token at masked
# positions. After training, every node gets one d_h vector (its SGPM token).

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import Field

from .errors import ConfigError, InputError, NumericError, TrainingDiverged
from .graph_doc import (CLS, MASK, SEP, InputRepresentationTables, Vocabulary, encode_batch,
                        encode_sentence, max_sentence_tokens)
from .nn_kernel import (Encoder, Linear, ParamStore, Tensor, cross_entropy, gather_rows, load_checkpoint,
                        optimizer_step, save_checkpoint)
from .settings import StrictModel
from .walk_engine import stream_rng

logger = logging.getLogger(__name__)

# --- Configuration ---
CHECKPOINT_FILE = "sgpm.ckpt"
LAST_GOOD_FILE = "last_good.ckpt"
HISTORY_FILE = "history.jsonl"
TOKENS_FILE = "sgpm_tokens.bin"
TOKENS_META_FILE = "sgpm_tokens.json"
EVAL_BATCH = 512
TOKEN_POSITION = 1  # first sentence token, right after [CLS]


class SgpmConfig(StrictModel):
    d_h: int = Field(64, ge=1)
    layers: int = Field(2, ge=1)
    heads: int = Field(1, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    mask_rate: float = Field(0.15, ge=0.0, le=1.0)
    min_one_mask: bool = True
    lr: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    batch_size: int = Field(256, ge=1)
    epochs: int = Field(10, ge=0)
    seed: int = 0
    token_mode: Literal["input", "contextual"] = "input"


@dataclass(frozen=True, eq=False)
class MaskingPlan:
    """Masked positions of a batch: sentence row, position and original token."""
    rows: np.ndarray
    positions: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.positions)


def plan_batch_masking(token_ids, attention_mask, rate, rng, min_one=True):
    """Mask round(rate * real) tokens per sentence (at least one when min_one).

    Real tokens exclude [CLS], [SEP] and padding.
    """
    token_ids = np.asarray(token_ids)
    real = np.asarray(attention_mask, dtype=bool) & (token_ids != CLS) & (token_ids != SEP)
    real_count = real.sum(axis=1)
    counts = np.floor(rate * real_count + 0.5).astype(np.int64)
    if min_one:
        counts = np.where(real_count > 0, np.maximum(counts, 1), 0)
    counts = np.minimum(counts, real_count)

    keys = np.where(real, rng.random(token_ids.shape), np.inf)
    order = np.argsort(keys, axis=1, kind="stable")
    take = np.arange(token_ids.shape[1])[None, :] < counts[:, None]
    rows, ranks = np.nonzero(take)
    positions = order[rows, ranks]
    sort = np.lexsort((positions, rows))
    rows, positions = rows[sort], positions[sort]
    return MaskingPlan(rows, positions, token_ids[rows, positions])


def plan_masking(sentence, rate, rng, min_one=True):
    """Masking plan for one encoded sentence (rows are all zero)."""
    return plan_batch_masking(sentence.token_ids[None, :], sentence.attention_mask[None, :], rate, rng, min_one)


def apply_masking(token_ids, plan):
    masked = np.array(token_ids, copy=True)
    if masked.ndim == 1:
        masked = masked[None, :]
    masked[plan.rows, plan.positions] = MASK
    return masked


class SgpmModel:
    def __init__(self, vocab, features, degrees, cfg, max_len):
        self.cfg = cfg
        self.vocab = vocab
        self.features = np.asarray(features)
        self.degrees = np.asarray(degrees)
        self.max_len = max_len
        self.store = ParamStore(seed=cfg.seed)
        self.tables = InputRepresentationTables(self.store, vocab, self.features.shape[1], cfg.d_h, max_len)
        self.encoder = Encoder(self.store, "encoder", cfg.d_h, cfg.layers, cfg.heads, cfg.dropout)
        self.output = Linear(self.store, "mlm_out", cfg.d_h, vocab.size)

    def hidden(self, token_ids, attention_mask, training=False, rng=None):
        """Final hidden states, packed (B * L, d_h)."""
        token_ids = np.asarray(token_ids)
        h = self.tables(token_ids, self.features, self.degrees)
        return self.encoder(h, token_ids.shape[1], attention_mask, rng, training)

    def masked_loss(self, token_ids, attention_mask, plan, training=False, rng=None):
        """Cross-entropy over masked positions only; None when nothing is masked."""
        if not len(plan):
            return None
        h = self.hidden(apply_masking(token_ids, plan), attention_mask, training, rng)
        rows = plan.rows * np.asarray(token_ids).shape[-1] + plan.positions
        return cross_entropy(self.output(gather_rows(h, rows)), plan.targets)


def mlm_loss(model, sentence, plan):
    """Masked-node loss of one sentence; a zero constant when the plan is empty."""
    loss = model.masked_loss(sentence.token_ids[None, :], sentence.attention_mask[None, :], plan)
    return loss if loss is not None else Tensor(np.zeros((1, 1)))


@dataclass
class PretrainResult:
    model: SgpmModel
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")


def _slice_plan(rows, plan, start, stop):
    # rows must be sorted ascending
    lo, hi = np.searchsorted(rows, [start, stop])
    return MaskingPlan(rows[lo:hi] - start, plan.positions[lo:hi], plan.targets[lo:hi])


def _mean_masked_loss(model, tokens, attn, plan, batch):
    total, count = 0.0, 0
    for start in range(0, len(tokens), batch):
        part = _slice_plan(plan.rows, plan, start, start + batch)
        if not len(part):
            continue
        loss = model.masked_loss(tokens[start:start + batch], attn[start:start + batch], part)
        total += float(loss.value[0, 0]) * len(part)
        count += len(part)
    return total / count if count else float("nan"), count


def _flatten(parts):
    return [w for walks in parts for w in walks]


def pretrain(doc, dataset, cfg, output_dir=None):
    """Train the masked-node model on `doc`.

    Epoch 0 is an evaluation pass before any update. Validation loss is tracked
    each epoch and the best-scoring parameters are restored (and checkpointed
    when output_dir is given). A non-finite loss raises TrainingDiverged holding
    the last good parameters.
    """
    vocab = Vocabulary(dataset.node_count)
    max_len = max_sentence_tokens(doc.mean_length, doc.std_length)
    model = SgpmModel(vocab, dataset.features, dataset.graph.degrees, cfg, max_len)
    tokens, attn, _ = encode_batch(vocab, _flatten(doc.train), max_len)
    val_tokens, val_attn, _ = encode_batch(vocab, _flatten(doc.val), max_len)
    if not len(tokens):
        raise InputError("graph document has no training sentences")
    val_plan = plan_batch_masking(val_tokens, val_attn, cfg.mask_rate, stream_rng(cfg.seed, "masking", 0, 1),
                                  cfg.min_one_mask)
    logger.info("SGPM: %d train / %d val sentences, max_len=%d, %d parameters",
                len(tokens), len(val_tokens), max_len, model.store.count())

    result = PretrainResult(model)
    good = best = model.store.snapshot()
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
    ckpt = os.path.join(output_dir, CHECKPOINT_FILE) if output_dir else None
    history_file = open(os.path.join(output_dir, HISTORY_FILE), "w") if output_dir else None
    try:
        for epoch in range(cfg.epochs + 1):
            started = time.perf_counter()
            plan = plan_batch_masking(tokens, attn, cfg.mask_rate, stream_rng(cfg.seed, "masking", epoch),
                                      cfg.min_one_mask)
            if epoch == 0:
                train_loss, _ = _mean_masked_loss(model, tokens, attn, plan, EVAL_BATCH)
                skipped = 0
            else:
                try:
                    train_loss, skipped = _train_epoch(model, tokens, attn, plan, cfg, epoch)
                except NumericError as e:
                    model.store.restore(good)
                    if output_dir:
                        save_checkpoint(os.path.join(output_dir, LAST_GOOD_FILE), model.store)
                    raise TrainingDiverged(f"SGPM diverged in epoch {epoch}: {e}", good, result.history) from e
                good = model.store.snapshot()
            val_loss = train_loss
            if len(val_tokens):
                val_loss, _ = _mean_masked_loss(model, val_tokens, val_attn, val_plan, EVAL_BATCH)
            record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                      "skipped_batches": skipped, "seconds": round(time.perf_counter() - started, 3)}
            result.history.append(record)
            if history_file:
                history_file.write(json.dumps(record) + "\n")
                history_file.flush()
            logger.info("  -> epoch %d: train %.4f, val %.4f", epoch, train_loss, val_loss)
            if val_loss < result.best_val_loss:
                result.best_val_loss, result.best_epoch = val_loss, epoch
                best = model.store.snapshot()
                if ckpt:
                    save_checkpoint(ckpt, model.store)
    finally:
        if history_file:
            history_file.close()

    model.store.restore(best)
    logger.info("Best SGPM epoch %d (val loss %.4f)", result.best_epoch, result.best_val_loss)
    return result


def _train_epoch(model, tokens, attn, plan, cfg, epoch):
    order = stream_rng(cfg.seed, "shuffle", epoch).permutation(len(tokens))
    # position of every sentence inside the shuffled order
    where = np.empty_like(order)
    where[order] = np.arange(len(order))
    idx = np.argsort(where[plan.rows], kind="stable")
    plan = MaskingPlan(where[plan.rows][idx], plan.positions[idx], plan.targets[idx])
    total, count, skipped = 0.0, 0, 0
    for step, start in enumerate(range(0, len(order), cfg.batch_size)):
        part = _slice_plan(plan.rows, plan, start, start + cfg.batch_size)
        if not len(part):
            skipped += 1
            continue
        batch = order[start:start + cfg.batch_size]
        model.store.zero_grad()
        loss = model.masked_loss(tokens[batch], attn[batch], part, training=True,
                                 rng=stream_rng(cfg.seed, "dropout", epoch, step))
        loss.backward()
        optimizer_step(model.store, cfg.lr, cfg.weight_decay)
        total += float(loss.value[0, 0]) * len(part)
        count += len(part)
    if skipped:
        logger.debug("Skipped %d batch(es) without masked tokens", skipped)
    return (total / count if count else float("nan")), skipped


def load_sgpm_model(path, dataset, doc_meta, cfg):
    """Rebuild the model architecture and load checkpointed parameters."""
    max_len = max_sentence_tokens(doc_meta["mu"], doc_meta["sigma"])
    model = SgpmModel(Vocabulary(dataset.node_count), dataset.features, dataset.graph.degrees, cfg, max_len)
    load_checkpoint(path, model.store)
    return model


def export_sgpm_tokens(model, mode="input", doc=None, batch=EVAL_BATCH):
    """One d_h vector per node.

    input:      T[v] + P[1] + (X_v W + b) + C[bucket(deg v)]
    contextual: mean final hidden state at position 1 over the node's
                validation sentences (train sentences if it has none)
    """
    n = model.vocab.node_count
    if mode == "input":
        vectors = model.tables.node_vectors(np.arange(n), model.features, model.degrees, TOKEN_POSITION)
        return vectors.value.astype(np.float32)
    if mode != "contextual":
        raise ConfigError(f"unknown SGPM token mode {mode!r}")
    if doc is None:
        raise ConfigError("contextual SGPM tokens need the graph document")

    walks, owners = [], []
    for v in range(n):
        chosen = doc.val[v] or doc.train[v]
        walks.extend(chosen)
        owners.extend([v] * len(chosen))
    owners = np.asarray(owners, dtype=np.int64)
    sums = np.zeros((n, model.cfg.d_h), dtype=np.float64)
    for start in range(0, len(walks), batch):
        enc = [encode_sentence(model.vocab, w, model.max_len) for w in walks[start:start + batch]]
        ids = np.stack([e.token_ids for e in enc])
        mask = np.stack([e.attention_mask for e in enc])
        h = model.hidden(ids, mask).value.reshape(len(enc), model.max_len, -1)
        np.add.at(sums, owners[start:start + batch], h[:, TOKEN_POSITION, :])
    counts = np.bincount(owners, minlength=n)[:, None]
    return (sums / np.maximum(counts, 1)).astype(np.float32)


def save_sgpm_tokens(directory, tokens, source_ckpt):
    os.makedirs(directory, exist_ok=True)
    np.ascontiguousarray(tokens, dtype="<f4").tofile(os.path.join(directory, TOKENS_FILE))
    with open(os.path.join(directory, TOKENS_META_FILE), "w") as f:
        json.dump({"n": int(tokens.shape[0]), "d_h": int(tokens.shape[1]), "source_ckpt": source_ckpt}, f, indent=2)


def load_sgpm_tokens(directory):
    try:
        with open(os.path.join(directory, TOKENS_META_FILE)) as f:
            meta = json.load(f)
        raw = np.fromfile(os.path.join(directory, TOKENS_FILE), dtype="<f4")
    except FileNotFoundError as e:
        raise InputError(f"SGPM tokens missing: {e.filename}") from None
    if raw.size != meta["n"] * meta["d_h"]:
        raise InputError(f"{directory}/{TOKENS_FILE}: expected {meta['n']}x{meta['d_h']} floats, found {raw.size}")
    return raw.reshape(meta["n"], meta["d_h"]).astype(np.float32)
