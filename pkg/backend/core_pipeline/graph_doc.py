# graph_doc.py - Graph document, vocabulary and input representation tables
#
# A graph document holds, per node, a set of non-backtracking walks ("sentences")
# starting at that node. Sentences are encoded as
#   [CLS] t(v0) t(v1) ... t(vl) [SEP] [PAD]...
# with node v mapped to token id v + FIRST_NODE_TOKEN.

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from pydantic import Field

from .errors import ConfigError, InputError, LogicError
from .nn_kernel import Tensor, add, gather_rows, matmul, mul
from .settings import StrictModel, worker_count
from .walk_engine import EdgeTransitionRule, Walk, read_walks, sample_walk, stream_rng, write_walks

logger = logging.getLogger(__name__)

# --- Configuration ---
PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
FIRST_NODE_TOKEN = len(SPECIAL_TOKENS)
MAX_MEAN_LENGTH = 32
DEGREE_BUCKET_EDGES = (1, 2, 3, 4, 8, 16, 32)  # buckets {0},{1},{2},{3},[4,8),[8,16),[16,32),[32,inf)
DEGREE_BUCKETS = len(DEGREE_BUCKET_EDGES) + 1
NODES_PER_TASK = 64
DOCUMENT_META_KEYS = ("mu", "sigma", "seed", "walks_per_node")


class DocumentConfig(StrictModel):
    walks_per_node: int = Field(100, ge=1)
    val_walks_per_node: int = Field(20, ge=0)
    mean_length: int | None = Field(None, ge=1)  # defaults to the graph radius, capped
    std_length: float = Field(1.0, ge=0.0)
    seed: int = 0


@dataclass(frozen=True, eq=False)
class GraphDocument:
    train: list
    val: list
    mean_length: int
    std_length: float
    seed: int
    walks_per_node: int

    @property
    def node_count(self):
        return len(self.train)

    def max_sentence_nodes(self):
        return max((len(w.nodes) for part in (self.train, self.val) for ws in part for w in ws), default=1)


def default_mean_length(radius):
    return int(min(max(radius, 1), MAX_MEAN_LENGTH))


def generate_document(g, walks_per_node, val_walks, mu, sigma, seed, workers=None):
    """Non-backtracking sentences per node with lengths round(N(mu, sigma^2))
    clamped to [1, 4*mu]. Each node draws from its own stream."""
    if mu < 1:
        raise ConfigError(f"mean sentence length must be >= 1, got {mu}")
    rule = EdgeTransitionRule(g)
    total = walks_per_node + val_walks

    def run(block):
        out = []
        for v in block:
            rng = stream_rng(seed, "document", v)
            lengths = np.clip(np.rint(rng.normal(mu, sigma, size=total)), 1, 4 * mu).astype(int)
            walks = [sample_walk(rule, v, int(l), rng=rng) for l in lengths]
            out.append((walks[:walks_per_node], walks[walks_per_node:]))
        return out

    blocks = [range(s, min(s + NODES_PER_TASK, g.node_count)) for s in range(0, g.node_count, NODES_PER_TASK)]
    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        parts = [pair for part in pool.map(run, blocks) for pair in part]
    logger.info("Graph document: %d train + %d val sentences per node, mu=%d sigma=%.2f",
                walks_per_node, val_walks, mu, sigma)
    return GraphDocument([p[0] for p in parts], [p[1] for p in parts], int(mu), float(sigma), seed, walks_per_node)


def save_document(directory, doc):
    os.makedirs(directory, exist_ok=True)
    write_walks(os.path.join(directory, "train.txt"), doc.train, doc.seed)
    write_walks(os.path.join(directory, "val.txt"), doc.val, doc.seed)
    with open(os.path.join(directory, "meta.json"), "w") as f:
        json.dump({"mu": doc.mean_length, "sigma": doc.std_length, "seed": doc.seed,
                   "walks_per_node": doc.walks_per_node}, f, indent=2)


def load_document(directory, node_count):
    try:
        with open(os.path.join(directory, "meta.json")) as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise InputError(f"{directory}: graph document not found") from None
    missing = set(DOCUMENT_META_KEYS) - set(meta)
    if missing:
        raise InputError(f"{directory}/meta.json: missing keys {sorted(missing)}")
    train = read_walks(os.path.join(directory, "train.txt"), node_count)
    val = read_walks(os.path.join(directory, "val.txt"), node_count)
    return GraphDocument(train, val, meta["mu"], meta["sigma"], meta["seed"], meta["walks_per_node"])


@dataclass(frozen=True)
class Vocabulary:
    node_count: int

    @property
    def size(self):
        return self.node_count + FIRST_NODE_TOKEN

    def token(self, node):
        return node + FIRST_NODE_TOKEN if 0 <= node < self.node_count else UNK

    def node(self, token):
        if token < FIRST_NODE_TOKEN or token >= self.size:
            raise LogicError(f"token {token} is not a node token")
        return token - FIRST_NODE_TOKEN

    def is_special(self, token):
        return token < FIRST_NODE_TOKEN


@dataclass(frozen=True, eq=False)
class EncodedSentence:
    token_ids: np.ndarray
    attention_mask: np.ndarray
    truncated: bool = False
    unknown_count: int = 0

    @property
    def real_positions(self):
        """Positions of sentence tokens (not CLS, SEP or PAD)."""
        ids = self.token_ids
        return np.flatnonzero(self.attention_mask & (ids != CLS) & (ids != SEP))


def encode_sentence(vocab, walk, max_len):
    if max_len < 3:
        raise ConfigError(f"max_len must leave room for [CLS], one token and [SEP], got {max_len}")
    nodes = walk.nodes if isinstance(walk, Walk) else np.asarray(walk, dtype=np.int64)
    truncated = len(nodes) > max_len - 2
    nodes = nodes[:max_len - 2]
    known = (nodes >= 0) & (nodes < vocab.node_count)
    unknown = int((~known).sum())
    if unknown:
        logger.warning("%d node id(s) outside the vocabulary mapped to [UNK]", unknown)
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[0] = CLS
    ids[1:1 + len(nodes)] = np.where(known, nodes + FIRST_NODE_TOKEN, UNK)
    ids[1 + len(nodes)] = SEP
    mask = np.zeros(max_len, dtype=bool)
    mask[:2 + len(nodes)] = True
    return EncodedSentence(ids, mask, truncated, unknown)


def encode_batch(vocab, walks, max_len):
    """Encode many sentences; returns (token_ids, attention_mask, truncated count)."""
    encoded = [encode_sentence(vocab, w, max_len) for w in walks]
    if not encoded:
        return np.zeros((0, max_len), dtype=np.int64), np.zeros((0, max_len), dtype=bool), 0
    tokens = np.stack([e.token_ids for e in encoded])
    masks = np.stack([e.attention_mask for e in encoded])
    truncated = sum(e.truncated for e in encoded)
    if truncated:
        logger.warning("%d sentence(s) truncated to %d tokens", truncated, max_len)
    return tokens, masks, truncated


def degree_bucket(degrees):
    return np.searchsorted(DEGREE_BUCKET_EDGES, np.asarray(degrees), side="right")


def max_sentence_tokens(mu, sigma):
    """Token slots for sentences of up to mu + 4*sigma edges plus [CLS] and [SEP]."""
    return int(np.ceil(mu + 4 * sigma)) + 3


class InputRepresentationTables:
    """Learned token, position, feature-projection and centrality tables.

    A token at position p with node v gets T[t] + P[p] + (X_v W + b) + C[bucket(deg v)];
    special tokens get only T[t] + P[p].
    """

    def __init__(self, store, vocab, feature_dim, d_h, max_len, prefix="embed"):
        self.vocab = vocab
        self.max_len = max_len
        self.token = store.create(f"{prefix}.token", vocab.size, d_h)
        self.position = store.create(f"{prefix}.position", max_len, d_h)
        self.feature_w = store.create(f"{prefix}.feature.w", feature_dim, d_h)
        self.feature_b = store.create(f"{prefix}.feature.b", 1, d_h, init="zeros")
        self.centrality = store.create(f"{prefix}.centrality", DEGREE_BUCKETS, d_h)

    def __call__(self, token_ids, features, degrees, positions=None):
        """token_ids: (B, L) ints -> Tensor (B*L, d_h)."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        b, length = token_ids.shape
        if length > self.max_len and positions is None:
            raise LogicError(f"sequence length {length} exceeds position table of {self.max_len}")
        flat = token_ids.reshape(-1)
        if positions is None:
            positions = np.tile(np.arange(length), b)
        is_node = flat >= FIRST_NODE_TOKEN
        nodes = np.where(is_node, flat - FIRST_NODE_TOKEN, 0)
        gate = is_node.astype(self.feature_w.value.dtype)[:, None]

        x_rows = Tensor(features[nodes] * gate)
        feat = add(matmul(x_rows, self.feature_w), mul(Tensor(gate), self.feature_b))
        cent = mul(gather_rows(self.centrality, degree_bucket(degrees[nodes])), Tensor(gate))
        return add(add(gather_rows(self.token, flat), gather_rows(self.position, positions)), add(feat, cent))

    def node_vectors(self, nodes, features, degrees, position=1):
        """Input-layer vectors of the given nodes at a fixed position."""
        nodes = np.asarray(nodes, dtype=np.int64)
        ids = (nodes + FIRST_NODE_TOKEN)[:, None]
        return self(ids, features, degrees, positions=np.full(len(nodes), position))


def input_representation(tables, sentence, features, degrees):
    """(max_len, d_h) input matrix for one encoded sentence."""
    return tables(sentence.token_ids[None, :], features, degrees)
