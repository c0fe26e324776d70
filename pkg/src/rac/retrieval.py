"""Retrieval branch: frozen key encoder, index lookup, label-text assembly,
three text-encoder variants, the pure k-NN baseline, and inspection reports.

The branch is a deterministic function of its inputs: the key encoder is
frozen, the index is static, the tokenizer vocabulary is frozen after
setup, and the cached random embeddings never train.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .ann import KeyStore, Neighbors
from .autodiff import (
    ParamTensor,
    affine_backward,
    affine_forward,
    embed_pool_backward,
    embed_pool_forward,
)
from .dataspace import Dataset
from .errors import FormatError, ValidationError
from .losses import Logits

MAX_TOKENS = 76
PADDING_ID = 0
TEXT_VARIANTS = ("learned_pool", "fixed_bow", "random_bow")
_TOKEN_RE = re.compile(r"\w+")


@dataclass(frozen=True)
class RetrievalConfig:
    """How many neighbors feed the text branch and how they are fetched."""

    k: int = 30
    drop_first: bool = False  # drop the nearest hit (training with train set indexed)
    metric: str = "cosine"

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("retrieval k must be at least 1")


class FrozenEncoder:
    """Immutable feature-to-key map: identity or a seeded random projection."""

    def __init__(self, kind: str, input_dim: int, key_dim: int | None = None, seed: int = 0):
        if kind not in ("identity", "random_projection"):
            raise ValidationError(f"unknown frozen encoder kind {kind!r}")
        self.kind = kind
        self.input_dim = input_dim
        if kind == "identity":
            if key_dim is not None and key_dim != input_dim:
                raise ValidationError("identity encoder requires key_dim == input_dim")
            self.key_dim = input_dim
            self._matrix = None
        else:
            if key_dim is None or key_dim < 1:
                raise ValidationError("random_projection requires a positive key_dim")
            self.key_dim = key_dim
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
            self._matrix = rng.normal(0.0, 1.0 / np.sqrt(key_dim), size=(input_dim, key_dim))
            self._matrix.setflags(write=False)
        self.seed = seed

    def encode(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features[None, :]
        if features.shape[1] != self.input_dim:
            raise ValidationError(
                f"encoder expects dimension {self.input_dim}, got {features.shape[1]}"
            )
        if self._matrix is None:
            return features.copy()
        # Row-at-a-time so a sample's key never depends on how the batch was
        # sliced; training loops rely on cached lookups matching recomputation
        # bit for bit.
        out = np.empty((features.shape[0], self.key_dim))
        for i in range(features.shape[0]):
            out[i] = features[i] @ self._matrix
        return out


def encode_keys(encoder: FrozenEncoder, dataset: Dataset) -> KeyStore:
    """One key per sample, ids equal to sample row numbers."""
    return KeyStore(encoder.encode(dataset.features))


class Tokenizer:
    """Lowercasing word tokenizer with a grow-then-freeze vocabulary.

    Splitting keeps word characters together (underscores included, so
    identifiers like class_007 stay whole) and drops punctuation. Id 0 is
    reserved for padding; unseen tokens after freeze() map to padding.
    """

    def __init__(self, max_tokens: int = MAX_TOKENS):
        if max_tokens < 1:
            raise ValidationError("max_tokens must be at least 1")
        self.max_tokens = max_tokens
        self.token_to_id: dict[str, int] = {}
        self.frozen = False

    @property
    def vocab_size(self) -> int:
        return len(self.token_to_id) + 1  # + padding row

    def tokenize(self, text: str) -> list[str]:
        return _TOKEN_RE.findall(text.lower())

    def encode(self, text: str) -> list[int]:
        ids = []
        for tok in self.tokenize(text):
            tid = self.token_to_id.get(tok)
            if tid is None:
                if self.frozen:
                    tid = PADDING_ID
                else:
                    tid = len(self.token_to_id) + 1
                    self.token_to_id[tok] = tid
            ids.append(tid)
        return ids

    def freeze(self):
        self.frozen = True

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token.lower(), PADDING_ID)


class TextStore:
    """J texts aligned with key-store rows, addressable by payload id."""

    def __init__(self, ids: np.ndarray, texts: list[str], sources: list[str] | None = None):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.texts = list(texts)
        self.sources = list(sources) if sources is not None else ["train"] * len(texts)
        if not (len(self.ids) == len(self.texts) == len(self.sources)):
            raise ValidationError("ids, texts, and sources must align")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValidationError("text store ids must be unique")
        self._by_id = {int(i): row for row, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.texts)

    def text_by_id(self, payload_id: int) -> str:
        row = self._by_id.get(int(payload_id))
        if row is None:
            raise ValidationError(f"no text for id {payload_id}")
        return self.texts[row]

    def save(self, path: str):
        with open(path, "w") as fh:
            for i, src, text in zip(self.ids, self.sources, self.texts):
                if "\t" in text or "\n" in text or "\t" in src or "\n" in src:
                    raise ValidationError("text store entries must not contain tabs or newlines")
                fh.write(f"{i}\t{src}\t{text}\n")

    @classmethod
    def load(cls, path: str) -> "TextStore":
        ids, sources, texts = [], [], []
        try:
            with open(path) as fh:
                for lineno, line in enumerate(fh, start=1):
                    parts = line.rstrip("\n").split("\t", 2)
                    if len(parts) != 3:
                        raise FormatError(f"{path}:{lineno}: expected id<TAB>source<TAB>text")
                    try:
                        ids.append(int(parts[0]))
                    except ValueError as exc:
                        raise FormatError(f"{path}:{lineno}: non-integer id") from exc
                    sources.append(parts[1])
                    texts.append(parts[2])
        except OSError as exc:
            raise FormatError(f"cannot read text store {path}: {exc}") from exc
        if not ids:
            raise FormatError(f"{path}: empty text store")
        return cls(np.array(ids), texts, sources)


def build_vocabulary(tokenizer: Tokenizer, texts) -> Tokenizer:
    """Grow the vocabulary over the store's texts, then freeze it."""
    for text in texts:
        tokenizer.encode(text)
    tokenizer.freeze()
    return tokenizer


def assemble_text(
    neighbors: Neighbors,
    store: TextStore,
    cfg: RetrievalConfig,
    tokenizer: Tokenizer,
    drop_first: bool | None = None,
) -> list[int]:
    """Token ids for the neighbors' texts, concatenated nearest-first.

    Texts join with single spaces and the sequence truncates at the token
    limit. With drop_first the nearest hit is excluded (callers fetch k+1
    so k texts remain).
    """
    if drop_first is None:
        drop_first = cfg.drop_first
    pids = neighbors.ids.tolist()
    if drop_first:
        pids = pids[1:]
    pids = pids[: cfg.k]
    joined = " ".join(store.text_by_id(p) for p in pids)
    return tokenizer.encode(joined)[: tokenizer.max_tokens]


def pad_batch(sequences: list[list[int]]) -> np.ndarray:
    """Zero-pad ragged token sequences into an (N, S) int64 batch."""
    if not sequences:
        raise ValidationError("cannot pad an empty batch")
    width = max(1, max(len(s) for s in sequences))
    out = np.full((len(sequences), width), PADDING_ID, dtype=np.int64)
    for i, seq in enumerate(sequences):
        out[i, : len(seq)] = seq
    return out


# ---------------------------------------------------------------------------
# Fixed embedding file: line 1 "V d", then "token v_1 ... v_d" per line.
# ---------------------------------------------------------------------------


def write_fixed_embeddings(path: str, tokens: list[str], matrix: np.ndarray):
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[0] != len(tokens):
        raise ValidationError("one embedding row per token required")
    with open(path, "w") as fh:
        fh.write(f"{len(tokens)} {matrix.shape[1]}\n")
        for tok, row in zip(tokens, matrix):
            fh.write(tok + " " + " ".join(repr(float(v)) for v in row) + "\n")


def read_fixed_embeddings(path: str) -> tuple[dict[str, np.ndarray], int]:
    try:
        with open(path) as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise FormatError(f"{path}: malformed embedding header")
            try:
                v, d = int(header[0]), int(header[1])
            except ValueError as exc:
                raise FormatError(f"{path}: non-integer embedding header") from exc
            table = {}
            for i in range(v):
                parts = fh.readline().split()
                if len(parts) != d + 1:
                    raise FormatError(f"{path}: row {i} has wrong arity")
                table[parts[0]] = np.array([float(x) for x in parts[1:]], dtype=np.float64)
    except OSError as exc:
        raise FormatError(f"cannot read embeddings {path}: {exc}") from exc
    return table, d


# ---------------------------------------------------------------------------
# Text encoders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TextEncoderSpec:
    """Which text encoder variant produces the retrieval logits."""

    variant: str = "learned_pool"
    embed_dim: int = 512
    pooling: str = "mean"

    def __post_init__(self):
        if self.variant not in TEXT_VARIANTS:
            raise ValidationError(f"variant must be one of {TEXT_VARIANTS}")
        if self.pooling not in ("mean", "sum"):
            raise ValidationError("pooling must be mean or sum")
        if self.embed_dim < 1:
            raise ValidationError("embed_dim must be positive")


def default_spec(variant: str, pooling: str = "mean") -> TextEncoderSpec:
    dim = 512 if variant == "learned_pool" else 300
    return TextEncoderSpec(variant, dim, pooling)


class TextEncoder:
    """Token batch -> pooled embedding -> affine head -> class logits.

    learned_pool trains both the embedding table and the head; the bag-of-
    words variants freeze the table (cached random rows in [0,1) or rows
    loaded from a fixed embedding file) and train only the head.
    """

    def __init__(
        self,
        spec: TextEncoderSpec,
        tokenizer: Tokenizer,
        num_classes: int,
        seed: int = 0,
        embeddings_path: str | None = None,
    ):
        self.spec = spec
        self.num_classes = num_classes
        self.vocab_size = tokenizer.vocab_size
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7001])))
        if spec.variant == "learned_pool":
            table = rng.normal(0.0, 1.0 / np.sqrt(spec.embed_dim), (self.vocab_size, spec.embed_dim))
            table[PADDING_ID] = 0.0
            self._train_table = True
        elif spec.variant == "random_bow":
            # float32 draws stay exactly in [0,1) and reload bitwise from seed
            table32 = rng.random((self.vocab_size, spec.embed_dim), dtype=np.float32)
            table32[PADDING_ID] = 0.0
            table = table32.astype(np.float64)
            self._train_table = False
        else:  # fixed_bow
            if embeddings_path is None:
                raise ValidationError("fixed_bow requires an embeddings file")
            vectors, d = read_fixed_embeddings(embeddings_path)
            if d != spec.embed_dim:
                raise ValidationError(
                    f"embedding file dimension {d} does not match spec {spec.embed_dim}"
                )
            table = np.zeros((self.vocab_size, d))
            for tok, tid in tokenizer.token_to_id.items():
                if tok in vectors:
                    table[tid] = vectors[tok]
            self._train_table = False
        scale = np.sqrt(2.0 / (spec.embed_dim + num_classes))
        self.table = ParamTensor(table, "text.table")
        self.head_W = ParamTensor(rng.normal(0.0, scale, (spec.embed_dim, num_classes)), "text.head.W")
        self.head_b = ParamTensor(np.zeros(num_classes), "text.head.b")

    def parameters(self) -> list[ParamTensor]:
        params = [self.head_W, self.head_b]
        if self._train_table:
            params.insert(0, self.table)
        return params

    def forward(self, tokens: np.ndarray) -> tuple[Logits, tuple]:
        """One encoder call per batch; all-padding rows yield the head bias."""
        pooled = embed_pool_forward(tokens, self.table.values, self.spec.pooling, PADDING_ID)
        values = affine_forward(pooled, self.head_W.values, self.head_b.values)
        return Logits(values, branch="ret"), (tokens, pooled)

    def backward(self, cache: tuple, upstream: np.ndarray):
        tokens, pooled = cache
        g_pooled, g_w, g_b = affine_backward(pooled, self.head_W.values, upstream)
        self.head_W.accumulate(g_w)
        self.head_b.accumulate(g_b)
        if self._train_table:
            g_table = embed_pool_backward(
                tokens, self.vocab_size, g_pooled, self.spec.pooling, PADDING_ID
            )
            self.table.accumulate(g_table)


def text_logits(encoder: TextEncoder, tokens: np.ndarray) -> Logits:
    """Forward-only convenience wrapper."""
    logits, _ = encoder.forward(tokens)
    return logits


# ---------------------------------------------------------------------------
# Retrieval branch bundle
# ---------------------------------------------------------------------------


@dataclass
class RetrievalBranch:
    """Everything the retrieval path needs, wired together."""

    frozen_encoder: FrozenEncoder
    index: object  # ExactIndex or HnswIndex
    text_store: TextStore
    tokenizer: Tokenizer
    text_encoder: TextEncoder
    config: RetrievalConfig

    def neighbors_for(self, features: np.ndarray, training: bool) -> list[Neighbors]:
        drop = self.config.drop_first and training
        fetch = self.config.k + 1 if drop else self.config.k
        queries = self.frozen_encoder.encode(features)
        return [self.index.query(q, fetch) for q in queries]

    def token_batch(self, features: np.ndarray, training: bool) -> np.ndarray:
        """Padded token batch for a feature matrix; epoch-invariant, so
        training loops may cache it per dataset."""
        drop = self.config.drop_first and training
        seqs = [
            assemble_text(nb, self.text_store, self.config, self.tokenizer, drop_first=drop)
            for nb in self.neighbors_for(features, training)
        ]
        return pad_batch(seqs)


# ---------------------------------------------------------------------------
# k-NN baseline and inspection
# ---------------------------------------------------------------------------


def knn_classify(index, labels: np.ndarray, queries: np.ndarray, k: int = 1) -> np.ndarray:
    """Majority vote over the k nearest keys, nearest-first on vote ties.

    labels align with the index's key rows (labels[i] belongs to key i in
    store order).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != index.n:
        raise ValidationError("labels must align with the index key rows")
    if k < 1:
        raise ValidationError("k must be at least 1")
    by_id = {int(pid): int(lab) for pid, lab in zip(index.store.ids, labels)}
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    out = np.empty(len(queries), dtype=np.int64)
    for i, q in enumerate(queries):
        nb = index.query(q, k)
        votes: dict[int, int] = {}
        first_rank: dict[int, int] = {}
        for rank, pid in enumerate(nb.ids.tolist()):
            lab = by_id[pid]
            votes[lab] = votes.get(lab, 0) + 1
            first_rank.setdefault(lab, rank)
        out[i] = min(votes, key=lambda lab: (-votes[lab], first_rank[lab]))
    return out


def inspect_retrievals(
    branch: RetrievalBranch,
    features: np.ndarray,
    true_labels: np.ndarray,
    class_texts: list[str],
    n: int,
    hist_bins: int = 16,
    top: int = 8,
) -> list[dict]:
    """Per-query retrieval reports: labels by distance with exact-match
    flags, label frequency counts, and a distance histogram."""
    if n < 1:
        raise ValidationError("n must be at least 1")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    true_labels = np.asarray(true_labels, dtype=np.int64)
    n = min(n, len(features))
    label_of = {int(pid): t for pid, t in zip(branch.text_store.ids, branch.text_store.texts)}
    records = []
    for i in range(n):
        nb = branch.neighbors_for(features[i : i + 1], training=False)[0]
        true_text = class_texts[true_labels[i]]
        texts = [label_of[int(p)] for p in nb.ids]
        retrieved = [
            {
                "label": t,
                "distance": float(d),
                "exact_match": t == true_text,
            }
            for t, d in zip(texts[:top], nb.distances[:top])
        ]
        counts: dict[str, int] = {}
        for t in texts:
            counts[t] = counts.get(t, 0) + 1
        hist_counts, hist_edges = np.histogram(nb.distances, bins=hist_bins)
        records.append(
            {
                "query_id": i,
                "true_label": int(true_labels[i]),
                "true_text": true_text,
                "retrieved": retrieved,
                "label_counts": counts,
                "hist_edges": hist_edges.tolist(),
                "hist_counts": hist_counts.tolist(),
            }
        )
    return records
