"""Corpus ingestion: CSV loading, tokenization, vocabularies, embeddings.

File formats:

* Corpus CSV: UTF-8, comma-separated, double-quoted fields.  The first
  field is a 1-based class index; remaining fields are text.
* Embedding file: UTF-8 text, one entry per line, a token followed by d
  space-separated decimal floats.
"""

from __future__ import annotations

import csv
import hashlib
import re
import string
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, default_dtype

PAD_ID = 0
UNK_ID = 1

_TOKEN_RE = re.compile(
    "[^\\s" + re.escape(string.punctuation) + "]+|[" + re.escape(string.punctuation) + "]")


class MalformedRow(ValueError):
    def __init__(self, line_no, reason):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class LabelOutOfDeclaredRange(ValueError):
    def __init__(self, line_no, label, num_classes):
        hint = f"1..{num_classes}" if num_classes else ">= 1"
        super().__init__(f"line {line_no}: label {label} outside declared range {hint}")
        self.line_no = line_no


class DimMismatch(ValueError):
    def __init__(self, line_no, got, want):
        super().__init__(f"line {line_no}: {got} vector components, expected {want}")
        self.line_no = line_no


class UnparseableFloat(ValueError):
    def __init__(self, line_no, token):
        super().__init__(f"line {line_no}: cannot parse {token!r} as float")
        self.line_no = line_no


class IdOutOfRange(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, punctuation as standalone tokens."""
    return _TOKEN_RE.findall(text.lower())


def load_csv_texts(path, num_classes: int | None = None, field_policy: str = "concat"):
    """Read a benchmark-layout CSV into (texts, labels, num_classes).

    Labels come back 0-based.  With ``num_classes`` given, any 1-based label
    outside [1, num_classes] is rejected; otherwise the class count is
    inferred from the largest label seen.
    """
    if field_policy not in ("concat", "first", "last"):
        raise ValueError(f"unknown field_policy {field_policy!r}")
    texts: list[str] = []
    labels: list[int] = []
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) < 2:
                raise MalformedRow(line_no, f"expected >= 2 fields, got {len(row)}")
            try:
                label = int(row[0])
            except ValueError:
                raise MalformedRow(line_no, f"label field {row[0]!r} is not an integer")
            if label < 1 or (num_classes is not None and label > num_classes):
                raise LabelOutOfDeclaredRange(line_no, label, num_classes)
            fields = row[1:]
            if field_policy == "concat":
                text = " ".join(fields)
            elif field_policy == "first":
                text = fields[0]
            else:
                text = fields[-1]
            texts.append(text)
            labels.append(label - 1)
    arr = np.asarray(labels, dtype=np.int64)
    inferred = num_classes if num_classes is not None else (int(arr.max()) + 1 if len(arr) else 0)
    return texts, arr, inferred


@dataclass
class Vocab:
    """Token/id maps with PAD=0 and UNK=1 reserved."""

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(repr=False)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_for(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id


def build_vocab(texts, min_count: int = 1) -> Vocab:
    """Count tokens over the corpus; keep those seen at least ``min_count`` times.

    Kept tokens are ordered by (frequency desc, token asc), so the result is
    independent of the order of ``texts``.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: dict[str, int] = {}
    for text in texts:
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(
        (tok for tok, n in counts.items() if n >= min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    id_to_token = ["<pad>", "<unk>"] + kept
    return Vocab(id_to_token, {tok: i for i, tok in enumerate(id_to_token)})


@dataclass
class EmbeddingTable:
    """V x d word vectors; row PAD_ID is pinned to zero.

    ``mean``/``std`` are the empirical statistics of all non-PAD entries,
    used to match the scale of randomly initialized synthetic matrices.
    """

    vectors: np.ndarray
    mean: float
    std: float

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.vectors.shape[0]).tobytes())
        h.update(np.int64(self.vectors.shape[1]).tobytes())
        h.update(np.ascontiguousarray(self.vectors, dtype=np.float64).tobytes())
        return h.hexdigest()


def _finish_table(vectors: np.ndarray) -> EmbeddingTable:
    vectors[PAD_ID] = 0.0
    body = vectors[np.arange(len(vectors)) != PAD_ID]
    return EmbeddingTable(vectors, float(body.mean()), float(body.std()))


def load_embeddings(path, vocab: Vocab, dim: int, seed: int) -> EmbeddingTable:
    """Fill a table from a vector file; unseen tokens get random rows.

    Random rows are drawn i.i.d. Normal(0, sigma^2) with sigma the empirical
    standard deviation of all vectors in the file, so out-of-vocabulary
    tokens live at the same scale as the pretrained ones.
    """
    file_vectors: dict[str, np.ndarray] = {}
    flat: list[np.ndarray] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.rstrip("\n")
            if not stripped.strip():
                continue
            parts = stripped.split(" ")
            token, comps = parts[0], parts[1:]
            if len(comps) != dim:
                raise DimMismatch(line_no, len(comps), dim)
            try:
                vec = np.array([float(c) for c in comps], dtype=np.float64)
            except ValueError:
                bad = next(c for c in comps if not _is_float(c))
                raise UnparseableFloat(line_no, bad)
            file_vectors[token] = vec
            flat.append(vec)
    sigma = float(np.concatenate(flat).std()) if flat else 1.0

    rng = np.random.default_rng(seed)
    vectors = np.zeros((len(vocab), dim), dtype=np.float64)
    for idx, token in enumerate(vocab.id_to_token):
        if idx == PAD_ID:
            continue
        vec = file_vectors.get(token)
        vectors[idx] = vec if vec is not None else rng.normal(0.0, sigma, size=dim)
    return _finish_table(vectors)


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def random_embedding_table(vocab: Vocab, dim: int, seed: int, sigma: float = 0.4) -> EmbeddingTable:
    """A fully random table for corpora without pretrained vectors."""
    rng = np.random.default_rng(seed)
    vectors = rng.normal(0.0, sigma, size=(len(vocab), dim))
    return _finish_table(vectors)


def encode(tokens, vocab: Vocab, max_len: int) -> np.ndarray:
    """Token ids truncated to ``max_len`` and right-padded with PAD."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = np.full(max_len, PAD_ID, dtype=np.int32)
    for i, tok in enumerate(tokens[:max_len]):
        ids[i] = vocab.id_for(tok)
    return ids


@dataclass
class Dataset:
    """Encoded corpus: (N, L) token ids plus N labels in [0, num_classes)."""

    token_ids: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.token_ids.ndim != 2 or len(self.token_ids) != len(self.labels):
            raise ValueError("token_ids must be (N, L) aligned with labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def max_len(self) -> int:
        return self.token_ids.shape[1]

    @classmethod
    def from_texts(cls, texts, labels, vocab: Vocab, max_len: int, num_classes: int) -> "Dataset":
        ids = np.stack([encode(tokenize(t), vocab, max_len) for t in texts]) if len(texts) \
            else np.zeros((0, max_len), dtype=np.int32)
        return cls(ids, labels, num_classes)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.token_ids[indices], self.labels[indices], self.num_classes)


def embed_batch(token_ids: np.ndarray, table: EmbeddingTable) -> Tensor:
    """Gather rows of the table: (B, L) ids -> constant (B, L, d) tensor.

    The result carries no gradient to the table; embeddings stay frozen in
    every training mode.
    """
    ids = np.asarray(token_ids)
    if ids.min() < 0 or ids.max() >= len(table):
        raise IdOutOfRange(f"token id outside [0, {len(table)})")
    return Tensor(table.vectors[ids], dtype=default_dtype())


class BatchIterator:
    """Deterministic shuffled minibatches; wraps across epochs forever.

    Epoch ``e`` is ordered by ``default_rng(seed + e).permutation(N)``; the
    final partial batch of an epoch is emitted as-is.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0):
        if len(dataset) == 0:
            raise ValueError("cannot iterate an empty dataset")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self._cursor = 0
        self._order = self._permutation(0)

    def _permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng(self.seed + epoch).permutation(len(self.dataset))

    @property
    def batches_per_epoch(self) -> int:
        n = len(self.dataset)
        return -(-n // self.batch_size)

    def next_batch(self):
        """(token_ids (B, L), labels (B,)); B may be short at epoch end."""
        n = len(self.dataset)
        if self._cursor >= n:
            self.epoch += 1
            self._order = self._permutation(self.epoch)
            self._cursor = 0
        idx = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += len(idx)
        return self.dataset.token_ids[idx], self.dataset.labels[idx]
