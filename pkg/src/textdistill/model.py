"""Single-layer convolutional text classifier.

Parallel filter widths over an embedded sequence, relu, max-over-time
pooling, then a linear head.  No dropout, no weight decay: training is
plain SGD on the cross-entropy loss everywhere in this package, so that
synthetic and real training data face the identical optimization problem.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeMismatch, Tensor, default_dtype
from .textdata import Dataset, EmbeddingTable, embed_batch

CHECKPOINT_MAGIC = b"TCNN"
CHECKPOINT_VERSION = 1


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int
    num_classes: int
    widths: tuple = (3, 4, 5)
    channels: int = 32
    max_len: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.widths or any(w < 1 or w > self.max_len for w in self.widths):
            raise ValueError("every filter width must lie in [1, max_len]")

    def to_dict(self) -> dict:
        return {
            "embedding_dim": self.embedding_dim,
            "num_classes": self.num_classes,
            "widths": list(self.widths),
            "channels": self.channels,
            "max_len": self.max_len,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "widths": tuple(d["widths"])})


class ModelParams:
    """Named parameter tensors for one classifier instance.

    Treated as an immutable value between update steps; ``replace`` builds
    the next step's instance.
    """

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = dict(params)

    def names(self):
        return list(self.params)

    def tensors(self):
        return [self.params[name] for name in self.params]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def replace(self, tensors) -> "ModelParams":
        return ModelParams(self.config, dict(zip(self.params, tensors)))

    def num_values(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy(self) -> "ModelParams":
        out = {}
        for name, t in self.params.items():
            c = Tensor(t.data, requires_grad=True, dtype=t.data.dtype)
            out[name] = c
        return ModelParams(self.config, out)


def _glorot(rng, fan_in, fan_out, shape, dtype):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def init_params(config: ModelConfig, seed: int | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases, reproducible from the seed."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dtype = default_dtype()
    d, c = config.embedding_dim, config.channels
    params = {}
    for h in config.widths:
        params[f"conv{h}_w"] = Tensor(
            _glorot(rng, h * d, c, (h, d, c), dtype), requires_grad=True, dtype=dtype)
        params[f"conv{h}_b"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True, dtype=dtype)
    feat = len(config.widths) * c
    params["fc_w"] = Tensor(
        _glorot(rng, feat, config.num_classes, (feat, config.num_classes), dtype),
        requires_grad=True, dtype=dtype)
    params["fc_b"] = Tensor(np.zeros(config.num_classes, dtype=dtype),
                            requires_grad=True, dtype=dtype)
    return ModelParams(config, params)


def forward(params: ModelParams, batch: Tensor) -> Tensor:
    """Logits for an embedded batch: (B, L, d) -> (B, num_classes)."""
    cfg = params.config
    if batch.ndim != 3 or batch.shape[2] != cfg.embedding_dim:
        raise ShapeMismatch(
            f"forward: batch shape {batch.shape}, expected (B, L, {cfg.embedding_dim})")
    pooled = []
    for h in cfg.widths:
        conv = ops.conv1d_valid(batch, params[f"conv{h}_w"], params[f"conv{h}_b"])
        pooled.append(ops.max_over_time(ops.relu(conv)))
    return ops.affine(ops.concat_cols(pooled), params["fc_w"], params["fc_b"])


def loss(params: ModelParams, batch: Tensor, labels) -> Tensor:
    return ops.softmax_cross_entropy(forward(params, batch), labels)


def predict(params: ModelParams, batch: Tensor) -> np.ndarray:
    """Argmax class per example; ties resolve to the lowest class index."""
    return np.argmax(forward(params, batch).data, axis=1)


def accuracy(params: ModelParams, dataset: Dataset, table: EmbeddingTable,
             batch_size: int = 128) -> float:
    """Fraction of test examples whose argmax logit matches the label."""
    if len(dataset) == 0:
        raise EmptyDataset("accuracy over an empty dataset")
    hits = 0
    for start in range(0, len(dataset), batch_size):
        ids = dataset.token_ids[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        hits += int((predict(params, embed_batch(ids, table)) == labels).sum())
    return hits / len(dataset)


def accuracy_on_matrices(params: ModelParams, matrices: np.ndarray, labels: np.ndarray,
                         batch_size: int = 128) -> float:
    """Accuracy when the inputs are already embedded (synthetic samples)."""
    if len(matrices) == 0:
        raise EmptyDataset("accuracy over an empty sample set")
    hits = 0
    for start in range(0, len(matrices), batch_size):
        batch = Tensor(matrices[start:start + batch_size], dtype=default_dtype())
        hits += int((predict(params, batch) == labels[start:start + batch_size]).sum())
    return hits / len(matrices)


def save_params(path, params: ModelParams) -> None:
    """Binary checkpoint: magic, version, config JSON, little-endian f32 fields."""
    blob = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params.params)))
        for name, t in params.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a parameter checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        config = ModelConfig.from_dict(json.loads(fh.read(blob_len).decode("utf-8")))
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            raw = fh.read(4 * int(np.prod(shape)))
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            params[name] = Tensor(arr, requires_grad=True, dtype=default_dtype())
        return ModelParams(config, params)
