"""Evaluation protocol: full data vs random subset vs synthetic matrices.

All three sources train the identical architecture with identical SGD
hyperparameters on the identical test set; the only difference is where the
training batches come from.  Reports carry a hash of everything shared so
that symmetry is checkable, and CSV writers emit the three standard files
(comparison.csv, curves.csv, sweep.csv).
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import distill as Dst
from . import model as M
from . import ops
from .tensor import Tensor, default_dtype, tape
from .textdata import BatchIterator, Dataset, EmbeddingTable, embed_batch


class EmptySource(ValueError):
    pass


class ClassTooSmall(ValueError):
    pass


@dataclass
class TrainSpec:
    source: str           # "full" | "random" | "distilled" (free-form label)
    epochs: int
    batch_size: int
    alpha: float
    seed: int

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.alpha <= 0:
            raise ValueError("epochs, batch_size and alpha must be positive")


@dataclass
class EvalReport:
    final_accuracy: float
    per_epoch: list
    wall_time: float
    spec: dict
    config_hash: str

    def __post_init__(self):
        if len(self.per_epoch) != self.spec["epochs"]:
            raise ValueError("per-epoch series must have one entry per epoch")
        if not all(0.0 <= a <= 1.0 for a in self.per_epoch):
            raise ValueError("accuracies must lie in [0, 1]")


@dataclass
class EvalConfig:
    epochs: int = 15
    batch_size: int = 10
    alpha: float = 0.1
    seeds: tuple = (0, 1, 2)
    balanced_random: bool = True

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.epochs < 1 or self.batch_size < 1 or self.alpha <= 0:
            raise ValueError("epochs, batch_size and alpha must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def protocol_hash(model_config: M.ModelConfig, spec: TrainSpec, testset: Dataset) -> str:
    """Hash of everything that must be shared across the three sources."""
    h = hashlib.sha256()
    h.update(json.dumps(model_config.to_dict(), sort_keys=True).encode())
    h.update(json.dumps({"epochs": spec.epochs, "batch_size": spec.batch_size,
                         "alpha": spec.alpha}, sort_keys=True).encode())
    h.update(testset.token_ids.tobytes())
    h.update(testset.labels.tobytes())
    return h.hexdigest()


def _distilled_batches(dset: Dst.DistilledSet, batch_size: int, epoch: int, seed: int):
    order = np.random.default_rng(seed + epoch).permutation(len(dset))
    for start in range(0, len(dset), batch_size):
        idx = order[start:start + batch_size]
        yield Tensor(dset.matrices[idx], dtype=default_dtype()), dset.labels[idx]


def train_model(spec: TrainSpec, model_config: M.ModelConfig, source,
                table: EmbeddingTable, testset: Dataset):
    """Fresh initialization, plain SGD over the source, per-epoch test accuracy.

    ``source`` is a Dataset (batches are embedded on the fly) or a
    DistilledSet (matrices feed the model directly).  Returns
    (ModelParams, EvalReport).
    """
    distilled = isinstance(source, Dst.DistilledSet)
    if len(source) == 0:
        raise EmptySource("training source is empty")
    params = M.init_params(model_config, seed=spec.seed)
    started = time.perf_counter()
    per_epoch = []
    if not distilled:
        iterator = BatchIterator(source, spec.batch_size, seed=spec.seed)
    for epoch in range(spec.epochs):
        if distilled:
            batches = _distilled_batches(source, spec.batch_size, epoch, spec.seed)
        else:
            batches = _real_batches(iterator, table)
        for batch_x, batch_y in batches:
            with tape():
                step_loss = M.loss(params, batch_x, batch_y)
                grads = ops.backward(step_loss, params.tensors())
            params = params.replace([
                Tensor(w.data - spec.alpha * g.data, requires_grad=True, dtype=w.data.dtype)
                for w, g in zip(params.tensors(), grads)
            ])
        per_epoch.append(M.accuracy(params, testset, table))
    report = EvalReport(
        final_accuracy=per_epoch[-1],
        per_epoch=per_epoch,
        wall_time=time.perf_counter() - started,
        spec={**asdict(spec)},
        config_hash=protocol_hash(model_config, spec, testset),
    )
    return params, report


def _real_batches(iterator: BatchIterator, table: EmbeddingTable):
    for _ in range(iterator.batches_per_epoch):
        ids, labels = iterator.next_batch()
        yield embed_batch(ids, table), labels


def random_subset(dataset: Dataset, per_class: int, seed: int,
                  balanced: bool = True) -> Dataset:
    """Uniform without-replacement sample, exactly ``per_class`` per class.

    With ``balanced=False`` the sample is uniform over the whole dataset
    (size per_class * num_classes) with no class constraint.
    """
    rng = np.random.default_rng(seed)
    total = per_class * dataset.num_classes
    if not balanced:
        if len(dataset) < total:
            raise ClassTooSmall(f"dataset smaller than requested {total}")
        return dataset.subset(rng.choice(len(dataset), size=total, replace=False))
    chosen = []
    for cls in range(dataset.num_classes):
        pool = np.flatnonzero(dataset.labels == cls)
        if len(pool) < per_class:
            raise ClassTooSmall(f"class {cls} has {len(pool)} < {per_class} examples")
        chosen.append(rng.choice(pool, size=per_class, replace=False))
    return dataset.subset(np.concatenate(chosen))


def compare_protocol(dataset: Dataset, testset: Dataset, distilled: Dst.DistilledSet,
                     eval_config: EvalConfig, model_config: M.ModelConfig,
                     table: EmbeddingTable):
    """Per-seed accuracy rows for full, random-subset and distilled sources.

    Every row carries the seed, the accuracy, and the accuracy relative to
    the same seed's full-data run (in percent).  The summary aggregates
    mean and sample standard deviation per source.
    """
    rows = []
    for seed in eval_config.seeds:
        per_source = {}
        hashes = set()
        for name, source in (
            ("full", dataset),
            ("random", random_subset(dataset, distilled.per_class, seed,
                                     balanced=eval_config.balanced_random)),
            ("distilled", distilled),
        ):
            spec = TrainSpec(name, eval_config.epochs, eval_config.batch_size,
                             eval_config.alpha, seed)
            _, report = train_model(spec, model_config, source, table, testset)
            per_source[name] = report
            hashes.add(report.config_hash)
        if len(hashes) != 1:
            raise RuntimeError("protocol symmetry violated: differing shared configs")
        full_acc = per_source["full"].final_accuracy
        for name, report in per_source.items():
            rel = 100.0 * report.final_accuracy / full_acc if full_acc > 0 else float("nan")
            rows.append({
                "source": name,
                "seed": seed,
                "accuracy": report.final_accuracy,
                "relative_pct": rel,
                "report": report,
            })
    return rows


def summarize(rows):
    """mean/sd of accuracy and relative_pct per source label."""
    out = {}
    for name in dict.fromkeys(r["source"] for r in rows):
        accs = np.array([r["accuracy"] for r in rows if r["source"] == name])
        rels = np.array([r["relative_pct"] for r in rows if r["source"] == name])
        out[name] = {
            "mean_accuracy": float(accs.mean()),
            "sd_accuracy": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
            "mean_relative_pct": float(rels.mean()),
            "runs": len(accs),
        }
    return out


def epoch_curves(named_sources, eval_config: EvalConfig, model_config: M.ModelConfig,
                 table: EmbeddingTable, testset: Dataset):
    """Accuracy-per-epoch series for each (label, source) pair and seed."""
    rows = []
    for label, source in named_sources:
        for seed in eval_config.seeds:
            spec = TrainSpec(label, eval_config.epochs, eval_config.batch_size,
                             eval_config.alpha, seed)
            _, report = train_model(spec, model_config, source, table, testset)
            for epoch, acc in enumerate(report.per_epoch, start=1):
                rows.append({"source": label, "seed": seed, "epoch": epoch,
                             "accuracy": acc})
    return rows


def epochs_to_fraction_of_final(series, fraction: float = 0.95) -> int:
    """First 1-based epoch whose accuracy reaches fraction * final accuracy."""
    target = fraction * series[-1]
    for epoch, acc in enumerate(series, start=1):
        if acc >= target:
            return epoch
    return len(series)


def size_sweep(dataset: Dataset, testset: Dataset, m_values,
               distill_config: Dst.DistillConfig, eval_config: EvalConfig,
               model_config: M.ModelConfig, table: EmbeddingTable,
               callback=None):
    """Full distillation plus evaluation per synthetic-set size.

    For each m, runs one distillation per seed (config.seed set to the
    evaluation seed) and trains on the result.  Returns rows of
    (m, seed, accuracy).
    """
    m_values = list(m_values)
    if any(m_values[i] >= m_values[i + 1] for i in range(len(m_values) - 1)):
        raise ValueError("m_values must be strictly ascending")
    rows = []
    for m in m_values:
        for seed in eval_config.seeds:
            cfg_dict = distill_config.to_dict()
            cfg_dict.update(per_class=int(m), seed=seed)
            cfg = Dst.DistillConfig(**cfg_dict)
            dset = Dst.run_distillation(dataset, table, model_config, cfg)
            spec = TrainSpec("distilled", eval_config.epochs, eval_config.batch_size,
                             eval_config.alpha, seed)
            _, report = train_model(spec, model_config, dset, table, testset)
            rows.append({"m": int(m), "seed": seed, "accuracy": report.final_accuracy})
            if callback is not None:
                callback(rows[-1])
    return rows


# ---------------------------------------------------------------------------
# synthetic keyword corpus


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    n_train: int = 2000
    n_test: int = 400
    signature_per_class: int = 5
    signature_rate: float = 0.3
    background_vocab: int = 500
    min_len: int = 20
    max_len: int = 40
    seed: int = 0


def synthetic_corpus(spec: SyntheticSpec):
    """Class-balanced keyword corpus: each class owns a few signature tokens
    injected at a fixed rate over a shared background vocabulary.

    Returns (train_texts, train_labels, test_texts, test_labels).
    """

    def make_split(n, salt):
        local = np.random.default_rng(spec.seed * 2654435761 % (2**63) + salt)
        texts, labels = [], []
        for i in range(n):
            cls = i % spec.num_classes
            length = int(local.integers(spec.min_len, spec.max_len + 1))
            words = []
            for _ in range(length):
                if local.random() < spec.signature_rate:
                    k = int(local.integers(0, spec.signature_per_class))
                    words.append(f"sig{cls}x{k}")
                else:
                    words.append(f"w{int(local.integers(0, spec.background_vocab))}")
            texts.append(" ".join(words))
            labels.append(cls)
        return texts, np.asarray(labels, dtype=np.int64)

    train_texts, train_labels = make_split(spec.n_train, salt=1)
    test_texts, test_labels = make_split(spec.n_test, salt=2)
    return train_texts, train_labels, test_texts, test_labels


def write_corpus_csv(path, texts, labels) -> None:
    """Benchmark CSV layout: 1-based label, then one quoted text field."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_ALL)
        for text, label in zip(texts, labels):
            writer.writerow([int(label) + 1, text])


# ---------------------------------------------------------------------------
# CSV outputs


def write_comparison_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "seed", "accuracy", "relative_pct"])
        for r in rows:
            writer.writerow([r["source"], r["seed"],
                             repr(float(r["accuracy"])), repr(float(r["relative_pct"]))])


def write_curves_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "seed", "epoch", "accuracy"])
        for r in rows:
            writer.writerow([r["source"], r["seed"], r["epoch"],
                             repr(float(r["accuracy"]))])


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["m", "seed", "accuracy"])
        for r in rows:
            writer.writerow([r["m"], r["seed"], repr(float(r["accuracy"]))])
