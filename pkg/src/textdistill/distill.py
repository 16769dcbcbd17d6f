"""Bilevel synthesis of training data.

Outer iteration: train a fresh classifier on the current synthetic matrices
by a short recorded run of SGD (the inner loop), measure its loss on a
minibatch of real data, backpropagate that loss through the entire recorded
training trajectory down to the synthetic matrices, and descend.

Because every inner SGD update is recorded on the tape with
``create_graph=True``, the outer backward is plain reverse mode over the
unrolled graph; the second-order terms show up as Hessian-vector products
computed by double backward, never as explicit Hessians.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import model as M
from . import ops
from .tensor import DetachedTensor, NonFiniteResult, Tensor, default_dtype, tape
from .textdata import BatchIterator, Dataset, EmbeddingTable, embed_batch

ARTIFACT_MAGIC = b"DDTC"
ARTIFACT_VERSION = 1

# Reject unrolled runs whose tape would retain roughly more than this many
# parameter values across inner steps (T1 * |theta|).
UNROLL_BUDGET = 50_000_000


class RealSampleModeNeedsDataset(ValueError):
    pass


class NonFiniteGradient(ArithmeticError):
    """The meta-gradient diverged; the step was aborted with state unchanged."""


class DetachedGraph(RuntimeError):
    """Gradients to the synthetic data were requested but the inner run was not recorded."""


class TooLargeForOracle(ValueError):
    pass


class CorruptArtifact(ValueError):
    pass


@dataclass
class DistillConfig:
    """Every knob of the synthesis loop.

    ``alpha_inner`` is the inner SGD step size, ``alpha_outer`` the step
    size applied to the synthetic matrices.  ``inner_epochs`` passes over
    the M samples with ``inner_batch``-sized minibatches give T1 =
    inner_epochs * ceil(M / inner_batch) recorded updates per outer step;
    ``outer_steps`` is the number of outer updates (one real minibatch each).
    """

    per_class: int
    seq_len: int
    embedding_dim: int
    alpha_inner: float = 0.1
    alpha_outer: float = 0.05
    inner_epochs: int = 1
    inner_batch: int = 10
    outer_steps: int = 200
    real_batch: int = 64
    init_mode: str = "gaussian"   # or "real"
    theta_init: str = "resample"  # or "fixed"
    outer_optimizer: str = "sgd"  # or "adam"; plain SGD is the reference update
    seed: int = 0

    def __post_init__(self):
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")
        if self.alpha_inner < 0 or self.alpha_outer < 0:
            raise ValueError("step sizes must be >= 0")
        if self.inner_batch < 1 or self.real_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.outer_steps < 0:
            raise ValueError("outer_steps must be >= 0")
        if self.init_mode not in ("gaussian", "real"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if self.theta_init not in ("resample", "fixed"):
            raise ValueError(f"unknown theta_init {self.theta_init!r}")
        if self.outer_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown outer_optimizer {self.outer_optimizer!r}")

    def inner_steps(self, num_samples: int) -> int:
        return self.inner_epochs * (-(-num_samples // self.inner_batch))

    def validate_unroll(self, num_samples: int, param_count: int) -> None:
        load = self.inner_steps(num_samples) * param_count
        if load > UNROLL_BUDGET:
            raise ValueError(
                f"unrolled run would retain ~{load} parameter values "
                f"(budget {UNROLL_BUDGET}); shrink inner steps or the model")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DistilledSet:
    """M synthetic samples: (M, L, d) matrices with fixed class labels.

    Labels are assigned in class-major blocks ([0]*m + [1]*m + ...) at
    initialization and never change afterwards.
    """

    matrices: np.ndarray
    labels: np.ndarray
    per_class: int
    num_classes: int
    provenance: dict

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.matrices.ndim != 3:
            raise ValueError("matrices must be (M, L, d)")
        if len(self.matrices) != len(self.labels):
            raise ValueError("matrices and labels disagree on M")
        if len(self.labels) != self.per_class * self.num_classes:
            raise ValueError("M must equal per_class * num_classes")
        counts = np.bincount(self.labels, minlength=self.num_classes)
        if not (counts == self.per_class).all():
            raise ValueError("labels must be exactly balanced per class")
        if not np.all(np.isfinite(self.matrices)):
            raise ValueError("matrices must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def seq_len(self) -> int:
        return self.matrices.shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.matrices.shape[2]

    def sample(self, i: int) -> np.ndarray:
        return self.matrices[i]

    def replace_matrices(self, matrices: np.ndarray, step: int) -> "DistilledSet":
        prov = dict(self.provenance)
        prov["steps"] = step
        return DistilledSet(matrices, self.labels.copy(), self.per_class,
                            self.num_classes, prov)


def init_distilled(config: DistillConfig, num_classes: int, emb_stats,
                   seed: int | None = None, dataset: Dataset | None = None,
                   table: EmbeddingTable | None = None) -> DistilledSet:
    """Fresh synthetic matrices.

    ``gaussian`` mode draws every entry i.i.d. Normal(mean, std^2) from the
    embedding-table statistics, so the matrices start at the scale of real
    embedded text.  ``real`` mode copies embedded real examples of the
    matching class.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    m, c = config.per_class, num_classes
    shape = (m * c, config.seq_len, config.embedding_dim)
    labels = np.repeat(np.arange(c), m)
    mean, std = emb_stats
    if config.init_mode == "gaussian":
        matrices = rng.normal(mean, std, size=shape)
    else:
        if dataset is None or table is None:
            raise RealSampleModeNeedsDataset(
                "init_mode='real' needs the dataset and embedding table")
        if dataset.max_len != config.seq_len or table.dim != config.embedding_dim:
            raise ValueError("dataset/table geometry does not match the config")
        matrices = np.empty(shape)
        for cls in range(c):
            pool = np.flatnonzero(dataset.labels == cls)
            if len(pool) < m:
                raise ValueError(f"class {cls} has fewer than {m} examples")
            chosen = rng.choice(pool, size=m, replace=False)
            emb = embed_batch(dataset.token_ids[chosen], table)
            matrices[cls * m:(cls + 1) * m] = emb.data
    matrices = matrices.astype(default_dtype())
    prov = {"config": config.to_dict(), "num_classes": c, "steps": 0}
    return DistilledSet(matrices, labels, m, c, prov)


def inner_batch_order(num_samples: int, batch_size: int, epochs: int, seed: int):
    """The sequence of minibatch index arrays for one inner run.

    Shared by the recorded run and the finite-difference oracle so both see
    the identical sample order.
    """
    rng = np.random.default_rng(seed)
    order = []
    for _ in range(epochs):
        perm = rng.permutation(num_samples)
        for start in range(0, num_samples, batch_size):
            order.append(perm[start:start + batch_size])
    return order


def _sgd_steps(theta: M.ModelParams, x: Tensor, labels: np.ndarray, alpha: float,
               batches, record: bool) -> M.ModelParams:
    params = theta
    for idx in batches:
        xb = ops.gather_rows(x, idx)
        step_loss = M.loss(params, xb, labels[idx])
        grads = ops.backward(step_loss, params.tensors(), create_graph=record)
        params = params.replace([
            ops.sub(w, ops.smul(g, alpha)) for w, g in zip(params.tensors(), grads)
        ])
    return params


def inner_train(theta0: M.ModelParams, dtilde, alpha: float, epochs: int,
                batch_size: int, record: bool = False, batch_seed: int = 0,
                labels: np.ndarray | None = None) -> M.ModelParams:
    """Train ``theta0`` on the synthetic samples by sequential SGD.

    ``dtilde`` is a DistilledSet, or a (M, L, d) Tensor with ``labels``
    given.  With ``record=True`` the call must run inside an open tape; every
    update lands on it and the returned parameters are differentiable
    functions of the synthetic matrices.  With ``record=False`` each step
    uses a throwaway tape and the updates are computed on raw arrays; both
    paths evaluate the identical floating-point expressions.
    """
    if isinstance(dtilde, DistilledSet):
        x = Tensor(dtilde.matrices, requires_grad=record)
        labels = dtilde.labels
    else:
        x = dtilde
        if labels is None:
            raise ValueError("labels are required when dtilde is a Tensor")
    if x.shape[1] > 0 and theta0.config.embedding_dim != x.shape[2]:
        raise ValueError(f"sample dim {x.shape[2]} vs model dim {theta0.config.embedding_dim}")
    batches = inner_batch_order(x.shape[0], batch_size, epochs, batch_seed)
    if record:
        return _sgd_steps(theta0, x, labels, alpha, batches, record=True)
    params = theta0
    for idx in batches:
        with tape():
            xb = ops.gather_rows(x, idx)
            step_loss = M.loss(params, xb, labels[idx])
            grads = ops.backward(step_loss, params.tensors())
        params = params.replace([
            Tensor(w.data - g.data * alpha, requires_grad=True, dtype=w.data.dtype)
            for w, g in zip(params.tensors(), grads)
        ])
    return params


def outer_loss(theta_trained: M.ModelParams, real_batch: Tensor, real_labels) -> Tensor:
    """Classification loss of the inner-trained model on real data."""
    return M.loss(theta_trained, real_batch, real_labels)


def grad_wrt_distilled(loss_value: Tensor, x: Tensor) -> Tensor:
    """Backward from an outer loss to the synthetic matrices."""
    try:
        (g,) = ops.backward(loss_value, [x])
    except DetachedTensor as exc:
        raise DetachedGraph(
            "outer gradient requested but the inner run was not recorded") from exc
    return g


def meta_gradient(dset: DistilledSet, theta0: M.ModelParams, real_batch: Tensor,
                  real_labels, config: DistillConfig, batch_seed: int = 0):
    """Autodiff gradient of the outer loss wrt every synthetic entry.

    Returns (gradient array (M, L, d), outer loss value).
    """
    config.validate_unroll(len(dset), theta0.num_values())
    with tape():
        x = Tensor(dset.matrices, requires_grad=True)
        trained = inner_train(theta0, x, config.alpha_inner, config.inner_epochs,
                              config.inner_batch, record=True, batch_seed=batch_seed,
                              labels=dset.labels)
        value = outer_loss(trained, real_batch, real_labels)
        grad = grad_wrt_distilled(value, x)
    return grad.data, value.item()


def _checked_meta_gradient(dset, theta0, real_x, real_labels, config, step):
    try:
        grad, value = meta_gradient(dset, theta0, real_x, real_labels, config,
                                    batch_seed=_inner_seed(config.seed, step))
    except NonFiniteResult as exc:
        # overflow anywhere in the unrolled run is a divergence signal
        raise NonFiniteGradient(f"overflow during outer step {step}: {exc}") from exc
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"non-finite meta-gradient at outer step {step}")
    return grad, value


def distill_step(dset: DistilledSet, theta_init_source, real_batch, config: DistillConfig,
                 step: int = 0, alpha_outer: float | None = None):
    """One plain outer update; returns (updated set, metrics).

    ``theta_init_source`` is a ModelParams or a zero-argument callable
    producing one.  ``real_batch`` is (embedded Tensor, labels).  Raises
    NonFiniteGradient with the set untouched when the meta-gradient
    diverges.
    """
    theta0 = theta_init_source() if callable(theta_init_source) else theta_init_source
    real_x, real_labels = real_batch
    alpha = config.alpha_outer if alpha_outer is None else alpha_outer
    grad, value = _checked_meta_gradient(dset, theta0, real_x, real_labels, config, step)
    updated = dset.matrices - alpha * grad
    metrics = {
        "step": step,
        "outer_loss": value,
        "grad_norm": float(np.linalg.norm(grad.reshape(-1))),
        "alpha_outer": alpha,
    }
    return dset.replace_matrices(updated, step + 1), metrics


class _AdamState:
    """Per-entry adaptive step sizes for the outer loop.

    The meta-gradient's scale swings by orders of magnitude across
    resampled initializations; the adaptive mode normalizes it away.  Off by
    default: plain SGD is the reference update rule.
    """

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def update(self, grad: np.ndarray, alpha: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return alpha * m_hat / (np.sqrt(v_hat) + self.eps)


def _inner_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step * 7919 + 17) % (2**63)


def _theta_seed(seed: int, step: int) -> int:
    return (seed * 999_979 + step * 104_729 + 5) % (2**63)


def run_distillation(dataset: Dataset, table: EmbeddingTable, model_config: M.ModelConfig,
                     config: DistillConfig, callback=None) -> DistilledSet:
    """The full outer loop over real-data minibatches.

    ``theta_init='resample'`` draws a fresh classifier initialization every
    outer step, so the result is not tied to one starting point;
    ``'fixed'`` reuses the step-0 initialization (useful for oracle checks).
    On a divergent step the outer step size is halved and the step retried,
    at most three times, before the failure propagates.
    """
    if len(dataset) == 0:
        raise ValueError("cannot distill from an empty dataset")
    dset = init_distilled(config, dataset.num_classes,
                          (table.mean, table.std), seed=config.seed,
                          dataset=dataset if config.init_mode == "real" else None,
                          table=table if config.init_mode == "real" else None)
    fixed_theta = M.init_params(model_config, seed=_theta_seed(config.seed, 0))
    batches = BatchIterator(dataset, config.real_batch, seed=config.seed + 1)
    alpha_outer = config.alpha_outer
    adam = _AdamState(dset.matrices.shape) if config.outer_optimizer == "adam" else None
    for step in range(config.outer_steps):
        ids, labels = batches.next_batch()
        real_x = embed_batch(ids, table)
        if config.theta_init == "resample":
            theta0 = M.init_params(model_config, seed=_theta_seed(config.seed, step))
        else:
            theta0 = fixed_theta.copy()

        if adam is None:
            def attempt(alpha):
                return distill_step(dset, theta0, (real_x, labels), config,
                                    step=step, alpha_outer=alpha)
        else:
            def attempt(alpha):
                grad, value = _checked_meta_gradient(dset, theta0, real_x, labels,
                                                     config, step)
                updated = (dset.matrices - adam.update(grad, alpha)).astype(
                    dset.matrices.dtype)
                metrics = {"step": step, "outer_loss": value,
                           "grad_norm": float(np.linalg.norm(grad.reshape(-1))),
                           "alpha_outer": alpha}
                return dset.replace_matrices(updated, step + 1), metrics

        dset, metrics, alpha_outer = _retry_halving(attempt, alpha_outer)
        if callback is not None:
            callback(metrics)
    return dset


def _retry_halving(attempt, alpha_outer, max_halvings: int = 3):
    """Run one outer attempt, halving the step size on divergence."""
    halvings = 0
    while True:
        try:
            dset, metrics = attempt(alpha_outer)
            return dset, metrics, alpha_outer
        except NonFiniteGradient:
            if halvings >= max_halvings:
                raise
            halvings += 1
            alpha_outer /= 2.0


def meta_grad_fd_oracle(dset: DistilledSet, theta0: M.ModelParams, real_batch,
                        config: DistillConfig, h: float = 1e-4,
                        batch_seed: int = 0) -> np.ndarray:
    """Central finite differences of the outer loss wrt every synthetic entry.

    Independent of the recorded-graph path: each perturbation re-runs the
    whole non-recorded inner loop with the identical batch order.  Guarded
    to small instances; this is a verification tool, not a training path.
    """
    if dset.matrices.size > 2000:
        raise TooLargeForOracle(
            f"{dset.matrices.size} entries exceed the 2000-entry oracle guard")
    real_x, real_labels = real_batch

    def value_at(matrices: np.ndarray) -> float:
        x = Tensor(matrices)
        trained = inner_train(theta0, x, config.alpha_inner, config.inner_epochs,
                              config.inner_batch, record=False, batch_seed=batch_seed,
                              labels=dset.labels)
        return M.loss(trained, real_x, real_labels).item()

    base = np.array(dset.matrices, dtype=np.float64)
    grad = np.zeros_like(base)
    flat, gflat = base.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        step_i = h * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + step_i
        fp = value_at(base.astype(default_dtype()))
        flat[i] = orig - step_i
        fm = value_at(base.astype(default_dtype()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step_i)
    return grad


# ---------------------------------------------------------------------------
# artifact serialization


def save_distilled(path, dset: DistilledSet, embedding_hash: str) -> None:
    """Write the DDTC container (see load_distilled for the layout)."""
    with open(path, "wb") as fh:
        fh.write(_artifact_bytes(dset, embedding_hash))


def _artifact_bytes(dset: DistilledSet, embedding_hash: str) -> bytes:
    """DDTC layout: magic, u32 version, header block, matrices, labels.

    Header: u32 num_classes, u32 per_class, u32 M, u32 L, u32 d, u64 step
    count, 64-byte hex embedding hash, u32 config-JSON length, config JSON
    (UTF-8, sorted keys).  Matrices follow as M row-major little-endian f32
    (L, d) blocks, then M labels as little-endian u16.
    """
    buf = io.BytesIO()
    buf.write(ARTIFACT_MAGIC)
    buf.write(struct.pack("<I", ARTIFACT_VERSION))
    m_total, seq_len, dim = dset.matrices.shape
    steps = int(dset.provenance.get("steps", 0))
    buf.write(struct.pack("<5IQ", dset.num_classes, dset.per_class, m_total,
                          seq_len, dim, steps))
    hash_bytes = embedding_hash.encode("ascii")
    if len(hash_bytes) != 64:
        raise ValueError("embedding hash must be 64 hex characters")
    buf.write(hash_bytes)
    blob = json.dumps(dset.provenance, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(np.ascontiguousarray(dset.matrices, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(dset.labels, dtype="<u2").tobytes())
    return buf.getvalue()


def load_distilled(path):
    """Read a DDTC container; returns (DistilledSet, embedding_hash)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return _parse_artifact(raw)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, CorruptArtifact):
            raise
        raise CorruptArtifact(str(exc)) from exc


def _parse_artifact(raw: bytes):
    view = io.BytesIO(raw)
    if view.read(4) != ARTIFACT_MAGIC:
        raise CorruptArtifact("bad magic")
    (version,) = struct.unpack("<I", view.read(4))
    if version != ARTIFACT_VERSION:
        raise CorruptArtifact(f"unsupported version {version}")
    num_classes, per_class, m_total, seq_len, dim, steps = struct.unpack("<5IQ", view.read(28))
    embedding_hash = view.read(64).decode("ascii")
    (blob_len,) = struct.unpack("<I", view.read(4))
    provenance = json.loads(view.read(blob_len).decode("utf-8"))
    body = view.read(4 * m_total * seq_len * dim)
    if len(body) != 4 * m_total * seq_len * dim:
        raise CorruptArtifact("truncated matrices")
    matrices = np.frombuffer(body, dtype="<f4").reshape(m_total, seq_len, dim).copy()
    tail = view.read(2 * m_total)
    if len(tail) != 2 * m_total:
        raise CorruptArtifact("truncated labels")
    labels = np.frombuffer(tail, dtype="<u2").astype(np.int64)
    if view.read(1):
        raise CorruptArtifact("trailing bytes")
    provenance = dict(provenance)
    provenance.setdefault("steps", steps)
    dset = DistilledSet(matrices, labels, per_class, num_classes, provenance)
    return dset, embedding_hash


def to_json_dict(dset: DistilledSet, embedding_hash: str) -> dict:
    """A lossless JSON mirror of the artifact content.

    Matrices are emitted at f32 precision (exactly representable in JSON
    numbers), so export/import round-trips bitwise.
    """
    return {
        "format": "ddtc-json",
        "version": ARTIFACT_VERSION,
        "num_classes": dset.num_classes,
        "per_class": dset.per_class,
        "seq_len": dset.seq_len,
        "embedding_dim": dset.embedding_dim,
        "steps": int(dset.provenance.get("steps", 0)),
        "embedding_hash": embedding_hash,
        "provenance": dset.provenance,
        "labels": dset.labels.tolist(),
        "matrices": [np.asarray(m, dtype=np.float32).astype(float).tolist()
                     for m in dset.matrices],
    }


def from_json_dict(payload: dict):
    """Inverse of to_json_dict; returns (DistilledSet, embedding_hash)."""
    if payload.get("format") != "ddtc-json" or payload.get("version") != ARTIFACT_VERSION:
        raise CorruptArtifact("not a ddtc-json payload")
    matrices = np.asarray(payload["matrices"], dtype=np.float32)
    labels = np.asarray(payload["labels"], dtype=np.int64)
    dset = DistilledSet(matrices, labels, payload["per_class"],
                        payload["num_classes"], dict(payload["provenance"]))
    return dset, payload["embedding_hash"]


def artifact_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
