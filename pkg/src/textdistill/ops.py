"""Differentiable primitives and reverse-mode backward.

Every primitive supplies three pieces: a numpy forward, a replayable
forward closure, and a VJP written in terms of the primitives themselves.
The last point is what makes higher-order differentiation work: with
``create_graph=True`` the VJP ops are recorded like any forward op, so a
later backward pass can differentiate through them.

No general broadcasting.  Elementwise ops require identical shapes; the
only shape-changing patterns are the explicit pairs below, each the linear
adjoint of its partner (sum_all/spread, row_sum/tile_cols, gather/scatter,
sliding_windows/overlap_add, and so on), which keeps every VJP closed over
the primitive set.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    EmptyTime,
    FilterTooLong,
    LabelOutOfRange,
    NonFiniteResult,
    NotScalar,
    DetachedTensor,
    RECORDING,
    ShapeMismatch,
    Tensor,
    active_graph,
    paused,
    tracked_id,
    _ensure_tracked,
)


def _run(op, inputs, out_data, vjp, fwd, ctx=None, check=True):
    """Finish a primitive: finiteness check, wrap, and record if tracked.

    ``check=False`` is reserved for pure data-movement ops (transposes,
    gathers, reshapes) whose outputs are drawn from already-checked values.
    """
    # One-pass screen: a float64 sum is non-finite iff some entry is, short
    # of a float64 overflow, which the precise check below rules out.
    if check and not np.isfinite(out_data.sum(dtype=np.float64)):
        if not np.all(np.isfinite(out_data)):
            raise NonFiniteResult(f"{op} produced non-finite values")
    out = Tensor._wrap(out_data)
    graph = active_graph()
    if graph is None:
        return out
    input_ids = tuple(_ensure_tracked(t, graph) for t in inputs)
    if all(nid is None for nid in input_ids):
        return out
    out.node = graph._append(op, tuple(inputs), input_ids, out, vjp, fwd, ctx or {})
    return out


def _require_tensor(x, op):
    if not isinstance(x, Tensor):
        raise TypeError(f"{op} expects Tensor operands, got {type(x).__name__}")
    return x


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_tensor(a, "add"), _require_tensor(b, "add")
    _same_shape(a, b, "add")
    return _run("add", (a, b), a.data + b.data,
                lambda node, g: (g, g),
                lambda args, ctx: args[0] + args[1])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_tensor(a, "sub"), _require_tensor(b, "sub")
    _same_shape(a, b, "sub")
    return _run("sub", (a, b), a.data - b.data,
                lambda node, g: (g, neg(g)),
                lambda args, ctx: args[0] - args[1])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_tensor(a, "mul"), _require_tensor(b, "mul")
    _same_shape(a, b, "mul")

    def vjp(node, g):
        x, y = node.inputs
        return (mul(g, y), mul(g, x))

    return _run("mul", (a, b), a.data * b.data, vjp,
                lambda args, ctx: args[0] * args[1])


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_tensor(a, "div"), _require_tensor(b, "div")
    _same_shape(a, b, "div")
    with np.errstate(all="ignore"):
        out = a.data / b.data

    def vjp(node, g):
        x, y = node.inputs
        return (div(g, y), neg(div(mul(g, x), mul(y, y))))

    return _run("div", (a, b), out, vjp, lambda args, ctx: args[0] / args[1])


def neg(a: Tensor) -> Tensor:
    _require_tensor(a, "neg")
    return _run("neg", (a,), -a.data,
                lambda node, g: (neg(g),),
                lambda args, ctx: -args[0], check=False)


def smul(a: Tensor, c: float) -> Tensor:
    """Multiply by a python-scalar constant (the constant takes no gradient)."""
    _require_tensor(a, "smul")
    c = float(c)
    return _run("smul", (a,), a.data * c,
                lambda node, g: (smul(g, node.ctx["c"]),),
                lambda args, ctx: args[0] * ctx["c"],
                ctx={"c": c})


def exp(a: Tensor) -> Tensor:
    _require_tensor(a, "exp")
    with np.errstate(all="ignore"):
        out = np.exp(a.data)

    def vjp(node, g):
        return (mul(g, node.output),)

    return _run("exp", (a,), out, vjp, lambda args, ctx: np.exp(args[0]))


def log(a: Tensor) -> Tensor:
    _require_tensor(a, "log")
    with np.errstate(all="ignore"):
        out = np.log(a.data)

    def vjp(node, g):
        return (div(g, node.inputs[0]),)

    return _run("log", (a,), out, vjp, lambda args, ctx: np.log(args[0]))


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    _require_tensor(a, "relu")
    mask = Tensor._wrap((a.data > 0).astype(a.data.dtype))

    def vjp(node, g):
        return (mul(g, node.ctx["mask"]),)

    return _run("relu", (a,), np.maximum(a.data, 0), vjp,
                lambda args, ctx: np.maximum(args[0], 0),
                ctx={"mask": mask}, check=False)


# ---------------------------------------------------------------------------
# shape


def reshape(a: Tensor, shape) -> Tensor:
    _require_tensor(a, "reshape")
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}")
    old = a.data.shape

    def vjp(node, g):
        return (reshape(g, node.ctx["old"]),)

    return _run("reshape", (a,), a.data.reshape(shape), vjp,
                lambda args, ctx: args[0].reshape(ctx["new"]),
                ctx={"old": old, "new": shape}, check=False)


def transpose(a: Tensor) -> Tensor:
    _require_tensor(a, "transpose")
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose: expected 2-d, got shape {a.shape}")
    return _run("transpose", (a,), a.data.T,
                lambda node, g: (transpose(g),),
                lambda args, ctx: args[0].T, check=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_tensor(a, "matmul"), _require_tensor(b, "matmul")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dimensions {a.shape} x {b.shape} disagree")

    def vjp(node, g):
        x, y = node.inputs
        return (matmul(g, transpose(y)), matmul(transpose(x), g))

    with np.errstate(all="ignore"):
        out = a.data @ b.data
    return _run("matmul", (a, b), out, vjp,
                lambda args, ctx: args[0] @ args[1])


# ---------------------------------------------------------------------------
# reductions and their adjoints


def sum_all(a: Tensor) -> Tensor:
    _require_tensor(a, "sum_all")
    shape = a.data.shape

    def vjp(node, g):
        return (spread(g, node.ctx["shape"]),)

    return _run("sum_all", (a,), a.data.sum(dtype=a.data.dtype).reshape(()), vjp,
                lambda args, ctx: args[0].sum(dtype=args[0].dtype).reshape(()),
                ctx={"shape": shape})


def spread(s: Tensor, shape) -> Tensor:
    """Broadcast a scalar to ``shape`` (the adjoint of sum_all)."""
    _require_tensor(s, "spread")
    if s.ndim != 0:
        raise ShapeMismatch(f"spread: expected scalar, got shape {s.shape}")
    shape = tuple(int(d) for d in shape)

    def vjp(node, g):
        return (sum_all(g),)

    return _run("spread", (s,), np.broadcast_to(s.data, shape).copy(), vjp,
                lambda args, ctx: np.broadcast_to(args[0], ctx["shape"]).copy(),
                ctx={"shape": shape}, check=False)


def row_sum(m: Tensor) -> Tensor:
    """Sum each row of a matrix: (n, c) -> (n,)."""
    _require_tensor(m, "row_sum")
    if m.ndim != 2:
        raise ShapeMismatch(f"row_sum: expected 2-d, got shape {m.shape}")
    cols = m.shape[1]

    def vjp(node, g):
        return (tile_cols(g, node.ctx["cols"]),)

    return _run("row_sum", (m,), m.data.sum(axis=1), vjp,
                lambda args, ctx: args[0].sum(axis=1),
                ctx={"cols": cols})


def tile_cols(v: Tensor, cols: int) -> Tensor:
    """Repeat a vector as columns: (n,) -> (n, cols) (the adjoint of row_sum)."""
    _require_tensor(v, "tile_cols")
    if v.ndim != 1:
        raise ShapeMismatch(f"tile_cols: expected 1-d, got shape {v.shape}")
    cols = int(cols)

    def vjp(node, g):
        return (row_sum(g),)

    return _run("tile_cols", (v,), np.repeat(v.data[:, None], cols, axis=1), vjp,
                lambda args, ctx: np.repeat(args[0][:, None], ctx["cols"], axis=1),
                ctx={"cols": cols}, check=False)


def col_sum(m: Tensor) -> Tensor:
    """Sum each column: (n, c) -> (c,)."""
    return row_sum(transpose(m))


def tile_rows(v: Tensor, rows: int) -> Tensor:
    """Repeat a vector as rows: (c,) -> (rows, c)."""
    return transpose(tile_cols(v, rows))


def add_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """Add a (c,) vector to every row of an (n, c) matrix (the bias pattern)."""
    _require_tensor(m, "add_rowvec"), _require_tensor(v, "add_rowvec")
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeMismatch(f"add_rowvec: {m.shape} + {v.shape}")

    def vjp(node, g):
        return (g, col_sum(g))

    return _run("add_rowvec", (m, v), m.data + v.data, vjp,
                lambda args, ctx: args[0] + args[1])


def sub_colvec(m: Tensor, v: Tensor) -> Tensor:
    """Subtract a (n,) vector from every column of an (n, c) matrix."""
    _require_tensor(m, "sub_colvec"), _require_tensor(v, "sub_colvec")
    if m.ndim != 2 or v.ndim != 1 or m.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"sub_colvec: {m.shape} - {v.shape}")

    def vjp(node, g):
        return (g, neg(row_sum(g)))

    return _run("sub_colvec", (m, v), m.data - v.data[:, None], vjp,
                lambda args, ctx: args[0] - args[1][:, None])


# ---------------------------------------------------------------------------
# indexing (integer indices are constants saved on the node)


def pick_labels(m: Tensor, labels: np.ndarray) -> Tensor:
    """Select one entry per row: out[i] = m[i, labels[i]]."""
    _require_tensor(m, "pick_labels")
    if m.ndim != 2:
        raise ShapeMismatch(f"pick_labels: expected 2-d, got shape {m.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    rows, cols = m.shape
    if labels.shape != (rows,):
        raise ShapeMismatch(f"pick_labels: {labels.shape} labels for {rows} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= cols):
        raise LabelOutOfRange(f"labels must lie in [0, {cols})")

    def vjp(node, g):
        return (label_scatter(g, node.ctx["labels"], node.ctx["cols"]),)

    return _run("pick_labels", (m,), m.data[np.arange(rows), labels], vjp,
                lambda args, ctx: args[0][np.arange(args[0].shape[0]), ctx["labels"]],
                ctx={"labels": labels, "cols": cols}, check=False)


def label_scatter(v: Tensor, labels: np.ndarray, cols: int) -> Tensor:
    """Place v[i] at column labels[i] of an otherwise zero (n, cols) matrix."""
    _require_tensor(v, "label_scatter")
    if v.ndim != 1:
        raise ShapeMismatch(f"label_scatter: expected 1-d, got shape {v.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    cols = int(cols)

    def fwd(args, ctx):
        x = args[0]
        out = np.zeros((x.shape[0], ctx["cols"]), dtype=x.dtype)
        out[np.arange(x.shape[0]), ctx["labels"]] = x
        return out

    def vjp(node, g):
        return (pick_labels(g, node.ctx["labels"]),)

    return _run("label_scatter", (v,), fwd([v.data], {"labels": labels, "cols": cols}),
                vjp, fwd, ctx={"labels": labels, "cols": cols}, check=False)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along the leading axis: out[k] = x[idx[k]]."""
    _require_tensor(x, "gather_rows")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch("gather_rows: index must be 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")
    rows = x.shape[0]

    def vjp(node, g):
        return (scatter_rows(g, node.ctx["idx"], node.ctx["rows"]),)

    return _run("gather_rows", (x,), x.data[idx], vjp,
                lambda args, ctx: args[0][ctx["idx"]],
                ctx={"idx": idx, "rows": rows}, check=False)


def scatter_rows(g: Tensor, idx: np.ndarray, rows: int) -> Tensor:
    """Sum rows of g into a zero tensor at positions idx (adjoint of gather_rows)."""
    _require_tensor(g, "scatter_rows")
    idx = np.asarray(idx, dtype=np.int64)
    rows = int(rows)

    def fwd(args, ctx):
        x = args[0]
        out = np.zeros((ctx["rows"],) + x.shape[1:], dtype=x.dtype)
        np.add.at(out, ctx["idx"], x)
        return out

    def vjp(node, g2):
        return (gather_rows(g2, node.ctx["idx"]),)

    return _run("scatter_rows", (g,), fwd([g.data], {"idx": idx, "rows": rows}),
                vjp, fwd, ctx={"idx": idx, "rows": rows})


# ---------------------------------------------------------------------------
# sequence windows and pooling


def _window_shapes(x: Tensor, width: int, op: str):
    if x.ndim not in (2, 3):
        raise ShapeMismatch(f"{op}: expected (L, d) or (B, L, d), got shape {x.shape}")
    length, dim = x.shape[-2], x.shape[-1]
    if width > length:
        raise FilterTooLong(f"{op}: filter width {width} exceeds sequence length {length}")
    return length, dim


def sliding_windows(x: Tensor, width: int) -> Tensor:
    """All contiguous windows of ``width`` rows, flattened per window.

    (L, d) -> (L-width+1, width*d); a leading batch axis is carried through.
    """
    _require_tensor(x, "sliding_windows")
    width = int(width)
    if width < 1:
        raise ShapeMismatch("sliding_windows: width must be >= 1")
    length, dim = _window_shapes(x, width, "sliding_windows")

    def fwd(args, ctx):
        a = args[0]
        view = np.lib.stride_tricks.sliding_window_view(a, ctx["width"], axis=-2)
        # view axes: (..., T, d, width) -> (..., T, width, d) -> flatten window
        view = view.swapaxes(-1, -2)
        return np.ascontiguousarray(view).reshape(a.shape[:-2] + (ctx["T"], ctx["width"] * a.shape[-1]))

    ctx = {"width": width, "T": length - width + 1, "L": length, "d": dim}

    def vjp(node, g):
        c = node.ctx
        return (overlap_add(g, c["width"], c["L"], c["d"]),)

    return _run("sliding_windows", (x,), fwd([x.data], ctx), vjp, fwd, ctx=ctx, check=False)


def overlap_add(w: Tensor, width: int, length: int, dim: int) -> Tensor:
    """Scatter flattened windows back onto the sequence, summing overlaps.

    The adjoint of :func:`sliding_windows` with the same geometry.
    """
    _require_tensor(w, "overlap_add")
    width, length, dim = int(width), int(length), int(dim)
    t_steps = length - width + 1
    if w.shape[-2] != t_steps or w.shape[-1] != width * dim:
        raise ShapeMismatch(
            f"overlap_add: got shape {w.shape}, expected (..., {t_steps}, {width * dim})")

    def fwd(args, ctx):
        a = args[0]
        out = np.zeros(a.shape[:-2] + (ctx["L"], ctx["d"]), dtype=a.dtype)
        for j in range(ctx["width"]):
            out[..., j:j + ctx["T"], :] += a[..., :, j * ctx["d"]:(j + 1) * ctx["d"]]
        return out

    ctx = {"width": width, "T": t_steps, "L": length, "d": dim}

    def vjp(node, g):
        return (sliding_windows(g, node.ctx["width"]),)

    return _run("overlap_add", (w,), fwd([w.data], ctx), vjp, fwd, ctx=ctx)


def max_over_time(x: Tensor) -> Tensor:
    """Per-channel max over the time axis: (T, c) -> (c,) or (B, T, c) -> (B, c).

    The backward routes the whole gradient to the first index attaining the
    max, which keeps gradients deterministic under ties.
    """
    _require_tensor(x, "max_over_time")
    if x.ndim not in (2, 3):
        raise ShapeMismatch(f"max_over_time: expected (T, c) or (B, T, c), got {x.shape}")
    t_steps = x.shape[-2]
    if t_steps < 1:
        raise EmptyTime("max_over_time: empty time axis")
    idx = np.argmax(x.data, axis=-2)  # first occurrence wins

    def fwd(args, ctx):
        return np.take_along_axis(args[0], np.expand_dims(ctx["idx"], -2), axis=-2).squeeze(-2)

    ctx = {"idx": idx, "T": t_steps}

    def vjp(node, g):
        return (pool_scatter(g, node.ctx["idx"], node.ctx["T"]),)

    return _run("max_over_time", (x,), fwd([x.data], ctx), vjp, fwd, ctx=ctx, check=False)


def pool_scatter(v: Tensor, idx: np.ndarray, t_steps: int) -> Tensor:
    """Place v[..., j] at time idx[..., j] of a zero (..., T, c) tensor."""
    _require_tensor(v, "pool_scatter")
    idx = np.asarray(idx, dtype=np.int64)
    if v.shape != idx.shape:
        raise ShapeMismatch(f"pool_scatter: values {v.shape} vs indices {idx.shape}")
    t_steps = int(t_steps)

    def fwd(args, ctx):
        a = args[0]
        out = np.zeros(a.shape[:-1] + (ctx["T"], a.shape[-1]), dtype=a.dtype)
        np.put_along_axis(out, np.expand_dims(ctx["idx"], -2), np.expand_dims(a, -2), axis=-2)
        return out

    ctx = {"idx": idx, "T": t_steps}

    def vjp(node, g):
        return (pool_gather(g, node.ctx["idx"]),)

    return _run("pool_scatter", (v,), fwd([v.data], ctx), vjp, fwd, ctx=ctx, check=False)


def pool_gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Read x at fixed per-channel time indices (adjoint of pool_scatter)."""
    _require_tensor(x, "pool_gather")
    idx = np.asarray(idx, dtype=np.int64)
    t_steps = x.shape[-2]

    def fwd(args, ctx):
        return np.take_along_axis(args[0], np.expand_dims(ctx["idx"], -2), axis=-2).squeeze(-2)

    ctx = {"idx": idx, "T": t_steps}

    def vjp(node, g):
        return (pool_scatter(g, node.ctx["idx"], node.ctx["T"]),)

    return _run("pool_gather", (x,), fwd([x.data], ctx), vjp, fwd, ctx=ctx, check=False)


# ---------------------------------------------------------------------------
# column blocks


def concat_cols(parts) -> Tensor:
    """Concatenate 2-d blocks along columns."""
    parts = tuple(parts)
    if not parts:
        raise ShapeMismatch("concat_cols: no operands")
    for p in parts:
        _require_tensor(p, "concat_cols")
        if p.ndim != 2 or p.shape[0] != parts[0].shape[0]:
            raise ShapeMismatch("concat_cols: operands must be 2-d with equal row counts")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts]).tolist()

    def vjp(node, g):
        offs = node.ctx["offsets"]
        return tuple(slice_cols(g, offs[i], offs[i + 1]) for i in range(len(offs) - 1))

    return _run("concat_cols", parts, np.concatenate([p.data for p in parts], axis=1),
                vjp, lambda args, ctx: np.concatenate(args, axis=1),
                ctx={"offsets": offsets}, check=False)


def slice_cols(m: Tensor, start: int, stop: int) -> Tensor:
    _require_tensor(m, "slice_cols")
    if m.ndim != 2:
        raise ShapeMismatch(f"slice_cols: expected 2-d, got shape {m.shape}")
    start, stop = int(start), int(stop)
    if not (0 <= start < stop <= m.shape[1]):
        raise ShapeMismatch(f"slice_cols: [{start}:{stop}] out of range for {m.shape}")
    total = m.shape[1]

    def vjp(node, g):
        c = node.ctx
        return (embed_cols(g, c["start"], c["stop"], c["total"]),)

    return _run("slice_cols", (m,), m.data[:, start:stop], vjp,
                lambda args, ctx: args[0][:, ctx["start"]:ctx["stop"]],
                ctx={"start": start, "stop": stop, "total": total}, check=False)


def embed_cols(m: Tensor, start: int, stop: int, total: int) -> Tensor:
    """Place a column block into an otherwise zero matrix (adjoint of slice_cols)."""
    _require_tensor(m, "embed_cols")
    start, stop, total = int(start), int(stop), int(total)
    if m.ndim != 2 or m.shape[1] != stop - start:
        raise ShapeMismatch(f"embed_cols: block shape {m.shape} does not fit [{start}:{stop}]")

    def fwd(args, ctx):
        a = args[0]
        out = np.zeros((a.shape[0], ctx["total"]), dtype=a.dtype)
        out[:, ctx["start"]:ctx["stop"]] = a
        return out

    def vjp(node, g):
        c = node.ctx
        return (slice_cols(g, c["start"], c["stop"]),)

    ctx = {"start": start, "stop": stop, "total": total}
    return _run("embed_cols", (m,), fwd([m.data], ctx), vjp, fwd, ctx=ctx, check=False)


# ---------------------------------------------------------------------------
# compositions


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias added to every row."""
    _require_tensor(x, "affine")
    return add_rowvec(matmul(x, w), b)


def conv1d_valid(x: Tensor, filterbank: Tensor, bias: Tensor) -> Tensor:
    """Valid 1-d convolution over the sequence axis.

    ``x`` is (L, d) or (B, L, d); ``filterbank`` is (width, d, channels);
    ``bias`` is (channels,).  Output channel j at step t is the window
    x[t:t+width] contracted with filterbank[:, :, j], plus bias[j].
    """
    _require_tensor(x, "conv1d_valid")
    _require_tensor(filterbank, "conv1d_valid")
    if filterbank.ndim != 3:
        raise ShapeMismatch(f"conv1d_valid: filterbank must be 3-d, got {filterbank.shape}")
    width, dim, channels = filterbank.shape
    if x.shape[-1] != dim:
        raise ShapeMismatch(
            f"conv1d_valid: input dim {x.shape[-1]} vs filter dim {dim}")
    length, _ = _window_shapes(x, width, "conv1d_valid")
    t_steps = length - width + 1

    win = sliding_windows(x, width)
    flat = reshape(win, (int(np.prod(win.shape[:-1])), width * dim))
    out = add_rowvec(matmul(flat, reshape(filterbank, (width * dim, channels))), bias)
    if x.ndim == 3:
        return reshape(out, (x.shape[0], t_steps, channels))
    return reshape(out, (t_steps, channels))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Stabilized by subtracting each row's max as a constant shift, which the
    softmax is exactly invariant to.
    """
    _require_tensor(logits, "softmax_cross_entropy")
    if logits.ndim != 2:
        raise ShapeMismatch(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeMismatch(f"softmax_cross_entropy: {labels.shape} labels for batch {batch}")
    if labels.min() < 0 or labels.max() >= classes:
        raise LabelOutOfRange(f"labels must lie in [0, {classes})")

    shift = Tensor._wrap(np.max(logits.data, axis=1))  # constant: no gradient path
    z = sub_colvec(logits, shift)
    log_norm = log(row_sum(exp(z)))
    true_logit = pick_labels(z, labels)
    return smul(sum_all(sub(log_norm, true_logit)), 1.0 / batch)


def softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise softmax (composition; used by diagnostics, not the loss)."""
    _require_tensor(logits, "softmax_rows")
    if logits.ndim != 2:
        raise ShapeMismatch(f"softmax_rows: expected 2-d, got {logits.shape}")
    shift = Tensor._wrap(np.max(logits.data, axis=1))
    e = exp(sub(logits, tile_cols(shift, logits.shape[1])))
    return div(e, tile_cols(row_sum(e), logits.shape[1]))


def mean_all(a: Tensor) -> Tensor:
    return smul(sum_all(a), 1.0 / a.size)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor._wrap(np.zeros_like(t.data))


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor, wrt, create_graph: bool = False):
    """Reverse-mode gradients of a scalar loss with respect to ``wrt`` tensors.

    Returns one Tensor per entry of ``wrt``, in order.  With
    ``create_graph=True`` (valid only while the loss's tape is still
    recording) the returned gradients are graph nodes themselves, so a
    further backward differentiates through them.

    Gradient accumulation walks the tape in reverse record order, which
    fixes the reduction order and keeps results bitwise reproducible.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor loss")
    if loss.ndim != 0:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise DetachedTensor("loss is not attached to any graph")
    graph = loss.node.graph
    if create_graph:
        if graph.mode != RECORDING or active_graph() is not graph:
            raise RuntimeError("create_graph=True requires the loss's tape to be recording")

    wrt = list(wrt)
    wrt_ids = []
    for t in wrt:
        nid = tracked_id(t, graph)
        if nid is None:
            raise DetachedTensor("a wrt tensor is not on the loss's graph")
        wrt_ids.append(nid)

    # Reachable-from-loss subgraph; reverse id order is a topological order.
    nodes = graph.nodes
    reachable = {loss.node.id}
    stack = [loss.node]
    while stack:
        node = stack.pop()
        for nid in node.input_ids:
            if nid is not None and nid not in reachable:
                reachable.add(nid)
                stack.append(nodes[nid])

    grads: dict[int, Tensor] = {loss.node.id: Tensor._wrap(np.ones((), dtype=loss.dtype))}
    guard = paused() if not create_graph else _null_ctx()
    with guard:
        for nid in sorted(reachable, reverse=True):
            node = nodes[nid]
            if node.vjp is None:
                continue
            grad_out = grads.get(nid)
            if grad_out is None:
                continue
            contribs = node.vjp(node, grad_out)
            for (inp_id, gi) in zip(node.input_ids, contribs):
                if inp_id is None or gi is None:
                    continue
                held = grads.get(inp_id)
                grads[inp_id] = gi if held is None else add(held, gi)

    return [grads.get(nid) or zeros_like(t) for t, nid in zip(wrt, wrt_ids)]


class _null_ctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------------------
# operator sugar on Tensor (tests and demos read better with it)


def _coerce(other, like: Tensor):
    if isinstance(other, Tensor):
        return other
    raise TypeError("mixed Tensor/scalar elementwise ops: use smul for scalars")


def _t_add(self, other):
    return add(self, _coerce(other, self))


def _t_sub(self, other):
    return sub(self, _coerce(other, self))


def _t_mul(self, other):
    if isinstance(other, (int, float)):
        return smul(self, other)
    return mul(self, other)


def _t_rmul(self, other):
    if isinstance(other, (int, float)):
        return smul(self, other)
    return mul(other, self)


def _t_truediv(self, other):
    if isinstance(other, (int, float)):
        return smul(self, 1.0 / other)
    return div(self, other)


def _t_neg(self):
    return neg(self)


def _t_matmul(self, other):
    return matmul(self, _coerce(other, self))


Tensor.__add__ = _t_add
Tensor.__sub__ = _t_sub
Tensor.__mul__ = _t_mul
Tensor.__rmul__ = _t_rmul
Tensor.__truediv__ = _t_truediv
Tensor.__neg__ = _t_neg
Tensor.__matmul__ = _t_matmul
