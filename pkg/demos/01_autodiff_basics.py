"""Tour of the tensor kernel: tapes, gradients, and double backward.

The one idea to take away: gradients computed with ``create_graph=True``
are themselves nodes on the tape, so differentiating them again just works.
That is the entire mechanism later used to push gradients through a whole
SGD trajectory.
"""

import numpy as np

from textdistill import Tensor, backward, tape
from textdistill import ops

# --- plain reverse mode ----------------------------------------------------

with tape():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    w = Tensor(np.eye(2), requires_grad=True)
    y = ops.relu(ops.matmul(x, w))
    loss = ops.sum_all(ops.mul(y, y))
    gx, gw = backward(loss, [x, w])

print("loss          ", loss.item())
print("dloss/dx      ", gx.data.tolist())

# --- double backward: f(x) = x^3 -------------------------------------------

with tape():
    x = Tensor(2.0, requires_grad=True)
    f = ops.mul(ops.mul(x, x), x)
    (g1,) = backward(f, [x], create_graph=True)   # 3x^2 -> 12
    (g2,) = backward(g1, [x], create_graph=True)  # 6x   -> 12
    (g3,) = backward(g2, [x])                     # 6
print("f, f', f'', f''' at 2:", f.item(), g1.item(), g2.item(), g3.item())

# --- Hessian-vector product without materializing the Hessian ---------------

rng = np.random.default_rng(0)
a = rng.normal(size=(6, 6))
a = (a + a.T) / 2
v = rng.normal(size=6)

with tape():
    w = Tensor(rng.normal(size=6), requires_grad=True)
    w2 = ops.reshape(w, (6, 1))
    quad = ops.smul(ops.sum_all(ops.mul(w2, ops.matmul(Tensor(a), w2))), 0.5)
    (grad,) = backward(quad, [w], create_graph=True)
    gv = ops.sum_all(ops.mul(grad, Tensor(v)))
    (hv,) = backward(gv, [w])

print("HVP max error vs A@v:", np.abs(hv.data - a @ v).max())

# --- the trick that matters: gradient THROUGH a gradient step ----------------

alpha = 0.1
with tape():
    w = Tensor(rng.normal(size=6), requires_grad=True)
    w2 = ops.reshape(w, (6, 1))
    inner = ops.smul(ops.sum_all(ops.mul(w2, ops.matmul(Tensor(a), w2))), 0.5)
    (g,) = backward(inner, [w], create_graph=True)
    w_after = ops.sub(w, ops.smul(g, alpha))      # one SGD step, on the tape
    outer = ops.sum_all(ops.mul(w_after, Tensor(v)))
    (meta,) = backward(outer, [w])

print("meta-gradient max error vs (I - alpha*A) v:",
      np.abs(meta.data - (v - alpha * (a @ v))).max())
