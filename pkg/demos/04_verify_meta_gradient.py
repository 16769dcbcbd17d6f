"""The verification story: two independent routes to the same meta-gradient.

Route 1: record the whole inner SGD run on the tape and backpropagate the
real-data loss through it.  Route 2: central finite differences, re-running
the non-recorded inner loop twice per synthetic entry.  On a problem small
enough for route 2, the two agree to a few parts in a million.
"""

import numpy as np

from textdistill import Tensor, using_dtype
from textdistill import distill as D
from textdistill import model as M

with using_dtype(np.float64):
    rng = np.random.default_rng(7)
    model_config = M.ModelConfig(embedding_dim=3, num_classes=2, widths=(2,),
                                 channels=3, max_len=5)
    config = D.DistillConfig(per_class=2, seq_len=5, embedding_dim=3,
                             alpha_inner=0.1, inner_epochs=2, inner_batch=2,
                             outer_steps=0, real_batch=4, seed=7)
    theta0 = M.init_params(model_config, seed=7)
    dset = D.init_distilled(config, 2, (0.0, 0.5), seed=7)
    real_x = Tensor(rng.normal(size=(4, 5, 3)))
    real_y = rng.integers(0, 2, size=4)

    print(f"synthetic entries: {dset.matrices.size}, "
          f"model parameters: {theta0.num_values()}, "
          f"inner steps: {config.inner_steps(len(dset))}")

    grad, value = D.meta_gradient(dset, theta0, real_x, real_y, config,
                                  batch_seed=7)
    fd = D.meta_grad_fd_oracle(dset, theta0, (real_x, real_y), config,
                               batch_seed=7)

    num = np.linalg.norm((grad - fd).ravel())
    den = np.linalg.norm(fd.ravel())
    print(f"outer loss {value:.6f}")
    print(f"|autodiff - finite differences| / |finite differences| = {num / den:.2e}")
