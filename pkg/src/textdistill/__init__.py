"""Compress a labeled text corpus into a few synthetic training matrices.

The package splits into a small differentiable-tensor kernel (:mod:`tensor`,
:mod:`ops`), text ingestion (:mod:`textdata`), a convolutional text
classifier (:mod:`model`), the bilevel distillation loop (:mod:`distill`),
and the evaluation protocol (:mod:`evaluate`).  ``textdistill.cli`` wires
them into reproducible command-line runs.
"""

from .tensor import Graph, Tensor, set_default_dtype, tape, using_dtype
from .ops import backward

__all__ = [
    "Graph",
    "Tensor",
    "backward",
    "set_default_dtype",
    "tape",
    "using_dtype",
]
