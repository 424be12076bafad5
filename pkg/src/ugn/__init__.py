"""Few-shot node classification on graphs with an uncertainty-aware head.

The pipeline: a message-passing encoder embeds every node of the graph, an
episodic sampler draws n-way k-shot tasks, a cosine metric head classifies
queries against class prototypes, and an optional uncertainty head perturbs
the similarities with learned per-class deviations before averaging
Monte-Carlo softmax samples. Everything trains end to end on a small
reverse-mode tape.
"""

__version__ = "0.1.0"

from .autodiff import ParamStore, Tape, Tensor, gradient_check
from .graph import (
    AdjacencyCache,
    DatasetError,
    NormalizedAdjacency,
    SparseGraph,
    build_graph,
    generate_synthetic,
    load_dataset,
    normalize,
    save_dataset,
)

__all__ = [
    "AdjacencyCache",
    "DatasetError",
    "NormalizedAdjacency",
    "ParamStore",
    "SparseGraph",
    "Tape",
    "Tensor",
    "build_graph",
    "generate_synthetic",
    "gradient_check",
    "load_dataset",
    "normalize",
    "save_dataset",
]
