"""Non-parametric K-layer graph convolution.

Original-graph embeddings are K successive sparse-dense products with the
normalized adjacency; the condensed graph uses an identity adjacency, so
its "propagation" is the identity map:

    A' = I  =>  A' + I = 2I  =>  normalized A' = I  =>  A'^K X' = X'.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import ogcf


@dataclass
class Embeddings:
    matrix: np.ndarray
    K: int
    task_index: int | None = None


def propagate(
    adj: sp.csr_matrix, X: np.ndarray, K: int, task_index: int | None = None
) -> Embeddings:
    """Return adj^K @ X; K = 0 returns X unchanged."""
    if K < 0:
        raise ValueError("K must be non-negative")
    X = np.asarray(X, dtype=np.float64)
    if adj.shape[1] != X.shape[0]:
        raise ValueError(f"dimension mismatch: adj {adj.shape} vs X {X.shape}")
    h = X
    for _ in range(K):
        h = adj @ h
    return Embeddings(matrix=np.asarray(h), K=K, task_index=task_index)


def propagate_condensed(Xp: np.ndarray, task_index: int | None = None) -> Embeddings:
    """Identity-adjacency shortcut for the condensed graph."""
    return Embeddings(matrix=np.asarray(Xp, dtype=np.float64), K=0, task_index=task_index)


def export_embeddings(emb: Embeddings, path: str | Path) -> None:
    """Write embeddings in the same binary matrix format as features."""
    ogcf.write_matrix(path, emb.matrix)
