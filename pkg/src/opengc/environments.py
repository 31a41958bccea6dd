"""Temporal environment generation.

Each environment is a perturbed copy of the current embeddings in which
every augmentable node receives a transplanted residual: the normalized
embedding change some same-class node underwent between the previous and
the current task.  The perturbation magnitude couples the target node's
degree (Beta-distributed multiplier), the similarity between target and
donor, and a base scale eta.  When no history exists, environments fall
back to re-propagating after random edge and feature-column drops.

Randomness contract (tests replay it): environment e draws from
``default_rng(seed ^ e)``; augmentable rows are visited in ascending node
order; each row with a non-empty donor pool consumes exactly one
``integers`` call (donor choice) followed by one ``beta`` call; rows
without donors consume nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import GraphSnapshot, normalize_adjacency
from .propagation import Embeddings

BETA_MODES = ("literal", "intent")


@dataclass
class ResidualTable:
    """L2-normalized embedding residuals for nodes present in both tasks."""

    rows: np.ndarray      # n_common x d, unit rows where valid, zeros otherwise
    valid: np.ndarray     # bool per row; False when the raw residual norm < 1e-12

    @property
    def n_common(self) -> int:
        return self.rows.shape[0]


@dataclass
class EnvironmentSet:
    base: np.ndarray             # rows x d, current embeddings of the kept rows
    envs: list[np.ndarray]       # env_count matrices, same shape as base
    env_count: int
    rows: np.ndarray             # node indices the rows correspond to
    donor_miss: int = 0          # augmentable rows with no usable donor
    miss_mask: np.ndarray | None = None  # per-row donor-miss flags (temporal mode)


def residuals(H_t: Embeddings | np.ndarray, H_prev: Embeddings | np.ndarray) -> ResidualTable:
    """Per-node embedding change for the common (prefix) nodes."""
    ht = H_t.matrix if isinstance(H_t, Embeddings) else np.asarray(H_t)
    hp = H_prev.matrix if isinstance(H_prev, Embeddings) else np.asarray(H_prev)
    if hp.shape[0] > ht.shape[0] or hp.shape[1] != ht.shape[1]:
        raise ValueError(f"shape mismatch on common rows: {ht.shape} vs {hp.shape}")
    delta = ht[: hp.shape[0]] - hp
    norms = np.linalg.norm(delta, axis=1)
    valid = norms >= 1e-12
    rows = np.zeros_like(delta)
    rows[valid] = delta[valid] / norms[valid, None]
    return ResidualTable(rows=rows, valid=valid)


def sample_epsilon(
    degree_i: int,
    cos_ij: float,
    eta: float,
    c: float,
    mode: str,
    rng: np.random.Generator,
) -> float:
    """Perturbation magnitude: Beta-distributed degree multiplier times
    donor similarity times the base scale.

    ``literal`` draws Beta(c*degree, 1) (mass near 1 for high degrees);
    ``intent`` draws Beta(1, c*degree) (mass near 0 for high degrees).
    The cosine is used unclamped, so a negative similarity flips the
    perturbation direction.
    """
    if degree_i < 1:
        raise ValueError("degree must be >= 1 (use the self-looped degree)")
    if c <= 0 or eta < 0:
        raise ValueError("require c > 0 and eta >= 0")
    if mode not in BETA_MODES:
        raise ValueError(f"mode must be one of {BETA_MODES}")
    if mode == "literal":
        delta = rng.beta(c * degree_i, 1.0)
    else:
        delta = rng.beta(1.0, c * degree_i)
    return float(delta * cos_ij * eta)


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-300 or nv < 1e-300:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def generate_environments(
    H_t: Embeddings | np.ndarray,
    H_prev: Embeddings | np.ndarray,
    labels: np.ndarray,
    degrees: np.ndarray,
    *,
    eta: float,
    c: float,
    mode: str = "literal",
    env_count: int = 1,
    seed: int = 0,
) -> EnvironmentSet:
    """Build ``env_count`` residual-transplant environments.

    ``labels`` is a per-node class vector over the current task with -1
    marking rows that are not augmented (and cannot act as donors); the
    returned matrices are restricted to the labeled rows.  Donors are
    labeled nodes that already existed in the previous task and moved by
    a nonzero residual; rows in classes with no such donor pass through
    unchanged and are counted in ``donor_miss``.
    """
    if env_count < 1:
        raise ValueError("env_count must be >= 1")
    ht = H_t.matrix if isinstance(H_t, Embeddings) else np.asarray(H_t)
    hp = H_prev.matrix if isinstance(H_prev, Embeddings) else np.asarray(H_prev)
    labels = np.asarray(labels)
    table = residuals(ht, hp)
    n_common = table.n_common

    aug_rows = np.flatnonzero(labels >= 0)
    donor_pools: dict[int, np.ndarray] = {}
    for cls in np.unique(labels[aug_rows]):
        pool = np.flatnonzero(
            (labels[:n_common] == cls) & table.valid
        )
        if pool.size:
            donor_pools[int(cls)] = pool

    base = ht[aug_rows].copy()
    miss_mask = np.array([int(labels[i]) not in donor_pools for i in aug_rows])
    envs = []
    for e in range(env_count):
        rng = np.random.default_rng(seed ^ e)
        h_env = base.copy()
        for pos, i in enumerate(aug_rows):
            pool = donor_pools.get(int(labels[i]))
            if pool is None:
                continue
            j = int(pool[rng.integers(pool.size)])
            cos_ij = _cosine(ht[i], hp[j])
            eps = sample_epsilon(
                max(int(degrees[i]), 1), cos_ij, eta, c, mode, rng
            )
            h_env[pos] = ht[i] + eps * table.rows[j]
        envs.append(h_env)
    return EnvironmentSet(
        base=base,
        envs=envs,
        env_count=env_count,
        rows=aug_rows,
        donor_miss=int(miss_mask.sum()),
        miss_mask=miss_mask,
    )


def fallback_environments(
    snapshot: GraphSnapshot,
    H_fn,
    drop_edge_rate: float,
    drop_feature_rate: float,
    env_count: int = 1,
    seed: int = 0,
    rows: np.ndarray | None = None,
) -> EnvironmentSet:
    """History-free environments: re-propagate after random edge removal
    and feature-column zeroing.

    ``H_fn(adj_normalized, X) -> ndarray`` supplies the propagation.  Each
    environment independently keeps every undirected edge with probability
    ``1 - drop_edge_rate`` and zeroes each feature column with probability
    ``drop_feature_rate``.  ``rows`` optionally restricts the output to a
    subset of nodes (the training rows, in the condensation loop).
    """
    if not (0.0 <= drop_edge_rate < 1.0 and 0.0 <= drop_feature_rate < 1.0):
        raise ValueError("drop rates must lie in [0, 1)")
    if env_count < 1:
        raise ValueError("env_count must be >= 1")
    if rows is None:
        rows = np.arange(snapshot.num_nodes)

    base_full = H_fn(normalize_adjacency(snapshot), snapshot.features)
    coo = sp.triu(snapshot.adjacency, k=1).tocoo()
    src, dst = coo.row, coo.col
    d = snapshot.feature_dim

    envs = []
    for e in range(env_count):
        rng = np.random.default_rng(seed ^ e)
        keep = rng.random(src.size) >= drop_edge_rate
        adj_e = _undirected_csr(src[keep], dst[keep], snapshot.num_nodes)
        x_e = snapshot.features
        dropped = rng.random(d) < drop_feature_rate
        if dropped.any():
            x_e = x_e.copy()
            x_e[:, dropped] = 0.0
        h_e = H_fn(normalize_adjacency(adj_e), x_e)
        envs.append(np.asarray(h_e)[rows].copy())
    return EnvironmentSet(
        base=np.asarray(base_full)[rows].copy(),
        envs=envs,
        env_count=env_count,
        rows=np.asarray(rows),
        donor_miss=0,
    )


def _undirected_csr(src: np.ndarray, dst: np.ndarray, n: int) -> sp.csr_matrix:
    i = np.concatenate([src, dst])
    j = np.concatenate([dst, src])
    a = sp.csr_matrix((np.ones(i.size), (i, j)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1.0
    return a
