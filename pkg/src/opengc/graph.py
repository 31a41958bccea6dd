"""Snapshot and task-sequence representation, adjacency normalization,
and expanding train/validation/test splits.

A dataset directory holds one evolving graph:

* ``manifest.json`` — ``num_tasks``, cumulative ``nodes_per_task``,
  cumulative ``classes_per_task``, ``feature_dim``.
* ``edges.tsv`` — rows ``src<TAB>dst<TAB>arrival_task``.
* ``nodes.tsv`` — rows ``id<TAB>label<TAB>arrival_task``.
* ``features.bin`` — OGCF matrix, one row per final node.

Snapshot ``t`` contains every node and edge whose arrival task is at most
``t``; node ids of snapshot ``t`` are a prefix of snapshot ``t+1``'s.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import ogcf
from .errors import DataError

SPLIT_RATIOS = (0.6, 0.2, 0.2)


def derive_seed(*parts) -> int:
    """Stable sub-seed from a mix of ints and strings.

    Strings are folded in through sha256 so ("a", 1) and ("b", 1) give
    unrelated streams; the result is reproducible across platforms.
    """
    entropy = []
    for p in parts:
        if isinstance(p, str):
            entropy.append(int.from_bytes(hashlib.sha256(p.encode()).digest()[:8], "little"))
        else:
            entropy.append(int(p))
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


@dataclass
class GraphSnapshot:
    """One task's cumulative graph state."""

    task_index: int                 # 1-based
    num_nodes: int
    adjacency: sp.csr_matrix       # symmetric, unweighted, no self-loops
    features: np.ndarray           # num_nodes x d float64
    labels: np.ndarray             # int64, values in [0, num_classes)
    node_arrival_task: np.ndarray  # int64, 1-based
    num_classes: int

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def degrees(self) -> np.ndarray:
        """Raw degrees (no self-loop)."""
        return np.asarray(self.adjacency.sum(axis=1)).ravel().astype(np.int64)

    def validate(self) -> None:
        n = self.num_nodes
        a = self.adjacency
        if a.shape != (n, n):
            raise DataError(f"adjacency shape {a.shape} != ({n}, {n})")
        if self.features.shape[0] != n:
            raise DataError("feature row count mismatch")
        if self.labels.shape[0] != n or self.node_arrival_task.shape[0] != n:
            raise DataError("per-node array length mismatch")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label out of range")
        if a.nnz:
            if a.diagonal().any():
                raise DataError("stored self-loops present")
            if (a != a.T).nnz:
                raise DataError("adjacency not symmetric")
            if not np.all(a.data == 1.0):
                raise DataError("duplicate or weighted edges present")


@dataclass
class TaskSequence:
    """Ordered snapshots with monotone node and class sets."""

    snapshots: list[GraphSnapshot]

    @property
    def m(self) -> int:
        return len(self.snapshots)

    def snapshot(self, task: int) -> GraphSnapshot:
        if not 1 <= task <= self.m:
            raise DataError(f"task {task} out of range 1..{self.m}")
        return self.snapshots[task - 1]

    def validate(self) -> None:
        for snap in self.snapshots:
            snap.validate()
        for prev, cur in zip(self.snapshots, self.snapshots[1:]):
            if cur.num_nodes < prev.num_nodes:
                raise DataError("node counts must be non-decreasing")
            if cur.num_classes < prev.num_classes:
                raise DataError("class counts must be non-decreasing")
            if not np.array_equal(cur.labels[: prev.num_nodes], prev.labels):
                raise DataError("node prefix property violated (labels differ)")


@dataclass
class SplitMask:
    """Expanding per-task train/validation/test node-index sets.

    Indices are cumulative: the split of task t contains the split of
    task t-1, and the three sets partition snapshot t's node set.
    """

    train_by_task: list[np.ndarray]
    val_by_task: list[np.ndarray]
    test_by_task: list[np.ndarray]

    def train(self, task: int) -> np.ndarray:
        return self.train_by_task[task - 1]

    def val(self, task: int) -> np.ndarray:
        return self.val_by_task[task - 1]

    def test(self, task: int) -> np.ndarray:
        return self.test_by_task[task - 1]


def _read_manifest(dataset_dir: Path) -> dict:
    path = dataset_dir / "manifest.json"
    if not path.is_file():
        raise DataError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest: {exc}") from exc
    for key in ("num_tasks", "nodes_per_task", "classes_per_task", "feature_dim"):
        if key not in manifest:
            raise DataError(f"manifest missing key {key!r}")
    m = manifest["num_tasks"]
    if len(manifest["nodes_per_task"]) != m or len(manifest["classes_per_task"]) != m:
        raise DataError("manifest per-task lists do not match num_tasks")
    return manifest


def _read_tsv(path: Path, width: int) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    if not path.read_text().strip():
        return np.zeros((0, width), dtype=np.int64)
    try:
        rows = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
    except ValueError as exc:
        raise DataError(f"malformed record in {path}: {exc}") from exc
    if rows.shape[1] != width:
        raise DataError(f"{path}: expected {width} columns, got {rows.shape[1]}")
    return rows


def _dedup_symmetrize(src: np.ndarray, dst: np.ndarray, n: int) -> sp.csr_matrix:
    """Build a symmetric 0/1 CSR adjacency: drop self-loops, dedupe, and
    mirror directed input."""
    keep = src != dst
    src, dst = src[keep], dst[keep]
    i = np.concatenate([src, dst])
    j = np.concatenate([dst, src])
    a = sp.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    a.data[:] = 1.0  # collapse duplicates accumulated by the COO sum
    a.sum_duplicates()
    a.data[:] = 1.0
    return a


def load_snapshot(dataset_dir: str | Path, task: int) -> GraphSnapshot:
    """Load and validate the cumulative snapshot for one task (1-based)."""
    dataset_dir = Path(dataset_dir)
    manifest = _read_manifest(dataset_dir)
    m = manifest["num_tasks"]
    if not 1 <= task <= m:
        raise DataError(f"task {task} out of range 1..{m}")
    n_t = int(manifest["nodes_per_task"][task - 1])
    c_t = int(manifest["classes_per_task"][task - 1])
    d = int(manifest["feature_dim"])

    nodes = _read_tsv(dataset_dir / "nodes.tsv", 3)
    in_snap = nodes[:, 2] <= task
    snap_nodes = nodes[in_snap]
    if snap_nodes.shape[0] != n_t:
        raise DataError(
            f"task {task}: manifest declares {n_t} nodes, nodes.tsv has "
            f"{snap_nodes.shape[0]} with arrival <= {task}"
        )
    order = np.argsort(snap_nodes[:, 0], kind="stable")
    snap_nodes = snap_nodes[order]
    if not np.array_equal(snap_nodes[:, 0], np.arange(n_t)):
        raise DataError(f"task {task}: node ids are not the prefix 0..{n_t - 1}")
    labels = snap_nodes[:, 1].copy()
    arrivals = snap_nodes[:, 2].copy()
    if labels.size and (labels.min() < 0 or labels.max() >= c_t):
        raise DataError("label out of range")

    edges = _read_tsv(dataset_dir / "edges.tsv", 3)
    snap_edges = edges[edges[:, 2] <= task]
    if snap_edges.size and (snap_edges[:, :2].min() < 0 or snap_edges[:, :2].max() >= n_t):
        raise DataError(f"task {task}: edge endpoint outside declared node count {n_t}")
    adjacency = _dedup_symmetrize(snap_edges[:, 0], snap_edges[:, 1], n_t)

    feats = ogcf.read_matrix(dataset_dir / "features.bin")
    n_final = int(manifest["nodes_per_task"][-1])
    if feats.shape != (n_final, d):
        raise DataError(
            f"features.bin shape {feats.shape} != declared ({n_final}, {d})"
        )
    snap = GraphSnapshot(
        task_index=task,
        num_nodes=n_t,
        adjacency=adjacency,
        features=feats[:n_t].copy(),
        labels=labels,
        node_arrival_task=arrivals,
        num_classes=c_t,
    )
    snap.validate()
    return snap


def load_sequence(dataset_dir: str | Path, up_to_task: int | None = None) -> TaskSequence:
    """Load snapshots 1..up_to_task (default: all) and validate monotonicity."""
    manifest = _read_manifest(Path(dataset_dir))
    m = manifest["num_tasks"] if up_to_task is None else up_to_task
    seq = TaskSequence([load_snapshot(dataset_dir, t) for t in range(1, m + 1)])
    seq.validate()
    return seq


def normalize_adjacency(snapshot: GraphSnapshot | sp.spmatrix) -> sp.csr_matrix:
    """Symmetric degree normalization of the self-looped adjacency.

    Entry (i, j) is inv_sqrt_deg[i] * inv_sqrt_deg[j] for every edge of
    A + I, where degrees count the added self-loop, so mirrored entries
    are bitwise equal and isolated nodes get a diagonal 1.  Accepts a
    snapshot or a bare CSR adjacency.
    """
    adjacency = snapshot.adjacency if isinstance(snapshot, GraphSnapshot) else snapshot
    n = adjacency.shape[0]
    a_tilde = (adjacency + sp.eye(n, format="csr")).tocsr()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    norm = a_tilde.tocoo()
    # (s_i * s_j) first: commutative product keeps mirrored entries bitwise equal
    norm.data = (inv_sqrt[norm.row] * inv_sqrt[norm.col]) * norm.data
    return norm.tocsr()


def _split_counts(n_new: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Floor each share, then hand every leftover node to train."""
    counts = [int(np.floor(r * n_new)) for r in ratios]
    counts[0] += n_new - sum(counts)
    return tuple(counts)


def make_splits(
    seq: TaskSequence,
    ratios: tuple[float, float, float] = SPLIT_RATIOS,
    seed: int = 0,
) -> SplitMask:
    """Split each task's newly arrived nodes and accumulate across tasks."""
    if abs(sum(ratios) - 1.0) > 1e-12:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    train_parts: list[np.ndarray] = []
    val_parts: list[np.ndarray] = []
    test_parts: list[np.ndarray] = []
    train_by_task, val_by_task, test_by_task = [], [], []
    prev_n = 0
    for snap in seq.snapshots:
        new_ids = np.arange(prev_n, snap.num_nodes)
        rng = np.random.default_rng(derive_seed(seed, "split", snap.task_index))
        rng.shuffle(new_ids)
        n_train, n_val, _ = _split_counts(len(new_ids), ratios)
        train_parts.append(np.sort(new_ids[:n_train]))
        val_parts.append(np.sort(new_ids[n_train : n_train + n_val]))
        test_parts.append(np.sort(new_ids[n_train + n_val :]))
        train_by_task.append(np.concatenate(train_parts))
        val_by_task.append(np.concatenate(val_parts))
        test_by_task.append(np.concatenate(test_parts))
        prev_n = snap.num_nodes
    return SplitMask(train_by_task, val_by_task, test_by_task)
