"""Synthetic evolving-graph generator.

Each task introduces a batch of nodes spread over every class seen so
far plus the task's new classes, so old classes keep growing while the
label space expands.  Features are class-conditional Gaussians whose
means drift along a fixed per-class direction as tasks progress, and new
nodes attach preferentially to low-degree old nodes; together these give
later snapshots a structure-correlated distribution shift for the
invariance machinery to pick up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import ogcf
from .errors import DataError
from .graph import GraphSnapshot, TaskSequence, _dedup_symmetrize

_BLOCK = 512  # row-block size for Bernoulli edge sampling


@dataclass(frozen=True)
class DriftSbmParams:
    tasks: int = 6
    classes_per_task: int = 2
    new_nodes_per_task: tuple[int, ...] = (160, 160, 320, 640, 1280, 2560)
    feature_dim: int = 32
    p_intra: float = 0.02
    p_inter: float = 0.002
    attachment: float = 0.01
    separation: float = 3.0
    drift: float = 1.0
    noise: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.tasks < 2:
            raise ValueError("need at least 2 tasks")
        if len(self.new_nodes_per_task) != self.tasks:
            raise ValueError("new_nodes_per_task length must equal tasks")
        for prob in (self.p_intra, self.p_inter, self.attachment):
            if not 0.0 <= prob <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        for t, n_new in enumerate(self.new_nodes_per_task, start=1):
            if n_new < self.classes_per_task * t:
                raise ValueError(
                    f"task {t} adds {n_new} nodes but must cover "
                    f"{self.classes_per_task * t} classes"
                )

    @property
    def total_classes(self) -> int:
        return self.classes_per_task * self.tasks

    @property
    def cumulative_nodes(self) -> list[int]:
        return list(np.cumsum(self.new_nodes_per_task))


PRESETS: dict[str, DriftSbmParams] = {
    "paper-analog": DriftSbmParams(),
    "drift-small": DriftSbmParams(
        tasks=3,
        classes_per_task=2,
        new_nodes_per_task=(240, 240, 360),
        feature_dim=16,
        p_intra=0.05,
        p_inter=0.005,
        attachment=0.02,
        drift=1.2,
    ),
    "scale-2500": DriftSbmParams(
        tasks=2, classes_per_task=2, new_nodes_per_task=(1250, 1250),
        p_intra=0.01, drift=0.5,
    ),
    "scale-5000": DriftSbmParams(
        tasks=2, classes_per_task=2, new_nodes_per_task=(2500, 2500),
        p_intra=0.005, drift=0.5,
    ),
    "scale-10000": DriftSbmParams(
        tasks=2, classes_per_task=2, new_nodes_per_task=(5000, 5000),
        p_intra=0.0025, drift=0.5,
    ),
}


def preset(name: str, seed: int | None = None) -> DriftSbmParams:
    if name not in PRESETS:
        raise DataError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    params = PRESETS[name]
    return params if seed is None else replace(params, seed=seed)


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.normal(0.0, 1.0, (n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _allocate_classes(n_new: int, num_classes: int) -> np.ndarray:
    """Spread a task's new nodes over all currently visible classes."""
    base = n_new // num_classes
    counts = np.full(num_classes, base, dtype=np.int64)
    counts[: n_new - base * num_classes] += 1
    return np.repeat(np.arange(num_classes), counts)


def _bernoulli_pairs(
    rng: np.random.Generator,
    new_labels: np.ndarray,
    p_same: float,
    p_diff: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Upper-triangle Bernoulli edges among new nodes, block by block."""
    n = new_labels.size
    src_acc, dst_acc = [], []
    for i0 in range(0, n, _BLOCK):
        i1 = min(i0 + _BLOCK, n)
        same = new_labels[i0:i1, None] == new_labels[None, :]
        probs = np.where(same, p_same, p_diff)
        draws = rng.random((i1 - i0, n))
        hit = draws < probs
        upper = np.arange(i0, i1)[:, None] < np.arange(n)[None, :]
        rr, cc = np.nonzero(hit & upper)
        src_acc.append(rr + i0)
        dst_acc.append(cc)
    if not src_acc:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(src_acc), np.concatenate(dst_acc)


def _bernoulli_cross(
    rng: np.random.Generator,
    new_labels: np.ndarray,
    old_labels: np.ndarray,
    old_degree: np.ndarray,
    p_same: float,
    p_diff: float,
) -> tuple[np.ndarray, np.ndarray]:
    """New-to-old Bernoulli edges, probability tilted toward low-degree
    old nodes while preserving the expected edge count."""
    n_new, n_old = new_labels.size, old_labels.size
    weight = 1.0 / (1.0 + old_degree)
    tilt = weight / weight.mean()
    src_acc, dst_acc = [], []
    for i0 in range(0, n_new, _BLOCK):
        i1 = min(i0 + _BLOCK, n_new)
        same = new_labels[i0:i1, None] == old_labels[None, :]
        probs = np.where(same, p_same, p_diff) * tilt[None, :]
        np.clip(probs, 0.0, 1.0, out=probs)
        draws = rng.random((i1 - i0, n_old))
        rr, cc = np.nonzero(draws < probs)
        src_acc.append(rr + i0)
        dst_acc.append(cc)
    if not src_acc:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(src_acc), np.concatenate(dst_acc)


def generate_drift_sbm(params: DriftSbmParams) -> dict:
    """Generate the full evolving graph.

    Returns arrays describing the final state: ``labels``, ``arrivals``
    (both per node), ``features`` (N x d float64), edge arrays ``src``,
    ``dst``, ``edge_arrival``, and the per-task cumulative counts.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    d = params.feature_dim
    c_total = params.total_classes
    class_means = params.separation * _unit_rows(rng, c_total, d)
    drift_dirs = _unit_rows(rng, c_total, d)
    class_birth = np.repeat(
        np.arange(1, params.tasks + 1), params.classes_per_task
    )

    labels_acc, arrivals_acc, feats_acc = [], [], []
    src_acc, dst_acc, arr_acc = [], [], []
    degree = np.zeros(0, dtype=np.int64)
    n_before = 0
    for t in range(1, params.tasks + 1):
        c_t = params.classes_per_task * t
        new_labels = _allocate_classes(params.new_nodes_per_task[t - 1], c_t)
        means = (
            class_means[new_labels]
            + params.drift
            * (t - class_birth[new_labels])[:, None]
            * drift_dirs[new_labels]
        )
        feats_acc.append(means + params.noise * rng.normal(0.0, 1.0, means.shape))
        labels_acc.append(new_labels)
        arrivals_acc.append(np.full(new_labels.size, t, dtype=np.int64))

        s_nn, d_nn = _bernoulli_pairs(
            rng, new_labels, params.p_intra, params.p_inter
        )
        s_nn, d_nn = s_nn + n_before, d_nn + n_before
        if n_before:
            old_labels = np.concatenate(labels_acc[:-1])
            p_diff = (
                params.attachment * params.p_inter / params.p_intra
                if params.p_intra > 0
                else params.attachment
            )
            s_no, d_no = _bernoulli_cross(
                rng, new_labels, old_labels, degree, params.attachment, p_diff
            )
            s_no = s_no + n_before
        else:
            s_no = d_no = np.zeros(0, dtype=np.int64)

        task_src = np.concatenate([s_nn, s_no])
        task_dst = np.concatenate([d_nn, d_no])
        src_acc.append(task_src)
        dst_acc.append(task_dst)
        arr_acc.append(np.full(task_src.size, t, dtype=np.int64))

        n_now = n_before + new_labels.size
        degree = np.concatenate([degree, np.zeros(new_labels.size, dtype=np.int64)])
        np.add.at(degree, task_src, 1)
        np.add.at(degree, task_dst, 1)
        n_before = n_now

    return {
        "labels": np.concatenate(labels_acc),
        "arrivals": np.concatenate(arrivals_acc),
        "features": np.vstack(feats_acc),
        "src": np.concatenate(src_acc),
        "dst": np.concatenate(dst_acc),
        "edge_arrival": np.concatenate(arr_acc),
        "nodes_per_task": params.cumulative_nodes,
        "classes_per_task": [params.classes_per_task * t for t in range(1, params.tasks + 1)],
        "feature_dim": d,
        "num_tasks": params.tasks,
    }


def write_dataset(params: DriftSbmParams, out_dir: str | Path) -> dict:
    """Generate and persist a dataset directory; returns the arrays."""
    data = generate_drift_sbm(params)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "num_tasks": data["num_tasks"],
        "nodes_per_task": [int(n) for n in data["nodes_per_task"]],
        "classes_per_task": [int(c) for c in data["classes_per_task"]],
        "feature_dim": int(data["feature_dim"]),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    with open(out_dir / "nodes.tsv", "w") as fh:
        for i, (lab, arr) in enumerate(zip(data["labels"], data["arrivals"])):
            fh.write(f"{i}\t{int(lab)}\t{int(arr)}\n")
    with open(out_dir / "edges.tsv", "w") as fh:
        for s, t, a in zip(data["src"], data["dst"], data["edge_arrival"]):
            fh.write(f"{int(s)}\t{int(t)}\t{int(a)}\n")
    ogcf.write_matrix(out_dir / "features.bin", data["features"])
    return data


def build_sequence(params: DriftSbmParams) -> TaskSequence:
    """In-memory task sequence, bit-identical to writing the dataset to
    disk and loading it back (features round-trip through float32)."""
    data = generate_drift_sbm(params)
    feats = data["features"].astype(np.float32).astype(np.float64)
    snapshots = []
    for t in range(1, data["num_tasks"] + 1):
        n_t = int(data["nodes_per_task"][t - 1])
        c_t = int(data["classes_per_task"][t - 1])
        in_task = data["edge_arrival"] <= t
        adjacency = _dedup_symmetrize(
            data["src"][in_task], data["dst"][in_task], n_t
        )
        snapshots.append(
            GraphSnapshot(
                task_index=t,
                num_nodes=n_t,
                adjacency=adjacency,
                features=feats[:n_t].copy(),
                labels=data["labels"][:n_t].copy(),
                node_arrival_task=data["arrivals"][:n_t].copy(),
                num_classes=c_t,
            )
        )
    seq = TaskSequence(snapshots)
    seq.validate()
    return seq
