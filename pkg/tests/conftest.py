import json
from pathlib import Path

import numpy as np
import pytest

from opengc import ogcf
from opengc.datagen import preset, build_sequence
from opengc.graph import make_splits


def write_dataset_dir(
    out_dir: Path,
    *,
    nodes,              # list of (id, label, arrival)
    edges,              # list of (src, dst, arrival)
    nodes_per_task,
    classes_per_task,
    features=None,
    feature_dim=2,
):
    """Hand-built dataset directory for loader tests."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "num_tasks": len(nodes_per_task),
        "nodes_per_task": list(nodes_per_task),
        "classes_per_task": list(classes_per_task),
        "feature_dim": feature_dim,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest))
    with open(out_dir / "nodes.tsv", "w") as fh:
        for i, lab, arr in nodes:
            fh.write(f"{i}\t{lab}\t{arr}\n")
    with open(out_dir / "edges.tsv", "w") as fh:
        for s, d, a in edges:
            fh.write(f"{s}\t{d}\t{a}\n")
    if features is None:
        rng = np.random.default_rng(0)
        features = rng.normal(size=(nodes_per_task[-1], feature_dim))
    ogcf.write_matrix(out_dir / "features.bin", features)
    return out_dir


@pytest.fixture
def tiny_dataset(tmp_path):
    """3 nodes, path 0-1-2, one task, 3 classes."""
    return write_dataset_dir(
        tmp_path / "tiny",
        nodes=[(0, 0, 1), (1, 1, 1), (2, 2, 1)],
        edges=[(0, 1, 1), (1, 2, 1)],
        nodes_per_task=[3],
        classes_per_task=[3],
    )


@pytest.fixture(scope="session")
def drift_sequence():
    return build_sequence(preset("drift-small", seed=11))


@pytest.fixture(scope="session")
def drift_splits(drift_sequence):
    return make_splits(drift_sequence, seed=11)


@pytest.fixture(scope="session")
def small_cfg():
    from opengc.condense import CondenseConfig

    return CondenseConfig(
        b=64, ratio=0.05, max_iters=30, eval_every=10, patience=3,
        env_count=2, seed=5,
    )
