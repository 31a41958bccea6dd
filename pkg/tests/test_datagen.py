import dataclasses

import numpy as np
import pytest

from opengc.datagen import (
    DriftSbmParams,
    build_sequence,
    generate_drift_sbm,
    preset,
    write_dataset,
)
from opengc.errors import DataError
from opengc.graph import load_sequence


SMALL = DriftSbmParams(
    tasks=3,
    classes_per_task=2,
    new_nodes_per_task=(200, 200, 300),
    feature_dim=8,
    p_intra=0.05,
    p_inter=0.005,
    attachment=0.02,
    drift=1.0,
    seed=1,
)


class TestParams:
    def test_preset_lookup(self):
        p = preset("paper-analog", seed=9)
        assert p.seed == 9 and p.tasks == 6

    def test_unknown_preset(self):
        with pytest.raises(DataError):
            preset("nonexistent")

    def test_too_few_tasks(self):
        with pytest.raises(ValueError):
            dataclasses.replace(SMALL, tasks=1, new_nodes_per_task=(10,)).validate()

    def test_task_must_cover_classes(self):
        bad = dataclasses.replace(SMALL, new_nodes_per_task=(200, 3, 300))
        with pytest.raises(ValueError, match="cover"):
            bad.validate()

    def test_probability_bounds(self):
        with pytest.raises(ValueError):
            dataclasses.replace(SMALL, p_intra=1.5).validate()


class TestGeneration:
    def test_paper_analog_shape(self):
        data = generate_drift_sbm(preset("paper-analog", seed=7))
        assert list(data["classes_per_task"]) == [2, 4, 6, 8, 10, 12]
        nodes = [int(n) for n in data["nodes_per_task"]]
        assert nodes == [160, 320, 640, 1280, 2560, 5120]
        for prev, cur in zip(nodes, nodes[1:]):
            assert cur == 2 * prev

    def test_every_task_feeds_every_visible_class(self):
        data = generate_drift_sbm(SMALL)
        for t in range(1, SMALL.tasks + 1):
            cohort = data["labels"][data["arrivals"] == t]
            visible = SMALL.classes_per_task * t
            assert set(cohort.tolist()) == set(range(visible))

    def test_determinism(self):
        a = generate_drift_sbm(SMALL)
        b = generate_drift_sbm(SMALL)
        for key in ("labels", "arrivals", "features", "src", "dst", "edge_arrival"):
            assert np.array_equal(a[key], b[key])

    def test_no_drift_null(self):
        params = dataclasses.replace(SMALL, drift=0.0, seed=3)
        data = generate_drift_sbm(params)
        for cls in range(2):  # classes visible from task 1
            base_rows = data["features"][
                (data["labels"] == cls) & (data["arrivals"] == 1)
            ]
            base_mean = base_rows.mean(axis=0)
            for t in range(2, params.tasks + 1):
                rows = data["features"][
                    (data["labels"] == cls) & (data["arrivals"] == t)
                ]
                tol = 3.0 * params.noise / np.sqrt(rows.shape[0]) \
                    + 3.0 * params.noise / np.sqrt(base_rows.shape[0])
                assert np.abs(rows.mean(axis=0) - base_mean).max() <= tol

    def test_drift_moves_cohort_means(self):
        data = generate_drift_sbm(dataclasses.replace(SMALL, drift=2.0, seed=3))
        cls = 0
        base = data["features"][(data["labels"] == cls) & (data["arrivals"] == 1)].mean(axis=0)
        late = data["features"][(data["labels"] == cls) & (data["arrivals"] == 3)].mean(axis=0)
        assert np.linalg.norm(late - base) > 2.0

    def test_intra_edge_count_binomial(self):
        data = generate_drift_sbm(SMALL)
        # task-1 block: new-new edges among the first 200 nodes
        first = data["labels"][:200]
        in_task1 = data["edge_arrival"] == 1
        src, dst = data["src"][in_task1], data["dst"][in_task1]
        intra = int(np.sum(first[src] == first[dst]))
        counts = np.bincount(first)
        pairs = int(np.sum(counts * (counts - 1) // 2))
        expected = SMALL.p_intra * pairs
        sigma = np.sqrt(SMALL.p_intra * (1 - SMALL.p_intra) * pairs)
        assert abs(intra - expected) <= 4 * sigma


class TestRoundTrip:
    def test_written_dataset_loads_and_matches_memory(self, tmp_path):
        write_dataset(SMALL, tmp_path / "ds")
        loaded = load_sequence(tmp_path / "ds")
        built = build_sequence(SMALL)
        assert loaded.m == built.m
        for a, b in zip(loaded.snapshots, built.snapshots):
            assert a.num_nodes == b.num_nodes
            assert np.array_equal(a.labels, b.labels)
            assert np.array_equal(a.features, b.features)
            assert (a.adjacency != b.adjacency).nnz == 0

    def test_loaded_sequence_validates(self, tmp_path):
        write_dataset(SMALL, tmp_path / "ds")
        load_sequence(tmp_path / "ds").validate()
