"""DBSCAN and clustering-metric tests against brute-force oracles."""

import numpy as np
import pytest

from dsreid.clustering import (
    NOISE,
    ClusteringError,
    DbscanConfig,
    adjusted_mutual_info,
    dbscan,
    fowlkes_mallows,
)

from oracles import ami_oracle, brute_dbscan, canonical_partition, fmi_oracle


# ---------------------------------------------------------------------------
# DBSCAN


def test_dbscan_two_separated_blobs():
    rng = np.random.default_rng(0)
    eps = 0.3
    blob_a = rng.normal(0.0, 0.02, size=(4, 2))
    blob_b = rng.normal(0.0, 0.02, size=(4, 2)) + 100.0 * eps
    pts = np.vstack([blob_a, blob_b])
    result = dbscan(pts, DbscanConfig(epsilon=eps, min_points=3, metric="euclidean"))
    assert result.num_clusters == 2
    assert result.num_noise == 0
    assert len(set(result.labels[:4])) == 1
    assert len(set(result.labels[4:])) == 1
    assert result.labels[0] != result.labels[4]


def test_dbscan_all_isolated_points_are_noise():
    pts = np.arange(6, dtype=np.float64).reshape(-1, 1) * 10.0
    result = dbscan(pts, DbscanConfig(epsilon=1.0, min_points=2, metric="euclidean"))
    assert result.num_clusters == 0
    assert (result.labels == NOISE).all()


def test_dbscan_matches_bruteforce_reference():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0.0, 2.0, size=(30, 2))
    cfg = DbscanConfig(epsilon=0.4, min_points=3, metric="euclidean")
    result = dbscan(pts, cfg)
    ref_labels, _ = brute_dbscan(pts, 0.4, 3)
    np.testing.assert_array_equal(canonical_partition(result.labels), canonical_partition(ref_labels))


@pytest.mark.parametrize("metric", ["euclidean", "cosine"])
def test_dbscan_oracle_equivalence_many_instances(metric):
    rng = np.random.default_rng(2)
    for trial in range(100):
        n = int(rng.integers(5, 51))
        d = int(rng.integers(1, 4))
        pts = rng.uniform(-1.0, 1.0, size=(n, d))
        if metric == "cosine":
            pts += 2.0  # keep away from the origin where cosine degenerates
            eps = float(rng.uniform(0.005, 0.2))
        else:
            eps = float(rng.uniform(0.1, 0.8))
        min_points = int(rng.integers(1, 6))
        cfg = DbscanConfig(epsilon=eps, min_points=min_points, metric=metric)
        got = dbscan(pts, cfg)
        ref_labels, ref_count = brute_dbscan(pts, eps, min_points, metric=metric)
        assert got.num_clusters == ref_count, f"trial {trial}"
        np.testing.assert_array_equal(
            canonical_partition(got.labels), canonical_partition(ref_labels), err_msg=f"trial {trial}"
        )


def test_dbscan_permutation_invariance():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0.0, 1.5, size=(40, 2))
    cfg = DbscanConfig(epsilon=0.3, min_points=3, metric="euclidean")
    base = dbscan(pts, cfg)
    for _ in range(5):
        perm = rng.permutation(40)
        permuted = dbscan(pts[perm], cfg)
        # undo the permutation, then compare canonical forms
        unpermuted = np.empty(40, dtype=np.int64)
        unpermuted[perm] = permuted.labels
        np.testing.assert_array_equal(canonical_partition(unpermuted), canonical_partition(base.labels))


def test_dbscan_every_cluster_contains_a_core_point():
    rng = np.random.default_rng(4)
    pts = rng.uniform(0.0, 1.0, size=(50, 2))
    cfg = DbscanConfig(epsilon=0.2, min_points=4, metric="euclidean")
    result = dbscan(pts, cfg)
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    core = (dist <= cfg.epsilon).sum(axis=1) >= cfg.min_points
    for cid in range(result.num_clusters):
        assert core[result.members(cid)].any()
    assert (result.labels >= -1).all()
    present = sorted(set(result.labels.tolist()) - {-1})
    assert present == list(range(result.num_clusters))


def test_dbscan_rejects_bad_inputs():
    with pytest.raises(ClusteringError):
        dbscan(np.zeros((0, 2)), DbscanConfig())
    with pytest.raises(ClusteringError):
        dbscan(np.array([[np.nan, 0.0]]), DbscanConfig())
    with pytest.raises(ClusteringError):
        DbscanConfig(epsilon=0.0)


# ---------------------------------------------------------------------------
# AMI


def test_ami_identical_labelings():
    assert adjusted_mutual_info([0, 0, 1, 1, 2], [0, 0, 1, 1, 2]) == 1.0
    # invariant under label renaming
    assert adjusted_mutual_info([5, 5, 9, 9, 1], [0, 0, 1, 1, 2]) == pytest.approx(1.0, abs=1e-12)


def test_ami_degenerate_partitions():
    assert adjusted_mutual_info([0] * 6, list(range(6))) == pytest.approx(0.0, abs=1e-12)
    assert adjusted_mutual_info([0, 0, 0], [0, 0, 0]) == 1.0


def test_ami_worked_example_matches_oracle():
    a = [0, 0, 1, 1, 2, 2]
    b = [0, 0, 1, 2, 2, 1]
    expected = ami_oracle(a, b)  # 64-bit direct formula, exact factorials
    assert adjusted_mutual_info(a, b) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.16666666666666674, abs=1e-9)  # frozen from the oracle


def test_ami_fmi_oracle_equivalence_random_tables():
    rng = np.random.default_rng(5)
    for trial in range(50):
        n = int(rng.integers(4, 40))
        ka = int(rng.integers(1, 6))
        kb = int(rng.integers(1, 6))
        a = rng.integers(0, ka, size=n)
        b = rng.integers(0, kb, size=n)
        assert adjusted_mutual_info(a, b) == pytest.approx(ami_oracle(a, b), abs=1e-9), f"trial {trial}"
        assert fowlkes_mallows(a, b) == pytest.approx(fmi_oracle(a, b), abs=1e-9), f"trial {trial}"


def test_ami_symmetry():
    rng = np.random.default_rng(6)
    a = rng.integers(0, 4, size=30)
    b = rng.integers(0, 3, size=30)
    assert adjusted_mutual_info(a, b) == pytest.approx(adjusted_mutual_info(b, a), abs=1e-12)
    assert fowlkes_mallows(a, b) == pytest.approx(fowlkes_mallows(b, a), abs=1e-12)


def test_ami_shuffle_mean_is_near_zero():
    # the "adjusted" property: expected agreement with a random shuffle is ~0
    rng = np.random.default_rng(7)
    labels = np.repeat(np.arange(6), 10)  # n=60, 6 balanced clusters
    values = []
    for _ in range(200):
        shuffled = rng.permutation(labels)
        values.append(adjusted_mutual_info(labels, shuffled))
    assert abs(float(np.mean(values))) < 0.05


def test_ami_validates_inputs():
    with pytest.raises(ClusteringError):
        adjusted_mutual_info([0, 1], [0])
    with pytest.raises(ClusteringError):
        adjusted_mutual_info([], [])


# ---------------------------------------------------------------------------
# FMI


def test_fmi_identical_labelings():
    assert fowlkes_mallows([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0


def test_fmi_all_singletons_is_zero():
    assert fowlkes_mallows([0, 1, 2, 3], [0, 0, 1, 1]) == 0.0


def test_fmi_worked_pair_table():
    # a=[0,0,1,1], b=[0,1,1,1]: TP=1, FP=2, FN=1 -> 1/sqrt(3*2)
    value = fowlkes_mallows([0, 0, 1, 1], [0, 1, 1, 1])
    assert value == pytest.approx(1.0 / np.sqrt(6.0), abs=1e-9)
    assert value == pytest.approx(0.40824829, abs=1e-6)
