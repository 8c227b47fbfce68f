import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decodet.taxonomy import ClassRepresentation, Taxonomy, build_taxonomy, class_representations, kmeans, kmeans_objective
from oracles import all_partitions_kmeans_objective, best_two_partition


def test_class_representations_examples():
    reps = class_representations([[[1.0, 2.0]], [[0.0, 0.0], [2.0, 2.0]]])
    assert np.array_equal(reps[0].vector, [1.0, 2.0])
    assert np.array_equal(reps[1].vector, [1.0, 1.0])


def test_class_representations_mean_oracle():
    rng = np.random.default_rng(1)
    samples = [[list(rng.normal(size=5)) for _ in range(10)]]
    want = [0.0] * 5
    for v in samples[0]:
        for d in range(5):
            want[d] += v[d]
    want = [w / 10 for w in want]
    assert np.allclose(class_representations(samples)[0].vector, want, atol=1e-9)


def test_class_representations_errors():
    with pytest.raises(ValueError):
        class_representations([[[1.0]], []])
    with pytest.raises(ValueError):
        class_representations([[[1.0, 2.0]], [[1.0]]])


def test_kmeans_errors():
    pts = np.zeros((3, 2))
    for k in (0, 4):
        with pytest.raises(ValueError):
            kmeans(pts, k)
    with pytest.raises(ValueError):
        kmeans(pts, 1, max_iters=0)


def test_k1_is_global_mean():
    pts = np.random.default_rng(2).normal(size=(30, 4))
    a, c = kmeans(pts, 1, seed=5)
    assert np.all(a == 0)
    assert np.allclose(c[0], pts.mean(axis=0))


def test_k_equals_c_is_bijective():
    pts = np.random.default_rng(3).normal(size=(12, 3))
    a, c = kmeans(pts, 12, seed=0)
    assert sorted(a.tolist()) == list(range(12))
    assert kmeans_objective(pts, a, c) == 0.0


def test_two_groups_match_brute_force():
    pts = [(0.0, 0.0), (1.0, 0.5), (0.3, 1.0), (10.0, 10.0), (11.0, 9.5), (10.5, 11.0)]
    sse, part = best_two_partition(pts)
    a, c = kmeans(np.array(pts), 2, seed=0)
    got = frozenset(np.flatnonzero(a == a[0]).tolist())
    want = part if 0 in part else frozenset(range(6)) - part
    assert got == want
    assert kmeans_objective(np.array(pts), a, c) == pytest.approx(sse, abs=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_objective_monotone_per_iteration(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(int(rng.integers(5, 60)), int(rng.integers(1, 6))))
    k = int(rng.integers(1, min(8, pts.shape[0]) + 1))
    trace = []
    kmeans(pts, k, seed=seed, on_iteration=lambda i, obj: trace.append(obj))
    assert trace
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_small_instances_near_exhaustive_optimum():
    # k-means is a local method; on tiny well-spread sets it should at least never beat the optimum
    rng = np.random.default_rng(9)
    for _ in range(5):
        pts = rng.normal(size=(6, 2))
        a, c = kmeans(pts, 3, seed=1)
        assert kmeans_objective(pts, a, c) >= all_partitions_kmeans_objective(pts.tolist(), 3) - 1e-9


@given(st.integers(0, 2**31 - 1), st.integers(2, 40), st.integers(1, 5))
def test_deterministic_and_partition(seed, n, k):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    k = min(k, n)
    a1, c1 = kmeans(pts, k, seed=seed)
    a2, c2 = kmeans(pts, k, seed=seed)
    assert np.array_equal(a1, a2) and np.array_equal(c1, c2)
    assert np.bincount(a1, minlength=k).min() >= 1


def test_duplicate_points_keep_all_clusters():
    pts = np.zeros((10, 2))
    pts[5:] = 1.0
    a, _ = kmeans(pts, 4, seed=0)
    assert len(set(a.tolist())) == 4


def test_build_taxonomy_properties():
    rng = np.random.default_rng(4)
    reps = [ClassRepresentation(i, v) for i, v in enumerate(rng.normal(size=(1000, 8)))]
    tax = build_taxonomy(reps, 5, seed=0)
    assert sum(len(m) for m in tax.members) == 1000
    assert sorted(c for m in tax.members for c in m) == list(range(1000))
    assert build_taxonomy(reps[:10], 1).assignment.tolist() == [0] * 10
    assert sorted(build_taxonomy(reps[:10], 10).assignment.tolist()) == list(range(10))


def test_taxonomy_json_round_trip():
    reps = [ClassRepresentation(i, v) for i, v in enumerate(np.random.default_rng(0).normal(size=(7, 3)))]
    tax = build_taxonomy(reps, 3, seed=2)
    doc = json.loads(tax.to_json())
    assert set(doc) == {"C", "K", "D", "assignment", "centroids"}
    back = Taxonomy.from_dict(doc)
    assert np.array_equal(back.assignment, tax.assignment)
    assert np.allclose(back.centroids, tax.centroids)


def test_taxonomy_rejects_empty_superclass():
    with pytest.raises(ValueError):
        Taxonomy(3, 2, np.zeros(3, dtype=int), np.zeros((2, 1)))
