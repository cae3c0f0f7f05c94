import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divconq.dataset import SyntheticSpec, generate_synthetic
from divconq.metrics import nmi
from divconq.partition import (Partition, PartitionError, bisect, iou_matrix,
                               kmeans, kmeans_objective, label_grouping,
                               random_bisect, recluster_and_match,
                               solve_assignment)
from oracles import (best_permutation_score, best_permutations,
                     exhaustive_kmeans_optimum, iou_brute)


# --- k-means -------------------------------------------------------------------

def test_k1_single_cluster(rng):
    X = rng.normal(size=(15, 3))
    p = kmeans(X, 1)
    assert np.all(p.assignment == 0)
    assert np.isclose(p.objective, X.var(0).sum() * len(X))


def test_two_pairs():
    X = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.0, 10.1]])
    p = kmeans(X, 2, seed=3)
    assert p.assignment[0] == p.assignment[1] != p.assignment[2] == p.assignment[3]
    assert np.isclose(p.objective, exhaustive_kmeans_optimum(X, 2))


def test_identical_points():
    X = np.ones((6, 2))
    for k in (1, 2, 3):
        p = kmeans(X, k)
        assert p.objective == 0.0 and np.all(p.sizes >= 1)


@pytest.mark.parametrize("case", range(24))
def test_matches_exhaustive_optimum(case):
    rng = np.random.default_rng(case)
    n = int(rng.integers(3, 11))
    k = int(rng.integers(1, 4))
    X = rng.normal(size=(n, 2))
    p = kmeans(X, k, seed=case, n_init=20)
    ref = exhaustive_kmeans_optimum(X, k)
    assert p.objective == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_objective_monotone_and_deterministic(rng):
    X = rng.normal(size=(200, 4))
    p, hist = kmeans(X, 6, seed=1, return_history=True)
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
    q = kmeans(X, 6, seed=1)
    assert np.array_equal(p.assignment, q.assignment)
    assert np.isclose(p.objective, kmeans_objective(X, p.assignment))


def test_kmeans_errors():
    with pytest.raises(PartitionError):
        kmeans(np.zeros((2, 2)), 3)
    with pytest.raises(PartitionError):
        kmeans(np.array([[0.0, np.nan], [1.0, 1.0]]), 1)


def test_empty_cluster_repair_keeps_k():
    # duplicated points make empty clusters likely during Lloyd iterations
    X = np.vstack([np.zeros((8, 2)), np.ones((2, 2))])
    for s in range(10):
        p = kmeans(X, 4, seed=s)
        assert p.k == 4 and np.all(p.sizes >= 1)


# --- bisection ---------------------------------------------------------------------

def test_bisect_two_points():
    root = Partition(np.zeros(2, dtype=int), 1)
    child = bisect(root, np.array([[0.0], [1.0]]))
    assert child.k == 2 and child.depth == 1
    assert child.sizes.tolist() == [1, 1]
    assert child.assignment.tolist() == [0, 1]


def test_bisect_recovers_generator_modes():
    ds = generate_synthetic(SyntheticSpec(class_count=1, samples_per_class=60,
                                          feature_dim=4, mode_count_per_class=2,
                                          intra_mode_sigma=0.05,
                                          inter_class_sigma=3.0, seed=2))
    root = Partition(np.zeros(len(ds), dtype=int), 1)
    child = bisect(root, ds.features, seed=0)
    assert nmi(child.assignment, ds.modes) == 1.0


def test_bisect_lineage_and_containment(rng):
    X = rng.normal(size=(60, 3))
    p = kmeans(X, 3, seed=0)
    c = bisect(p, X, seed=1)
    assert c.lineage.tolist() == [0, 0, 1, 1, 2, 2]
    for i in range(p.k):
        assert np.all(c.assignment[p.members(i)] // 2 == i)


def test_bisect_singleton_cluster():
    p = Partition(np.array([0, 0, 0, 1]), 2)
    c = bisect(p, np.array([[0.0], [1.0], [2.0], [5.0]]))
    assert c.assignment[3] == 2
    assert c.empty.tolist() == [False, False, False, True]


@pytest.mark.parametrize("seed", range(5))
def test_random_bisect_balanced(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 3, size=41)
    a[:3] = [0, 1, 2]
    p = random_bisect(Partition(a, 3), seed=seed)
    for i in range(3):
        s = p.sizes[2 * i:2 * i + 2]
        assert abs(int(s[0]) - int(s[1])) <= 1
        assert np.all(p.assignment[a == i] // 2 == i)


# --- IoU and assignment ---------------------------------------------------------------

def test_iou_identity_and_disjoint():
    a = Partition(np.array([0, 0, 1, 1, 2]), 3)
    M = iou_matrix(a, a)
    assert np.all(np.diag(M) == 1.0)
    assert M[0, 1] == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_iou_set_oracle(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 6))
    a, b = rng.integers(0, k, 30), rng.integers(0, k, 30)
    M = iou_matrix(Partition(a, k), Partition(b, k))
    assert np.allclose(M, iou_brute(a, b, k), atol=1e-15)


def test_iou_errors():
    with pytest.raises(PartitionError):
        iou_matrix(Partition([0, 1], 2), Partition([0, 0], 1))


def test_assignment_examples():
    assert np.array_equal(solve_assignment(np.eye(4)), np.eye(4))
    assert np.array_equal(solve_assignment(np.full((5, 5), 0.3)), np.eye(5))
    with pytest.raises(PartitionError):
        solve_assignment(np.ones((2, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_assignment_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 7))
    S = rng.uniform(size=(k, k))
    A = solve_assignment(S)
    assert np.isclose((A * S).sum(), best_permutation_score(S.tolist()))


def test_assignment_tie_break_is_lexicographic():
    rng = np.random.default_rng(0)
    for _ in range(30):
        k = int(rng.integers(2, 6))
        S = rng.integers(0, 2, size=(k, k)).astype(float)
        perm = tuple(np.argmax(solve_assignment(S), axis=1))
        assert perm == min(best_permutations(S.tolist()))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 31 - 1))
def test_assignment_beats_random_permutations(k, seed):
    rng = np.random.default_rng(seed)
    S = rng.uniform(size=(k, k))
    A = solve_assignment(S)
    assert np.all(A.sum(0) == 1) and np.all(A.sum(1) == 1)
    best = (A * S).sum()
    for _ in range(1000):
        p = rng.permutation(k)
        assert S[np.arange(k), p].sum() <= best + 1e-12


# --- reclustering ----------------------------------------------------------------

def test_recluster_unchanged_embeddings(rng):
    X = np.vstack([rng.normal(c, 0.05, size=(20, 2))
                   for c in ([0, 0], [5, 0], [0, 5], [5, 5])])
    old = kmeans(X, 4, seed=0)
    rec = recluster_and_match(X, old, seed=123)
    assert rec.consistency_nmi == 1.0 and rec.retained == 1.0
    assert np.array_equal(rec.partition.assignment, old.assignment)


def test_recluster_relabels_permuted_partition(rng):
    X = np.vstack([rng.normal(c, 0.05, size=(15, 2))
                   for c in ([0, 0], [5, 0], [0, 5])])
    old = kmeans(X, 3, seed=0)
    perm = np.array([2, 0, 1])
    shuffled = Partition(perm[old.assignment], 3, 2, np.array([0, 0, 1]))
    rec = recluster_and_match(X, shuffled, seed=9)
    assert np.array_equal(rec.partition.assignment, shuffled.assignment)
    assert rec.partition.depth == 2
    assert rec.partition.lineage.tolist() == [0, 0, 1]


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_recluster_nmi_in_range(k, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 3))
    old = Partition(np.arange(30) % k, k)
    rec = recluster_and_match(X, old, seed=seed)
    assert 0.0 <= rec.consistency_nmi <= 1.0
    assert 0.0 <= rec.retained <= 1.0
    # the matching maximises total IoU
    M = iou_matrix(old, Partition(rec.partition.assignment, k))
    assert np.trace(M) >= best_permutation_score(M.tolist()) - 1e-12


# --- other --------------------------------------------------------------------------

def test_label_grouping():
    p = label_grouping([3, 3, 1, 0, 7], {0: 5, 1: 5, 3: 2, 7: 9})
    assert p.k == 3 and p.assignment.tolist() == [0, 0, 1, 1, 2]
    with pytest.raises(PartitionError):
        label_grouping([0, 1], {0: 0})


def test_partition_roundtrip_and_validation():
    p = Partition(np.array([0, 1, 1]), 2, 1, np.array([0, 0]))
    q = Partition.from_dict(p.to_dict())
    assert np.array_equal(p.assignment, q.assignment) and q.depth == 1
    with pytest.raises(PartitionError):
        Partition(np.array([0, 2]), 2)


def test_children_of_distinct_parents_never_share(rng):
    X = rng.normal(size=(50, 2))
    p = kmeans(X, 4, seed=0)
    c = bisect(p, X, seed=0)
    parents = {}
    for child, parent in zip(c.assignment, p.assignment):
        assert parents.setdefault(child, parent) == parent
