import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peerbias.agglo import (AggloParams, SubsetData, cluster_subsets, ensure_min_classes, instability, ridge_fit,
                            union_all)
from peerbias.errors import DegenerateDataError
from peerbias.glm import fit_logistic, lambda_halfway


def planted(seed, slopes, n=150, d=3):
    """One subset per entry of ``slopes``; only the first feature matters."""
    rng = np.random.default_rng(seed)
    out = []
    for k, sl in enumerate(slopes):
        X = rng.normal(size=(n, d))
        p = 1 / (1 + np.exp(-sl * X[:, 0]))
        out.append(SubsetData(X, (rng.random(n) < p).astype(float), (k,)))
    return out


def stable_subset(n=200):
    return SubsetData(np.zeros((n, 3)), np.r_[np.ones(n // 2), np.zeros(n - n // 2)], (0,))


def test_stable_fixture_instability():
    assert instability(stable_subset(), seed=1) <= 0.02


def test_instability_deterministic_and_bounded():
    s = planted(1, [1.0])[0]
    a = instability(s, n_partitions=20, seed=5)
    assert a == instability(s, n_partitions=20, seed=5)
    assert 0.0 <= a <= 1.0


def test_instability_needs_both_classes():
    s = SubsetData(np.zeros((10, 1)), np.r_[np.ones(9), 0.0], (0,))
    with pytest.raises(DegenerateDataError):
        instability(s)


def test_instability_split_retry_exhausted():
    s = SubsetData(np.zeros((4, 1)), np.array([1.0, 1.0, 0.0, 0.0]), (0,))
    # a two-row training half is single-class a third of the time
    with pytest.raises(DegenerateDataError, match="split"):
        instability(s, held_out_frac=0.5, max_retries=1, seed=0)
    with pytest.raises(DegenerateDataError):
        instability(s, held_out_frac=1.0)


def test_ensure_min_classes_noop():
    subs = planted(2, [1.0, -1.0, 0.5])
    assert ensure_min_classes(subs) == subs


def test_ensure_min_classes_merges_all_zero_subset():
    subs = planted(3, [1.0, -1.0, 0.5])
    rng = np.random.default_rng(3)
    zeros = SubsetData(rng.normal(size=(30, 3)), np.zeros(30), (9,))
    out = ensure_min_classes(subs + [zeros])
    assert len(out) == 3
    hosts = [s for s in out if 9 in s.origin_ids]
    assert len(hosts) == 1 and len(hosts[0].origin_ids) == 2
    assert all(s.is_valid() for s in out)


def test_ensure_min_classes_pair_of_deficient():
    rng = np.random.default_rng(4)
    a = SubsetData(rng.normal(size=(6, 2)), np.array([1, 1, 0, 0, 0, 0.0]), (0,))
    b = SubsetData(rng.normal(size=(3, 2)), np.array([1, 0, 0.0]), (1,))
    c = SubsetData(rng.normal(size=(3, 2)), np.array([0, 1, 0.0]), (2,))
    out = ensure_min_classes([a, b, c])
    assert all(s.is_valid() for s in out)
    assert sorted(i for s in out for i in s.origin_ids) == [0, 1, 2]


def test_ensure_min_classes_impossible():
    s = SubsetData(np.zeros((5, 1)), np.r_[1.0, np.zeros(4)], (0,))
    with pytest.raises(DegenerateDataError):
        ensure_min_classes([s])


def test_single_subset_is_its_own_cluster():
    s = planted(5, [1.0])
    res = cluster_subsets(s, AggloParams(n_partitions=20), seed=0)
    assert res.clusters == [[0]]
    lam = lambda_halfway(s[0].X, s[0].y) * s[0].n
    np.testing.assert_allclose(res.fits[0].coefficients, fit_logistic(s[0].X, s[0].y, lam).coefficients)


def test_homogeneous_subsets_single_cluster():
    res = cluster_subsets(planted(0, [0.5] * 6), seed=0)
    assert res.clusters == [list(range(6))]


@pytest.mark.parametrize("seed", range(3))
def test_two_regimes_recovered(seed):
    res = cluster_subsets(planted(seed, [3, 3, 3, -3, -3, -3]), seed=seed)
    assert sorted(res.clusters) == [[0, 1, 2], [3, 4, 5]]


@settings(max_examples=8)
@given(st.integers(0, 10_000), st.lists(st.sampled_from([-3.0, 0.0, 2.0]), min_size=2, max_size=5))
def test_tree_and_acceptance_invariants(seed, slopes):
    subs = planted(seed, slopes, n=60)
    res = cluster_subsets(subs, AggloParams(n_partitions=15), seed=seed)
    n_leaves = len(res.subsets)
    assert len(res.tree) == 2 * n_leaves - 1
    assert sum(1 for t in res.tree if t.children is None) == n_leaves
    ids = sorted(i for c in res.clusters for i in c)
    assert ids == list(range(len(slopes)))
    for k in res.accepted_nodes:
        node = res.tree[k]
        assert union_all([res.subsets[i] for i in node.members]).is_valid()
        if node.children:
            assert node.instability <= min(res.tree[c].instability for c in node.children)
    # nodes expanded on the way down violate the acceptance rule
    accepted = set(res.accepted_nodes)
    stack = [res.root]
    while stack:
        k = stack.pop()
        if k in accepted:
            continue
        a, b = res.tree[k].children
        assert min(res.tree[a].instability, res.tree[b].instability) < res.tree[k].instability
        stack += [a, b]


def test_clustering_deterministic():
    subs = planted(7, [2, 2, -2, 0])
    a = cluster_subsets(subs, AggloParams(n_partitions=20), seed=3)
    b = cluster_subsets(subs, AggloParams(n_partitions=20), seed=3)
    assert a.to_json() == b.to_json()


def test_cluster_coefficients_shared_by_members():
    res = cluster_subsets(planted(8, [0.5] * 3), AggloParams(n_partitions=20), seed=0)
    for ids, fit in zip(res.clusters, res.fits):
        for i in ids:
            np.testing.assert_array_equal(res.coefficients_for(i), fit.coefficients)
    doc = res.to_json()
    assert set(doc) == {"clusters", "coefficients", "instabilities", "treeNewick"}
    assert doc["treeNewick"].endswith(";")


def test_ridge_fit_uses_halfway_penalty():
    s = planted(9, [1.0])[0]
    assert ridge_fit(s).lam == pytest.approx(s.n * lambda_halfway(s.X, s.y))
