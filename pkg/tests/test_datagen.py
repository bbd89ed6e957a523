import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgemsi import datagen


def test_blobs_counts_and_separation():
    ds = datagen.gen_blobs(5, 30, 3, 4.0, seed=0)
    assert len(ds) == 150 and ds.dim == 3
    assert np.bincount(ds.labels).tolist() == [30] * 5
    c = ds.centers
    dists = np.linalg.norm(c[:, None] - c[None], axis=-1)[np.triu_indices(5, 1)]
    assert dists.min() >= 4.0 - 1e-12


def test_blobs_deterministic():
    a = datagen.gen_blobs(3, 10, 2, 3.0, seed=42)
    b = datagen.gen_blobs(3, 10, 2, 3.0, seed=42)
    np.testing.assert_array_equal(a.inputs, b.inputs)


def test_split_per_class():
    ds = datagen.gen_blobs(4, 10, 2, 3.0, seed=1)
    train, test = datagen.split_per_class(ds, 3, seed=0)
    assert np.bincount(test.labels).tolist() == [3] * 4
    assert len(train) == 28


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_iid_partition_is_a_balanced_cover(L, M, seed):
    ds = datagen.gen_blobs(L, 12, 2, 3.0, seed=seed)
    plan = datagen.partition_iid(ds, M, seed)
    idx = np.concatenate(plan.assignments)
    assert sorted(idx.tolist()) == list(range(len(ds)))
    assert max(plan.sizes()) - min(plan.sizes()) <= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(1, 12), st.integers(1, 3))
def test_label_skew_limits_labels(L, M, k):
    k = min(k, L)
    ds = datagen.gen_blobs(L, 12, 2, 3.0, seed=0)
    plan = datagen.partition_label_skew(ds, M, k, seed=0)
    for shard in plan.assignments:
        assert len(set(ds.labels[shard].tolist())) <= k
    assert plan.coverage_warning == (M * k < L)


def test_share_fraction_nested_and_sized():
    ds = datagen.gen_blobs(4, 20, 2, 3.0, seed=0)
    plan = datagen.partition_label_skew(ds, 4, 1, seed=0)
    small = datagen.share_fraction(ds, plan, 0.05, seed=3)
    big = datagen.share_fraction(ds, plan, 0.2, seed=3)
    for i in range(4):
        assert len(small.assignments[i]) == 20 + 3 * 1
        assert len(big.assignments[i]) == 20 + 3 * 4
        assert set(small.assignments[i]) <= set(big.assignments[i])
    assert datagen.share_fraction(ds, plan, 0.0, seed=3).sizes() == plan.sizes()


def test_share_fraction_rejects_bad_p():
    ds = datagen.gen_blobs(2, 5, 2, 3.0)
    with pytest.raises(ValueError):
        datagen.share_fraction(ds, datagen.partition_iid(ds, 2), 1.5)


def test_csv_roundtrip(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x1,x2,label\n0.5,1.0,0\n-1,2,1\n3,3,2\n")
    ds = datagen.load_csv(path)
    assert ds.label_count == 3 and ds.dim == 2
    np.testing.assert_array_equal(ds.labels, [0, 1, 2])


def test_csv_bad_label(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("0.5,1.5\n")
    with pytest.raises(ValueError):
        datagen.load_csv(path)
