import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtl.data import (BenchmarkSpec, Dataset, batches, load_csv, make_gaussian_task,
                      make_transfer_benchmark, subsample)
from dtl.errors import ContractError, ParseError
from dtl.evaluate import accuracy
from dtl.nn import TrainScheme
from dtl.pipeline import pretrain


def test_dataset_rejects_nan_and_bad_labels():
    with pytest.raises(ContractError):
        Dataset(np.array([[np.nan, 0.0]]), np.array([0]), 2)
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 2)), np.array([0]), 2)


def test_gaussian_task_is_deterministic():
    a, _ = make_gaussian_task(3, 4, 10, 1.0, seed=7)
    b, _ = make_gaussian_task(3, 4, 10, 1.0, seed=7)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()


def test_gaussian_task_preconditions():
    with pytest.raises(ContractError):
        make_gaussian_task(1, 4, 10, 1.0, seed=0)
    with pytest.raises(ContractError):
        make_gaussian_task(3, 1, 10, 1.0, seed=0)


def test_gaussian_task_separable_limit():
    train, test = make_gaussian_task(4, 6, 20, 1e3, seed=1)
    # nearest class mean is a linear rule
    means = np.stack([train.x[train.y == c].mean(axis=0) for c in range(4)])
    pred = np.argmin(((test.x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    assert np.all(pred == test.y)


def test_splits_are_disjoint():
    train, test = make_gaussian_task(3, 4, 10, 1.0, seed=0)
    assert not np.intersect1d(train.rows, test.rows).size
    b = make_transfer_benchmark(BenchmarkSpec(seed=3))
    rows = [b[k].rows for k in b]
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            assert not np.intersect1d(rows[i], rows[j]).size


@pytest.mark.slow
def test_mlp_learns_ten_class_gaussian_task():
    train, test = make_gaussian_task(10, 16, 100, 3.0, seed=0)
    model = pretrain([16, 64, 64], train, TrainScheme(lr=0.05, epochs=30, batch_size=64, seed=0),
                     source_task="task")
    assert accuracy(model, "task", test) > 0.9


def test_benchmark_every_class_present_in_train():
    b = make_transfer_benchmark(BenchmarkSpec(seed=0))
    for key in ("source_train", "target_train", "piggyback_train"):
        assert np.all(b[key].class_counts() > 0)


def test_benchmark_target_is_small():
    spec = BenchmarkSpec(seed=0)
    b = make_transfer_benchmark(spec)
    full = spec.clusters * spec.target_per_cluster
    assert len(b["target_train"]) == round(spec.target_gamma * full)


def test_subsample_identity_and_exact_division():
    train, _ = make_gaussian_task(4, 3, 100, 1.0, seed=0)
    assert np.array_equal(subsample(train, 1.0, seed=3).rows, train.rows)
    assert np.all(subsample(train, 0.1, seed=3).class_counts() == 10)


def test_subsample_too_small():
    train, _ = make_gaussian_task(4, 3, 5, 1.0, seed=0)
    with pytest.raises(ContractError):
        subsample(train, 0.05, seed=0)
    with pytest.raises(ContractError):
        subsample(train, 0.0, seed=0)


@settings(max_examples=40, deadline=None)
@given(counts=st.lists(st.integers(20, 60), min_size=2, max_size=5),
       gamma=st.floats(0.05, 1.0), seed=st.integers(0, 1000))
def test_subsample_counts_property(counts, gamma, seed):
    y = np.concatenate([np.full(n, c) for c, n in enumerate(counts)])
    ds = Dataset(np.zeros((len(y), 2)), y, len(counts))
    out = subsample(ds, gamma, seed)
    got = out.class_counts()
    exact = gamma * np.array(counts)
    assert np.all(got >= np.floor(exact - 1e-9)) and np.all(got <= np.ceil(exact + 1e-9))
    assert len(np.unique(out.rows)) == len(out)


def test_subsample_histogram_flat():
    train, _ = make_gaussian_task(7, 3, 37, 1.0, seed=0)
    counts = subsample(train, 0.3, seed=1).class_counts()
    assert counts.max() - counts.min() <= 1


@settings(max_examples=30, deadline=None)
@given(g1=st.floats(0.2, 1.0), g2=st.floats(0.2, 1.0), seed=st.integers(0, 100))
def test_subsample_composes(g1, g2, seed):
    y = np.repeat(np.arange(3), 50)
    ds = Dataset(np.zeros((150, 2)), y, 3)
    twice = subsample(subsample(ds, g1, seed), g2, seed + 1).class_counts()
    direct = g1 * g2 * 50
    # two roundings of at most one each
    assert np.all(np.abs(twice - direct) <= 2)


def test_batches_partition_and_drop_last():
    ds = Dataset(np.zeros((23, 2)), np.zeros(23, dtype=int), 1)
    seen = np.concatenate([b.idx for b in batches(ds, 5, seed=0, epoch=0)])
    assert sorted(seen) == list(range(23))
    kept = [b.idx for b in batches(ds, 5, seed=0, epoch=0, drop_last=True)]
    assert all(len(i) == 5 for i in kept) and len(kept) == 4
    assert set(np.concatenate(kept)) < set(range(23))


def test_batches_seeded_order():
    ds = Dataset(np.zeros((50, 2)), np.zeros(50, dtype=int), 1)
    first = lambda e: np.concatenate([b.idx for b in batches(ds, 7, seed=4, epoch=e)])
    assert np.array_equal(first(0), first(0))
    assert not np.array_equal(first(0), first(1))
    with pytest.raises(ContractError):
        list(batches(ds, 0, seed=0, epoch=0))


def test_csv_round_trip(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("f1,f2,label\n1.5,-2,3\n0.25,4,3\n7,0,5\n")
    ds, stats = load_csv(path)
    assert np.array_equal(ds.provenance["raw"], [[1.5, -2.0], [0.25, 4.0], [7.0, 0.0]])
    assert ds.provenance["label_map"] == {3: 0, 5: 1}
    assert list(ds.y) == [0, 0, 1] and ds.num_classes == 2
    assert np.all(np.abs(ds.x.mean(axis=0)) < 1e-9)


def test_csv_test_split_uses_train_statistics(tmp_path):
    (tmp_path / "train.csv").write_text("0,0\n2,1\n4,0\n")
    (tmp_path / "test.csv").write_text("10,1\n12,0\n")
    train, stats = load_csv(tmp_path / "train.csv")
    test, _ = load_csv(tmp_path / "test.csv", stats)
    sd = np.std([0.0, 2.0, 4.0])
    assert np.allclose(test.x[:, 0], (np.array([10.0, 12.0]) - 2.0) / sd)
    assert test.split == "test"
    assert abs(test.x.mean()) > 1  # its own statistics would centre it


def test_csv_parse_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2,0\n3,x,1\n")
    with pytest.raises(ParseError, match="line 2"):
        load_csv(bad)
    bad.write_text("1,2,0\n3,1\n")
    with pytest.raises(ParseError, match="line 2"):
        load_csv(bad)
    bad.write_text("1,2,0.5\n")
    with pytest.raises(ParseError, match="line 1"):
        load_csv(bad)
    bad.write_text("a,b\n")
    with pytest.raises(ParseError):
        load_csv(bad)


def test_csv_unknown_test_label(tmp_path):
    (tmp_path / "train.csv").write_text("0,0\n1,1\n")
    (tmp_path / "test.csv").write_text("0,2\n")
    _, stats = load_csv(tmp_path / "train.csv")
    with pytest.raises(ParseError):
        load_csv(tmp_path / "test.csv", stats)
