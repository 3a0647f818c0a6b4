import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtl import autodiff as ad
from dtl import evaluate as E
from dtl import oracle
from dtl import pipeline as P
from dtl.data import Dataset, make_gaussian_task
from dtl.errors import ContractError
from dtl.nn import MLP, TrainScheme

from conftest import random_mlp


class FixedModel:
    """Predicts a fixed label per row, for hand-counted accuracy."""

    def __init__(self, pred):
        self.pred = np.asarray(pred)

    def predict(self, x, task):
        return self.pred[: len(x)]


def test_accuracy_hand_count():
    y = np.array([0, 0, 1, 1, 1, 2, 2, 2, 2, 0])
    pred = np.array([0, 1, 1, 1, 0, 2, 2, 0, 2, 0])
    # confusion diagonal: class 0 -> 2, class 1 -> 2, class 2 -> 3
    ds = Dataset(np.zeros((10, 2)), y, 3)
    assert E.accuracy(FixedModel(pred), "t", ds) == pytest.approx(0.7)


def test_accuracy_chance_and_memoriser():
    train, test = make_gaussian_task(4, 8, 250, 1.0, seed=0)
    model = MLP.init([8, 16], {"task": 4}, seed=0)
    assert abs(E.accuracy(model, "task", test) - 0.25) < 0.1
    assert E.accuracy(FixedModel(train.y), "t", train) == 1.0


def test_auroc_examples():
    assert E.auroc([3, 4], [1, 2]) == 1.0
    assert E.auroc([1, 2], [3, 4]) == 0.0
    assert E.auroc([1, 1], [1, 1]) == 0.5
    assert E.auroc([2, 0], [1]) == 0.5
    with pytest.raises(ContractError):
        E.auroc([], [1.0])


scores = st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30)


@settings(max_examples=100, deadline=None)
@given(pos=scores, neg=scores)
def test_auroc_negation_symmetry(pos, neg):
    a = E.auroc(pos, neg)
    b = E.auroc(-np.array(pos), -np.array(neg))
    assert abs(a + b - 1.0) < 1e-12


@settings(max_examples=100, deadline=None)
@given(pos=scores, neg=scores)
def test_auroc_invariant_under_monotone_transform(pos, neg):
    # an exactly representable strictly increasing map: cube of the rank among distinct values
    uniq = np.unique(pos + neg)
    f = lambda s: np.searchsorted(uniq, s).astype(float) ** 3 - 5.0
    assert E.auroc(pos, neg) == E.auroc(f(pos), f(neg))
    assert E.auroc(pos, neg) == E.auroc(4.0 * np.array(pos), 4.0 * np.array(neg))


def test_best_threshold_accuracy():
    assert E.best_threshold_accuracy([3, 4], [1, 2]) == 1.0
    assert E.best_threshold_accuracy([1, 1], [1, 1]) == 0.5
    assert E.best_threshold_accuracy([1, 5], [2, 3]) == 0.75


def test_modified_entropy_formula():
    p = np.array([[0.7, 0.2, 0.1]])
    want = -(0.3) * np.log(0.7) - 0.2 * np.log(0.8) - 0.1 * np.log(0.9)
    assert E.modified_entropy(p, np.array([0]))[0] == pytest.approx(want, rel=1e-14)
    # confident and correct is the lowest entropy
    assert E.modified_entropy(np.array([[1.0, 0.0]]), np.array([0]))[0] < 1e-20


def test_gradnorm_score_matches_direct_gradient():
    model = random_mlp(0)
    ds = Dataset(np.random.default_rng(0).normal(size=(3, 4)), np.array([0, 2, 1]), 3)
    got = E.sample_scores(model, "t", ds, "gradnorm")
    for i in range(3):
        leaves = model.bind()
        from dtl.losses import cross_entropy
        loss = cross_entropy(model.forward(ds.x[i:i + 1], "t", leaves), ds.y[i:i + 1])
        g = ad.flatten(ad.grad(loss, list(leaves.values())))
        assert got[i] == pytest.approx(-np.linalg.norm(g), rel=1e-12)


def test_mia_needs_both_splits():
    model = random_mlp(0)
    ds = Dataset(np.zeros((2, 4)), np.array([0, 1]), 3)
    empty = ds.subset([])
    with pytest.raises(ContractError):
        E.mia_scores(model, "t", ds, empty, "loss")
    with pytest.raises(ContractError):
        E.mia_scores(model, "t", ds, ds, "nope")


def test_mia_untrained_and_memoriser():
    members, nonmembers = make_gaussian_task(4, 8, 60, 0.5, seed=1, task="t")
    fresh = MLP.init([8, 32], {"t": 4}, seed=0)
    for s in E.MIA_STRATEGIES:
        assert abs(E.mia_scores(fresh, "t", members, nonmembers, s).auroc - 0.5) <= 0.1
    # 40 points in 32 dimensions with barely separated classes: fit exactly, generalise poorly
    members, nonmembers = make_gaussian_task(4, 32, 10, 0.1, seed=1, task="t")
    memo = P.pretrain([32, 128], members, TrainScheme(lr=0.05, epochs=200, batch_size=8, seed=0), source_task="t")
    assert E.accuracy(memo, "t", members) == 1.0
    assert E.mia_scores(memo, "t", members, nonmembers, "loss").auroc > 0.9


@pytest.mark.parametrize("probes", [1, 10, 500])
def test_hutchinson_on_diagonal_quadratic(probes):
    a = np.array([2.0, 4.0])
    theta = ad.leaf(np.array([0.3, -0.1]))
    loss = ad.scale(ad.vdot(theta, ad.mul(ad.constant(a), theta)), 0.5)
    grads = ad.grad(loss, [theta], build_graph=True)
    est = E.hutchinson(lambda v: ad.hvp_from_grads(grads, [theta], v), 2, probes, seed=0)
    # v' diag(a) v = sum(a) for every sign vector
    assert est == pytest.approx(6.0, abs=1e-12)


def test_hutchinson_converges_on_dense_matrix():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(6, 6))
    h = m @ m.T
    est = E.hutchinson(lambda v: h @ v, 6, 20000, seed=1)
    assert abs(est - np.trace(h)) < 0.02 * np.trace(h)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_hessian_trace_close_to_exact(seed):
    model = random_mlp(seed, widths=(3, 5), classes=3)
    assert model.num_params <= 50
    rng = np.random.default_rng(seed)
    ds = Dataset(rng.normal(size=(20, 3)), rng.integers(0, 3, 20), 3)
    exact = E.exact_hessian_trace(model, "t", ds)
    h = oracle_hessian(model, ds)
    assert exact == pytest.approx(np.trace(h), rel=1e-6)
    est = E.hessian_trace(model, "t", ds, probes=1000, seed=0)
    assert abs(est - exact) <= 0.05 * abs(exact)


def oracle_hessian(model, ds):
    value_fn, grad_fn, theta = oracle.model_functions(model, "t", ds.x, ds.y)
    return oracle.exact_hessian(grad_fn, theta)


def test_hessian_trace_needs_probes():
    model = random_mlp(0)
    ds = Dataset(np.zeros((2, 4)), np.array([0, 1]), 3)
    with pytest.raises(ContractError):
        E.hessian_trace(model, "t", ds, probes=0)


@pytest.fixture(scope="module")
def pretrained():
    train, test = make_gaussian_task(4, 6, 50, 2.0, seed=0, task="source")
    model = P.pretrain([6, 24], train, TrainScheme(lr=0.05, epochs=15, batch_size=20, seed=0))
    return model, train, test


def test_pl_is_side_effect_free(pretrained):
    model, train, test = pretrained
    before = {n: v.tobytes() for n, v in model.params.items()}
    E.pl_accuracy(E.PlProtocol(model, train, test, TrainScheme(lr=0.01, epochs=2, batch_size=8), task="source"))
    E.pl_accuracy(E.PlProtocol(model, train, test, TrainScheme(lr=0.01, epochs=2, batch_size=8), task="source",
                               fresh_head=True))
    assert {n: v.tobytes() for n, v in model.params.items()} == before
    assert list(model.tasks) == ["source"]


def test_pl_on_own_task_recovers_accuracy(pretrained):
    model, train, test = pretrained
    base = E.accuracy(model, "source", test)
    pl = E.pl_accuracy(E.PlProtocol(model, train, test, TrainScheme(lr=0.01, epochs=5, batch_size=8),
                                    task="source"))
    assert abs(pl - base) < 0.05


def test_pl_head_policy(pretrained):
    model, train, test = pretrained
    scheme = TrainScheme(epochs=0)
    reused = E.pl_model(E.PlProtocol(model, train, test, scheme, task="source"))
    assert reused.params["head.source.weight"].tobytes() == model.params["head.source.weight"].tobytes()
    fresh = E.pl_model(E.PlProtocol(model, train, test, scheme, task="source", fresh_head=True))
    assert fresh.params["head.source.weight"].tobytes() != model.params["head.source.weight"].tobytes()
    other = E.pl_model(E.PlProtocol(model, train.with_task("new"), test.with_task("new"), scheme, task="new"))
    assert "new" in other.tasks


def test_pl_rejects_overlapping_splits(pretrained):
    model, train, _ = pretrained
    with pytest.raises(ContractError):
        E.PlProtocol(model, train, train, TrainScheme())


def test_pl_subsample_ratio(pretrained):
    model, train, test = pretrained
    steps = []
    from dtl import pipeline
    real = pipeline.train_ce

    def spy(m, task, ds, scheme, **kw):
        steps.append(len(ds))
        return real(m, task, ds, scheme, **kw)

    pipeline.train_ce = spy
    try:
        E.pl_model(E.PlProtocol(model, train, test, TrainScheme(epochs=0), task="source", gamma=0.1))
    finally:
        pipeline.train_ce = real
    assert steps == [20]
