import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtl import autodiff as ad
from dtl import losses
from dtl import pipeline as P
from dtl.data import BenchmarkSpec, Dataset, make_gaussian_task, make_transfer_benchmark
from dtl.errors import ContractError, DegenerateGradientError, DivergenceError
from dtl.evaluate import accuracy
from dtl.losses import DtlConfig
from dtl.nn import TrainScheme

WIDTHS = [6, 24, 24]


@pytest.fixture(scope="module")
def tasks():
    src_train, src_test = make_gaussian_task(5, 6, 40, 3.0, seed=0, task="source")
    tgt_train, tgt_test = make_gaussian_task(3, 6, 10, 1.5, seed=1, task="target")
    return src_train, src_test, tgt_train, tgt_test


@pytest.fixture(scope="module")
def tl(tasks):
    src_train, _, tgt_train, _ = tasks
    model = P.pretrain(WIDTHS, src_train, TrainScheme(lr=0.05, epochs=15, batch_size=20, seed=0))
    return P.finetune(model, tgt_train, TrainScheme(lr=0.01, epochs=10, batch_size=8, seed=1))


def dispose_scheme(epochs=2, seed=3):
    return TrainScheme(lr=0.05, epochs=epochs, batch_size=20, seed=seed)


def test_pretrain_reaches_high_source_accuracy(tasks):
    src_train, src_test, _, _ = tasks
    model = P.pretrain(WIDTHS, src_train, TrainScheme(lr=0.05, epochs=20, batch_size=20, seed=0))
    assert accuracy(model, "source", src_test) > 0.9


def test_zero_epochs_is_identity(tl, tasks):
    src_train, _, tgt_train, _ = tasks
    before = tl.copy()
    m = P.finetune(tl.copy(), tgt_train, TrainScheme(epochs=0))
    assert m.flat().tobytes() == before.flat().tobytes()
    m = P.dispose(tl.copy(), tl, src_train, DtlConfig(lam=0.5), TrainScheme(epochs=0, batch_size=20))
    assert m.flat().tobytes() == before.flat().tobytes()


def test_lambda_zero_kd_stays_at_teacher(tl, tasks):
    src_train, src_test, _, _ = tasks
    m = P.dispose(tl.copy(), tl, src_train, DtlConfig(lam=0.0), dispose_scheme())
    kd = losses.kd_from_logits(ad.constant(m.logits(src_test.x, "target")),
                               tl.logits(src_test.x, "target")).item()
    assert kd < 1e-3


def test_neg_collapses_source_accuracy():
    b = make_transfer_benchmark(BenchmarkSpec(seed=0))
    widths = [16, 64, 64, 64]
    teacher = P.pretrain(widths, b["source_train"], TrainScheme(lr=0.05, epochs=20, batch_size=64, seed=0))
    teacher = P.finetune(teacher, b["target_train"], TrainScheme(lr=0.01, epochs=30, batch_size=8, seed=1))
    model = teacher.copy()
    try:
        P.dispose(model, teacher, b["source_train"], DtlConfig(lam=1.0, unlearn="neg"),
                  TrainScheme(lr=0.05, epochs=10, batch_size=64, seed=3))
    except DivergenceError:
        pass  # the norm guard stops the run; ``model`` holds the last state
    assert accuracy(model, "source", b["source_train"]) < 0.05


def test_records_decompose_and_advance(tl, tasks):
    src_train, _, tgt_train, _ = tasks
    for kind in ("gc", "rand", "unif", "neg", "ngc"):
        sink = P.RecordSink(io.StringIO())
        P.dispose(tl.copy(), tl, src_train, DtlConfig(lam=0.3, unlearn=kind), dispose_scheme(epochs=1),
                  sink=sink)
        assert sink.records
        for r in sink.records:
            assert abs(r.retain + r.unlearn - r.loss) <= 1e-12
        steps = [r.step for r in sink.records]
        assert steps == list(range(len(steps)))
        lines = sink.stream.getvalue().splitlines()
        assert "wall_time" not in json.loads(lines[0])


def test_chunked_kinds_drop_short_batches(tl, tasks):
    src_train = tasks[0]  # 200 samples, batch 24 leaves a tail of 8
    sink = P.RecordSink()
    P.dispose(tl.copy(), tl, src_train, DtlConfig(lam=0.3), TrainScheme(epochs=1, batch_size=24), sink=sink)
    assert len(sink.records) == 200 // 24
    with pytest.raises(ContractError):
        P.dispose(tl.copy(), tl, src_train, DtlConfig(lam=0.3, chunks=5), TrainScheme(epochs=1, batch_size=24))


def test_sink_rejects_backwards_records():
    sink = P.RecordSink()
    sink.emit(P.RunRecord("a", 0, 1, 0.0, 0.0, 0.0, 0.1))
    with pytest.raises(ContractError):
        sink.emit(P.RunRecord("a", 0, 1, 0.0, 0.0, 0.0, 0.1))
    sink.emit(P.RunRecord("b", 0, 0, 0.0, 0.0, 0.0, 0.1))


def test_runs_are_reproducible(tl, tasks):
    src_train, _, tgt_train, _ = tasks

    def run():
        sink = P.RecordSink(io.StringIO())
        m = P.dispose(tl.copy(), tl, src_train, DtlConfig(lam=0.2, retain="tgt-a-gem"), dispose_scheme(),
                      target_train=tgt_train, sink=sink)
        return m.flat().tobytes(), sink.stream.getvalue()

    assert run() == run()


def test_parallel_workers_track_sequential(tl, tasks):
    src_train = tasks[0]
    a = P.dispose(tl.copy(), tl, src_train, DtlConfig(lam=0.3, workers=1), dispose_scheme(epochs=1))
    b = P.dispose(tl.copy(), tl, src_train, DtlConfig(lam=0.3, workers=4), dispose_scheme(epochs=1))
    assert np.max(np.abs(a.flat() - b.flat())) < 1e-9


def test_trace_events_carry_step(tl, tasks):
    events = []
    P.dispose(tl.copy(), tl, tasks[0], DtlConfig(lam=0.3, workers=2), dispose_scheme(epochs=1),
              trace=events.append)
    assert {e["step"] for e in events} == set(range(10))


def test_freeze_flag_keeps_source_head(tl, tasks):
    src_train = tasks[0]
    m = P.dispose(tl.copy(), tl, src_train, DtlConfig(lam=0.5, freeze_source_head=True), dispose_scheme())
    for n in tl.head_names("source"):
        assert m.params[n].tobytes() == tl.params[n].tobytes()
    moved = P.dispose(tl.copy(), tl, src_train, DtlConfig(lam=0.5), dispose_scheme())
    assert any(not np.array_equal(moved.params[n], tl.params[n]) for n in tl.head_names("source"))


def test_target_retaining_kinds_need_target_data(tl, tasks):
    with pytest.raises(ContractError):
        P.dispose(tl.copy(), tl, tasks[0], DtlConfig(retain="tgt-ce"), dispose_scheme())
    for kind in ("tgt-ce", "tgt-kd", "tgt-a-gem"):
        P.dispose(tl.copy(), tl, tasks[0], DtlConfig(lam=0.2, retain=kind), dispose_scheme(epochs=1),
                  target_train=tasks[2])


def saturated_model():
    """Every sample labelled 0 and predicted 0 with probability exactly 1: all gradients vanish."""
    ds = Dataset(np.ones((40, 6)), np.zeros(40, dtype=int), 2, "source")
    m = P.pretrain(WIDTHS, ds, TrainScheme(epochs=0))
    m.add_head("target", 2)
    m.set_flat(np.zeros(m.num_params))
    m.params["head.source.bias"][:] = [1e3, -1e3]
    return m, ds


def test_ngc_degenerate_surfaces():
    m, ds = saturated_model()
    with pytest.raises(DegenerateGradientError):
        P.dispose(m, m.copy(), ds, DtlConfig(lam=0.5, unlearn="ngc"), dispose_scheme(epochs=1))


def test_divergence_names_step(tl, tasks):
    with pytest.raises(DivergenceError) as info:
        P.dispose(tl.copy(), tl, tasks[0], DtlConfig(lam=1.0, unlearn="gc"),
                  TrainScheme(lr=1e4, epochs=3, batch_size=20, schedule="constant"))
    assert info.value.step is not None
    assert f"step {info.value.step}" in str(info.value)


def test_agem_examples():
    g = np.array([1.0, 0.0])
    assert np.array_equal(P.agem_update(g, np.array([0.0, 1.0])), g)
    r = np.array([0.3, -2.0])
    assert not P.agem_update(-r, r).any()
    with pytest.raises(DegenerateGradientError):
        # negative inner product while the squared norm underflows to zero
        P.agem_update(np.array([-1e300]), np.array([1e-170]))
    with pytest.raises(ContractError):
        P.agem_update(np.ones(2), np.ones(3))




@settings(max_examples=200, deadline=None)
@given(data=st.data())
def test_agem_properties(data):
    n = data.draw(st.integers(1, 8))
    g = np.array(data.draw(st.lists(st.floats(-1e3, 1e3), min_size=n, max_size=n)))
    r = np.array(data.draw(st.lists(st.floats(-1e3, 1e3), min_size=n, max_size=n)))
    if np.dot(g, r) < 0 and np.dot(r, r) == 0:
        return
    out = P.agem_update(g, r)
    scale = max(1.0, float(np.linalg.norm(g) * np.linalg.norm(r)))
    assert np.dot(out, r) >= -1e-12 * scale
    again = P.agem_update(out, r)
    assert np.allclose(again, out, rtol=0, atol=1e-9 * max(1.0, np.abs(out).max()))


def test_fool_head_touches_only_the_head(tl, tasks):
    src_train = tasks[0]
    m = P.fool_head(tl.copy(), src_train, TrainScheme(lr=0.05, epochs=20, batch_size=20, seed=0))
    assert accuracy(m, "source", src_train) < 0.05
    for n in m.trunk_names() + m.head_names("target"):
        assert m.params[n].tobytes() == tl.params[n].tobytes()


def embed(ds, offset, d=12):
    x = np.zeros((len(ds), d))
    x[:, offset:offset + ds.dim] = ds.x
    return Dataset(x, ds.y, ds.num_classes, ds.task, ds.split, ds.rows)


@pytest.mark.parametrize("teacher_width", [24, 48])
def test_distill_to_fresh_fails_to_transfer(teacher_width):
    # target inputs vary only along directions the source data never visits
    src_train, _ = make_gaussian_task(5, 6, 40, 3.0, seed=0, task="source")
    tgt_train, tgt_test = make_gaussian_task(3, 6, 10, 3.0, seed=50, task="target")
    src_train, tgt_train, tgt_test = embed(src_train, 0), embed(tgt_train, 6), embed(tgt_test, 6)
    widths = [12, teacher_width, teacher_width]
    teacher = P.pretrain(widths, src_train, TrainScheme(lr=0.05, epochs=15, batch_size=20, seed=0))
    teacher = P.finetune(teacher, tgt_train, TrainScheme(lr=0.01, epochs=20, batch_size=8, seed=1))
    sink = P.RecordSink()
    student = P.distill_to_fresh(teacher, [12, 24, 24], src_train,
                                 TrainScheme(lr=0.05, epochs=10, batch_size=20, seed=5), sink=sink)
    first = np.mean([r.loss for r in sink.records[:10]])
    last = np.mean([r.loss for r in sink.records[-10:]])
    assert last < first
    assert accuracy(teacher, "target", tgt_test) > 0.9
    assert accuracy(student, "target", tgt_test) < accuracy(teacher, "target", tgt_test) - 0.3
