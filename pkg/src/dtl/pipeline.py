"""Training stages: pretrain, fine-tune, knowledge disposal, piggyback and distillation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, asdict, field

import numpy as np

from dtl import autodiff as ad
from dtl import gc_engine, losses
from dtl.data import Dataset, batches
from dtl.errors import ContractError, DegenerateGradientError, DivergenceError
from dtl.losses import DtlConfig
from dtl.nn import MLP, SGD, TrainScheme

LOSS_LIMIT = 1e6
NORM_BLOWUP = 1e4


@dataclass
class RunRecord:
    stage: str
    epoch: int
    step: int
    loss: float
    retain: float
    unlearn: float
    lr: float

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class RecordSink:
    """Collects :class:`RunRecord` objects, optionally streaming them as JSON lines.

    Wall-clock timings go to a separate stream so the record stream stays
    reproducible bit for bit.
    """

    stream: object = None
    timing_stream: object = None
    records: list = field(default_factory=list)

    def emit(self, rec: RunRecord, elapsed: float | None = None):
        if self._last is not None and rec.stage == self._last[0] and \
                (rec.epoch, rec.step) <= self._last[1:]:
            raise ContractError("run records must advance within a stage")
        self._last = (rec.stage, rec.epoch, rec.step)
        self.records.append(rec)
        if self.stream is not None:
            self.stream.write(rec.to_json() + "\n")
        if self.timing_stream is not None and elapsed is not None:
            self.timing_stream.write(json.dumps({"stage": rec.stage, "step": rec.step,
                                                 "wall_time": elapsed}) + "\n")

    _last: tuple = None


def _guard(loss, step, stage):
    if not math.isfinite(loss) or abs(loss) > LOSS_LIMIT:
        raise DivergenceError(f"{stage}: loss {loss!r} at step {step}", step=step)


def _steps_per_epoch(n, batch_size, drop_last):
    return n // batch_size if drop_last else math.ceil(n / batch_size)


def train_ce(model: MLP, task: str, ds: Dataset, scheme: TrainScheme, stage="train",
             trainable=None, sink: RecordSink | None = None) -> MLP:
    """Minibatch SGD on mean cross-entropy for one task; updates ``model`` in place."""
    trainable = model.task_names(task) if trainable is None else trainable
    total = scheme.epochs * _steps_per_epoch(len(ds), scheme.batch_size, False)
    opt = SGD(model, scheme, total, trainable)
    names = list(trainable)
    step = 0
    t0 = time.perf_counter()
    for epoch in range(scheme.epochs):
        for b in batches(ds, scheme.batch_size, scheme.seed, epoch):
            leaves = model.bind()
            loss = losses.cross_entropy(model.forward(b.x, task, leaves), b.y)
            _guard(loss.item(), step, stage)
            g = ad.grad(loss, [leaves[n] for n in names])
            flat = _scatter(model, dict(zip(names, g)))
            lr = opt.step(flat, step)
            if sink is not None:
                sink.emit(RunRecord(stage, epoch, step, loss.item(), loss.item(), 0.0, lr),
                          time.perf_counter() - t0)
            step += 1
    return model


def _scatter(model, grads_by_name):
    """Flat gradient over the full registry, zeros where no gradient is given."""
    return np.concatenate([
        grads_by_name[n].value.ravel() if n in grads_by_name else np.zeros(v.size)
        for n, v in model.params.items()
    ])


def pretrain(widths, source_train, scheme, source_task="source", sink=None) -> MLP:
    """Fresh model with a single source head, trained on the source task."""
    model = MLP.init(widths, {source_task: source_train.num_classes}, seed=scheme.seed)
    return train_ce(model, source_task, source_train, scheme, "pretrain", sink=sink)


def finetune(model, target_train, scheme, target_task="target", sink=None) -> MLP:
    """Transfer learning: attach a target head if needed, then train trunk and head on the target."""
    if target_task not in model.tasks:
        model.add_head(target_task, target_train.num_classes, seed=scheme.seed)
    return train_ce(model, target_task, target_train, scheme, "finetune", sink=sink)


def train_scratch(widths, target_train, scheme, target_task="target", sink=None) -> MLP:
    """Target-only reference model trained from random initialisation."""
    model = MLP.init(widths, {target_task: target_train.num_classes}, seed=scheme.seed)
    return train_ce(model, target_task, target_train, scheme, "scratch", sink=sink)


def agem_update(grad_dtl, grad_retain):
    """Project ``grad_dtl`` so that it no longer opposes ``grad_retain``."""
    grad_dtl = np.asarray(grad_dtl, dtype=np.float64)
    grad_retain = np.asarray(grad_retain, dtype=np.float64)
    if grad_dtl.shape != grad_retain.shape:
        raise ContractError("gradients differ in length")
    dot = float(np.dot(grad_dtl, grad_retain))
    if dot >= 0:
        return grad_dtl
    ref = float(np.dot(grad_retain, grad_retain))
    if ref == 0.0:
        raise DegenerateGradientError("retaining gradient is zero; cannot project")
    return grad_dtl - (dot / ref) * grad_retain


class _Cycle:
    """Endless seeded minibatches over a (small) dataset."""

    def __init__(self, ds, batch_size, seed):
        self.ds, self.bs, self.seed = ds, min(batch_size, len(ds)), seed
        self.epoch = 0
        self._it = iter(())

    def next(self):
        for _ in range(2):
            for b in self._it:
                return b
            self._it = batches(self.ds, self.bs, self.seed, self.epoch, drop_last=True)
            self.epoch += 1
        raise ContractError("empty dataset")


def dispose(model: MLP, teacher: MLP, source_train: Dataset, config: DtlConfig, scheme: TrainScheme,
            target_train: Dataset | None = None, source_task="source", target_task="target",
            sink: RecordSink | None = None, stage="dispose", trace=None) -> MLP:
    """Knowledge disposal: minimise (1 - lam) * retain + lam * unlearn, updating ``model`` in place.

    The unlearning batch always comes from the source data. The collision
    gradient goes through :mod:`dtl.gc_engine`; everything else through
    ordinary autodiff. ``trace`` (a callable taking one dict per event)
    routes the collision gradient through the simulated workers and logs
    each of their phases.
    """
    lam = config.lam
    if config.retain != "src-kd" and target_train is None:
        raise ContractError(f"retaining loss {config.retain!r} needs target data")
    chunked = config.unlearn in ("gc", "ngc")
    if chunked and scheme.batch_size % config.chunks:
        raise ContractError(f"batch size {scheme.batch_size} not divisible into {config.chunks} chunks")
    trainable = list(dict.fromkeys(model.trunk_names() + model.head_names(source_task)
                                   + model.head_names(target_task)))
    if config.freeze_source_head:
        trainable = [n for n in trainable if n not in model.head_names(source_task)]
    total = scheme.epochs * _steps_per_epoch(len(source_train), scheme.batch_size, chunked)
    opt = SGD(model, scheme, total, trainable)
    fixed = losses.random_labels(len(source_train), source_train.num_classes, scheme.seed) \
        if config.unlearn == "rand" else None
    target_iter = _Cycle(target_train, scheme.batch_size, scheme.seed) if target_train is not None else None
    agem_iter = _Cycle(target_train, scheme.batch_size, scheme.seed + 1) if config.retain == "tgt-a-gem" else None
    # floor at 1 so an all-zero start does not trip the guard on its first step
    norm_limit = NORM_BLOWUP * max(float(np.linalg.norm(model.flat())), 1.0)
    names = model.names
    step = 0
    t0 = time.perf_counter()
    for epoch in range(scheme.epochs):
        for b in batches(source_train, scheme.batch_size, scheme.seed, epoch, drop_last=chunked):
            if chunked and len(b.y) % config.chunks:
                continue
            leaves = model.bind()
            params = [leaves[n] for n in names]
            # retaining term
            if config.retain == "src-kd":
                r = losses.kd_from_logits(model.forward(b.x, target_task, leaves),
                                          teacher.logits(b.x, target_task))
            else:
                tb = target_iter.next()
                logits = model.forward(tb.x, target_task, leaves)
                if config.retain == "tgt-kd":
                    r = losses.kd_from_logits(logits, teacher.logits(tb.x, target_task))
                else:
                    r = losses.cross_entropy(logits, tb.y)
            g_retain = ad.flatten(ad.grad(r, params))
            # unlearning term
            if config.unlearn == "gc":
                chunk_loss, _ = gc_engine.model_chunk_loss(model, source_task, b.x, b.y, config.chunks)
                values = [model.params[n] for n in names]
                if config.workers > 1 or trace is not None:
                    res = gc_engine.gc_grad_parallel_chunks(chunk_loss, values, config.chunks, config.workers,
                                                            trace=_stepped(trace, step))
                else:
                    res = gc_engine.gc_grad_chunks(chunk_loss, values, config.chunks)
                u_value, g_unlearn = res.loss, res.grad
            else:
                if config.unlearn == "ngc":
                    u = losses.ngc_loss(model, source_task, b.x, b.y, config.chunks, leaves)
                else:
                    logits = model.forward(b.x, source_task, leaves)
                    if config.unlearn == "rand":
                        u = losses.rand_loss(logits, fixed[b.idx])
                    elif config.unlearn == "unif":
                        u = losses.unif_loss(logits)
                    else:
                        u = losses.neg_loss(logits, b.y)
                u_value = u.item()
                g_unlearn = ad.flatten(ad.grad(u, params))
            g = (1.0 - lam) * g_retain + lam * g_unlearn
            if config.retain == "tgt-a-gem":
                ab = agem_iter.next()
                ref_leaves = model.bind()
                ref = losses.cross_entropy(model.forward(ab.x, target_task, ref_leaves), ab.y)
                g_ref = ad.flatten(ad.grad(ref, [ref_leaves[n] for n in names]))
                g = agem_update(g, g_ref)
            retain_term = (1.0 - lam) * r.item()
            unlearn_term = lam * u_value
            loss = retain_term + unlearn_term
            if config.unlearn == "neg":
                if not math.isfinite(loss):
                    raise DivergenceError(f"{stage}: loss {loss!r} at step {step}", step=step)
            else:
                _guard(loss, step, stage)
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"{stage}: non-finite gradient at step {step}", step=step)
            lr = opt.step(g, step)
            norm = float(np.linalg.norm(model.flat()))
            if not math.isfinite(norm) or norm > norm_limit:
                raise DivergenceError(f"{stage}: parameter norm {norm:.3g} exploded at step {step}", step=step)
            if sink is not None:
                sink.emit(RunRecord(stage, epoch, step, loss, retain_term, unlearn_term, lr),
                          time.perf_counter() - t0)
            step += 1
    return model


def _stepped(trace, step):
    if trace is None:
        return None
    return lambda event: trace(dict(event, step=step))


def fool_head(model: MLP, source_train: Dataset, scheme: TrainScheme, source_task="source",
              threshold=0.05, sink=None) -> MLP:
    """Last-layer fooling: retrain the source head alone to predict the next class, ``(y + 1) mod k``.

    The trunk is frozen; training stops as soon as source train accuracy
    falls below ``threshold``. Ascending the log-likelihood instead only
    reaches a constant prediction (accuracy 1/k) with a linear head, so a
    shifted labelling is used. Returns ``model`` (updated in place).
    """
    heads = model.head_names(source_task)
    wrong = (source_train.y + 1) % source_train.num_classes
    total = scheme.epochs * _steps_per_epoch(len(source_train), scheme.batch_size, False)
    opt = SGD(model, scheme, total, heads)
    step = 0
    for epoch in range(scheme.epochs):
        for b in batches(source_train, scheme.batch_size, scheme.seed, epoch):
            if _accuracy(model, source_task, source_train) < threshold:
                return model
            leaves = model.bind()
            u = losses.cross_entropy(model.forward(b.x, source_task, leaves), wrong[b.idx])
            g = ad.grad(u, [leaves[n] for n in heads])
            lr = opt.step(_scatter(model, dict(zip(heads, g))), step)
            if sink is not None:
                sink.emit(RunRecord("fool", epoch, step, u.item(), 0.0, u.item(), lr))
            step += 1
    return model


def _accuracy(model, task, ds):
    return float(np.mean(model.predict(ds.x, task) == ds.y))


def distill_to_fresh(teacher: MLP, widths, source_train: Dataset, scheme: TrainScheme,
                     target_task="target", source_task="source", sink=None) -> MLP:
    """Train a freshly initialised student to match the teacher's target head on source inputs."""
    tasks = {source_task: teacher.tasks[source_task], target_task: teacher.tasks[target_task]}
    student = MLP.init(widths, tasks, seed=scheme.seed)
    trainable = student.task_names(target_task)
    total = scheme.epochs * _steps_per_epoch(len(source_train), scheme.batch_size, False)
    opt = SGD(student, scheme, total, trainable)
    step = 0
    for epoch in range(scheme.epochs):
        for b in batches(source_train, scheme.batch_size, scheme.seed, epoch):
            leaves = student.bind()
            loss = losses.kd_from_logits(student.forward(b.x, target_task, leaves),
                                         teacher.logits(b.x, target_task))
            _guard(loss.item(), step, "distill")
            g = ad.grad(loss, [leaves[n] for n in trainable])
            lr = opt.step(_scatter(student, dict(zip(trainable, g))), step)
            if sink is not None:
                sink.emit(RunRecord("distill", epoch, step, loss.item(), loss.item(), 0.0, lr))
            step += 1
    return student
