"""Gradient of the stochastic collision loss as a sum of c Hessian-vector products.

For chunk gradients g_1..g_c the gradient of (1/C(c,2)) sum_{m<n} g_m.g_n is
(1/C(c,2)) sum_m H_m (G - g_m) with G = sum_n g_n, so one gathered total and
one HVP per chunk replace the C(c,2) pairwise backward passes.

:func:`gc_grad_parallel` runs the same computation on simulated workers
(threads) that meet at a gather barrier and a reduce barrier.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from dtl import autodiff as ad
from dtl.errors import AbortedComputation, ContractError
from dtl.losses import chunk_slices, cross_entropy

# chunk_loss(m, leaves) -> scalar Node for chunk m
ChunkLoss = Callable[[int, Sequence[ad.Node]], ad.Node]


@dataclass
class GcResult:
    loss: float
    grad: np.ndarray
    chunk_sum: np.ndarray


def op_counters():
    """Forward passes, reverse sweeps, HVPs and pairwise sweeps since the last reset."""
    return ad.counters.snapshot()


def reset_counters():
    ad.counters.reset()


def model_chunk_loss(model, task, x, y, c, names=None) -> tuple[ChunkLoss, list[str]]:
    """Chunk-mean cross-entropy closure over the parameters ``names`` of ``model``."""
    names = model.names if names is None else list(names)
    slices = chunk_slices(len(x), c)
    frozen = {n: ad.constant(v) for n, v in model.params.items() if n not in set(names)}

    def chunk_loss(m, leaves):
        bound = dict(frozen)
        bound.update(zip(names, leaves))
        s = slices[m]
        return cross_entropy(model.forward(x[s], task, bound), y[s])

    return chunk_loss, names


def _collision_value(flats: Sequence[np.ndarray]) -> float:
    c = len(flats)
    total = 0.0
    for m in range(c):
        for n in range(m + 1, c):
            total += float(np.dot(flats[m], flats[n]))
    return total / math.comb(c, 2)


def gc_grad_chunks(chunk_loss: ChunkLoss, param_values: Sequence[np.ndarray], c: int) -> GcResult:
    """Single-threaded reference: c first-order sweeps, one gather, c HVPs."""
    if c < 2:
        raise ContractError("need at least two chunks")
    leaves = [ad.leaf(v) for v in param_values]
    grads, flats = [], []
    for m in range(c):
        g = ad.grad(chunk_loss(m, leaves), leaves, build_graph=True)
        grads.append(g)
        flats.append(ad.flatten(g))
    total = flats[0].copy()
    for f in flats[1:]:
        total = total + f
    out = None
    for m in range(c):
        h = ad.hvp_from_grads(grads[m], leaves, total - flats[m])
        out = h if out is None else out + h
    return GcResult(_collision_value(flats), out / math.comb(c, 2), total)


def gc_grad_sequential(model, task, x, y, c, names=None) -> np.ndarray:
    """Flat collision-loss gradient over ``names`` (default: every parameter)."""
    chunk_loss, names = model_chunk_loss(model, task, x, y, c, names)
    return gc_grad_chunks(chunk_loss, [model.params[n] for n in names], c).grad


class Collective:
    """In-process stand-in for all_gather / all_reduce between ``k`` workers.

    Slots are indexed by worker id; every collective ends at a barrier, so a
    failed worker aborts the barrier and wakes everyone else.
    """

    def __init__(self, k, schedule=None, timeout=60.0):
        self.k = k
        self.schedule = list(range(k)) if schedule is None else list(schedule)
        if sorted(self.schedule) != list(range(k)):
            raise ContractError(f"reduce schedule {self.schedule} is not a permutation of 0..{k - 1}")
        self._barrier = threading.Barrier(k, timeout=timeout)
        self._slots = [None] * k

    def abort(self):
        self._barrier.abort()

    def _exchange(self, worker, payload):
        self._slots[worker] = payload
        try:
            self._barrier.wait()
            snapshot = list(self._slots)
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise AbortedComputation("a peer worker failed") from None
        return snapshot

    def all_gather(self, worker, payload):
        return self._exchange(worker, payload)

    def all_reduce(self, worker, payload):
        parts = self._exchange(worker, payload)
        out = None
        for w in self.schedule:
            out = parts[w] if out is None else out + parts[w]
        return out


def gc_grad_parallel_chunks(chunk_loss: ChunkLoss, param_values: Sequence[np.ndarray], c: int, k: int,
                            schedule=None, trace=None) -> GcResult:
    """Collision-loss gradient computed by ``k`` simulated workers owning c/k chunks each.

    ``trace`` may be a callable receiving one dict per event
    (worker, phase in {grad, gather, hvp, reduce}, norm).
    """
    if c < 2:
        raise ContractError("need at least two chunks")
    if k < 1 or c % k:
        raise ContractError(f"{k} workers cannot split {c} chunks")
    per = c // k
    comm = Collective(k, schedule)
    results = [None] * k
    errors = []
    log_lock = threading.Lock()

    def emit(worker, phase, vec):
        if trace is not None:
            with log_lock:
                trace({"worker": worker, "phase": phase, "norm": float(np.linalg.norm(vec))})

    def work(w):
        try:
            # private snapshot of the parameters
            leaves = [ad.leaf(np.array(v, copy=True)) for v in param_values]
            own = range(w * per, (w + 1) * per)
            grads, flats = {}, {}
            for m in own:
                grads[m] = ad.grad(chunk_loss(m, leaves), leaves, build_graph=True)
                flats[m] = ad.flatten(grads[m])
                emit(w, "grad", flats[m])
            gathered = comm.all_gather(w, [flats[m] for m in own])
            chunk_flats = [f for part in gathered for f in part]
            total = chunk_flats[0].copy()
            for f in chunk_flats[1:]:
                total = total + f
            emit(w, "gather", total)
            partial = None
            for m in own:
                h = ad.hvp_from_grads(grads[m], leaves, total - flats[m])
                emit(w, "hvp", h)
                partial = h if partial is None else partial + h
            reduced = comm.all_reduce(w, partial)
            emit(w, "reduce", reduced)
            results[w] = (reduced, chunk_flats, total)
        except AbortedComputation:
            pass
        except BaseException as exc:  # noqa: BLE001 - forwarded to the caller
            errors.append((w, exc))
            comm.abort()

    threads = [threading.Thread(target=work, args=(w,), name=f"gc-worker-{w}") for w in range(k)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        w, exc = errors[0]
        raise AbortedComputation(f"worker {w} failed: {exc!r}") from exc
    reduced, chunk_flats, total = results[0]
    return GcResult(_collision_value(chunk_flats), reduced / math.comb(c, 2), total)


def gc_grad_parallel(model, task, x, y, c, workers, names=None, schedule=None, trace=None) -> np.ndarray:
    chunk_loss, names = model_chunk_loss(model, task, x, y, c, names)
    return gc_grad_parallel_chunks(chunk_loss, [model.params[n] for n in names], c, workers,
                                   schedule=schedule, trace=trace).grad


def jsonl_trace(stream):
    """A ``trace`` callback writing one JSON object per line to ``stream``."""
    def write(event):
        stream.write(json.dumps(event, sort_keys=True) + "\n")
    return write
