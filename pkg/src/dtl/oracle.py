"""Slow, independent references used to check the engine.

Nothing here goes through the HVP rearrangement in :mod:`dtl.gc_engine`;
the only shared layer is the primitive autodiff.
"""

from __future__ import annotations

import math

import numpy as np

from dtl import autodiff as ad
from dtl.errors import ContractError
from dtl.gc_engine import model_chunk_loss

MAX_EXACT_PARAMS = 64


def fd_gradient(lossfn, theta, step=1e-5):
    """Central differences of a scalar function ``lossfn(theta) -> float``."""
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    theta = np.array(theta, dtype=np.float64)
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e.flat[i] = step
        out.flat[i] = (lossfn(theta + e) - lossfn(theta - e)) / (2 * step)
    return out


def fd_hvp(gradfn, theta, v, eps=1e-4):
    """(grad(theta + eps v) - grad(theta - eps v)) / 2 eps."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return (gradfn(theta + eps * v) - gradfn(theta - eps * v)) / (2 * eps)


def exact_hessian(gradfn, theta, step=1e-5):
    """Dense Hessian from central differences of an autodiff gradient, symmetrised.

    ``gradfn(theta) -> flat gradient``. Limited to 64 parameters.
    """
    theta = np.asarray(theta, dtype=np.float64)
    n = theta.size
    if n > MAX_EXACT_PARAMS:
        raise ContractError(f"exact Hessian limited to {MAX_EXACT_PARAMS} parameters, got {n}")
    h = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        h[:, i] = (gradfn(theta + e) - gradfn(theta - e)) / (2 * step)
    return 0.5 * (h + h.T)


def naive_gc_grad_chunks(chunk_loss, param_values, c):
    """Differentiate every pairwise product g_m.g_n separately and add them up."""
    leaves = [ad.leaf(v) for v in param_values]
    grads = [ad.grad(chunk_loss(m, leaves), leaves, build_graph=True) for m in range(c)]
    total = None
    for m in range(c):
        for n in range(m + 1, c):
            terms = [ad.vdot(a, b) for a, b in zip(grads[m], grads[n]) if a.requires_grad or b.requires_grad]
            if not terms:
                continue
            pair = terms[0]
            for t in terms[1:]:
                pair = ad.add(pair, t)
            ad.counters.bump("pair_sweeps")
            g = ad.flatten(ad.grad(pair, leaves))
            total = g if total is None else total + g
    if total is None:
        total = np.zeros(int(sum(np.size(v) for v in param_values)))
    return total / math.comb(c, 2)


def naive_gc_grad(model, task, x, y, c, names=None):
    chunk_loss, names = model_chunk_loss(model, task, x, y, c, names)
    return naive_gc_grad_chunks(chunk_loss, [model.params[n] for n in names], c)


def model_functions(model, task, x, y, names=None):
    """(value_fn, grad_fn, theta0) for mean cross-entropy over the flat vector of ``names``."""
    from dtl.losses import cross_entropy

    names = model.names if names is None else list(names)
    shapes = [model.params[n].shape for n in names]
    frozen = {n: ad.constant(v) for n, v in model.params.items() if n not in set(names)}

    def build(theta, requires_grad):
        pieces = ad.split_flat(theta, shapes)
        leaves = [ad.leaf(p, requires_grad=requires_grad) for p in pieces]
        bound = dict(frozen)
        bound.update(zip(names, leaves))
        return cross_entropy(model.forward(x, task, bound), y), leaves

    def value_fn(theta):
        with ad.no_grad():
            return build(theta, False)[0].item()

    def grad_fn(theta):
        loss, leaves = build(theta, True)
        return ad.flatten(ad.grad(loss, leaves))

    theta0 = np.concatenate([model.params[n].ravel() for n in names])
    return value_fn, grad_fn, theta0
