"""Readouts: accuracy, piggyback (PL) accuracy, threshold membership inference, Hessian trace."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from dtl import autodiff as ad
from dtl.data import Dataset, subsample
from dtl.errors import ContractError
from dtl.losses import cross_entropy
from dtl.nn import MLP, TrainScheme

MIA_STRATEGIES = ("softmax", "mentr", "loss", "gradnorm")


def accuracy(model: MLP, task: str, ds: Dataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(model.predict(ds.x, task) == ds.y))


@dataclass
class PlProtocol:
    """Fine-tune a copy of ``base`` on a piggyback task and report its test accuracy.

    ``fresh_head=None`` picks automatically: reuse the head when ``base``
    already has one for ``task``, otherwise attach a new one.
    """

    base: MLP
    train: Dataset
    test: Dataset
    scheme: TrainScheme
    task: str = "piggyback"
    gamma: float = 1.0
    fresh_head: bool | None = None

    def __post_init__(self):
        if self.train.rows is not None and self.test.rows is not None and \
                np.intersect1d(self.train.rows, self.test.rows).size and self.train.split == self.test.split:
            raise ContractError("piggyback train and test splits overlap")


def pl_model(protocol: PlProtocol) -> MLP:
    from dtl.pipeline import train_ce

    model = protocol.base.copy()
    fresh = protocol.fresh_head
    if fresh is None:
        fresh = protocol.task not in model.tasks
    if fresh:
        if protocol.task in model.tasks:
            # replace the existing head with a new one
            keep = {t: k for t, k in model.tasks.items() if t != protocol.task}
            params = {n: v for n, v in model.params.items() if not n.startswith(f"head.{protocol.task}.")}
            model = MLP(model.widths, keep, params)
        model.add_head(protocol.task, protocol.train.num_classes, seed=protocol.scheme.seed + 7919)
    elif model.tasks.get(protocol.task) != protocol.train.num_classes:
        raise ContractError(f"head {protocol.task!r} does not match {protocol.train.num_classes} classes")
    train = protocol.train if protocol.gamma >= 1.0 else subsample(protocol.train, protocol.gamma,
                                                                  protocol.scheme.seed)
    return train_ce(model, protocol.task, train, protocol.scheme, stage="piggyback")


def pl_accuracy(protocol: PlProtocol) -> float:
    """Test accuracy after piggybacking; ``protocol.base`` is left untouched."""
    return accuracy(pl_model(protocol), protocol.task, protocol.test)


# -- membership inference -------------------------------------------------------

@dataclass
class MiaScore:
    strategy: str
    members: np.ndarray
    nonmembers: np.ndarray
    auroc: float
    best_accuracy: float


def auroc(pos, neg) -> float:
    """Probability a positive outscores a negative (Mann-Whitney, ties count half)."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ContractError("AUROC needs scores from both groups")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


def best_threshold_accuracy(pos, neg) -> float:
    """Best balanced-set accuracy of the rule "member iff score >= t" over all thresholds."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    scores = np.concatenate([pos, neg])
    is_member = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="stable")
    s, m = scores[order], is_member[order]
    tp = np.cumsum(m)
    fp = np.cumsum(1 - m)
    # only cut where the score changes, so ties fall on one side
    cut = np.r_[s[1:] != s[:-1], True]
    correct = tp[cut] + (neg.size - fp[cut])
    best = max(float(correct.max()), float(neg.size))  # threshold above everything
    return best / (pos.size + neg.size)


def _probs(model, task, x):
    z = model.logits(x, task)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def modified_entropy(p, y, eps=1e-30):
    """-(1 - p_y) log p_y - sum_{i != y} p_i log(1 - p_i), per row."""
    rows = np.arange(len(y))
    py = np.clip(p[rows, y], eps, None)
    rest = -p * np.log(np.clip(1 - p, eps, None))
    rest[rows, y] = 0.0
    return -(1 - py) * np.log(py) + rest.sum(axis=1)


def sample_scores(model, task, ds: Dataset, strategy) -> np.ndarray:
    """Per-sample membership scores; higher means more member-like."""
    if strategy not in MIA_STRATEGIES:
        raise ContractError(f"unknown MIA strategy {strategy!r}")
    if len(ds) == 0:
        raise ContractError("empty split")
    if strategy == "gradnorm":
        out = np.empty(len(ds))
        for i in range(len(ds)):
            leaves = model.bind()
            loss = cross_entropy(model.forward(ds.x[i:i + 1], task, leaves), ds.y[i:i + 1])
            out[i] = -np.linalg.norm(ad.flatten(ad.grad(loss, [leaves[n] for n in model.task_names(task)])))
        return out
    p = _probs(model, task, ds.x)
    if strategy == "softmax":
        return p.max(axis=1)
    if strategy == "mentr":
        return -modified_entropy(p, ds.y)
    return np.log(np.clip(p[np.arange(len(ds)), ds.y], 1e-300, None))


def mia_scores(model, task, members: Dataset, nonmembers: Dataset, strategy) -> MiaScore:
    if len(members) == 0 or len(nonmembers) == 0:
        raise ContractError("membership inference needs non-empty member and non-member splits")
    pos = sample_scores(model, task, members, strategy)
    neg = sample_scores(model, task, nonmembers, strategy)
    return MiaScore(strategy, pos, neg, auroc(pos, neg), best_threshold_accuracy(pos, neg))


# -- curvature -----------------------------------------------------------------

def _loss_and_grads(model, task, ds, names):
    leaves = model.bind()
    params = [leaves[n] for n in names]
    loss = cross_entropy(model.forward(ds.x, task, leaves), ds.y)
    return params, ad.grad(loss, params, build_graph=True)


def hutchinson(hvp, n, probes=100, seed=0) -> float:
    """Mean of v' H v over Rademacher probes ``v``; ``hvp(v)`` returns H v."""
    if probes < 1:
        raise ContractError("need at least one probe")
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(probes):
        v = rng.choice([-1.0, 1.0], size=n)
        total += float(v @ hvp(v))
    return total / probes


def hessian_trace(model, task, ds: Dataset, probes=100, seed=0, names=None) -> float:
    """Hutchinson estimate of tr(H) of the mean cross-entropy; one gradient graph serves every probe."""
    if probes < 1:
        raise ContractError("need at least one probe")
    names = model.task_names(task) if names is None else list(names)
    params, grads = _loss_and_grads(model, task, ds, names)
    return hutchinson(lambda v: ad.hvp_from_grads(grads, params, v), ad.sum_sizes(params), probes, seed)


def exact_hessian_trace(model, task, ds: Dataset, names=None) -> float:
    """tr(H) from one HVP per basis vector."""
    names = model.task_names(task) if names is None else list(names)
    params, grads = _loss_and_grads(model, task, ds, names)
    n = ad.sum_sizes(params)
    total = 0.0
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        total += float(ad.hvp_from_grads(grads, params, e)[i])
    return total
