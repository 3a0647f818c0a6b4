"""Scalar objectives: cross-entropy, distillation, fooling losses, gradient collision."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dtl import autodiff as ad
from dtl.errors import ContractError, DegenerateGradientError, InvalidLabelError

UNLEARN_KINDS = ("gc", "ngc", "rand", "unif", "neg")
RETAIN_KINDS = ("src-kd", "tgt-kd", "tgt-ce", "tgt-a-gem")


@dataclass
class DtlConfig:
    lam: float = 0.3
    unlearn: str = "gc"
    retain: str = "src-kd"
    chunks: int = 4
    workers: int = 1
    freeze_source_head: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.unlearn not in UNLEARN_KINDS:
            raise ContractError(f"unknown unlearning loss {self.unlearn!r}")
        if self.retain not in RETAIN_KINDS:
            raise ContractError(f"unknown retaining loss {self.retain!r}")
        if self.chunks < 2:
            raise ContractError("chunk count must be at least 2")
        if self.workers < 1 or self.chunks % self.workers:
            raise ContractError(f"{self.workers} workers cannot split {self.chunks} chunks")

    @property
    def retain_source(self):
        return "source" if self.retain == "src-kd" else "target"


def _check_labels(labels, k):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise InvalidLabelError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidLabelError(f"labels outside [0, {k})")
    return labels


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    labels = _check_labels(labels, logits.shape[1])
    return ad.neg(ad.mean(ad.gather(ad.log_softmax(logits), labels)))


def neg_loss(logits, labels):
    """Mean log-likelihood: cross-entropy with the sign flipped."""
    labels = _check_labels(labels, logits.shape[1])
    return ad.mean(ad.gather(ad.log_softmax(logits), labels))


def unif_loss(logits):
    """Mean KL(uniform || softmax(logits)) = -ln k - mean of all log-probabilities."""
    k = logits.shape[1]
    return ad.sub(ad.constant(-math.log(k)), ad.mean(ad.log_softmax(logits)))


def kd_from_logits(student_logits, teacher_logits):
    """Mean KL(teacher || student) at temperature 1; the teacher is a constant."""
    if student_logits.shape != teacher_logits.shape:
        raise ContractError(f"student {student_logits.shape} and teacher {teacher_logits.shape} heads differ")
    t = np.asarray(teacher_logits.value if isinstance(teacher_logits, ad.Node) else teacher_logits)
    with ad.no_grad():
        log_p = ad.log_softmax(ad.constant(t)).value
    p = np.exp(log_p)
    entropy_term = (p * log_p).sum(axis=1).mean()
    cross = ad.mean(ad.row_sum(ad.mul(ad.constant(p), ad.log_softmax(student_logits))))
    return ad.sub(ad.constant(entropy_term), cross)


def kd_loss(student, teacher, task, x, leaves=None):
    return kd_from_logits(student.forward(x, task, leaves), teacher.logits(x, task))


def random_labels(n, num_classes, seed):
    """Fixed relabelling for the random-target fooling loss, drawn once."""
    return np.random.default_rng(seed).integers(0, num_classes, size=n)


def rand_loss(logits, fixed_labels):
    """Cross-entropy against labels from :func:`random_labels`."""
    return cross_entropy(logits, fixed_labels)


# -- gradient collision --------------------------------------------------------

def chunk_slices(n, c):
    """Contiguous equal slices of a length-``n`` batch."""
    if c < 2:
        raise ContractError("need at least two chunks")
    if n % c:
        raise ContractError(f"batch of {n} is not divisible into {c} chunks")
    size = n // c
    return [slice(i * size, (i + 1) * size) for i in range(c)]


def pairwise_collision(vectors):
    """(1 / C(m,2)) * sum over unordered pairs of inner products, by explicit Gram matrix."""
    g = np.asarray(vectors, dtype=np.float64)
    m = g.shape[0]
    if m < 2:
        raise ContractError("need at least two gradients")
    gram = g @ g.T
    return float(gram[np.triu_indices(m, k=1)].sum() / math.comb(m, 2))


def per_sample_grads(model, task, x, y, names=None):
    """One flat cross-entropy gradient per row of ``x`` (rows of the returned matrix)."""
    names = model.names if names is None else names
    out = []
    for i in range(len(x)):
        leaves = model.bind()
        loss = cross_entropy(model.forward(x[i:i + 1], task, leaves), y[i:i + 1])
        out.append(ad.flatten(ad.grad(loss, [leaves[n] for n in names])))
    return np.array(out)


def gc_loss_full(model, task, x, y):
    """Mean pairwise inner product of per-sample gradients over a whole dataset.

    Evaluation only: cost is one backward pass per sample plus an N x N Gram matrix.
    """
    if len(x) < 2:
        raise ContractError("full collision loss needs at least two samples")
    return pairwise_collision(per_sample_grads(model, task, x, y))


def chunk_grads(model, task, x, y, c, leaves):
    """Chunk-mean cross-entropy gradients, each kept differentiable."""
    params = list(leaves.values())
    return [ad.grad(cross_entropy(model.forward(x[s], task, leaves), y[s]), params, build_graph=True)
            for s in chunk_slices(len(x), c)]


def _flat_dot(ga, gb):
    terms = [ad.vdot(a, b) for a, b in zip(ga, gb) if a.requires_grad or b.requires_grad]
    if not terms:
        return ad.constant(sum(float(np.vdot(a.value, b.value)) for a, b in zip(ga, gb)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def gc_loss_stochastic(model, task, x, y, c, leaves=None):
    """Mean inner product over the C(c,2) pairs of chunk-averaged gradients (a differentiable Node)."""
    leaves = model.bind() if leaves is None else leaves
    grads = chunk_grads(model, task, x, y, c, leaves)
    total = None
    for m in range(c):
        for n in range(m + 1, c):
            d = _flat_dot(grads[m], grads[n])
            total = d if total is None else ad.add(total, d)
    return ad.scale(total, 1.0 / math.comb(c, 2))


def ngc_loss(model, task, x, y, c, leaves=None):
    """Mean pairwise cosine similarity of chunk-averaged gradients."""
    leaves = model.bind() if leaves is None else leaves
    grads = chunk_grads(model, task, x, y, c, leaves)
    norms = []
    for m, g in enumerate(grads):
        sq = _flat_dot(g, g)
        if not sq.item() > 0.0:
            raise DegenerateGradientError(f"chunk {m} has a zero gradient; cosine is undefined")
        norms.append(ad.sqrt(sq))
    total = None
    for m in range(c):
        for n in range(m + 1, c):
            cos = ad.div(_flat_dot(grads[m], grads[n]), ad.mul(norms[m], norms[n]))
            total = cos if total is None else ad.add(total, cos)
    return ad.scale(total, 1.0 / math.comb(c, 2))


def combine(lam, retain, unlearn):
    """(1 - lam) * retain + lam * unlearn."""
    return ad.add(ad.scale(retain, 1.0 - lam), ad.scale(unlearn, lam))


def dtl_loss(config, model, teacher, source_task, target_task, source_batch,
             target_batch=None, fixed_labels=None, leaves=None):
    """The combined disposal objective as one differentiable Node.

    ``source_batch`` / ``target_batch`` are ``(x, y)`` pairs. Training uses the
    gradient engine for collision terms; this form is for evaluation and tests.
    """
    leaves = model.bind() if leaves is None else leaves
    xs, ys = source_batch
    if config.retain == "src-kd":
        retain = kd_from_logits(model.forward(xs, target_task, leaves), teacher.logits(xs, target_task))
    else:
        if target_batch is None:
            raise ContractError(f"retaining loss {config.retain!r} needs a target batch")
        xt, yt = target_batch
        if config.retain == "tgt-kd":
            retain = kd_from_logits(model.forward(xt, target_task, leaves), teacher.logits(xt, target_task))
        else:
            retain = cross_entropy(model.forward(xt, target_task, leaves), yt)
    kind = config.unlearn
    if kind == "gc":
        unlearn = gc_loss_stochastic(model, source_task, xs, ys, config.chunks, leaves)
    elif kind == "ngc":
        unlearn = ngc_loss(model, source_task, xs, ys, config.chunks, leaves)
    elif kind == "rand":
        if fixed_labels is None:
            raise ContractError("random-target loss needs the fixed relabelling")
        unlearn = rand_loss(model.forward(xs, source_task, leaves), fixed_labels)
    elif kind == "unif":
        unlearn = unif_loss(model.forward(xs, source_task, leaves))
    else:
        unlearn = neg_loss(model.forward(xs, source_task, leaves), ys)
    return combine(config.lam, retain, unlearn)
