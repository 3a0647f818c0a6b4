"""Shared-trunk MLP with one linear head per task, plus SGD and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from dtl import autodiff as ad
from dtl.errors import ContractError, MissingHeadError, ParseError, ShapeError

CHECKPOINT_MAGIC = b"DTLCKPT\x00"
CHECKPOINT_VERSION = 1


class MLP:
    """Affine+ReLU trunk followed by per-task affine heads.

    Parameters live in ``params``, an ordered name -> array registry:
    ``trunk.{i}.weight`` (fan_in x fan_out), ``trunk.{i}.bias``, then
    ``head.{task}.weight`` / ``head.{task}.bias`` in task insertion order.
    """

    def __init__(self, widths, tasks, params):
        self.widths = [int(w) for w in widths]
        self.tasks = {str(t): int(k) for t, k in dict(tasks).items()}
        self.params = dict(params)
        expected = list(_param_shapes(self.widths, self.tasks))
        if [n for n, _ in expected] != list(self.params):
            raise ContractError("parameter registry does not match layer/task spec")
        for name, shape in expected:
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.params[name].shape}")

    @classmethod
    def init(cls, widths, tasks, seed=0):
        if any(int(w) <= 0 for w in widths) or len(widths) < 1:
            raise ContractError("layer widths must be positive")
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in _param_shapes(widths, dict(tasks)):
            params[name] = _init_array(rng, shape)
        return cls(widths, tasks, params)

    def add_head(self, task, classes, seed=0):
        """Attach a freshly initialised head for a new task."""
        if task in self.tasks:
            raise ContractError(f"task {task!r} already has a head")
        rng = np.random.default_rng(seed)
        fan_in = self.widths[-1]
        self.tasks[task] = int(classes)
        self.params[f"head.{task}.weight"] = _init_array(rng, (fan_in, int(classes)))
        self.params[f"head.{task}.bias"] = np.zeros(int(classes))

    def copy(self):
        return MLP(self.widths, self.tasks, {k: v.copy() for k, v in self.params.items()})

    @property
    def names(self):
        return list(self.params)

    @property
    def num_params(self):
        return int(sum(v.size for v in self.params.values()))

    def trunk_names(self):
        return [n for n in self.params if n.startswith("trunk.")]

    def head_names(self, task):
        if task not in self.tasks:
            raise MissingHeadError(f"no head for task {task!r}")
        return [f"head.{task}.weight", f"head.{task}.bias"]

    def task_names(self, task):
        """Names of every parameter the forward pass for ``task`` touches."""
        return self.trunk_names() + self.head_names(task)

    def mask(self, names):
        """Flat 0/1 vector selecting ``names`` in registry order."""
        chosen = set(names)
        return np.concatenate([np.full(v.size, float(n in chosen)) for n, v in self.params.items()])

    def bind(self):
        """Fresh differentiable leaves for every parameter, in registry order."""
        return {n: ad.leaf(v) for n, v in self.params.items()}

    def flat(self):
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat(self, vec):
        pieces = ad.split_flat(vec, [v.shape for v in self.params.values()])
        self.params = {n: p.copy() for n, p in zip(self.params, pieces)}

    def forward(self, x, task, leaves=None):
        """Logits Node of shape (batch, classes[task])."""
        if task not in self.tasks:
            raise MissingHeadError(f"no head for task {task!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeError(f"batch of shape {x.shape} does not match input width {self.widths[0]}")
        if leaves is None:
            leaves = {n: ad.constant(v) for n, v in self.params.items()}
        ad.counters.bump("forward")
        h = ad.constant(x)
        for i in range(len(self.widths) - 1):
            h = ad.relu(ad.add_bias(ad.matmul(h, leaves[f"trunk.{i}.weight"]), leaves[f"trunk.{i}.bias"]))
        return ad.add_bias(ad.matmul(h, leaves[f"head.{task}.weight"]), leaves[f"head.{task}.bias"])

    def logits(self, x, task):
        """Plain numpy forward pass, no graph."""
        with ad.no_grad():
            return self.forward(x, task).value

    def predict(self, x, task):
        return np.argmax(self.logits(x, task), axis=1)


def _param_shapes(widths, tasks):
    for i in range(len(widths) - 1):
        yield f"trunk.{i}.weight", (int(widths[i]), int(widths[i + 1]))
        yield f"trunk.{i}.bias", (int(widths[i + 1]),)
    for task, k in tasks.items():
        yield f"head.{task}.weight", (int(widths[-1]), int(k))
        yield f"head.{task}.bias", (int(k),)


def _init_array(rng, shape):
    if len(shape) == 1:
        return np.zeros(shape)
    bound = 1.0 / math.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


# -- optimisation --------------------------------------------------------------

@dataclass
class TrainScheme:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 64
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ContractError(f"invalid train scheme {self}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ContractError(f"invalid train scheme {self}")
        if self.schedule not in ("cosine", "constant"):
            raise ContractError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step, total_steps):
        """Learning rate for ``step`` of ``total_steps`` (cosine annealed to zero)."""
        if self.schedule == "constant" or total_steps <= 0:
            return self.lr
        t = min(max(step, 0), total_steps)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * t / total_steps))

    def to_dict(self):
        return asdict(self)


class SGD:
    """Momentum SGD with coupled weight decay, updating an :class:`MLP` in place.

    ``trainable`` restricts updates (and decay) to a subset of parameter names;
    momentum buffers live as long as this object.
    """

    def __init__(self, model, scheme, total_steps, trainable=None):
        self.model = model
        self.scheme = scheme
        self.total_steps = total_steps
        self.mask = model.mask(model.names if trainable is None else trainable)
        self.buffer = None

    def step(self, grads, step_index):
        grads = np.asarray(grads, dtype=np.float64)
        theta = self.model.flat()
        if grads.shape != theta.shape:
            raise ShapeError(f"gradient of length {grads.size} for {theta.size} parameters")
        s = self.scheme
        d_p = (grads + s.weight_decay * theta) * self.mask
        if self.buffer is None or s.momentum == 0:
            self.buffer = d_p
        else:
            self.buffer = s.momentum * self.buffer + d_p
        lr = s.lr_at(step_index, self.total_steps)
        self.model.set_flat(theta - lr * self.buffer)
        return lr


def sgd_step(model, grads, scheme, step_index, state=None, total_steps=1):
    """Functional form of one :class:`SGD` update; pass ``state`` back in to keep momentum."""
    if state is None:
        state = SGD(model, scheme, total_steps)
    state.step(grads, step_index)
    return state


# -- checkpoints ---------------------------------------------------------------

def save(model, path):
    """Write ``model`` to ``path``.

    Layout: 8-byte magic ``DTLCKPT\\0``, uint32 LE version, uint32 LE header
    length, UTF-8 JSON header ``{"widths", "tasks", "params": [[name, shape]]}``,
    then every parameter as little-endian float64 in registry order.
    """
    header = json.dumps({
        "widths": model.widths,
        "tasks": [[t, k] for t, k in model.tasks.items()],
        "params": [[n, list(v.shape)] for n, v in model.params.items()],
    }, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in model.params.values())
    data = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + payload
    Path(path).write_bytes(data)


def load(path):
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    offset = 16 + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = data[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise ParseError(f"{path}: truncated at parameter {name}")
        params[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * n
    if offset != len(data):
        raise ParseError(f"{path}: {len(data) - offset} trailing bytes")
    return MLP(header["widths"], {t: k for t, k in header["tasks"]}, params)
