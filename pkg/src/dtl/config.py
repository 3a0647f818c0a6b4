"""Run configuration: one YAML file drives every stage.

Unknown keys are rejected so typos fail loudly. ``--set a.b=value``
overrides are applied to the nested mapping before validation; values
are parsed as YAML scalars, so ``--set dtl.lam=0.25`` gives a float.
"""

from __future__ import annotations

import copy
import json
import re
from pathlib import Path

import yaml

from dtl.data import BenchmarkSpec
from dtl.errors import ContractError
from dtl.losses import DtlConfig
from dtl.nn import TrainScheme

STAGES = ("pretrain", "finetune", "dispose", "piggyback")

DEFAULTS = {
    "seed": 0,
    "data": {
        "kind": "synthetic",
        "benchmark": {},  # BenchmarkSpec overrides
        "csv": {},  # {source_train, source_test, target_train, target_test, piggyback_train, piggyback_test}
    },
    "model": {"hidden": [64, 64, 64]},
    "schemes": {
        stage: {"lr": lr, "epochs": epochs, "batch_size": bs, "momentum": 0.9, "weight_decay": 1e-4,
                "schedule": "cosine"}
        for stage, lr, epochs, bs in [("pretrain", 0.05, 20, 64), ("finetune", 0.01, 30, 8),
                                      ("dispose", 0.05, 10, 64), ("piggyback", 0.01, 30, 8)]
    },
    "dtl": {"lam": 0.1, "unlearn": "gc", "retain": "src-kd", "chunks": 4, "workers": 1,
            "freeze_source_head": False},
    "piggyback": {"tasks": ["source", "piggyback"], "gammas": [0.05], "fresh_head": None},
    "sweep": {"lambdas": [round(0.1 * i, 1) for i in range(11)], "unlearn": ["gc", "rand", "unif", "neg"],
              "retain": ["src-kd"]},
    "trace": False,
}

class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-3`` as a float (plain YAML 1.1 wants ``1.0e-3``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _load(text):
    return yaml.load(text, Loader=_Loader)


# stage seeds are offsets from the top-level seed
SEED_OFFSETS = {"data": 0, "pretrain": 0, "finetune": 1, "scratch": 2, "dispose": 3, "piggyback": 4}


def _merge(base, extra, path=""):
    out = copy.deepcopy(base)
    for key, value in (extra or {}).items():
        where = f"{path}{key}"
        if key not in base:
            raise ContractError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("benchmark", "csv") and isinstance(value, dict):
            out[key] = _merge(base[key], value, where + ".")
        elif isinstance(base[key], dict) and not isinstance(value, dict):
            raise ContractError(f"config key {where!r} must be a mapping")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text):
    """``"a.b=1"`` -> (["a", "b"], 1)."""
    if "=" not in text:
        raise ContractError(f"override {text!r} is not KEY=VALUE")
    key, raw = text.split("=", 1)
    if not key.strip():
        raise ContractError(f"override {text!r} has an empty key")
    try:
        value = _load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ContractError(f"override {text!r}: {exc}") from None
    return key.strip().split("."), value


def apply_override(cfg, keys, value):
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ContractError(f"unknown config key {'.'.join(keys)!r}")
        node = node[k]
    last = keys[-1]
    free = node is cfg["data"].get("benchmark") or node is cfg["data"].get("csv")
    if not isinstance(node, dict) or (last not in node and not free):
        raise ContractError(f"unknown config key {'.'.join(keys)!r}")
    node[last] = value


def read_file(path):
    """YAML config, or a manifest written by a previous run (its stored config is used)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ContractError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = _load(text) or {}
    except yaml.YAMLError as exc:
        raise ContractError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ContractError(f"config {path} must be a mapping")
    if "manifest_version" in raw:
        raw = raw["config"]
    return raw


def resolve(raw=None, overrides=()):
    """Defaults <- file contents <- overrides, then validated."""
    cfg = _merge(DEFAULTS, raw or {})
    for keys, value in overrides:
        apply_override(cfg, keys, value)
    validate(cfg)
    return cfg


def validate(cfg):
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ContractError("seed must be a non-negative integer")
    if cfg["data"]["kind"] not in ("synthetic", "csv"):
        raise ContractError(f"data.kind must be synthetic or csv, got {cfg['data']['kind']!r}")
    benchmark_spec(cfg)
    hidden = cfg["model"]["hidden"]
    if not isinstance(hidden, list) or not hidden or any(not isinstance(h, int) or h <= 0 for h in hidden):
        raise ContractError("model.hidden must be a non-empty list of positive integers")
    for stage in STAGES:
        scheme(cfg, stage)
    dtl_config(cfg)
    pb = cfg["piggyback"]
    if not pb["gammas"] or any(not (isinstance(g, (int, float)) and 0 < g <= 1) for g in pb["gammas"]):
        raise ContractError("piggyback.gammas must be ratios in (0, 1]")
    for t in pb["tasks"]:
        if t not in ("source", "piggyback"):
            raise ContractError(f"piggyback task must be source or piggyback, got {t!r}")
    sw = cfg["sweep"]
    for lam in sw["lambdas"]:
        if not isinstance(lam, (int, float)) or not 0 <= lam <= 1:
            raise ContractError(f"sweep lambda {lam!r} outside [0, 1]")
    for kind in sw["unlearn"]:
        DtlConfig(unlearn=kind)
    for kind in sw["retain"]:
        DtlConfig(retain=kind)


def benchmark_spec(cfg) -> BenchmarkSpec:
    fields = dict(cfg["data"]["benchmark"])
    fields.setdefault("seed", cfg["seed"] + SEED_OFFSETS["data"])
    try:
        return BenchmarkSpec(**fields)
    except TypeError as exc:
        raise ContractError(f"data.benchmark: {exc}") from None


def scheme(cfg, stage) -> TrainScheme:
    fields = dict(cfg["schemes"][stage])
    fields.setdefault("seed", cfg["seed"] + SEED_OFFSETS[stage])
    try:
        return TrainScheme(**fields)
    except TypeError as exc:
        raise ContractError(f"schemes.{stage}: {exc}") from None


def dtl_config(cfg, **changes) -> DtlConfig:
    fields = dict(cfg["dtl"])
    fields.update(changes)
    try:
        return DtlConfig(**fields)
    except TypeError as exc:
        raise ContractError(f"dtl: {exc}") from None


def seeds(cfg):
    """Every seed the run uses, by role."""
    out = {k: cfg["seed"] + off for k, off in SEED_OFFSETS.items()}
    out["data"] = benchmark_spec(cfg).seed
    for stage in STAGES:
        out[stage] = scheme(cfg, stage).seed
    return out


def dumps(cfg) -> str:
    """Canonical text form, used for hashing and for the manifest."""
    return json.dumps(cfg, sort_keys=True)
