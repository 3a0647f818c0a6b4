"""Command-line entry point: ``dtl {pretrain,finetune,dispose,piggyback,sweep,report,run}``.

Every command reads one config, works inside ``--out`` and updates
``manifest.json`` there. Exit codes: 0 ok, 2 input error, 3 diverged run,
4 degenerate gradient.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from dtl import config as C
from dtl import evaluate as E
from dtl import nn, pipeline
from dtl.data import load_csv, make_transfer_benchmark, subsample
from dtl.errors import (AbortedComputation, ContractError, DegenerateGradientError, DivergenceError,
                        DtlError, ParseError)
from dtl.losses import RETAIN_KINDS, UNLEARN_KINDS

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_DEGENERATE = 0, 2, 3, 4
MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


class InputError(DtlError):
    pass


# -- run directory ---------------------------------------------------------------

def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RunDir:
    """The output directory and its manifest."""

    def __init__(self, out, cfg, source):
        self.root = Path(out)
        self.cfg = cfg
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / MANIFEST
        self.manifest = json.loads(path.read_text()) if path.exists() else {}
        old = self.manifest.get("config")
        if old is not None and C.dumps(old) != C.dumps(cfg):
            # a different config starts a fresh record of stages
            self.manifest = {}
        self.manifest.update({
            "manifest_version": MANIFEST_VERSION,
            "config_source": str(source) if source else None,
            "config": cfg,
            "config_sha256": hashlib.sha256(C.dumps(cfg).encode()).hexdigest(),
            "seeds": C.seeds(cfg),
        })
        self.manifest.setdefault("checkpoints", {})
        self.manifest.setdefault("metrics", {})
        self.manifest.setdefault("records", {})
        self.manifest.setdefault("commands", [])

    def path(self, *parts):
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def save_model(self, name, model):
        rel = f"checkpoints/{name}.ckpt"
        nn.save(model, self.path(rel))
        self.manifest["checkpoints"][name] = {"path": rel, "sha256": _sha256(self.path(rel))}

    def load_model(self, name):
        entry = self.manifest["checkpoints"].get(name)
        path = self.root / (entry["path"] if entry else f"checkpoints/{name}.ckpt")
        if not path.exists():
            raise InputError(f"missing checkpoint {path}; run the stage that produces {name!r} first")
        return nn.load(path)

    def has_model(self, name):
        return name in self.manifest["checkpoints"] and (self.root / self.manifest["checkpoints"][name]["path"]).exists()

    def open_records(self, name):
        rel = f"records/{name}.jsonl"
        return rel, open(self.path(rel), "w"), open(self.path(f"timing/{name}.jsonl"), "w")

    def close_records(self, rel, *streams):
        for s in streams:
            s.close()
        self.manifest["records"][rel] = _sha256(self.root / rel)

    def write_metrics(self, name, records):
        rel = f"metrics/{name}.jsonl"
        with open(self.path(rel), "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self.manifest["metrics"][rel] = _sha256(self.root / rel)

    def finish(self, command):
        if command not in self.manifest["commands"]:
            self.manifest["commands"].append(command)
        (self.root / MANIFEST).write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


# -- data and models -------------------------------------------------------------

def load_data(cfg):
    if cfg["data"]["kind"] == "synthetic":
        return make_transfer_benchmark(C.benchmark_spec(cfg))
    files = cfg["data"]["csv"]
    out = {}
    for task in ("source", "target", "piggyback"):
        train_path, test_path = files.get(f"{task}_train"), files.get(f"{task}_test")
        if train_path is None or test_path is None:
            if task == "piggyback":
                continue
            raise InputError(f"data.csv needs {task}_train and {task}_test")
        train, stats = load_csv(train_path, task=task, split="train")
        test, _ = load_csv(test_path, stats=stats, task=task, split="test")
        out[f"{task}_train"], out[f"{task}_test"] = train, test
    return out


def widths(cfg, data):
    return [data["source_train"].dim] + list(cfg["model"]["hidden"])


def metric(model, name, dataset, value, seed, gamma=None, **extra):
    rec = {"model": model, "metric": name, "dataset": dataset, "gamma": gamma, "seed": seed,
           "value": None if value is None else float(value)}
    rec.update(extra)
    return rec


def model_metrics(name, model, data, seed, mia=True):
    """Accuracy on every split the model has a head for, plus source-membership AUROCs."""
    out = []
    for task in ("source", "target", "piggyback"):
        if task in model.tasks and f"{task}_test" in data:
            out.append(metric(name, "acc", f"{task}_test", E.accuracy(model, task, data[f"{task}_test"]), seed))
    if mia and "source" in model.tasks:
        members, nonmembers = _mia_splits(data, seed)
        for strategy in E.MIA_STRATEGIES:
            score = E.mia_scores(model, "source", members, nonmembers, strategy)
            out.append(metric(name, f"mia_auroc_{strategy}", "source", score.auroc, seed))
    return out


def _mia_splits(data, seed, limit=500):
    train, test = data["source_train"], data["source_test"]
    n = min(len(train), len(test), limit)
    rng = np.random.default_rng(seed)
    return (train.subset(np.sort(rng.choice(len(train), n, replace=False))),
            test.subset(np.sort(rng.choice(len(test), n, replace=False))))


def dtl_name(dcfg):
    name = f"dtl-{dcfg.unlearn}"
    if dcfg.retain != "src-kd":
        name += f"-{dcfg.retain}"
    if dcfg.freeze_source_head:
        name += "-frozen"
    return name


# -- commands --------------------------------------------------------------------

def cmd_pretrain(run, cfg, data):
    sch = C.scheme(cfg, "pretrain")
    rel, rec, tim = run.open_records("pretrain")
    model = pipeline.pretrain(widths(cfg, data), data["source_train"], sch,
                              sink=pipeline.RecordSink(rec, tim))
    run.close_records(rel, rec, tim)
    run.save_model("pretrain", model)
    run.write_metrics("pretrain", model_metrics("pretrain", model, data, cfg["seed"], mia=False))


def cmd_finetune(run, cfg, data):
    base = run.load_model("pretrain")
    sch = C.scheme(cfg, "finetune")
    rel, rec, tim = run.open_records("finetune")
    tl = pipeline.finetune(base, data["target_train"], sch, sink=pipeline.RecordSink(rec, tim))
    run.close_records(rel, rec, tim)
    run.save_model("tl", tl)
    # target-only reference trained with the same scheme
    scratch_scheme = nn.TrainScheme(**dict(sch.to_dict(), seed=C.seeds(cfg)["scratch"]))
    rel, rec, tim = run.open_records("scratch")
    tgt = pipeline.train_scratch(widths(cfg, data), data["target_train"], scratch_scheme,
                                 sink=pipeline.RecordSink(rec, tim))
    run.close_records(rel, rec, tim)
    run.save_model("tgt", tgt)
    seed = cfg["seed"]
    run.write_metrics("finetune", model_metrics("tl", tl, data, seed) + model_metrics("tgt", tgt, data, seed))


def cmd_dispose(run, cfg, data):
    tl = run.load_model("tl")
    dcfg = C.dtl_config(cfg)
    name = dtl_name(dcfg)
    rel, rec, tim = run.open_records(name)
    trace_fh = open(run.path(f"traces/{name}.jsonl"), "w") if cfg["trace"] else None
    try:
        from dtl.gc_engine import jsonl_trace
        model = pipeline.dispose(tl.copy(), tl, data["source_train"], dcfg, C.scheme(cfg, "dispose"),
                                 target_train=data["target_train"], sink=pipeline.RecordSink(rec, tim),
                                 trace=jsonl_trace(trace_fh) if trace_fh else None)
    finally:
        run.close_records(rel, rec, tim)
        if trace_fh:
            trace_fh.close()
    run.save_model(name, model)
    run.write_metrics(name, model_metrics(name, model, data, cfg["seed"]))
    return name


def _pl_datasets(data, task):
    return data[f"{task}_train"], data[f"{task}_test"]


def _pl_records(name, model, data, cfg):
    pb = cfg["piggyback"]
    sch = C.scheme(cfg, "piggyback")
    out = []
    for task in pb["tasks"]:
        if f"{task}_train" not in data:
            continue
        train, test = _pl_datasets(data, task)
        for gamma in pb["gammas"]:
            sub = train if gamma >= 1 else subsample(train, gamma, sch.seed)
            proto = E.PlProtocol(model, sub, test, sch, task=task, fresh_head=pb["fresh_head"])
            out.append(metric(name, "pl_acc", task, E.pl_accuracy(proto), cfg["seed"], gamma=gamma))
    return out


def cmd_piggyback(run, cfg, data):
    """PL accuracy of every model in the run, plus a randomly initialised reference."""
    names = [n for n in sorted(run.manifest["checkpoints"]) if n != "scr"]
    if not names:
        raise InputError("no checkpoints to piggyback; run pretrain/finetune/dispose first")
    records = []
    scr = nn.MLP.init(widths(cfg, data), {"source": data["source_train"].num_classes},
                      seed=C.seeds(cfg)["piggyback"])
    records += _pl_records("scr", scr, data, cfg)
    for name in names:
        records += _pl_records(name, run.load_model(name), data, cfg)
    run.write_metrics("piggyback", records)


def cmd_sweep(run, cfg, data):
    tl = run.load_model("tl")
    sw = cfg["sweep"]
    sch = C.scheme(cfg, "dispose")
    pl_sch = C.scheme(cfg, "piggyback")
    gamma = cfg["piggyback"]["gammas"][0]
    train, test = _pl_datasets(data, "source")
    pl_train = train if gamma >= 1 else subsample(train, gamma, pl_sch.seed)
    records = []
    for retain in sw["retain"]:
        for kind in sw["unlearn"]:
            for lam in sw["lambdas"]:
                dcfg = C.dtl_config(cfg, lam=float(lam), unlearn=kind, retain=retain)
                base = dict(unlearn=kind, retain=retain, lam=float(lam))
                try:
                    model = pipeline.dispose(tl.copy(), tl, data["source_train"], dcfg, sch,
                                             target_train=data["target_train"])
                except (DivergenceError, DegenerateGradientError, AbortedComputation) as exc:
                    status = "degenerate" if isinstance(exc, DegenerateGradientError) else "diverged"
                    for m in ("acc_t", "acc_s", "pl_acc"):
                        records.append(metric("sweep", m, "source" if m != "acc_t" else "target_test",
                                               None, cfg["seed"], gamma=gamma if m == "pl_acc" else None,
                                               status=status, **base))
                    continue
                acc_t = E.accuracy(model, "target", data["target_test"])
                acc_s = E.accuracy(model, "source", data["source_test"])
                pl = E.pl_accuracy(E.PlProtocol(model, pl_train, test, pl_sch, task="source",
                                                fresh_head=cfg["piggyback"]["fresh_head"]))
                records.append(metric("sweep", "acc_t", "target_test", acc_t, cfg["seed"], status="ok", **base))
                records.append(metric("sweep", "acc_s", "source_test", acc_s, cfg["seed"], status="ok", **base))
                records.append(metric("sweep", "pl_acc", "source", pl, cfg["seed"], gamma=gamma, status="ok", **base))
    run.write_metrics("sweep", records)
    _write_sweep_outputs(run, records)


# -- report ------------------------------------------------------------------------

def _fmt(v, signed=False):
    if v is None:
        return "n/a"
    return f"{100 * v:+.2f}" if signed else f"{100 * v:.2f}"


def format_table(header, rows):
    """Aligned plain-text table; the first column is left aligned, the rest right aligned."""
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    w = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for j, r in enumerate(cells):
        parts = [r[0].ljust(w[0])] + [c.rjust(w[i]) for i, c in enumerate(r[1:], start=1)]
        lines.append("  ".join(parts).rstrip())
        if j == 0:
            lines.append("  ".join("-" * x for x in w))
    return "\n".join(lines) + "\n"


def write_plot(path, xlabel, ylabel, points, title):
    """Two-column numeric file with ``#`` header comments."""
    with open(path, "w") as fh:
        fh.write(f"# {title}\n# columns: {xlabel} {ylabel}\n")
        for x, y in points:
            fh.write(f"{x:.6f} {y:.6f}\n")


def _sweep_rows(records):
    rows = {}
    for r in records:
        key = (r["retain"], r["unlearn"], r["lam"])
        rows.setdefault(key, {})[r["metric"]] = r["value"]
    return rows


def _write_sweep_outputs(run, records):
    rows = _sweep_rows(records)
    table = [[u, ret, f"{lam:.2f}", _fmt(v.get("acc_t")), _fmt(v.get("acc_s")), _fmt(v.get("pl_acc"))]
             for (ret, u, lam), v in rows.items()]
    run.path("tables/sweep.txt").write_text(
        format_table(["unlearn", "retain", "lambda", "Acc_t", "Acc_s", "Acc_pl"], table))
    by_kind = {}
    for (ret, u, lam), v in rows.items():
        if v.get("acc_t") is not None and v.get("pl_acc") is not None:
            by_kind.setdefault((u, ret), []).append((v["acc_t"], v["pl_acc"]))
    for (u, ret), pts in by_kind.items():
        write_plot(run.path(f"plots/frontier-{u}-{ret}.dat"), "acc_t", "acc_pl", pts,
                   f"target vs source-PL accuracy over lambda, unlearn={u} retain={ret}")


def read_metrics(root):
    records = []
    for path in sorted(Path(root, "metrics").glob("*.jsonl")):
        for line in path.read_text().splitlines():
            if line.strip():
                records.append(json.loads(line))
    return records


def _lookup(records):
    table = {}
    for r in records:
        if r["model"] == "sweep":
            continue
        table[(r["model"], r["metric"], r["dataset"], r["gamma"])] = r["value"]
    return table


def _diff(a, b):
    return None if a is None or b is None else a - b


def build_report(root):
    """(main table text, MIA table text, {plot name: points}) from the metric records under ``root``."""
    records = read_metrics(root)
    if not records:
        raise InputError(f"no metric records under {root}")
    look = _lookup(records)
    models = sorted({k[0] for k in look}, key=_model_order)
    pl_keys = sorted({(k[2], k[3]) for k in look if k[1] == "pl_acc"}, key=lambda t: (t[0], t[1]))
    header = ["model", "Acc_s", "Acc_t", "dAcc_t vs TL", "dAcc_t vs TGT"]
    for task, g in pl_keys:
        header += [f"Acc_pl {task}@{g:g}", f"dAcc_pl {task}@{g:g} vs TL"]
    rows = []
    for m in models:
        acc_s = look.get((m, "acc", "source_test", None))
        acc_t = look.get((m, "acc", "target_test", None))
        row = [m, _fmt(acc_s), _fmt(acc_t),
               _fmt(_diff(acc_t, look.get(("tl", "acc", "target_test", None))), True),
               _fmt(_diff(acc_t, look.get(("tgt", "acc", "target_test", None))), True)]
        for task, g in pl_keys:
            pl = look.get((m, "pl_acc", task, g))
            row += [_fmt(pl), _fmt(_diff(pl, look.get(("tl", "pl_acc", task, g))), True)]
        rows.append(row)
    main = format_table(header, rows)
    mia_rows = [[m] + [_fmt(look.get((m, f"mia_auroc_{s}", "source", None))) for s in E.MIA_STRATEGIES]
                for m in models if any(k[0] == m and k[1].startswith("mia_") for k in look)]
    mia = format_table(["model"] + [f"AUROC {s}" for s in E.MIA_STRATEGIES], mia_rows)
    plots = {}
    for task in sorted({t for t, _ in pl_keys}):
        for m in models:
            pts = [(g, look[(m, "pl_acc", task, g)]) for t, g in pl_keys
                   if t == task and look.get((m, "pl_acc", task, g)) is not None]
            if pts:
                plots[f"pl-{task}-{m}"] = pts
    return main, mia, plots


def _model_order(name):
    fixed = ["scr", "pretrain", "tgt", "tl"]
    return (fixed.index(name), name) if name in fixed else (len(fixed), name)


def cmd_report(root):
    main, mia, plots = build_report(root)
    root = Path(root)
    (root / "tables").mkdir(exist_ok=True)
    (root / "tables" / "main.txt").write_text(main)
    (root / "tables" / "mia.txt").write_text(mia)
    (root / "plots").mkdir(exist_ok=True)
    for name, pts in plots.items():
        write_plot(root / "plots" / f"{name}.dat", "gamma", "acc_pl", pts, f"PL accuracy vs sampling ratio, {name}")
    sweep = [r for r in read_metrics(root) if r["model"] == "sweep"]
    if sweep:
        rows = _sweep_rows(sweep)
        table = [[u, ret, f"{lam:.2f}", _fmt(v.get("acc_t")), _fmt(v.get("acc_s")), _fmt(v.get("pl_acc"))]
                 for (ret, u, lam), v in rows.items()]
        (root / "tables" / "sweep.txt").write_text(
            format_table(["unlearn", "retain", "lambda", "Acc_t", "Acc_s", "Acc_pl"], table))
    sys.stdout.write(main)


# -- argument handling ----------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config, or a manifest.json from an earlier run")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set schemes.dispose.epochs=5")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, default=Path("runs/default"))
    common.add_argument("--workers", type=int, help="simulated workers for the collision gradient")
    common.add_argument("--chunks", type=int)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--unlearn", choices=UNLEARN_KINDS)
    common.add_argument("--retain", choices=RETAIN_KINDS)
    common.add_argument("--freeze-source-head", action="store_true", default=None)
    parser = argparse.ArgumentParser(prog="dtl", description="Disposable transfer learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("pretrain", "train on the source task"),
                       ("finetune", "transfer to the target task (also trains the target-only reference)"),
                       ("dispose", "knowledge disposal from the transferred model"),
                       ("piggyback", "PL accuracy of every checkpoint in the run"),
                       ("sweep", "dispose + PL over the lambda grid and loss kinds"),
                       ("report", "tables and plot data from the run's metric records"),
                       ("run", "pretrain, finetune, dispose, piggyback and report in one go")]:
        sub.add_parser(name, parents=[common], help=text)
    return parser


def resolve_config(args):
    raw = C.read_file(args.config) if args.config else {}
    overrides = [C.parse_override(o) for o in args.overrides]
    flag_map = {"seed": ["seed"], "workers": ["dtl", "workers"], "chunks": ["dtl", "chunks"],
                "lam": ["dtl", "lam"], "unlearn": ["dtl", "unlearn"], "retain": ["dtl", "retain"],
                "freeze_source_head": ["dtl", "freeze_source_head"]}
    for attr, keys in flag_map.items():
        value = getattr(args, attr)
        if value is not None:
            overrides.append((keys, value))
    return C.resolve(raw, overrides)


def execute(args):
    if args.command == "report":
        if not (args.out / MANIFEST).exists():
            raise InputError(f"no manifest in {args.out}")
        cmd_report(args.out)
        return
    cfg = resolve_config(args)
    run = RunDir(args.out, cfg, args.config)
    data = load_data(cfg)
    if args.command == "run":
        for step in (cmd_pretrain, cmd_finetune, cmd_dispose, cmd_piggyback):
            step(run, cfg, data)
            run.finish(step.__name__[4:])
        cmd_report(args.out)
        run.finish("report")
        return
    commands = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "dispose": cmd_dispose,
                "piggyback": cmd_piggyback, "sweep": cmd_sweep}
    commands[args.command](run, cfg, data)
    run.finish(args.command)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        execute(args)
    except DegenerateGradientError as exc:
        print(f"dtl: degenerate gradient: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except DivergenceError as exc:
        print(f"dtl: run diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except AbortedComputation as exc:
        cause = exc.__cause__
        if isinstance(cause, DegenerateGradientError):
            print(f"dtl: degenerate gradient: {cause}", file=sys.stderr)
            return EXIT_DEGENERATE
        if isinstance(cause, DivergenceError):
            print(f"dtl: run diverged: {cause}", file=sys.stderr)
            return EXIT_DIVERGED
        print(f"dtl: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ContractError, ParseError, InputError) as exc:
        print(f"dtl: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
