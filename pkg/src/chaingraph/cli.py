"""Command line: ``chaingraph {train,eval,compare,verify}``.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
See ``docs/config.md`` for the JSON config and model schemas.
"""

from __future__ import annotations

import argparse
import csv
import inspect
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import distributions as D
from . import verify as V
from .data import Dataset, load_idx_dataset, split, synth_blobs, synth_sequences
from .graph import (GraphError, LayeredChainGraph, augment_dropout, build_recurrent_unrolled,
                    build_refinement, init_params, sequential, validate)
from .training import TrainConfig, evaluate, train

MODEL_FORMAT = "chaingraph-model"
MODEL_VERSION = 1
HISTORY_COLUMNS = ["run", "epoch", "train_loss", "train_err", "val_loss", "val_err"]
RESULT_COLUMNS = ["method", "run", "test_err", "test_loss", "seed"]
METHODS = ("none", "dropout", "pcff")


class ConfigError(Exception):
    def __init__(self, field, message):
        super().__init__(f"config field {field!r}: {message}")
        self.field = field


def _get(d, key, where, default=...):
    if not isinstance(d, dict):
        raise ConfigError(where, "expected an object")
    if key not in d:
        if default is ...:
            raise ConfigError(f"{where}.{key}" if where else key, "missing")
        return default
    return d[key]


def _dist(spec, where):
    try:
        return D.from_dict(spec)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(where, str(exc)) from None


def _add_parts(g: LayeredChainGraph, spec, where):
    for i, l in enumerate(_get(spec, "layers", where, [])):
        w = f"{where}.layers[{i}]"
        g.add_layer(_get(l, "id", w), int(_get(l, "size", w)), _dist(_get(l, "dist", w), f"{w}.dist"),
                    is_input=bool(l.get("input", False)), bias=l.get("bias", True))
    for i, c in enumerate(_get(spec, "connections", where, [])):
        w = f"{where}.connections[{i}]"
        g.connect(_get(c, "parent", w), _get(c, "child", w), c.get("pattern", "dense"), c.get("mask"),
                  c.get("tie_group"), c.get("trainable", True))
    return g


def build_graph(spec: dict, where="graph") -> LayeredChainGraph:
    """Graph from a config ``graph`` section (layers or ``sequential`` + builders)."""
    try:
        if "sequential" in spec:
            s = spec["sequential"]
            w = f"{where}.sequential"
            hidden = _dist(_get(s, "hidden", w), f"{w}.hidden")
            out = _dist(s["output"], f"{w}.output") if "output" in s else None
            inp = _dist(s["input"], f"{w}.input") if "input" in s else None
            g = sequential(_get(s, "sizes", w), hidden, output=out, input_dist=inp)
        else:
            g = _add_parts(LayeredChainGraph(), spec, where)
        for i, b in enumerate(spec.get("builders", [])):
            w = f"{where}.builders[{i}]"
            kind = _get(b, "type", w)
            if kind == "dropout":
                g = augment_dropout(g, _get(b, "layers", w), float(_get(b, "p", w)))
            elif kind == "recurrent":
                g = build_recurrent_unrolled(g, _get(b, "layers", w), int(_get(b, "steps", w)),
                                             b.get("mode", "indrnn"))
            elif kind == "refinement":
                ref = _add_parts(LayeredChainGraph(), _get(b, "refining", w), f"{w}.refining")
                if "output" in b["refining"]:
                    ref.output = b["refining"]["output"]
                g = build_refinement(g, ref)
            elif kind == "append":
                _add_parts(g, b, w)
                g._output = None
            else:
                raise ConfigError(f"{w}.type", f"unknown builder {kind!r}")
        if "output" in spec:
            g.output = spec["output"]
    except GraphError as exc:
        raise ConfigError(where, str(exc)) from None
    problems = validate(g)
    if problems:
        raise ConfigError(where, "; ".join(problems))
    return g


def load_data(spec: dict, seed: int):
    """``(train, test)`` datasets from a config ``data`` section."""
    src = _get(spec, "source", "data")
    if src == "idx":
        def load(kind):
            return load_idx_dataset(_get(spec, f"{kind}_images", "data"), _get(spec, f"{kind}_labels", "data"),
                                    limit=spec.get(f"{kind}_limit"), n_classes=int(spec.get("classes", 10)))
        try:
            return load("train"), load("test")
        except (OSError, ValueError) as exc:
            raise ConfigError("data", str(exc)) from None
    if src == "blobs":
        n_tr, n_te = int(_get(spec, "per_class", "data")), int(spec.get("test_per_class", 50))
        pool = synth_blobs(int(_get(spec, "classes", "data")), n_tr + n_te, int(_get(spec, "dim", "data")),
                           float(spec.get("separation", 10.0)), seed=seed, spread=float(spec.get("spread", 0.05)))
        return _holdout(pool, n_te / (n_tr + n_te), seed)
    if src == "sequences":
        n_tr, n_te = int(_get(spec, "n", "data")), int(spec.get("test_n", 200))
        pool = synth_sequences(int(_get(spec, "length", "data")), n_tr + n_te, seed=seed)
        return _holdout(pool, n_te / (n_tr + n_te), seed)
    raise ConfigError("data.source", f"unknown source {src!r}")


def _holdout(pool: Dataset, fraction, seed):
    # a stream separate from the training/validation split
    return split(pool, fraction, seed=seed + 7919)


def train_config(spec: dict, seed: int, **over) -> TrainConfig:
    fields = set(inspect.signature(TrainConfig).parameters)
    unknown = set(spec) - fields
    if unknown:
        raise ConfigError(f"train.{sorted(unknown)[0]}", "unknown field")
    kw = {**spec, **over, "seed": seed}
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from None


def read_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config", "top level must be an object")
    for key in ("graph", "data"):
        _get(cfg, key, "")
    runs = cfg.get("runs", 1)
    if not isinstance(runs, int) or runs < 1:
        raise ConfigError("runs", "must be an integer >= 1")
    return cfg


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def save_model(graph: LayeredChainGraph, path, meta=None):
    doc = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "graph": graph.to_dict(), "meta": meta or {}}
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> LayeredChainGraph:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("model", f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("model", f"corrupted JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ConfigError("model.format", f"expected {MODEL_FORMAT!r}")
    if doc.get("version") != MODEL_VERSION:
        raise ConfigError("model.version", f"unsupported version {doc.get('version')!r}, expected {MODEL_VERSION}")
    try:
        return LayeredChainGraph.from_dict(doc["graph"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError("model.graph", str(exc)) from None


def _fresh_graph(cfg, seed):
    g = build_graph(cfg["graph"])
    init = cfg.get("init", {})
    try:
        init_params(g, init.get("scheme", "normal"), seed=seed, gain=float(init.get("gain", 1.0)))
    except ValueError as exc:
        raise ConfigError("init", str(exc)) from None
    return g


def _seed(args, cfg):
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    seed = _seed(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    train_set, test_set = load_data(cfg["data"], seed)
    for run in range(args.runs or cfg.get("runs", 1)):
        rseed = seed + run
        tcfg = train_config(cfg.get("train", {}), rseed)
        g = _fresh_graph(cfg, rseed)
        _, history = train(g, train_set, tcfg)
        rows += [{"run": run, **h} for h in history]
        res = evaluate(g, test_set, tcfg.loss)
        print(f"run {run} test_loss {res['loss']:.6f} test_err {res['error']:.6f}")
        save_model(g, out / "model.json", {"seed": rseed, "run": run, "test_err": res["error"],
                                           "test_loss": res["loss"], "loss": tcfg.loss})
    _write_csv(out / "history.csv", HISTORY_COLUMNS, rows)
    return 0


def cmd_eval(args) -> int:
    g = load_model(args.model)
    meta = json.loads(Path(args.model).read_text()).get("meta", {})
    loss = meta.get("loss", "cross_entropy")
    if args.images:
        if not args.labels:
            raise ConfigError("labels", "--labels is required with --images")
        try:
            test_set = load_idx_dataset(args.images, args.labels)
        except (OSError, ValueError) as exc:
            raise ConfigError("data", str(exc)) from None
    elif args.config:
        cfg = read_config(args.config)
        _, test_set = load_data(cfg["data"], _seed(args, cfg))
    else:
        raise ConfigError("config", "give --config or --images/--labels")
    if test_set.dim != g.input_width:
        raise ConfigError("data", f"input width {test_set.dim} does not match the model ({g.input_width})")
    res = evaluate(g, test_set, loss)
    print(f"test_loss {res['loss']:.6f} test_err {res['error']:.6f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "eval.csv", ["n", "test_loss", "test_err"],
               [{"n": len(test_set), "test_loss": res["loss"], "test_err": res["error"]}])
    return 0


def _method_graph_and_config(cfg, method, seed):
    g = _fresh_graph(cfg, seed)
    tspec = dict(cfg.get("train", {}))
    opts = cfg.get("methods", {}).get(method, {})
    if method == "none":
        return g, train_config(tspec, seed, mode="ff")
    hidden = [l.id for l in g.layers if not l.is_input and l.id != g.output]
    if method == "dropout":
        g = augment_dropout(g, opts.get("layers", hidden), float(opts.get("p", 0.5)))
        return g, train_config(tspec, seed, mode="dropout")
    return g, train_config(tspec, seed, mode="pcff", sample_rate=float(opts.get("rate", 0.5)))


def run_compare(cfg, methods, seed, runs):
    """Rows of ``(method, run, test_err, test_loss, seed)`` plus one mean row per method."""
    rows = []
    train_set, test_set = load_data(cfg["data"], seed)
    for method in methods:
        errs, losses = [], []
        for run in range(runs):
            rseed = seed + run
            g, tcfg = _method_graph_and_config(cfg, method, rseed)
            train(g, train_set, tcfg)
            res = evaluate(g, test_set, tcfg.loss)
            errs.append(res["error"])
            losses.append(res["loss"])
            rows.append({"method": method, "run": run, "test_err": res["error"], "test_loss": res["loss"],
                         "seed": rseed})
            print(f"{method} run {run} test_err {res['error']:.4f} test_loss {res['loss']:.4f}")
        rows.append({"method": method, "run": "mean", "test_err": float(np.mean(errs)),
                     "test_loss": float(np.mean(losses)), "seed": ""})
    return rows


def cmd_compare(args) -> int:
    cfg = read_config(args.config)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ConfigError("methods", f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    rows = run_compare(cfg, methods, _seed(args, cfg), args.runs or cfg.get("runs", 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "results.csv", RESULT_COLUMNS, rows)
    return 0


def cmd_verify(args) -> int:
    names = list(V.CHECKS) if args.check == "all" else [args.check]
    for name in names:
        if name not in V.CHECKS:
            print(f"unknown check {name!r}; choose from {', '.join(V.CHECKS)} or all", file=sys.stderr)
            return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ok = True
    for name in names:
        fn = V.CHECKS[name]
        kw = {"seed": args.seed} if args.seed is not None and "seed" in inspect.signature(fn).parameters else {}
        rep = fn(**kw)
        if args.tolerance is not None:
            rep = rep.with_tolerance(args.tolerance)
        rep.to_csv(out / f"verify_{name}.csv")
        print(rep.summary())
        ok &= rep.passed
    return 0 if ok else 1


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="chaingraph", description="Neural networks as layered chain graphs.")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="train a network from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--runs", type=int)
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("eval", parents=[common], help="evaluate a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--config")
    e.add_argument("--images")
    e.add_argument("--labels")
    e.set_defaults(func=cmd_eval)
    c = sub.add_parser("compare", parents=[common], help="compare none / dropout / pcff training")
    c.add_argument("--config", required=True)
    c.add_argument("--methods", default="none,dropout,pcff")
    c.add_argument("--runs", type=int)
    c.set_defaults(func=cmd_compare)
    v = sub.add_parser("verify", parents=[common], help="run oracle checks")
    v.add_argument("--check", default="all")
    v.add_argument("--tolerance", type=float, help="override every finite tolerance")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
