"""Command-line entry point: ``xnode <subcommand> [options]``.

Exit status is 0 on success, 1 on a usage error and 2 when a command fails.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as xdata
from .context import LabelSet, build_all_contexts, context_matrix, load_contexts, save_contexts
from .experiment import (ExperimentConfig, format_table, method_label, read_flat_config,
                         run_experiment, summarize, write_summary)
from .explain import ProviderConfig, explain_nodes, persist_explanations
from .graph import build_knn_graph, load_features, load_graph, save_graph
from .metrics import compute_metrics
from .model import TrainConfig, XNodeModel, predict, train

log = logging.getLogger("xnode")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out_help: str):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=out_help)


def _data_opts(p: argparse.ArgumentParser):
    p.add_argument("--data", help="directory written by `synth` (supplies default file paths)")
    p.add_argument("--features")
    p.add_argument("--labels")
    p.add_argument("--classes")
    p.add_argument("--splits")


def _model_inputs(p: argparse.ArgumentParser, model: bool = True):
    p.add_argument("--graph", required=True)
    p.add_argument("--contexts", required=True)
    if model:
        p.add_argument("--model", required=True, help="checkpoint written by `train`")


def build_parser() -> Parser:
    parser = Parser(prog="xnode", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", help="generate a Gaussian-cluster dataset")
    _common(p, "output directory")
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--sep", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--binary", action="store_true", help="write features in the binary format")

    p = sub.add_parser("build-graph", help="build the cosine kNN graph")
    _common(p, "graph file")
    _data_opts(p)
    p.add_argument("--k", type=int)
    p.add_argument("--directed", action="store_true", help="keep only the selected directed edges")

    p = sub.add_parser("extract-context", help="compute per-node context descriptors")
    _common(p, "context CSV")
    _data_opts(p)
    p.add_argument("--graph", required=True)

    p = sub.add_parser("train", help="train a baseline or reasoner model")
    _common(p, "checkpoint file")
    _data_opts(p)
    _model_inputs(p, model=False)
    p.add_argument("--backbone", choices=("gcn", "gat", "gin"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--no-reasoner", action="store_true", help="train the plain backbone baseline")
    p.add_argument("--inject-mode", choices=("concat", "layerwise"))
    p.add_argument("--report", help="per-epoch training log CSV (default: <out>.report.csv)")

    p = sub.add_parser("predict", help="write per-node predictions")
    _common(p, "predictions CSV")
    _data_opts(p)
    _model_inputs(p)

    p = sub.add_parser("explain", help="write natural-language explanations as JSON lines")
    _common(p, "JSONL file")
    _data_opts(p)
    _model_inputs(p)
    p.add_argument("--provider", choices=("offline", "remote"))
    p.add_argument("--endpoint")
    p.add_argument("--model-name")
    p.add_argument("--token-env", help="environment variable holding the bearer token")
    p.add_argument("--adapter", choices=("generic", "openai"))
    p.add_argument("--concurrency", type=int)
    p.add_argument("--nodes", choices=("test", "val", "train", "all"), default="test")

    p = sub.add_parser("evaluate", help="score a model and write the summary CSV")
    _common(p, "summary CSV")
    _data_opts(p)
    _model_inputs(p)
    p.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    p.add_argument("--dataset", default="synthetic")

    p = sub.add_parser("run", help="run the full cross-validation experiment")
    _common(p, "output directory")
    return parser


def _config(args) -> dict[str, str]:
    return read_flat_config(args.config) if getattr(args, "config", None) else {}


def _pick(flag, cfg: dict, key: str, cast, default=None):
    if flag is not None:
        return flag
    if key in cfg:
        return cast(cfg[key])
    return default


def _path(args, name: str, *candidates: str, required: bool = True):
    explicit = getattr(args, name, None)
    if explicit:
        return explicit
    if args.data:
        for c in candidates:
            p = Path(args.data) / c
            if p.exists():
                return str(p)
    if required:
        raise UsageError(f"--{name} is required (or pass --data with a {candidates[0]} file)")
    return None


def _bundle(args) -> xdata.DatasetBundle:
    return xdata.load_dataset(
        _path(args, "features", "features.csv", "features.bin"),
        _path(args, "labels", "labels.csv"),
        _path(args, "splits", "splits.csv", required=False),
        _path(args, "classes", "classes.csv", required=False),
        seed=args.seed if args.seed is not None else 42,
    )


def _require_out(args):
    if not args.out:
        raise UsageError("--out is required")
    return args.out


def cmd_synth(args, cfg):
    out = _require_out(args)
    bundle = xdata.generate_synthetic(
        n=_pick(args.n, cfg, "n", int, 300), d=_pick(args.d, cfg, "d", int, 16),
        n_classes=_pick(args.classes, cfg, "classes", int, 3),
        cluster_sep=_pick(args.sep, cfg, "sep", float, 6.0),
        label_noise=_pick(args.noise, cfg, "noise", float, 0.05),
        seed=_pick(args.seed, cfg, "data_seed", int, 42))
    paths = xdata.save_dataset(bundle, out, binary=args.binary)
    print(f"wrote {bundle.n_nodes} nodes to {Path(paths['features']).parent}")


def cmd_build_graph(args, cfg):
    out = _require_out(args)
    X = load_features(_path(args, "features", "features.csv", "features.bin"))
    k = _pick(args.k, cfg, "k", int)
    if k is None:
        raise UsageError("--k is required")
    symmetric = not args.directed and cfg.get("symmetrize", "true").lower() in ("1", "true", "yes", "on")
    g = build_knn_graph(X, k, symmetrize=symmetric)
    save_graph(g, out)
    print(f"graph: {g.n_nodes} nodes, {g.n_edges} edges")


def cmd_extract_context(args, cfg):
    out = _require_out(args)
    bundle = _bundle(args)
    g = load_graph(args.graph)
    seed = _pick(args.seed, cfg, "community_seed", int, 0)
    _, vectors = build_all_contexts(g, LabelSet(bundle.labels, bundle.train_mask), bundle.X, seed=seed)
    save_contexts(vectors, out)
    print(f"contexts for {len(vectors)} nodes -> {out}")


def _train_config(args, cfg) -> TrainConfig:
    merged = dict(cfg)
    for key in ("backbone", "epochs", "lr", "alpha", "beta", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    if args.inject_mode:
        merged["inject_mode"] = args.inject_mode
    if args.no_reasoner:
        merged["use_reasoner"] = False
    return TrainConfig.from_dict(merged)


def _inputs(args):
    bundle = _bundle(args)
    g = load_graph(args.graph)
    C = context_matrix(load_contexts(args.contexts))
    if g.n_nodes != bundle.n_nodes or C.shape[0] != bundle.n_nodes:
        raise ValueError(f"node counts disagree: features {bundle.n_nodes}, graph {g.n_nodes}, "
                         f"contexts {C.shape[0]}")
    return bundle, g, C


def cmd_train(args, cfg):
    out = _require_out(args)
    bundle, g, C = _inputs(args)
    tcfg = _train_config(args, cfg)
    model, report = train(g, bundle.X, C, bundle.labels, (bundle.train_mask, bundle.val_mask), tcfg,
                          n_classes=bundle.n_classes)
    report.to_csv(args.report or f"{out}.report.csv")
    model.save(out, extra={
        "method": method_label(tcfg.backbone, "reasoner" if tcfg.use_reasoner else "baseline"),
        "epoch_time_s": report.mean_epoch_time, "peak_mem_mb": report.peak_mem_mb,
        "class_names": bundle.class_names})
    print(f"best validation accuracy {report.best_val_acc:.4f} at epoch {report.best_epoch}")


def _split_mask(bundle, which: str) -> np.ndarray:
    if which == "all":
        return np.ones(bundle.n_nodes, dtype=bool)
    return {"train": bundle.train_mask, "val": bundle.val_mask, "test": bundle.test_mask}[which]


def cmd_predict(args, cfg):
    out = _require_out(args)
    bundle, g, C = _inputs(args)
    model, _ = XNodeModel.load(args.model)
    y_pred, probs = predict(model, g, bundle.X, C)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "pred"] + [f"p_{c}" for c in range(probs.shape[1])])
        for i, (yp, row) in enumerate(zip(y_pred, probs)):
            w.writerow([i, int(yp)] + [repr(float(p)) for p in row])
    print(f"predictions for {len(y_pred)} nodes -> {out}")


def cmd_explain(args, cfg):
    out = _require_out(args)
    bundle, g, C = _inputs(args)
    model, _ = XNodeModel.load(args.model)
    y_pred, _ = predict(model, g, bundle.X, C)
    vectors = load_contexts(args.contexts)
    provider = ProviderConfig(
        kind=_pick(args.provider, cfg, "provider", str, "offline"),
        endpoint=_pick(args.endpoint, cfg, "endpoint", str),
        model=_pick(args.model_name, cfg, "model_name", str),
        token_env=_pick(args.token_env, cfg, "token_env", str),
        adapter=_pick(args.adapter, cfg, "adapter", str, "generic"),
        concurrency=_pick(args.concurrency, cfg, "concurrency", int, 1))
    names = bundle.class_names
    nodes = np.flatnonzero(_split_mask(bundle, args.nodes))
    items = [(int(i), vectors[i].key_values(), names[y_pred[i]], names[bundle.labels[i]]) for i in nodes]
    records = explain_nodes(items, provider)
    persist_explanations(records, out)
    print(f"{len(records)} explanations -> {out}")


def cmd_evaluate(args, cfg):
    out = _require_out(args)
    bundle, g, C = _inputs(args)
    model, meta = XNodeModel.load(args.model)
    y_pred, probs = predict(model, g, bundle.X, C)
    mask = _split_mask(bundle, args.split)
    m = compute_metrics(y_pred[mask], probs[mask], bundle.labels[mask], bundle.n_classes)
    run = {"method": meta.get("method", "model"), "error": "", **m.as_row(),
           "epoch_time_s": meta.get("epoch_time_s", 0.0), "peak_mem_mb": meta.get("peak_mem_mb", 0.0)}
    rows = summarize([run], args.dataset)
    write_summary(rows, out)
    print(format_table(rows))


def cmd_run(args, cfg):
    if not args.config:
        raise UsageError("run needs --config")
    out = _require_out(args)
    ecfg = ExperimentConfig.from_dict(cfg)
    if args.seed is not None:
        ecfg.seeds = (args.seed,)
    print(format_table(run_experiment(ecfg, out)))


COMMANDS = {
    "synth": cmd_synth, "build-graph": cmd_build_graph, "extract-context": cmd_extract_context,
    "train": cmd_train, "predict": cmd_predict, "explain": cmd_explain, "evaluate": cmd_evaluate,
    "run": cmd_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"xnode {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        if args.verbose:
            log.exception("command failed")
        print(f"xnode {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
