"""Cross-validated baseline vs. reasoner comparison driven by a flat config file."""

from __future__ import annotations

import configparser
import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .context import LabelSet, build_all_contexts
from .data import CvPlan, DatasetBundle, generate_synthetic, load_dataset, make_cv_splits
from .explain import ProviderConfig, explain_nodes, persist_explanations
from .graph import build_knn_graph
from .metrics import compute_metrics
from .model import TrainConfig, predict, train

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("method", "dataset", "acc_mean", "acc_std", "f1_mean", "f1_std", "sens_mean",
                   "sens_std", "auc_mean", "auc_std", "epoch_time_s", "peak_mem_mb")
RUN_COLUMNS = ("method", "dataset", "seed", "fold", "acc", "f1", "sens", "auc",
               "best_val_acc", "best_epoch", "epoch_time_s", "peak_mem_mb", "error")


def read_flat_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    text = Path(path).read_text(encoding="utf-8")
    parser.read_string("[xnode]\n" + text, source=str(path))
    return dict(parser["xnode"])


def _split_list(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    n: int = 300
    d: int = 16
    classes: int = 3
    sep: float = 6.0
    noise: float = 0.05
    data_seed: int = 42
    features: str = ""
    labels: str = ""
    class_names: str = ""
    k: int = 5
    symmetrize: bool = True
    backbones: tuple[str, ...] = ("gcn",)
    methods: tuple[str, ...] = ("baseline", "reasoner")
    seeds: tuple[int, ...] = (42, 43, 44)
    folds: int = 3
    community_seed: int = 0
    explain: bool = False
    provider: str = "offline"
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ExperimentConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name == "train" or f.name not in d:
                continue
            raw = d[f.name].strip()
            if f.name in ("backbones", "methods"):
                kwargs[f.name] = _split_list(raw.lower())
            elif f.name == "seeds":
                kwargs[f.name] = tuple(int(s) for s in _split_list(raw))
            elif f.type == "bool":
                kwargs[f.name] = raw.lower() in ("1", "true", "yes", "on")
            elif f.type == "int":
                kwargs[f.name] = int(raw)
            elif f.type == "float":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        kwargs["train"] = TrainConfig.from_dict(d)
        unknown = set(d) - {f.name for f in fields(cls)} - {f.name for f in fields(TrainConfig)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        bad = set(kwargs.get("methods", ())) - {"baseline", "reasoner"}
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(read_flat_config(path))


def method_label(backbone: str, method: str) -> str:
    name = backbone.upper()
    return name if method == "baseline" else f"{name} + Reasoner"


def load_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    if cfg.dataset == "synthetic":
        return generate_synthetic(cfg.n, cfg.d, cfg.classes, cfg.sep, cfg.noise, cfg.data_seed)
    return load_dataset(cfg.features, cfg.labels, None, cfg.class_names or None)


def run_single(bundle: DatasetBundle, graph, split, backbone: str, method: str,
               cfg: ExperimentConfig, contexts=None):
    """Train and score one (backbone, method, seed, fold) cell."""
    if contexts is None:
        contexts = build_all_contexts(graph, LabelSet(bundle.labels, split.train), bundle.X,
                                      seed=cfg.community_seed)
    C, vectors = contexts
    tcfg = TrainConfig(**{**asdict(cfg.train), "backbone": backbone,
                          "use_reasoner": method == "reasoner", "seed": split.seed})
    model, report = train(graph, bundle.X, C, bundle.labels, (split.train, split.val), tcfg,
                          n_classes=bundle.n_classes)
    y_pred, probs = predict(model, graph, bundle.X, C)
    test = split.test
    metrics = compute_metrics(y_pred[test], probs[test], bundle.labels[test], bundle.n_classes)
    return model, report, metrics, y_pred, vectors


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def summarize(runs: list[dict], dataset: str) -> list[dict]:
    """Mean and population std (in percent) per method over successful runs."""
    out = []
    for method in dict.fromkeys(r["method"] for r in runs):
        ok = [r for r in runs if r["method"] == method and not r["error"]]
        row = {"method": method, "dataset": dataset}
        for key in ("acc", "f1", "sens", "auc"):
            m, s = _mean_std([100 * r[key] for r in ok]) if ok else (float("nan"),) * 2
            row[f"{key}_mean"], row[f"{key}_std"] = m, s
        row["epoch_time_s"] = float(np.mean([r["epoch_time_s"] for r in ok])) if ok else float("nan")
        row["peak_mem_mb"] = float(max(r["peak_mem_mb"] for r in ok)) if ok else float("nan")
        out.append(row)
    return out


def write_summary(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([r["method"], r["dataset"]]
                       + [f"{r[c]:.2f}" for c in SUMMARY_COLUMNS[2:10]]
                       + [f"{r['epoch_time_s']:.4f}", f"{r['peak_mem_mb']:.2f}"])


def read_summary(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SUMMARY_COLUMNS:
            raise ValueError(f"{path}: unexpected summary columns {reader.fieldnames}")
        return [{k: (v if k in ("method", "dataset") else float(v)) for k, v in row.items()}
                for row in reader]


def format_table(rows: list[dict]) -> str:
    lines = [f"{'method':<20} {'ACC':>13} {'F1':>13} {'Sensitivity':>13} {'ROC-AUC':>13}"]
    for r in rows:
        cells = [f"{r[k + '_mean']:.2f}±{r[k + '_std']:.2f}" for k in ("acc", "f1", "sens", "auc")]
        lines.append(f"{r['method']:<20} " + " ".join(f"{c:>13}" for c in cells))
    return "\n".join(lines)


def run_experiment(config, out_dir) -> list[dict]:
    """Run every (backbone, method, seed, fold) cell and write reports to ``out_dir``.

    Writes ``runs.csv``, ``summary.csv``, one training log per run under
    ``reports/`` and, when enabled, ``explanations.jsonl`` for the test nodes
    of the first reasoner run.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_file(config)
    out = Path(out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    bundle = load_bundle(cfg)
    graph = build_knn_graph(bundle.X, cfg.k, cfg.symmetrize)
    splits = make_cv_splits(bundle.n_nodes, CvPlan(cfg.folds, cfg.seeds))
    runs, explained = [], False
    for split in splits:
        contexts = build_all_contexts(graph, LabelSet(bundle.labels, split.train), bundle.X,
                                      seed=cfg.community_seed)
        for backbone in cfg.backbones:
            for method in cfg.methods:
                name = method_label(backbone, method)
                row = {"method": name, "dataset": cfg.dataset, "seed": split.seed, "fold": split.fold,
                       "error": ""}
                try:
                    model, report, metrics, y_pred, vectors = run_single(
                        bundle, graph, split, backbone, method, cfg, contexts)
                except Exception as exc:  # one failed cell must not sink the sweep
                    log.exception("run %s seed=%d fold=%d failed", name, split.seed, split.fold)
                    row.update({k: float("nan") for k in RUN_COLUMNS[4:12]})
                    row["error"] = f"{type(exc).__name__}: {exc}"
                    runs.append(row)
                    continue
                row.update(metrics.as_row())
                row.update(best_val_acc=report.best_val_acc, best_epoch=report.best_epoch,
                           epoch_time_s=report.mean_epoch_time, peak_mem_mb=report.peak_mem_mb)
                runs.append(row)
                tag = f"{backbone}_{method}_s{split.seed}_f{split.fold}"
                report.to_csv(out / "reports" / f"{tag}.csv")
                if cfg.explain and method == "reasoner" and not explained:
                    names = bundle.class_names
                    items = [(int(i), vectors[i].key_values(), names[y_pred[i]], names[bundle.labels[i]])
                             for i in np.flatnonzero(split.test)]
                    persist_explanations(explain_nodes(items, ProviderConfig(kind=cfg.provider)),
                                         out / "explanations.jsonl")
                    explained = True
    with open(out / "runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_COLUMNS)
        for r in runs:
            w.writerow([_cell(r[c]) for c in RUN_COLUMNS])
    summary = summarize(runs, cfg.dataset)
    write_summary(summary, out / "summary.csv")
    return summary
