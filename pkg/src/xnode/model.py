"""Self-explaining node classifier.

A backbone embeds nodes (``h``); the reasoner maps each node's normalized
context to an explanation vector ``e`` in (0, 1); the decoder rebuilds ``h``
from ``e``; the classifier reads ``concat(h, e)``. Training minimizes

    CE + alpha * ||e - target(c)||^2 + beta * ||h_hat - h||^2

averaged over training nodes.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .backbones import MLP, Backbone, BackboneConfig, Linear, as_ops, load_checkpoint, save_checkpoint
from .context import CONTEXT_KEYS, normalize_contexts

CONTEXT_DIM = len(CONTEXT_KEYS)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    backbone: str = "gcn"
    layers: int = 2
    d_h: int = 64
    d_e: int = CONTEXT_DIM
    heads: int = 1
    reasoner_hidden: int = 32
    decoder_hidden: int = 32
    cls_hidden: int = 32
    use_reasoner: bool = True
    alpha: float = 0.1
    beta: float = 0.1
    lr: float = 0.01
    epochs: int = 200
    optimizer: str = "adam"
    seed: int = 42
    inject_mode: str = "concat"  # or "layerwise"
    recon_detach: bool = True
    align_target: str = "sigmoid"  # or "raw"
    record_timing: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative, got alpha={self.alpha}, beta={self.beta}")
        if self.use_reasoner and self.d_e != CONTEXT_DIM:
            raise ValueError(f"d_e must equal the context width {CONTEXT_DIM} for the alignment term")
        if self.inject_mode not in ("concat", "layerwise"):
            raise ValueError(f"unknown inject_mode {self.inject_mode!r}")
        if self.align_target not in ("sigmoid", "raw"):
            raise ValueError(f"unknown align_target {self.align_target!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Build from string or typed values, ignoring unknown keys."""
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if isinstance(v, str):
                if f.type in ("bool", bool):
                    v = v.strip().lower() in ("1", "true", "yes", "on")
                elif f.type in ("int", int):
                    v = int(v)
                elif f.type in ("float", float):
                    v = float(v)
                else:
                    v = v.strip()
            kwargs[f.name] = v
        return cls(**kwargs)


@dataclass
class Forward:
    H: Tensor
    E: Tensor | None
    H_hat: Tensor | None
    logits: Tensor


class XNodeModel:
    def __init__(self, config: TrainConfig, in_dim: int, n_classes: int, rng: np.random.Generator | None = None):
        self.config = config
        self.in_dim = in_dim
        self.n_classes = n_classes
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        layerwise = config.use_reasoner and config.inject_mode == "layerwise"
        self.backbone = Backbone(BackboneConfig(
            kind=config.backbone, in_dim=in_dim, hidden=config.d_h, out_dim=config.d_h,
            layers=config.layers, heads=config.heads,
            inject_dim=config.d_e if layerwise else 0), rng)
        cls_in = config.d_h + (config.d_e if config.use_reasoner else 0)
        self.classifier = MLP(rng, cls_in, config.cls_hidden, n_classes)
        if config.use_reasoner:
            self.reasoner1 = Linear(rng, CONTEXT_DIM, config.reasoner_hidden)
            self.reasoner2 = Linear(rng, config.reasoner_hidden, config.d_e)
            self.decoder = MLP(rng, config.d_e, config.decoder_hidden, config.d_h)
        self.ctx_mean = np.zeros(CONTEXT_DIM)
        self.ctx_std = np.ones(CONTEXT_DIM)

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.backbone.parameters())
        params.update(self.classifier.parameters("classifier"))
        if self.config.use_reasoner:
            params.update(self.reasoner1.parameters("reasoner.fc1"))
            params.update(self.reasoner2.parameters("reasoner.fc2"))
            params.update(self.decoder.parameters("decoder"))
        return params

    def reason(self, C: Tensor) -> Tensor:
        C = ad.as_tensor(C)
        if C.data.ndim != 2 or C.shape[1] != CONTEXT_DIM:
            raise ShapeError(f"reasoner expects N x {CONTEXT_DIM} contexts, got {C.shape}")
        return ad.sigmoid(self.reasoner2(ad.relu(self.reasoner1(C))))

    def decode(self, E: Tensor) -> Tensor:
        return self.decoder(E)

    def classify(self, H: Tensor, E: Tensor | None) -> Tensor:
        z = ad.concat([H, E], axis=1) if E is not None else H
        return self.classifier(z)

    def forward(self, X, g, C_norm=None) -> Forward:
        ops = as_ops(g)
        if not self.config.use_reasoner:
            H = self.backbone.forward(X, ops)
            return Forward(H, None, None, self.classify(H, None))
        if C_norm is None:
            raise ValueError("reasoner model needs normalized contexts")
        E = self.reason(C_norm)
        inject = E if self.config.inject_mode == "layerwise" else None
        H = self.backbone.forward(X, ops, inject=inject)
        return Forward(H, E, self.decode(E), self.classify(H, E))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.parameters()
        if set(params) != set(state):
            raise KeyError(f"parameter mismatch: {sorted(set(params) ^ set(state))}")
        for k, p in params.items():
            if p.shape != state[k].shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} vs model {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def normalize(self, C) -> np.ndarray:
        return normalize_contexts(C, stats=(self.ctx_mean, self.ctx_std))[0]

    def save(self, path, extra: dict | None = None):
        meta = {"config": asdict(self.config), "in_dim": self.in_dim, "n_classes": self.n_classes,
                "ctx_mean": self.ctx_mean.tolist(), "ctx_std": self.ctx_std.tolist()}
        meta.update(extra or {})
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> tuple["XNodeModel", dict]:
        state, meta = load_checkpoint(path)
        model = cls(TrainConfig(**meta["config"]), meta["in_dim"], meta["n_classes"])
        model.load_state_dict(state)
        model.ctx_mean = np.array(meta["ctx_mean"])
        model.ctx_std = np.array(meta["ctx_std"])
        return model, meta


def alignment_target(C_norm: np.ndarray, mode: str = "sigmoid") -> np.ndarray:
    return ad._sigmoid(np.asarray(C_norm, dtype=np.float64)) if mode == "sigmoid" else np.asarray(C_norm)


def joint_loss(logits: Tensor, y, E: Tensor | None, C_target, H_hat: Tensor | None, H: Tensor | None,
               alpha: float, beta: float, detach: bool = True) -> tuple[Tensor, dict[str, float]]:
    """Classification + weighted alignment + weighted reconstruction, each a mean over rows.

    With ``detach`` the reconstruction target ``H`` is a constant.
    Returns the total as a tensor and the unweighted components as floats.
    """
    if alpha < 0 or beta < 0:
        raise ValueError(f"loss weights must be non-negative, got alpha={alpha}, beta={beta}")
    ce = ad.softmax_cross_entropy(logits, y)
    if E is None:
        return ce, {"ce": ce.item(), "align": 0.0, "recon": 0.0, "total": ce.item()}
    align = ad.mse(E, ad.as_tensor(C_target))
    recon = ad.mse(H_hat, H.detach() if detach else H)
    total = ce + align * alpha + recon * beta
    return total, {"ce": ce.item(), "align": align.item(), "recon": recon.item(), "total": total.item()}


@dataclass
class EpochLog:
    epoch: int
    ce: float
    align: float
    recon: float
    total: float
    train_acc: float
    val_acc: float
    val_ce: float
    time_s: float


@dataclass
class TrainReport:
    alpha: float
    beta: float
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = float("nan")
    peak_mem_mb: float = 0.0

    @property
    def mean_epoch_time(self) -> float:
        return float(np.mean([e.time_s for e in self.epochs])) if self.epochs else 0.0

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f.name for f in fields(EpochLog)])
            for e in self.epochs:
                w.writerow([e.epoch] + [repr(float(getattr(e, f.name))) for f in fields(EpochLog)[1:]])


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == y).mean()) if len(y) else float("nan")


def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    if not len(y):
        return float("nan")
    z = logits - logits.max(axis=1, keepdims=True)
    return float((np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]).mean())


def train(g, X, C, labels, masks, config: TrainConfig, seed: int | None = None,
          n_classes: int | None = None):
    """Full-graph training; keeps the parameters of the best validation epoch.

    ``C`` is the raw context matrix; it is z-scored with training-row
    statistics. ``masks`` is ``(train_mask, val_mask)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    train_mask, val_mask = (np.asarray(m, dtype=bool) for m in masks[:2])
    if (train_mask & val_mask).any():
        raise ValueError("train and validation masks overlap")
    if len(y) != X.shape[0] or len(train_mask) != X.shape[0]:
        raise ShapeError(f"{X.shape[0]} feature rows, {len(y)} labels, {len(train_mask)} mask entries")
    if seed is not None and seed != config.seed:
        config = TrainConfig(**{**asdict(config), "seed": seed})
    n_classes = n_classes or int(y.max()) + 1
    model = XNodeModel(config, X.shape[1], n_classes)
    ops = as_ops(g)
    train_idx, val_idx = np.flatnonzero(train_mask), np.flatnonzero(val_mask)
    y_train, y_val = y[train_idx], y[val_idx]

    C_norm = target = None
    if config.use_reasoner:
        C_norm, model.ctx_mean, model.ctx_std = normalize_contexts(C, train_mask)
        target = alignment_target(C_norm[train_idx], config.align_target)
    Xt = Tensor(X)
    Ct = Tensor(C_norm) if C_norm is not None else None

    params = list(model.parameters().values())
    opt = (ad.Adam if config.optimizer == "adam" else ad.SGD)(params, lr=config.lr)
    report = TrainReport(config.alpha, config.beta)
    best_state, best_key = model.state_dict(), (-1.0, -np.inf)
    param_bytes = sum(p.data.nbytes for p in params)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        pre_step = model.state_dict()
        opt.zero_grad()
        out = model.forward(Xt, ops, Ct)
        pick = lambda t: ad.rows(t, train_idx) if t is not None else None
        loss, parts = joint_loss(pick(out.logits), y_train, pick(out.E), target,
                                 pick(out.H_hat), pick(out.H), config.alpha, config.beta,
                                 detach=config.recon_detach)
        for name, v in parts.items():
            if not np.isfinite(v):
                raise TrainingError(f"epoch {epoch}: {name} loss is {v} "
                                    f"(ce={parts['ce']}, align={parts['align']}, recon={parts['recon']})")
        if epoch == 0:
            # parameters, gradients and two optimizer moments, plus the recorded graph
            report.peak_mem_mb = (ad.graph_nbytes(loss) + 3 * param_bytes) / 2**20
        loss.backward()
        opt.step()
        logits = out.logits.data
        val_acc = _accuracy(logits[val_idx], y_val)
        val_ce = _cross_entropy(logits[val_idx], y_val)
        elapsed = time.perf_counter() - t0 if config.record_timing else 0.0
        report.epochs.append(EpochLog(epoch, parts["ce"], parts["align"], parts["recon"],
                                      parts["total"], _accuracy(logits[train_idx], y_train),
                                      val_acc, val_ce, elapsed))
        # validation scores were measured with the parameters from before this step's update;
        # ties in accuracy go to the lower validation cross-entropy
        if len(val_idx) and (val_acc, -val_ce) > best_key:
            best_key, best_state, report.best_epoch = (val_acc, -val_ce), pre_step, epoch
    if not len(val_idx):
        best_state, report.best_epoch = model.state_dict(), config.epochs - 1
    model.load_state_dict(best_state)
    report.best_val_acc = best_key[0] if len(val_idx) else float("nan")
    return model, report


def predict(model: XNodeModel, g, X, C=None):
    """Class probabilities and argmax labels for every node."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != model.in_dim:
        raise ShapeError(f"model expects {model.in_dim} features, got {X.shape[1]}")
    C_norm = Tensor(model.normalize(C)) if model.config.use_reasoner else None
    out = model.forward(Tensor(X), g, C_norm)
    probs = ad.softmax(out.logits.data)
    return probs.argmax(axis=1), probs


def explanation_vectors(model: XNodeModel, C) -> np.ndarray:
    return model.reason(Tensor(model.normalize(C))).data
