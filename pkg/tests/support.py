"""Shared fixtures for model-level tests and the acceptance suite."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from xnode import autodiff as ad
from xnode.autodiff import Tensor
from xnode.context import LabelSet, build_all_contexts, normalize_contexts
from xnode.graph import build_knn_graph
from xnode.model import TrainConfig, XNodeModel, alignment_target, joint_loss

from .oracles import numeric_grads, relative_error


def tiny_problem(seed: int = 0, n: int = 12, d: int = 5, k: int = 3, classes: int = 3):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    X = np.eye(d)[y] * 2.0 + rng.normal(size=(n, d))
    g = build_knn_graph(X, k)
    train_mask = np.zeros(n, bool)
    train_mask[: int(n * 0.75)] = True
    C, _ = build_all_contexts(g, LabelSet(y, train_mask), X)
    return X, y, g, C, train_mask


def small_config(kind: str, **overrides) -> TrainConfig:
    base = TrainConfig(backbone=kind, d_h=6, reasoner_hidden=5, decoder_hidden=5, cls_hidden=5,
                       alpha=0.5, beta=0.5, seed=7)
    return replace(base, **overrides)


def model_gradient_errors(kind: str, detach: bool, eps: float = 1e-5) -> dict[str, float]:
    """Relative error between backprop and central differences for every parameter."""
    X, y, g, C, train_mask = tiny_problem()
    cfg = small_config(kind, recon_detach=detach)
    model = XNodeModel(cfg, X.shape[1], 3)
    if kind == "gin":
        for name, p in model.parameters().items():
            if name.endswith(".eps"):
                p.data[:] = 0.1
    C_norm, _, _ = normalize_contexts(C, train_mask)
    target = alignment_target(C_norm)
    Xt, Ct = Tensor(X), Tensor(C_norm)

    def loss(frozen_h=None):
        out = model.forward(Xt, g, Ct)
        H = out.H if frozen_h is None else Tensor(frozen_h)
        total, _ = joint_loss(out.logits, y, out.E, target, out.H_hat, H,
                              cfg.alpha, cfg.beta, detach=detach)
        return total

    params = model.parameters()
    loss().backward()
    # a detached target is a constant: difference the loss with it held at the base point
    frozen = model.forward(Xt, g, Ct).H.data.copy() if detach else None
    numeric = numeric_grads(lambda: loss(frozen).item(), list(params.values()), eps)
    return {name: relative_error(p.grad, n) for (name, p), n in zip(params.items(), numeric)}


def ce_only_reference(cfg: TrainConfig, X, y, g, C, train_mask):
    """Hand-written loop: same model and Adam, gradient from cross-entropy alone."""
    model = XNodeModel(cfg, X.shape[1], int(y.max()) + 1)
    C_norm, _, _ = normalize_contexts(C, train_mask)
    params = list(model.parameters().values())
    opt = ad.Adam(params, lr=cfg.lr)
    idx = np.flatnonzero(train_mask)
    ces = []
    for _ in range(cfg.epochs):
        opt.zero_grad()
        out = model.forward(Tensor(X), g, Tensor(C_norm))
        ce = ad.softmax_cross_entropy(ad.rows(out.logits, idx), y[idx])
        ce.backward()
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        opt.step()
        ces.append(ce.item())
    return model, ces
