"""GCN, GAT and GIN layers on top of the autodiff core.

GCN propagates over clamped non-negative cosine weights with self-loops.
GAT and GIN see structure only and ignore edge weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .graph import Graph

KINDS = ("gcn", "gat", "gin")


class GraphOps:
    """Constant operators derived once from a graph and reused every forward pass."""

    def __init__(self, g: Graph):
        self.graph = g.undirected()
        self.n = g.n_nodes

    @cached_property
    def gcn_adj(self) -> sp.csr_matrix:
        A = self.graph.to_scipy().maximum(0) + sp.identity(self.n, format="csr")
        d = np.asarray(A.sum(axis=1)).ravel()
        inv_sqrt = sp.diags(1.0 / np.sqrt(d))
        return (inv_sqrt @ A @ inv_sqrt).tocsr()

    @cached_property
    def binary_adj(self) -> sp.csr_matrix:
        A = self.graph.to_scipy()
        A.data[:] = 1.0
        return A

    @cached_property
    def edges_with_self(self) -> tuple[np.ndarray, np.ndarray]:
        """(target, source) pairs covering every edge in both directions plus self-loops."""
        dst, src = [], []
        for i in range(self.n):
            dst.append(i)
            src.append(i)
            for j in sorted(self.graph.adj[i]):
                dst.append(i)
                src.append(j)
        return np.array(dst, dtype=np.int64), np.array(src, dtype=np.int64)


def as_ops(g) -> GraphOps:
    return g if isinstance(g, GraphOps) else GraphOps(g)


class Linear:
    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int, bias: bool = True):
        self.W = ad.init_uniform(rng, in_dim, (in_dim, out_dim))
        self.b = ad.init_uniform(rng, in_dim, (1, out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.W.shape[0]:
            raise ShapeError(f"linear layer expects width {self.W.shape[0]}, got {x.shape}")
        out = x @ self.W
        return out + self.b if self.b is not None else out

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {f"{prefix}.W": self.W}
        if self.b is not None:
            params[f"{prefix}.b"] = self.b
        return params


class MLP:
    """Linear -> ReLU -> Linear."""

    def __init__(self, rng, in_dim: int, hidden: int, out_dim: int):
        self.fc1 = Linear(rng, in_dim, hidden)
        self.fc2 = Linear(rng, hidden, out_dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {**self.fc1.parameters(f"{prefix}.fc1"), **self.fc2.parameters(f"{prefix}.fc2")}


def gcn_layer(H: Tensor, g, W: Tensor, b: Tensor | None = None, activation: bool = True) -> Tensor:
    """``act(D^-1/2 (max(A,0) + I) D^-1/2 H W + b)``."""
    ops = as_ops(g)
    if H.shape[0] != ops.n:
        raise ShapeError(f"gcn layer: {H.shape[0]} feature rows for {ops.n} nodes")
    out = ad.aggregate(ops.gcn_adj, ad.matmul(H, W))
    if b is not None:
        out = out + b
    return ad.relu(out) if activation else out


def gat_layer(H: Tensor, g, W: Tensor, a_src: Tensor, a_dst: Tensor, *,
              activation: bool = True, slope: float = 0.2, return_attention: bool = False):
    """Single-head attention over each node's neighbors and itself.

    ``a_src`` and ``a_dst`` are ``F x 1`` columns scoring the source and
    target of every edge; scores pass through LeakyReLU and are softmaxed
    per target node.
    """
    ops = as_ops(g)
    if H.shape[0] != ops.n:
        raise ShapeError(f"gat layer: {H.shape[0]} feature rows for {ops.n} nodes")
    dst, src = ops.edges_with_self
    Wh = ad.matmul(H, W)
    scores = ad.leaky_relu(ad.rows(Wh @ a_dst, dst) + ad.rows(Wh @ a_src, src), slope)
    alpha = ad.segment_softmax(scores, dst, ops.n)
    out = ad.segment_sum(ad.rows(Wh, src) * alpha, dst, ops.n)
    if activation:
        out = ad.relu(out)
    if return_attention:
        return out, alpha
    return out


def gin_layer(H: Tensor, g, mlp: MLP, eps: Tensor) -> Tensor:
    """``MLP((1 + eps) h_i + sum of neighbor h_j)`` with unweighted sums."""
    ops = as_ops(g)
    if H.shape[0] != ops.n:
        raise ShapeError(f"gin layer: {H.shape[0]} feature rows for {ops.n} nodes")
    return mlp(H * (eps + 1.0) + ad.aggregate(ops.binary_adj, H))


@dataclass
class BackboneConfig:
    kind: str = "gcn"
    in_dim: int = 512
    hidden: int = 64
    out_dim: int = 64
    layers: int = 2
    heads: int = 1
    bias: bool = True
    inject_dim: int = 0  # extra input width for layers >= 2 (layerwise injection)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"unknown backbone {self.kind!r}; choose from {KINDS}")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.kind == "gat":
            for w in self.widths[1:]:
                if w % self.heads:
                    raise ValueError(f"width {w} not divisible by {self.heads} heads")

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [self.hidden] * (self.layers - 1) + [self.out_dim]


class Backbone:
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        self.layers = []
        widths = config.widths
        for li in range(config.layers):
            fan_in = widths[li] + (config.inject_dim if li > 0 else 0)
            out = widths[li + 1]
            if config.kind == "gcn":
                self.layers.append(Linear(rng, fan_in, out, bias=config.bias))
            elif config.kind == "gat":
                per_head = out // config.heads
                self.layers.append([
                    (ad.init_uniform(rng, fan_in, (fan_in, per_head)),
                     ad.init_uniform(rng, per_head, (per_head, 1)),
                     ad.init_uniform(rng, per_head, (per_head, 1)))
                    for _ in range(config.heads)])
            else:
                self.layers.append((MLP(rng, fan_in, out, out), Tensor(np.zeros((1, 1)), requires_grad=True)))

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for li, layer in enumerate(self.layers):
            name = f"backbone.{li}"
            if self.config.kind == "gcn":
                params.update(layer.parameters(name))
            elif self.config.kind == "gat":
                for h, (W, a_s, a_d) in enumerate(layer):
                    params.update({f"{name}.h{h}.W": W, f"{name}.h{h}.a_src": a_s,
                                   f"{name}.h{h}.a_dst": a_d})
            else:
                mlp, eps = layer
                params.update(mlp.parameters(name))
                params[f"{name}.eps"] = eps
        return params

    def forward(self, X: Tensor, g, inject: Tensor | None = None) -> Tensor:
        ops = as_ops(g)
        X = ad.as_tensor(X)
        if X.shape[1] != self.config.in_dim:
            raise ShapeError(f"backbone expects {self.config.in_dim} input features, got {X.shape[1]}")
        H = X
        last = len(self.layers) - 1
        for li, layer in enumerate(self.layers):
            if li > 0 and self.config.inject_dim:
                if inject is None:
                    raise ValueError("layerwise injection configured but no explanation vectors given")
                H = ad.concat([H, inject], axis=1)
            act = li < last
            if self.config.kind == "gcn":
                H = gcn_layer(H, ops, layer.W, layer.b, activation=act)
            elif self.config.kind == "gat":
                heads = [gat_layer(H, ops, W, a_s, a_d, activation=act) for W, a_s, a_d in layer]
                H = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
            else:
                mlp, eps = layer
                H = gin_layer(H, ops, mlp, eps)
                if act:
                    H = ad.relu(H)
        return H


def backbone_forward(config: BackboneConfig, X, g, rng=None, backbone: Backbone | None = None) -> Tensor:
    """Embed nodes with a (possibly freshly initialized) backbone; returns ``N x out_dim``."""
    X = ad.as_tensor(X)
    if X.shape[1] != config.in_dim:
        raise ShapeError(f"config expects {config.in_dim} features, data has {X.shape[1]}")
    backbone = backbone or Backbone(config, rng or np.random.default_rng(0))
    return backbone.forward(X, g)


CKPT_MAGIC = b"xnode-ckpt v1\n"


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Header line, one JSON metadata line, then ``name<TAB>shape`` lines each
    followed by row-major little-endian float64 data."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(meta or {}, sort_keys=True).encode() + b"\n")
        fh.write(f"{len(params)}\n".encode())
        for name, arr in params.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            shape = ",".join(str(s) for s in arr.shape)
            fh.write(f"{name}\t{shape}\n".encode())
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.readline() != CKPT_MAGIC:
            raise ValueError(f"{path}: not an xnode checkpoint")
        meta = json.loads(fh.readline())
        count = int(fh.readline())
        params = {}
        for _ in range(count):
            name, shape = fh.readline().decode().rstrip("\n").split("\t")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            size = int(np.prod(dims)) if dims else 1
            buf = fh.read(size * 8)
            if len(buf) != size * 8:
                raise ValueError(f"{path}: truncated block {name!r}")
            params[name] = np.frombuffer(buf, dtype="<f8").reshape(dims).astype(np.float64)
    return params, meta
