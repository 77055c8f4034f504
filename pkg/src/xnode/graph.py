"""Weighted kNN graphs over feature vectors, plus their text file format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

GRAPH_MAGIC = "xnode-graph"
FEAT_MAGIC = "xnode-feat"
FEAT_BINARY_MAGIC = b"XNFEAT01"
# cosines closer than this are treated as tied; lower index then wins
TIE_DECIMALS = 12


class DegenerateFeatureError(ValueError):
    pass


class GraphFormatError(ValueError):
    def __init__(self, msg: str, lineno: int | None = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {msg}" if lineno is not None else msg)


@dataclass
class Graph:
    """Sparse weighted adjacency stored as one ``{neighbor: weight}`` dict per node."""

    n_nodes: int
    adj: list[dict[int, float]]
    symmetric: bool = True
    k: int = 0

    def __post_init__(self):
        if len(self.adj) != self.n_nodes:
            raise ValueError(f"adjacency has {len(self.adj)} rows for {self.n_nodes} nodes")
        for i, nbrs in enumerate(self.adj):
            if i in nbrs:
                raise ValueError(f"self-loop on node {i}")
            for j, w in nbrs.items():
                if not 0 <= j < self.n_nodes:
                    raise ValueError(f"edge ({i}, {j}) points outside the graph")
                if self.symmetric and self.adj[j].get(i) != w:
                    raise ValueError(f"symmetric graph missing mirror of edge ({i}, {j}, {w})")

    @classmethod
    def empty(cls, n: int, symmetric: bool = True, k: int = 0) -> "Graph":
        return cls(n, [{} for _ in range(n)], symmetric, k)

    @classmethod
    def from_edges(cls, n: int, edges, symmetric: bool = True, k: int = 0) -> "Graph":
        adj = [{} for _ in range(n)]
        for i, j, w in edges:
            adj[i][j] = float(w)
            if symmetric:
                adj[j][i] = float(w)
        return cls(n, adj, symmetric, k)

    def neighbors(self, i: int) -> dict[int, float]:
        if not 0 <= i < self.n_nodes:
            raise IndexError(f"node {i} out of range for graph with {self.n_nodes} nodes")
        return self.adj[i]

    def edges(self):
        """Yield ``(i, j, w)``; undirected edges once with ``i < j``."""
        for i, nbrs in enumerate(self.adj):
            for j in sorted(nbrs):
                if not self.symmetric or i < j:
                    yield i, j, nbrs[j]

    @property
    def n_edges(self) -> int:
        return sum(1 for _ in self.edges())

    def undirected(self) -> "Graph":
        if self.symmetric:
            return self
        adj = [dict(nbrs) for nbrs in self.adj]
        for i, nbrs in enumerate(self.adj):
            for j, w in nbrs.items():
                adj[j].setdefault(i, w)
        return Graph(self.n_nodes, adj, True, self.k)

    def to_scipy(self) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for i, nbrs in enumerate(self.adj):
            for j, w in nbrs.items():
                rows.append(i)
                cols.append(j)
                vals.append(w)
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_nodes, self.n_nodes))

    def permuted(self, perm) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = list(perm)
        adj = [{} for _ in range(self.n_nodes)]
        for i, nbrs in enumerate(self.adj):
            adj[perm[i]] = {perm[j]: w for j, w in nbrs.items()}
        return Graph(self.n_nodes, adj, self.symmetric, self.k)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.n_nodes, self.symmetric, self.k, self.adj) == (
            other.n_nodes, other.symmetric, other.k, other.adj)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"vectors differ in length: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateFeatureError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def validate_features(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {X.shape}")
    if not np.isfinite(X).all():
        bad = np.argwhere(~np.isfinite(X))[0]
        raise ValueError(f"non-finite feature at row {bad[0]}, column {bad[1]}")
    return X


def build_knn_graph(X, k: int, symmetrize: bool = True) -> Graph:
    """Link every node to its ``k`` most cosine-similar other nodes.

    Ties are broken towards the lower node index. With ``symmetrize`` the
    union of selected directed edges is mirrored.
    """
    X = validate_features(X)
    n = X.shape[0]
    if not 0 < k < n:
        raise ValueError(f"need 0 < k < N, got k={k}, N={n}")
    norms = np.linalg.norm(X, axis=1)
    if (norms == 0).any():
        raise DegenerateFeatureError(f"zero-norm feature rows: {np.flatnonzero(norms == 0).tolist()}")
    unit = X / norms[:, None]
    index = np.arange(n)
    adj = [{} for _ in range(n)]
    for i in range(n):
        sims = np.round(unit @ unit[i], TIE_DECIMALS)
        sims[i] = -np.inf
        # lexsort: last key is primary
        order = np.lexsort((index, -sims))[:k]
        for j in order:
            w = cosine_similarity(X[i], X[j])
            adj[i][int(j)] = w
            if symmetrize:
                adj[int(j)][i] = w
    g = Graph(n, adj, symmetrize, k)
    _check_weights(g, X)
    return g


def _check_weights(g: Graph, X: np.ndarray):
    for i, j, w in g.edges():
        if not math.isclose(w, cosine_similarity(X[i], X[j]), abs_tol=1e-12):
            raise AssertionError(f"edge ({i}, {j}) weight {w} is not the feature cosine")


def save_graph(g: Graph, path) -> None:
    lines = [f"{GRAPH_MAGIC} v1 {g.n_nodes} {int(g.symmetric)} {g.k}"]
    lines += [f"{i}\t{j}\t{w:.17g}" for i, j, w in g.edges()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_graph(path) -> Graph:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise GraphFormatError("empty file", 1)
    head = text[0].split()
    if len(head) != 5 or head[0] != GRAPH_MAGIC or head[1] != "v1":
        raise GraphFormatError(f"bad header {text[0]!r}", 1)
    try:
        n, symmetric, k = int(head[2]), head[3] == "1", int(head[4])
    except ValueError:
        raise GraphFormatError(f"bad header {text[0]!r}", 1) from None
    if head[3] not in ("0", "1"):
        raise GraphFormatError("symmetric flag must be 0 or 1", 1)
    adj = [{} for _ in range(n)]
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise GraphFormatError(f"expected 'i<TAB>j<TAB>w', got {line!r}", lineno)
        try:
            i, j, w = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise GraphFormatError(f"unparseable edge {line!r}", lineno) from None
        if not (0 <= i < n and 0 <= j < n):
            raise GraphFormatError(f"node index out of range in {line!r}", lineno)
        if i == j:
            raise GraphFormatError(f"self-loop on node {i}", lineno)
        if symmetric and i >= j:
            raise GraphFormatError("symmetric graphs list each edge once with i < j", lineno)
        if j in adj[i]:
            raise GraphFormatError(f"duplicate edge ({i}, {j})", lineno)
        adj[i][j] = w
        if symmetric:
            adj[j][i] = w
    return Graph(n, adj, symmetric, k)


def save_features(X, path, binary: bool = False) -> None:
    X = validate_features(X)
    n, d = X.shape
    if binary:
        with open(path, "wb") as fh:
            fh.write(FEAT_BINARY_MAGIC + struct.pack("<II", n, d))
            fh.write(X.astype("<f8").tobytes())
        return
    lines = [f"{FEAT_MAGIC} v1 {n} {d}"]
    lines += [",".join(f"{v:.17g}" for v in row) for row in X]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw.startswith(FEAT_BINARY_MAGIC):
        n, d = struct.unpack("<II", raw[8:16])
        body = raw[16:]
        if len(body) != n * d * 8:
            raise GraphFormatError(f"binary feature file holds {len(body)} bytes, expected {n * d * 8}")
        return validate_features(np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64))
    lines = raw.decode("utf-8").splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or head[0] != FEAT_MAGIC or head[1] != "v1":
        raise GraphFormatError("bad feature header", 1)
    n, d = int(head[2]), int(head[3])
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError:
            raise GraphFormatError(f"unparseable feature row {line!r}", lineno) from None
        if len(row) != d:
            raise GraphFormatError(f"row has {len(row)} values, header says {d}", lineno)
        rows.append(row)
    if len(rows) != n:
        raise GraphFormatError(f"header says {n} rows, found {len(rows)}")
    return validate_features(np.array(rows, dtype=np.float64).reshape(n, d))
