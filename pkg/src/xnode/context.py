"""Per-node structural descriptors and the context vectors built from them.

All descriptors read the undirected view of the graph. Conventions for
isolated nodes: degree, clustering, agreement, centralities and mean edge
weight are all 0.
"""

from __future__ import annotations

import csv
import warnings
from collections import Counter, deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Graph

CONTEXT_KEYS = (
    "degree",
    "clustering",
    "two_hop_agreement",
    "eigencentrality",
    "betweenness",
    "avg_edge_weight",
    "community",
)
EIGEN_MAX_ITER = 20000
CSV_COLUMNS = ("node",) + CONTEXT_KEYS + ("top_feat_idx", "top_feat_val")


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class LabelSet:
    labels: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.labels.shape != self.mask.shape:
            raise ValueError("labels and mask must have the same length")

    def visible(self, i: int) -> int | None:
        return int(self.labels[i]) if self.mask[i] else None


@dataclass
class ContextVector:
    degree: int
    clustering: float
    two_hop_agreement: float
    eigencentrality: float
    betweenness: float
    avg_edge_weight: float
    community: int
    top_feature_index: int | None = None
    top_feature_value: float | None = None

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, key) for key in CONTEXT_KEYS], dtype=np.float64)

    def key_values(self) -> dict:
        kv = {key: getattr(self, key) for key in CONTEXT_KEYS}
        if self.top_feature_index is not None:
            kv["top_feature_index"] = self.top_feature_index
            kv["top_feature_value"] = self.top_feature_value
        return kv


def degree(g: Graph, i: int) -> int:
    return len(g.undirected().neighbors(i))


def clustering_coefficient(g: Graph, i: int) -> float:
    u = g.undirected()
    nbrs = list(u.neighbors(i))
    deg = len(nbrs)
    if deg < 2:
        return 0.0
    links = sum(1 for a in range(deg) for b in range(a + 1, deg) if nbrs[b] in u.adj[nbrs[a]])
    return links / (deg * (deg - 1) / 2)


def two_hop_nodes(g: Graph, i: int) -> set[int]:
    u = g.undirected()
    first = set(u.neighbors(i))
    second = {k for j in first for k in u.adj[j]}
    return (first | second) - {i}


def two_hop_label_agreement(g: Graph, labels: LabelSet, i: int) -> float:
    """Share of visibly-labeled nodes within two hops that carry ``i``'s label.

    Only training-mask labels are visible, including ``i``'s own; an
    unlabeled ``i`` scores 0.
    """
    own = labels.visible(i)
    if own is None:
        return 0.0
    seen = [labels.visible(j) for j in two_hop_nodes(g, i)]
    seen = [y for y in seen if y is not None]
    if not seen:
        return 0.0
    return sum(y == own for y in seen) / len(seen)


def connected_components(g: Graph) -> list[list[int]]:
    u = g.undirected()
    comp = [-1] * g.n_nodes
    out = []
    for s in range(g.n_nodes):
        if comp[s] >= 0:
            continue
        members, queue = [], deque([s])
        comp[s] = len(out)
        while queue:
            v = queue.popleft()
            members.append(v)
            for w in u.adj[v]:
                if comp[w] < 0:
                    comp[w] = len(out)
                    queue.append(w)
        out.append(sorted(members))
    return out


def eigenvector_centrality(g: Graph, tol: float = 1e-8, max_iter: int = 1000) -> np.ndarray:
    """Perron vector of ``|A|`` per connected component, unit L2 norm within each.

    Iterates ``x <- (|A| + I) x``, which shares the dominant eigenvector with
    ``|A|`` but does not oscillate on bipartite components.
    """
    A = abs(g.undirected().to_scipy())
    ec = np.zeros(g.n_nodes)
    for members in connected_components(g):
        if len(members) == 1:
            continue
        sub = A[members][:, members]
        x = np.full(len(members), 1.0 / np.sqrt(len(members)))
        for _ in range(max_iter):
            nxt = sub @ x + x
            nxt /= np.linalg.norm(nxt)
            done = np.max(np.abs(nxt - x)) < tol
            x = nxt
            if done:
                break
        else:
            warnings.warn(f"eigenvector centrality did not converge in {max_iter} iterations "
                          f"on a component of {len(members)} nodes", ConvergenceWarning)
        ec[members] = x
    return ec


def betweenness_centrality(g: Graph) -> np.ndarray:
    """Brandes betweenness over hop-count shortest paths, normalized to [0, 1]."""
    u = g.undirected()
    n = g.n_nodes
    bc = np.zeros(n)
    for s in range(n):
        stack = []
        preds = [[] for _ in range(n)]
        sigma = np.zeros(n)
        sigma[s] = 1.0
        dist = np.full(n, -1)
        dist[s] = 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            stack.append(v)
            for w in u.adj[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = np.zeros(n)
        while stack:
            w = stack.pop()
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                bc[w] += delta[w]
    if n < 3:
        return np.zeros(n)
    # each unordered pair was counted from both ends
    return bc / 2.0 / ((n - 1) * (n - 2) / 2.0)


def average_edge_weight(g: Graph, i: int) -> float:
    nbrs = g.undirected().neighbors(i)
    if not nbrs:
        return 0.0
    return float(np.mean(list(nbrs.values())))


def community_membership(g: Graph, seed: int = 0, max_sweeps: int = 100) -> np.ndarray:
    """Synchronous label propagation.

    Initial labels are a seeded permutation of node ids. Each sweep every node
    takes the most frequent label among itself and its neighbors, smallest
    label on ties. Labels are renumbered 0..C-1 by first appearance.
    """
    u = g.undirected()
    n = g.n_nodes
    labels = np.empty(n, dtype=np.int64)
    labels[np.random.default_rng(seed).permutation(n)] = np.arange(n)
    for _ in range(max_sweeps):
        new = labels.copy()
        for v in range(n):
            votes = Counter(int(labels[w]) for w in u.adj[v])
            votes[int(labels[v])] += 1
            best = max(votes.values())
            new[v] = min(lab for lab, c in votes.items() if c == best)
        if np.array_equal(new, labels):
            break
        labels = new
    remap: dict[int, int] = {}
    return np.array([remap.setdefault(int(lab), len(remap)) for lab in labels], dtype=np.int64)


def _top_feature(X, i):
    if X is None:
        return None, None
    row = np.asarray(X[i], dtype=np.float64)
    j = int(np.argmax(row))
    return j, float(row[j])


def build_context(g: Graph, labels: LabelSet, i: int, X=None, seed: int = 0) -> ContextVector:
    """Context of one node. Recomputes graph-wide centralities; prefer
    ``build_all_contexts`` for more than a handful of nodes."""
    return build_all_contexts(g, labels, X, seed)[1][i]


def build_all_contexts(g: Graph, labels: LabelSet, X=None, seed: int = 0):
    """Return the ``N x 7`` context matrix and the matching ``ContextVector`` list."""
    g = g.undirected()
    # kNN graphs over clustered data have eigengaps near 1; the default cap is too low
    ec = eigenvector_centrality(g, max_iter=EIGEN_MAX_ITER)
    bc = betweenness_centrality(g)
    comm = community_membership(g, seed=seed)
    vectors = []
    for i in range(g.n_nodes):
        idx, val = _top_feature(X, i)
        vectors.append(ContextVector(
            degree=degree(g, i),
            clustering=clustering_coefficient(g, i),
            two_hop_agreement=two_hop_label_agreement(g, labels, i),
            eigencentrality=float(ec[i]),
            betweenness=float(bc[i]),
            avg_edge_weight=average_edge_weight(g, i),
            community=int(comm[i]),
            top_feature_index=idx,
            top_feature_value=val,
        ))
    C = np.array([v.as_array() for v in vectors]).reshape(g.n_nodes, len(CONTEXT_KEYS))
    return C, vectors


def normalize_contexts(C, train_mask=None, stats=None):
    """Z-score each column with statistics from the training rows.

    Returns ``(normalized, mean, std)``. Zero-variance columns map to 0.
    Pass ``stats=(mean, std)`` to reuse earlier statistics.
    """
    C = np.asarray(C, dtype=np.float64)
    if stats is None:
        ref = C if train_mask is None else C[np.asarray(train_mask, dtype=bool)]
        if ref.shape[0] < 2:
            raise ValueError("need at least two rows to compute normalization statistics")
        mean, std = ref.mean(axis=0), ref.std(axis=0)
    else:
        mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    safe = np.where(std > 0, std, 1.0)
    out = np.where(std > 0, (C - mean) / safe, 0.0)
    return out, mean, std


def save_contexts(vectors: list[ContextVector], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for i, v in enumerate(vectors):
            w.writerow([i, v.degree] + [repr(float(getattr(v, k))) for k in CONTEXT_KEYS[1:6]]
                       + [v.community,
                          "" if v.top_feature_index is None else v.top_feature_index,
                          "" if v.top_feature_value is None else repr(v.top_feature_value)])


def load_contexts(path) -> list[ContextVector]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected context columns {reader.fieldnames}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                if int(row["node"]) != len(out):
                    raise ValueError("rows must be ordered by node id")
                out.append(ContextVector(
                    degree=int(row["degree"]),
                    clustering=float(row["clustering"]),
                    two_hop_agreement=float(row["two_hop_agreement"]),
                    eigencentrality=float(row["eigencentrality"]),
                    betweenness=float(row["betweenness"]),
                    avg_edge_weight=float(row["avg_edge_weight"]),
                    community=int(row["community"]),
                    top_feature_index=int(row["top_feat_idx"]) if row["top_feat_idx"] else None,
                    top_feature_value=float(row["top_feat_val"]) if row["top_feat_val"] else None,
                ))
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return out


def context_matrix(vectors: list[ContextVector]) -> np.ndarray:
    return np.array([v.as_array() for v in vectors]).reshape(len(vectors), len(CONTEXT_KEYS))
