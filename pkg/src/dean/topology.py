"""Undirected graphs, per-edge weights, weighted Laplacians and their spectra.

Nodes are labelled ``0..N-1``.  Edges are stored as sorted pairs ``(i, j)``
with ``i < j``; every lookup that takes an edge accepts either orientation.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ParameterError, StructuralError

Edge = tuple[int, int]


def edge_key(i: int, j: int) -> Edge:
    """Canonical (sorted) key of the unordered pair {i, j}."""
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class Graph:
    """Connected undirected simple graph on ``n_nodes`` nodes."""

    n_nodes: int
    edges: tuple[Edge, ...]

    def __post_init__(self):
        if self.n_nodes < 2:
            raise StructuralError(f"a graph needs at least 2 nodes, got {self.n_nodes}")
        canon = []
        seen = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise StructuralError(f"self-loop at node {i}")
            if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise StructuralError(f"edge ({i}, {j}) references a node outside 0..{self.n_nodes - 1}")
            key = edge_key(i, j)
            if key in seen:
                raise StructuralError(f"duplicate edge {key}")
            seen.add(key)
            canon.append(key)
        object.__setattr__(self, "edges", tuple(sorted(canon)))
        if not self.is_connected():
            raise StructuralError("graph is not connected")

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        adj = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return tuple(tuple(sorted(a)) for a in adj)

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors])

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def has_edge(self, i: int, j: int) -> bool:
        return edge_key(i, j) in self._edge_set

    @cached_property
    def _edge_set(self) -> frozenset:
        return frozenset(self.edges)

    def is_connected(self) -> bool:
        adj = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == self.n_nodes

    def relabel(self, perm: Iterable[int]) -> "Graph":
        """Graph with node ``i`` renamed to ``perm[i]``."""
        perm = list(perm)
        return Graph(self.n_nodes, tuple(edge_key(perm[i], perm[j]) for i, j in self.edges))

    @classmethod
    def path(cls, n: int) -> "Graph":
        return cls(n, tuple((i, i + 1) for i in range(n - 1)))

    @classmethod
    def complete(cls, n: int) -> "Graph":
        return cls(n, tuple((i, j) for i in range(n) for j in range(i + 1, n)))


@dataclass(frozen=True)
class EdgeWeights:
    """Positive weight per edge; lookups are symmetric in ``(i, j)``.

    Used both for the consensus weights ``h_ij`` and for per-link step sizes.
    """

    graph: Graph
    values: Mapping[Edge, float] = field(repr=False)

    def __post_init__(self):
        canon = {}
        for (i, j), w in self.values.items():
            key = edge_key(int(i), int(j))
            if not self.graph.has_edge(*key):
                raise StructuralError(f"weight given for non-edge {key}")
            if key in canon:
                raise StructuralError(f"edge {key} has two weights")
            w = float(w)
            if not (w > 0.0 and math.isfinite(w)):
                raise StructuralError(f"weight on edge {key} must be positive and finite, got {w}")
            canon[key] = w
        missing = [e for e in self.graph.edges if e not in canon]
        if missing:
            raise StructuralError(f"missing weight for edge(s) {missing[:5]}")
        object.__setattr__(self, "values", dict(sorted(canon.items())))

    def __getitem__(self, edge: Edge) -> float:
        return self.values[edge_key(*edge)]

    def get(self, i: int, j: int) -> float:
        return self.values[edge_key(i, j)]

    def as_array(self) -> np.ndarray:
        """Weights in ``graph.edges`` order."""
        return np.array([self.values[e] for e in self.graph.edges])

    def max(self) -> float:
        return max(self.values.values())

    def min(self) -> float:
        return min(self.values.values())

    def scaled(self, factor: float) -> "EdgeWeights":
        return EdgeWeights(self.graph, {e: factor * w for e, w in self.values.items()})

    @classmethod
    def uniform(cls, graph: Graph, value: float = 1.0) -> "EdgeWeights":
        return cls(graph, {e: value for e in graph.edges})

    @classmethod
    def from_array(cls, graph: Graph, arr) -> "EdgeWeights":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (graph.n_edges,):
            raise StructuralError(f"expected {graph.n_edges} weights, got shape {arr.shape}")
        return cls(graph, dict(zip(graph.edges, arr.tolist())))


def target_edge_count(n_nodes: int, avg_degree: float) -> int:
    """Number of links giving the requested mean degree, rounded down."""
    return int(math.floor(avg_degree * n_nodes / 2.0 + 1e-9))


def _wilson_tree(n: int, rng: np.random.Generator) -> list[Edge]:
    # loop-erased random walks on K_n give a uniform spanning tree
    in_tree = np.zeros(n, dtype=bool)
    root = int(rng.integers(n))
    in_tree[root] = True
    nxt = np.full(n, -1)
    for start in rng.permutation(n):
        u = int(start)
        while not in_tree[u]:
            v = int(rng.integers(n - 1))
            if v >= u:
                v += 1
            nxt[u] = v
            u = v
        u = int(start)
        while not in_tree[u]:
            in_tree[u] = True
            u = int(nxt[u])
    return [edge_key(i, int(nxt[i])) for i in range(n) if i != root]


def random_connected_graph(n_nodes: int, avg_degree: float, seed: int) -> Graph:
    """Uniform random spanning tree plus uniformly chosen extra links.

    The edge count is ``floor(avg_degree * n_nodes / 2)``; it must lie between
    the tree size ``N-1`` and the complete-graph size ``N(N-1)/2``.
    """
    if n_nodes < 2:
        raise ParameterError(f"need at least 2 nodes, got {n_nodes}")
    n_edges = target_edge_count(n_nodes, avg_degree)
    max_edges = n_nodes * (n_nodes - 1) // 2
    if n_edges < n_nodes - 1:
        raise ParameterError(
            f"avg_degree={avg_degree} gives {n_edges} links, fewer than the {n_nodes - 1} of a spanning tree"
        )
    if n_edges > max_edges:
        raise ParameterError(f"avg_degree={avg_degree} needs {n_edges} links, more than the complete graph's {max_edges}")
    rng = np.random.default_rng(seed)
    edges = _wilson_tree(n_nodes, rng)
    present = set(edges)
    extra = n_edges - len(edges)
    if extra:
        candidates = [(i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes) if (i, j) not in present]
        picks = rng.choice(len(candidates), size=extra, replace=False)
        edges.extend(candidates[int(p)] for p in picks)
    return Graph(n_nodes, tuple(edges))


def laplacian(graph: Graph, weights: EdgeWeights | None = None) -> np.ndarray:
    """Weighted Laplacian; ``weights=None`` gives the unit-weight ``L_G``."""
    if weights is not None and weights.graph.edges != graph.edges:
        missing = set(graph.edges) - set(weights.values)
        if missing:
            raise StructuralError(f"missing weight for edge(s) {sorted(missing)[:5]}")
    L = np.zeros((graph.n_nodes, graph.n_nodes))
    for i, j in graph.edges:
        h = 1.0 if weights is None else weights.get(i, j)
        L[i, j] = L[j, i] = -h
        L[i, i] += h
        L[j, j] += h
    return L


def spectrum(L: np.ndarray) -> tuple[float, float]:
    """``(lambda_2, lambda_max)`` of a symmetric Laplacian."""
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise StructuralError(f"expected a square matrix, got shape {L.shape}")
    if not np.array_equal(L, L.T):
        raise StructuralError("Laplacian is not symmetric")
    eig = np.linalg.eigvalsh(L)
    return float(eig[1]), float(eig[-1])


def laplacian_rank(L: np.ndarray) -> int:
    eig = np.linalg.eigvalsh(L)
    return int(np.sum(eig > 1e-10 * max(eig[-1], 0.0)))


def write_edge_list(path, graph: Graph, weights: EdgeWeights | None = None) -> None:
    lines = [f"{graph.n_nodes} {graph.n_edges}"]
    for i, j in graph.edges:
        w = 1.0 if weights is None else weights.get(i, j)
        lines.append(f"{i} {j} {w!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path) -> tuple[Graph, EdgeWeights]:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not rows or len(rows[0]) != 2:
        raise StructuralError(f"{path}: first line must be 'N E'")
    n, m = int(rows[0][0]), int(rows[0][1])
    body = rows[1:]
    if len(body) != m:
        raise StructuralError(f"{path}: header announces {m} edges, found {len(body)}")
    edges, vals = [], {}
    for r in body:
        if len(r) != 3:
            raise StructuralError(f"{path}: malformed edge line {' '.join(r)!r}")
        i, j, w = int(r[0]), int(r[1]), float(r[2])
        edges.append((i, j))
        vals[(i, j)] = w
    g = Graph(n, tuple(edges))
    return g, EdgeWeights(g, vals)
