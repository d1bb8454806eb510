"""Slide graphs: exact k-NN over patch centroids, symmetric degree
normalization, and a bit-exact graph file format."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._container import read_container, write_container
from .slides import Patch
from .validation import ContractError, require


def knn_graph(centroids, k: int) -> list[tuple[int, int]]:
    """Undirected edge list connecting each point to its k nearest
    Euclidean neighbors (exact brute force).

    Distance ties break toward the lower point index; the per-node directed
    lists are symmetrized by union. With k >= n every point connects to all
    others. Edges come back sorted as (u, v) pairs with u < v.
    """
    pts = np.asarray(centroids, dtype=np.float64)
    require(pts.ndim == 2 and pts.shape[1] == 2, "centroids must be an n x 2 array")
    n = pts.shape[0]
    require(n >= 1, "need at least one point")
    require(k >= 1, "k must be at least 1")
    if n == 1:
        return []
    k = min(k, n - 1)
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    # argsort is stable for "stable"; equal distances keep index order.
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    edges = set()
    for u in range(n):
        for v in order[u]:
            v = int(v)
            edges.add((u, v) if u < v else (v, u))
    return sorted(edges)


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Symmetric degree-normalized message weights.

    ``entries`` holds one (u, v, weight) per ordered pair, with
    weight = 1 / sqrt(deg(u) * deg(v)); self-loop entries are included when
    the adjacency was built with them. Isolated nodes without self-loops
    simply receive no incoming entries.
    """

    n: int
    entries: list[tuple[int, int, float]]
    self_loops: bool = True

    def dense(self) -> np.ndarray:
        mat = np.zeros((self.n, self.n), dtype=np.float64)
        for u, v, w in self.entries:
            mat[u, v] = w
        return mat


def degrees(edges, n: int, self_loops: bool) -> np.ndarray:
    deg = np.zeros(n, dtype=np.int64)
    for u, v in edges:
        deg[u] += 1
        deg[v] += 1
    if self_loops:
        deg += 1
    return deg


def normalize_adjacency(edges, n: int, self_loops: bool = True) -> NormalizedAdjacency:
    """Weights 1/sqrt(deg(u) deg(v)) on the (optionally self-loop-augmented)
    neighbor structure."""
    require(n >= 1, "graph must have at least one node")
    _check_edges(edges, n)
    deg = degrees(edges, n, self_loops).astype(np.float64)
    entries: list[tuple[int, int, float]] = []
    for u, v in edges:
        w = 1.0 / np.sqrt(deg[u] * deg[v])
        entries.append((u, v, w))
        entries.append((v, u, w))
    if self_loops:
        for u in range(n):
            entries.append((u, u, 1.0 / deg[u]))
    return NormalizedAdjacency(n=n, entries=entries, self_loops=self_loops)


def _check_edges(edges, n: int) -> None:
    seen = set()
    for u, v in edges:
        require(0 <= u < n and 0 <= v < n, "edge endpoint out of range")
        require(u != v, "self-edges are not allowed in the edge list")
        key = (min(u, v), max(u, v))
        require(key not in seen, "duplicate undirected edge")
        seen.add(key)


def dense_adjacency(edges, n: int) -> np.ndarray:
    """Raw 0/1 symmetric adjacency matrix (no self entries)."""
    mat = np.zeros((n, n), dtype=np.float64)
    for u, v in edges:
        mat[u, v] = 1.0
        mat[v, u] = 1.0
    return mat


@dataclass(eq=False)
class WSIGraph:
    """One slide as a graph: patch centroids, per-patch features, k-NN edges
    and the slide-level label."""

    centroids: np.ndarray            # n x 2, source-image pixel coords
    features: np.ndarray             # n x d float64
    edges: list[tuple[int, int]]     # undirected, u < v
    label: int
    slide_id: str = ""
    tap: str = ""
    k: int = 0
    _adj_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        require(self.centroids.ndim == 2 and self.centroids.shape[1] == 2,
                "centroids must be n x 2")
        require(self.features.ndim == 2, "features must be n x d")
        require(self.features.shape[0] == self.centroids.shape[0],
                "features and centroids must align")
        self.edges = [(int(u), int(v)) for u, v in self.edges]
        _check_edges(self.edges, self.n)

    @property
    def n(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def normalized_adjacency(self, self_loops: bool = True) -> np.ndarray:
        key = bool(self_loops)
        if key not in self._adj_cache:
            self._adj_cache[key] = normalize_adjacency(
                self.edges, self.n, self_loops=self_loops
            ).dense()
        return self._adj_cache[key]

    def raw_adjacency(self) -> np.ndarray:
        if "raw" not in self._adj_cache:
            self._adj_cache["raw"] = dense_adjacency(self.edges, self.n)
        return self._adj_cache["raw"]


def build_slide_graph(features, patches: list[Patch], k: int, label: int,
                      slide_id: str = "", tap: str = "") -> WSIGraph:
    """Assemble the slide graph from extracted features and their patches."""
    if len(patches) == 0:
        raise ContractError(f"empty slide: no patches for {slide_id or 'slide'}")
    feats = np.asarray(features, dtype=np.float64)
    require(feats.ndim == 2, "features must be an n x d array")
    if feats.shape[0] != len(patches):
        raise ContractError(
            f"feature rows ({feats.shape[0]}) do not match patch count ({len(patches)})"
        )
    centroids = np.array([p.centroid for p in patches], dtype=np.float64)
    edges = knn_graph(centroids, k)
    return WSIGraph(
        centroids=centroids, features=feats, edges=edges,
        label=int(label), slide_id=slide_id, tap=tap, k=int(k),
    )


# --- graph files ---------------------------------------------------------------


def save_graph(path, graph: WSIGraph, config_hash: str = "") -> None:
    edges = np.array(graph.edges, dtype=np.int64).reshape(-1, 2)
    write_container(
        path,
        "graph",
        {
            "n": graph.n,
            "d": graph.dim,
            "k": graph.k,
            "label": graph.label,
            "tap": graph.tap,
            "slide_id": graph.slide_id,
            "config_hash": config_hash,
        },
        {"centroids": graph.centroids, "features": graph.features, "edges": edges},
    )


def load_graph(path) -> tuple[WSIGraph, str]:
    """Read a graph file; returns (graph, config_hash)."""
    _, meta, arrays = read_container(path, expect_kind="graph")
    edges = [(int(u), int(v)) for u, v in arrays["edges"]]
    graph = WSIGraph(
        centroids=arrays["centroids"],
        features=arrays["features"],
        edges=edges,
        label=int(meta["label"]),
        slide_id=meta["slide_id"],
        tap=meta["tap"],
        k=int(meta["k"]),
    )
    require(graph.n == int(meta["n"]) and graph.dim == int(meta["d"]),
            f"{path}: header does not match payload")
    return graph, meta.get("config_hash", "")
