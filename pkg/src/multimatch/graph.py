"""Shape graph over a collection: affinities, topologies and multi-matching.

Pairwise maps are chained along the cheapest path in the graph instead of
being used directly, which avoids matching very dissimilar poses in one go.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .matching import Correspondence, MatchResult, match_energy

TOPOLOGIES = ("full", "mst", "tsp", "star")

#: Largest node count for which the TSP path is found by enumeration.
TSP_EXACT_LIMIT = 9


class MissingPairError(KeyError):
    pass


class PairStore:
    """Pairwise match results keyed by ordered pairs of shape ids.

    ``shapes`` maps each id to its (preprocessed) vertex array, which the
    affinity weights compare registrations against.
    """

    def __init__(self, shapes=None):
        self._results = {}
        self.shapes = dict(shapes or {})

    def add(self, a: str, b: str, result: MatchResult):
        self._results[(a, b)] = result

    def __getitem__(self, key) -> MatchResult:
        try:
            return self._results[key]
        except KeyError:
            raise MissingPairError(f"no match stored for pair {key[0]!r} -> {key[1]!r}") from None

    def __contains__(self, key):
        return key in self._results

    def __len__(self):
        return len(self._results)

    def pairs(self):
        return sorted(self._results)

    def vertices(self, shape_id):
        v = self.shapes[shape_id]
        return getattr(v, "vertices", v)


@dataclass(frozen=True, eq=False)
class ShapeGraph:
    nodes: tuple
    weights: np.ndarray
    topology: str
    edges: tuple
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def adjacency(self) -> np.ndarray:
        """Weights of retained edges, ``inf`` elsewhere, zero diagonal."""
        A = np.full_like(self.weights, np.inf)
        for i, j in self.edges:
            A[i, j] = A[j, i] = self.weights[i, j]
        np.fill_diagonal(A, 0.0)
        return A

    def index(self, shape_id: str) -> int:
        return self.nodes.index(shape_id)


@dataclass(frozen=True, eq=False)
class MultiMatch:
    path: tuple
    pi: Correspondence
    cycle_score: float


def affinity_weight(result_ij: MatchResult, result_ji: MatchResult, vertices_i, vertices_j) -> float:
    """Smaller of the two directed registration energies of a shape pair."""
    e_ij = match_energy(result_ij.registration, vertices_j, result_ij.pi)
    e_ji = match_energy(result_ji.registration, vertices_i, result_ji.pi)
    return min(e_ij, e_ji)


def weight_matrix(store: PairStore, ids) -> np.ndarray:
    n = len(ids)
    W = np.zeros((n, n))
    for i, j in itertools.combinations(range(n), 2):
        a, b = ids[i], ids[j]
        W[i, j] = W[j, i] = affinity_weight(store[a, b], store[b, a], store.vertices(a), store.vertices(b))
    return W


def path_weight(W, path) -> float:
    """Exactly rounded sum of edge weights, independent of path direction."""
    return math.fsum(W[u, v] for u, v in zip(path[:-1], path[1:]))


def minimum_spanning_tree(W) -> list:
    """Kruskal; equal weights are taken in (i, j) order."""
    n = len(W)
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    edges = sorted((W[i, j], i, j) for i, j in itertools.combinations(range(n), 2))
    tree = []
    for _, i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[rj] = ri
            tree.append((i, j))
            if len(tree) == n - 1:
                break
    return sorted(tree)


def _tsp_exact(W) -> list:
    n = len(W)
    best, best_w = None, math.inf
    for perm in itertools.permutations(range(n)):
        if perm[0] > perm[-1]:
            continue
        w = path_weight(W, perm)
        if w < best_w:
            best, best_w = list(perm), w
    return best


def _two_opt(W, path) -> list:
    path = list(path)
    n = len(path)
    improved = True
    while improved:
        improved = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                old = new = 0.0
                if i > 0:
                    old += W[path[i - 1], path[i]]
                    new += W[path[i - 1], path[j]]
                if j < n - 1:
                    old += W[path[j], path[j + 1]]
                    new += W[path[i], path[j + 1]]
                if new < old - 1e-12:
                    path[i:j + 1] = path[i:j + 1][::-1]
                    improved = True
    return path


def _tsp_heuristic(W) -> list:
    n = len(W)
    best, best_w = None, math.inf
    for start in range(n):
        path, left = [start], set(range(n)) - {start}
        while left:
            u = path[-1]
            nxt = min(left, key=lambda v: (W[u, v], v))
            path.append(nxt)
            left.remove(nxt)
        w = path_weight(W, path)
        if w < best_w:
            best, best_w = path, w
    return _two_opt(W, best)


def tsp_path(W) -> tuple:
    """Minimal Hamiltonian path and the method used ("exact" or "heuristic")."""
    n = len(W)
    if n == 1:
        return [0], "exact"
    if n <= TSP_EXACT_LIMIT:
        path, method = _tsp_exact(W), "exact"
    else:
        path, method = _tsp_heuristic(W), "heuristic"
    if path[0] > path[-1]:
        path = path[::-1]
    return path, method


def star_center(W) -> int:
    sums = [math.fsum(row) for row in np.asarray(W)]
    return int(np.argmin(sums))


def graph_from_weights(ids, W, topology: str = "full") -> ShapeGraph:
    W = np.array(W, dtype=np.float64)
    n = len(ids)
    if W.shape != (n, n) or not np.array_equal(W, W.T):
        raise ValueError("weights must be a symmetric matrix over the node list")
    np.fill_diagonal(W, 0.0)
    meta = {}
    if topology == "full":
        edges = list(itertools.combinations(range(n), 2))
    elif topology == "mst":
        edges = minimum_spanning_tree(W)
    elif topology == "tsp":
        path, method = tsp_path(W)
        edges = sorted(tuple(sorted(e)) for e in zip(path[:-1], path[1:]))
        meta = {"tsp_method": method, "tsp_order": [int(p) for p in path]}
    elif topology == "star":
        c = star_center(W)
        edges = sorted(tuple(sorted((c, j))) for j in range(n) if j != c)
        meta = {"star_center": c}
    else:
        raise ValueError(f"unknown topology {topology!r}; expected one of {TOPOLOGIES}")
    W.setflags(write=False)
    return ShapeGraph(tuple(ids), W, topology, tuple((int(i), int(j)) for i, j in edges), meta)


def build_graph(store: PairStore, ids, topology: str = "full") -> ShapeGraph:
    """Affinity graph over ``ids`` with the requested topology."""
    if topology not in TOPOLOGIES:
        raise ValueError(f"unknown topology {topology!r}; expected one of {TOPOLOGIES}")
    return graph_from_weights(ids, weight_matrix(store, list(ids)), topology)


def shortest_path(graph: ShapeGraph, i: int, j: int) -> list:
    """Dijkstra over retained edges; equal-weight paths resolve to the
    lexicographically smallest node sequence."""
    if i == j:
        raise ValueError("shortest path needs two distinct nodes")
    A = graph.adjacency()
    n = len(A)
    nbrs = [[v for v in range(n) if v != u and np.isfinite(A[u, v])] for u in range(n)]
    heap = [(0.0, (i,))]
    settled = set()
    while heap:
        d, path = heapq.heappop(heap)
        u = path[-1]
        if u in settled:
            continue
        settled.add(u)
        if u == j:
            return list(path)
        for v in nbrs[u]:
            if v not in settled:
                heapq.heappush(heap, (d + A[u, v], path + (v,)))
    raise AssertionError(f"node {j} is unreachable from node {i}")


def compose_maps(path, store: PairStore, ids=None) -> Correspondence:
    """Chain the stored maps along ``path`` (node ids, or indices into ``ids``)."""
    names = [ids[p] for p in path] if ids is not None else list(path)
    if len(names) < 2:
        raise ValueError("a path needs at least two nodes")
    first = store[names[0], names[1]].pi
    idx = first.target_index
    n_target = first.n_target
    for a, b in zip(names[1:-1], names[2:]):
        nxt = store[a, b].pi
        if len(nxt) != n_target:
            raise ValueError(f"map {a!r} -> {b!r} does not start on the previous target")
        idx = nxt.target_index[idx]
        n_target = nxt.n_target
    return Correspondence(idx, n_target)


def cycle_consistency_score(registration, target_vertices, pi_mult: Correspondence) -> float:
    return match_energy(registration, getattr(target_vertices, "vertices", target_vertices), pi_mult)


def multi_match(graph: ShapeGraph, store: PairStore, i: int, j: int) -> MultiMatch:
    """Correspondence from node i to node j composed along the shortest path.

    The cycle score compares the direct pair's registration with the
    composed map.
    """
    if i == j:
        raise ValueError("multi-match needs two distinct nodes")
    path = shortest_path(graph, i, j)
    pi = compose_maps(path, store, graph.nodes)
    a, b = graph.nodes[i], graph.nodes[j]
    score = cycle_consistency_score(store[a, b].registration, store.vertices(b), pi)
    return MultiMatch(tuple(path), pi, score)


def graph_distances(graph: ShapeGraph) -> np.ndarray:
    """All-pairs shortest path lengths over retained edges (Floyd-Warshall)."""
    D = graph.adjacency().copy()
    for k in range(len(D)):
        D = np.minimum(D, D[:, k, None] + D[None, k, :])
    return D


def mds_embedding(graph: ShapeGraph, dims: int = 2) -> np.ndarray:
    """Classical MDS of the graph distances; (N, dims) coordinates."""
    D = graph_distances(graph)
    n = len(D)
    if n < 2:
        raise ValueError("MDS needs at least two nodes")
    if not np.all(np.isfinite(D)):
        raise ValueError("graph distances must be finite")
    J = np.eye(n) - 1.0 / n
    B = -0.5 * J @ (D ** 2) @ J
    w, V = np.linalg.eigh(0.5 * (B + B.T))
    order = np.argsort(-w, kind="stable")[:dims]
    w, V = w[order], V[:, order]
    if w.min() < -1e-12 * max(1.0, np.abs(w).max()):
        warnings.warn("graph distances are not Euclidean: a leading MDS eigenvalue is negative and was "
                      "clamped to zero", RuntimeWarning, stacklevel=2)
    X = V * np.sqrt(np.maximum(w, 0.0))[None, :]
    if X.shape[1] < dims:
        X = np.hstack([X, np.zeros((n, dims - X.shape[1]))])
    X -= X.mean(axis=0)
    for c in range(dims):
        nz = np.flatnonzero(np.abs(X[:, c]) > 1e-12)
        if nz.size and X[nz[0], c] < 0:
            X[:, c] = -X[:, c]
    return X


def refine(store: PairStore, ids, topology: str = "full", iterations: int = 1):
    """Build the graph, optionally re-emitting pairwise maps as multi-matches.

    With ``iterations=1`` this is plain :func:`build_graph`. Each further
    iteration replaces every stored map by its multi-match and rebuilds the
    affinities.
    """
    ids = list(ids)
    graph = build_graph(store, ids, topology)
    for _ in range(iterations - 1):
        new = PairStore(store.shapes)
        for i, j in itertools.permutations(range(len(ids)), 2):
            mm = multi_match(graph, store, i, j)
            new.add(ids[i], ids[j], replace(store[ids[i], ids[j]], pi=mm.pi))
        store = new
        graph = build_graph(store, ids, topology)
    return graph, store


def graph_to_json(graph: ShapeGraph, coords=None) -> str:
    doc = {
        "nodes": list(graph.nodes),
        "topology": graph.topology,
        "weights": [[float(x) for x in row] for row in graph.weights],
        "retained_edges": [list(e) for e in graph.edges],
        "mds": None if coords is None else [[float(x) for x in row] for row in coords],
        "meta": graph.meta,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def graph_from_json(text: str) -> ShapeGraph:
    doc = json.loads(text)
    W = np.array(doc["weights"], dtype=np.float64)
    W.setflags(write=False)
    return ShapeGraph(tuple(doc["nodes"]), W, doc["topology"],
                      tuple(tuple(e) for e in doc["retained_edges"]), doc.get("meta", {}))
