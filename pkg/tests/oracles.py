"""Brute-force references shared by the unit and acceptance tests."""

import itertools
import math

import numpy as np


def prufer_trees(n):
    """Edge sets of every labeled tree on ``n`` nodes."""
    if n == 1:
        yield []
        return
    if n == 2:
        yield [(0, 1)]
        return
    for seq in itertools.product(range(n), repeat=n - 2):
        degree = [1] * n
        for x in seq:
            degree[x] += 1
        edges = []
        for x in seq:
            leaf = min(i for i in range(n) if degree[i] == 1)
            edges.append(tuple(sorted((leaf, x))))
            degree[leaf] -= 1
            degree[x] -= 1
        u, v = [i for i in range(n) if degree[i] == 1]
        edges.append((u, v))
        yield edges


def tree_weight(W, edges):
    return math.fsum(W[i, j] for i, j in edges)


def brute_mst_weight(W):
    return min(tree_weight(W, t) for t in prufer_trees(len(W)))


def seq_weight(W, path):
    total = 0.0
    for u, v in zip(path[:-1], path[1:]):
        total += W[u, v]
    return total


def brute_tsp(W):
    """Minimal Hamiltonian path weight and the set of optimal paths (both orientations)."""
    n = len(W)
    weights = {p: math.fsum(W[u, v] for u, v in zip(p[:-1], p[1:])) for p in itertools.permutations(range(n))}
    best = min(weights.values())
    return best, {p for p, w in weights.items() if w == best}


def brute_star_center(W):
    sums = [math.fsum(W[c, j] for j in range(len(W)) if j != c) for c in range(len(W))]
    best = min(sums)
    return sums.index(best)


def brute_shortest_path(A, i, j):
    """Cheapest simple path over finite entries of ``A``; ties to the smallest sequence."""
    n = len(A)
    others = [v for v in range(n) if v not in (i, j)]
    best = None
    for r in range(len(others) + 1):
        for mid in itertools.permutations(others, r):
            path = (i, *mid, j)
            if not all(np.isfinite(A[u, v]) for u, v in zip(path[:-1], path[1:])):
                continue
            key = (seq_weight(A, path), path)
            if best is None or key < best:
                best = key
    return list(best[1])


def floyd_warshall(n, weighted_edges):
    D = np.full((n, n), np.inf)
    np.fill_diagonal(D, 0.0)
    for u, v, w in weighted_edges:
        D[u, v] = D[v, u] = min(D[u, v], w)
    for k in range(n):
        for a in range(n):
            for b in range(n):
                if D[a, k] + D[k, b] < D[a, b]:
                    D[a, b] = D[a, k] + D[k, b]
    return D


def random_weights(rng, n, integer=False):
    if integer:
        W = rng.integers(1, 4, (n, n)).astype(float)
    else:
        W = rng.uniform(0.1, 10.0, (n, n))
    W = np.triu(W, 1)
    return W + W.T
