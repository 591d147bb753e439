"""Independent brute-force references for the metric tests (no scipy, no KD-trees)."""

import itertools

import numpy as np


def brute_directional(A, B):
    A, B = np.asarray(A, float), np.asarray(B, float)
    total = 0.0
    for a in A:
        total += min(float(np.sqrt(((a - b) ** 2).sum())) for b in B)
    return total / len(A)


def brute_chamfer(A, B):
    return brute_directional(A, B) + brute_directional(B, A)


def brute_emd(A, B):
    A, B = np.asarray(A, float), np.asarray(B, float)
    n = len(A)
    cost = [[float(np.sqrt(((A[i] - B[j]) ** 2).sum())) for j in range(n)] for i in range(n)]
    return min(sum(cost[i][p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def brute_mmd(gen, ref, dist):
    return sum(min(dist(r, g) for g in gen) for r in ref) / len(ref)


def brute_coverage(gen, ref, dist):
    covered = set()
    for g in gen:
        ds = [dist(g, r) for r in ref]
        covered.add(ds.index(min(ds)))
    return len(covered) / len(ref)


def brute_one_nna(gen, ref, dist):
    items = [(c, True) for c in gen] + [(c, False) for c in ref]
    correct = 0
    for i, (ci, li) in enumerate(items):
        best, best_j = None, None
        for j, (cj, _) in enumerate(items):
            if j == i:
                continue
            d = dist(ci, cj)
            if best is None or d < best:
                best, best_j = d, j
        correct += items[best_j][1] == li
    return correct / len(items)


def matrix_directional(A, B):
    """Vectorized O(n*m) scan: the full distance matrix, no spatial index."""
    A, B = np.asarray(A, float), np.asarray(B, float)
    d = np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(-1))
    return float(d.min(axis=1).mean())


def matrix_chamfer(A, B):
    return matrix_directional(A, B) + matrix_directional(B, A)
