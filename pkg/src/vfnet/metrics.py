"""Point-cloud distances and set-level generative scores (MMD, COV, 1-NNA).

All values are unscaled; reporting code multiplies by 100 or 1000 when it
wants to match published tables.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import CapExceededError, PreconditionError
from .pointcloud import as_points

EMD_CAP = 1024
BASES = ("chamfer", "emd")


def _nonempty(*clouds):
    arrs = []
    for c in clouds:
        a = as_points(c)
        if a.shape[0] == 0:
            raise PreconditionError("point cloud is empty")
        arrs.append(a)
    return arrs


def nearest_distances(A, B) -> np.ndarray:
    """For each point of A, the distance to its nearest neighbour in B (KD-tree)."""
    a, b = _nonempty(A, B)
    dist, _ = cKDTree(b).query(a, k=1)
    return dist


def directional_chamfer(A, B) -> float:
    """Mean over A of the distance to the closest point of B."""
    return float(nearest_distances(A, B).mean())


def chamfer(A, B) -> float:
    return directional_chamfer(A, B) + directional_chamfer(B, A)


def paired_euclidean(A, B) -> float:
    """Mean distance between points sharing an index."""
    a, b = _nonempty(A, B)
    if a.shape != b.shape:
        raise PreconditionError(f"paired distance needs equal cardinality, got {len(a)} and {len(b)}")
    return float(np.linalg.norm(a - b, axis=1).mean())


@dataclass
class AssignmentPlan:
    """``permutation[i]`` is the index in B matched to point i of A."""

    permutation: np.ndarray
    total_cost: float


def emd_exact(A, B, cap: int = EMD_CAP) -> tuple[float, AssignmentPlan]:
    """Exact earth mover's distance (total cost of the optimal bijection)."""
    a, b = _nonempty(A, B)
    if a.shape[0] != b.shape[0]:
        raise PreconditionError(f"EMD needs equal cardinality, got {len(a)} and {len(b)}")
    if a.shape[0] > cap:
        raise CapExceededError(f"EMD on {a.shape[0]} points exceeds the exact-solver cap of {cap}")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(a.shape[0], dtype=np.int64)
    perm[rows] = cols
    total = float(cost[np.arange(a.shape[0]), perm].sum())
    return total, AssignmentPlan(perm, total)


def emd_mean(A, B, cap: int = EMD_CAP) -> float:
    """EMD divided by cardinality, comparable with directional Chamfer values."""
    total, plan = emd_exact(A, B, cap)
    return total / len(plan.permutation)


def base_distance(base: str) -> Callable:
    if base == "chamfer":
        return chamfer
    if base == "emd":
        return emd_mean
    raise PreconditionError(f"unknown base metric {base!r}; choose from {BASES}")


def pairwise_distances(X: Sequence, Y: Sequence | None, base: str, threads: int = 1) -> np.ndarray:
    """Distance matrix between two sets of clouds (or within X when Y is None).

    Within-set matrices are computed on the upper triangle and mirrored so they
    are exactly symmetric.
    """
    fn = base_distance(base)
    if base == "emd":
        sizes = {len(as_points(c)) for c in list(X) + list(Y or [])}
        if len(sizes) > 1:
            raise PreconditionError(f"EMD-based metrics need equal cardinalities, got {sorted(sizes)}")
    symmetric = Y is None
    Y = X if symmetric else Y
    n, m = len(X), len(Y)

    def row(i):
        start = i + 1 if symmetric else 0
        return [fn(X[i], Y[j]) for j in range(start, m)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, range(n)))
    else:
        rows = [row(i) for i in range(n)]

    D = np.zeros((n, m))
    for i, vals in enumerate(rows):
        if symmetric:
            D[i, i + 1 :] = vals
        else:
            D[i] = vals
    if symmetric:
        D = np.triu(D, 1)
        D = D + D.T
    return D


def _check_sets(gen, ref, minimum=1):
    if len(gen) < minimum or len(ref) < minimum:
        raise PreconditionError(f"both sets need at least {minimum} clouds (got {len(gen)} and {len(ref)})")


def mmd_from_matrix(d_gr: np.ndarray) -> float:
    return float(d_gr.min(axis=0).mean())


def coverage_from_matrix(d_gr: np.ndarray) -> float:
    nearest_ref = np.argmin(d_gr, axis=1)
    return len(np.unique(nearest_ref)) / d_gr.shape[1]


def one_nna_from_matrices(d_gg: np.ndarray, d_rr: np.ndarray, d_gr: np.ndarray) -> float:
    """Leave-one-out 1-NN accuracy over gen ∪ ref (gen indexed first)."""
    g, r = d_gr.shape
    full = np.block([[d_gg, d_gr], [d_gr.T, d_rr]]).astype(np.float64, copy=True)
    np.fill_diagonal(full, np.inf)
    nn = np.argmin(full, axis=1)  # first minimum -> lower index on ties
    is_gen = np.arange(g + r) < g
    return float(np.mean(is_gen[nn] == is_gen))


def mmd(gen, ref, base: str = "chamfer", threads: int = 1) -> float:
    """Mean over reference clouds of the distance to the closest generated cloud."""
    _check_sets(gen, ref)
    return mmd_from_matrix(pairwise_distances(gen, ref, base, threads))


def coverage(gen, ref, base: str = "chamfer", threads: int = 1) -> float:
    """Fraction of reference clouds that are the nearest reference of some generated cloud."""
    _check_sets(gen, ref)
    return coverage_from_matrix(pairwise_distances(gen, ref, base, threads))


def one_nna(gen, ref, base: str = "chamfer", threads: int = 1) -> float:
    _check_sets(gen, ref, minimum=2)
    return one_nna_from_matrices(
        pairwise_distances(gen, None, base, threads),
        pairwise_distances(ref, None, base, threads),
        pairwise_distances(gen, ref, base, threads),
    )


@dataclass
class MetricReport:
    mmd: float
    cov: float
    one_nna: float
    base_metric: str
    gen_count: int
    ref_count: int
    seed: int | None = None

    def __post_init__(self):
        if not (0.0 <= self.cov <= 1.0 and 0.0 <= self.one_nna <= 1.0 and self.mmd >= 0.0):
            raise PreconditionError(f"metric values out of range: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["mmd", "cov", "one_nna", "base_metric", "gen_count", "ref_count", "seed"],
    "properties": {
        "mmd": {"type": "number", "minimum": 0},
        "cov": {"type": "number", "minimum": 0, "maximum": 1},
        "one_nna": {"type": "number", "minimum": 0, "maximum": 1},
        "base_metric": {"enum": list(BASES)},
        "gen_count": {"type": "integer", "minimum": 1},
        "ref_count": {"type": "integer", "minimum": 1},
        "seed": {"type": ["integer", "null"]},
    },
}


def evaluate_sets(gen, ref, base: str = "chamfer", seed: int | None = None, threads: int = 1) -> MetricReport:
    """MMD, COV and 1-NNA sharing one set of distance matrices."""
    _check_sets(gen, ref, minimum=2)
    d_gr = pairwise_distances(gen, ref, base, threads)
    d_gg = pairwise_distances(gen, None, base, threads)
    d_rr = pairwise_distances(ref, None, base, threads)
    return MetricReport(
        mmd=mmd_from_matrix(d_gr),
        cov=coverage_from_matrix(d_gr),
        one_nna=one_nna_from_matrices(d_gg, d_rr, d_gr),
        base_metric=base,
        gen_count=len(gen),
        ref_count=len(ref),
        seed=seed,
    )
