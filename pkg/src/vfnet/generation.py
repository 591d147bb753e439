"""Sampling, meshing, shape completion, latent arithmetic and the linear probe."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .errors import PreconditionError, SaturationError
from .metrics import directional_chamfer
from .model import VFNet, uniform_grid
from .pointcloud import PointCloud, as_points

SOURCES = ("uniform_grid", "grid_predictor")


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise PreconditionError("face index out of range")
        f = self.faces
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise PreconditionError("degenerate face with a repeated vertex index")

    def to_obj(self) -> str:
        lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.faces]
        return "\n".join(lines) + "\n"

    def save_obj(self, path: str | os.PathLike):
        Path(path).write_text(self.to_obj(), encoding="utf-8")


def read_obj(path: str | os.PathLike) -> Mesh:
    verts, faces = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))


@dataclass
class OccupancyGrid:
    """Per-cell encoding counts on an R x R grid over [-1, 1]^2 (row = y, column = x)."""

    counts: np.ndarray
    resolution: int

    @classmethod
    def from_encodings(cls, g: np.ndarray, resolution: int) -> "OccupancyGrid":
        if resolution < 1:
            raise PreconditionError("occupancy resolution must be >= 1")
        ij = cls.cell_index(np.asarray(g), resolution)
        counts = np.zeros((resolution, resolution), dtype=np.int64)
        np.add.at(counts, (ij[:, 1], ij[:, 0]), 1)
        return cls(counts, resolution)

    @staticmethod
    def cell_index(g: np.ndarray, resolution: int) -> np.ndarray:
        """(column, row) of each encoding."""
        idx = np.floor((g + 1.0) * 0.5 * resolution).astype(np.int64)
        return np.clip(idx, 0, resolution - 1)

    def centers(self) -> np.ndarray:
        """Cell centres in row-major order, shape (R*R, 2) as (x, y)."""
        r = self.resolution
        c = -1.0 + (np.arange(r) + 0.5) * 2.0 / r
        cx, cy = np.meshgrid(c, c, indexing="xy")
        return np.stack([cx.ravel(), cy.ravel()], axis=1)


# ------------------------------------------------------------------ sampling


def student_t_noise(rng: np.random.Generator, shape: tuple[int, ...], nu: float) -> np.ndarray:
    """Standard multivariate Student-t draws (last axis = dimension)."""
    normal = rng.standard_normal(shape)
    chi2 = rng.chisquare(nu, size=shape[:-1] + (1,))
    return normal / np.sqrt(chi2 / nu)


def sample_cloud(model: VFNet, n: int, source: str = "uniform_grid", noise: bool = False,
                 rng: np.random.Generator | None = None) -> PointCloud:
    """Draw z from the flow prior and fold encodings from ``source``.

    With ``noise`` the Student-t likelihood noise scaled by the predicted sigma is added.
    """
    if source not in SOURCES:
        raise PreconditionError(f"unknown encoding source {source!r}; choose from {SOURCES}")
    rng = rng if rng is not None else np.random.default_rng(0)
    z = model.flow.sample(rng, 1)[0]
    if source == "uniform_grid":
        g = uniform_grid(n).astype(model.dtype)
    elif n == model.config.grid_template:
        g = model.grid_predict(z, n)
    else:
        # same per-point network on a template of the requested size
        g = model.predict_encodings(z, model.grid_template(n))
    pts = model.fold(z, g).astype(np.float64)
    if noise:
        sigma = np.sqrt(model.variance(z, g).astype(np.float64))
        pts = pts + sigma[:, None] * student_t_noise(rng, pts.shape, model.nu)
    return PointCloud(pts)


def grid_faces(resolution: int) -> np.ndarray:
    """Two triangles per cell of a row-major R x R vertex lattice, same winding everywhere."""
    r = resolution
    i, j = np.meshgrid(np.arange(r - 1), np.arange(r - 1), indexing="ij")
    v00 = (i * r + j).ravel()
    v01 = v00 + 1
    v10 = v00 + r
    v11 = v10 + 1
    upper = np.stack([v00, v01, v11], axis=1)
    lower = np.stack([v00, v11, v10], axis=1)
    return np.concatenate([upper, lower])


def generate_mesh(model: VFNet, z, resolution: int = 32) -> Mesh:
    if resolution < 2:
        raise PreconditionError("mesh resolution must be >= 2")
    lin = np.linspace(-1.0, 1.0, resolution)
    gx, gy = np.meshgrid(lin, lin, indexing="xy")
    g = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(model.dtype)
    verts = model.fold(np.asarray(z, dtype=model.dtype), g).astype(np.float64)
    return Mesh(verts, grid_faces(resolution))


# ---------------------------------------------------------------- completion


def _region_mask(grid: OccupancyGrid, g: np.ndarray, region: str) -> np.ndarray:
    if region == "all":
        return np.ones(grid.resolution**2, dtype=bool)
    if region != "hull":
        raise PreconditionError(f"unknown completion region {region!r}")
    try:
        return Delaunay(g).find_simplex(grid.centers()) >= 0
    except (QhullError, ValueError):
        return np.ones(grid.resolution**2, dtype=bool)


def completion_encodings(g: np.ndarray, count: int, resolution: int, rng: np.random.Generator,
                         fallback: bool = True, region: str = "hull") -> np.ndarray:
    """Uniform draws from the empty cells of the occupancy grid of ``g``.

    ``region="hull"`` only considers cells whose centre lies inside the convex
    hull of the encodings, so the unused margin of the patch is not mistaken
    for a hole. Without empty cells the least-occupied cells are used, unless
    ``fallback`` is off.
    """
    grid = OccupancyGrid.from_encodings(g, resolution)
    counts = grid.counts.ravel()
    allowed = _region_mask(grid, g, region)
    candidates = np.flatnonzero(allowed & (counts == 0))
    if len(candidates) == 0:
        if not fallback:
            raise SaturationError("occupancy grid has no empty cell and fallback is disabled")
        lowest = counts[allowed].min()
        candidates = np.flatnonzero(allowed & (counts == lowest))
    cells = rng.choice(candidates, size=count, replace=True)
    row, col = np.divmod(cells, resolution)
    width = 2.0 / resolution
    x = -1.0 + (col + rng.uniform(size=count)) * width
    y = -1.0 + (row + rng.uniform(size=count)) * width
    return np.clip(np.stack([x, y], axis=1), -1.0, 1.0)


def complete_shape(model: VFNet, partial, oversample_factor: float = 3.0, occupancy_resolution: int = 32,
                   rng: np.random.Generator | None = None, fallback: bool = True,
                   region: str = "hull") -> PointCloud:
    """Generate ``round(factor * |partial|)`` points from the unoccupied encoding region."""
    pts = as_points(partial)
    if len(pts) == 0:
        raise PreconditionError("partial cloud is empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    z, _ = model.encode(pts)
    g = model.project(pts, z).astype(np.float64)
    count = int(round(oversample_factor * len(pts)))
    if count < 1:
        raise PreconditionError("oversample_factor yields no points")
    enc = completion_encodings(g, count, occupancy_resolution, rng, fallback, region)
    return PointCloud(model.fold(z, enc.astype(model.dtype)).astype(np.float64))


def evaluate_completion(completed, ground_truth_removed) -> float:
    """One-directional Chamfer from the predicted points to the removed ground truth."""
    return directional_chamfer(completed, ground_truth_removed)


# ----------------------------------------------------------- latent space


def posterior_mean(model: VFNet, pc) -> np.ndarray:
    return model.encode(as_points(pc))[0].astype(np.float64)


def interpolate(model: VFNet, pc_a, pc_b, steps: int, resolution: int = 32) -> list[Mesh]:
    if steps < 2:
        raise PreconditionError("interpolation needs at least two steps")
    za, zb = posterior_mean(model, pc_a), posterior_mean(model, pc_b)
    meshes = []
    for k in range(steps):
        t = k / (steps - 1)
        z = za if k == 0 else zb if k == steps - 1 else (1.0 - t) * za + t * zb
        meshes.append(generate_mesh(model, z, resolution))
    return meshes


def latent_direction(model: VFNet, pairs: Sequence[tuple]) -> np.ndarray:
    """Average ``mean(modified) - mean(original)`` over (original, modified) pairs."""
    if len(pairs) == 0:
        raise PreconditionError("latent_direction needs at least one pair")
    diffs = [posterior_mean(model, mod) - posterior_mean(model, orig) for orig, mod in pairs]
    return np.mean(diffs, axis=0)


def apply_direction(z, direction, scale: float) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) + scale * np.asarray(direction, dtype=np.float64)


def peak_height(points, top_fraction: float = 0.05) -> float:
    """Mean height of the highest ``top_fraction`` of points relative to the mean height."""
    z = as_points(points)[:, 2]
    k = max(1, int(math.ceil(top_fraction * len(z))))
    return float(np.sort(z)[-k:].mean() - z.mean())


# ------------------------------------------------------------------- probe


def _stratified_split(labels: np.ndarray, train_fraction: float, rng: np.random.Generator):
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = min(max(1, int(round(train_fraction * len(idx)))), len(idx) - 1)
        train.extend(idx[:k])
        test.extend(idx[k:])
    return np.sort(train), np.sort(test)


def fit_softmax(X: np.ndarray, y: np.ndarray, n_classes: int, lr: float = 0.5, l2: float = 1e-4,
                max_iter: int = 5000, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by full-batch gradient descent."""
    n, d = X.shape
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(max_iter):
        logits = X @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / n
        gW = X.T @ err + l2 * W
        gb = err.sum(axis=0)
        W -= lr * gW
        b -= lr * gb
        if max(np.abs(gW).max(), np.abs(gb).max()) < tol:
            break
    return W, b


def linear_probe(latents, labels, train_fraction: float = 0.7, seed: int = 0) -> float:
    """Held-out accuracy of a linear (softmax) classifier on latent codes."""
    X = np.asarray(latents, dtype=np.float64)
    y_raw = np.asarray(labels)
    classes, y = np.unique(y_raw, return_inverse=True)
    if len(classes) < 2:
        raise PreconditionError("linear probe needs at least two classes")
    if np.bincount(y).min() < 4:
        raise PreconditionError("linear probe needs at least four samples per class")
    rng = np.random.default_rng(seed)
    tr, te = _stratified_split(y, train_fraction, rng)
    mu = X[tr].mean(axis=0)
    sd = X[tr].std(axis=0)
    sd[sd == 0] = 1.0
    Xs = (X - mu) / sd
    W, b = fit_softmax(Xs[tr], y[tr], len(classes))
    pred = np.argmax(Xs[te] @ W + b, axis=1)
    return float(np.mean(pred == y[te]))
