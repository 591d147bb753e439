"""Point-cloud data model, file I/O, normalization, subsampling and synthetic patches."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateGeometryError, EmptyFileError, ParseError, PreconditionError

FAMILIES = ("flat", "dome", "bowl", "saddle", "ridge")


@dataclass
class PointCloud:
    """An ordered set of 3D points with an optional integer class tag."""

    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise PreconditionError(f"points must have shape (n, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise PreconditionError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise PreconditionError("point coordinates must be finite")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    def copy(self) -> "PointCloud":
        return PointCloud(self.points.copy(), self.label)


def as_points(pc) -> np.ndarray:
    """Return an (n, 3) float64 array from a PointCloud or array-like."""
    if isinstance(pc, PointCloud):
        return pc.points
    arr = np.asarray(pc, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[-1] != 3:
        raise PreconditionError(f"expected an (n, 3) array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class NormalizationTransform:
    """normalized = (points - offset) / scale"""

    scale: float
    offset: tuple[float, float, float]

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise PreconditionError(f"scale must be positive, got {self.scale}")

    def apply(self, pc: PointCloud) -> PointCloud:
        return PointCloud((pc.points - np.asarray(self.offset)) / self.scale, pc.label)

    def invert(self, pc: PointCloud) -> PointCloud:
        return PointCloud(pc.points * self.scale + np.asarray(self.offset), pc.label)


@dataclass(frozen=True)
class SyntheticPatchSpec:
    """Parameters of a random height-field patch over [-1, 1]^2.

    ``family`` selects a smooth base surface onto which ``bump_count`` Gaussian
    bumps are added; "flat" means bumps only.
    """

    grid_resolution: int = 32
    bump_count: int = 3
    amplitude_range: tuple[float, float] = (0.1, 0.3)
    width_range: tuple[float, float] = (0.15, 0.4)
    rng_seed: int = 0
    family: str = "flat"
    base_amplitude_range: tuple[float, float] = (0.3, 0.6)
    jitter: float = 0.5

    def __post_init__(self):
        if self.amplitude_range[0] <= 0 or self.width_range[0] <= 0:
            raise PreconditionError("amplitude and width ranges need positive lower bounds")
        if self.amplitude_range[1] < self.amplitude_range[0] or self.width_range[1] < self.width_range[0]:
            raise PreconditionError("range upper bound below lower bound")
        if self.family not in FAMILIES:
            raise PreconditionError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.bump_count < 0:
            raise PreconditionError("bump_count must be >= 0")


# --------------------------------------------------------------------------- I/O


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        fmt = fmt.lower()
    else:
        fmt = path.suffix.lower().lstrip(".")
    if fmt not in ("xyz", "ply"):
        raise PreconditionError(f"unsupported point-cloud format {fmt!r}")
    return fmt


def _read_xyz(path: Path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) < 3:
                raise ParseError(f"expected 3 coordinates, found {len(parts)}", line=lineno, path=str(path))
            try:
                xyz = [float(p) for p in parts[:3]]
            except ValueError:
                raise ParseError(f"non-numeric coordinate in {text!r}", line=lineno, path=str(path)) from None
            rows.append(xyz)
    if not rows:
        raise EmptyFileError("file contains no points", path=str(path))
    return np.asarray(rows, dtype=np.float64)


def _read_ply(path: Path) -> np.ndarray:
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise EmptyFileError("file is empty", path=str(path))
    if lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", line=1, path=str(path))
    elements: list[tuple[str, int, list[str]]] = []
    header_end = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise ParseError("only ASCII PLY is supported", line=lineno, path=str(path))
        elif parts[0] == "element":
            try:
                elements.append((parts[1], int(parts[2]), []))
            except (IndexError, ValueError):
                raise ParseError("malformed element line", line=lineno, path=str(path)) from None
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before element", line=lineno, path=str(path))
            elements[-1][2].append(parts[-1])
        elif parts[0] == "end_header":
            header_end = lineno
            break
        else:
            raise ParseError(f"unexpected header keyword {parts[0]!r}", line=lineno, path=str(path))
    if header_end is None:
        raise ParseError("missing end_header", path=str(path))

    cursor = header_end  # index into `lines` of the first body line
    for name, count, props in elements:
        if name != "vertex":
            cursor += count
            continue
        try:
            cols = [props.index(c) for c in ("x", "y", "z")]
        except ValueError:
            raise ParseError("vertex element lacks x/y/z properties", path=str(path)) from None
        if count == 0:
            raise EmptyFileError("PLY declares zero vertices", path=str(path))
        out = np.empty((count, 3), dtype=np.float64)
        for i in range(count):
            lineno = cursor + i + 1
            if cursor + i >= len(lines):
                raise ParseError("unexpected end of file in vertex list", line=lineno, path=str(path))
            parts = lines[cursor + i].split()
            try:
                out[i] = [float(parts[c]) for c in cols]
            except (IndexError, ValueError):
                raise ParseError("malformed vertex record", line=lineno, path=str(path)) from None
        return out
    raise ParseError("no vertex element in PLY header", path=str(path))


def load_point_cloud(path: str | os.PathLike, format: str | None = None) -> PointCloud:
    """Read an ASCII XYZ or PLY file; points keep file order, label unset."""
    path = Path(path)
    fmt = _infer_format(path, format)
    if not path.exists():
        raise FileNotFoundError(str(path))
    pts = _read_xyz(path) if fmt == "xyz" else _read_ply(path)
    return PointCloud(pts)


def save_point_cloud(pc: PointCloud, path: str | os.PathLike, format: str | None = None) -> None:
    path = Path(path)
    fmt = _infer_format(path, format)
    pts = as_points(pc)
    body = "\n".join(f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in pts)
    if fmt == "ply":
        header = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(pts)}\n"
            "property double x\nproperty double y\nproperty double z\nend_header\n"
        )
        text = header + body + "\n"
    else:
        text = body + "\n"
    path.write_text(text, encoding="utf-8")


def load_directory(directory: str | os.PathLike) -> list[tuple[str, PointCloud]]:
    """Load every .xyz/.ply file in a directory (sorted by name).

    A ``labels.csv`` with ``name,label`` rows, when present, sets labels.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(str(directory))
    labels: dict[str, int] = {}
    label_file = directory / "labels.csv"
    if label_file.exists():
        for line in label_file.read_text(encoding="utf-8").splitlines():
            if not line.strip() or line.startswith("name,"):
                continue
            name, lab = line.rsplit(",", 1)
            labels[name.strip()] = int(lab)
    out = []
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in (".xyz", ".ply"):
            pc = load_point_cloud(p)
            pc.label = labels.get(p.name)
            out.append((p.name, pc))
    return out


# ------------------------------------------------------------------ operations


def subsample(pc: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Draw ``n`` points uniformly without replacement."""
    if n < 1 or n > len(pc):
        raise PreconditionError(f"cannot draw {n} points from a cloud of {len(pc)}")
    idx = rng.choice(len(pc), size=n, replace=False)
    return PointCloud(pc.points[idx], pc.label)


def normalize(pc: PointCloud, percentile: float = 99.5) -> tuple[PointCloud, NormalizationTransform]:
    """Center on the centroid and scale so the 99.5th percentile of each
    point's max-abs coordinate lands on 1.0."""
    if len(pc) < 2:
        raise PreconditionError("normalization needs at least two points")
    offset = pc.points.mean(axis=0)
    centered = pc.points - offset
    extent = np.abs(centered).max(axis=1)
    scale = float(np.percentile(extent, percentile))
    if not scale > 0:
        raise DegenerateGeometryError("cloud collapses to a point; cannot normalize")
    tf = NormalizationTransform(scale, tuple(float(v) for v in offset))
    return tf.apply(pc), tf


def _base_height(family: str, x: np.ndarray, y: np.ndarray, amp: float) -> np.ndarray:
    if family == "flat":
        return np.zeros_like(x)
    if family == "dome":
        return amp * (1.0 - 0.5 * (x**2 + y**2))
    if family == "bowl":
        return amp * 0.5 * (x**2 + y**2)
    if family == "saddle":
        return amp * 0.5 * (x**2 - y**2)
    if family == "ridge":
        return amp * np.cos(0.5 * np.pi * x)
    raise PreconditionError(f"unknown family {family!r}")


def synth_patch(spec: SyntheticPatchSpec) -> PointCloud:
    """Sample a jittered grid of ``grid_resolution**2`` points on a height field."""
    r = spec.grid_resolution
    if r < 4:
        raise PreconditionError("grid_resolution must be >= 4")
    rng = np.random.default_rng(spec.rng_seed)
    lin = np.linspace(-1.0, 1.0, r)
    gx, gy = np.meshgrid(lin, lin, indexing="xy")
    spacing = 2.0 / (r - 1)
    x = np.clip(gx.ravel() + rng.uniform(-0.5, 0.5, r * r) * spacing * spec.jitter, -1.0, 1.0)
    y = np.clip(gy.ravel() + rng.uniform(-0.5, 0.5, r * r) * spacing * spec.jitter, -1.0, 1.0)

    base_amp = rng.uniform(*spec.base_amplitude_range)
    z = _base_height(spec.family, x, y, base_amp)
    for _ in range(spec.bump_count):
        a = rng.uniform(*spec.amplitude_range)
        w = rng.uniform(*spec.width_range)
        cx, cy = rng.uniform(-0.8, 0.8, 2)
        z = z + a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * w * w))
    label = FAMILIES.index(spec.family) if spec.family != "flat" else None
    return PointCloud(np.stack([x, y, z], axis=1), label)


def wear(pc: PointCloud, keep: float = 0.6) -> PointCloud:
    """Flatten the tops of a height field: heights above ``min + keep*(max-min)`` are clipped."""
    z = pc.points[:, 2]
    lo, hi = z.min(), z.max()
    cap = lo + keep * (hi - lo)
    pts = pc.points.copy()
    pts[:, 2] = np.minimum(z, cap)
    return PointCloud(pts, pc.label)


def knn_remove_hole(pc: PointCloud, seed_index: int, k: int) -> tuple[PointCloud, PointCloud]:
    """Remove ``seed_index`` and its ``k - 1`` nearest neighbours.

    Both returned clouds keep input order.
    """
    n = len(pc)
    if not 0 <= seed_index < n:
        raise PreconditionError(f"seed_index {seed_index} out of range for {n} points")
    if not 1 <= k < n:
        raise PreconditionError(f"k must satisfy 1 <= k < {n}, got {k}")
    d = np.linalg.norm(pc.points - pc.points[seed_index], axis=1)
    idx = np.arange(n)
    # ties: the seed first, then lower index
    order = np.lexsort((idx, idx != seed_index, d))
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return PointCloud(pc.points[~mask], pc.label), PointCloud(pc.points[mask], pc.label)


# -------------------------------------------------------------------- datasets


def prepare(pc: PointCloud, n_points: int | None, rng: np.random.Generator) -> PointCloud:
    """Subsample (when needed) then normalize; the training-time pipeline."""
    if n_points is not None and n_points < len(pc):
        pc = subsample(pc, n_points, rng)
    out, _ = normalize(pc)
    return out


def synth_dataset(
    count: int,
    seed: int,
    families: Sequence[str] = ("dome", "bowl", "saddle", "ridge"),
    grid_resolution: int = 32,
    bump_range: tuple[int, int] = (0, 2),
    **spec_kwargs,
) -> list[PointCloud]:
    """``count`` raw patches cycling through ``families`` with random bump counts."""
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(count, dtype=np.uint32)
    rng = np.random.default_rng(ss.spawn(1)[0])
    clouds = []
    for i in range(count):
        spec = SyntheticPatchSpec(
            grid_resolution=grid_resolution,
            bump_count=int(rng.integers(bump_range[0], bump_range[1] + 1)),
            rng_seed=int(seeds[i]),
            family=families[i % len(families)],
            **spec_kwargs,
        )
        clouds.append(synth_patch(spec))
    return clouds


def stack(clouds: Iterable[PointCloud]) -> np.ndarray:
    """Stack equal-cardinality clouds into a (B, N, 3) array."""
    arrs = [as_points(c) for c in clouds]
    sizes = {a.shape[0] for a in arrs}
    if len(sizes) != 1:
        raise PreconditionError(f"clouds must share cardinality to batch, got sizes {sorted(sizes)}")
    return np.stack(arrs)
