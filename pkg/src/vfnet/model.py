"""The autoencoder networks and the operations built directly on them.

Array conventions: clouds are ``(N, 3)`` or batched ``(B, N, 3)``; latent codes
``(D,)`` or ``(B, D)``; point encodings ``(..., N, 2)`` inside [-1, 1]^2.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .diffcore import Network, ParameterBlock
from .errors import PreconditionError, ShapeError
from .flow import FlowPrior
from .pointcloud import PointCloud, as_points

VARIANCE_FLOOR = 1e-6
GROUPS = ("encoder", "projector", "decoder", "variance_net", "flow", "grid_predictor")


@dataclass
class ModelConfig:
    latent_dim: int = 16
    encoder_widths: tuple[int, ...] = (64, 128)
    encoder_head: tuple[int, ...] = (128,)
    projector_widths: tuple[int, ...] = (64, 64)
    decoder_widths: tuple[int, ...] = (128, 128)
    variance_widths: tuple[int, ...] = (64,)
    grid_widths: tuple[int, ...] = (64, 64)
    flow_layers: int = 4
    flow_hidden: int = 32
    grid_template: int = 512
    nu: float = 3.0

    def __post_init__(self):
        if self.latent_dim < 2:
            raise PreconditionError("latent_dim must be >= 2")
        if not self.nu > 0:
            raise PreconditionError("nu must be positive")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class LatentPosterior:
    mean: np.ndarray
    log_variance: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_variance)


@dataclass
class LatentCode:
    z: np.ndarray


def uniform_grid(n: int) -> np.ndarray:
    """Row-major ``ceil(sqrt(n))``-square lattice over [-1, 1]^2, truncated to ``n`` points."""
    if n < 1:
        raise PreconditionError("grid needs at least one point")
    k = max(2, math.ceil(math.sqrt(n)))
    lin = np.linspace(-1.0, 1.0, k)
    gx, gy = np.meshgrid(lin, lin, indexing="xy")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)[:n]


class VFNet:
    """Encoder e, projector, folding decoder f, variance net, flow prior and grid predictor."""

    def __init__(self, config: ModelConfig | None = None, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.config = config = config or ModelConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        D = config.latent_dim
        self.dtype = np.dtype(dtype)
        self.encoder = Network.mlp(
            "encoder", [3, *config.encoder_widths, *config.encoder_head, 2 * D],
            pool_after=len(config.encoder_widths), rng=rng, dtype=dtype)
        self.projector = Network.mlp("projector", [3, *config.projector_widths, 2], context=D, output="tanh",
                                     rng=rng, dtype=dtype)
        self.decoder = Network.mlp("decoder", [2, *config.decoder_widths, 3], context=D, rng=rng, dtype=dtype)
        self.variance_net = Network.mlp("variance_net", [2, *config.variance_widths, 1], context=D,
                                        output="softplus", rng=rng, dtype=dtype)
        self.flow = FlowPrior(D, config.flow_layers, config.flow_hidden, rng=rng, dtype=dtype)
        self.grid_predictor = Network.mlp("grid_predictor", [2, *config.grid_widths, 2], context=D,
                                          output="tanh", rng=rng, dtype=dtype)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def nu(self) -> float:
        return self.config.nu

    # ------------------------------------------------------------ parameters

    def group_blocks(self, group: str) -> list[ParameterBlock]:
        if group not in GROUPS:
            raise KeyError(group)
        part = getattr(self, group)
        return part.blocks()

    def blocks(self) -> list[ParameterBlock]:
        return [b for g in GROUPS for b in self.group_blocks(g)]

    def zero_grad(self):
        for b in self.blocks():
            b.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {b.name: b.values for b in self.blocks()}

    def load_state(self, state: dict[str, np.ndarray]):
        for b in self.blocks():
            if b.name not in state:
                raise ShapeError(f"missing parameter block {b.name}")
            v = np.asarray(state[b.name])
            if v.shape != b.values.shape:
                raise ShapeError(f"{b.name}: shape {v.shape} != expected {b.values.shape}")
            b.values[...] = v

    def astype(self, dtype) -> "VFNet":
        clone = self.__class__.__new__(self.__class__)
        clone.__dict__.update(self.__dict__)
        clone.dtype = np.dtype(dtype)
        for g in GROUPS:
            setattr(clone, g, getattr(self, g).astype(dtype))
        return clone

    def copy(self) -> "VFNet":
        return self.astype(self.dtype)

    # ------------------------------------------------------------- networks

    def encode(self, X: np.ndarray, record: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Posterior ``(mean, log_variance)`` for one cloud or a batch."""
        out = self.encoder.forward(np.asarray(X, dtype=self.dtype), record=record)
        D = self.latent_dim
        return out[..., :D], out[..., D:]

    def reparameterize(self, mean, log_variance, eps):
        return mean + np.exp(0.5 * log_variance) * eps

    def project(self, X: np.ndarray, z: np.ndarray, record: bool = False) -> np.ndarray:
        return self.projector.forward(np.asarray(X, dtype=self.dtype), z, record=record)

    def fold(self, z: np.ndarray, g: np.ndarray, record: bool = False) -> np.ndarray:
        return self.decoder.forward(np.asarray(g, dtype=self.dtype), z, record=record)

    def variance(self, z: np.ndarray, g: np.ndarray, record: bool = False) -> np.ndarray:
        out = self.variance_net.forward(np.asarray(g, dtype=self.dtype), z, record=record)
        return out[..., 0] + VARIANCE_FLOOR

    def grid_template(self, m: int | None = None) -> np.ndarray:
        m = self.config.grid_template if m is None else m
        return uniform_grid(m).astype(self.dtype)

    def grid_predict(self, z: np.ndarray, m: int | None = None, record: bool = False) -> np.ndarray:
        if m is not None and m != self.config.grid_template:
            raise PreconditionError(f"grid predictor template has {self.config.grid_template} points, asked for {m}")
        return self.predict_encodings(z, self.grid_template(), record=record)

    def predict_encodings(self, z: np.ndarray, seeds: np.ndarray, record: bool = False) -> np.ndarray:
        """Grid predictor applied to arbitrary 2D seeds (the network is per-point)."""
        z = np.asarray(z, dtype=self.dtype)
        t = np.asarray(seeds, dtype=self.dtype)
        if z.ndim == 2 and t.ndim == 2:
            t = np.broadcast_to(t, (z.shape[0],) + t.shape)
        return self.grid_predictor.forward(t, z, record=record)

    def reconstruct(self, X: np.ndarray) -> np.ndarray:
        """Fold the projected points of ``X`` with the posterior-mean code."""
        mean, _ = self.encode(X)
        return self.fold(mean, self.project(X, mean))


# ------------------------------------------------------------ functional API


def encode(pc, model: VFNet) -> LatentPosterior:
    mean, lv = model.encode(as_points(pc))
    return LatentPosterior(mean.astype(np.float64), lv.astype(np.float64))


def reparameterize(post: LatentPosterior, rng: np.random.Generator) -> LatentCode:
    eps = rng.standard_normal(np.shape(post.mean))
    return LatentCode(post.mean + np.exp(0.5 * post.log_variance) * eps)


def _z(z) -> np.ndarray:
    return z.z if isinstance(z, LatentCode) else np.asarray(z)


def project_points(pc, z, model: VFNet) -> np.ndarray:
    return model.project(as_points(pc), _z(z)).astype(np.float64)


def fold(z, g, model: VFNet) -> PointCloud:
    return PointCloud(model.fold(_z(z), np.asarray(g)).astype(np.float64))


def predict_variance(z, g, model: VFNet, constant: float | None = None) -> np.ndarray:
    """Per-encoding variance; ``constant`` is the fixed sigma of the first training phase."""
    g = np.asarray(g)
    if constant is not None:
        return np.full(g.shape[:-1], float(constant) ** 2)
    return model.variance(_z(z), g).astype(np.float64)


def flow_log_prob(z, model: VFNet) -> float | np.ndarray:
    z = _z(z)
    lp = model.flow.log_prob(np.atleast_2d(z))
    return float(lp[0]) if np.ndim(z) == 1 else lp


def flow_sample(model: VFNet, rng: np.random.Generator) -> LatentCode:
    return LatentCode(model.flow.sample(rng, 1)[0].astype(np.float64))


def grid_predict(z, m: int, model: VFNet) -> np.ndarray:
    return model.grid_predict(_z(z), m).astype(np.float64)
