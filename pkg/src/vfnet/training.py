"""Student-t ELBO, KL warm-up, Adamax and the three-phase training schedule."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffcore import GradientReport, finite_difference_check
from .errors import PreconditionError, ShapeError, TrainingDivergedError
from .flow import FlowPrior
from .model import GROUPS, ModelConfig, VFNet
from .pointcloud import PointCloud, stack

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
REDUCTIONS = ("mean", "sum")
PHASE1_GROUPS = ("encoder", "projector", "decoder", "flow")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 300
    warmup_epochs: int | None = None
    constant_sigma: float = 0.05
    variance_phase_epochs: int = 100
    prior_phase_epochs: int = 100
    grid_phase_epochs: int = 100
    seed: int = 0
    dtype: str = "float32"
    recon_reduction: str = "mean"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.warmup_epochs is None:
            self.warmup_epochs = self.epochs // 4
        if not self.learning_rate > 0:
            raise PreconditionError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise PreconditionError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.warmup_epochs <= max(self.epochs, 0):
            raise PreconditionError("warmup_epochs must lie in [0, epochs]")
        if not self.constant_sigma > 0:
            raise PreconditionError("constant_sigma must be positive")
        if self.dtype not in ("float32", "float64"):
            raise PreconditionError("dtype must be float32 or float64")
        if self.recon_reduction not in REDUCTIONS:
            raise PreconditionError(f"recon_reduction must be one of {REDUCTIONS}")

    @property
    def nu(self) -> float:
        return self.model.nu

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        return cls(**d)


@dataclass
class ElboBreakdown:
    elbo: float
    recon_log_likelihood: float
    kl: float
    beta: float


# ------------------------------------------------------------- likelihood


def student_t_log_norm(nu: float, dim: int = 3) -> float:
    return math.lgamma((nu + dim) / 2) - math.lgamma(nu / 2) - 0.5 * dim * math.log(nu * math.pi)


def student_t_logpdf(x, mu, sigma, nu: float = 3.0):
    """Log-density of an isotropic 3D Student-t with scale ``sigma``.

    Broadcasts over leading axes; the last axis holds coordinates.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0) or not nu > 0:
        raise PreconditionError("sigma and nu must be positive")
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    d = x.shape[-1]
    r2 = np.sum((x - mu) ** 2, axis=-1)
    return (student_t_log_norm(nu, d) - d * np.log(sigma)
            - 0.5 * (nu + d) * np.log1p(r2 / (nu * sigma * sigma)))


def _student_t_terms(x, mu, var, nu):
    """logpdf plus its derivatives with respect to ``mu`` and the variance."""
    diff = x - mu
    r2 = np.sum(diff * diff, axis=-1)
    nv = nu * var
    logpdf = student_t_log_norm(nu) - 1.5 * np.log(var) - 0.5 * (nu + 3) * np.log1p(r2 / nv)
    d_mu = ((nu + 3) / (nv + r2))[..., None] * diff
    d_var = -1.5 / var + 0.5 * (nu + 3) * r2 / (var * (nv + r2))
    return logpdf, d_mu, d_var


# ------------------------------------------------------------------ ELBO


def kl_warmup_beta(epoch: int, warmup_epochs: int) -> float:
    if epoch < 0:
        raise PreconditionError("epoch must be >= 0")
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, epoch / warmup_epochs)


def kl_single_sample(log_variance, eps, z, flow: FlowPrior, record: bool = False) -> np.ndarray:
    """``log q(z|x) - log p(z)`` at ``z = mean + exp(lv/2) * eps`` (one draw per row)."""
    log_q = np.sum(-0.5 * LOG_2PI - 0.5 * log_variance - 0.5 * eps * eps, axis=-1)
    return log_q - flow.log_prob(z, record=record)


def objective(model: VFNet, X: np.ndarray, eps: np.ndarray, beta: float, *,
              constant_sigma: float | None = None, groups: Sequence[str] = (),
              reduction: str = "mean") -> dict[str, np.ndarray]:
    """Per-cloud ELBO terms for a batch ``X`` of shape (B, N, 3).

    With ``groups`` non-empty, gradients of ``loss = -mean(elbo)`` are
    accumulated into the parameter blocks needed to reach those groups.
    The reconstruction term is averaged (or, with ``reduction="sum"``, summed)
    over points; KL is a one-sample estimate
    ``log q(z|x) - log p(z)`` at ``z = mean + exp(lv/2) * eps``.
    """
    if reduction not in REDUCTIONS:
        raise PreconditionError(f"reduction must be one of {REDUCTIONS}")
    groups = set(groups)
    unknown = groups - set(GROUPS)
    if unknown:
        raise KeyError(f"unknown parameter groups {sorted(unknown)}")
    X = np.asarray(X, dtype=model.dtype)
    if X.ndim != 3 or X.shape[-1] != 3:
        raise ShapeError(f"objective expects a (B, N, 3) batch, got {X.shape}")
    B, N, _ = X.shape
    nu = model.nu
    use_var_net = constant_sigma is None

    need_z = "encoder" in groups
    need_proj = need_z or "projector" in groups
    need_dec = need_proj or "decoder" in groups
    need_var = use_var_net and (need_proj or "variance_net" in groups)
    need_flow = need_z or "flow" in groups

    mu, lv = model.encode(X, record=need_z)
    eps = np.asarray(eps, dtype=model.dtype)
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    g = model.project(X, z, record=need_proj)
    mean = model.fold(z, g, record=need_dec)
    if use_var_net:
        var = model.variance(z, g, record=need_var)
    else:
        var = np.full((B, N), constant_sigma**2, dtype=model.dtype)

    logpdf, d_mu, d_var = _student_t_terms(X, mean, var, nu)
    recon = logpdf.mean(axis=1) if reduction == "mean" else logpdf.sum(axis=1)
    kl = kl_single_sample(lv, eps, z, model.flow, record=need_flow)
    elbo = recon - beta * kl
    out = {"elbo": elbo, "recon": recon, "kl": kl, "loss": np.array(-elbo.mean())}
    if not groups:
        return out

    scale = -1.0 / (B * N) if reduction == "mean" else -1.0 / B
    g_z = np.zeros_like(z)
    g_g = np.zeros_like(g)
    if need_dec:
        gg, gz = model.decoder.backward(scale * d_mu)
        g_g += gg
        g_z += gz
    if need_var:
        gg, gz = model.variance_net.backward((scale * d_var)[..., None])
        g_g += gg
        g_z += gz
    if need_proj:
        _, gz = model.projector.backward(g_g)
        g_z += gz
    if need_flow:
        # loss = -mean(recon - beta * (log_q - log_p))  =>  d loss / d log_p = -beta / B
        g_z += model.flow.log_prob_backward(np.full(B, -beta / B))
    if need_z:
        g_mu = g_z
        g_lv = g_z * 0.5 * std * eps + (beta / B) * (-0.5)
        model.encoder.backward(np.concatenate([g_mu, g_lv], axis=-1))
    return out


def elbo_gradient_check(model: VFNet, X: np.ndarray, eps: np.ndarray, beta: float = 1.0, *,
                        constant_sigma: float | None = None, tolerance: float = 1e-4,
                        rng: np.random.Generator | None = None, n_coords: int = 64,
                        reduction: str = "mean") -> GradientReport:
    """Finite-difference check of the full objective against every parameter group.

    Run it on a float64 model; float32 central differences are too coarse for 1e-4.
    """
    X = np.asarray(X, dtype=model.dtype)
    eps = np.asarray(eps, dtype=model.dtype)
    groups = GROUPS[:-1]
    model.zero_grad()
    objective(model, X, eps, beta, constant_sigma=constant_sigma, groups=groups, reduction=reduction)
    targets = [(b.name, b.values, b.grad.copy()) for g in groups for b in model.group_blocks(g)]
    if constant_sigma is not None:
        targets = [t for t in targets if not t[0].startswith("variance_net.")]

    def value():
        return float(objective(model, X, eps, beta, constant_sigma=constant_sigma, reduction=reduction)["loss"])

    return finite_difference_check(targets, value, tolerance, rng, n_coords)


def elbo(pc: PointCloud, model: VFNet, beta: float, rng: np.random.Generator,
         constant_sigma: float | None = None, reduction: str = "mean") -> ElboBreakdown:
    X = np.asarray(pc.points)[None]
    eps = rng.standard_normal((1, model.latent_dim))
    out = objective(model, X, eps, beta, constant_sigma=constant_sigma, reduction=reduction)
    return ElboBreakdown(float(out["elbo"][0]), float(out["recon"][0]), float(out["kl"][0]), beta)


# -------------------------------------------------------------- optimizer


@dataclass
class AdamaxState:
    m: list[np.ndarray]
    u: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, values: Sequence[np.ndarray]) -> "AdamaxState":
        return cls([np.zeros_like(v) for v in values], [np.zeros_like(v) for v in values], 0)


def adamax_step(values: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamaxState,
                lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamaxState:
    """In-place Adamax update of ``values``; returns the advanced state."""
    if len(values) != len(grads) or len(values) != len(state.m):
        raise ShapeError("values, grads and optimizer state differ in length")
    t = state.t + 1
    step = lr / (1.0 - beta1**t)
    for v, g, m, u in zip(values, grads, state.m, state.u):
        if v.shape != g.shape or v.shape != m.shape:
            raise ShapeError(f"shape mismatch {v.shape} vs {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        np.maximum(beta2 * u, np.abs(g), out=u)
        v -= step * m / (u + eps)
    state.t = t
    return state


class Adamax:
    def __init__(self, blocks, lr: float = 1e-3):
        self.blocks = list(blocks)
        self.lr = lr
        self.state = AdamaxState.zeros_like([b.values for b in self.blocks])

    def step(self):
        adamax_step([b.values for b in self.blocks], [b.grad for b in self.blocks], self.state, self.lr)


# ------------------------------------------------------------- training


@dataclass
class Checkpoint:
    model: VFNet
    config: TrainConfig
    epoch: int
    rng_state: dict
    log: list[dict] = field(default_factory=list, repr=False)


def _batches(rng, n, size):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _snapshot(model: VFNet) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state().items()}


def _diverged(model, config, epoch, rng, last_state, history, what):
    last = model.copy()
    if last_state is not None:
        last.load_state(last_state)
    ck = Checkpoint(last, config, epoch, rng.bit_generator.state, list(history))
    return TrainingDivergedError(f"{what} became non-finite at epoch {epoch}", checkpoint=ck, epoch=epoch)


def train_prior(model: VFNet, X: np.ndarray, epochs: int, config: TrainConfig, rng: np.random.Generator,
                on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Refit the flow prior to the aggregated posterior of the training set.

    For a fixed encoder this maximizes the ELBO over the prior parameters,
    i.e. ``E_q[log p(z)]``. The flow restarts from the moment-matched diagonal
    Gaussian so it does not have to travel to wherever the posterior drifted.
    """
    if epochs <= 0:
        return []
    means, lvs = [], []
    for i in range(0, len(X), config.batch_size):
        mean, lv = model.encode(X[i:i + config.batch_size])
        means.append(mean)
        lvs.append(lv)
    M = np.concatenate(means).astype(np.float64)
    S = np.exp(0.5 * np.concatenate(lvs).astype(np.float64))
    total_var = M.var(axis=0) + np.mean(S * S, axis=0)
    model.flow.reset(M.mean(axis=0), np.sqrt(np.maximum(total_var, 1e-12)))
    opt = Adamax(model.flow.blocks(), config.learning_rate)
    history = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        total = 0.0
        for idx in _batches(rng, len(X), config.batch_size):
            eps = rng.standard_normal(M[idx].shape)
            z = (M[idx] + S[idx] * eps).astype(model.dtype)
            model.zero_grad()
            logp = model.flow.log_prob(z, record=True)
            if not np.all(np.isfinite(logp)):
                raise TrainingDivergedError(f"prior phase log-density non-finite at epoch {epoch}", epoch=epoch)
            model.flow.log_prob_backward(np.full(len(idx), -1.0 / len(idx)))
            opt.step()
            total += float(-logp.sum())
        rec = {"phase": "prior", "epoch": epoch, "nll": total / len(X),
               "wall_ms": round(1000 * (time.perf_counter() - t0), 1)}
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
    return history


def train_variance(model: VFNet, X: np.ndarray, epochs: int, config: TrainConfig, rng: np.random.Generator,
                   on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Fit only the variance network on the full Student-t likelihood (z re-sampled each step)."""
    opt = Adamax(model.group_blocks("variance_net"), config.learning_rate)
    history = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        acc = np.zeros(3)
        for idx in _batches(rng, len(X), config.batch_size):
            eps = rng.standard_normal((len(idx), model.latent_dim))
            model.zero_grad()
            out = objective(model, X[idx], eps, 1.0, groups=("variance_net",), reduction=config.recon_reduction)
            if not np.isfinite(out["loss"]):
                raise TrainingDivergedError(f"variance phase loss non-finite at epoch {epoch}", epoch=epoch)
            opt.step()
            acc += [out["elbo"].sum(), out["recon"].sum(), out["kl"].sum()]
        acc /= len(X)
        rec = {"phase": "variance", "epoch": epoch, "beta": 1.0, "elbo": float(acc[0]), "recon": float(acc[1]),
               "kl": float(acc[2]), "wall_ms": round(1000 * (time.perf_counter() - t0), 1)}
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
    return history


def grid_chamfer_loss(P: np.ndarray, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Squared 2D Chamfer between predicted ``P`` (B, M, 2) and targets ``G`` (B, N, 2).

    Returns per-cloud losses and d(sum of losses)/dP.
    """
    d2 = (np.sum(P * P, axis=-1)[:, :, None] + np.sum(G * G, axis=-1)[:, None, :]
          - 2.0 * P @ np.swapaxes(G, 1, 2))
    np.maximum(d2, 0, out=d2)
    B, M, N = d2.shape
    nn_p = np.argmin(d2, axis=2)  # (B, M)
    nn_g = np.argmin(d2, axis=1)  # (B, N)
    bi = np.arange(B)[:, None]
    loss = d2[bi, np.arange(M)[None], nn_p].mean(axis=1) + d2[bi, nn_g, np.arange(N)[None]].mean(axis=1)
    grad = 2.0 * (P - G[bi, nn_p]) / M
    back = 2.0 * (P[bi, nn_g] - G) / N  # (B, N, 2) routed to P[nn_g]
    np.add.at(grad, (np.repeat(np.arange(B), N), nn_g.ravel()), back.reshape(-1, 2))
    return loss, grad


def train_grid_predictor(model: VFNet, X: np.ndarray, epochs: int, config: TrainConfig, rng: np.random.Generator,
                         on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Teach the grid predictor to reproduce the projected encodings of the training clouds."""
    zs = []
    targets = []
    for i in range(0, len(X), config.batch_size):
        mean, _ = model.encode(X[i:i + config.batch_size])
        zs.append(mean)
        targets.append(model.project(X[i:i + config.batch_size], mean))
    Z = np.concatenate(zs)
    G = np.concatenate(targets)
    opt = Adamax(model.group_blocks("grid_predictor"), config.learning_rate)
    history = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        total = 0.0
        for idx in _batches(rng, len(X), config.batch_size):
            model.zero_grad()
            P = model.grid_predict(Z[idx], record=True)
            loss, grad = grid_chamfer_loss(P, G[idx])
            if not np.all(np.isfinite(loss)):
                raise TrainingDivergedError(f"grid phase loss non-finite at epoch {epoch}", epoch=epoch)
            model.grid_predictor.backward(grad / len(idx))
            opt.step()
            total += float(loss.sum())
        rec = {"phase": "grid", "epoch": epoch, "chamfer2d": total / len(X),
               "wall_ms": round(1000 * (time.perf_counter() - t0), 1)}
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
    return history


def initial_model(config: TrainConfig) -> VFNet:
    """The model ``train`` starts from for ``config.seed``."""
    init_seq, _ = np.random.SeedSequence(config.seed).spawn(2)
    return VFNet(config.model, rng=np.random.default_rng(init_seq), dtype=np.dtype(config.dtype))


def train(dataset: Sequence[PointCloud], config: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Phases: ELBO with constant sigma and KL warm-up; prior refit; variance
    network alone; grid predictor alone. Deterministic for a fixed ``config.seed``."""
    if len(dataset) == 0:
        raise PreconditionError("training needs a non-empty dataset")
    dtype = np.dtype(config.dtype)
    X = stack(dataset).astype(dtype)
    _, data_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = initial_model(config)
    rng = np.random.default_rng(data_seq)
    history: list[dict] = []

    def emit(rec):
        history.append(rec)
        if on_epoch:
            on_epoch(rec)

    blocks = [b for g in PHASE1_GROUPS for b in model.group_blocks(g)]
    opt = Adamax(blocks, config.learning_rate)
    last_state = _snapshot(model)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        beta = kl_warmup_beta(epoch, config.warmup_epochs)
        acc = np.zeros(3)
        for idx in _batches(rng, len(X), config.batch_size):
            eps = rng.standard_normal((len(idx), model.latent_dim)).astype(dtype)
            model.zero_grad()
            out = objective(model, X[idx], eps, beta, constant_sigma=config.constant_sigma, groups=PHASE1_GROUPS,
                            reduction=config.recon_reduction)
            grads_ok = all(np.all(np.isfinite(b.grad)) for b in blocks)
            if not (np.isfinite(out["loss"]) and grads_ok):
                raise _diverged(model, config, epoch, rng, last_state, history, "training loss")
            opt.step()
            acc += [out["elbo"].sum(), out["recon"].sum(), out["kl"].sum()]
        acc /= len(X)
        last_state = _snapshot(model)
        emit({"phase": "elbo", "epoch": epoch, "beta": beta, "elbo": float(acc[0]), "recon": float(acc[1]),
              "kl": float(acc[2]), "wall_ms": round(1000 * (time.perf_counter() - t0), 1)})

    train_prior(model, X, config.prior_phase_epochs, config, rng, emit)
    train_variance(model, X, config.variance_phase_epochs, config, rng, emit)
    train_grid_predictor(model, X, config.grid_phase_epochs, config, rng, emit)
    return Checkpoint(model, config, config.epochs, rng.bit_generator.state, history)
