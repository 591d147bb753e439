"""Affine-coupling normalizing flow used as the latent prior."""

from __future__ import annotations

import math

import numpy as np

from .diffcore import Network, ParameterBlock
from .errors import PreconditionError, StateError


class FlowPrior:
    """``z = loc + exp(log_scale) * couplings(u)``, ``u ~ N(0, I)``.

    Coupling layer k conditions on one half of the coordinates and applies
    ``x_t * exp(s) + t`` to the other; halves alternate between layers.
    Log-scales pass through tanh so each layer scales by at most e; the
    elementwise output affine carries unbounded location and scale.
    With ``identity=True`` the last layer of every coupling net is zeroed and the
    output affine is (0, 1), which makes the whole flow the identity map.
    """

    def __init__(self, dim: int, n_layers: int = 4, hidden: int = 32, rng=None, dtype=np.float64,
                 identity: bool = True):
        if dim < 2:
            raise PreconditionError("a coupling flow needs at least two latent dimensions")
        self.dim = dim
        self.n_layers = n_layers
        self.hidden = hidden
        rng = rng if rng is not None else np.random.default_rng(0)
        half = dim // 2
        first, second = np.arange(half), np.arange(half, dim)
        self.masks = []
        self.couplings: list[Network] = []
        for k in range(n_layers):
            cond, trans = (first, second) if k % 2 == 0 else (second, first)
            net = Network.mlp(f"flow.{k}", [len(cond), hidden, hidden, 2 * len(trans)], hidden="tanh",
                              rng=rng, dtype=dtype)
            if identity:
                last = len(net.layers) - 1
                net.params[f"flow.{k}.{last}.weight"].values[...] = 0
            self.masks.append((cond, trans))
            self.couplings.append(net)
        self.loc = ParameterBlock("flow.loc", np.zeros(dim, dtype=dtype))
        self.log_scale = ParameterBlock("flow.log_scale", np.zeros(dim, dtype=dtype))
        self._tape = None

    def blocks(self) -> list[ParameterBlock]:
        return [b for net in self.couplings for b in net.blocks()] + [self.loc, self.log_scale]

    def reset(self, loc: np.ndarray, scale: np.ndarray):
        """Identity couplings with a diagonal Gaussian ``N(loc, diag(scale^2))``."""
        for net in self.couplings:
            last = len(net.layers) - 1
            net.params[f"{net.name}.{last}.weight"].values[...] = 0
            net.params[f"{net.name}.{last}.bias"].values[...] = 0
        self.loc.values[...] = loc
        self.log_scale.values[...] = np.log(scale)

    def astype(self, dtype) -> "FlowPrior":
        clone = self.__class__.__new__(self.__class__)
        clone.__dict__.update(self.__dict__)
        clone.couplings = [net.astype(dtype) for net in self.couplings]
        clone.loc = ParameterBlock("flow.loc", self.loc.values.astype(dtype))
        clone.log_scale = ParameterBlock("flow.log_scale", self.log_scale.values.astype(dtype))
        clone._tape = None
        return clone

    def _split(self, k, raw):
        n_t = len(self.masks[k][1])
        return np.tanh(raw[:, :n_t]), raw[:, n_t:]

    def forward(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Base sample -> latent; returns ``(z, log|det dz/du|)``."""
        x = np.array(np.atleast_2d(u), dtype=self.couplings[0].dtype)
        logdet = np.zeros(x.shape[0], dtype=x.dtype)
        for k, net in enumerate(self.couplings):
            cond, trans = self.masks[k]
            s, shift = self._split(k, net.forward(x[:, cond], record=False))
            x[:, trans] = x[:, trans] * np.exp(s) + shift
            logdet += s.sum(axis=1)
        x = self.loc.values + np.exp(self.log_scale.values) * x
        return x, logdet + self.log_scale.values.sum()

    def inverse(self, z: np.ndarray, record: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Latent -> base; returns ``(u, log|det du/dz|)``."""
        z = np.asarray(np.atleast_2d(z), dtype=self.couplings[0].dtype)
        x = (z - self.loc.values) * np.exp(-self.log_scale.values)
        logdet = np.full(x.shape[0], -self.log_scale.values.sum(), dtype=x.dtype)
        y = x.copy()
        caches = []
        for k in reversed(range(self.n_layers)):
            cond, trans = self.masks[k]
            s, shift = self._split(k, self.couplings[k].forward(x[:, cond], record=record))
            ut = (x[:, trans] - shift) * np.exp(-s)
            x[:, trans] = ut
            logdet -= s.sum(axis=1)
            caches.append((k, s, ut))
        self._tape = (caches, x.copy(), y) if record else None
        return x, logdet

    def log_prob(self, z: np.ndarray, record: bool = False) -> np.ndarray:
        u, logdet = self.inverse(z, record=record)
        return -0.5 * np.sum(u * u, axis=1) - 0.5 * self.dim * math.log(2 * math.pi) + logdet

    def log_prob_backward(self, g_logp: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients of ``sum(g_logp * log_prob(z))``; return d/dz."""
        if self._tape is None:
            raise StateError("flow backward called without a recorded log_prob")
        caches, u, y = self._tape
        self._tape = None
        gl = np.asarray(g_logp, dtype=u.dtype)[:, None]
        gx = -u * gl
        for k, s, ut in reversed(caches):
            cond, trans = self.masks[k]
            g_ut = gx[:, trans]
            e = np.exp(-s)
            g_s = -g_ut * ut - gl
            g_shift = -g_ut * e
            g_raw = np.concatenate([g_s * (1.0 - s * s), g_shift], axis=1)
            g_cond, _ = self.couplings[k].backward(g_raw)
            new = np.empty_like(gx)
            new[:, cond] = gx[:, cond] + g_cond
            new[:, trans] = g_ut * e
            gx = new
        e = np.exp(-self.log_scale.values)
        self.loc.grad += -(gx * e).sum(axis=0)
        self.log_scale.grad += -(gx * y).sum(axis=0) - gl.sum()
        return gx * e

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        u = rng.standard_normal((n, self.dim))
        return self.forward(u)[0]
