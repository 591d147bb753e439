"""A small reverse-mode substrate for per-point networks.

Networks are sequences of six layer kinds. Inputs have shape ``(..., N, F)``:
per-point layers act on the last axis, ``set_max_pool`` reduces the point axis
(-2), and ``concat`` appends a context vector (broadcast over points when it
has one fewer dimension than the input).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError, StateError

KINDS = ("affine", "relu", "tanh", "softplus", "set_max_pool", "concat")

_trace = threading.local()


@contextmanager
def activation_signature():
    """Collect ReLU masks and max-pool argmaxes of every forward pass in the block.

    Two evaluations with equal signatures lie on the same smooth piece of the
    function, which is what a central difference needs.
    """
    sink: list[np.ndarray] = []
    prev = getattr(_trace, "sink", None)
    _trace.sink = sink
    try:
        yield sink
    finally:
        _trace.sink = prev


def _record(arr):
    sink = getattr(_trace, "sink", None)
    if sink is not None:
        sink.append(arr)


@dataclass
class ParameterBlock:
    name: str
    values: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.grad.shape != self.values.shape:
            raise ShapeError(f"{self.name}: gradient shape {self.grad.shape} != value shape {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad[...] = 0


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int
    fan_out: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.fan_in <= 0 or self.fan_out <= 0:
            raise ShapeError(f"{self.kind}: fan_in/fan_out must be positive")
        if self.kind not in ("affine", "concat") and self.fan_in != self.fan_out:
            raise ShapeError(f"{self.kind} layers preserve width ({self.fan_in} != {self.fan_out})")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Network:
    """A layer sequence with named parameter blocks and a one-shot tape.

    ``forward`` records what ``backward`` needs; ``backward`` accumulates into
    each block's ``grad`` and returns gradients for the input and the context.
    """

    def __init__(self, name: str, layers: Sequence[LayerSpec], rng: np.random.Generator | None = None,
                 dtype=np.float64):
        self.name = name
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, ParameterBlock] = {}
        width = None
        for i, spec in enumerate(self.layers):
            if width is not None and spec.fan_in != width:
                raise ShapeError(f"{name}.{i} ({spec.kind}) expects width {spec.fan_in}, previous layer gives {width}")
            width = spec.fan_out
            if spec.kind == "affine":
                w = glorot(rng, spec.fan_in, spec.fan_out).astype(self.dtype)
                b = np.zeros(spec.fan_out, dtype=self.dtype)
                self.params[f"{name}.{i}.weight"] = ParameterBlock(f"{name}.{i}.weight", w)
                self.params[f"{name}.{i}.bias"] = ParameterBlock(f"{name}.{i}.bias", b)
        self._tape = None

    # ------------------------------------------------------------------ build

    @classmethod
    def mlp(cls, name: str, sizes: Sequence[int], *, hidden: str = "relu", output: str | None = None,
            context: int = 0, pool_after: int | None = None, rng=None, dtype=np.float64) -> "Network":
        """Affine stack ``sizes[0] -> ... -> sizes[-1]``.

        ``context`` > 0 prepends a concat layer; ``pool_after`` inserts a
        max-pool after that many affine layers (and their activation).
        """
        layers: list[LayerSpec] = []
        width = sizes[0]
        if context:
            layers.append(LayerSpec("concat", width, width + context))
            width += context
        n_affine = len(sizes) - 1
        for k in range(n_affine):
            layers.append(LayerSpec("affine", width, sizes[k + 1]))
            width = sizes[k + 1]
            last = k == n_affine - 1
            act = output if last else hidden
            if act is not None:
                layers.append(LayerSpec(act, width, width))
            if pool_after is not None and k + 1 == pool_after:
                layers.append(LayerSpec("set_max_pool", width, width))
        return cls(name, layers, rng=rng, dtype=dtype)

    @property
    def in_features(self) -> int:
        return self.layers[0].fan_in

    @property
    def out_features(self) -> int:
        return self.layers[-1].fan_out

    def blocks(self) -> list[ParameterBlock]:
        return list(self.params.values())

    def zero_grad(self):
        for b in self.params.values():
            b.zero_grad()

    def astype(self, dtype) -> "Network":
        clone = self.__class__.__new__(self.__class__)
        clone.__dict__.update(self.__dict__)
        clone.dtype = np.dtype(dtype)
        clone.params = {k: ParameterBlock(k, v.values.astype(dtype)) for k, v in self.params.items()}
        clone._tape = None
        return clone

    # ------------------------------------------------------------ evaluation

    def _affine(self, i):
        return self.params[f"{self.name}.{i}.weight"].values, self.params[f"{self.name}.{i}.bias"].values

    def _forward_layer(self, i: int, spec: LayerSpec, x: np.ndarray, context):
        kind = spec.kind
        if kind == "affine":
            w, b = self._affine(i)
            flat = x.reshape(-1, spec.fan_in)
            y = (flat @ w + b).reshape(x.shape[:-1] + (spec.fan_out,))
            return y, x
        if kind == "relu":
            _record(np.packbits(x > 0))
            return np.maximum(x, 0), x
        if kind == "tanh":
            y = np.tanh(x)
            return y, y
        if kind == "softplus":
            return np.logaddexp(0, x), x
        if kind == "set_max_pool":
            if x.ndim < 2:
                raise ShapeError(f"{self.name}.{i}: set_max_pool needs a point axis")
            idx = np.argmax(x, axis=-2)
            _record(idx)
            y = np.take_along_axis(x, idx[..., None, :], axis=-2)[..., 0, :]
            return y, (idx, x.shape)
        if kind == "concat":
            if context is None:
                raise ShapeError(f"{self.name}.{i}: concat layer needs a context input")
            c = np.asarray(context, dtype=x.dtype)
            broadcast = c.ndim == x.ndim - 1
            if broadcast:
                c = np.broadcast_to(c[..., None, :], x.shape[:-1] + (c.shape[-1],))
            if c.shape[:-1] != x.shape[:-1] or x.shape[-1] + c.shape[-1] != spec.fan_out:
                raise ShapeError(f"{self.name}.{i}: cannot concat {x.shape} with context {np.shape(context)}")
            return np.concatenate([x, c], axis=-1), broadcast
        raise ShapeError(kind)

    def _backward_layer(self, i: int, spec: LayerSpec, g: np.ndarray, cache):
        """Return (grad wrt layer input, grad wrt context or None)."""
        kind = spec.kind
        if kind == "affine":
            x = cache
            w, _ = self._affine(i)
            g2 = g.reshape(-1, spec.fan_out)
            x2 = x.reshape(-1, spec.fan_in)
            self.params[f"{self.name}.{i}.weight"].grad += x2.T @ g2
            self.params[f"{self.name}.{i}.bias"].grad += g2.sum(axis=0)
            return (g2 @ w.T).reshape(x.shape), None
        if kind == "relu":
            return g * (cache > 0), None
        if kind == "tanh":
            return g * (1.0 - cache * cache), None
        if kind == "softplus":
            return g * _sigmoid(cache), None
        if kind == "set_max_pool":
            idx, shape = cache
            gx = np.zeros(shape, dtype=g.dtype)
            np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
            return gx, None
        if kind == "concat":
            f = spec.fan_in
            gc = g[..., f:]
            if cache:
                gc = gc.sum(axis=-2)
            return g[..., :f], gc
        raise ShapeError(kind)

    def forward(self, x: np.ndarray, context: np.ndarray | None = None, record: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"{self.name}: expected {self.in_features} input features, got {x.shape[-1]}")
        caches = []
        for i, spec in enumerate(self.layers):
            x, cache = self._forward_layer(i, spec, x, context)
            caches.append(cache)
        self._tape = caches if record else None
        return x

    __call__ = forward

    def backward(self, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        if self._tape is None:
            raise StateError(f"{self.name}: backward called without a recorded forward pass")
        caches, self._tape = self._tape, None
        g = np.asarray(upstream, dtype=self.dtype)
        g_ctx = None
        for i in range(len(self.layers) - 1, -1, -1):
            g, gc = self._backward_layer(i, self.layers[i], g, caches[i])
            if gc is not None:
                g_ctx = gc if g_ctx is None else g_ctx + gc
        return g, g_ctx


# ------------------------------------------------------------ gradient checks


@dataclass
class GradientReport:
    errors: dict[str, float]
    tolerance: float
    refined: int = 0
    skipped: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    @property
    def flagged(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tolerance]

    def __str__(self):
        lines = [f"{k:40s} {v:.3e}" for k, v in self.errors.items()]
        lines.append(f"max relative error {self.max_error:.3e} (tolerance {self.tolerance:g}, "
                     f"{self.refined} coords re-stepped at kinks, {self.skipped} skipped): "
                     + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def relative_error(analytic, numeric, floor: float = 1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _same(sig_a, sig_b) -> bool:
    return len(sig_a) == len(sig_b) and all(np.array_equal(a, b) for a, b in zip(sig_a, sig_b))


def finite_difference_check(
    targets: Iterable[tuple[str, np.ndarray, np.ndarray]],
    value_fn: Callable[[], float],
    tolerance: float = 1e-4,
    rng: np.random.Generator | None = None,
    n_coords: int = 64,
    step: float = 1e-5,
    min_step: float = 1e-8,
) -> GradientReport:
    """Compare analytic gradients against central differences.

    ``targets`` yields ``(name, values, analytic_grad)``; ``values`` is perturbed
    in place and ``value_fn`` must read it. Up to ``n_coords`` coordinates per
    target are sampled (all of them when the block is smaller).

    When a perturbation flips a ReLU mask or a max-pool argmax the difference
    straddles a kink; the step is then divided by 10 (down to ``min_step``)
    until both sides sit on the base point's smooth piece. Coordinates that
    never do are skipped and counted.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with activation_signature() as base_sig:
        value_fn()
    base_sig = list(base_sig)

    def probe():
        with activation_signature() as sig:
            v = value_fn()
        return v, sig

    errors = {}
    refined = skipped = 0
    for name, values, analytic in targets:
        flat = values.reshape(-1)
        grad = np.asarray(analytic).reshape(-1)
        if flat.size <= n_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            h = step
            numeric = None
            while h >= min_step:
                flat[c] = orig + h
                up, sig_up = probe()
                flat[c] = orig - h
                down, sig_down = probe()
                flat[c] = orig
                if _same(sig_up, base_sig) and _same(sig_down, base_sig):
                    numeric = (up - down) / (2.0 * h)
                    break
                h /= 10.0
            if numeric is None:
                skipped += 1
                continue
            if h < step:
                refined += 1
            worst = max(worst, float(relative_error(grad[c], numeric)))
        errors[name] = worst
    return GradientReport(errors, tolerance, refined, skipped)


def check_gradients(
    network: Network,
    loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    tolerance: float = 1e-4,
    context: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    n_coords: int = 64,
    step: float = 1e-5,
) -> GradientReport:
    """Per-block (and input) max relative error of ``network.backward``.

    ``loss`` maps the network output to ``(value, d value / d output)``.
    """
    x = np.array(x, dtype=network.dtype)
    ctx = None if context is None else np.array(context, dtype=network.dtype)
    network.zero_grad()
    out = network.forward(x, ctx)
    _, g_out = loss(out)
    gx, gctx = network.backward(g_out)

    def value():
        return float(loss(network.forward(x, ctx, record=False))[0])

    targets = [(b.name, b.values, b.grad.copy()) for b in network.blocks()]
    targets.append(("input", x, gx))
    if ctx is not None:
        targets.append(("context", ctx, gctx))
    return finite_difference_check(targets, value, tolerance, rng, n_coords, step)
