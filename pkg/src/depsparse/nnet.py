"""Minimal feedforward kernel with exact analytic Jacobians.

Pure-numpy MLPs (affine layers, leaky-rectifier activations, affine last
layer) with forward/backward passes, exact input Jacobians via the layer
product, the gradient of the mean-absolute-Jacobian penalty, and an Adam
optimizer. Everything is deterministic: parameter values are immutable per
call and identical inputs give bit-identical outputs.

All kernels accept a single input vector ``(d,)`` or a batch ``(n, d)``.
Batched gradient reductions are plain matrix products, so the summation
order is fixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import NumericError

Grads = list[tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class NetParams:
    """Layer parameters plus per-junction leaky-rectifier slopes.

    ``layers[l]`` is ``(weight, bias)`` with weight shape ``(n_out, n_in)``;
    ``slopes[l]`` is the rectifier slope applied after layer ``l`` (the last
    layer is affine, so there are ``len(layers) - 1`` slopes).
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    slopes: tuple[float, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        if len(self.slopes) != len(self.layers) - 1:
            raise ValueError(
                f"need {len(self.layers) - 1} slopes for {len(self.layers)} layers, "
                f"got {len(self.slopes)}"
            )
        prev = None
        for idx, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {idx + 1}: bad shapes {w.shape}, {b.shape}")
            if prev is not None and w.shape[1] != prev:
                raise ValueError(
                    f"layer {idx + 1}: input width {w.shape[1]} != previous output {prev}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {idx + 1}: non-finite parameters")
            prev = w.shape[0]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def flatten(self) -> list[list[float]]:
        out = []
        for w, b in self.layers:
            out.append([list(map(float, row)) for row in w])
            out.append(list(map(float, b)))
        return out


def make_net(
    weights_and_biases: Sequence[tuple[np.ndarray, np.ndarray]],
    slope: float | Sequence[float] = 0.2,
) -> NetParams:
    """Build NetParams from arrays, freezing them read-only."""
    layers = []
    for w, b in weights_and_biases:
        w = np.array(w, dtype=np.float64, copy=True)
        b = np.array(b, dtype=np.float64, copy=True)
        w.setflags(write=False)
        b.setflags(write=False)
        layers.append((w, b))
    n_hidden = len(layers) - 1
    if np.isscalar(slope):
        slopes = (float(slope),) * n_hidden
    else:
        slopes = tuple(float(s) for s in slope)
    return NetParams(tuple(layers), slopes)


def init_mlp(
    rng: np.random.Generator,
    sizes: Sequence[int],
    slope: float = 0.2,
    *,
    weight_gain: float = 1.0,
    bias_scale: float = 0.0,
) -> NetParams:
    """Random MLP with scaled-normal weights.

    Weights are N(0, gain^2 * 2 / ((1 + slope^2) * fan_in)); biases are
    uniform in [-bias_scale, bias_scale].
    """
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    he = np.sqrt(2.0 / (1.0 + slope * slope))
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        std = weight_gain * he / np.sqrt(n_in)
        w = rng.normal(0.0, std, size=(n_out, n_in))
        b = rng.uniform(-bias_scale, bias_scale, size=n_out) if bias_scale > 0 else np.zeros(n_out)
        layers.append((w, b))
    return make_net(layers, slope)


@dataclass(frozen=True)
class ForwardCache:
    """Input plus per-layer preactivations, enough for backward/Jacobian."""

    x: np.ndarray
    preacts: tuple[np.ndarray, ...]


def _leaky(y: np.ndarray, slope: float) -> np.ndarray:
    return np.where(y > 0.0, y, slope * y)


def _leaky_slope(y: np.ndarray, slope: float) -> np.ndarray:
    return np.where(y > 0.0, 1.0, slope)


def _as_batch(x: np.ndarray, d: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != d:
            raise ValueError(f"input dimension {arr.shape[0]} != expected {d}")
        return arr[None, :], True
    if arr.ndim == 2:
        if arr.shape[1] != d:
            raise ValueError(f"input dimension {arr.shape[1]} != expected {d}")
        return arr, False
    raise ValueError(f"input must be 1-D or 2-D, got shape {arr.shape}")


def forward(params: NetParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Affine + leaky-rectifier composition; returns output and cache."""
    batch, single = _as_batch(x, params.in_dim)
    a = batch
    preacts = []
    n_layers = len(params.layers)
    for l, (w, b) in enumerate(params.layers):
        y = a @ w.T + b
        preacts.append(y)
        a = _leaky(y, params.slopes[l]) if l < n_layers - 1 else y
    out = a[0] if single else a
    return out, ForwardCache(batch, tuple(preacts))


def jacobian(params: NetParams, x: np.ndarray) -> np.ndarray:
    """Exact input Jacobian: product of per-layer Jacobians.

    Returns ``(d_out, d_in)`` for a vector input, ``(n, d_out, d_in)`` for a
    batch.
    """
    batch, single = _as_batch(x, params.in_dim)
    _, cache = forward(params, batch)
    jac = _jacobian_from_cache(params, cache)
    return jac[0] if single else jac


def _jacobian_from_cache(params: NetParams, cache: ForwardCache) -> np.ndarray:
    n = cache.x.shape[0]
    w0 = params.layers[0][0]
    jac = np.broadcast_to(w0, (n,) + w0.shape).copy()
    for l in range(1, len(params.layers)):
        d = _leaky_slope(cache.preacts[l - 1], params.slopes[l - 1])
        w = params.layers[l][0]
        jac = np.matmul(w, d[:, :, None] * jac)
    return jac


def backward(
    params: NetParams, cache: ForwardCache, output_grad: np.ndarray
) -> tuple[Grads, np.ndarray]:
    """Exact reverse-mode gradients of a scalar loss with the given output
    gradient.

    ``output_grad`` has one row per cached sample (or a single vector); the
    returned parameter gradients sum over the batch. Also returns the
    gradient with respect to the input, shaped like the cached input.
    """
    single = output_grad.ndim == 1
    g = np.asarray(output_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != cache.preacts[-1].shape:
        raise ValueError(
            f"output_grad shape {output_grad.shape} does not match cached "
            f"output shape {cache.preacts[-1].shape}"
        )
    n_layers = len(params.layers)
    acts = [cache.x]
    for l in range(n_layers - 1):
        acts.append(_leaky(cache.preacts[l], params.slopes[l]))
    grads: Grads = [None] * n_layers  # type: ignore[list-item]
    delta = g
    for l in range(n_layers - 1, -1, -1):
        dw = delta.T @ acts[l]
        db = delta.sum(axis=0)
        grads[l] = (dw, db)
        delta = delta @ params.layers[l][0]
        if l > 0:
            delta = delta * _leaky_slope(cache.preacts[l - 1], params.slopes[l - 1])
    input_grad = delta[0] if single else delta
    return grads, input_grad


def jacobian_penalty(params: NetParams, x: np.ndarray) -> float:
    """Mean absolute Jacobian entry, averaged over the batch."""
    jac = jacobian(params, x)
    return float(np.mean(np.abs(jac)))


def jacobian_penalty_grad(params: NetParams, x: np.ndarray) -> tuple[Grads, float]:
    """Gradient of the mean absolute Jacobian entry w.r.t. parameters.

    Differentiates the layer-product Jacobian expression directly; the
    rectifier slopes are piecewise constant in the parameters, so away from
    kinks this is the exact gradient. Subgradient 0 at zero entries. Bias
    gradients are identically zero. For a batch the penalty is additionally
    averaged over rows. Returns (gradients, penalty value).
    """
    batch, _ = _as_batch(x, params.in_dim)
    n = batch.shape[0]
    _, cache = forward(params, batch)
    n_layers = len(params.layers)
    d_in = params.in_dim

    # prefix[l]: Jacobian of the layer-l input w.r.t. the network input
    # (None stands for the identity at the first layer)
    prefix: list[Optional[np.ndarray]] = [None] * n_layers
    running: Optional[np.ndarray] = None
    for l in range(n_layers):
        prefix[l] = running
        if l < n_layers - 1:
            w = params.layers[l][0]
            d = _leaky_slope(cache.preacts[l], params.slopes[l])
            running = d[:, :, None] * (w if running is None else np.matmul(w, running))

    last_w = params.layers[-1][0]
    if prefix[-1] is None:
        jac = np.broadcast_to(last_w, (n,) + last_w.shape)
    else:
        jac = np.matmul(last_w, prefix[-1])
    value = float(np.mean(np.abs(jac)))

    scale = 1.0 / (n * params.out_dim * d_in)
    g = np.sign(jac) * scale

    grads: Grads = []
    v = g  # suffix-transported sensitivity, shape (n, layer output width, d_in)
    for l in range(n_layers - 1, -1, -1):
        bias = params.layers[l][1]
        if prefix[l] is None:
            dw = v.sum(axis=0)
        else:
            dw = np.tensordot(v, prefix[l], axes=((0, 2), (0, 2)))
        grads.append((dw, np.zeros_like(bias)))
        if l > 0:
            v = np.matmul(params.layers[l][0].T, v)
            d = _leaky_slope(cache.preacts[l - 1], params.slopes[l - 1])
            v = d[:, :, None] * v
    grads.reverse()
    return grads, value


@dataclass
class OptState:
    """Adam accumulators shaped like the parameters, plus hyperparameters."""

    m: Grads
    v: Grads
    step: int
    learning_rate: float
    beta1: float
    beta2: float
    epsilon: float


def init_opt_state(
    params: NetParams,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> OptState:
    zeros = lambda: [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
    return OptState(zeros(), zeros(), 0, learning_rate, beta1, beta2, epsilon)


def adam_step(params: NetParams, grads: Grads, state: OptState) -> tuple[NetParams, OptState]:
    """One bias-corrected Adam update; returns new params and state."""
    if len(grads) != len(params.layers):
        raise ValueError(f"got {len(grads)} gradient layers for {len(params.layers)} layers")
    for idx, (gw, gb) in enumerate(grads):
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NumericError(f"non-finite gradient in layer {idx + 1}")
        if gw.shape != params.layers[idx][0].shape or gb.shape != params.layers[idx][1].shape:
            raise ValueError(f"gradient shape mismatch in layer {idx + 1}")
    t = state.step + 1
    b1, b2, eps, lr = state.beta1, state.beta2, state.epsilon, state.learning_rate
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_layers = []
    new_m: Grads = []
    new_v: Grads = []
    for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(
        params.layers, grads, state.m, state.v
    ):
        mw2 = b1 * mw + (1 - b1) * gw
        mb2 = b1 * mb + (1 - b1) * gb
        vw2 = b2 * vw + (1 - b2) * gw * gw
        vb2 = b2 * vb + (1 - b2) * gb * gb
        w2 = w - lr * (mw2 / c1) / (np.sqrt(vw2 / c2) + eps)
        b2_ = b - lr * (mb2 / c1) / (np.sqrt(vb2 / c2) + eps)
        w2.setflags(write=False)
        b2_.setflags(write=False)
        new_layers.append((w2, b2_))
        new_m.append((mw2, mb2))
        new_v.append((vw2, vb2))
    new_params = NetParams(tuple(new_layers), params.slopes)
    new_state = OptState(new_m, new_v, t, lr, b1, b2, eps)
    return new_params, new_state
