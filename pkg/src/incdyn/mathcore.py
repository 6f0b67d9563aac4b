"""Minimal differentiable function-approximation stack.

Fixed-architecture multilayer perceptrons with exact reverse-mode gradients
and an Adam optimizer.  Everything is a pure function over value-semantic
dataclasses: no operation mutates its arguments, and identical inputs always
produce identical outputs.  All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, DivergedError


@dataclass(frozen=True)
class MlpParams:
    """Fully connected net.

    weights[k] has shape (out_k, in_k), biases[k] has shape (out_k,), and
    adjacent layers compose (out_k == in_{k+1}).  The activation is applied
    between layers, never after the last one.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "tanh"  # "tanh" | "relu"

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]


@dataclass(frozen=True)
class Gradient:
    """Per-parameter partials of a scalar loss; shape-congruent with MlpParams."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class AdamState:
    """Adam moment estimates plus hyperparameters.

    m and v track first/second moments and must stay shape-congruent with the
    parameters they optimize; t counts completed steps.
    """

    m: Gradient
    v: Gradient
    t: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_params(layer_sizes: list[int] | tuple[int, ...], seed: int | np.random.Generator,
                activation: str = "tanh") -> MlpParams:
    """Seeded initialization: weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero."""
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise ContractError(f"layer_sizes must be >= 2 positive integers, got {layer_sizes}")
    if activation not in ("tanh", "relu"):
        raise ContractError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(weights), tuple(biases), activation)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ContractError(f"input dim {x.shape[-1]} != net in_dim {params.in_dim}")
    return x


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass; x is (in,) or a batch (batch, in)."""
    h = _check_input(params, x)
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if k != last:
            h = _activate(h, params.activation)
    return h


def _forward_cached(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    # Returns (output, layer inputs, pre-activations) for the backward pass.
    h = x
    inputs = []
    pres = []
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pres.append(z)
        h = _activate(z, params.activation) if k != last else z
    return h, inputs, pres


def forward_cached(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Batched forward pass that also returns the cache backward_cached needs."""
    x = _check_input(params, x)
    out, inputs, pres = _forward_cached(params, x)
    return out, (inputs, pres)


def backward_cached(params: MlpParams, cache: tuple, upstream: np.ndarray,
                    need_param_grads: bool = True) -> tuple[Gradient | None, np.ndarray]:
    """Reverse pass reusing a forward_cached cache; returns (Gradient | None, d_input).

    Skipping the parameter gradients (need_param_grads=False) avoids the
    weight-gradient matmuls when only the input gradient is wanted.
    """
    inputs, pres = cache
    dw = [None] * len(params.weights)
    db = [None] * len(params.biases)
    delta = upstream
    for k in range(len(params.weights) - 1, -1, -1):
        if k != len(params.weights) - 1:
            # the next layer's input is this layer's post-activation
            act = inputs[k + 1]
            if params.activation == "tanh":
                delta = delta * (1.0 - act ** 2)
            else:
                delta = delta * (pres[k] > 0.0)
        if need_param_grads:
            dw[k] = delta.T @ inputs[k]
            db[k] = delta.sum(axis=0)
        delta = delta @ params.weights[k]
    grad = Gradient(tuple(dw), tuple(db)) if need_param_grads else None
    return grad, delta


def _backward(params: MlpParams, x: np.ndarray, upstream: np.ndarray) -> tuple[Gradient, np.ndarray]:
    _, inputs, pres = _forward_cached(params, x)
    grad, dx = backward_cached(params, (inputs, pres), upstream)
    return grad, dx


def mlp_backward(params: MlpParams, x: np.ndarray, upstream: np.ndarray) -> Gradient:
    """Exact gradient of <upstream, mlp_forward(params, x)> w.r.t. all parameters.

    x is (in,) or (batch, in), upstream matching (out,) or (batch, out); batch
    gradients are summed.
    """
    grad, _ = mlp_backward_io(params, x, upstream)
    return grad


def mlp_backward_io(params: MlpParams, x: np.ndarray, upstream: np.ndarray) -> tuple[Gradient, np.ndarray]:
    """Like mlp_backward but also returns the gradient w.r.t. the input."""
    x = _check_input(params, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape[-1] != params.out_dim:
        raise ContractError(f"upstream dim {upstream.shape[-1]} != net out_dim {params.out_dim}")
    single = x.ndim == 1
    if single:
        x = x[None, :]
        upstream = upstream[None, :]
    if x.shape[0] != upstream.shape[0]:
        raise ContractError("x and upstream batch sizes differ")
    grad, dx = _backward(params, x, upstream)
    return grad, (dx[0] if single else dx)


def zeros_like_grad(params: MlpParams) -> Gradient:
    return Gradient(tuple(np.zeros_like(w) for w in params.weights),
                    tuple(np.zeros_like(b) for b in params.biases))


def adam_init(params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    z = zeros_like_grad(params)
    return AdamState(m=z, v=zeros_like_grad(params), t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: MlpParams, grad: Gradient) -> tuple[AdamState, MlpParams]:
    """One bias-corrected Adam descent step; returns the new state and parameters."""
    if len(grad.weights) != len(params.weights):
        raise ContractError("gradient/parameter layer counts differ")
    for gw, w in zip(grad.weights, params.weights):
        if gw.shape != w.shape:
            raise ContractError(f"gradient shape {gw.shape} != weight shape {w.shape}")
    for arrs in (grad.weights, grad.biases):
        for g in arrs:
            if not np.all(np.isfinite(g)):
                raise DivergedError("non-finite gradient")
    t = state.t + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_m, new_v, new_w, new_b = [], [], [], []
    for group, out_m, out_v, out_p in (
        (zip(state.m.weights, state.v.weights, params.weights, grad.weights), new_m, new_v, new_w),
        (zip(state.m.biases, state.v.biases, params.biases, grad.biases), new_m, new_v, new_b),
    ):
        for m, v, p, g in group:
            m2 = state.beta1 * m + (1.0 - state.beta1) * g
            v2 = state.beta2 * v + (1.0 - state.beta2) * g * g
            out_m.append(m2)
            out_v.append(v2)
            out_p.append(p - state.lr * (m2 / c1) / (np.sqrt(v2 / c2) + state.eps))
    n = len(params.weights)
    new_state = replace(state,
                        m=Gradient(tuple(new_m[:n]), tuple(new_m[n:])),
                        v=Gradient(tuple(new_v[:n]), tuple(new_v[n:])),
                        t=t)
    return new_state, MlpParams(tuple(new_w), tuple(new_b), params.activation)


def flatten_params(params: MlpParams) -> np.ndarray:
    """All parameters as one float64 vector (per layer: weights row-major, then bias)."""
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten_params(template: MlpParams, vec: np.ndarray) -> MlpParams:
    """Inverse of flatten_params for a net with the template's shapes."""
    vec = np.asarray(vec, dtype=np.float64)
    weights, biases = [], []
    pos = 0
    for w, b in zip(template.weights, template.biases):
        weights.append(vec[pos:pos + w.size].reshape(w.shape).copy())
        pos += w.size
        biases.append(vec[pos:pos + b.size].copy())
        pos += b.size
    if pos != vec.size:
        raise ContractError(f"parameter vector length {vec.size} != expected {pos}")
    return MlpParams(tuple(weights), tuple(biases), template.activation)
