"""The incremental dynamics model.

A small MLP maps (state, previous action) to a gain matrix, and the one-step
prediction is

    s_next_hat = s + gain(s, a_prev) @ (a - a_prev)

so the learning problem is matrix regression rather than full transition-map
regression.  The gain can optionally be expressed as a fixed prior matrix plus
a learned residual (training then starts exactly at the prior), and for square
systems a diagonal-only mode halves the output size.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .envs import feature_dim_by_name, state_features_by_name
from .errors import ContractError, DivergedError, NoDataError
from .mathcore import (AdamState, Gradient, MlpParams, adam_step, init_params,
                       flatten_params, mlp_backward_io, mlp_forward, unflatten_params)
from .replay import ReplayBuffer, Transition, TransitionBatch

MODE_FULL = "full"
MODE_DIAGONAL = "diagonal"

_CKPT_HEADER = struct.Struct("<6q")  # n, m, mode, activation, obs, n_layer_sizes

_ACT_CODE = {"tanh": 0, "relu": 1}
_OBS_CODE = {"raw": 0, "pendulum": 1}


@dataclass(frozen=True)
class IncrementalModel:
    """Gain-matrix network plus its shape/mode metadata.

    ``obs`` names the state feature map the net consumes ("raw" passes the
    state through unchanged).  ``prior`` (n, m), when present, is added to the
    net output, so the net only learns the residual.
    """

    net: MlpParams
    mode: str
    n: int
    m: int
    prior: np.ndarray | None = None
    obs: str = "raw"


@dataclass(frozen=True)
class ModelBatch:
    """Training columns extracted from transitions."""

    s: np.ndarray        # (batch, n)
    a_prev: np.ndarray   # (batch, m)
    a: np.ndarray        # (batch, m)
    s_next: np.ndarray   # (batch, n)

    def __len__(self) -> int:
        return self.s.shape[0]


def model_batch_from(batch: TransitionBatch | list[Transition]) -> ModelBatch:
    if isinstance(batch, list):
        if not batch:
            raise NoDataError("empty transition list")
        return ModelBatch(np.stack([t.s for t in batch]),
                          np.stack([t.a_prev for t in batch]),
                          np.stack([t.a for t in batch]),
                          np.stack([t.s_next for t in batch]))
    return ModelBatch(batch.s, batch.a_prev, batch.a, batch.s_next)


def make_model(n: int, m: int, hidden: tuple[int, ...] = (64, 64), mode: str = MODE_FULL,
               prior: np.ndarray | None = None, seed: int | np.random.Generator = 0,
               activation: str = "tanh", obs: str = "raw") -> IncrementalModel:
    """Build a freshly initialized model.

    With a prior the final layer is zero-initialized, so the gain starts out
    exactly equal to the prior.
    """
    if mode not in (MODE_FULL, MODE_DIAGONAL):
        raise ContractError(f"unknown mode {mode!r}")
    if mode == MODE_DIAGONAL and n != m:
        raise ContractError("diagonal mode requires n == m")
    if obs not in _OBS_CODE:
        raise ContractError(f"unknown feature map {obs!r}")
    out_dim = n * m if mode == MODE_FULL else n
    in_dim = feature_dim_by_name(obs, n) + m
    net = init_params([in_dim, *hidden, out_dim], seed, activation=activation)
    if prior is not None:
        prior = np.asarray(prior, dtype=np.float64)
        if prior.shape != (n, m):
            raise ContractError(f"prior shape {prior.shape} != ({n}, {m})")
        weights = list(net.weights)
        biases = list(net.biases)
        weights[-1] = np.zeros_like(weights[-1])
        biases[-1] = np.zeros_like(biases[-1])
        net = MlpParams(tuple(weights), tuple(biases), net.activation)
    return IncrementalModel(net=net, mode=mode, n=n, m=m, prior=prior, obs=obs)


def _net_input(model: IncrementalModel, s: np.ndarray, a_prev: np.ndarray) -> np.ndarray:
    feats = state_features_by_name(model.obs, np.asarray(s, dtype=np.float64))
    return np.concatenate([feats, np.asarray(a_prev, dtype=np.float64)], axis=-1)


def _embed(model: IncrementalModel, out: np.ndarray) -> np.ndarray:
    # Net output rows -> (batch, n, m) gain matrices.
    b = out.shape[0]
    if model.mode == MODE_FULL:
        gain = out.reshape(b, model.n, model.m)
    else:
        gain = np.zeros((b, model.n, model.m))
        idx = np.arange(model.n)
        gain[:, idx, idx] = out
    if model.prior is not None:
        gain = gain + model.prior[None, :, :]
    return gain


def gain_batch(model: IncrementalModel, s: np.ndarray, a_prev: np.ndarray) -> np.ndarray:
    """Gain matrices for a batch of (state, previous action) pairs: (batch, n, m)."""
    out = mlp_forward(model.net, _net_input(model, s, a_prev))
    if not np.all(np.isfinite(out)):
        raise DivergedError("model net produced non-finite output")
    return _embed(model, out)


def gain(model: IncrementalModel, s: np.ndarray, a_prev: np.ndarray) -> np.ndarray:
    """The (n, m) gain matrix at one (state, previous action) point."""
    return gain_batch(model, np.asarray(s)[None, :], np.asarray(a_prev)[None, :])[0]


def predict_batch(model: IncrementalModel, s: np.ndarray, a_prev: np.ndarray,
                  a: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    da = np.asarray(a, dtype=np.float64) - np.asarray(a_prev, dtype=np.float64)
    g = gain_batch(model, s, a_prev)
    return s + np.einsum("bnm,bm->bn", g, da)


def predict(model: IncrementalModel, s: np.ndarray, a_prev: np.ndarray,
            a: np.ndarray) -> np.ndarray:
    """One-step prediction s + gain(s, a_prev) @ (a - a_prev).

    A zero action increment returns s exactly, whatever the net parameters.
    """
    return predict_batch(model, np.asarray(s)[None, :], np.asarray(a_prev)[None, :],
                         np.asarray(a)[None, :])[0]


def estimate_drift(s: np.ndarray, a_prev: np.ndarray, gain_matrix: np.ndarray) -> np.ndarray:
    """Diagnostic estimate of the non-action part of the dynamics: s - gain @ a_prev."""
    return np.asarray(s, dtype=np.float64) - np.asarray(gain_matrix) @ np.asarray(a_prev)


def prediction_errors(model: IncrementalModel, batch: ModelBatch, ord: float = 2) -> np.ndarray:
    """Per-sample prediction error norms over a batch."""
    if len(batch) == 0:
        raise NoDataError("empty batch")
    pred = predict_batch(model, batch.s, batch.a_prev, batch.a)
    return np.linalg.norm(batch.s_next - pred, ord=ord, axis=1)


def model_loss(model: IncrementalModel, batch: ModelBatch) -> float:
    """Mean Euclidean prediction-error norm over the batch (zero iff every
    sample is predicted exactly)."""
    return float(prediction_errors(model, batch).mean())


def _loss_and_grad(model: IncrementalModel, batch: ModelBatch) -> tuple[float, Gradient]:
    b = len(batch)
    z = _net_input(model, batch.s, batch.a_prev)
    out = mlp_forward(model.net, z)
    if not np.all(np.isfinite(out)):
        raise DivergedError("model net produced non-finite output")
    g = _embed(model, out)
    da = batch.a - batch.a_prev
    resid = batch.s_next - (batch.s + np.einsum("bnm,bm->bn", g, da))
    norms = np.linalg.norm(resid, axis=1)
    loss = float(norms.mean())
    # d loss / d pred = -resid / (batch * norm); subgradient 0 where norm == 0
    safe = np.where(norms > 0.0, norms, 1.0)
    dpred = -resid / (b * safe[:, None])
    dpred[norms == 0.0] = 0.0
    dgain = dpred[:, :, None] * da[:, None, :]            # (b, n, m)
    if model.mode == MODE_FULL:
        dout = dgain.reshape(b, model.n * model.m)
    else:
        idx = np.arange(model.n)
        dout = dgain[:, idx, idx]
    grad, _ = mlp_backward_io(model.net, z, dout)
    return loss, grad


def train_model(model: IncrementalModel, buf: ReplayBuffer, steps: int, batch_size: int,
                opt: AdamState, seed: int | np.random.Generator
                ) -> tuple[IncrementalModel, AdamState, float]:
    """Adam descent on the model loss over uniform minibatches from buf.

    Returns the updated model, optimizer state, and the last minibatch loss
    (with steps == 0: the loss of one sampled batch under the initial model).
    Deterministic per seed.
    """
    if len(buf) == 0:
        raise NoDataError("cannot train on an empty buffer")
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if steps < 0:
        raise ContractError("steps must be >= 0")
    rng = np.random.default_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    if steps == 0:
        return model, opt, model_loss(model, model_batch_from(buf.sample_batch(batch_size, rng)))
    loss = np.nan
    net = model.net
    for _ in range(steps):
        batch = model_batch_from(buf.sample_batch(batch_size, rng))
        loss, grad = _loss_and_grad(replace(model, net=net), batch)
        if not np.isfinite(loss):
            raise DivergedError("model training loss is non-finite")
        opt, net = adam_step(opt, net, grad)
    return replace(model, net=net), opt, float(loss)


def save_model(model: IncrementalModel, path: str) -> None:
    """Checkpoint: int64 header (n, m, mode, activation, feature map, layer
    count), int64 layer sizes, float64 flat parameters, then the prior block
    (count, entries)."""
    sizes = [model.net.in_dim] + [w.shape[0] for w in model.net.weights]
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(model.n, model.m,
                                   0 if model.mode == MODE_FULL else 1,
                                   _ACT_CODE[model.net.activation],
                                   _OBS_CODE[model.obs], len(sizes)))
        fh.write(np.asarray(sizes, dtype="<i8").tobytes())
        fh.write(flatten_params(model.net).astype("<f8").tobytes())
        prior = np.zeros(0) if model.prior is None else model.prior.ravel()
        fh.write(struct.pack("<q", prior.size))
        fh.write(prior.astype("<f8").tobytes())


def load_model(path: str) -> IncrementalModel:
    act_name = {v: k for k, v in _ACT_CODE.items()}
    obs_name = {v: k for k, v in _OBS_CODE.items()}
    with open(path, "rb") as fh:
        n, m, mode_code, act, obs, n_sizes = _CKPT_HEADER.unpack(fh.read(_CKPT_HEADER.size))
        sizes = np.frombuffer(fh.read(8 * n_sizes), dtype="<i8").tolist()
        template = init_params(sizes, 0, activation=act_name[act])
        n_params = flatten_params(template).size
        params = np.frombuffer(fh.read(8 * n_params), dtype="<f8")
        (prior_size,) = struct.unpack("<q", fh.read(8))
        prior = None
        if prior_size:
            prior = np.frombuffer(fh.read(8 * prior_size), dtype="<f8").reshape(n, m).copy()
    return IncrementalModel(net=unflatten_params(template, params),
                            mode=MODE_FULL if mode_code == 0 else MODE_DIAGONAL,
                            n=n, m=m, prior=prior, obs=obs_name[obs])
