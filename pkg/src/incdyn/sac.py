"""Soft actor-critic for continuous actions.

Twin Q critics with Polyak-averaged target copies, and a squashed-Gaussian
actor trained with the reparameterization trick.  The actor objective is the
standard tractable surrogate of the KL form: minimize
E[alpha * log pi(a~|s) - min(q1, q2)(s, a~)] over reparameterized samples a~.

Updates are pure: they return new policy/critic/optimizer values and never
mutate their inputs.  Nets consume the environment's state feature map (see
envs.state_features); emitted actions always live inside the action bounds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .envs import EnvSpec, feature_dim_by_name, state_features_by_name
from .errors import ContractError, DivergedError
from .mathcore import (AdamState, MlpParams, adam_init, adam_step, backward_cached,
                       flatten_params, forward_cached, init_params, mlp_forward,
                       unflatten_params)
from .replay import Transition, TransitionBatch, batch_from_transitions

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0

_LOG_2PI = np.log(2.0 * np.pi)

_PCKPT_HEADER = struct.Struct("<5q")  # m, activation, obs, n_layer_sizes, reserved


@dataclass(frozen=True)
class GaussianPolicy:
    """Actor net mapping state features to (mean, log_std); actions are
    offset + scale * tanh(gaussian sample), so they stay inside the bounds."""

    net: MlpParams
    action_low: np.ndarray
    action_high: np.ndarray
    action_scale: np.ndarray
    action_offset: np.ndarray
    obs: str = "raw"

    @property
    def action_dim(self) -> int:
        return self.action_low.shape[0]


@dataclass(frozen=True)
class Critic:
    q1: MlpParams
    q2: MlpParams
    q1_target: MlpParams
    q2_target: MlpParams
    obs: str = "raw"


@dataclass(frozen=True)
class CriticOpt:
    q1: AdamState
    q2: AdamState


@dataclass(frozen=True)
class SacHyper:
    gamma: float = 0.99
    tau: float = 0.005
    alpha: float = 0.2
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    batch_size: int = 256

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ContractError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ContractError(f"tau must be in (0, 1], got {self.tau}")
        if self.alpha <= 0.0:
            raise ContractError(f"alpha must be > 0, got {self.alpha}")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


def make_policy(spec: EnvSpec, hidden: tuple[int, ...] = (64, 64),
                seed: int | np.random.Generator = 0) -> GaussianPolicy:
    in_dim = feature_dim_by_name(spec.name, spec.state_dim)
    net = init_params([in_dim, *hidden, 2 * spec.action_dim], seed, activation="tanh")
    low = np.asarray(spec.action_low, dtype=np.float64)
    high = np.asarray(spec.action_high, dtype=np.float64)
    return GaussianPolicy(net=net, action_low=low, action_high=high,
                          action_scale=(high - low) / 2.0,
                          action_offset=(high + low) / 2.0,
                          obs=spec.name if spec.name == "pendulum" else "raw")


def make_critic(spec: EnvSpec, hidden: tuple[int, ...] = (64, 64),
                seed: int | np.random.Generator = 0) -> Critic:
    rng = np.random.default_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    in_dim = feature_dim_by_name(spec.name, spec.state_dim) + spec.action_dim
    q1 = init_params([in_dim, *hidden, 1], rng, activation="relu")
    q2 = init_params([in_dim, *hidden, 1], rng, activation="relu")
    return Critic(q1=q1, q2=q2, q1_target=q1, q2_target=q2,
                  obs=spec.name if spec.name == "pendulum" else "raw")


def make_critic_opt(critic: Critic, lr: float) -> CriticOpt:
    return CriticOpt(adam_init(critic.q1, lr=lr), adam_init(critic.q2, lr=lr))


def _as_batch(batch) -> TransitionBatch:
    if isinstance(batch, list):
        return batch_from_transitions(batch)
    return batch


def _log1m_tanh_sq(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) computed without cancellation
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def _policy_heads(policy: GaussianPolicy, feats: np.ndarray):
    out = mlp_forward(policy.net, feats)
    if not np.all(np.isfinite(out)):
        raise DivergedError("policy net produced non-finite output")
    m = policy.action_dim
    mean = out[:, :m]
    raw = out[:, m:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    return mean, raw, log_std


def _squash(policy: GaussianPolicy, mean, log_std, noise):
    std = np.exp(log_std)
    u = mean + std * noise
    t = np.tanh(u)
    a = policy.action_offset + policy.action_scale * t
    log_prob = (-0.5 * noise ** 2 - log_std - 0.5 * _LOG_2PI
                - np.log(policy.action_scale) - _log1m_tanh_sq(u)).sum(axis=1)
    return a, log_prob, u, t, std


def sample_actions(policy: GaussianPolicy, states: np.ndarray,
                   rng: np.random.Generator, deterministic: bool = False
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Batched action sampling: (batch, m) actions and (batch,) log-probs."""
    feats = state_features_by_name(policy.obs, np.asarray(states, dtype=np.float64))
    mean, _, log_std = _policy_heads(policy, feats)
    if deterministic:
        noise = np.zeros_like(mean)
    else:
        noise = rng.standard_normal(mean.shape)
    a, log_prob, _, _, _ = _squash(policy, mean, log_std, noise)
    return a, log_prob


def sample_action(policy: GaussianPolicy, s: np.ndarray, seed: int | np.random.Generator,
                  deterministic: bool = False) -> tuple[np.ndarray, float]:
    """One action for one state; deterministic mode returns the squashed mean."""
    rng = np.random.default_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    a, log_prob = sample_actions(policy, np.asarray(s)[None, :], rng, deterministic)
    return a[0], float(log_prob[0])


def _q_values(net: MlpParams, x: np.ndarray) -> np.ndarray:
    q = mlp_forward(net, x)
    if not np.all(np.isfinite(q)):
        raise DivergedError("critic net produced non-finite output")
    return q[:, 0]


def critic_target(critic: Critic, policy: GaussianPolicy, hyper: SacHyper,
                  batch: TransitionBatch | list[Transition],
                  seed: int | np.random.Generator) -> np.ndarray:
    """Bellman backup targets y = r + gamma * (1 - done) * (min target Q - alpha log pi)."""
    batch = _as_batch(batch)
    rng = np.random.default_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    next_a, next_logp = sample_actions(policy, batch.s_next, rng)
    feats = state_features_by_name(critic.obs, batch.s_next)
    x = np.concatenate([feats, next_a], axis=1)
    q_min = np.minimum(_q_values(critic.q1_target, x), _q_values(critic.q2_target, x))
    not_done = 1.0 - batch.done.astype(np.float64)
    return batch.reward + hyper.gamma * not_done * (q_min - hyper.alpha * next_logp)


def update_critic(critic: Critic, targets: np.ndarray,
                  batch: TransitionBatch | list[Transition],
                  opt: CriticOpt) -> tuple[Critic, CriticOpt, float]:
    """One Adam step of both critics on the MSE against fixed targets.

    Returns the summed MSE measured before the step.
    """
    batch = _as_batch(batch)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (len(batch),):
        raise ContractError("targets length must match batch length")
    feats = state_features_by_name(critic.obs, batch.s)
    x = np.concatenate([feats, batch.a], axis=1)
    b = len(batch)
    loss = 0.0
    new_nets = {}
    new_opts = {}
    for name, net, state in (("q1", critic.q1, opt.q1), ("q2", critic.q2, opt.q2)):
        out, cache = forward_cached(net, x)
        if not np.all(np.isfinite(out)):
            raise DivergedError("critic net produced non-finite output")
        err = out[:, 0] - targets
        loss += float(np.mean(err ** 2))
        grad, _ = backward_cached(net, cache, (2.0 * err / b)[:, None])
        new_opts[name], new_nets[name] = adam_step(state, net, grad)
    if not np.isfinite(loss):
        raise DivergedError("critic loss is non-finite")
    return (replace(critic, q1=new_nets["q1"], q2=new_nets["q2"]),
            CriticOpt(new_opts["q1"], new_opts["q2"]), loss)


def _actor_loss_and_grad(policy: GaussianPolicy, critic: Critic, hyper: SacHyper,
                         batch: TransitionBatch, noise: np.ndarray):
    b = len(batch)
    feats = state_features_by_name(policy.obs, batch.s)
    p_out, p_cache = forward_cached(policy.net, feats)
    if not np.all(np.isfinite(p_out)):
        raise DivergedError("policy net produced non-finite output")
    m = policy.action_dim
    mean = p_out[:, :m]
    raw = p_out[:, m:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    a, log_prob, u, t, std = _squash(policy, mean, log_std, noise)

    x = np.concatenate([feats, a], axis=1)
    q1_out, q1_cache = forward_cached(critic.q1, x)
    q2_out, q2_cache = forward_cached(critic.q2, x)
    q1 = q1_out[:, 0]
    q2 = q2_out[:, 0]
    q_min = np.minimum(q1, q2)
    loss = float(np.mean(hyper.alpha * log_prob - q_min))
    if not np.isfinite(loss):
        raise DivergedError("actor loss is non-finite")

    # dQ_min/da through whichever critic attains the min, per sample
    pick_q1 = (q1 <= q2).astype(np.float64)
    _, dx1 = backward_cached(critic.q1, q1_cache, (-pick_q1 / b)[:, None],
                             need_param_grads=False)
    _, dx2 = backward_cached(critic.q2, q2_cache, (-(1.0 - pick_q1) / b)[:, None],
                             need_param_grads=False)
    d_action = (dx1 + dx2)[:, feats.shape[1]:]

    # chain rule through a = offset + scale * tanh(u), u = mean + std * noise,
    # plus the alpha * log_prob terms (-log_std and -log(1 - tanh(u)^2))
    coef = hyper.alpha / b
    d_u = d_action * policy.action_scale * (1.0 - t ** 2) + coef * 2.0 * t
    d_mean = d_u
    d_log_std = d_u * std * noise - coef
    inside = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
    upstream = np.concatenate([d_mean, np.where(inside, d_log_std, 0.0)], axis=1)
    grad, _ = backward_cached(policy.net, p_cache, upstream)
    return loss, grad


def update_actor(policy: GaussianPolicy, critic: Critic, hyper: SacHyper,
                 batch: TransitionBatch | list[Transition], opt: AdamState,
                 seed: int | np.random.Generator) -> tuple[GaussianPolicy, AdamState, float]:
    """One Adam step on E[alpha * log pi(a~|s) - min(q1, q2)(s, a~)], a~ reparameterized.

    Returns the loss measured before the step.
    """
    batch = _as_batch(batch)
    rng = np.random.default_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    noise = rng.standard_normal((len(batch), policy.action_dim))
    loss, grad = _actor_loss_and_grad(policy, critic, hyper, batch, noise)
    new_opt, new_net = adam_step(opt, policy.net, grad)
    return replace(policy, net=new_net), new_opt, loss


def soft_update(critic: Critic, tau: float) -> Critic:
    """Polyak target update: target <- tau * online + (1 - tau) * target."""
    if not 0.0 < tau <= 1.0:
        raise ContractError(f"tau must be in (0, 1], got {tau}")

    def blend(online: MlpParams, target: MlpParams) -> MlpParams:
        return MlpParams(
            tuple(tau * wo + (1.0 - tau) * wt for wo, wt in zip(online.weights, target.weights)),
            tuple(tau * bo + (1.0 - tau) * bt for bo, bt in zip(online.biases, target.biases)),
            online.activation)

    return replace(critic, q1_target=blend(critic.q1, critic.q1_target),
                   q2_target=blend(critic.q2, critic.q2_target))


_ACT_CODE = {"tanh": 0, "relu": 1}
_OBS_CODE = {"raw": 0, "pendulum": 1}


def _write_net(fh, net: MlpParams) -> None:
    sizes = [net.in_dim] + [w.shape[0] for w in net.weights]
    fh.write(struct.pack("<3q", _ACT_CODE[net.activation], len(sizes), 0))
    fh.write(np.asarray(sizes, dtype="<i8").tobytes())
    fh.write(flatten_params(net).astype("<f8").tobytes())


def _read_net(fh) -> MlpParams:
    act, n_sizes, _ = struct.unpack("<3q", fh.read(24))
    sizes = np.frombuffer(fh.read(8 * n_sizes), dtype="<i8").tolist()
    name = {v: k for k, v in _ACT_CODE.items()}[act]
    template = init_params(sizes, 0, activation=name)
    vec = np.frombuffer(fh.read(8 * flatten_params(template).size), dtype="<f8")
    return unflatten_params(template, vec)


def save_policy(policy: GaussianPolicy, path: str) -> None:
    """Flat-binary policy checkpoint: header, action bounds, then the net."""
    with open(path, "wb") as fh:
        fh.write(_PCKPT_HEADER.pack(policy.action_dim, _ACT_CODE[policy.net.activation],
                                    _OBS_CODE[policy.obs], 0, 0))
        fh.write(policy.action_low.astype("<f8").tobytes())
        fh.write(policy.action_high.astype("<f8").tobytes())
        _write_net(fh, policy.net)


def load_policy(path: str) -> GaussianPolicy:
    obs_name = {v: k for k, v in _OBS_CODE.items()}
    with open(path, "rb") as fh:
        m, _, obs, _, _ = _PCKPT_HEADER.unpack(fh.read(_PCKPT_HEADER.size))
        low = np.frombuffer(fh.read(8 * m), dtype="<f8").copy()
        high = np.frombuffer(fh.read(8 * m), dtype="<f8").copy()
        net = _read_net(fh)
    return GaussianPolicy(net=net, action_low=low, action_high=high,
                          action_scale=(high - low) / 2.0,
                          action_offset=(high + low) / 2.0, obs=obs_name[obs])


def save_critic(critic: Critic, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<q", _OBS_CODE[critic.obs]))
        for net in (critic.q1, critic.q2, critic.q1_target, critic.q2_target):
            _write_net(fh, net)


def load_critic(path: str) -> Critic:
    obs_name = {v: k for k, v in _OBS_CODE.items()}
    with open(path, "rb") as fh:
        (obs,) = struct.unpack("<q", fh.read(8))
        nets = [_read_net(fh) for _ in range(4)]
    return Critic(*nets, obs=obs_name[obs])
