"""The interleaved model-based training loop.

Per epoch the dynamics model is refit on real data; per environment step the
agent acts, pushes the transition into the real buffer, generates one-step
imagined transitions from uniformly resampled real states into the model
buffer, and then runs a fixed number of actor-critic update rounds on
minibatches mixed from both buffers.

Randomness is split into six independent streams (env resets, action noise,
model training, rollouts, SAC batches, evaluation), so degenerate
configurations reduce cleanly: with zero rollouts and a pure real-data mix the
actor-critic update trajectory is bit-identical to a standalone model-free run
with the same seed, whether or not the model is trained.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import envs, incmodel, sac
from .errors import ContractError, DivergedError
from .mathcore import adam_init
from .replay import ReplayBuffer, Transition, TransitionBatch, concat_batches

STATUS_OK = "ok"
STATUS_DIVERGED = "diverged"
STATUS_STOPPED = "stopped_at_threshold"


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of the training loop; one value of this type fully
    determines a run (including all randomness)."""

    env: str = "pendulum"
    seed: int = 0
    epochs: int = 30
    steps_per_epoch: int = 1000
    rollouts_per_step: int = 20
    updates_per_step: int = 20
    model_train_steps: int = 250
    model_batch_size: int = 256
    model_hidden: tuple[int, ...] = (64, 64)
    model_mode: str = incmodel.MODE_FULL
    model_lr: float = 1e-3
    real_data_fraction: float = 0.5
    warmup_steps: int = 1000
    env_buffer_capacity: int = 100_000
    model_buffer_capacity: int = 400_000
    policy_hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (64, 64)
    sac: sac.SacHyper = field(default_factory=sac.SacHyper)
    eval_episodes: int = 5
    eval_interval_steps: int = 1000
    stop_at_return: float | None = None

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "rollouts_per_step", "updates_per_step",
                     "model_train_steps", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if not 0.0 <= self.real_data_fraction <= 1.0:
            raise ContractError("real_data_fraction must be in [0, 1]")
        if self.eval_episodes < 1 or self.eval_interval_steps < 1:
            raise ContractError("eval_episodes and eval_interval_steps must be >= 1")


@dataclass(frozen=True)
class CurvePoint:
    env_steps: int
    episodic_return: float
    model_holdout_error: float
    wall_time_s: float


@dataclass(frozen=True)
class EvalPoint:
    env_steps: int
    mean_return: float


@dataclass(frozen=True)
class RunCounters:
    env_steps: int = 0
    rollouts: int = 0
    gradient_rounds: int = 0
    rollouts_discarded: int = 0


@dataclass
class RunResult:
    curve: list[CurvePoint]
    evals: list[EvalPoint]
    counters: RunCounters
    policy: sac.GaussianPolicy
    model: incmodel.IncrementalModel
    status: str
    env_buffer: ReplayBuffer | None = None
    model_buffer: ReplayBuffer | None = None


def model_rollout(model: incmodel.IncrementalModel, policy: sac.GaussianPolicy,
                  envspec: envs.EnvSpec, source: Transition,
                  seed: int | np.random.Generator) -> Transition:
    """One imagined transition branching off a real state with a fresh policy action."""
    rng = np.random.default_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    a, _ = sac.sample_action(policy, source.s, rng)
    s_next = incmodel.predict(model, source.s, source.a_prev, a)
    if not np.all(np.isfinite(s_next)):
        raise DivergedError("imagined next state is non-finite")
    reward = envs.reward_fn(envspec, source.s, a)
    done = envs.termination_fn(envspec, s_next)
    return Transition(s_prev=source.s_prev, a_prev=source.a_prev, s=source.s, a=a,
                      reward=reward, s_next=s_next, done=done, is_imagined=True)


def _model_rollout_batch(model, policy, envspec, sources: TransitionBatch,
                         rng: np.random.Generator) -> tuple[list[Transition], int]:
    """Vectorized rollouts; non-finite predictions are discarded and counted."""
    a, _ = sac.sample_actions(policy, sources.s, rng)
    s_next = incmodel.predict_batch(model, sources.s, sources.a_prev, a)
    keep = np.all(np.isfinite(s_next), axis=1)
    out = []
    for i in np.flatnonzero(keep):
        out.append(Transition(
            s_prev=sources.s_prev[i], a_prev=sources.a_prev[i], s=sources.s[i],
            a=a[i], reward=envs.reward_fn(envspec, sources.s[i], a[i]),
            s_next=s_next[i], done=envs.termination_fn(envspec, s_next[i]),
            is_imagined=True))
    return out, int(len(sources) - keep.sum())


def evaluate_policy(policy: sac.GaussianPolicy, envspec: envs.EnvSpec, episodes: int,
                    seed: int | np.random.Generator) -> float:
    """Mean undiscounted return of the deterministic-mode policy over full episodes."""
    if episodes < 1:
        raise ContractError("episodes must be >= 1")
    rng = np.random.default_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    total = 0.0
    for _ in range(episodes):
        state = envs.reset(envspec, rng)
        while not state.done:
            a, _ = sac.sample_action(policy, state.s, 0, deterministic=True)
            state, res = envs.advance(envspec, state, a)
            total += res.reward
    return total / episodes


def _mixed_batch(env_buf: ReplayBuffer, model_buf: ReplayBuffer, batch_size: int,
                 real_fraction: float, rng: np.random.Generator) -> TransitionBatch:
    k_real = int(round(real_fraction * batch_size))
    k_model = batch_size - k_real
    if k_model > 0 and len(model_buf) == 0:
        k_real, k_model = batch_size, 0
    if k_real > 0 and k_model > 0:
        return concat_batches(env_buf.sample_batch(k_real, rng),
                              model_buf.sample_batch(k_model, rng))
    if k_model == 0:
        return env_buf.sample_batch(k_real, rng)
    return model_buf.sample_batch(k_model, rng)


def run_training(cfg: TrainConfig, checkpoint_dir: str | None = None) -> RunResult:
    """Execute the full nested loop; fully deterministic per cfg.

    Divergence during model training or SAC updates aborts the run and returns
    the partial curve with status "diverged".
    """
    spec = envs.make_env_spec(cfg.env)
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(6)]
    rng_env, rng_action, rng_model, rng_rollout, rng_sac, rng_eval = streams

    obs = "pendulum" if cfg.env == "pendulum" else "raw"
    policy = sac.make_policy(spec, cfg.policy_hidden, np.random.default_rng(cfg.seed + 1))
    critic = sac.make_critic(spec, cfg.critic_hidden, np.random.default_rng(cfg.seed + 2))
    model = incmodel.make_model(spec.state_dim, spec.action_dim, cfg.model_hidden,
                                cfg.model_mode, seed=np.random.default_rng(cfg.seed + 3),
                                obs=obs)
    actor_opt = adam_init(policy.net, lr=cfg.sac.lr_actor)
    critic_opt = sac.make_critic_opt(critic, lr=cfg.sac.lr_critic)
    model_opt = adam_init(model.net, lr=cfg.model_lr)

    env_buf = ReplayBuffer(cfg.env_buffer_capacity)
    model_buf = ReplayBuffer(cfg.model_buffer_capacity)

    curve: list[CurvePoint] = []
    evals: list[EvalPoint] = []
    env_steps = 0
    rollouts = 0
    gradient_rounds = 0
    discarded = 0
    holdout_error = float("nan")
    status = STATUS_OK
    t0 = time.perf_counter()

    state = envs.reset(spec, rng_env)
    s_prev = state.s.copy()
    a_prev = np.zeros(spec.action_dim)
    ep_return = 0.0

    def save_checkpoints():
        if checkpoint_dir is not None:
            os.makedirs(checkpoint_dir, exist_ok=True)
            incmodel.save_model(model, os.path.join(checkpoint_dir, "model.bin"))
            sac.save_policy(policy, os.path.join(checkpoint_dir, "policy.bin"))

    def counters():
        return RunCounters(env_steps, rollouts, gradient_rounds, discarded)

    try:
        for _epoch in range(cfg.epochs):
            if len(env_buf) > 0 and cfg.model_train_steps > 0 and env_steps >= cfg.warmup_steps:
                model, model_opt, _ = incmodel.train_model(
                    model, env_buf, cfg.model_train_steps, cfg.model_batch_size,
                    model_opt, rng_model)
                val = incmodel.model_batch_from(
                    env_buf.sample_batch(min(256, max(len(env_buf), 1)), rng_model))
                holdout_error = float(incmodel.prediction_errors(model, val).mean())

            for _step in range(cfg.steps_per_epoch):
                if env_steps < cfg.warmup_steps:
                    a = rng_action.uniform(spec.action_low, spec.action_high)
                else:
                    a, _ = sac.sample_actions(policy, state.s[None, :], rng_action)
                    a = a[0]
                next_state, res = envs.advance(spec, state, a)
                env_steps += 1
                ep_return += res.reward
                env_buf.push(Transition(
                    s_prev=s_prev, a_prev=a_prev, s=state.s.copy(), a=np.asarray(a),
                    reward=res.reward, s_next=res.next_state.copy(),
                    done=(res.done_reason == envs.DONE_TERMINATION)))
                if res.done:
                    curve.append(CurvePoint(env_steps, ep_return, holdout_error,
                                            time.perf_counter() - t0))
                    state = envs.reset(spec, rng_env)
                    s_prev = state.s.copy()
                    a_prev = np.zeros(spec.action_dim)
                    ep_return = 0.0
                else:
                    s_prev = state.s.copy()
                    a_prev = np.asarray(envs.clip_action(spec, a))
                    state = next_state

                past_warmup = env_steps > cfg.warmup_steps
                if past_warmup and cfg.rollouts_per_step > 0:
                    sources = env_buf.sample_batch(cfg.rollouts_per_step, rng_rollout)
                    imagined, bad = _model_rollout_batch(model, policy, spec,
                                                         sources, rng_rollout)
                    rollouts += cfg.rollouts_per_step
                    discarded += bad
                    for t in imagined:
                        model_buf.push(t)

                if past_warmup:
                    for _g in range(cfg.updates_per_step):
                        batch = _mixed_batch(env_buf, model_buf, cfg.sac.batch_size,
                                             cfg.real_data_fraction, rng_sac)
                        targets = sac.critic_target(critic, policy, cfg.sac, batch, rng_sac)
                        critic, critic_opt, _ = sac.update_critic(critic, targets,
                                                                  batch, critic_opt)
                        policy, actor_opt, _ = sac.update_actor(policy, critic, cfg.sac,
                                                                batch, actor_opt, rng_sac)
                        critic = sac.soft_update(critic, cfg.sac.tau)
                        gradient_rounds += 1

                if env_steps % cfg.eval_interval_steps == 0:
                    eval_seed = int(rng_eval.integers(2 ** 63))
                    mean_ret = evaluate_policy(policy, spec, cfg.eval_episodes, eval_seed)
                    evals.append(EvalPoint(env_steps, mean_ret))
                    if cfg.stop_at_return is not None and mean_ret >= cfg.stop_at_return:
                        save_checkpoints()
                        return RunResult(curve, evals, counters(), policy, model,
                                         STATUS_STOPPED, env_buf, model_buf)
            save_checkpoints()
    except DivergedError:
        status = STATUS_DIVERGED
    save_checkpoints()
    return RunResult(curve, evals, counters(), policy, model, status, env_buf, model_buf)


def collect_transitions(spec: envs.EnvSpec, steps: int, seed: int,
                        policy: sac.GaussianPolicy | None = None,
                        capacity: int | None = None) -> ReplayBuffer:
    """Roll episodes (uniform-random actions, or a given stochastic policy)
    and store transitions with the one-step-backward bookkeeping.  Used for
    offline model training and evaluation datasets."""
    buf = ReplayBuffer(capacity or max(steps, 1))
    rng = np.random.default_rng(seed)
    state = envs.reset(spec, rng)
    s_prev = state.s.copy()
    a_prev = np.zeros(spec.action_dim)
    for _ in range(steps):
        if policy is None:
            a = rng.uniform(spec.action_low, spec.action_high)
        else:
            a, _ = sac.sample_action(policy, state.s, rng)
        next_state, res = envs.advance(spec, state, a)
        buf.push(Transition(s_prev=s_prev, a_prev=a_prev, s=state.s.copy(),
                            a=np.asarray(a, dtype=np.float64), reward=res.reward,
                            s_next=res.next_state.copy(),
                            done=(res.done_reason == envs.DONE_TERMINATION)))
        if res.done:
            state = envs.reset(spec, rng)
            s_prev = state.s.copy()
            a_prev = np.zeros(spec.action_dim)
        else:
            s_prev = state.s.copy()
            a_prev = np.asarray(envs.clip_action(spec, a))
            state = next_state
    return buf
