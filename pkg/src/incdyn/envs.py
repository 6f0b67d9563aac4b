"""Self-contained continuous-control environments.

Three desk-scale tasks share one pure step/reset interface:

* ``pendulum``  -- torque-limited swing-up, semi-implicit Euler, 200-step episodes.
* ``cartpole``  -- continuous-force balance, RK4, terminates on pole/cart bounds.
* ``linear``    -- diagnostic system whose state change is exactly a fixed
  matrix times the action increment; it is the ground-truth oracle for the
  incremental dynamics model.

States are plain float64 vectors; step and reset never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError

DONE_NONE = "none"
DONE_TERMINATION = "termination"
DONE_TIME_LIMIT = "time_limit"

# pendulum physics
_PEND_G = 10.0
_PEND_L = 1.0
_PEND_M = 1.0
_PEND_DT = 0.05
_PEND_MAX_TORQUE = 2.0

# cart-pole physics (cart mass 1, pole mass 0.1, pole half-length 0.5)
_CP_G = 9.8
_CP_MASS_CART = 1.0
_CP_MASS_POLE = 0.1
_CP_HALF_LEN = 0.5
_CP_DT = 0.02
_CP_FORCE_MAX = 10.0
_CP_THETA_LIMIT = 0.2
_CP_X_LIMIT = 2.4

_LINEAR_B_DEFAULT = np.array([[0.8, 0.0], [0.0, 1.2]])


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    dt: float
    max_episode_steps: int
    # linear env only: state change per unit action increment
    gain_matrix: np.ndarray | None = None


@dataclass(frozen=True)
class EnvState:
    """s plus episode bookkeeping; last_action is the previously applied
    (clipped) action, zeros right after reset."""

    s: np.ndarray
    step_count: int
    done: bool
    last_action: np.ndarray


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool
    done_reason: str


def pendulum_spec() -> EnvSpec:
    return EnvSpec("pendulum", 2, 1,
                   np.array([-_PEND_MAX_TORQUE]), np.array([_PEND_MAX_TORQUE]),
                   _PEND_DT, 200)


def cartpole_spec() -> EnvSpec:
    return EnvSpec("cartpole", 4, 1,
                   np.array([-_CP_FORCE_MAX]), np.array([_CP_FORCE_MAX]),
                   _CP_DT, 500)


def linear_spec(gain_matrix: np.ndarray | None = None) -> EnvSpec:
    b = _LINEAR_B_DEFAULT if gain_matrix is None else np.asarray(gain_matrix, dtype=np.float64)
    if b.ndim != 2:
        raise ContractError("gain_matrix must be 2-D")
    n, m = b.shape
    return EnvSpec("linear", n, m, -np.ones(m), np.ones(m), 1.0, 100, gain_matrix=b)


def make_env_spec(name: str) -> EnvSpec:
    specs = {"pendulum": pendulum_spec, "cartpole": cartpole_spec, "linear": linear_spec}
    if name not in specs:
        raise ContractError(f"unknown env {name!r} (expected one of {sorted(specs)})")
    return specs[name]()


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    return float(np.pi - (np.pi - theta) % (2.0 * np.pi))


def reset(spec: EnvSpec, seed: int | np.random.Generator) -> EnvState:
    """Draw an initial state; deterministic per seed."""
    rng = np.random.default_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    if spec.name == "pendulum":
        s = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])
    elif spec.name == "cartpole":
        s = rng.uniform(-0.05, 0.05, size=4)
    else:
        s = rng.uniform(-1.0, 1.0, size=spec.state_dim)
    return EnvState(s=s, step_count=0, done=False, last_action=np.zeros(spec.action_dim))


def clip_action(spec: EnvSpec, action: np.ndarray) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(spec.action_dim)
    if not np.all(np.isfinite(a)):
        raise ContractError("action must be finite")
    return np.clip(a, spec.action_low, spec.action_high)


def reward_fn(spec: EnvSpec, s: np.ndarray, a: np.ndarray) -> float:
    """The reward step() would assign for taking a in state s; pure."""
    s = np.asarray(s, dtype=np.float64)
    a = clip_action(spec, a)
    if spec.name == "pendulum":
        th, thd = s
        return float(-(wrap_angle(th) ** 2 + 0.1 * thd ** 2 + 0.001 * a[0] ** 2))
    if spec.name == "cartpole":
        return 1.0
    return -float(s @ s)


def termination_fn(spec: EnvSpec, s: np.ndarray) -> bool:
    """State-based termination only; time limits are excluded."""
    s = np.asarray(s, dtype=np.float64)
    if spec.name == "cartpole":
        return bool(abs(s[2]) > _CP_THETA_LIMIT or abs(s[0]) > _CP_X_LIMIT)
    return False


def _pendulum_next(s: np.ndarray, a: np.ndarray) -> np.ndarray:
    th, thd = s
    thd_next = thd + _PEND_DT * ((_PEND_G / _PEND_L) * np.sin(th)
                                 + a[0] / (_PEND_M * _PEND_L ** 2))
    th_next = th + _PEND_DT * thd_next
    return np.array([th_next, thd_next])


def _cartpole_deriv(s: np.ndarray, force: float) -> np.ndarray:
    x, xd, th, thd = s
    total = _CP_MASS_CART + _CP_MASS_POLE
    pole_ml = _CP_MASS_POLE * _CP_HALF_LEN
    sin_th, cos_th = np.sin(th), np.cos(th)
    temp = (force + pole_ml * thd ** 2 * sin_th) / total
    th_acc = (_CP_G * sin_th - cos_th * temp) / (
        _CP_HALF_LEN * (4.0 / 3.0 - _CP_MASS_POLE * cos_th ** 2 / total))
    x_acc = temp - pole_ml * th_acc * cos_th / total
    return np.array([xd, x_acc, thd, th_acc])


def _cartpole_next(s: np.ndarray, a: np.ndarray) -> np.ndarray:
    force = float(a[0])
    k1 = _cartpole_deriv(s, force)
    k2 = _cartpole_deriv(s + 0.5 * _CP_DT * k1, force)
    k3 = _cartpole_deriv(s + 0.5 * _CP_DT * k2, force)
    k4 = _cartpole_deriv(s + _CP_DT * k3, force)
    return s + (_CP_DT / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step(spec: EnvSpec, state: EnvState, action: np.ndarray) -> StepResult:
    """Advance one dt; raises ContractError when stepping a done state."""
    if state.done:
        raise ContractError("cannot step a done episode")
    a = clip_action(spec, action)
    reward = reward_fn(spec, state.s, a)
    if spec.name == "pendulum":
        s_next = _pendulum_next(state.s, a)
    elif spec.name == "cartpole":
        s_next = _cartpole_next(state.s, a)
    else:
        s_next = state.s + spec.gain_matrix @ (a - state.last_action)
    if termination_fn(spec, s_next):
        return StepResult(s_next, reward, True, DONE_TERMINATION)
    if state.step_count + 1 >= spec.max_episode_steps:
        return StepResult(s_next, reward, True, DONE_TIME_LIMIT)
    return StepResult(s_next, reward, False, DONE_NONE)


def advance(spec: EnvSpec, state: EnvState, action: np.ndarray) -> tuple[EnvState, StepResult]:
    """step() plus the follow-on EnvState for loop code."""
    result = step(spec, state, action)
    next_state = replace(state,
                         s=result.next_state,
                         step_count=state.step_count + 1,
                         done=result.done,
                         last_action=clip_action(spec, action))
    return next_state, result


def feature_dim(spec: EnvSpec) -> int:
    """Dimension of the function-approximator view of the state."""
    return feature_dim_by_name(spec.name, spec.state_dim)


def feature_dim_by_name(name: str, state_dim: int) -> int:
    return 3 if name == "pendulum" else state_dim


def state_features(spec: EnvSpec, s: np.ndarray) -> np.ndarray:
    """Map raw states to the inputs the policy/critic/model nets consume.

    The pendulum angle is unbounded (it is kept unwrapped so the dynamics stay
    smooth), so nets see (sin th, cos th, thd/8) instead of raw (th, thd).
    The other environments are already bounded and pass through unchanged.
    Accepts a single state (n,) or a batch (batch, n).
    """
    return state_features_by_name(spec.name, s)


def state_features_by_name(name: str, s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if name != "pendulum":
        return s
    th = s[..., 0]
    thd = s[..., 1]
    return np.stack([np.sin(th), np.cos(th), thd / 8.0], axis=-1)
