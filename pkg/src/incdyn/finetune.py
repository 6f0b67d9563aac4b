"""Online fine-tuning via LQR on the error dynamics.

When a pretrained increment schedule is replayed on the real system, the
tracking error evolves (to first order) as e' = e + gain * residual_increment,
with the gain matrix frozen at an operating point.  That linear form admits a
discrete-time LQR design: the resulting state feedback produces a residual
action increment that drives the tracking error to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import envs
from .errors import ContractError, StabilizationError


@dataclass(frozen=True)
class ErrorSystem:
    """Frozen error dynamics e' = e + gain @ da, with quadratic costs
    e'Qe (state, PSD) and da'R da (input, PD)."""

    gain: np.ndarray  # (n, m)
    Q: np.ndarray     # (n, n)
    R: np.ndarray     # (m, m)

    def __post_init__(self):
        gain = np.atleast_2d(np.asarray(self.gain, dtype=np.float64))
        object.__setattr__(self, "gain", gain)
        n, m = gain.shape
        Q = np.asarray(self.Q, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        if Q.shape != (n, n) or R.shape != (m, m):
            raise ContractError(f"Q must be {n}x{n} and R {m}x{m}")
        if not np.allclose(Q, Q.T, atol=1e-10):
            raise ContractError("Q must be symmetric")
        if not np.allclose(R, R.T, atol=1e-10):
            raise ContractError("R must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-10:
            raise ContractError("Q must be positive semidefinite")
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise ContractError("R must be positive definite") from None


@dataclass(frozen=True)
class LqrSolution:
    K: np.ndarray          # (m, n) feedback gain
    P: np.ndarray          # (n, n) Riccati solution
    iterations: int
    residual: float


@dataclass(frozen=True)
class TrackResult:
    errors: np.ndarray     # per-step tracking error norms
    truncated: bool        # environment ended before the requested steps
    clip_events: int       # steps on which the reconstructed action was clipped


def error_step(sys: ErrorSystem, e: np.ndarray, da: np.ndarray) -> np.ndarray:
    """One step of the error dynamics: e + gain @ da."""
    return np.asarray(e, dtype=np.float64) + sys.gain @ np.asarray(da, dtype=np.float64)


def solve_lqr(sys: ErrorSystem, tol: float = 1e-9, max_iter: int = 10_000) -> LqrSolution:
    """Fixed-point iteration of the discrete Riccati equation for the
    identity-transition system (A = I, B = gain):

        P <- Q + P - P B (R + B'PB)^{-1} B'P

    iterated until the max-abs change is <= tol; K = (R + B'PB)^{-1} B'P.
    Raises StabilizationError when the iteration diverges or stalls.
    """
    if tol <= 0.0:
        raise ContractError("tol must be > 0")
    b = sys.gain
    p = sys.Q.copy()
    residual = np.inf
    for it in range(1, max_iter + 1):
        bp = b.T @ p
        k = np.linalg.solve(sys.R + bp @ b, bp)
        p_next = sys.Q + p - bp.T @ k
        p_next = 0.5 * (p_next + p_next.T)
        residual = float(np.abs(p_next - p).max())
        p = p_next
        if not np.all(np.isfinite(p)) or np.abs(p).max() > 1e12:
            raise StabilizationError("Riccati iteration diverged (pair not stabilizable?)")
        if residual <= tol:
            bp = b.T @ p
            k = np.linalg.solve(sys.R + bp @ b, bp)
            return LqrSolution(K=k, P=p, iterations=it, residual=residual)
    raise StabilizationError(
        f"Riccati iteration did not converge in {max_iter} iterations "
        f"(last change {residual:.3e})")


def residual_policy(sol: LqrSolution, e: np.ndarray) -> np.ndarray:
    """Feedback correction increment: -K @ e."""
    return -sol.K @ np.asarray(e, dtype=np.float64)


def track_reference(sol: LqrSolution, envspec: envs.EnvSpec, ref_states: np.ndarray,
                    ref_increments: np.ndarray, steps: int,
                    initial_state: envs.EnvState | None = None,
                    seed: int = 0) -> TrackResult:
    """Roll the real environment applying the pretrained increments plus the
    LQR correction; actions are rebuilt by cumulative summation of increments
    (from a zero initial action) and clipped into the action bounds.
    """
    ref_states = np.atleast_2d(np.asarray(ref_states, dtype=np.float64))
    ref_increments = np.atleast_2d(np.asarray(ref_increments, dtype=np.float64))
    if len(ref_states) < steps or len(ref_increments) < steps:
        raise ContractError("reference must cover the requested number of steps")
    state = envs.reset(envspec, seed) if initial_state is None else initial_state
    a_prev = state.last_action.copy()
    errors = []
    clip_events = 0
    truncated = False
    for k in range(steps):
        e = state.s - ref_states[k]
        errors.append(float(np.linalg.norm(e)))
        da = ref_increments[k] + residual_policy(sol, e)
        a_raw = a_prev + da
        a = np.clip(a_raw, envspec.action_low, envspec.action_high)
        if np.any(a != a_raw):
            clip_events += 1
        state, res = envs.advance(envspec, state, a)
        a_prev = a
        if res.done and k < steps - 1:
            truncated = True
            break
    return TrackResult(errors=np.array(errors), truncated=truncated,
                       clip_events=clip_events)


def load_reference(path: str, n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Read a reference trajectory file: one timestep per row, whitespace
    separated, n state values followed by m increment values."""
    data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if data.shape[1] != n + m:
        raise ContractError(f"reference rows have {data.shape[1]} values, expected {n + m}")
    return data[:, :n], data[:, n:]


def write_reference(path: str, ref_states: np.ndarray, ref_increments: np.ndarray) -> None:
    data = np.concatenate([np.atleast_2d(ref_states), np.atleast_2d(ref_increments)], axis=1)
    np.savetxt(path, data)
