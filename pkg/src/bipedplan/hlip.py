"""Hybrid linear inverted pendulum (H-LIP) step-to-step model and step tracking.

Each horizontal axis is an independent 1D pendulum with pre-impact state
[mu, p, v]: global COM position, stance foot relative to COM, COM velocity.
A step of global size u moves the stance foot by u at impact, then the COM
swings for one single-support phase of length T_ssp (no double support).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FOOT = np.array([1.0, 1.0, 0.0])  # foot = mu + p


class HlipError(RuntimeError):
    pass


@dataclass(frozen=True)
class HlipParams:
    z0: float = 0.4
    T_ssp: float = 0.3
    gravity: float = 9.81

    def __post_init__(self):
        if self.z0 <= 0 or self.T_ssp <= 0 or self.gravity <= 0:
            raise ValueError("z0, T_ssp and gravity must be positive")

    @property
    def lam(self) -> float:
        return math.sqrt(self.gravity / self.z0)


@dataclass(frozen=True)
class HlipState:
    mu: float = 0.0
    p: float = 0.0
    v: float = 0.0

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.mu, self.p, self.v])

    @property
    def foot(self) -> float:
        return self.mu + self.p

    @classmethod
    def from_vector(cls, x) -> "HlipState":
        return cls(float(x[0]), float(x[1]), float(x[2]))


@dataclass(frozen=True)
class RobotState:
    """Per-axis H-LIP states plus the last executed step size and stance parity (0 = left)."""

    x: HlipState = HlipState()
    y: HlipState = HlipState()
    prev_step: tuple[float, float] = (0.0, 0.0)
    parity: int = 0

    @property
    def com(self) -> np.ndarray:
        return np.array([self.x.mu, self.y.mu])

    @property
    def stance_foot(self) -> np.ndarray:
        return np.array([self.x.foot, self.y.foot])

    def axis(self, i: int) -> HlipState:
        return self.x if i == 0 else self.y


@dataclass
class StepPlan:
    steps: np.ndarray  # (M, 2) world footsteps
    parity: int = 0
    costs: tuple[float, float] = (0.0, 0.0)
    step_sizes: np.ndarray | None = None
    states: tuple | None = None  # per-axis (M+1, 3) pre-impact trajectories

    @property
    def cost(self) -> float:
        return float(sum(self.costs))


def s2s_matrices(params: HlipParams) -> tuple[np.ndarray, np.ndarray]:
    """Step-to-step map x' = A x + B u on [mu, p, v]."""
    lam, T = params.lam, params.T_ssp
    C, S = math.cosh(lam * T), math.sinh(lam * T)
    A = np.array([[1.0, 1.0 - C, S / lam], [0.0, C, -S / lam], [0.0, -lam * S, C]])
    B = np.array([[1.0 - C], [C], [-lam * S]])
    return A, B


def rollout(x0, u_seq, params: HlipParams) -> tuple[np.ndarray, np.ndarray]:
    """States (n+1, 3) and stance-foot positions (n+1,) under step sizes ``u_seq``."""
    A, B = s2s_matrices(params)
    x = np.asarray(x0.vector if isinstance(x0, HlipState) else x0, dtype=np.float64)
    states = [x]
    for u in np.asarray(u_seq, dtype=np.float64).reshape(-1):
        x = A @ x + B[:, 0] * u
        states.append(x)
    states = np.array(states)
    return states, states @ FOOT


def orbit_state(params: HlipParams, steps) -> np.ndarray:
    """Pre-impact (p, v) of the periodic orbit driven by the repeating step sequence ``steps``.

    The position coordinate drifts, so only the [p, v] sub-dynamics has a fixed point.
    """
    A, B = s2s_matrices(params)
    As, Bs = A[1:, 1:], B[1:, 0]
    M = np.eye(2)
    c = np.zeros(2)
    for d in np.atleast_1d(np.asarray(steps, dtype=np.float64)):
        M = As @ M
        c = As @ c + Bs * d
    return np.linalg.solve(np.eye(2) - M, c)


def deadbeat_gain(params: HlipParams) -> np.ndarray:
    """Gain K with (A_sub + B_sub K)^2 = 0 on the [p, v] sub-dynamics (Ackermann, poles at 0)."""
    A, B = s2s_matrices(params)
    As, Bs = A[1:, 1:], B[1:, :]
    ctrb = np.hstack([Bs, As @ Bs])
    return -(np.array([0.0, 1.0]) @ np.linalg.solve(ctrb, As @ As))


def stance_feedback(x: HlipState, target_next_foot: float, params: HlipParams, gain=None, x_ref=None) -> float:
    """Step size that lands near ``target_next_foot`` while steering [p, v] onto the orbit."""
    u_nom = float(target_next_foot) - x.foot
    K = deadbeat_gain(params) if gain is None else np.asarray(gain, dtype=np.float64).reshape(2)
    ref = orbit_state(params, [u_nom]) if x_ref is None else np.asarray(x_ref, dtype=np.float64)
    return u_nom + float(K @ (np.array([x.p, x.v]) - ref))


def _prediction_matrices(params: HlipParams, x0: np.ndarray, m: int):
    """Condensed foot predictions: foot_{1..m} = free + G @ u."""
    A, B = s2s_matrices(params)
    powers = [np.eye(3)]
    for _ in range(m):
        powers.append(A @ powers[-1])
    free = np.array([FOOT @ powers[k] @ x0 for k in range(1, m + 1)])
    G = np.zeros((m, m))
    for k in range(1, m + 1):
        for j in range(k):
            G[k - 1, j] = FOOT @ powers[k - 1 - j] @ B[:, 0]
    return free, G


def track_axis(targets, x0: HlipState, u_prev: float, params: HlipParams, q_s: float = 1.0, r_s: float = 0.01):
    """Minimize sum q_s (foot_k - target_k)^2 + r_s (u_k - u_{k-1})^2 over step sizes.

    Returns (step sizes, feet (M,), cost).
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    m = len(targets)
    if m < 1:
        raise ValueError("need at least one target step")
    if q_s < 0 or r_s <= 0:
        raise ValueError("need q_s >= 0 and r_s > 0")
    free, G = _prediction_matrices(params, x0.vector, m)
    D = np.eye(m) - np.eye(m, k=-1)
    d = np.zeros(m)
    d[0] = u_prev
    H = q_s * G.T @ G + r_s * D.T @ D
    rhs = q_s * G.T @ (targets - free) + r_s * D.T @ d
    try:
        u = np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError as err:
        raise HlipError(f"singular step-tracking normal equations: {err}") from None
    feet = free + G @ u
    cost = q_s * np.sum((feet - targets) ** 2) + r_s * np.sum((D @ u - d) ** 2)
    return u, feet, float(cost)


def l_step_cost(steps, targets, state: RobotState, params: HlipParams, q_s: float = 1.0, r_s: float = 0.01) -> float:
    """Lower-level step cost of a candidate world footstep sequence ``steps`` against ``targets``."""
    steps = np.asarray(steps, dtype=np.float64).reshape(-1, 2)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    total = 0.0
    for i in range(2):
        feet = np.concatenate([[state.stance_foot[i]], steps[:, i]])
        u = np.diff(feet)
        du = np.diff(np.concatenate([[state.prev_step[i]], u]))
        total += q_s * np.sum((steps[:, i] - targets[:, i]) ** 2) + r_s * np.sum(du**2)
    return float(total)


def step_sequence_track(targets, state: RobotState, params: HlipParams | None = None, q_s: float = 1.0, r_s: float = 0.01):
    """Per-axis H-LIP tracking of world footstep targets (M, 2).  Returns (StepPlan, total cost)."""
    params = params or HlipParams()
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    feet, sizes, costs, trajs = [], [], [], []
    for i in range(2):
        u, f, c = track_axis(targets[:, i], state.axis(i), state.prev_step[i], params, q_s, r_s)
        feet.append(f)
        sizes.append(u)
        costs.append(c)
        trajs.append(rollout(state.axis(i), u, params)[0])
    plan = StepPlan(np.stack(feet, axis=1), state.parity, (costs[0], costs[1]), np.stack(sizes, axis=1), tuple(trajs))
    return plan, plan.cost


def nominal_state(params: HlipParams, step_length: float, step_width: float, parity: int, heading: float = 0.0, com=(0.0, 0.0)) -> RobotState:
    """Steady walking state along ``heading``: period-1 orbit forward, period-2 sway sideways.

    Computed in the walking frame and rotated into world axes.  Both axes share
    the same linear map, so the rotation commutes with it and the result is
    still an exact periodic orbit.
    """
    side = 1.0 if parity == 0 else -1.0  # standing on the left foot -> next step goes right
    p_f, v_f = orbit_state(params, [step_length])
    # lateral: stance foot at +-w; alternating steps of -+2w
    p_l, v_l = orbit_state(params, [-side * 2 * step_width, side * 2 * step_width])
    c, s = math.cos(heading), math.sin(heading)
    p = np.array([c * p_f - s * p_l, s * p_f + c * p_l])
    v = np.array([c * v_f - s * v_l, s * v_f + c * v_l])
    prev = np.array([c * step_length - s * side * 2 * step_width, s * step_length + c * side * 2 * step_width])
    return RobotState(
        HlipState(float(com[0]), float(p[0]), float(v[0])),
        HlipState(float(com[1]), float(p[1]), float(v[1])),
        (float(prev[0]), float(prev[1])),
        int(parity),
    )
