"""Discrete unicycle model and an iLQR reference tracker.

State is (x, y, v, theta), control is (omega, a).  Position integrates the
pre-update speed and heading, so the step is exactly the forward-Euler map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NX, NU = 4, 2


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class MpcWeights:
    Q: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 0.0, 0.0]))
    R: np.ndarray = field(default_factory=lambda: np.diag([0.1, 0.1]))
    dt: float = 0.25
    N: int = 8

    def __post_init__(self):
        Q, R = np.asarray(self.Q, float), np.asarray(self.R, float)
        if Q.shape != (NX, NX) or R.shape != (NU, NU):
            raise ValueError("Q must be 4x4 and R 2x2")
        if not np.allclose(Q, Q.T) or np.linalg.eigvalsh(Q).min() < -1e-12:
            raise ValueError("Q must be symmetric positive semidefinite")
        if not np.allclose(R, R.T) or np.linalg.eigvalsh(R).min() <= 0:
            raise ValueError("R must be symmetric positive definite")
        if self.dt <= 0 or self.N < 2:
            raise ValueError("need dt > 0 and N >= 2")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)


@dataclass
class MpcResult:
    states: np.ndarray  # (N, 4)
    controls: np.ndarray  # (N-1, 2) as (omega, a)
    cost: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]


def step_dynamics(s, u, dt: float) -> np.ndarray:
    x, y, v, th = s
    omega, a = u
    return np.array([x + v * math.cos(th) * dt, y + v * math.sin(th) * dt, v + a * dt, th + omega * dt])


def _jacobians(s, dt):
    _, _, v, th = s
    c, sn = math.cos(th), math.sin(th)
    A = np.array(
        [
            [1.0, 0.0, c * dt, -v * sn * dt],
            [0.0, 1.0, sn * dt, v * c * dt],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    B = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, dt], [dt, 0.0]])
    return A, B


def rollout(x0, controls, dt: float) -> np.ndarray:
    states = [np.asarray(x0, dtype=np.float64)]
    for u in controls:
        states.append(step_dynamics(states[-1], u, dt))
    return np.array(states)


def as_reference(reference, n: int | None = None) -> np.ndarray:
    """Pad positions-only waypoints (K, 2) to full (K, 4) states with zeros."""
    ref = np.asarray(reference, dtype=np.float64)
    if ref.ndim != 2 or ref.shape[1] not in (2, NX):
        raise ValueError(f"reference must be (N, 2) or (N, 4), got {ref.shape}")
    if ref.shape[1] == 2:
        ref = np.hstack([ref, np.zeros((len(ref), 2))])
    if n is not None and len(ref) != n:
        raise ValueError(f"reference has {len(ref)} waypoints, horizon is {n}")
    return ref


def l_path_cost(states, controls, reference, weights: MpcWeights) -> float:
    """Sum over N states of (x - r)' Q (x - r) plus sum over N-1 controls of u' R u."""
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64).reshape(-1, NU)
    ref = as_reference(reference)
    if len(states) != len(ref) or len(controls) != len(states) - 1:
        raise ValueError(f"length mismatch: {len(states)} states, {len(controls)} controls, {len(ref)} waypoints")
    err = states - ref
    return float(np.einsum("ki,ij,kj->", err, weights.Q, err) + np.einsum("ki,ij,kj->", controls, weights.R, controls))


def track(
    reference,
    x0,
    weights: MpcWeights | None = None,
    max_iters: int = 100,
    tol: float = 1e-8,
    u_init=None,
    keep_trace: bool = False,
) -> MpcResult:
    """iLQR: track ``reference`` (N waypoints) from ``x0`` under the unicycle model."""
    weights = weights or MpcWeights()
    ref = as_reference(reference)
    n = len(ref)
    if n < 2:
        raise ValueError("horizon needs at least 2 states")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (NX,) or not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be a finite 4-vector")
    Q, R, dt = weights.Q, weights.R, weights.dt

    u = np.zeros((n - 1, NU)) if u_init is None else np.array(u_init, dtype=np.float64).reshape(n - 1, NU)
    xs = rollout(x0, u, dt)
    cost = l_path_cost(xs, u, ref, weights)
    if not math.isfinite(cost):
        raise SolverError("non-finite cost in initial rollout")

    mu, mu_min, mu_max = 1e-6, 1e-8, 1e8
    converged = False
    it = 0
    trace = [cost] if keep_trace else []
    for it in range(1, max_iters + 1):
        # backward Riccati pass on the quadratic cost-to-go
        Vx = 2 * Q @ (xs[-1] - ref[-1])
        Vxx = 2 * Q
        ks = np.zeros((n - 1, NU))
        Ks = np.zeros((n - 1, NU, NX))
        expected = 0.0
        ok = True
        for k in range(n - 2, -1, -1):
            A, B = _jacobians(xs[k], dt)
            qx = 2 * Q @ (xs[k] - ref[k]) + A.T @ Vx
            qu = 2 * R @ u[k] + B.T @ Vx
            qxx = 2 * Q + A.T @ Vxx @ A
            quu = 2 * R + B.T @ Vxx @ B
            qux = B.T @ Vxx @ A
            quu_reg = quu + mu * np.eye(NU)
            try:
                L = np.linalg.cholesky(quu_reg)
            except np.linalg.LinAlgError:
                ok = False
                break
            kk = -np.linalg.solve(L.T, np.linalg.solve(L, qu))
            KK = -np.linalg.solve(L.T, np.linalg.solve(L, qux))
            ks[k], Ks[k] = kk, KK
            expected += kk @ qu
            Vx = qx + KK.T @ quu @ kk + KK.T @ qu + qux.T @ kk
            Vxx = qxx + KK.T @ quu @ KK + KK.T @ qux + qux.T @ KK
            Vxx = 0.5 * (Vxx + Vxx.T)
        if not ok:
            mu = min(mu * 10, mu_max)
            continue

        accepted = False
        alpha = 1.0
        for _ in range(12):
            xn = np.empty_like(xs)
            un = np.empty_like(u)
            xn[0] = x0
            for k in range(n - 1):
                un[k] = u[k] + alpha * ks[k] + Ks[k] @ (xn[k] - xs[k])
                xn[k + 1] = step_dynamics(xn[k], un[k], dt)
            new_cost = l_path_cost(xn, un, ref, weights)
            if not math.isfinite(new_cost):
                raise SolverError(f"non-finite cost during rollout at iteration {it}")
            if new_cost <= cost:
                accepted = True
                break
            alpha *= 0.5

        if not accepted:
            if mu >= mu_max:
                break
            mu = min(mu * 10, mu_max)
            continue

        decrease = cost - new_cost
        xs, u, prev, cost = xn, un, cost, new_cost
        if keep_trace:
            trace.append(cost)
        mu = max(mu / 10, mu_min)
        if decrease <= tol * max(prev, 1e-300) or cost == 0.0:
            converged = True
            break
        if abs(expected) < 1e-30:
            converged = True
            break

    return MpcResult(xs, u, cost, it, converged, trace)
