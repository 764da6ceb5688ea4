"""Differentiable upper-level losses for path and footstep supervision."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, concat, tensor
from .field import RiskField, sample


class LocalFrameError(ValueError):
    pass


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def row_mse(pred, target) -> Tensor:
    """Mean over rows of the squared Euclidean row distance."""
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return (pred - target).square().sum(axis=1).mean()


def u_path_loss(waypoints, optimized_positions) -> Tensor:
    """MSE between predicted waypoints (K, 2) and the MPC-optimized positions (held constant)."""
    target = optimized_positions.data if isinstance(optimized_positions, Tensor) else np.asarray(optimized_positions, float)
    if target.shape[1] > 2:
        target = target[:, :2]
    if _t(waypoints).shape != target.shape:
        raise ValueError(f"{_t(waypoints).shape[0]} waypoints vs {target.shape[0]} optimized states")
    return row_mse(waypoints, tensor(target))


class Polyline:
    """Differentiable arc-length parametrization of a waypoint path."""

    def __init__(self, path):
        self.path = _t(path)
        pts = self.path.data
        if pts.ndim != 2 or len(pts) < 2:
            raise LocalFrameError("need at least two waypoints")
        seg = np.diff(pts, axis=0)
        self.valid = np.einsum("ij,ij->i", seg, seg) > 1e-18
        if not self.valid.any():
            raise LocalFrameError("degenerate path: all waypoints coincide")
        self.seg: dict[int, Tensor] = {}
        self.length: dict[int, Tensor] = {}
        self.cum: dict[int, Tensor | float] = {}
        acc: Tensor | float = 0.0
        for j in range(len(seg)):
            self.cum[j] = acc
            if self.valid[j]:
                s = self.path[j + 1] - self.path[j]
                self.seg[j] = s
                self.length[j] = s.square().sum().sqrt()
                acc = acc + self.length[j]

    def closest(self, xy: np.ndarray) -> tuple[int, float]:
        """Segment index and segment parameter of the closest point.

        The parameter is clamped to [0, 1] except past the two path ends, where
        the end segments continue as rays so the arc length keeps a gradient.
        """
        pts = self.path.data
        valid = np.flatnonzero(self.valid)
        best, best_j, best_t = math.inf, -1, 0.0
        for j in valid:
            a, d = pts[j], pts[j + 1] - pts[j]
            raw = float((xy - a) @ d / (d @ d))
            t = min(max(raw, 0.0), 1.0)
            dist = float(np.sum((xy - a - t * d) ** 2))
            if dist < best:
                best, best_j, best_t = dist, int(j), raw
        lo = 0.0 if best_j == valid[0] else None
        hi = 1.0 if best_j == valid[-1] else None
        t = best_t
        if lo is None:
            t = max(t, 0.0)
        if hi is None:
            t = min(t, 1.0)
        return best_j, t

    def local(self, step) -> tuple[Tensor, Tensor]:
        """(arc length of the closest point, signed lateral offset; left positive)."""
        step = _t(step)
        j, t = self.closest(step.data)
        rel = step - self.path[j]
        seg, length = self.seg[j], self.length[j]
        if t not in (0.0, 1.0):
            arc = self.cum[j] + (rel * seg).sum() / length
        else:
            arc = self.cum[j] + length * t
        cross = seg[0] * rel[1] - seg[1] * rel[0]
        return _t(arc), cross / length


def local_frame_map(step, path, prev_arc=0.0):
    """Map a footstep to (longitudinal advance since ``prev_arc``, signed lateral offset, arc)."""
    arc, w = Polyline(path).local(step)
    return arc - prev_arc, w, arc


def alternation(m: int, parity: int) -> np.ndarray:
    """Lateral sign per planned step k = 1..m: +1 when (k + parity) is even."""
    k = np.arange(1, m + 1)
    return np.where((k + parity) % 2 == 0, 1.0, -1.0)


def u_wl_loss(steps, path, step_width: float, step_length: float, parity: int) -> tuple[Tensor, Tensor]:
    """(u_w, u_l): mean squared deviation of lateral offsets from +-width and of advances from length."""
    steps = _t(steps)
    line = Polyline(path)
    alpha = alternation(steps.shape[0], parity)
    prev = 0.0
    w_terms, l_terms = [], []
    for k in range(steps.shape[0]):
        arc, w = line.local(steps[k])
        l_terms.append((arc - prev - step_length).reshape(1))
        w_terms.append((w - step_width * alpha[k]).reshape(1))
        prev = arc
    return concat(w_terms).square().mean(), concat(l_terms).square().mean()


def u_esdf_loss(steps, field: RiskField) -> Tensor:
    """Sum of risk samples at the footsteps, linearized so the gradient is the field gradient."""
    steps = _t(steps)
    vals = np.empty(steps.shape[0])
    grads = np.empty(steps.shape)
    for k, (x, y) in enumerate(steps.data):
        vals[k], grads[k] = sample(field, float(x), float(y))
    anchor = tensor(steps.data)
    return (tensor(grads) * (steps - anchor)).sum() + float(vals.sum())
