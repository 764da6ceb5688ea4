"""Path and step planner networks on top of :mod:`bipedplan.autodiff`.

Both are tanh MLPs.  The path net maps pooled inverse depth plus the goal to K
robot-frame waypoints; the step net maps those waypoints plus six robot-state
features to M robot-frame footsteps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, concat, load_checkpoint, save_checkpoint, tensor
from .hlip import RobotState
from .scene import DepthFrame

POOL_GRID = (8, 16)  # rows x cols -> D = 128
STATE_FEATURES = 6


def encode_depth(frame: DepthFrame, grid=POOL_GRID) -> np.ndarray:
    """Average-pool depth over a rows x cols grid and map to 1 / (1 + d)."""
    rows, cols = grid
    d = frame.values
    h, w = d.shape
    ph, pw = -h % rows, -w % cols
    if ph or pw:
        d = np.pad(d, ((0, ph), (0, pw)), constant_values=frame.camera.max_range)
        h, w = d.shape
    pooled = d.reshape(rows, h // rows, cols, w // cols).mean(axis=(1, 3))
    return (1.0 / (1.0 + pooled)).reshape(-1)


def state_features(state: RobotState, heading: float) -> np.ndarray:
    """Robot-frame [p_x, p_y, v_x, v_y, prev_step_x, parity_sign] from world-axis H-LIP states."""
    c, s = math.cos(heading), math.sin(heading)

    def rot(vx, vy):
        return c * vx + s * vy, -s * vx + c * vy

    p = rot(state.x.p, state.y.p)
    v = rot(state.x.v, state.y.v)
    prev = rot(*state.prev_step)
    return np.array([p[0], p[1], v[0], v[1], prev[0], 1.0 if state.parity == 0 else -1.0])


@dataclass
class MLP:
    """Dense tanh network; ``layers`` is a list of (W (in, out), b (out,)) arrays."""

    layers: list

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [W.shape[1] for W, _ in self.layers]

    def arrays(self) -> list[np.ndarray]:
        return [a for W, b in self.layers for a in (W, b)]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MLP":
        it = iter(arrays)
        return MLP([(np.array(next(it)), np.array(next(it))) for _ in self.layers])

    def params(self, requires_grad: bool = True) -> list[Tensor]:
        return [tensor(a, requires_grad=requires_grad) for a in self.arrays()]


def init_mlp(sizes: Sequence[int], seed: int, out_scale: float = 1.0) -> MLP:
    """He-style uniform weights (bound sqrt(6 / fan_in)), zero biases.

    ``out_scale`` shrinks the last layer so initial outputs start near zero.
    """
    rng = np.random.default_rng(seed)
    layers = []
    last = len(sizes) - 2
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = math.sqrt(6.0 / fan_in) * (out_scale if i == last else 1.0)
        layers.append((rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out)))
    return MLP(layers)


def mlp_forward(x: Tensor, params: Sequence[Tensor]) -> Tensor:
    h = x
    n = len(params) // 2
    for i in range(n):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n - 1:
            h = h.tanh()
    return h


def f_path_forward(features, goal, params: Sequence[Tensor]) -> Tensor:
    """Waypoints (K, 2) in the robot frame.

    The network predicts waypoints 1..K-1; waypoint 0 is the robot itself, matching
    the MPC's fixed initial state, so the path cannot slide its start off the robot.
    """
    x = concat([tensor(np.asarray(features, float).reshape(1, -1)), tensor(np.asarray(goal, float).reshape(1, 2))], axis=1)
    out = mlp_forward(x, params)
    return concat([tensor(np.zeros((1, 2))), out.reshape(-1, 2)], axis=0)


def f_step_forward(waypoints: Tensor, state_feats, params: Sequence[Tensor]) -> Tensor:
    """Footsteps (M, 2) in the robot frame; gradients flow back into ``waypoints``."""
    if not isinstance(waypoints, Tensor):
        waypoints = tensor(waypoints)
    x = concat([waypoints.reshape(1, -1), tensor(np.asarray(state_feats, float).reshape(1, STATE_FEATURES))], axis=1)
    return mlp_forward(x, params).reshape(-1, 2)


@dataclass
class PlannerWeights:
    path: MLP
    step: MLP

    @property
    def k(self) -> int:
        return self.path.sizes[-1] // 2 + 1

    @property
    def m(self) -> int:
        return self.step.sizes[-1] // 2

    def arrays(self) -> list[np.ndarray]:
        return self.path.arrays() + self.step.arrays()

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "PlannerWeights":
        n = len(self.path.arrays())
        return PlannerWeights(self.path.with_arrays(arrays[:n]), self.step.with_arrays(arrays[n:]))

    def save(self, path, meta: dict | None = None) -> None:
        named = {}
        for prefix, net in (("path", self.path), ("step", self.step)):
            for i, (W, b) in enumerate(net.layers):
                named[f"{prefix}.{i}.W"] = W
                named[f"{prefix}.{i}.b"] = b
        save_checkpoint(path, named, meta)

    @classmethod
    def load(cls, path) -> "PlannerWeights":
        named, _ = load_checkpoint(path)
        nets = {}
        for prefix in ("path", "step"):
            layers = []
            i = 0
            while f"{prefix}.{i}.W" in named:
                layers.append((named[f"{prefix}.{i}.W"], named[f"{prefix}.{i}.b"]))
                i += 1
            nets[prefix] = MLP(layers)
        return cls(nets["path"], nets["step"])


def init_weights(seed: int, k: int = 8, m: int = 6, depth_dim: int = POOL_GRID[0] * POOL_GRID[1], step_out_scale: float = 0.01) -> PlannerWeights:
    path = init_mlp([depth_dim + 2, 256, 128, 2 * (k - 1)], seed)
    # footsteps start near the robot instead of metres away inside obstacles
    step = init_mlp([2 * k + STATE_FEATURES, 64, 64, 2 * m], seed + 7919, step_out_scale)
    return PlannerWeights(path, step)
