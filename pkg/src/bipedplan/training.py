"""Bilevel training: network predictions supervised by MPC solutions.

One iteration predicts waypoints, tracks them with the unicycle iLQR, predicts
footsteps from the waypoints, tracks those with the H-LIP step MPC, scores the
footsteps on the blurred collision field, and takes one Adam step on the sum
of all upper-level losses.  MPC solutions are constants in the graph.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .autodiff import AdamState, Tensor, adam_step, gradients, tensor
from .field import RiskField, build_occupancy, frustum_grid, gaussian_blur
from .hlip import HlipError, HlipParams, RobotState, nominal_state, step_sequence_track
from .losses import LocalFrameError, row_mse, u_esdf_loss, u_path_loss, u_wl_loss
from .nets import PlannerWeights, encode_depth, f_path_forward, f_step_forward, init_weights, state_features
from .scene import DepthFrame, Sample, project
from .unicycle import MpcWeights, SolverError, track

log = logging.getLogger(__name__)

MODES = ("joint", "path_only")


@dataclass
class TrainConfig:
    lambda_w: float = 1.0
    lambda_l: float = 1.0
    lambda_e: float = 0.5
    step_width: float = 0.08
    step_length: float = 0.12
    lr: float = 1e-3
    path_lr: float | None = None  # defaults to lr
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    seed: int = 0
    augment: bool = False
    mode: str = "joint"
    k: int = 8
    m: int = 6
    dt: float = 0.25
    q_path: tuple = (1.0, 1.0, 0.0, 0.0)
    r_path: tuple = (0.1, 0.1)
    mpc_max_iters: int = 100
    z0: float = 0.4
    t_ssp: float = 0.3
    q_s: float = 1.0
    r_s: float = 0.01
    resolution: float = 0.05
    sigma: float = 3.0
    height_band: tuple = (0.05, 1.0)
    grid_margin: float = 1.0

    def __post_init__(self):
        if min(self.lambda_w, self.lambda_l, self.lambda_e) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.step_width <= 0 or self.step_length <= 0:
            raise ValueError("desired step width and length must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def nominal_speed(self) -> float:
        return self.step_length / self.dt

    def mpc_weights(self) -> MpcWeights:
        return MpcWeights(np.diag(self.q_path), np.diag(self.r_path), self.dt, self.k)

    def hlip(self) -> HlipParams:
        return HlipParams(self.z0, self.t_ssp)

    def adam(self, weights: PlannerWeights) -> "PlannerAdam":
        hyper = dict(beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        path_lr = self.lr if self.path_lr is None else self.path_lr
        return PlannerAdam(
            AdamState.for_params(weights.path.arrays(), lr=path_lr, **hyper),
            AdamState.for_params(weights.step.arrays(), lr=self.lr, **hyper),
        )

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_json(cls, record: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(record) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in record.items()})

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class PlannerAdam:
    """Separate Adam states so the two networks can use different step sizes."""

    path: AdamState
    step: AdamState


@dataclass
class LossBreakdown:
    u_path: float = 0.0
    u_mse_step: float = 0.0
    u_w: float = 0.0
    u_l: float = 0.0
    u_esdf: float = 0.0
    u_step: float = 0.0
    u_total: float = 0.0
    l_path: float = 0.0
    l_step: float = 0.0
    skipped: bool = False
    reason: str = ""

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Prepared:
    """Everything about a sample that does not depend on the network weights."""

    sample: Sample
    features: np.ndarray
    field: RiskField
    state: RobotState
    state_feats: np.ndarray
    x0: np.ndarray
    rotation: np.ndarray  # robot -> world, applied to row vectors as p @ rotation


def build_field(depth: DepthFrame, pose, cfg: TrainConfig) -> RiskField:
    cam = depth.camera
    hfov = 2 * math.atan((cam.width / 2) / cam.fx)
    origin, shape = frustum_grid(pose, cam.max_range, hfov, cfg.resolution, cfg.grid_margin)
    grid = build_occupancy(project(depth, pose), origin, cfg.resolution, shape, cfg.height_band)
    return gaussian_blur(grid, cfg.sigma)


def robot_state(sample: Sample, cfg: TrainConfig) -> RobotState:
    """Steady walking state at the sample pose; the dataset carries no velocity."""
    x, y, th = sample.pose
    return nominal_state(cfg.hlip(), cfg.step_length, cfg.step_width, sample.stance_parity, th, (x, y))


def prepare(sample: Sample, cfg: TrainConfig) -> Prepared:
    x, y, th = (float(v) for v in sample.pose)
    c, s = math.cos(th), math.sin(th)
    state = robot_state(sample, cfg)
    return Prepared(
        sample,
        encode_depth(sample.depth),
        build_field(sample.depth, sample.pose, cfg),
        state,
        state_features(state, th),
        np.array([x, y, cfg.nominal_speed, th]),
        np.array([[c, s], [-s, c]]),
    )


def to_world(points: Tensor, prep: Prepared) -> Tensor:
    return points @ tensor(prep.rotation) + tensor(prep.sample.pose[:2].reshape(1, 2))


def augment_flip(sample: Sample) -> Sample:
    """Mirror left/right: reverse depth columns, negate goal y, swap stance foot."""
    return Sample(
        DepthFrame(sample.depth.camera, sample.depth.values[:, ::-1].copy()),
        np.array([sample.goal[0], -sample.goal[1]]),
        sample.pose.copy(),
        1 - sample.stance_parity,
        sample.scene,
        dict(sample.meta),
    )


@dataclass
class Forward:
    """Graph and solver outputs of one pass through both levels."""

    waypoints: Tensor  # robot frame (K, 2)
    waypoints_world: Tensor
    steps: Tensor  # robot frame (M, 2)
    steps_world: Tensor
    path_opt: object
    step_opt: object
    u_path: Tensor
    u_mse_step: Tensor
    u_w: Tensor
    u_l: Tensor
    u_esdf: Tensor
    u_step: Tensor
    u_total: Tensor

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(
            u_path=self.u_path.item(),
            u_mse_step=self.u_mse_step.item(),
            u_w=self.u_w.item(),
            u_l=self.u_l.item(),
            u_esdf=self.u_esdf.item(),
            u_step=self.u_step.item(),
            u_total=self.u_total.item(),
            l_path=float(self.path_opt.cost),
            l_step=float(self.step_opt.cost),
        )


def forward(path_params: Sequence[Tensor], step_params: Sequence[Tensor], prep: Prepared, cfg: TrainConfig) -> Forward:
    sample = prep.sample
    waypoints = f_path_forward(prep.features, sample.goal, path_params)
    wp_world = to_world(waypoints, prep)
    path_opt = track(wp_world.data, prep.x0, cfg.mpc_weights(), max_iters=cfg.mpc_max_iters)
    u_path = u_path_loss(wp_world, path_opt.positions)

    # the ablation cuts the step losses off from the path network
    wp_in = waypoints.detach() if cfg.mode == "path_only" else waypoints
    wp_world_in = wp_world.detach() if cfg.mode == "path_only" else wp_world
    steps = f_step_forward(wp_in, prep.state_feats, step_params)
    steps_world = to_world(steps, prep)
    step_opt, _ = step_sequence_track(steps_world.data, prep.state, cfg.hlip(), cfg.q_s, cfg.r_s)
    u_mse = row_mse(steps_world, tensor(step_opt.steps))
    u_w, u_l = u_wl_loss(steps_world, wp_world_in, cfg.step_width, cfg.step_length, sample.stance_parity)
    u_esdf = u_esdf_loss(steps_world, prep.field)
    u_step = u_mse + cfg.lambda_w * u_w + cfg.lambda_l * u_l + cfg.lambda_e * u_esdf
    u_total = u_path + u_step
    return Forward(waypoints, wp_world, steps, steps_world, path_opt, step_opt, u_path, u_mse, u_w, u_l, u_esdf, u_step, u_total)


def check_breakdown(b: LossBreakdown, cfg: TrainConfig, tol: float = 1e-9) -> None:
    step = b.u_mse_step + cfg.lambda_w * b.u_w + cfg.lambda_l * b.u_l + cfg.lambda_e * b.u_esdf
    scale = max(1.0, abs(b.u_total))
    if abs(b.u_step - step) > tol * scale or abs(b.u_total - (b.u_path + b.u_step)) > tol * scale:
        raise AssertionError(f"loss breakdown identity violated: {b}")


def train_iteration(sample, weights: PlannerWeights, adam: PlannerAdam, cfg: TrainConfig):
    """One bilevel iteration.  Returns (new weights, new Adam state, LossBreakdown).

    ``sample`` may be a raw :class:`Sample` or an already :class:`Prepared` one.
    Solver or geometry failures skip the update and are reported in the breakdown.
    """
    prep = sample if isinstance(sample, Prepared) else prepare(sample, cfg)
    path_params = weights.path.params()
    step_params = weights.step.params()
    try:
        fw = forward(path_params, step_params, prep, cfg)
    except (SolverError, HlipError, LocalFrameError) as err:
        log.warning("skipping iteration: %s", err)
        return weights, adam, LossBreakdown(skipped=True, reason=str(err))
    breakdown = fw.breakdown()
    check_breakdown(breakdown, cfg)
    grads = gradients(fw.u_total, path_params + step_params)
    n = len(path_params)
    new_path, path_adam = adam_step([p.data for p in path_params], grads[:n], adam.path)
    new_step, step_adam = adam_step([p.data for p in step_params], grads[n:], adam.step)
    return weights.with_arrays(new_path + new_step), PlannerAdam(path_adam, step_adam), breakdown


def evaluate_losses(weights: PlannerWeights, prep: Prepared, cfg: TrainConfig) -> LossBreakdown:
    try:
        fw = forward(weights.path.params(False), weights.step.params(False), prep, cfg)
    except (SolverError, HlipError, LocalFrameError) as err:
        return LossBreakdown(skipped=True, reason=str(err))
    return fw.breakdown()


def expand(dataset: Sequence[Sample], augment: bool) -> list[Sample]:
    items = list(dataset)
    if augment:
        items += [augment_flip(s) for s in dataset]
    return items


def train(
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    weights: PlannerWeights | None = None,
    checkpoint: str | Path | None = None,
    history_path: str | Path | None = None,
    iterations: int | None = None,
    prepared: Sequence[Prepared] | None = None,
):
    """Batch-size-1 training with a seeded shuffle per epoch.

    Runs ``cfg.epochs`` epochs, or exactly ``iterations`` updates when given.
    Returns (weights, history) where history holds one dict per iteration.
    """
    if not dataset and not prepared:
        raise ValueError("training needs a non-empty dataset")
    rng = np.random.default_rng(cfg.seed)
    weights = weights or init_weights(cfg.seed, cfg.k, cfg.m)
    items = list(prepared) if prepared is not None else [prepare(s, cfg) for s in expand(dataset, cfg.augment)]
    adam = cfg.adam(weights)
    history: list[dict] = []
    hist_fh = open(history_path, "w") if history_path else None
    try:
        epoch = 0
        done = 0
        while (iterations is None and epoch < cfg.epochs) or (iterations is not None and done < iterations):
            for idx in rng.permutation(len(items)):
                if iterations is not None and done >= iterations:
                    break
                weights, adam, b = train_iteration(items[idx], weights, adam, cfg)
                rec = {"epoch": epoch, "iteration": done, "sample": int(idx), **b.to_json()}
                history.append(rec)
                if hist_fh:
                    hist_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                done += 1
            if checkpoint:
                weights.save(checkpoint, {"epoch": epoch, "iterations": done, "config": cfg.to_json()})
            epoch += 1
    finally:
        if hist_fh:
            hist_fh.close()
    return weights, history


def mean_losses(weights: PlannerWeights, prepared: Iterable[Prepared], cfg: TrainConfig) -> LossBreakdown:
    rows = [evaluate_losses(weights, p, cfg) for p in prepared]
    ok = [r for r in rows if not r.skipped]
    if not ok:
        return LossBreakdown(skipped=True, reason="all samples failed")
    keys = [f.name for f in dataclasses.fields(LossBreakdown) if f.name not in ("skipped", "reason")]
    return LossBreakdown(**{k: float(np.mean([getattr(r, k) for r in ok])) for k in keys})


# ----------------------------------------------------------------------------
# warm start: pre-train the path net on obstacle-aware teacher paths


@dataclass
class WarmStartConfig:
    iterations: int = 3000
    lr: float = 1e-3
    risk_weight: float = 5.0  # extra cost per unit of risk on each teacher-path cell
    seed: int = 0


def resample(polyline: np.ndarray, k: int, spacing: float) -> np.ndarray:
    """K points at arc lengths 0, s, 2s, ... along ``polyline``; s shrinks to fit short lines."""
    seg = np.linalg.norm(np.diff(polyline, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    step = min(spacing, arc[-1] / (k - 1)) if arc[-1] > 0 else 0.0
    s = np.arange(k) * step
    return np.stack([np.interp(s, arc, polyline[:, 0]), np.interp(s, arc, polyline[:, 1])], axis=1)


def _grid_graph(values: np.ndarray, resolution: float, risk_weight: float):
    h, w = values.shape
    idx = np.arange(h * w).reshape(h, w)
    cost = 1.0 + risk_weight * values
    rows, cols, wts = [], [], []
    for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
        r0, r1 = max(0, -dr), h - max(0, dr)
        c0, c1 = max(0, -dc), w - max(0, dc)
        a = idx[r0:r1, c0:c1]
        b = idx[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
        length = resolution * math.hypot(dr, dc)
        rows.append(a.ravel())
        cols.append(b.ravel())
        wts.append((length * 0.5 * (cost[r0:r1, c0:c1] + cost[r0 + dr : r1 + dr, c0 + dc : c1 + dc])).ravel())
    n = h * w
    return coo_matrix((np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()


def teacher_path(prep: Prepared, cfg: TrainConfig, risk_weight: float = 5.0) -> np.ndarray:
    """Robot-frame K waypoints along the cheapest grid route to the goal on the frame's risk field.

    Edge cost is length times (1 + risk_weight * risk); the route is resampled at
    the desired step length so the targets are evenly spaced.
    """
    f = prep.field
    h, w = f.shape
    pose = prep.sample.pose

    def cell(xy):
        c = int(np.clip(math.floor((xy[0] - f.origin[0]) / f.resolution), 0, w - 1))
        r = int(np.clip(math.floor((xy[1] - f.origin[1]) / f.resolution), 0, h - 1))
        return r, c

    goal_world = prep.sample.goal @ prep.rotation + pose[:2]
    (sr, sc), (gr, gc) = cell(pose[:2]), cell(goal_world)
    graph = _grid_graph(f.values, f.resolution, risk_weight)
    _, pred = dijkstra(graph, directed=False, indices=sr * w + sc, return_predecessors=True)
    node, route = gr * w + gc, []
    while node >= 0:
        route.append(node)
        node = pred[node]
    route = np.array(route[::-1])
    centers = np.stack([f.origin[0] + (route % w + 0.5) * f.resolution, f.origin[1] + (route // w + 0.5) * f.resolution], axis=1)
    centers[0] = pose[:2]
    if len(centers) < 2:
        return np.zeros((cfg.k, 2))
    local = (centers - pose[:2]) @ prep.rotation.T
    return resample(local, cfg.k, cfg.step_length)


def warm_start_path(prepared: Sequence[Prepared], cfg: TrainConfig, weights: PlannerWeights, ws: WarmStartConfig | None = None):
    """Regress the path net onto teacher paths (no MPC in the loop).  Returns (weights, losses)."""
    ws = ws or WarmStartConfig()
    rng = np.random.default_rng(ws.seed)
    targets = [teacher_path(p, cfg, ws.risk_weight) for p in prepared]
    arrays = weights.path.arrays()
    adam = AdamState.for_params(arrays, lr=ws.lr)
    losses = []
    for _ in range(ws.iterations):
        i = int(rng.integers(len(prepared)))
        params = [tensor(a, requires_grad=True) for a in arrays]
        loss = row_mse(f_path_forward(prepared[i].features, prepared[i].sample.goal, params), tensor(targets[i]))
        arrays, adam = adam_step(arrays, gradients(loss, params), adam)
        losses.append(loss.item())
    return PlannerWeights(weights.path.with_arrays(arrays), weights.step), losses
