"""Closed-loop 2D walking simulation and evaluation metrics.

The simulator runs on an exact event clock: path predictions at ``path_rate``,
footstep updates at ``step_rate``.  Each footstep update executes only the first
predicted step through one H-LIP step-to-step map per world axis, so the robot
is a kinematic surrogate (a disk at the COM) rather than a physics model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .field import sample as sample_field
from .hlip import HlipError, HlipState, RobotState, deadbeat_gain, nominal_state, orbit_state, s2s_matrices, step_sequence_track
from .losses import LocalFrameError, Polyline
from .nets import PlannerWeights, encode_depth, f_path_forward, f_step_forward, state_features
from .scene import CameraModel, Sample, Scene2D, SceneError, render_depth
from .scenes import robot_frame_goal
from .training import TrainConfig, build_field, evaluate_losses, prepare
from .unicycle import SolverError, track

LOG_VERSION = 1
OUTCOMES = ("reached", "collided", "timeout")


@dataclass
class SimConfig:
    scene: Scene2D
    start: tuple = (0.0, 0.0, 0.0)
    goals: tuple = ((3.0, 0.0),)
    path_rate: float = 15.0
    step_rate: float = 4.0
    goal_radius: float = 0.25
    max_sim_time: float = 30.0
    robot_radius: float = 0.12
    guard: bool = False  # veto any step whose new COM would touch an obstacle
    noise_sigma: float = 0.0
    seed: int = 0
    camera: CameraModel = field(default_factory=CameraModel)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.path_rate <= 0 or self.step_rate <= 0:
            raise ValueError("rates must be positive")
        if self.goal_radius <= 0:
            raise ValueError("goal_radius must be positive")
        if self.max_sim_time <= 0:
            raise ValueError("max_sim_time must be positive")
        if not self.goals:
            raise ValueError("need at least one goal")
        self.start = tuple(float(v) for v in self.start)
        self.goals = tuple((float(g[0]), float(g[1])) for g in self.goals)


@dataclass
class RolloutLog:
    meta: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    outcome: str | None = None

    def finish(self, outcome: str) -> None:
        if outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {outcome!r}")
        if self.outcome is not None:
            raise RuntimeError(f"outcome already set to {self.outcome!r}")
        self.outcome = outcome

    def append(self, record: dict) -> None:
        if self.records and record["t"] <= self.records[-1]["t"]:
            raise RuntimeError("log timestamps must strictly increase")
        self.records.append(record)

    @property
    def path_updates(self) -> int:
        return sum(1 for r in self.records if "waypoints" in r)

    @property
    def step_updates(self) -> int:
        return sum(1 for r in self.records if "steps" in r)

    @property
    def executed_steps(self) -> int:
        return sum(1 for r in self.records if r.get("executed") is not None)

    def trajectory(self) -> np.ndarray:
        return np.array([r["pose"] for r in self.records]) if self.records else np.zeros((0, 3))

    def save(self, path) -> None:
        """JSON lines: header, one line per record, then the outcome."""
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "header", "version": LOG_VERSION, **self.meta}, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(json.dumps({"kind": "tick", **rec}, sort_keys=True) + "\n")
            fh.write(json.dumps({"kind": "outcome", "outcome": self.outcome}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RolloutLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("kind", None)
            if kind == "header":
                if rec.pop("version", None) != LOG_VERSION:
                    raise ValueError(f"{path}: unsupported log version")
                log.meta = rec
            elif kind == "tick":
                log.records.append(rec)
            elif kind == "outcome":
                log.outcome = rec["outcome"]
        if log.outcome is None:
            raise ValueError(f"{path}: log has no outcome line")
        return log


def _rot(th: float) -> np.ndarray:
    """Rows-vector rotation robot -> world (p_world = p @ R + t)."""
    c, s = math.cos(th), math.sin(th)
    return np.array([[c, s], [-s, c]])


def walking_reference(params, step_length: float, step_width: float, parity: int, heading: float):
    """Per world axis [p, v] of the walking orbit: period-1 forward, period-2 sideways."""
    side = 1.0 if parity == 0 else -1.0
    fwd = orbit_state(params, [step_length])
    lat = orbit_state(params, [-side * 2 * step_width, side * 2 * step_width])
    c, s = math.cos(heading), math.sin(heading)
    return c * fwd - s * lat, s * fwd + c * lat


def execute_step(state: RobotState, target, heading: float, cfg: TrainConfig, max_length: float | None = None, max_width: float | None = None):
    """Step toward world ``target`` with an H-LIP step-size controller; returns (state', step size).

    The desired step is measured from where the stance foot sits on the walking
    orbit (COM + p_orbit), clipped to kinematic limits in the walking frame, and
    each world axis adds deadbeat feedback: u = u_des + K ([p, v] - [p, v]_orbit).
    Measuring from the orbit foot keeps COM-relative targets from feeding p back
    into u, which would break the deadbeat loop.
    """
    params = cfg.hlip()
    A, B = s2s_matrices(params)
    gain = deadbeat_gain(params)
    max_length = 2 * cfg.step_length if max_length is None else max_length
    max_width = 5 * cfg.step_width if max_width is None else max_width
    c, s = math.cos(heading), math.sin(heading)

    side = 1.0 if state.parity == 0 else -1.0
    rel = np.asarray(target, dtype=np.float64) - state.com
    fwd, lat = c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1]
    # forward orbit foot offset is linear in the step length: p = a * L, so L = fwd - a L
    a = float(orbit_state(params, [1.0])[0])
    length = float(np.clip(fwd / (1.0 + a), -max_length, max_length))
    p_lat = float(orbit_state(params, [-side * 2 * cfg.step_width, side * 2 * cfg.step_width])[0])
    width = float(np.clip(lat - p_lat, -max_width, max_width))
    refs = walking_reference(params, length, cfg.step_width, state.parity, heading)
    u_des = (c * length - s * width, s * length + c * width)
    axes, sizes = [], []
    for i in range(2):
        x = state.axis(i)
        u = u_des[i] + float(gain @ (np.array([x.p, x.v]) - refs[i]))
        axes.append(HlipState.from_vector(A @ x.vector + B[:, 0] * u))
        sizes.append(u)
    return RobotState(axes[0], axes[1], (sizes[0], sizes[1]), 1 - state.parity), np.array(sizes)


def _heading_from_path(path_world: np.ndarray, xy: np.ndarray, fallback: float, lookahead: float = 0.3) -> float:
    """Direction from ``xy`` to the path point ``lookahead`` metres past its closest point."""
    try:
        line = Polyline(path_world)
    except LocalFrameError:
        return fallback
    arc, _ = line.local(np.asarray(xy, dtype=np.float64))
    seg = np.linalg.norm(np.diff(path_world, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s_target = min(max(arc.item(), 0.0) + lookahead, cum[-1])
    px = np.interp(s_target, cum, path_world[:, 0])
    py = np.interp(s_target, cum, path_world[:, 1])
    d = np.array([px, py]) - xy
    if np.hypot(*d) < 1e-6:
        return fallback
    return math.atan2(d[1], d[0])


def evenness(waypoints) -> float:
    """Population variance of consecutive waypoint distances (m^2)."""
    wp = np.asarray(waypoints, dtype=np.float64)
    if len(wp) < 2:
        return 0.0
    return float(np.var(np.linalg.norm(np.diff(wp, axis=0), axis=1)))


def _event_times(rate_a: float, rate_b: float, horizon: float):
    """Merged update times of two periodic clocks; yields (t, a_due, b_due) exactly."""
    i = j = 0
    while True:
        ta, tb = i / rate_a, j / rate_b
        t = min(ta, tb)
        if t > horizon:
            return
        a_due, b_due = ta == t, tb == t
        yield t, a_due, b_due
        i += a_due
        j += b_due


def _hit(scene: Scene2D, xy, radius: float) -> bool:
    return not scene.inside(float(xy[0]), float(xy[1])) or float(scene.clearance(xy)[0]) < radius


def rollout(cfg: SimConfig, weights: PlannerWeights) -> RolloutLog:
    tc = cfg.train
    params = tc.hlip()
    rng = np.random.default_rng(cfg.seed)
    path_params = weights.path.params(False)
    step_params = weights.step.params(False)
    log = RolloutLog(
        meta={
            "scene": cfg.scene.to_json(),
            "start": list(cfg.start),
            "goals": [list(g) for g in cfg.goals],
            "path_rate": cfg.path_rate,
            "step_rate": cfg.step_rate,
            "goal_radius": cfg.goal_radius,
            "max_sim_time": cfg.max_sim_time,
            "seed": cfg.seed,
        }
    )
    x, y, heading = cfg.start
    state = nominal_state(params, tc.step_length, tc.step_width, 0, heading, (x, y))
    goal_idx = 0

    def at_goal(com) -> bool:
        gx, gy = cfg.goals[goal_idx]
        return math.hypot(com[0] - gx, com[1] - gy) < cfg.goal_radius

    while goal_idx < len(cfg.goals) and at_goal(state.com):
        goal_idx += 1
    if goal_idx == len(cfg.goals):
        log.finish("reached")
        return log
    if _hit(cfg.scene, state.com, cfg.robot_radius):
        log.finish("collided")
        return log

    path_world = None
    depth = None
    depth_pose = None
    for t, path_due, step_due in _event_times(cfg.path_rate, cfg.step_rate, cfg.max_sim_time):
        pose = np.array([state.x.mu, state.y.mu, heading])
        rec: dict = {"t": t, "pose": pose.tolist()}
        if path_due:
            try:
                depth = render_depth(cfg.scene, pose, cfg.camera, cfg.noise_sigma, rng)
            except SceneError as err:
                rec["error"] = str(err)
                log.append(rec)
                log.finish("collided")
                return log
            depth_pose = pose
            goal_rf = robot_frame_goal(pose, cfg.goals[goal_idx])
            wp = f_path_forward(encode_depth(depth), goal_rf, path_params).data
            path_world = wp @ _rot(heading) + pose[:2]
            rec["waypoints"] = path_world.tolist()
            rec["evenness"] = evenness(path_world)
        if step_due and path_world is not None:
            R = _rot(heading)
            wp_rf = (path_world - pose[:2]) @ R.T
            steps_rf = f_step_forward(wp_rf, state_features(state, heading), step_params).data
            steps_world = steps_rf @ R + pose[:2]
            rec["steps"] = steps_world.tolist()
            rec.update(_frame_costs(path_world, steps_world, state, pose, depth, depth_pose, tc))
            new_state, sizes = execute_step(state, steps_world[0], heading, tc)
            if cfg.guard and _hit(cfg.scene, new_state.com, cfg.robot_radius):
                rec["vetoed"] = True
                rec["executed"] = None
            else:
                state = new_state
                rec["executed"] = steps_world[0].tolist()
                rec["step_size"] = sizes.tolist()
                heading = _heading_from_path(path_world, state.com, heading)
            rec["state"] = {"x": state.x.vector.tolist(), "y": state.y.vector.tolist(), "parity": state.parity}
            rec["pose"] = [state.x.mu, state.y.mu, heading]
        log.append(rec)
        if _hit(cfg.scene, state.com, cfg.robot_radius):
            log.finish("collided")
            return log
        while goal_idx < len(cfg.goals) and at_goal(state.com):
            goal_idx += 1
        if goal_idx == len(cfg.goals):
            log.finish("reached")
            return log
    log.finish("timeout")
    return log


def _frame_costs(path_world, steps_world, state: RobotState, pose, depth, depth_pose, tc: TrainConfig) -> dict:
    """Lower-level MPC costs and footstep risk of the current predictions."""
    out: dict = {}
    c, s = math.cos(pose[2]), math.sin(pose[2])
    x0 = np.array([pose[0], pose[1], c * state.x.v + s * state.y.v, pose[2]])
    try:
        out["l_path"] = track(path_world, x0, tc.mpc_weights(), max_iters=tc.mpc_max_iters).cost
    except SolverError as err:
        out["solver_error"] = str(err)
    try:
        out["l_step"] = step_sequence_track(steps_world, state, tc.hlip(), tc.q_s, tc.r_s)[1]
    except HlipError as err:
        out["solver_error"] = str(err)
    risk = build_field(depth, depth_pose, tc)
    out["risk"] = float(sum(sample_field(risk, float(px), float(py))[0] for px, py in steps_world))
    return out


# ----------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    feasibility: float
    collision_risk: float
    evenness: float
    frames: int

    def to_json(self) -> dict:
        return {"feasibility": self.feasibility, "collision_risk": self.collision_risk, "evenness": self.evenness, "frames": self.frames}


def _aggregate(rows: Sequence[tuple[float, float, float]]) -> Metrics:
    arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return Metrics(float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(arr[:, 2].mean()), len(arr))


def frame_metrics(weights: PlannerWeights, samples: Sequence[Sample], cfg: TrainConfig) -> list[tuple[str, tuple[float, float, float]]]:
    """(scene, (feasibility, risk, evenness)) for every sample whose solvers succeed."""
    out = []
    for s in samples:
        b = evaluate_losses(weights, prepare(s, cfg), cfg)
        if b.skipped:
            continue
        wp = f_path_forward(encode_depth(s.depth), s.goal, weights.path.params(False)).data
        # u_esdf's value is exactly the summed risk samples at the footsteps
        out.append((s.scene, (b.l_path + b.l_step, b.u_esdf, evenness(wp))))
    return out


def metrics_eval(source, weights: PlannerWeights | None = None, cfg: TrainConfig | None = None) -> dict[str, Metrics]:
    """Per-scene and aggregate ("all") metrics for a dataset of samples or a rollout log."""
    if isinstance(source, RolloutLog):
        name = source.meta.get("scene", {}).get("name", "") or "rollout"
        frames = [r for r in source.records if "l_path" in r and "l_step" in r]
        even = [r["evenness"] for r in source.records if "evenness" in r]
        if not frames or not even:
            raise ValueError("rollout log has no evaluated frames")
        m = Metrics(
            float(np.mean([r["l_path"] + r["l_step"] for r in frames])),
            float(np.mean([r["risk"] for r in frames])),
            float(np.mean(even)),
            len(frames),
        )
        return {name: m, "all": m}
    samples = list(source)
    if not samples:
        raise ValueError("metrics need a non-empty dataset")
    if weights is None:
        raise ValueError("dataset evaluation needs weights")
    rows = frame_metrics(weights, samples, cfg or TrainConfig())
    if not rows:
        raise ValueError("every sample failed to evaluate")
    result = {}
    for scene in sorted({r[0] for r in rows}):
        result[scene or "unnamed"] = _aggregate([v for s, v in rows if s == scene])
    result["all"] = _aggregate([v for _, v in rows])
    return result
