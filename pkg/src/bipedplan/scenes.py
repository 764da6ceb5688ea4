"""Procedural indoor-like scenes (corridor, corner, clutter, gap) and dataset synthesis."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import Box, CameraModel, Disk, Sample, Scene2D, render_depth

SUITE = ("corridor", "corner", "clutter", "gap")


@dataclass(frozen=True)
class Route:
    scene: Scene2D
    start: tuple[float, float, float]
    goal: tuple[float, float]
    via: tuple = ()  # intermediate route points (e.g. a corridor bend)

    def polyline(self) -> np.ndarray:
        return np.array([self.start[:2], *self.via, self.goal], dtype=np.float64)


def _wall(x0, y0, x1, y1, height=1.2) -> Box:
    return Box((min(x0, x1), min(y0, y1)), (max(x0, x1), max(y0, y1)), height)


def corridor(rng: np.random.Generator, clutter: bool = True, half_width: float | None = None) -> Route:
    hw = half_width if half_width is not None else rng.uniform(0.8, 1.1)
    obs = [_wall(-2.0, hw, 9.0, hw + 0.1), _wall(-2.0, -hw - 0.1, 9.0, -hw)]
    if clutter:
        for x in rng.uniform(1.5, 6.0, size=2):
            side = rng.choice([-1.0, 1.0])
            r = rng.uniform(0.12, 0.2)
            obs.append(Disk((float(x), float(side * (hw - r - rng.uniform(0.0, 0.15)))), float(r), 0.6))
    goal = (float(rng.uniform(3.5, 5.0)), float(rng.uniform(-0.2, 0.2)))
    return Route(Scene2D(tuple(obs), (-2.5, -hw - 0.5, 10.0, hw + 0.5), "corridor"), (0.0, 0.0, 0.0), goal)


def corner(rng: np.random.Generator) -> Route:
    hw = rng.uniform(0.8, 1.0)
    turn = rng.uniform(2.2, 3.0)
    obs = [
        _wall(-2.0, -hw - 0.1, turn + hw + 0.1, -hw),  # outer wall along x
        _wall(turn + hw, -hw - 0.1, turn + hw + 0.1, 6.0),  # outer wall along y
        _wall(-2.0, hw, turn - hw, hw + 0.1),  # inner wall along x
        _wall(turn - hw - 0.1, hw, turn - hw, 6.0),  # inner wall along y
    ]
    goal = (float(turn), float(rng.uniform(2.5, 3.5)))
    return Route(Scene2D(tuple(obs), (-2.5, -hw - 0.5, turn + hw + 0.5, 6.5), "corner"), (0.0, 0.0, 0.0), goal, ((float(turn), 0.0),))


def clutter(rng: np.random.Generator) -> Route:
    obs = []
    for _ in range(int(rng.integers(4, 7))):
        for _ in range(50):
            c = (float(rng.uniform(1.0, 5.0)), float(rng.uniform(-1.8, 1.8)))
            r = float(rng.uniform(0.15, 0.35))
            if math.hypot(*c) > r + 0.8 and all(math.hypot(c[0] - o.center[0], c[1] - o.center[1]) > r + o.radius + 0.5 for o in obs):
                obs.append(Disk(c, r, float(rng.uniform(0.4, 1.0))))
                break
    goal = (float(rng.uniform(4.0, 5.5)), float(rng.uniform(-0.8, 0.8)))
    return Route(Scene2D(tuple(obs), (-2.5, -3.0, 8.0, 3.0), "clutter"), (0.0, 0.0, 0.0), goal)


def gap(rng: np.random.Generator) -> Route:
    x = rng.uniform(1.8, 2.6)
    center = rng.uniform(-0.6, 0.6)
    half = rng.uniform(0.4, 0.55)
    obs = [_wall(x, center + half, x + 0.15, 3.0), _wall(x, -3.0, x + 0.15, center - half)]
    goal = (float(x + rng.uniform(1.5, 2.5)), float(center + rng.uniform(-0.3, 0.3)))
    return Route(Scene2D(tuple(obs), (-2.5, -3.0, 8.0, 3.0), "gap"), (0.0, 0.0, 0.0), goal)


def empty_corridor(half_width: float = 1.0) -> Route:
    return Route(
        Scene2D((_wall(-2.0, half_width, 9.0, half_width + 0.1), _wall(-2.0, -half_width - 0.1, 9.0, -half_width)), (-2.5, -half_width - 0.5, 10.0, half_width + 0.5), "empty_corridor"),
        (0.0, 0.0, 0.0),
        (3.0, 0.0),
    )


def sealed_goal() -> Route:
    """Goal boxed in by walls on every side."""
    obs = (_wall(1.5, -1.5, 1.7, 1.5), _wall(1.5, 1.5, 4.5, 1.7), _wall(1.5, -1.7, 4.5, -1.5), _wall(4.3, -1.5, 4.5, 1.5))
    return Route(Scene2D(obs, (-2.5, -3.0, 6.0, 3.0), "sealed"), (0.0, 0.0, 0.0), (3.0, 0.0))


BUILDERS = {"corridor": corridor, "corner": corner, "clutter": clutter, "gap": gap}


def make_route(name: str, seed: int) -> Route:
    if name == "empty_corridor":
        return empty_corridor()
    if name == "sealed":
        return sealed_goal()
    return BUILDERS[name](np.random.default_rng(seed))


def robot_frame_goal(pose, goal) -> np.ndarray:
    x, y, th = pose
    dx, dy = goal[0] - x, goal[1] - y
    c, s = math.cos(th), math.sin(th)
    return np.array([c * dx + s * dy, -s * dx + c * dy])


def route_samples(route: Route, n: int, rng: np.random.Generator, camera: CameraModel | None = None, clearance: float = 0.35) -> list[Sample]:
    """Frames at random collision-free poses along the first 60% of ``route``, heading along it."""
    camera = camera or CameraModel()
    line = route.polyline()
    seg = np.diff(line, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > 1000 * n:
            raise RuntimeError(f"could not place {n} poses in scene {route.scene.name}")
        arc = rng.uniform(0.0, 0.6) * cum[-1]
        j = min(int(np.searchsorted(cum, arc, side="right")) - 1, len(seg) - 1)
        base = line[j] + (arc - cum[j]) / (cum[j + 1] - cum[j]) * seg[j]
        x, y = base + rng.normal(0, 0.15, size=2)
        if not route.scene.inside(x, y) or route.scene.clearance([x, y])[0] < clearance:
            continue
        if math.hypot(route.goal[0] - x, route.goal[1] - y) < 1.0:
            continue
        heading = math.atan2(seg[j, 1], seg[j, 0]) + rng.uniform(-0.35, 0.35)
        pose = (float(x), float(y), heading)
        depth = render_depth(route.scene, pose, camera)
        out.append(Sample(depth, robot_frame_goal(pose, route.goal), np.array(pose), int(rng.integers(2)), route.scene.name))
    return out


def suite_dataset(seed: int, per_scene: int, names=SUITE, camera: CameraModel | None = None) -> list[Sample]:
    """``per_scene`` frames from one randomized instance of each named scene."""
    rng = np.random.default_rng(seed)
    data = []
    for i, name in enumerate(names):
        route = make_route(name, seed * 1000 + i)
        data += route_samples(route, per_scene, rng, camera)
    return data
