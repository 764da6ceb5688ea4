"""Synthetic 2D scenes, raycast depth rendering and depth-to-points projection.

Conventions: world and robot frames are x forward, y left, z up.  The camera
sits ``mount_height`` above the robot origin, pitched down by ``pitch`` rad.
Pixel (u, v) looks along camera ray ((u - cx)/fx, (v - cy)/fy, 1) with camera
x right, y down, z along the optical axis.  Depth values are ranges along the
ray, with ``max_range`` meaning "no return".
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_VERSION = 1
SCENE_VERSION = 1


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Disk:
    center: tuple[float, float]
    radius: float
    height: float

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0:
            raise SceneError(f"disk needs radius > 0 and height > 0, got {self.radius}, {self.height}")

    def distance(self, xy: np.ndarray) -> np.ndarray:
        """Signed distance from planar points to the footprint boundary (negative inside)."""
        return np.hypot(xy[..., 0] - self.center[0], xy[..., 1] - self.center[1]) - self.radius

    def shifted(self, dx, dy) -> "Disk":
        return Disk((self.center[0] + dx, self.center[1] + dy), self.radius, self.height)

    def to_json(self):
        return {"type": "disk", "center": list(self.center), "radius": self.radius, "height": self.height}


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float]
    hi: tuple[float, float]
    height: float

    def __post_init__(self):
        if not (self.lo[0] < self.hi[0] and self.lo[1] < self.hi[1]) or self.height <= 0:
            raise SceneError(f"box needs min < max per axis and height > 0, got {self.lo}, {self.hi}")

    def distance(self, xy: np.ndarray) -> np.ndarray:
        c = (np.asarray(self.lo) + np.asarray(self.hi)) / 2
        half = (np.asarray(self.hi) - np.asarray(self.lo)) / 2
        q = np.abs(xy - c) - half
        outside = np.hypot(np.maximum(q[..., 0], 0), np.maximum(q[..., 1], 0))
        inside = np.minimum(np.maximum(q[..., 0], q[..., 1]), 0)
        return outside + inside

    def shifted(self, dx, dy) -> "Box":
        return Box((self.lo[0] + dx, self.lo[1] + dy), (self.hi[0] + dx, self.hi[1] + dy), self.height)

    def to_json(self):
        return {"type": "box", "min": list(self.lo), "max": list(self.hi), "height": self.height}


@dataclass(frozen=True)
class Scene2D:
    obstacles: tuple = ()
    bounds: tuple[float, float, float, float] = (-10.0, -10.0, 10.0, 10.0)
    name: str = ""

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmin < xmax and ymin < ymax):
            raise SceneError(f"degenerate scene bounds {self.bounds}")

    def inside(self, x: float, y: float) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin < x < xmax and ymin < y < ymax

    def clearance(self, xy) -> np.ndarray:
        """Planar distance to the nearest obstacle footprint or bounds wall."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        xmin, ymin, xmax, ymax = self.bounds
        d = np.minimum.reduce([xy[:, 0] - xmin, xmax - xy[:, 0], xy[:, 1] - ymin, ymax - xy[:, 1]])
        for ob in self.obstacles:
            d = np.minimum(d, ob.distance(xy))
        return d

    def shifted(self, dx: float, dy: float) -> "Scene2D":
        xmin, ymin, xmax, ymax = self.bounds
        return Scene2D(tuple(o.shifted(dx, dy) for o in self.obstacles), (xmin + dx, ymin + dy, xmax + dx, ymax + dy), self.name)

    def to_json(self) -> dict:
        return {
            "version": SCENE_VERSION,
            "name": self.name,
            "bounds": list(self.bounds),
            "obstacles": [o.to_json() for o in self.obstacles],
        }

    @classmethod
    def from_json(cls, record: dict) -> "Scene2D":
        obstacles = []
        for ob in record.get("obstacles", []):
            kind = ob.get("type")
            if kind == "disk":
                obstacles.append(Disk(tuple(ob["center"]), float(ob["radius"]), float(ob["height"])))
            elif kind == "box":
                obstacles.append(Box(tuple(ob["min"]), tuple(ob["max"]), float(ob["height"])))
            else:
                raise SceneError(f"unknown obstacle type {kind!r}")
        return cls(tuple(obstacles), tuple(float(b) for b in record["bounds"]), record.get("name", ""))


def load_scene(path) -> tuple[Scene2D, dict]:
    """Read a scene JSON file.  Returns the scene and the raw record (start/goal extras)."""
    record = json.loads(Path(path).read_text())
    return Scene2D.from_json(record), record


def save_scene(path, scene: Scene2D, **extra) -> None:
    record = scene.to_json()
    record.update({k: list(v) if isinstance(v, (tuple, np.ndarray)) else v for k, v in extra.items()})
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class CameraModel:
    width: int = 128
    height: int = 64
    fx: float = 64.0 / math.tan(math.radians(87.0) / 2)
    fy: float = 64.0 / math.tan(math.radians(87.0) / 2)
    cx: float = 63.5
    cy: float = 31.5
    mount_height: float = 0.6
    pitch: float = 0.35
    max_range: float = 6.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise SceneError("principal point must lie inside the image")
        if self.max_range <= 0:
            raise SceneError("max_range must be positive")

    @classmethod
    def with_fov(cls, width: int, height: int, hfov_deg: float = 87.0, **kw) -> "CameraModel":
        f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
        return cls(width, height, f, f, (width - 1) / 2, (height - 1) / 2, **kw)

    def body_rays(self) -> np.ndarray:
        """Unit ray directions per pixel in the (unrotated) robot frame, shape (H, W, 3)."""
        u, v = np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))
        xn = (u - self.cx) / self.fx
        yn = (v - self.cy) / self.fy
        fwd, left, up = np.ones_like(xn), -xn, -yn
        c, s = math.cos(self.pitch), math.sin(self.pitch)
        rays = np.stack([fwd * c + up * s, left, -fwd * s + up * c], axis=-1)
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, record: dict) -> "CameraModel":
        return cls(**{k: record[k] for k in cls.__dataclass_fields__ if k in record})


@dataclass
class DepthFrame:
    camera: CameraModel
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.camera.height, self.camera.width):
            raise SceneError(f"depth shape {self.values.shape} does not match camera {self.camera.height}x{self.camera.width}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0) or np.any(self.values > self.camera.max_range):
            raise SceneError("depth values must be finite and in (0, max_range]")

    @property
    def sentinel(self) -> np.ndarray:
        return self.values >= self.camera.max_range


def _world_rays(camera: CameraModel, pose) -> tuple[np.ndarray, np.ndarray]:
    x, y, th = (float(p) for p in pose)
    body = camera.body_rays()
    c, s = math.cos(th), math.sin(th)
    world = np.empty_like(body)
    world[..., 0] = c * body[..., 0] - s * body[..., 1]
    world[..., 1] = s * body[..., 0] + c * body[..., 1]
    world[..., 2] = body[..., 2]
    return np.array([x, y, camera.mount_height]), world


def _hit_disk(o, d, disk: Disk):
    ox, oy = o[0] - disk.center[0], o[1] - disk.center[1]
    a = d[..., 0] ** 2 + d[..., 1] ** 2
    b = 2 * (ox * d[..., 0] + oy * d[..., 1])
    cc = ox * ox + oy * oy - disk.radius**2
    disc = b * b - 4 * a * cc
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    z = o[2] + t * d[..., 2]
    ok = (disc >= 0) & (a > 1e-15) & (t > 0) & (z >= 0) & (z <= disk.height)
    side = np.where(ok, t, np.inf)
    with np.errstate(invalid="ignore", divide="ignore"):
        tt = (disk.height - o[2]) / d[..., 2]
        px, py = ox + tt * d[..., 0], oy + tt * d[..., 1]
    top_ok = (o[2] > disk.height) & (tt > 0) & (px * px + py * py <= disk.radius**2)
    return np.minimum(side, np.where(top_ok, tt, np.inf))


def _slab(o, d, lo, hi):
    with np.errstate(invalid="ignore", divide="ignore"):
        inv = [1.0 / d[..., 0], 1.0 / d[..., 1]]
        t0 = [(lo[i] - o[i]) * inv[i] for i in range(2)]
        t1 = [(hi[i] - o[i]) * inv[i] for i in range(2)]
    t_near = np.maximum(np.minimum(t0[0], t1[0]), np.minimum(t0[1], t1[1]))
    t_far = np.minimum(np.maximum(t0[0], t1[0]), np.maximum(t0[1], t1[1]))
    return np.nan_to_num(t_near, nan=-np.inf), np.nan_to_num(t_far, nan=np.inf)


def _hit_box(o, d, box: Box):
    t_near, t_far = _slab(o, d, box.lo, box.hi)
    z = o[2] + t_near * d[..., 2]
    ok = (t_near <= t_far) & (t_near > 0) & (z >= 0) & (z <= box.height)
    side = np.where(ok, t_near, np.inf)
    with np.errstate(invalid="ignore", divide="ignore"):
        tt = (box.height - o[2]) / d[..., 2]
        px, py = o[0] + tt * d[..., 0], o[1] + tt * d[..., 1]
    top_ok = (o[2] > box.height) & (tt > 0) & (px >= box.lo[0]) & (px <= box.hi[0]) & (py >= box.lo[1]) & (py <= box.hi[1])
    return np.minimum(side, np.where(top_ok, tt, np.inf))


def _hit_bounds(o, d, bounds):
    xmin, ymin, xmax, ymax = bounds
    _, t_far = _slab(o, d, (xmin, ymin), (xmax, ymax))
    return np.where(np.isfinite(t_far) & (t_far > 0), t_far, np.inf)


def render_depth(scene: Scene2D, pose, camera: CameraModel | None = None, noise_sigma: float = 0.0, rng=None) -> DepthFrame:
    """Raycast a range image from ``pose`` = (x, y, heading)."""
    camera = camera or CameraModel()
    if not scene.inside(float(pose[0]), float(pose[1])):
        raise SceneError(f"pose {tuple(pose)} lies outside scene bounds {scene.bounds}")
    o, d = _world_rays(camera, pose)
    t = np.full(d.shape[:2], np.inf)
    with np.errstate(invalid="ignore", divide="ignore"):
        ground = np.where(d[..., 2] < 0, -o[2] / d[..., 2], np.inf)
    t = np.minimum(t, ground)
    for ob in scene.obstacles:
        t = np.minimum(t, _hit_disk(o, d, ob) if isinstance(ob, Disk) else _hit_box(o, d, ob))
    t = np.minimum(t, _hit_bounds(o, d, scene.bounds))
    values = np.minimum(t, camera.max_range)
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        hit = values < camera.max_range
        noisy = values * (1.0 + noise_sigma * rng.standard_normal(values.shape))
        values = np.where(hit, np.clip(noisy, 1e-3, camera.max_range), values)
    return DepthFrame(camera, values)


def project(depth: DepthFrame, pose) -> np.ndarray:
    """World-frame 3D points (n, 3) for every pixel that has a return."""
    o, d = _world_rays(depth.camera, pose)
    keep = ~depth.sentinel
    return o + depth.values[keep][:, None] * d[keep]


@dataclass
class Sample:
    depth: DepthFrame
    goal: np.ndarray
    pose: np.ndarray
    stance_parity: int = 0
    scene: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=np.float64).reshape(2)
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.goal)):
            raise SceneError("goal must be finite")
        if self.stance_parity not in (0, 1):
            raise SceneError(f"stance parity must be 0 or 1, got {self.stance_parity}")


def write_pgm16(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint16:
        raise SceneError("PGM writer expects uint16 data")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(image.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5":
        raise SceneError(f"{path}: not a binary PGM (magic {magic!r})")
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.uint16)


def save_sample(path, sample: Sample, scale: float = 0.001) -> None:
    """Write ``<path>.pgm`` (16-bit depth, ``scale`` m per unit) and ``<path>.json`` sidecar."""
    if scale <= 0:
        raise SceneError("depth scale must be positive")
    path = Path(path).with_suffix(".pgm")
    units = np.rint(sample.depth.values / scale)
    if units.max() > 65535:
        raise SceneError(f"depth {sample.depth.values.max()} m overflows 16 bits at scale {scale}")
    write_pgm16(path, units.astype(np.uint16))
    sidecar = {
        "version": SAMPLE_VERSION,
        "depth_scale": scale,
        "camera": sample.depth.camera.to_json(),
        "goal": sample.goal.tolist(),
        "pose": sample.pose.tolist(),
        "stance_parity": int(sample.stance_parity),
        "scene": sample.scene,
        "meta": sample.meta,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_sample(path) -> Sample:
    path = Path(path).with_suffix(".pgm")
    meta_path = path.with_suffix(".json")
    if not meta_path.exists():
        raise SceneError(f"{path}: missing metadata (expected sidecar {meta_path.name})")
    meta = json.loads(meta_path.read_text())
    scale = float(meta.get("depth_scale", 0.001))
    if scale <= 0:
        raise SceneError(f"{meta_path}: depth scale must be positive, got {scale}")
    camera = CameraModel.from_json(meta["camera"])
    units = read_pgm16(path)
    if units.shape != (camera.height, camera.width):
        raise SceneError(f"{path}: image {units.shape} does not match camera {camera.height}x{camera.width}")
    values = units.astype(np.float64) * scale
    values = np.where(units >= np.rint(camera.max_range / scale), camera.max_range, values)
    values = np.clip(values, scale, camera.max_range)
    return Sample(
        DepthFrame(camera, values),
        meta["goal"],
        meta["pose"],
        int(meta["stance_parity"]),
        meta.get("scene", ""),
        meta.get("meta", {}),
    )


def load_dataset(directory) -> list[Sample]:
    paths = sorted(Path(directory).glob("*.pgm"))
    if not paths:
        raise SceneError(f"{directory}: no samples found")
    return [load_sample(p) for p in paths]
