"""Command line: make-data, train, eval, rollout, render, plot.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .autodiff import AutodiffError, load_checkpoint
from .field import FieldError
from .nets import PlannerWeights, init_weights
from .scene import Scene2D, SceneError, load_dataset, load_scene, render_depth, save_sample, write_pgm16
from .scenes import SUITE, make_route, suite_dataset
from .sim import RolloutLog, SimConfig, metrics_eval, rollout
from .training import TrainConfig, WarmStartConfig, build_field, prepare, train, warm_start_path

log = logging.getLogger("bipedplan")

BUILTIN_SCENES = ("demo", "empty_corridor", "sealed") + SUITE
RUNTIME_ERRORS = (OSError, ValueError, RuntimeError, KeyError, SceneError, FieldError, AutodiffError)


def _floats(text: str, n: int, what: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n or not all(math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError(f"{what} must be {n} comma-separated finite numbers, got {text!r}")
    return vals


def _xy(text):
    return _floats(text, 2, "X,Y")


def _pose(text):
    return _floats(text, 3, "X,Y,TH")


def load_any_scene(spec: str, seed: int = 0) -> tuple[Scene2D, dict]:
    """A scene JSON path, or a builtin name (demo, empty_corridor, sealed, corridor, ...)."""
    if Path(spec).is_file():
        return load_scene(spec)
    if spec == "demo":
        with resources.as_file(resources.files("bipedplan") / "data" / "demo_scene.json") as p:
            return load_scene(p)
    if spec in BUILTIN_SCENES:
        route = make_route(spec, seed)
        return route.scene, {"start": list(route.start), "goal": list(route.goal)}
    raise SceneError(f"no scene file or builtin named {spec!r} (builtins: {', '.join(BUILTIN_SCENES)})")


def load_weights(path) -> tuple[PlannerWeights, dict]:
    _, meta = load_checkpoint(path)
    return PlannerWeights.load(path), meta


def _config(args, meta: dict | None = None) -> TrainConfig:
    if getattr(args, "config", None):
        return TrainConfig.load(args.config)
    if meta and "config" in meta:
        return TrainConfig.from_json(meta["config"])
    return TrainConfig()


def cmd_make_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = suite_dataset(args.seed, args.per_scene)
    for i, s in enumerate(samples):
        save_sample(out / f"{i:04d}_{s.scene}", s)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    data = load_dataset(args.data)
    weights = load_weights(args.init)[0] if args.init else init_weights(cfg.seed, cfg.k, cfg.m)
    if args.warm_start:
        prepared = [prepare(s, cfg) for s in data]
        weights, losses = warm_start_path(prepared, cfg, weights, WarmStartConfig(iterations=args.warm_start, seed=cfg.seed))
        log.info("warm start: fit %.5f -> %.5f", float(np.mean(losses[:50])), float(np.mean(losses[-50:])))
    weights, history = train(data, cfg, weights, checkpoint=args.out, history_path=args.history, iterations=args.iterations)
    done = [h for h in history if not h["skipped"]]
    if done:
        print(f"{len(history)} iterations, u_total {done[0]['u_total']:.6f} -> {done[-1]['u_total']:.6f}")
    return 0


def cmd_eval(args) -> int:
    weights, meta = load_weights(args.ckpt)
    cfg = _config(args, meta)
    result = metrics_eval(load_dataset(args.data), weights, cfg)
    record = {scene: m.to_json() for scene, m in result.items()}
    text = json.dumps(record, indent=2, sort_keys=True) + "\n"
    if args.json:
        Path(args.json).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_rollout(args) -> int:
    weights, meta = (load_weights(args.ckpt) if args.ckpt else (init_weights(0), {}))
    cfg = _config(args, meta)
    scene, extra = load_any_scene(args.scene, args.scene_seed)
    goals = tuple(args.goal) if args.goal else ((tuple(extra["goal"]),) if "goal" in extra else None)
    if not goals:
        raise ValueError("no goal: pass --goal X,Y or use a scene file with a 'goal' entry")
    start = args.start or tuple(extra.get("start", (0.0, 0.0, 0.0)))
    sim = SimConfig(scene, start, goals, max_sim_time=args.max_time, guard=args.guard, seed=args.seed, noise_sigma=args.noise, train=cfg)
    result = rollout(sim, weights)
    result.save(args.log)
    print(f"outcome {result.outcome} after {result.executed_steps} steps ({len(result.records)} ticks)")
    return 0


def cmd_render(args) -> int:
    scene, _ = load_any_scene(args.scene, args.scene_seed)
    frame = render_depth(scene, args.pose)
    units = np.rint(frame.values / args.scale)
    if units.max() > 65535:
        raise ValueError(f"depth overflows 16 bits at scale {args.scale}")
    write_pgm16(args.out, units.astype(np.uint16))
    return 0


def cmd_plot(args) -> int:
    result = RolloutLog.load(args.log)
    Path(args.svg).write_text(rollout_svg(result))
    return 0


# ----------------------------------------------------------------------------
# SVG overlay


def rollout_svg(result: RolloutLog, px_per_m: float = 80.0) -> str:
    """Static overlay: occupancy at the start frame, obstacles, last path, footsteps, trajectory, goals."""
    scene = Scene2D.from_json(result.meta["scene"])
    xmin, ymin, xmax, ymax = scene.bounds
    width, height = (xmax - xmin) * px_per_m, (ymax - ymin) * px_per_m

    def pt(x, y):
        return (x - xmin) * px_per_m, (ymax - y) * px_per_m

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" viewBox="0 0 {width:.2f} {height:.2f}">',
        f'<rect x="0" y="0" width="{width:.2f}" height="{height:.2f}" fill="white" stroke="black"/>',
    ]
    start = result.meta.get("start", [0.0, 0.0, 0.0])
    if scene.inside(start[0], start[1]):
        cfg = TrainConfig()
        frame = render_depth(scene, start)
        field = build_field(frame, start, cfg)
        peak = float(field.values.max())
        res = field.resolution
        for r, c in zip(*np.nonzero(field.values > 0.02 * peak)) if peak > 0 else ():
            x, y = pt(field.origin[0] + c * res, field.origin[1] + (r + 1) * res)
            op = min(1.0, field.values[r, c] / peak)
            parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{res * px_per_m:.2f}" height="{res * px_per_m:.2f}" fill="orange" fill-opacity="{0.6 * op:.3f}"/>')
    for ob in result.meta["scene"]["obstacles"]:
        if ob["type"] == "disk":
            cx, cy = pt(*ob["center"])
            parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{ob["radius"] * px_per_m:.2f}" fill="gray"/>')
        else:
            x0, y0 = pt(ob["min"][0], ob["max"][1])
            w = (ob["max"][0] - ob["min"][0]) * px_per_m
            h = (ob["max"][1] - ob["min"][1]) * px_per_m
            parts.append(f'<rect x="{x0:.2f}" y="{y0:.2f}" width="{w:.2f}" height="{h:.2f}" fill="gray"/>')
    paths = [r["waypoints"] for r in result.records if "waypoints" in r]
    if paths:
        pts = " ".join("%.2f,%.2f" % pt(*p) for p in paths[-1])
        parts.append(f'<polyline points="{pts}" fill="none" stroke="blue" stroke-width="2"/>')
    planned = [r["steps"] for r in result.records if "steps" in r]
    if planned:
        for x, y in planned[-1]:
            cx, cy = pt(x, y)
            parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3" fill="none" stroke="purple"/>')
    for i, r in enumerate(r for r in result.records if r.get("executed") is not None):
        cx, cy = pt(*r["executed"])
        parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3" fill="{"green" if i % 2 == 0 else "red"}"/>')
    traj = result.trajectory()
    if len(traj):
        pts = " ".join("%.2f,%.2f" % pt(x, y) for x, y, _ in traj)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="1.5"/>')
    for g in result.meta.get("goals", []):
        cx, cy = pt(*g)
        r = result.meta.get("goal_radius", 0.25) * px_per_m
        parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{r:.2f}" fill="none" stroke="green" stroke-dasharray="4 2"/>')
    parts.append(f'<text x="6" y="16" font-family="monospace" font-size="12">outcome: {result.outcome}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bipedplan", description="Train and evaluate learned path and footstep planners.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="write a synthetic dataset (PGM + JSON sidecars)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--per-scene", type=int, default=8)
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train", help="bilevel training")
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--history", help="loss history (JSON lines)")
    s.add_argument("--iterations", type=int, help="exact number of updates (default: config epochs)")
    s.add_argument("--warm-start", type=int, default=0, metavar="N", help="pre-fit the path net on N teacher-path iterations")
    s.add_argument("--init", help="start from this checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="feasibility / risk / evenness per scene")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--json", help="output file (default stdout)")
    s.add_argument("--config")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rollout", help="closed-loop walking simulation")
    s.add_argument("--ckpt", help="checkpoint (default: untrained weights, seed 0)")
    s.add_argument("--scene", required=True, help="scene JSON or builtin name")
    s.add_argument("--scene-seed", type=int, default=0)
    s.add_argument("--goal", type=_xy, action="append", help="X,Y (repeatable)")
    s.add_argument("--start", type=_pose, help="X,Y,TH")
    s.add_argument("--log", required=True)
    s.add_argument("--max-time", type=float, default=30.0)
    s.add_argument("--guard", action="store_true", help="veto steps that would collide")
    s.add_argument("--noise", type=float, default=0.0, help="multiplicative depth noise sigma")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.set_defaults(func=cmd_rollout)

    s = sub.add_parser("render", help="render a depth frame to 16-bit PGM")
    s.add_argument("--scene", required=True)
    s.add_argument("--scene-seed", type=int, default=0)
    s.add_argument("--pose", type=_pose, required=True, help="X,Y,TH")
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=float, default=0.001, help="metres per PGM unit")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("plot", help="SVG overlay of a rollout log")
    s.add_argument("--log", required=True)
    s.add_argument("--svg", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except RUNTIME_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
