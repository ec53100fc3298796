"""Command line driver: simulate, calibrate, sync, track, train-filter,
refine, eval and render, handing files from stage to stage.

Exit codes: 0 success, 2 configuration or usage error, 3 degenerate
calibration motion, 4 missing upstream artifact, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from pathlib import Path

import numpy as np
import tomli_w
from pydantic import BaseModel

from . import __version__
from .config import PipelineConfig, load_pipeline_config, to_toml_dict
from .errors import (ConfigError, DegenerateMotion, HoiCapError, MissingArtifact, NonFiniteEnergy, NonFiniteLoss,
                     UntrainedDenoiser)
from .formats import load_human, load_trajectory, require, save_human, save_trajectory, write_json

log = logging.getLogger("hoicap")

EXIT_OK, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4, 5

# config sections whose keys become flags, per subcommand
SECTIONS = {
    "simulate": ("seed", "output_dir", "scene"),
    "calibrate": ("output_dir", "calibration"),
    "sync": ("output_dir", "sync"),
    "track": ("seed", "output_dir", "tracking", "sync"),
    "train-filter": ("seed", "output_dir", "scene", "diffusion"),
    "refine": ("seed", "output_dir", "diffusion"),
    "eval": ("seed", "output_dir", "evaluation"),
    "render": ("output_dir", "render"),
}


# ---------------------------------------------------------------------------
# flags mirrored from the config model
# ---------------------------------------------------------------------------

def _leaves(model: type[BaseModel], prefix=""):
    for name, f in model.model_fields.items():
        ann = f.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            yield from _leaves(ann, f"{prefix}{name}.")
        else:
            yield f"{prefix}{name}", f


def _type_hint(ann):
    origin = typing.get_origin(ann)
    if origin is typing.Literal:
        return "{" + ",".join(map(str, typing.get_args(ann))) + "}"
    if origin in (tuple, list):
        return "X,Y,..."
    if ann in (int, float, str, bool):
        return ann.__name__.upper()
    return "VALUE"


def _parse_value(text):
    """JSON where it parses, comma lists of JSON items, plain strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [_parse_value(t) for t in text.split(",")]
    return text


def _add_config_flags(p: argparse.ArgumentParser, sections):
    g = p.add_argument_group("config overrides (one flag per config key)")
    for key, f in _leaves(PipelineConfig):
        if key.split(".")[0] not in sections:
            continue
        default = f.get_default(call_default_factory=True)
        if isinstance(default, BaseModel):
            continue
        desc = f.description or key.rsplit(".", 1)[-1].replace("_", " ")
        g.add_argument(f"--{key}", dest=f"cfg:{key}", metavar=_type_hint(f.annotation),
                       default=argparse.SUPPRESS, help=f"{desc} (default: {default!r})")


def _overrides(args):
    return {k[4:]: _parse_value(v) for k, v in vars(args).items() if k.startswith("cfg:")}


def _resolve(args, config_path):
    cfg, base = load_pipeline_config(config_path, overrides=_overrides(args))
    return cfg, base


def _stage_dir(cfg: PipelineConfig, name):
    d = Path(cfg.output_dir) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_resolved(cfg: PipelineConfig, stage_dir):
    (Path(stage_dir) / "config.resolved.toml").write_text(tomli_w.dumps(to_toml_dict(cfg)))


# ---------------------------------------------------------------------------
# scene loading
# ---------------------------------------------------------------------------

def _load_scene_files(scene_dir):
    from .geometry import load_obj
    from .imu import load_imu_csv
    from .render import load_camera, load_mask
    d = Path(scene_dir)
    traj = load_trajectory(require(d / "trajectory.json"))
    imu = load_imu_csv(require(d / "imu.csv"))
    cam = load_camera(require(d / "camera.json"))
    mesh = load_obj(require(d / "object.obj"))
    mdir = require(d / "masks")
    files = sorted(mdir.glob("*.png"))
    if len(files) != len(traj):
        raise MissingArtifact(f"{mdir} holds {len(files)} masks for {len(traj)} frames")
    masks = np.stack([load_mask(f) for f in files])
    return traj, imu, cam, mesh, masks


def _prediction_dir(cfg, stage):
    out = Path(cfg.output_dir)
    if stage == "auto":
        stage = "refine" if (out / "refine" / "trajectory.json").exists() else "track"
    return stage, out / stage


def perturb_poses(traj, rotation_deg, translation_cm, seed):
    """Detector-like initial poses: fixed-size rotation and translation errors
    along random directions."""
    from .geometry import PoseSequence, axis_angle_to_matrix
    rng = np.random.default_rng([seed, 7])
    n = len(traj)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    a = rng.normal(size=(n, 3))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    rots = traj.rotations @ axis_angle_to_matrix(a * np.radians(rotation_deg))
    return PoseSequence(rots, traj.translations + 0.01 * translation_cm * d, traj.frame_interval)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    from .simulate import generate_scene, write_scene
    cfg, base = _resolve(args, args.config)
    scene = generate_scene(cfg.scene, seed=cfg.scene_seed, base_dir=base)
    out = _stage_dir(cfg, "scene")
    write_scene(scene, out)
    _write_resolved(cfg, out)
    log.info("wrote %d frames to %s", len(scene.trajectory), out)
    return EXIT_OK


def cmd_calibrate(args):
    from .imu import load_imu_csv, calibrate_spatial
    cfg, _ = _resolve(args, args.config)
    if args.stride is not None:
        cfg.calibration.stride = args.stride
    world = load_trajectory(require(args.world)).rotations
    imu = load_imu_csv(require(args.imu))
    s = cfg.calibration.stride
    if s + 2 > len(world):
        raise ConfigError(f"stride {s} needs at least {s + 2} frames, sequence has {len(world)}",
                          "calibration.stride")
    res = calibrate_spatial(world, imu.rotations, s)
    out = _stage_dir(cfg, "calibration")
    write_json(out / "calibration.json", res.to_dict())
    _write_resolved(cfg, out)
    print(f"residual: {np.degrees(res.residual):.6g} deg")
    return EXIT_OK


def cmd_sync(args):
    from .imu import detect_sync_event, load_imu_csv
    cfg, _ = _resolve(args, args.config)
    stream = load_imu_csv(require(args.imu))
    ev = detect_sync_event(stream, np.asarray(cfg.sync.gravity), cfg.sync.free_fall_ratio)
    out = _stage_dir(cfg, "sync")
    write_json(out / "sync.json", {"index": int(ev.index), "timestamp": float(ev.timestamp),
                                   "low_confidence": bool(ev.low_confidence),
                                   "free_fall": [int(x) for x in ev.free_fall] if ev.free_fall else None})
    _write_resolved(cfg, out)
    print(f"sync event at frame {ev.index}" + (" (low confidence)" if ev.low_confidence else ""))
    return EXIT_OK


def cmd_track(args):
    from .optimize import TrackProblem, track
    cfg, _ = _resolve(args, args.config)
    traj, imu, cam, mesh, masks = _load_scene_files(Path(cfg.output_dir) / "scene")
    t = cfg.tracking
    init = perturb_poses(traj, t.init_rotation_deg, t.init_translation_cm, cfg.seed)
    problem = TrackProblem(mesh, cam, masks, imu.free(np.asarray(cfg.sync.gravity)), init,
                           w_visual=t.w_visual, w_imu=t.w_imu, w_area=t.w_area, sigma=t.sigma, support=t.support,
                           learning_rate=t.learning_rate, lr_final_ratio=t.lr_final_ratio,
                           lr_rotation_scale=t.lr_rotation_scale, iterations=t.iterations,
                           feedback_iterations=t.feedback_iterations, feedback_samples=t.feedback_samples,
                           imu_mode=t.imu_mode, unobserved_area=t.unobserved_area, rotation_init=t.rotation_init,
                           seed=cfg.seed)
    out = _stage_dir(cfg, "track")
    _write_resolved(cfg, out)
    save_trajectory(init, out / "initial.json")
    try:
        res = track(problem, lambda it, e: log.debug("iteration %d energy %.6g", it, e.value))
    except NonFiniteEnergy as exc:
        write_json(out / "failure.json", {"error": str(exc), "energy_trace": exc.trace})
        raise
    save_trajectory(res.poses, out / "trajectory.json")
    write_json(out / "diagnostics.json", res.diagnostics())
    log.info("tracked %d frames in %.1f s, final energy %.6g", len(res.poses), res.seconds, res.best_trace[-1])
    return EXIT_OK


def _training_windows(cfg: PipelineConfig, base):
    from .diffusion import sliding_windows, state_from_capture
    from .simulate import generate_scene
    wins = []
    for k in range(cfg.diffusion.train_scenes):
        scene = generate_scene(cfg.scene, seed=cfg.scene_seed + 1 + k, base_dir=base)
        states = state_from_capture(scene.trajectory, scene.human, scene.imu)
        wins.append(sliding_windows(states, cfg.diffusion.window, cfg.diffusion.window_stride)[0])
    return np.concatenate(wins)


def _filter_path(cfg, ema=False):
    return Path(cfg.output_dir) / "filter" / f"{cfg.diffusion.category}{'.ema' if ema else ''}.bin"


def cmd_train_filter(args):
    from .diffusion import DiffusionSchedule, build_denoiser, save_denoiser, train_filter
    from .skeleton import load_skeleton
    cfg, base = _resolve(args, args.config)
    d = cfg.diffusion
    sched = DiffusionSchedule.from_config(d)
    windows = _training_windows(cfg, base)
    skel_path = cfg.scene.human.skeleton and str(Path(base) / cfg.scene.human.skeleton)
    model = build_denoiser(d, sched, seed=cfg.seed)
    out = _stage_dir(cfg, "filter")
    _write_resolved(cfg, out)
    try:
        res = train_filter(windows, model, sched, d, skeleton=load_skeleton(skel_path), shape=cfg.scene.human.shape,
                           tau=1.0 / cfg.scene.fps, seed=cfg.seed,
                           callback=lambda e, tr: log.info("epoch %d loss %.6g", e, tr["total"]))
    except NonFiniteLoss as exc:
        write_json(out / "failure.json", {"error": str(exc), "loss_trace": exc.trace})
        raise
    extra = {"category": d.category, "scene_kind": cfg.scene.kind, "windows": len(windows)}
    save_denoiser(res.denoiser, _filter_path(cfg), sched, extra)
    save_denoiser(res.ema, _filter_path(cfg, ema=True), sched, {**extra, "ema": True})
    write_json(out / f"{d.category}.trace.json", {"trace": res.trace})
    log.info("trained on %d windows in %.1f s", len(windows), res.seconds)
    return EXIT_OK


def cmd_refine(args):
    from .diffusion import DiffusionSchedule, capture_from_state, load_denoiser, refine, state_from_capture
    from .imu import load_imu_csv
    cfg, _ = _resolve(args, args.config)
    d = cfg.diffusion
    sched = DiffusionSchedule.from_config(d)
    model = load_denoiser(_filter_path(cfg, d.use_ema), sched)
    root = Path(cfg.output_dir)
    poses = load_trajectory(require(root / "track" / "trajectory.json"))
    skel, motion, _ = load_human(require(root / "scene" / "skeleton.json"))
    imu = load_imu_csv(require(root / "scene" / "imu.csv")).free(np.asarray(cfg.sync.gravity))
    states = state_from_capture(poses, motion, imu)
    refined = refine(states, model, sched, d.start_level, d.hands_observed, cfg.seed, d.noise_scale)
    new_poses, new_motion = capture_from_state(refined, skel, poses.frame_interval)
    out = _stage_dir(cfg, "refine")
    _write_resolved(cfg, out)
    save_trajectory(new_poses, out / "trajectory.json")
    save_human(out / "human.json", skel, new_motion, poses.frame_interval)
    return EXIT_OK


def cmd_eval(args):
    from .eval import evaluate
    from .geometry import load_obj
    cfg, _ = _resolve(args, args.config)
    root = Path(cfg.output_dir)
    stage, pred_dir = _prediction_dir(cfg, cfg.evaluation.stage)
    gt = load_trajectory(require(root / "scene" / "trajectory.json"))
    _, gt_motion, _ = load_human(require(root / "scene" / "skeleton.json"))
    pred = load_trajectory(require(pred_dir / "trajectory.json"))
    human_file = pred_dir / "human.json"
    pred_joints = load_human(human_file)[1].joint_positions if human_file.exists() else gt_motion.joint_positions
    mesh = load_obj(require(root / "scene" / "object.obj"))
    report = evaluate(pred, pred_joints, gt, gt_motion.joint_positions, mesh, cfg.evaluation, cfg.seed,
                      sequence_id=f"{root.name}/{stage}")
    out = _stage_dir(cfg, "eval")
    _write_resolved(cfg, out)
    report.write(out, cfg.evaluation.per_frame_csv)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_render(args):
    from PIL import Image
    from .render import render_soft_silhouette
    cfg, _ = _resolve(args, args.config)
    traj, _, cam, mesh, masks = _load_scene_files(Path(cfg.output_dir) / "scene")
    _, pred_dir = _prediction_dir(cfg, cfg.render.stage)
    pred = load_trajectory(require(pred_dir / "trajectory.json"))
    out = _stage_dir(cfg, "render")
    _write_resolved(cfg, out)
    for k in range(0, len(pred), cfg.render.every):
        sil = render_soft_silhouette(mesh, pred[k], cam, cfg.render.sigma)
        # red: prediction, green + blue: target, white where both agree
        rgb = np.stack([sil, masks[k], masks[k]], axis=-1)
        Image.fromarray(np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8), mode="RGB").save(
            out / f"{k:06d}.png", optimize=False)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "calibrate": cmd_calibrate, "sync": cmd_sync, "track": cmd_track,
            "train-filter": cmd_train_filter, "refine": cmd_refine, "eval": cmd_eval, "render": cmd_render}

HELP = {
    "simulate": "generate a synthetic capture into <output_dir>/scene",
    "calibrate": "solve the IMU-to-world rotation from paired rotation sequences",
    "sync": "locate the landing event of a drop in an IMU stream",
    "track": "recover object poses from masks and IMU into <output_dir>/track",
    "train-filter": "train the interaction filter on synthetic scenes into <output_dir>/filter",
    "refine": "refine tracked poses and generate hand motion into <output_dir>/refine",
    "eval": "score predictions against ground truth into <output_dir>/eval",
    "render": "draw predicted silhouettes over target masks into <output_dir>/render",
}


def build_parser():
    p = argparse.ArgumentParser(prog="hoicap", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-json", action="store_true", help="emit logs as JSON lines on stderr")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name])
        if name == "calibrate":
            sp.add_argument("world", help="trajectory JSON with world-frame rotations")
            sp.add_argument("imu", help="IMU CSV with sensor rotations")
            sp.add_argument("--stride", type=int, default=None, help="alias of --calibration.stride")
            sp.add_argument("--config", default=None, help="optional pipeline TOML")
        elif name == "sync":
            sp.add_argument("imu", help="IMU CSV")
            sp.add_argument("--config", default=None, help="optional pipeline TOML")
        else:
            sp.add_argument("config", help="pipeline TOML")
        _add_config_flags(sp, SECTIONS[name])
        sp.set_defaults(func=fn)
    return p


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "message": record.getMessage()}, sort_keys=True)


def _setup_logging(json_lines, verbose):
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(_JsonFormatter() if json_lines else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [h]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv=None):
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_json, args.verbose)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be at least 1", file=sys.stderr)
            return EXIT_CONFIG
        import torch
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateMotion as exc:
        print(f"degenerate motion: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (MissingArtifact, UntrainedDenoiser) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NonFiniteEnergy, NonFiniteLoss) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except HoiCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
