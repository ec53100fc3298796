"""Synthetic capture generator: object trajectories, a skeleton carrying the
object, target masks with occlusion and boundary noise, and IMU streams."""
from __future__ import annotations

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import distance_transform_edt
from scipy.spatial.transform import Rotation, Slerp

from .config import CameraConfig, SceneConfig, to_toml_dict, validate
from .errors import ConfigError
from .formats import HumanMotion, save_human, save_trajectory, write_json
from .geometry import (PoseSequence, TriMesh, axis_angle_to_matrix, box_mesh,
                       egg_mesh, load_obj, save_obj)
from .imu import ImuNoise, ImuStream, save_imu_csv, simulate_imu
from .render import Camera, rasterize_hard, render_soft_silhouette, save_camera, save_mask
from .skeleton import SkeletonModel, forward_kinematics, load_skeleton


def camera_from_config(c: CameraConfig) -> Camera:
    pos = np.asarray(c.position, float)
    z = np.asarray(c.look_at, float) - pos
    if np.linalg.norm(z) < 1e-9:
        raise ConfigError("look_at coincides with position", "scene.camera.look_at")
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, 0.0, 1.0])
    if np.linalg.norm(x) < 1e-9:
        raise ConfigError("optical axis is vertical", "scene.camera.look_at")
    x /= np.linalg.norm(x)
    rot = np.stack([x, np.cross(z, x), z])
    return Camera.simple(c.focal, c.height, c.width, rot, -rot @ pos)


def load_scene_mesh(spec: str, base_dir=None) -> TriMesh:
    if spec == "builtin:egg":
        return egg_mesh()
    if spec == "builtin:box":
        return box_mesh((0.16, 0.08, 0.06))
    path = Path(spec)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    if not path.exists():
        raise ConfigError(f"mesh file {path} not found", "scene.mesh")
    return load_obj(path)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def object_trajectory(cfg: SceneConfig):
    """Rotations (T, 3, 3), translations (T, 3) and exact accelerations (T, 3)."""
    tr = cfg.trajectory
    n = cfg.n_frames
    t = np.arange(n) / cfg.fps
    c = np.asarray(tr.center, float)
    r0 = axis_angle_to_matrix(np.asarray(tr.initial_rotation, float))
    zeros = np.zeros((n, 3))
    if cfg.kind == "static":
        return np.repeat(r0[None], n, 0), np.repeat(c[None], n, 0), zeros
    if cfg.kind == "linear":
        v = np.asarray(tr.velocity, float)
        return np.repeat(r0[None], n, 0), c + np.outer(t - 0.5 * cfg.duration, v), zeros
    if cfg.kind == "circular":
        th = tr.angular_rate * t
        u = np.stack([np.cos(th), np.zeros(n), np.sin(th)], axis=1)
        spin = axis_angle_to_matrix(np.outer(tr.spin_rate * t, [0.0, 1.0, 0.0]))
        return spin @ r0, c + tr.radius * u, -tr.angular_rate ** 2 * tr.radius * u
    if cfg.kind == "tumbling":
        a, b = tr.tumble_rates
        rz = axis_angle_to_matrix(np.outer(a * t, [0.0, 0.0, 1.0]))
        rx = axis_angle_to_matrix(np.outer(b * t, [1.0, 0.0, 0.0]))
        w = 2 * np.pi * tr.frequency
        amp = np.asarray(tr.amplitude, float)
        ph = np.stack([w * t, w * t + np.pi / 3, 2 * w * t], axis=1)
        rate2 = np.array([w, w, 2 * w]) ** 2
        return rz @ rx @ r0, c + amp * np.sin(ph), -rate2 * amp * np.sin(ph)
    ks = tr.keyframes
    kt = np.array([k.time for k in ks])
    spline = CubicSpline(kt, np.array([k.translation for k in ks], float), bc_type="natural")
    slerp = Slerp(kt, Rotation.from_rotvec(np.array([k.rotation for k in ks], float)))
    return slerp(t).as_matrix(), spline(t), spline(t, 2)


# ---------------------------------------------------------------------------
# human
# ---------------------------------------------------------------------------

# (joint, rotation axis, frequency Hz); phases are drawn from the scene seed
_SCRIPT = [("spine1", (1, 0, 0), 0.25), ("spine2", (0, 1, 0), 0.2), ("neck", (0, 0, 1), 0.3),
           ("left_shoulder", (0, 1, 0), 0.35), ("left_elbow", (0, 0, 1), 0.4),
           ("right_shoulder", (0, 1, 0), 0.3), ("right_elbow", (0, 0, 1), 0.45),
           ("left_hip", (1, 0, 0), 0.3), ("right_hip", (1, 0, 0), 0.3),
           ("left_knee", (1, 0, 0), 0.3), ("right_knee", (1, 0, 0), 0.3)]
_FINGER_FREQ = 0.5


def human_motion(skel: SkeletonModel, obj_rots, obj_trans, fps, attach_joint, attach_offset,
                 amplitude_deg, rng) -> HumanMotion:
    """Scripted joint curves with the attachment joint holding the object.

    The attachment joint's local rotation is solved so its global rotation
    equals the object's, and the root translation is solved so the object
    sits at ``attach_offset`` in that joint's frame.
    """
    n = len(obj_trans)
    t = np.arange(n) / fps
    amp = np.radians(amplitude_deg)
    local = np.tile(np.eye(3), (n, skel.n_joints, 1, 1))
    for name, axis, freq in _SCRIPT:
        if name in skel.names:
            ang = amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
            local[:, skel.index(name)] = axis_angle_to_matrix(np.outer(ang, axis))
    for j, name in enumerate(skel.names):
        if any(f in name for f in ("index", "middle", "ring", "pinky", "thumb")):
            ang = 0.5 * amp * (1 + np.sin(2 * np.pi * _FINGER_FREQ * t + rng.uniform(0, 2 * np.pi)))
            local[:, j] = axis_angle_to_matrix(np.outer(ang, [0.0, 0.0, 1.0]))
    try:
        aj = skel.index(attach_joint)
    except KeyError as exc:
        raise ConfigError(str(exc), "scene.human.attach_joint") from None
    eye = np.tile(np.eye(3), (n, 1, 1))
    zero = np.zeros((n, 3))
    pos, grot = forward_kinematics(skel, (eye, zero), local, return_rotations=True)
    parent = skel.parents[aj]
    parent_rot = grot[:, parent] if parent >= 0 else eye
    local[:, aj] = np.swapaxes(parent_rot, 1, 2) @ obj_rots
    off = np.asarray(attach_offset, float)
    root_t = obj_trans - pos[:, aj] - obj_rots @ off
    joints = forward_kinematics(skel, (eye, root_t), local)
    return HumanMotion(eye, root_t, local, joints)


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def boundary_noise(mask, band_px, prob, rng):
    """Flip pixels whose distance to the mask boundary is below ``band_px``
    with probability ``prob``."""
    hard = mask >= 0.5
    if band_px <= 0 or prob <= 0 or hard.all() or not hard.any():
        # draw anyway so later frames see the same random stream
        rng.random(mask.shape)
        return mask
    dist = np.where(hard, distance_transform_edt(hard), distance_transform_edt(~hard))
    flip = (dist <= band_px) & (rng.random(mask.shape) < prob)
    out = mask.copy()
    out[flip] = 1.0 - out[flip]
    return out


# ---------------------------------------------------------------------------
# scene
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    config: SceneConfig
    mesh: TriMesh
    camera: Camera
    trajectory: PoseSequence
    accelerations: np.ndarray       # exact free accelerations (T, 3)
    imu: ImuStream
    masks: np.ndarray               # (T, h, w)
    skeleton: SkeletonModel
    human: HumanMotion
    attach_joint: int
    attach_offset: np.ndarray
    seed: int

    @property
    def occluded(self):
        occ = np.zeros(len(self.trajectory), bool)
        for a, b in self.config.occlusion:
            occ[a:b] = True
        return occ


def generate_scene(cfg: SceneConfig | dict, seed=None, base_dir=None, mesh: TriMesh | None = None) -> Scene:
    """Build a full synthetic capture from a scene config.

    ``seed`` defaults to ``cfg.seed`` (then 0). Equal inputs give equal
    outputs.
    """
    if isinstance(cfg, dict):
        cfg = validate(SceneConfig, cfg, "scene")
    seed = seed if seed is not None else (cfg.seed if cfg.seed is not None else 0)
    ss = np.random.SeedSequence(seed)
    rng_mask, rng_imu, rng_human = (np.random.default_rng(s) for s in ss.spawn(3))
    mesh = mesh if mesh is not None else load_scene_mesh(cfg.mesh, base_dir)
    cam = camera_from_config(cfg.camera)
    tau = 1.0 / cfg.fps
    rots, trans, acc = object_trajectory(cfg)
    traj = PoseSequence(rots, trans, tau)

    skel = load_skeleton(cfg.human.skeleton and str(Path(base_dir or ".") / cfg.human.skeleton))
    skel = skel.scaled(cfg.human.shape)
    human = human_motion(skel, rots, trans, cfg.fps, cfg.human.attach_joint, cfg.human.attach_offset,
                         cfg.human.motion_amplitude_deg, rng_human)

    noise = ImuNoise(cfg.noise.imu_rotation_deg, cfg.noise.imu_acceleration)
    n_smooth = cfg.imu_smoothing
    if len(traj) <= 2 * n_smooth:
        raise ConfigError(f"{len(traj)} frames are too few for smoothing {n_smooth}", "scene.imu_smoothing")
    imu_seed = int(rng_imu.integers(2 ** 31))
    imu = simulate_imu(traj, n_smooth, noise, imu_seed, acc if cfg.imu_source == "analytic" else None)

    occluded = np.zeros(len(traj), bool)
    for a, b in cfg.occlusion:
        occluded[a:b] = True
    masks = np.zeros((len(traj),) + cam.shape)
    for k in range(len(traj)):
        pose = traj[k]
        if cfg.mask_mode == "soft":
            m = render_soft_silhouette(mesh, pose, cam, cfg.mask_sigma)
        else:
            m = rasterize_hard(mesh, pose, cam)
        m = boundary_noise(m, cfg.noise.mask_band_px, cfg.noise.mask_flip_prob, rng_mask)
        if not occluded[k]:
            masks[k] = m
    return Scene(cfg, mesh, cam, traj, acc, imu, masks, skel, human,
                 skel.index(cfg.human.attach_joint), np.asarray(cfg.human.attach_offset, float), seed)


def write_scene(scene: Scene, out_dir):
    """Write trajectory.json, imu.csv, masks/, skeleton.json, camera.json,
    object.obj and scene.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tau = scene.trajectory.frame_interval
    save_trajectory(scene.trajectory, out / "trajectory.json")
    save_imu_csv(scene.imu, out / "imu.csv")
    mdir = out / "masks"
    if mdir.exists():
        shutil.rmtree(mdir)
    mdir.mkdir()
    for k, m in enumerate(scene.masks):
        save_mask(m, mdir / f"{k:06d}.png")
    save_human(out / "skeleton.json", scene.skeleton, scene.human, tau,
               {"attach_joint": scene.skeleton.names[scene.attach_joint],
                "attach_offset": scene.attach_offset.tolist()})
    save_camera(scene.camera, out / "camera.json")
    save_obj(scene.mesh, out / "object.obj")
    write_json(out / "scene.json", {"n_frames": len(scene.trajectory), "fps": 1.0 / tau,
                                    "occlusion": [list(w) for w in scene.config.occlusion],
                                    "seed": scene.seed, "config": to_toml_dict(scene.config),
                                    "accelerations": scene.accelerations.tolist()})
    return out
