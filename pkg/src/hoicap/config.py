"""Typed TOML configuration for the pipeline stages.

Every section rejects unknown keys. Validation failures surface as
``ConfigError`` naming the dotted path of the offending field.
"""
from __future__ import annotations

import os
import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEED_ENV = "IMHOI_SEED"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


Vec3 = tuple[float, float, float]


class _FieldError(ValueError):
    """Cross-field check failure that names the key at fault."""

    def __init__(self, msg, field):
        super().__init__(msg)
        self.field = field


class CameraConfig(_Section):
    focal: float = Field(300.0, gt=0, description="focal length in pixels (fx = fy)")
    height: int = Field(256, gt=0, description="image height in pixels")
    width: int = Field(256, gt=0, description="image width in pixels")
    position: Vec3 = Field((0.0, -1.0, 1.0), description="camera centre in world coordinates (m)")
    look_at: Vec3 = Field((0.0, 0.0, 1.0), description="world point on the optical axis (m)")


class Keyframe(_Section):
    time: float = Field(ge=0, description="seconds")
    translation: Vec3
    rotation: Vec3 = Field((0.0, 0.0, 0.0), description="axis-angle (rad)")


class TrajectoryConfig(_Section):
    center: Vec3 = Field((0.0, 0.0, 1.0), description="trajectory centre (m)")
    initial_rotation: Vec3 = Field((0.3, 0.5, 0.2), description="axis-angle of the first frame (rad)")
    radius: float = Field(0.12, ge=0, description="circular: radius (m)")
    angular_rate: float = Field(0.6283185307179586, description="circular: revolution rate (rad/s)")
    spin_rate: float = Field(0.6, description="circular: object spin about the viewing axis (rad/s)")
    velocity: Vec3 = Field((0.02, 0.0, 0.01), description="linear: velocity (m/s)")
    tumble_rates: tuple[float, float] = Field((0.9, 0.6), description="tumbling: rates about world z then x (rad/s)")
    amplitude: Vec3 = Field((0.06, 0.0, 0.04), description="tumbling: translation sway amplitude (m)")
    frequency: float = Field(0.2, ge=0, description="tumbling: translation sway frequency (Hz)")
    keyframes: list[Keyframe] = Field(default_factory=list, description="keyframes: scripted poses")


class NoiseConfig(_Section):
    mask_band_px: float = Field(0.0, ge=0, description="width of the boundary band whose pixels may flip")
    mask_flip_prob: float = Field(0.3, ge=0, le=1, description="flip probability inside the band")
    imu_rotation_deg: float = Field(0.0, ge=0, description="IMU rotation noise std (deg per axis)")
    imu_acceleration: float = Field(0.0, ge=0, description="IMU acceleration noise std (m/s^2)")


class HumanConfig(_Section):
    skeleton: Optional[str] = Field(None, description="skeleton JSON path; bundled 52-joint tree if unset")
    attach_joint: str = Field("right_wrist", description="joint carrying the object")
    attach_offset: Vec3 = Field((-0.08, 0.0, 0.0), description="object origin in the joint frame (m)")
    motion_amplitude_deg: float = Field(15.0, ge=0, description="amplitude of scripted joint curves")
    shape: float = Field(0.0, description="first shape coefficient (uniform bone scale)")


class SceneConfig(_Section):
    mesh: str = Field("builtin:egg", description="OBJ path or builtin:egg / builtin:box")
    kind: Literal["static", "linear", "circular", "tumbling", "keyframes"] = "circular"
    duration: float = Field(10.0, gt=0, description="seconds")
    fps: float = Field(30.0, gt=0, description="frames per second")
    occlusion: list[tuple[int, int]] = Field(default_factory=list,
                                             description="[start, end) frame windows with blank masks")
    mask_mode: Literal["hard", "soft"] = Field("hard", description="hard rasterization or soft render")
    mask_sigma: float = Field(0.5, gt=0, description="soft-mask sharpness (px)")
    imu_source: Literal["analytic", "difference"] = Field("analytic",
                                                         description="exact or second-difference accelerations")
    imu_smoothing: int = Field(4, ge=1, description="second-difference smoothing n")
    seed: Optional[int] = Field(None, description="scene seed; falls back to the global seed")
    camera: CameraConfig = Field(default_factory=CameraConfig)
    trajectory: TrajectoryConfig = Field(default_factory=TrajectoryConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    human: HumanConfig = Field(default_factory=HumanConfig)

    @property
    def n_frames(self):
        return int(round(self.duration * self.fps))

    @model_validator(mode="after")
    def _check(self):
        n = self.n_frames
        if n < 1:
            raise _FieldError("duration · fps must give at least one frame", "duration")
        for k, (a, b) in enumerate(self.occlusion):
            if not 0 <= a < b <= n:
                raise _FieldError(f"occlusion[{k}] = [{a}, {b}) outside [0, {n}) frames", "occlusion")
        if self.kind == "keyframes":
            ks = self.trajectory.keyframes
            if len(ks) < 2:
                raise _FieldError("keyframes kind needs at least two keyframes", "trajectory.keyframes")
            ts = [k.time for k in ks]
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise _FieldError("keyframe times must increase", "trajectory.keyframes")
            if ts[0] > 0 or ts[-1] < (n - 1) / self.fps:
                raise _FieldError("keyframes must span the whole duration", "trajectory.keyframes")
        return self


class CalibrationConfig(_Section):
    stride: int = Field(5, ge=1, description="frame stride s between paired relative rotations")


class SyncConfig(_Section):
    free_fall_ratio: float = Field(0.15, gt=0, description="free fall when |a_raw| < ratio · |g|")
    gravity: Vec3 = Field((0.0, 0.0, 9.81), description="gravity vector (m/s^2)")


class TrackingConfig(_Section):
    w_visual: float = Field(20.0, ge=0, description="silhouette energy weight")
    w_imu: float = Field(1e5, ge=0, description="inertial energy weight")
    w_area: float = Field(0.0, ge=0, description="area loss weight inside the visual term")
    learning_rate: Optional[float] = Field(None, gt=0, description="step size; 0.01 at <= 30 fps, 5e-4 above")
    iterations: int = Field(300, ge=0, description="joint optimization iterations")
    feedback_iterations: int = Field(3, ge=0, description="per-frame corrective iterations N_F")
    feedback_samples: int = Field(400, ge=1, description="surface points sampled per feedback iteration N_S")
    lr_final_ratio: float = Field(0.1, gt=0, le=1, description="step size decay factor over the iteration budget")
    lr_rotation_scale: float = Field(0.1, gt=0, description="rotation step size relative to translation")
    sigma: float = Field(0.05, gt=0, description="soft rasterizer sharpness (px)")
    support: float = Field(6.0, gt=0, description="face influence radius in units of sigma")
    imu_mode: Literal["physical", "literal"] = "physical"
    rotation_init: Literal["imu", "initial"] = Field("imu", description="start rotations from the IMU or the detector")
    unobserved_area: float = Field(1.0, ge=0, description="masks below this area (px) count as unobserved")
    init_rotation_deg: float = Field(5.0, ge=0, description="simulated detector rotation error (deg)")
    init_translation_cm: float = Field(5.0, ge=0, description="simulated detector translation error (cm)")


class DiffusionConfig(_Section):
    window: int = Field(16, ge=2, description="frames per window W")
    steps: int = Field(1000, ge=1, description="diffusion steps N")
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(2e-2, gt=0, lt=1)
    hidden: int = Field(512, ge=1, description="denoiser hidden width")
    layers: int = Field(3, ge=1, description="denoiser hidden layers")
    residual: bool = Field(True, description="predict a correction to the condition instead of the whole window")
    epochs: int = Field(200, ge=0)
    warmup_epochs: int = Field(35, ge=0, description="epochs before the consistency and IMU terms join")
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    lambda_off: float = Field(1.0, ge=0)
    lambda_vel: float = Field(1.0, ge=0)
    lambda_consist: float = Field(1.0, ge=0)
    lambda_imu: float = Field(100.0, ge=0)
    ema_decay: float = Field(0.995, ge=0, le=1)
    ema_every: int = Field(10, ge=1, description="epochs between EMA updates")
    window_stride: int = Field(8, ge=1, description="frame stride between training windows")
    hands_observed: bool = Field(False, description="keep captured hand motion instead of generating it")
    use_ema: bool = Field(False, description="refine with the EMA parameter copy")
    noise_scale: float = Field(0.0, ge=0, description="reverse-step noise as a fraction of the posterior std")
    condition_noise: float = Field(0.1, ge=0, description="condition jitter during training (data std units)")
    start_level: int = Field(100, ge=1, description="refinement start level n0")
    train_scenes: int = Field(8, ge=1, description="synthetic training scenes per category")
    category: str = Field("default", description="scene family tag of the trained filter")


Stage = Literal["auto", "track", "refine"]


class EvaluationConfig(_Section):
    stage: Stage = Field("auto", description="prediction to score; auto prefers refine over track")
    window_seconds: float = Field(10.0, gt=0)
    alignment: Literal["similarity", "rigid"] = "similarity"
    n_points: int = Field(5000, ge=1, description="surface samples per object mesh")
    human_sphere_radius: float = Field(0.02, ge=0, description="sphere radius around joints (m)")
    human_sphere_points: int = Field(20, ge=0, description="points sampled per joint sphere")
    per_frame_csv: bool = True


class RenderConfig(_Section):
    stage: Stage = Field("auto", description="prediction to draw; auto prefers refine over track")
    sigma: float = Field(1.0, gt=0, description="soft rasterizer sharpness (px)")
    every: int = Field(1, ge=1, description="write every k-th frame")


class PipelineConfig(_Section):
    seed: int = 0
    output_dir: str = "out"
    scene: SceneConfig = Field(default_factory=SceneConfig)
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)
    sync: SyncConfig = Field(default_factory=SyncConfig)
    tracking: TrackingConfig = Field(default_factory=TrackingConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)

    @property
    def scene_seed(self):
        return self.seed if self.scene.seed is None else self.scene.seed


def _error_from(exc: ValidationError, prefix=""):
    err = exc.errors()[0]
    loc = ".".join(str(x) for x in err["loc"] if not str(x).startswith("function-"))
    cause = (err.get("ctx") or {}).get("error")
    if isinstance(cause, _FieldError):
        loc = ".".join(p for p in (loc, cause.field) if p)
    field = ".".join(p for p in (prefix, loc) if p) or None
    msg = str(cause) if isinstance(cause, _FieldError) else err["msg"]
    if err["type"] == "extra_forbidden":
        msg = "unknown key"
    return ConfigError(msg, field)


def validate(model, data, prefix=""):
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise _error_from(exc, prefix) from None


def set_dotted(data: dict, key: str, value):
    """Set ``a.b.c`` in nested dicts, creating levels as needed."""
    *head, last = key.split(".")
    d = data
    for k in head:
        nxt = d.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError("not a table", ".".join(head))
        d = nxt
    d[last] = value


def load_pipeline_config(path=None, env=None, overrides=None) -> tuple[PipelineConfig, Path]:
    """Parse a pipeline TOML (or defaults when ``path`` is None), apply dotted
    ``overrides`` and let ``IMHOI_SEED`` in ``env`` override the seed.

    Returns the config and the directory relative paths resolve against.
    """
    data = {}
    if path is not None:
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for key, value in (overrides or {}).items():
        set_dotted(data, key, value)
    cfg = validate(PipelineConfig, data)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{env[SEED_ENV]!r} is not an integer", SEED_ENV) from None
    return cfg, (path.parent if path is not None else Path.cwd())


def to_toml_dict(model: BaseModel):
    """Plain dict without None values, suitable for TOML output."""
    def clean(x):
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items() if v is not None}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        return x
    return clean(model.model_dump(mode="json"))
