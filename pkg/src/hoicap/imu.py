"""IMU streams: free acceleration, sync-event detection, hand-eye rotation
calibration, lever-arm correction and synthetic IMU generation.

A stream keeps rotations as (T, 3, 3) matrices and accelerations as (T, 3).
``ImuStream.kind`` says whether the accelerations are raw sensor-frame
specific force (``"raw"``) or global-frame free acceleration (``"free"``).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (DegenerateMotion, MissingAngularVelocity, ShapeMismatch,
                     TooShort, DegenerateInput)
from .geometry import (PoseSequence, axis_angle_to_matrix, geodesic_angle,
                       is_rotation, matrix_to_axis_angle, matrix_to_rot6d)

GRAVITY = np.array([0.0, 0.0, 9.81])
FREE_FALL_RATIO = 0.15
DEGENERACY_RATIO = 1e-6


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    rotation: np.ndarray            # sensor -> inertial frame, R_s
    acceleration_raw: np.ndarray    # sensor frame, m/s^2
    angular_velocity: np.ndarray | None = None   # sensor frame, rad/s

    def __post_init__(self):
        rot = np.asarray(self.rotation, float)
        if not is_rotation(rot, 1e-6):
            raise DegenerateInput("sample rotation is not a rotation matrix")
        acc = np.asarray(self.acceleration_raw, float).reshape(3)
        if not np.all(np.isfinite(acc)):
            raise DegenerateInput("non-finite acceleration")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "acceleration_raw", acc)
        if self.angular_velocity is not None:
            w = np.asarray(self.angular_velocity, float).reshape(3)
            if not np.all(np.isfinite(w)):
                raise DegenerateInput("non-finite angular velocity")
            object.__setattr__(self, "angular_velocity", w)


def free_acceleration(s: ImuSample, gravity=GRAVITY):
    """a_free = R_s · a_raw − g."""
    return s.rotation @ s.acceleration_raw - np.asarray(gravity, float)


@dataclass
class ImuStream:
    timestamps: np.ndarray          # (T,)
    rotations: np.ndarray           # (T, 3, 3)
    accelerations: np.ndarray       # (T, 3)
    angular_velocity: np.ndarray | None = None   # (T, 3), sensor frame
    rate: float | None = None
    kind: str = "raw"

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, float).reshape(-1)
        n = len(self.timestamps)
        self.rotations = np.asarray(self.rotations, float).reshape(n, 3, 3)
        self.accelerations = np.asarray(self.accelerations, float).reshape(n, 3)
        if self.angular_velocity is not None:
            self.angular_velocity = np.asarray(self.angular_velocity, float).reshape(n, 3)
        if self.kind not in ("raw", "free"):
            raise ValueError(f"unknown acceleration kind {self.kind!r}")
        if n > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise DegenerateInput("timestamps must be strictly increasing")
        if self.rate is None:
            self.rate = 1.0 / float(np.median(np.diff(self.timestamps))) if n > 1 else 1.0
        if not self.rate > 0:
            raise DegenerateInput("rate must be positive")
        if not (np.all(np.isfinite(self.accelerations)) and np.all(np.isfinite(self.rotations))):
            raise DegenerateInput("non-finite IMU values")

    def __len__(self):
        return len(self.timestamps)

    def __getitem__(self, k) -> ImuSample:
        w = None if self.angular_velocity is None else self.angular_velocity[k]
        return ImuSample(self.timestamps[k], self.rotations[k], self.accelerations[k], w)

    @classmethod
    def from_samples(cls, samples, rate=None):
        samples = list(samples)
        has_w = all(s.angular_velocity is not None for s in samples)
        return cls(np.array([s.timestamp for s in samples]),
                   np.stack([s.rotation for s in samples]),
                   np.stack([s.acceleration_raw for s in samples]),
                   np.stack([s.angular_velocity for s in samples]) if has_w else None,
                   rate, "raw")

    def free(self, gravity=GRAVITY) -> "ImuStream":
        """Stream with global-frame free accelerations."""
        if self.kind == "free":
            return self
        acc = np.einsum("tij,tj->ti", self.rotations, self.accelerations) - np.asarray(gravity, float)
        return replace(self, accelerations=acc, kind="free")

    def raw_norms(self, gravity=GRAVITY):
        """‖a_raw‖ per sample; rotations preserve norms so free streams work too."""
        if self.kind == "raw":
            return np.linalg.norm(self.accelerations, axis=1)
        return np.linalg.norm(self.accelerations + np.asarray(gravity, float), axis=1)

    def rot6d(self):
        return matrix_to_rot6d(self.rotations)

    def slice(self, start, stop=None) -> "ImuStream":
        sl = slice(start, stop)
        w = None if self.angular_velocity is None else self.angular_velocity[sl]
        return replace(self, timestamps=self.timestamps[sl], rotations=self.rotations[sl],
                       accelerations=self.accelerations[sl], angular_velocity=w)


# ---------------------------------------------------------------------------
# lever arm
# ---------------------------------------------------------------------------

def lever_arm_correction(stream: ImuStream, offset):
    """Global-frame δa_t = (v_t − v_{t−1}) / Δt with v_t = R_t (ω_t × r).

    The first sample reuses the second sample's backward difference.
    """
    if stream.angular_velocity is None:
        raise MissingAngularVelocity("lever-arm correction needs angular velocity")
    if len(stream) < 2:
        raise TooShort("lever-arm correction needs at least 2 samples")
    r = np.asarray(offset, float).reshape(3)
    v = np.einsum("tij,tj->ti", stream.rotations, np.cross(stream.angular_velocity, r))
    da = np.diff(v, axis=0) / np.diff(stream.timestamps)[:, None]
    return np.concatenate([da[:1], da], axis=0)


def normalize_lever_arm(stream: ImuStream, offset) -> ImuStream:
    """Remove the acceleration induced by the sensor's offset from the body centre."""
    da = lever_arm_correction(stream, offset)
    if stream.kind == "raw":
        # raw readings live in the sensor frame
        da = np.einsum("tji,tj->ti", stream.rotations, da)
    return replace(stream, accelerations=stream.accelerations - da)


# ---------------------------------------------------------------------------
# temporal sync
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyncEvent:
    index: int
    timestamp: float
    low_confidence: bool
    free_fall: tuple | None = None      # [start, stop) of the free-fall run used


def _longest_run(flags):
    best = None
    start = None
    for k, f in enumerate(np.append(flags, False)):
        if f and start is None:
            start = k
        elif not f and start is not None:
            if best is None or k - start > best[1] - best[0]:
                best = (start, k)
            start = None
    return best


def jerk_score(free_acc):
    """Magnitude of the change in backward jerk across each frame.

    Equivalent to ‖a_{k+1} − 2 a_k + a_{k−1}‖ with replicated ends. It peaks
    on the frame of an impact or an isolated spike rather than on its
    neighbour.
    """
    a = np.asarray(free_acc, float)
    pad = np.concatenate([a[:1], a, a[-1:]], axis=0)
    return np.linalg.norm(pad[2:] - 2.0 * pad[1:-1] + pad[:-2], axis=1)


def detect_sync_event(stream: ImuStream, gravity=GRAVITY, free_fall_ratio=FREE_FALL_RATIO) -> SyncEvent:
    """Landing frame after the longest near-free-fall interval."""
    if len(stream) < 3:
        raise TooShort("sync detection needs at least 3 samples")
    g = np.asarray(gravity, float)
    score = jerk_score(stream.free(g).accelerations)
    run = _longest_run(stream.raw_norms(g) < free_fall_ratio * np.linalg.norm(g))
    if run is not None and run[1] < len(stream):
        k = run[1] + int(np.argmax(score[run[1]:]))
        return SyncEvent(k, float(stream.timestamps[k]), False, run)
    k = int(np.argmax(score))
    return SyncEvent(k, float(stream.timestamps[k]), True, None)


# ---------------------------------------------------------------------------
# spatial calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationResult:
    transform: np.ndarray       # T_{I->W}
    residual: float             # mean rotation-consistency error, radians
    frame_offset: int = 0
    singular_values: np.ndarray = field(default=None, repr=False)

    def to_dict(self):
        return {"transform": self.transform.reshape(-1).tolist(),
                "residual_rad": self.residual,
                "residual_deg": float(np.degrees(self.residual)),
                "frame_offset": self.frame_offset}


def sylvester_blocks(world_rots, imu_rots, stride):
    """Per-pair (A_t, B_t) with A_t T + T B_t = 0 for the true T_{I->W}."""
    w = np.asarray(world_rots, float)
    i = np.asarray(imu_rots, float)
    a = -w[:-stride] @ np.swapaxes(w[stride:], 1, 2)
    b = i[:-stride] @ np.swapaxes(i[stride:], 1, 2)
    return a, b


def calibrate_spatial(world_rots, imu_rots, stride=5, frame_offset=0) -> CalibrationResult:
    """Solve the stacked homogeneous Sylvester system for T_{I->W}."""
    w = np.asarray(world_rots, float)
    i = np.asarray(imu_rots, float)
    if w.shape != i.shape or w.ndim != 3 or w.shape[1:] != (3, 3):
        raise ShapeMismatch(f"rotation lists differ in shape: {w.shape} vs {i.shape}")
    if stride < 1:
        raise DegenerateInput("stride must be at least 1")
    if len(w) < stride + 2:
        raise TooShort(f"need at least stride + 2 = {stride + 2} rotations, got {len(w)}")
    a, b = sylvester_blocks(w, i, stride)
    eye = np.eye(3)
    # vec is column-major: vec(A X + X B) = (I ⊗ A + Bᵀ ⊗ I) vec(X)
    m = np.einsum("ij,tkl->tikjl", eye, a).reshape(-1, 9, 9)
    m = m + np.einsum("tlk,ij->tkilj", b, eye).reshape(-1, 9, 9)
    _, sv, vt = np.linalg.svd(m.reshape(-1, 9), full_matrices=False)
    if sv[-2] < DEGENERACY_RATIO * sv[0]:
        raise DegenerateMotion(
            f"rotation excitation too weak (σ₈/σ₁ = {sv[-2] / sv[0]:.2e}); rotate about more than one axis")
    x = vt[-1].reshape(3, 3, order="F")
    if np.linalg.det(x) < 0:
        x = -x
    u, _, vh = np.linalg.svd(x)
    d = np.sign(np.linalg.det(u @ vh))
    t = u @ np.diag([1.0, 1.0, d]) @ vh
    return CalibrationResult(t, calibration_residual(t, a, b), int(frame_offset), sv)


def calibration_residual(transform, a, b):
    """Mean geodesic angle between T B_t Tᵀ and −A_t."""
    pred = transform @ b @ transform.T
    return float(np.mean(geodesic_angle(pred, -a)))


# ---------------------------------------------------------------------------
# synthetic IMU
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImuNoise:
    rotation_deg: float = 0.0       # per-axis std of the axis-angle perturbation
    acceleration: float = 0.0       # per-axis std, m/s^2


def smoothed_second_difference(x, n, tau):
    """(x_{t−n} + x_{t+n} − 2 x_t) / (n τ)² with the first/last n rows
    replicated from the nearest interior value."""
    x = np.asarray(x, float)
    if len(x) <= 2 * n:
        raise TooShort(f"trajectory of {len(x)} frames is too short for smoothing n = {n}")
    acc = (x[:-2 * n] + x[2 * n:] - 2.0 * x[n:-n]) / (n * tau) ** 2
    return np.concatenate([np.repeat(acc[:1], n, 0), acc, np.repeat(acc[-1:], n, 0)], axis=0)


def body_angular_velocity(rotations, tau):
    """Sensor-frame ω_t from log(R_tᵀ R_{t+1}) / τ; last frame replicated."""
    rel = np.swapaxes(rotations[:-1], 1, 2) @ rotations[1:]
    w = matrix_to_axis_angle(rel) / tau
    return np.concatenate([w, w[-1:]], axis=0) if len(w) else np.zeros((len(rotations), 3))


def simulate_imu(traj: PoseSequence, n=4, noise: ImuNoise | None = None, seed=0,
                 accelerations=None) -> ImuStream:
    """Free-acceleration IMU stream for an object trajectory.

    ``accelerations`` replaces the second-difference estimate with given
    values (e.g. analytic ones) before noise is applied.
    """
    if n < 1:
        raise DegenerateInput("smoothing n must be at least 1")
    tau = traj.frame_interval
    if len(traj) <= 2 * n:
        raise TooShort(f"trajectory of {len(traj)} frames is too short for smoothing n = {n}")
    noise = noise or ImuNoise()
    rng = np.random.default_rng(seed)
    acc = (smoothed_second_difference(traj.translations, n, tau) if accelerations is None
           else np.array(accelerations, float).reshape(len(traj), 3))
    rots = traj.rotations.copy()
    if noise.rotation_deg > 0:
        xi = rng.normal(0.0, np.radians(noise.rotation_deg), size=(len(traj), 3))
        rots = rots @ axis_angle_to_matrix(xi)
    if noise.acceleration > 0:
        acc = acc + rng.normal(0.0, noise.acceleration, size=acc.shape)
    return ImuStream(np.arange(len(traj)) * tau, rots, acc,
                     body_angular_velocity(traj.rotations, tau), 1.0 / tau, "free")


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

_ROT_COLS = [f"r{i}{j}" for i in range(3) for j in range(3)]
_HEADER = ["t", *_ROT_COLS, "ax", "ay", "az"]
_W_COLS = ["wx", "wy", "wz"]


def _fmt(x):
    return format(float(x), ".17g")


def save_imu_csv(stream: ImuStream, path):
    """Write a stream; a leading ``# kind=... rate=...`` comment records the
    acceleration frame and nominal rate."""
    has_w = stream.angular_velocity is not None
    with open(path, "w", newline="") as fh:
        fh.write(f"# kind={stream.kind} rate={_fmt(stream.rate)}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(_HEADER + (_W_COLS if has_w else []))
        for k in range(len(stream)):
            row = [stream.timestamps[k], *stream.rotations[k].reshape(-1), *stream.accelerations[k]]
            if has_w:
                row += list(stream.angular_velocity[k])
            wr.writerow([_fmt(v) for v in row])


def load_imu_csv(path) -> ImuStream:
    kind, rate = "raw", None
    lines = Path(path).read_text().splitlines()
    body = []
    for ln in lines:
        if ln.startswith("#"):
            for tok in ln[1:].split():
                key, _, val = tok.partition("=")
                if key == "kind":
                    kind = val
                elif key == "rate":
                    rate = float(val)
        elif ln.strip():
            body.append(ln)
    rows = list(csv.reader(body))
    if not rows:
        raise DegenerateInput(f"{path}: empty IMU file")
    header, data = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
    col = {name: k for k, name in enumerate(header)}
    missing = [c for c in _HEADER if c not in col]
    if missing:
        raise DegenerateInput(f"{path}: missing IMU columns {missing}")
    w = data[:, [col[c] for c in _W_COLS]] if all(c in col for c in _W_COLS) else None
    return ImuStream(data[:, col["t"]], data[:, [col[c] for c in _ROT_COLS]].reshape(-1, 3, 3),
                     data[:, [col[c] for c in ("ax", "ay", "az")]], w, rate, kind)
