"""Object pose tracking from silhouettes and IMU readings.

E = w_visual · E_visual + w_imu · E_imu over a whole sequence, with

* E_visual = Σ_t ‖D(R̂_t O + T̂_t) − S_t‖² (soft silhouette render D),
* E_imu = 1/(T−1) Σ_t ‖T̂_{t−1} + T̂_{t+1} − 2 T̂_t − â_t‖² + 1/T Σ_t ‖R̂_t − C(Q_t)‖²_F,

where â_t = A_t τ² ("physical") or 0.5 A_t² elementwise ("literal").

Tracking runs N_F corrective iterations per frame and then a joint Adam
optimization over all frames' 6D rotations and translations.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, ConfigError, NonFiniteEnergy, PreconditionError, ShapeMismatch, TooShort
from .geometry import (PoseSequence, RigidPose, TriMesh, matrix_to_rot6d,
                       rot6d_backward, rot6d_to_matrix, sample_surface, skew)
from .imu import ImuStream
from .render import DEFAULT_SUPPORT, Camera, check_mask, mask_losses, rasterize_hard

log = logging.getLogger(__name__)

W_VISUAL = 20.0
W_IMU = 1e5
N_SAMPLES = 400
N_FEEDBACK = 3


def default_learning_rate(fps):
    """0.01 for 30 fps captures, 5e-4 for 60 fps (threshold halfway)."""
    return 0.01 if fps <= 45.0 else 5e-4


@dataclass
class TrackProblem:
    mesh: TriMesh
    camera: Camera
    masks: np.ndarray               # (T, h, w)
    imu: ImuStream                  # free accelerations, aligned to frames
    initial: PoseSequence
    w_visual: float = W_VISUAL
    w_imu: float = W_IMU
    w_area: float = 0.0             # area loss weight inside E_visual
    sigma: float = 0.05
    support: float = DEFAULT_SUPPORT
    learning_rate: float | None = None
    lr_final_ratio: float = 0.1     # geometric decay of the step size over the budget
    lr_rotation_scale: float = 0.1  # rotation step size relative to the translation one
    iterations: int = 300
    feedback_iterations: int = N_FEEDBACK
    feedback_samples: int = N_SAMPLES
    imu_mode: str = "physical"
    unobserved_area: float = 1.0    # masks with less area carry no visual evidence
    rotation_init: str = "imu"      # "imu": C(Q_t); "initial": the initial poses
    seed: int = 0

    def __post_init__(self):
        self.masks = np.asarray(self.masks, float)
        n = len(self.initial)
        if self.masks.ndim != 3 or len(self.masks) != n or len(self.imu) != n:
            raise ConfigError(f"frame counts differ: masks {len(self.masks)}, imu {len(self.imu)}, "
                              f"initial poses {n}", "tracking")
        for k in ("w_visual", "w_imu", "w_area"):
            if not getattr(self, k) >= 0:
                raise ConfigError("weights must be non-negative", f"tracking.{k}")
        if self.imu_mode not in ("physical", "literal"):
            raise ConfigError(f"unknown mode {self.imu_mode!r}", "tracking.imu_mode")
        if self.rotation_init not in ("imu", "initial"):
            raise ConfigError(f"unknown rotation init {self.rotation_init!r}", "tracking.rotation_init")
        if self.imu.kind != "free":
            raise ConfigError("IMU stream must carry free accelerations", "tracking.imu")
        if self.iterations < 0 or self.feedback_iterations < 0:
            raise ConfigError("iteration budgets must be non-negative", "tracking.iterations")
        check_mask(self.masks[0], self.camera)

    @property
    def tau(self):
        return self.initial.frame_interval

    @property
    def lr(self):
        return self.learning_rate if self.learning_rate is not None else default_learning_rate(1.0 / self.tau)

    @property
    def observed(self):
        return self.masks.sum(axis=(1, 2)) >= self.unobserved_area


# ---------------------------------------------------------------------------
# energies
# ---------------------------------------------------------------------------

def _as_params(poses):
    if isinstance(poses, PoseSequence):
        return matrix_to_rot6d(poses.rotations), poses.translations
    r6, t = poses
    return np.asarray(r6, float), np.asarray(t, float)


@dataclass
class EnergyValue:
    value: float
    grad_rot6d: np.ndarray      # (T, 6)
    grad_translation: np.ndarray  # (T, 3)
    parts: dict = field(default_factory=dict)
    per_frame: np.ndarray | None = None


def energy_visual(problem: TrackProblem, poses, frames=None, need_grad=True) -> EnergyValue:
    """Σ_t silhouette loss (plus ``w_area`` · area loss) over ``frames``."""
    r6, t = _as_params(poses)
    n = len(t)
    frames = range(n) if frames is None else frames
    g6 = np.zeros((n, 6))
    gt = np.zeros((n, 3))
    per = np.zeros(n)
    for k in frames:
        out = mask_losses(problem.mesh, (r6[k], t[k]), problem.camera, problem.masks[k], problem.sigma,
                          problem.support, 1.0, problem.w_area, need_grad)
        per[k] = out.value
        g6[k] = out.grad_rot6d
        gt[k] = out.grad_translation
    return EnergyValue(float(per.sum()), g6, gt, {"visual": float(per.sum())}, per)


def imu_targets(imu: ImuStream, tau, mode="physical"):
    """Expected second differences â_t."""
    a = imu.accelerations
    if mode == "physical":
        return a * tau * tau
    if mode == "literal":
        return 0.5 * a * a
    raise ValueError(f"unknown mode {mode!r}")


def second_difference(x):
    return x[:-2] + x[2:] - 2.0 * x[1:-1]


def energy_imu(poses, imu: ImuStream, tau=None, mode="physical", need_grad=True) -> EnergyValue:
    """Inertial energy with analytic gradients w.r.t. 6D rotations and translations."""
    r6, t = _as_params(poses)
    n = len(t)
    if n < 3:
        raise TooShort("inertial energy needs at least 3 frames")
    if len(imu) != n:
        raise ShapeMismatch(f"{len(imu)} IMU samples for {n} frames")
    if tau is None:
        tau = poses.frame_interval if isinstance(poses, PoseSequence) else 1.0 / imu.rate
    resid = second_difference(t) - imu_targets(imu, tau, mode)[1:-1]
    e_trans = float(np.sum(resid * resid)) / (n - 1)
    rot = rot6d_to_matrix(r6)
    dr = rot - imu.rotations
    e_rot = float(np.sum(dr * dr)) / n
    parts = {"translation": e_trans, "rotation": e_rot}
    if not need_grad:
        return EnergyValue(e_trans + e_rot, np.zeros((n, 6)), np.zeros((n, 3)), parts)
    g = 2.0 * resid / (n - 1)
    gt = np.zeros((n, 3))
    gt[:-2] += g
    gt[2:] += g
    gt[1:-1] -= 2.0 * g
    g6 = rot6d_backward(r6, 2.0 * dr / n)
    return EnergyValue(e_trans + e_rot, g6, gt, parts)


def energy(problem: TrackProblem, poses, frames=None, need_grad=True) -> EnergyValue:
    """E = w_visual · E_visual + w_imu · E_imu."""
    r6, t = _as_params(poses)
    vis = energy_visual(problem, (r6, t), frames, need_grad)
    value = problem.w_visual * vis.value
    g6 = problem.w_visual * vis.grad_rot6d
    gt = problem.w_visual * vis.grad_translation
    parts = {"visual": vis.value}
    if problem.w_imu > 0:
        im = energy_imu((r6, t), problem.imu, problem.tau, problem.imu_mode, need_grad)
        value += problem.w_imu * im.value
        g6 = g6 + problem.w_imu * im.grad_rot6d
        gt = gt + problem.w_imu * im.grad_translation
        parts.update({"imu_" + k: v for k, v in im.parts.items()})
    return EnergyValue(value, g6, gt, parts, vis.per_frame)


# ---------------------------------------------------------------------------
# per-frame corrective iterations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeedbackState:
    iteration: int
    rotation: np.ndarray
    translation: np.ndarray
    points: np.ndarray | None = None    # last sampled template-frame surface points
    loss: float | None = None
    delta_rotation: float = 0.0         # rotation angle of the last increment (rad)
    delta_translation: float = 0.0      # length of the last increment (m)
    n_iterations: int = N_FEEDBACK
    loss_before: float | None = None    # loss at the start of the last iteration

    @classmethod
    def start(cls, pose: RigidPose, n_iterations=N_FEEDBACK):
        return cls(0, pose.rotation, pose.translation, n_iterations=n_iterations)

    @property
    def pose(self):
        return RigidPose(self.rotation, self.translation)


def _point_jacobian(points, rotation, translation, cam: Camera):
    """d(pixel)/d(ω, δ) for posed points under (exp(ω) R, T + δ); (N, 2, 6)."""
    rel = points @ rotation.T                      # rotated about the object origin
    xc = (rel + translation) @ cam.extrinsics.rotation.T + cam.extrinsics.translation
    k = cam.intrinsics
    z = xc[:, 2]
    u = xc[:, 0] / z
    v = xc[:, 1] / z
    p = np.zeros((len(points), 2, 3))
    p[:, 0, 0] = k[0, 0] / z
    p[:, 0, 1] = k[0, 1] / z
    p[:, 0, 2] = -(k[0, 0] * u + k[0, 1] * v) / z
    p[:, 1, 1] = k[1, 1] / z
    p[:, 1, 2] = -k[1, 1] * v / z
    pc = p @ cam.extrinsics.rotation               # d pixel / d world point
    j_rot = -pc @ skew(rel)                        # d(ω × rel) = −[rel]× dω
    return np.concatenate([j_rot, pc], axis=2)


def _moments(mask):
    """Pixel area and centroid (pixel-centre convention) of a mask."""
    area = float(mask.sum())
    if area <= 0:
        return 0.0, None
    i, j = np.nonzero(mask)
    w = mask[i, j]
    return area, np.array([np.sum(w * (j + 0.5)), np.sum(w * (i + 0.5))]) / area


def _mismatch(problem, rotation, translation, mask):
    try:
        hard = rasterize_hard(problem.mesh, RigidPose(rotation, translation), problem.camera)
    except BehindCamera:
        return np.inf, None
    return float(np.abs(hard - mask).sum()), hard


def feedback_refine(state: FeedbackState, problem: TrackProblem, t: int) -> FeedbackState:
    """One corrective increment of the translation of frame ``t``.

    The posed mesh is rasterized without blur and its silhouette area and
    centroid are matched to the mask's by a Gauss-Newton step. The centroid
    Jacobian is the mean pixel Jacobian of N_S sampled surface points and the
    square-root area scales with inverse camera depth. The step is halved
    until the count of mismatched pixels drops; no step is taken if it never
    does. Rotations are left to the joint stage.
    """
    if state.iteration >= state.n_iterations:
        raise PreconditionError(f"feedback iteration {state.iteration} >= N_F = {state.n_iterations}")
    mask = problem.masks[t]
    rot, trans = state.rotation, state.translation
    before, hard = _mismatch(problem, rot, trans, mask)
    pts = sample_surface(problem.mesh, problem.feedback_samples, seed=[problem.seed, t, state.iteration])
    best = (before, np.zeros(3))
    a_mask, c_mask = _moments(mask)
    a_ren, c_ren = _moments(hard) if hard is not None else (0.0, None)
    if c_mask is not None and c_ren is not None:
        cam = problem.camera
        jac = _point_jacobian(pts, rot, trans, cam)[:, :, 3:].mean(axis=0)     # centroid, (2, 3)
        depth = float(cam.extrinsics.rotation[2] @ trans + cam.extrinsics.translation[2])
        j_area = -np.sqrt(a_ren) / depth * cam.extrinsics.rotation[2]         # d sqrt(area) / dT
        jm = np.vstack([jac, j_area])
        r = np.concatenate([c_mask - c_ren, [np.sqrt(a_mask) - np.sqrt(a_ren)]])
        d = np.linalg.lstsq(jm, r, rcond=None)[0]
        for k in range(6):
            step = d * 0.5 ** k
            val, _ = _mismatch(problem, rot, trans + step, mask)
            if val < best[0]:
                best = (val, step)
                break
    t2 = trans + best[1]
    return FeedbackState(state.iteration + 1, rot, t2, pts, best[0], 0.0,
                         float(np.linalg.norm(best[1])), state.n_iterations, before)


# ---------------------------------------------------------------------------
# joint optimization
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.k = 0

    def step(self, x, g, lr=None):
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.k)
        vh = self.v / (1 - self.b2 ** self.k)
        return x - (self.lr if lr is None else lr) * mh / (np.sqrt(vh) + self.eps)


class _GapSolver:
    """Exact minimizer of the inertial translation term over unobserved
    frames, holding the observed frames fixed."""

    def __init__(self, n, unobserved):
        d = np.zeros((n - 2, n))
        idx = np.arange(n - 2)
        d[idx, idx] = 1.0
        d[idx, idx + 1] = -2.0
        d[idx, idx + 2] = 1.0
        self.u = np.flatnonzero(unobserved)
        self.o = np.flatnonzero(~unobserved)
        du = d[:, self.u]
        self.ok = len(self.u) > 0 and np.linalg.matrix_rank(du) == len(self.u)
        if self.ok:
            self.pinv = np.linalg.pinv(du)
            self.do = d[:, self.o]

    def __call__(self, t, targets):
        if not self.ok:
            return t
        t = t.copy()
        t[self.u] = self.pinv @ (targets[1:-1] - self.do @ t[self.o])
        return t


@dataclass
class TrackResult:
    poses: PoseSequence
    trace: list                 # energy per joint iteration
    best_trace: list            # best-so-far envelope
    per_frame: np.ndarray       # final per-frame visual loss
    feedback_losses: np.ndarray  # (T, N_F + 1) loss before/after each corrective iteration
    observed: np.ndarray
    parts: dict
    seconds: float

    def diagnostics(self):
        """JSON-ready summary; wall time is left out so reruns compare equal."""
        return {"energy_trace": self.trace, "best_trace": self.best_trace,
                "per_frame_visual": self.per_frame.tolist(),
                "feedback_losses": np.where(np.isfinite(self.feedback_losses),
                                            self.feedback_losses, -1.0).tolist(),
                "observed": self.observed.astype(int).tolist(), "final_parts": self.parts}


def track(problem: TrackProblem, callback=None) -> TrackResult:
    """Corrective per-frame iterations, then joint Adam on E."""
    t0 = time.perf_counter()
    n = len(problem.initial)
    if n < 3 and problem.w_imu > 0:
        raise TooShort("tracking with the inertial term needs at least 3 frames")
    observed = problem.observed
    frames = np.flatnonzero(observed)
    rots = problem.imu.rotations.copy() if problem.rotation_init == "imu" else problem.initial.rotations.copy()
    trans = problem.initial.translations.copy()

    fb = np.full((n, problem.feedback_iterations + 1), np.nan)
    for k in frames:
        st = FeedbackState.start(RigidPose(rots[k], trans[k]), problem.feedback_iterations)
        for i in range(problem.feedback_iterations):
            st = feedback_refine(st, problem, int(k))
            if i == 0:
                fb[k, 0] = st.loss_before
            fb[k, i + 1] = st.loss
        rots[k], trans[k] = st.rotation, st.translation
    log.info("feedback done in %.1fs", time.perf_counter() - t0)

    targets = imu_targets(problem.imu, problem.tau, problem.imu_mode)
    gap = _GapSolver(n, ~observed) if problem.w_imu > 0 and not observed.all() and n >= 3 else None
    if gap is not None:
        trans = gap(trans, targets)

    x6 = matrix_to_rot6d(rots)
    xt = trans
    opt6 = Adam(x6.shape, problem.lr)
    optt = Adam(xt.shape, problem.lr)
    trace, best_trace = [], []
    best = (np.inf, x6, xt, None)
    k_max = problem.iterations
    for it in range(k_max + 1):
        e = energy(problem, (x6, xt), frames, need_grad=it < k_max)
        trace.append(e.value)
        if not np.isfinite(e.value):
            raise NonFiniteEnergy(f"energy became {e.value} at iteration {it}", trace)
        if e.value < best[0]:
            best = (e.value, x6, xt, e)
        best_trace.append(best[0])
        if callback is not None:
            callback(it, e)
        if it == k_max:
            break
        lr = problem.lr * problem.lr_final_ratio ** (it / max(k_max - 1, 1))
        x6 = opt6.step(x6, e.grad_rot6d, lr * problem.lr_rotation_scale)
        xt = optt.step(xt, e.grad_translation, lr)
        if gap is not None:
            xt = gap(xt, targets)
    _, x6, xt, e = best
    poses = PoseSequence(rot6d_to_matrix(x6), xt, problem.tau)
    return TrackResult(poses, trace, best_trace, e.per_frame, fb, observed, e.parts,
                       time.perf_counter() - t0)
