"""Interaction diffusion filter over windows of per-frame interaction states.

A state packs, per frame, 52 joint positions and 6D joint rotations of the
human, the object translation and 6D rotation, and the IMU's 6D rotation and
free acceleration (486 numbers). The denoiser predicts clean windows
(x₀-prediction); refinement noises a captured window to a start level and
runs the deterministic reverse process back to zero.

Joint rotations are local except joint 0, which holds the global root
rotation. Forward kinematics inside the consistency term is anchored at the
predicted root joint position.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import DiffusionConfig
from .errors import (ConfigError, MissingArtifact, NonFiniteLoss, ShapeMismatch, StepOutOfRange, TooShort,
                     UntrainedDenoiser)
from .formats import HumanMotion
from .geometry import PoseSequence, matrix_to_rot6d, rot6d_to_matrix
from .imu import ImuStream
from .skeleton import N_BODY, N_JOINTS, SkeletonModel, load_skeleton

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# state layout
# ---------------------------------------------------------------------------

J_H = slice(0, 3 * N_JOINTS)                        # joint positions
THETA_H = slice(J_H.stop, J_H.stop + 6 * N_JOINTS)  # joint rotations (6D)
J_O = slice(THETA_H.stop, THETA_H.stop + 3)         # object translation
THETA_O = slice(J_O.stop, J_O.stop + 6)             # object rotation (6D)
Q = slice(THETA_O.stop, THETA_O.stop + 6)           # IMU rotation (6D)
A = slice(Q.stop, Q.stop + 3)                       # IMU free acceleration
STATE_DIM = A.stop

J_HB = slice(J_H.start, J_H.start + 3 * N_BODY)
J_HH = slice(J_HB.stop, J_H.stop)
THETA_HB = slice(THETA_H.start, THETA_H.start + 6 * N_BODY)
THETA_HH = slice(THETA_HB.stop, THETA_H.stop)

COND_SLICES = (J_HB, J_O, THETA_HB, THETA_O, Q, A)
HAND_SLICES = (J_HH, THETA_HH)
COND_INDEX = np.concatenate([np.arange(s.start, s.stop) for s in COND_SLICES])
HAND_INDEX = np.concatenate([np.arange(s.start, s.stop) for s in HAND_SLICES])
COND_DIM = len(COND_INDEX)
HAND_DIM = len(HAND_INDEX)

assert STATE_DIM == 486 and COND_DIM == 216 and HAND_DIM == 270
assert np.array_equal(np.sort(np.concatenate([COND_INDEX, HAND_INDEX])), np.arange(STATE_DIM))


def split_condition(x):
    """(c, m): the body/object/IMU slice and the hand slice of states (..., 486)."""
    if x.shape[-1] != STATE_DIM:
        raise ShapeMismatch(f"expected trailing dimension {STATE_DIM}, got {tuple(x.shape)}")
    return x[..., COND_INDEX], x[..., HAND_INDEX]


def merge_condition(c, m):
    """Inverse of ``split_condition``."""
    if c.shape[-1] != COND_DIM or m.shape[-1] != HAND_DIM or c.shape[:-1] != m.shape[:-1]:
        raise ShapeMismatch(f"condition shapes {tuple(c.shape)} and {tuple(m.shape)} do not pair up")
    if torch.is_tensor(c):
        x = c.new_zeros(c.shape[:-1] + (STATE_DIM,))
    else:
        x = np.zeros(c.shape[:-1] + (STATE_DIM,), dtype=np.result_type(c, m))
    x[..., COND_INDEX] = c
    x[..., HAND_INDEX] = m
    return x


def pack_state(joint_positions, joint_rot6d, obj_translation, obj_rot6d, imu_rot6d, imu_acceleration):
    """Concatenate per-frame parts into states (T, 486)."""
    jp = np.asarray(joint_positions, float)
    t = jp.shape[0]
    parts = [jp.reshape(t, -1), np.asarray(joint_rot6d, float).reshape(t, -1),
             np.asarray(obj_translation, float).reshape(t, 3), np.asarray(obj_rot6d, float).reshape(t, 6),
             np.asarray(imu_rot6d, float).reshape(t, 6), np.asarray(imu_acceleration, float).reshape(t, 3)]
    x = np.concatenate(parts, axis=1)
    if x.shape[1] != STATE_DIM:
        raise ShapeMismatch(f"parts add up to {x.shape[1]} numbers per frame, expected {STATE_DIM}")
    return x


def unpack_state(x):
    x = np.asarray(x, float)
    lead = x.shape[:-1]
    return {"joint_positions": x[..., J_H].reshape(lead + (N_JOINTS, 3)),
            "joint_rot6d": x[..., THETA_H].reshape(lead + (N_JOINTS, 6)),
            "obj_translation": x[..., J_O], "obj_rot6d": x[..., THETA_O],
            "imu_rot6d": x[..., Q], "imu_acceleration": x[..., A]}


def state_from_capture(poses: PoseSequence, motion: HumanMotion, imu: ImuStream):
    """States (T, 486) from object poses, skeleton motion and the IMU stream."""
    n = len(poses)
    if len(motion) != n or len(imu) != n:
        raise ShapeMismatch(f"frame counts differ: poses {n}, human {len(motion)}, imu {len(imu)}")
    if motion.local_rotations.shape[1] != N_JOINTS:
        raise ShapeMismatch(f"expected {N_JOINTS} joints, got {motion.local_rotations.shape[1]}")
    rots = motion.local_rotations.copy()
    rots[:, 0] = motion.root_rotations @ rots[:, 0]
    free = imu if imu.kind == "free" else imu.free()
    return pack_state(motion.joint_positions, matrix_to_rot6d(rots), poses.translations,
                      matrix_to_rot6d(poses.rotations), matrix_to_rot6d(free.rotations), free.accelerations)


def capture_from_state(x, skel: SkeletonModel, frame_interval):
    """(object poses, human motion) from states; inverse of ``state_from_capture``
    up to re-orthonormalization of the 6D rotations."""
    p = unpack_state(x)
    rots = rot6d_to_matrix(p["joint_rot6d"])
    root = rots[:, 0].copy()
    local = rots.copy()
    local[:, 0] = np.eye(3)
    jp = p["joint_positions"]
    root_t = jp[:, 0] - root @ skel.offsets[0]
    poses = PoseSequence(rot6d_to_matrix(p["obj_rot6d"]), p["obj_translation"].copy(), frame_interval)
    return poses, HumanMotion(root, root_t, local, jp.copy())


def sliding_windows(states, window, stride=None):
    """Windows (K, W, 486) over a sequence; the last one is flush with the end."""
    states = np.asarray(states)
    n = len(states)
    if n < window:
        raise TooShort(f"{n} frames is shorter than the window of {window}")
    stride = window if stride is None else stride
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return np.stack([states[s:s + window] for s in starts]), np.array(starts)


# ---------------------------------------------------------------------------
# schedule and forward process
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule indexed by steps n = 1..N; arrays hold step n at n − 1."""
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, float).reshape(-1)
        if len(b) == 0 or np.any(b <= 0) or np.any(b >= 1):
            raise ConfigError("betas must lie in (0, 1)", "diffusion.beta_start")
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, n_steps=1000, beta_start=1e-4, beta_end=2e-2):
        return cls(np.linspace(beta_start, beta_end, n_steps))

    @classmethod
    def from_config(cls, cfg: DiffusionConfig):
        return cls.linear(cfg.steps, cfg.beta_start, cfg.beta_end)

    @property
    def n_steps(self):
        return len(self.betas)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)

    def alpha_bar(self, n):
        """ᾱ_n with ᾱ_0 = 1."""
        n = np.asarray(n)
        return np.where(n > 0, np.concatenate([[1.0], self.alpha_bars])[n], 1.0)

    def check_step(self, n):
        n = np.asarray(n)
        if np.any(n < 1) or np.any(n > self.n_steps):
            raise StepOutOfRange(f"step {n.min() if np.any(n < 1) else n.max()} outside [1, {self.n_steps}]")

    def posterior_coefficients(self, n):
        """(c0, cn, var) with mean = c0 · x̂₀ + cn · x_n for q(x_{n−1} | x_n, x₀)."""
        ab = self.alpha_bar(n)
        ab_prev = self.alpha_bar(n - 1)
        beta = self.betas[n - 1]
        c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
        cn = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
        return float(c0), float(cn), float(beta * (1.0 - ab_prev) / (1.0 - ab))

    def digest(self):
        return hashlib.sha256(self.betas.astype("<f8").tobytes()).hexdigest()[:16]


def forward_diffuse(x0, n, schedule: DiffusionSchedule, seed=None):
    """One draw of x_n = √ᾱ_n x₀ + √(1−ᾱ_n) ε.

    ``n`` is a step or an array of steps broadcasting against the leading
    axis of ``x0``.
    """
    schedule.check_step(n)
    x0 = np.asarray(x0, float)
    ab = schedule.alpha_bar(np.asarray(n))
    ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    eps = np.random.default_rng(seed).standard_normal(x0.shape)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# losses (torch; windows are (..., T, 486))
# ---------------------------------------------------------------------------

def _tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, float))


def _pair(pred, target):
    pred, target = _tensor(pred), _tensor(target)
    if pred.shape != target.shape or pred.shape[-1] != STATE_DIM:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ "
                            f"or lack the {STATE_DIM}-wide state axis")
    return pred, target.to(pred.dtype)


def _joints(x):
    return x[..., J_H].reshape(x.shape[:-1] + (N_JOINTS, 3))


def loss_simple(pred, target):
    """Mean absolute error over every coordinate and frame."""
    pred, target = _pair(pred, target)
    return (pred - target).abs().mean()


def loss_offset(pred, target):
    """Σ over joints of the L1 error of object-minus-joint offsets, averaged
    over frames."""
    pred, target = _pair(pred, target)
    dp = pred[..., J_O].unsqueeze(-2) - _joints(pred)
    dt = target[..., J_O].unsqueeze(-2) - _joints(target)
    return (dp - dt).abs().sum(dim=(-1, -2)).mean()


def rot6d_to_matrix_torch(r, eps=1e-8):
    """Gram-Schmidt on the two stored columns; see ``geometry.rot6d_to_matrix``."""
    a1, a2 = r[..., 0:3], r[..., 3:6]
    b1 = a1 / a1.norm(dim=-1, keepdim=True).clamp_min(eps)
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = u2 / u2.norm(dim=-1, keepdim=True).clamp_min(eps)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def fk_anchored(skel: SkeletonModel, root_position, rotations):
    """Joint positions (..., J, 3) from rotations (..., J, 3, 3) whose entry 0
    is the global root rotation, with joint 0 placed at ``root_position``."""
    offsets = torch.as_tensor(skel.offsets, dtype=rotations.dtype)
    g_rot = [rotations[..., 0, :, :]]
    g_pos = [root_position]
    for j in range(1, skel.n_joints):
        p = int(skel.parents[j])
        g_pos.append(g_pos[p] + g_rot[p] @ offsets[j])
        g_rot.append(g_rot[p] @ rotations[..., j, :, :])
    return torch.stack(g_pos, dim=-2)


def loss_consistency(pred, skeleton: SkeletonModel, shape=0.0):
    """L1 between predicted joint positions and forward kinematics of the
    predicted rotations, summed over joints and averaged over frames."""
    pred = _tensor(pred)
    if pred.shape[-1] != STATE_DIM:
        raise ShapeMismatch(f"expected trailing dimension {STATE_DIM}, got {tuple(pred.shape)}")
    if skeleton.n_joints != N_JOINTS:
        raise ShapeMismatch(f"skeleton has {skeleton.n_joints} joints, expected {N_JOINTS}")
    skel = skeleton.scaled(shape)
    jp = _joints(pred)
    rots = rot6d_to_matrix_torch(pred[..., THETA_H].reshape(pred.shape[:-1] + (N_JOINTS, 6)))
    fk = fk_anchored(skel, jp[..., 0, :], rots)
    return (jp - fk).abs().sum(dim=(-1, -2)).mean()


def loss_velocity(pred, target):
    """L1 error of frame-to-frame displacements of all joints and the object."""
    pred, target = _pair(pred, target)
    if pred.shape[-2] < 2:
        raise TooShort("velocity term needs at least 2 frames")
    pos = lambda x: torch.cat([x[..., J_H], x[..., J_O]], dim=-1)
    dp = pos(pred).diff(dim=-2)
    dt = pos(target).diff(dim=-2)
    return (dp - dt).abs().sum(-1).mean()


def loss_imu(pred, target, tau, mode="physical", parts=False):
    """Rotation and acceleration agreement with the IMU signals of ``target``.

    L_rot = mean_t ‖θ̂_o − q‖₁. L_acc compares predicted increments advanced
    by the measured acceleration with ground-truth next-frame increments,
    over interior frames: (ĵ_t − ĵ_{t−1} + k a_t) vs (j_{t+1} − j_t), with
    k = τ² ("physical") or τ²/2 ("literal").
    """
    pred, target = _pair(pred, target)
    if pred.shape[-2] < 2:
        raise TooShort("IMU term needs at least 2 frames")
    k = {"physical": tau * tau, "literal": 0.5 * tau * tau}.get(mode)
    if k is None:
        raise ValueError(f"unknown mode {mode!r}")
    l_rot = (pred[..., THETA_O] - target[..., Q]).abs().sum(-1).mean()
    if pred.shape[-2] < 3:
        l_acc = l_rot.new_zeros(())
    else:
        jo, jt, acc = pred[..., J_O], target[..., J_O], target[..., A]
        lhs = jo[..., 1:-1, :] - jo[..., :-2, :] + k * acc[..., 1:-1, :]
        rhs = jt[..., 2:, :] - jt[..., 1:-1, :]
        l_acc = (lhs - rhs).abs().sum(-1).mean()
    return (l_rot, l_acc) if parts else l_rot + l_acc


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

def timestep_embedding(n, dim):
    """Sinusoidal embedding of integer steps (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    ang = n.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    return nn.functional.pad(emb, (0, dim - 2 * half))


MIN_CORRECTION = 0.05      # floor of the conditioned-slice output scale (data std units)
HAND_WRIST = np.repeat([20, 21], (N_JOINTS - N_BODY) // 2)     # wrist joint of each hand joint


def _hand_positions(x):
    return x[..., J_HH].reshape(x.shape[:-1] + (N_JOINTS - N_BODY, 3))


def _wrists(x):
    return x[..., J_H].reshape(x.shape[:-1] + (N_JOINTS, 3))[..., HAND_WRIST, :]


class MLPDenoiser(nn.Module):
    """x₀-predicting MLP over a flattened window.

    Call as ``model(x_n, n, c, m, m_valid)`` with x_n (B, W, 486), steps n
    (B,), conditions c (B, W, 216), hand motion m (B, W, 270) and validity
    flags (B,). Inputs are standardized with per-coordinate dataset
    statistics (x_n by its marginal at step n).

    The network predicts a scaled correction to a base window: the
    condition itself on the conditioned slice, and on the hand slice either
    the given hand motion or (when flagged invalid) the mean hand pose, with
    joint positions placed relative to their wrists. The last layer starts
    at zero, so an untrained network returns the base.

    With ``residual=False`` the network predicts the standardized clean
    window directly (output ``mean + std · net``). That head suits data on a
    low-dimensional manifold: projecting onto it is a low-rank map, while
    the residual head would have to undo full-rank condition noise.
    """

    def __init__(self, schedule: DiffusionSchedule, window=16, hidden=512, layers=3, embed=64, seed=0,
                 residual=True):
        super().__init__()
        self.window, self.hidden, self.layers, self.embed, self.seed = window, hidden, layers, embed, seed
        self.residual = bool(residual)
        self.schedule_digest = schedule.digest()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            in_dim = window * (STATE_DIM + COND_DIM + HAND_DIM) + 1 + embed
            mods = [nn.Linear(in_dim, hidden), nn.SiLU()]
            for _ in range(layers - 1):
                mods += [nn.Linear(hidden, hidden), nn.SiLU()]
            mods.append(nn.Linear(hidden, window * STATE_DIM))
            nn.init.zeros_(mods[-1].weight)
            nn.init.zeros_(mods[-1].bias)
            self.net = nn.Sequential(*mods)
        self.register_buffer("alpha_bars", torch.as_tensor(np.concatenate([[1.0], schedule.alpha_bars]),
                                                           dtype=torch.float32))
        self.register_buffer("mean", torch.zeros(STATE_DIM))
        self.register_buffer("std", torch.ones(STATE_DIM))
        self.register_buffer("hand_rel_mean", torch.zeros(N_JOINTS - N_BODY, 3))
        self.register_buffer("out_scale", torch.ones(STATE_DIM))
        self.register_buffer("trained_flag", torch.zeros(()))

    dtype = torch.float32

    @property
    def trained(self):
        return bool(self.trained_flag.item())

    @trained.setter
    def trained(self, value):
        self.trained_flag.fill_(1.0 if value else 0.0)

    def set_normalization(self, windows, correction=1.0, floor=1e-3):
        """Dataset statistics; ``correction`` scales the output on the
        conditioned slice (in data standard deviations)."""
        flat = np.asarray(windows, float).reshape(-1, STATE_DIM)
        std = np.maximum(flat.std(axis=0), floor)
        rel = _hand_positions(flat) - _wrists(flat)
        scale = std.copy()
        scale[COND_INDEX] *= correction
        scale[J_HH] = np.maximum(rel.std(axis=0), floor).reshape(-1)
        self.mean.copy_(torch.as_tensor(flat.mean(axis=0)))
        self.std.copy_(torch.as_tensor(std))
        self.hand_rel_mean.copy_(torch.as_tensor(rel.mean(axis=0)))
        self.out_scale.copy_(torch.as_tensor(scale))

    def base(self, c, m, m_valid):
        b = c.shape[0]
        guess = self.mean[torch.as_tensor(HAND_INDEX)].expand_as(m).clone()
        x = merge_condition(c, guess)
        hand_pos = (_wrists(x) + self.hand_rel_mean).reshape(x.shape[:-1] + (-1,))
        x = torch.cat([x[..., :J_HH.start], hand_pos, x[..., J_HH.stop:]], dim=-1)
        valid = m_valid.to(x.dtype).view(b, 1, 1)
        return valid * merge_condition(c, m) + (1.0 - valid) * x

    def forward(self, x_n, n, c, m, m_valid):
        b, w = x_n.shape[:2]
        if w != self.window or x_n.shape[-1] != STATE_DIM:
            raise ShapeMismatch(f"expected (B, {self.window}, {STATE_DIM}) windows, got {tuple(x_n.shape)}")
        ab = self.alpha_bars[n].view(b, 1, 1)
        xs = (x_n - ab.sqrt() * self.mean) / torch.sqrt(ab * self.std ** 2 + (1.0 - ab))
        ci, hi = torch.as_tensor(COND_INDEX), torch.as_tensor(HAND_INDEX)
        cs = (c - self.mean[ci]) / self.std[ci]
        valid = m_valid.to(x_n.dtype).view(b, 1)
        ms = (m - self.mean[hi]) / self.std[hi] * valid.view(b, 1, 1)
        h = torch.cat([xs.reshape(b, -1), cs.reshape(b, -1), ms.reshape(b, -1), valid,
                       timestep_embedding(n, self.embed)], dim=1)
        out = self.net(h).view(b, w, STATE_DIM)
        if not self.residual:
            return self.mean + self.std * out
        return self.base(c, m, m_valid) + self.out_scale * out

    def get_flat(self):
        return nn.utils.parameters_to_vector(self.parameters()).detach().numpy().copy()

    def set_flat(self, flat):
        nn.utils.vector_to_parameters(torch.as_tensor(np.asarray(flat), dtype=torch.float32), self.parameters())


def build_denoiser(cfg: DiffusionConfig, schedule: DiffusionSchedule | None = None, seed=0):
    return MLPDenoiser(schedule or DiffusionSchedule.from_config(cfg), cfg.window, cfg.hidden, cfg.layers,
                       seed=seed, residual=cfg.residual)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    denoiser: MLPDenoiser
    ema: MLPDenoiser
    trace: list = field(default_factory=list)    # per-epoch mean of each loss term
    seconds: float = 0.0


def train_filter(windows, denoiser: MLPDenoiser, schedule: DiffusionSchedule, cfg: DiffusionConfig | None = None,
                 skeleton: SkeletonModel | None = None, shape=0.0, tau=1.0 / 30.0, seed=0, hand_drop=0.5,
                 imu_mode="physical", callback=None) -> TrainResult:
    """Fit the denoiser on clean windows (K, W, 486).

    Each batch draws steps uniformly from 1..N, noises the windows and drops
    the hand condition with probability ``hand_drop``. The condition is
    jittered by up to ``condition_noise`` data standard deviations so the
    network learns to correct imperfect captures; its corrections on that
    slice are scaled to the same size. The loss is L_simple
    plus the offset and velocity terms from the start and the consistency
    and IMU terms once ``warmup_epochs`` have passed. Terms with zero weight
    are skipped. The EMA copy is blended every ``ema_every`` epochs.
    """
    cfg = cfg or DiffusionConfig()
    t0 = time.perf_counter()
    data = np.asarray(windows, float)
    if data.ndim != 3 or len(data) == 0:
        raise ConfigError("training set is empty", "diffusion.train_scenes")
    if data.shape[1:] != (denoiser.window, STATE_DIM):
        raise ConfigError(f"windows of shape {data.shape[1:]} do not fit a denoiser of window "
                          f"{denoiser.window}", "diffusion.window")
    if denoiser.schedule_digest != schedule.digest():
        raise ConfigError("denoiser was built for a different noise schedule", "diffusion.steps")
    if cfg.lambda_consist > 0 and skeleton is None:
        skeleton = load_skeleton()
    ema = copy.deepcopy(denoiser)
    trace = []
    if cfg.epochs == 0:
        return TrainResult(denoiser, ema, trace, time.perf_counter() - t0)

    corr = max(cfg.condition_noise, MIN_CORRECTION)
    denoiser.set_normalization(data, corr)
    ema.set_normalization(data, corr)
    x_all = torch.as_tensor(data, dtype=torch.float32)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(denoiser.parameters(), lr=cfg.learning_rate)
    ab_all = torch.as_tensor(np.concatenate([[1.0], schedule.alpha_bars]), dtype=torch.float32)
    c_std = denoiser.std[torch.as_tensor(COND_INDEX)]
    denoiser.train()
    for epoch in range(cfg.epochs):
        late = epoch >= cfg.warmup_epochs
        weights = {"offset": cfg.lambda_off, "velocity": cfg.lambda_vel,
                   "consistency": cfg.lambda_consist if late else 0.0, "imu": cfg.lambda_imu if late else 0.0}
        sums = dict.fromkeys(["total", "simple", *weights], 0.0)
        perm = torch.randperm(len(x_all), generator=gen)
        n_batches = 0
        for s in range(0, len(perm), cfg.batch_size):
            x0 = x_all[perm[s:s + cfg.batch_size]]
            b = len(x0)
            n = torch.randint(1, schedule.n_steps + 1, (b,), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            valid = (torch.rand(b, generator=gen) >= hand_drop).float()
            ab = ab_all[n].view(b, 1, 1)
            x_n = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
            c, m = split_condition(x0)
            if cfg.condition_noise > 0:
                amp = cfg.condition_noise * torch.rand((b, 1, 1), generator=gen)
                c = c + amp * c_std * torch.randn(c.shape, generator=gen)
            pred = denoiser(x_n, n, c, m * valid.view(b, 1, 1), valid)
            terms = {"simple": loss_simple(pred, x0)}
            if weights["offset"]:
                terms["offset"] = loss_offset(pred, x0)
            if weights["velocity"]:
                terms["velocity"] = loss_velocity(pred, x0)
            if weights["consistency"]:
                terms["consistency"] = loss_consistency(pred, skeleton, shape)
            if weights["imu"]:
                terms["imu"] = loss_imu(pred, x0, tau, imu_mode)
            total = terms["simple"] + sum(weights[k] * v for k, v in terms.items() if k != "simple")
            if not torch.isfinite(total):
                raise NonFiniteLoss(f"training loss became {total.item()} in epoch {epoch}", trace)
            opt.zero_grad()
            total.backward()
            opt.step()
            sums["total"] += total.item()
            for k, v in terms.items():
                sums[k] += v.item()
            n_batches += 1
        trace.append({k: v / n_batches for k, v in sums.items()})
        if (epoch + 1) % cfg.ema_every == 0:
            with torch.no_grad():
                for pe, p in zip(ema.parameters(), denoiser.parameters()):
                    pe.mul_(cfg.ema_decay).add_(p, alpha=1.0 - cfg.ema_decay)
        if callback is not None:
            callback(epoch, trace[-1])
    denoiser.eval()
    ema.eval()
    denoiser.trained = True
    ema.trained = True
    return TrainResult(denoiser, ema, trace, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

@torch.no_grad()
def reverse_process(x_n, c, m, m_valid, denoiser, schedule: DiffusionSchedule, start_level, noise_scale=0.0,
                    seed=0):
    """Run x̂₀-parameterized posterior steps from ``start_level`` down to 0.

    The last step returns the prediction itself; earlier steps take the
    posterior mean plus ``noise_scale`` times its standard deviation.
    """
    gen = torch.Generator().manual_seed(seed)
    b = x_n.shape[0]
    x = x_n
    for n in range(start_level, 0, -1):
        x0 = denoiser(x, torch.full((b,), n, dtype=torch.long), c, m, m_valid)
        if n == 1:
            return x0
        c0, cn, var = schedule.posterior_coefficients(n)
        x = c0 * x0 + cn * x
        if noise_scale > 0:
            x = x + noise_scale * math.sqrt(var) * torch.randn(x.shape, generator=gen, dtype=x.dtype)
    return x


def refine(initial, denoiser, schedule: DiffusionSchedule, start_level=100, hands_valid=False, seed=0,
           noise_scale=0.0):
    """Project captured states (T, 486) onto the learned interaction manifold.

    The sequence is cut into windows of the denoiser's length (the last one
    flush with the end). Conditions come from the input; hand slices are
    zero-filled and flagged invalid unless ``hands_valid``. Each window is
    noised to ``start_level`` and denoised back to step 0.
    """
    if not getattr(denoiser, "trained", False):
        raise UntrainedDenoiser("denoiser has not been trained")
    schedule.check_step(start_level)
    x = np.asarray(initial, float)
    if x.ndim != 2 or x.shape[1] != STATE_DIM:
        raise ShapeMismatch(f"expected (T, {STATE_DIM}) states, got {x.shape}")
    w = denoiser.window
    pad = max(w - len(x), 0)
    xp = np.concatenate([x, np.repeat(x[-1:], pad, axis=0)]) if pad else x
    wins, starts = sliding_windows(xp, w)
    dtype = getattr(denoiser, "dtype", torch.float32)
    c, m = split_condition(wins)
    if not hands_valid:
        m = np.zeros_like(m)
    valid = torch.full((len(wins),), 1.0 if hands_valid else 0.0, dtype=dtype)
    noised = forward_diffuse(wins, start_level, schedule, seed)
    out = reverse_process(torch.as_tensor(noised, dtype=dtype), torch.as_tensor(c, dtype=dtype),
                          torch.as_tensor(m, dtype=dtype), valid, denoiser, schedule, start_level,
                          noise_scale, seed)
    out = out.detach().cpu().numpy().astype(float)
    res = np.empty_like(xp)
    for s, o in zip(starts, out):
        res[s:s + w] = o
    return res[:len(x)]


# ---------------------------------------------------------------------------
# parameter files
# ---------------------------------------------------------------------------

MAGIC = b"HOIDIFF1"


def save_denoiser(model: MLPDenoiser, path, schedule: DiffusionSchedule, extra=None):
    """Flat little-endian float32 tensors after a length-prefixed JSON header."""
    sd = model.state_dict()
    header = {"format": 1, "window": model.window, "hidden": model.hidden, "layers": model.layers,
              "embed": model.embed, "seed": model.seed, "residual": model.residual, "trained": model.trained,
              "schedule": {"steps": schedule.n_steps, "beta_start": float(schedule.betas[0]),
                           "beta_end": float(schedule.betas[-1]), "digest": schedule.digest()},
              "tensors": [[k, list(v.shape)] for k, v in sd.items()]}
    header.update(extra or {})
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(v.detach().to(torch.float32).numpy().astype("<f4").tobytes() for v in sd.values())
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(head)) + head + body)


def read_denoiser_header(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"denoiser parameters {path} not found (run train-filter first)")
    raw = path.read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ConfigError(f"{path} is not a denoiser parameter file", "diffusion")
    (size,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    return json.loads(raw[start:start + size]), raw[start + size:]


def load_denoiser(path, schedule: DiffusionSchedule | None = None) -> MLPDenoiser:
    header, body = read_denoiser_header(path)
    s = header["schedule"]
    sched = DiffusionSchedule.linear(s["steps"], s["beta_start"], s["beta_end"])
    if sched.digest() != s["digest"] or (schedule is not None and schedule.digest() != s["digest"]):
        raise ConfigError(f"{path} was trained with a different noise schedule", "diffusion.steps")
    model = MLPDenoiser(sched, header["window"], header["hidden"], header["layers"], header["embed"],
                        header["seed"], header.get("residual", True))
    flat = np.frombuffer(body, dtype="<f4")
    sd, pos = {}, 0
    for name, shape in header["tensors"]:
        size = int(np.prod(shape))
        if pos + size > len(flat):
            raise ConfigError(f"{path} is truncated", "diffusion")
        sd[name] = torch.as_tensor(flat[pos:pos + size].reshape(shape).copy())
        pos += size
    model.load_state_dict(sd)
    model.eval()
    return model
