"""Acceptance checks, one per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (lines are repeated in the
terminal summary) or ``python -m tests.test_acceptance``.
"""
import hashlib
import shutil
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from hoicap.cli import main as cli_main, perturb_poses
from hoicap.config import DiffusionConfig
from hoicap.diffusion import (A, COND_DIM, COND_SLICES, HAND_DIM, HAND_SLICES, J_H, J_O, STATE_DIM, THETA_H,
                              THETA_O, DiffusionSchedule, build_denoiser, fk_anchored, forward_diffuse,
                              loss_consistency, loss_imu, loss_offset, loss_velocity, merge_condition, refine,
                              rot6d_to_matrix_torch, sliding_windows, split_condition, state_from_capture,
                              train_filter)
from hoicap.eval import cd_per_frame, cd_window, human_points, object_points
from hoicap.geometry import (PoseSequence, axis_angle_to_matrix, chamfer_distance, egg_mesh,
                             geodesic_angle, matrix_to_rot6d, random_rotations, sample_surface)
from hoicap.imu import ImuStream, calibrate_spatial, normalize_lever_arm, simulate_imu
from hoicap.optimize import TrackProblem, energy, energy_imu, track
from hoicap.render import Camera, area_loss, rasterize_hard, silhouette_loss
from hoicap.simulate import generate_scene
from hoicap.skeleton import N_JOINTS

RESULTS = []


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def random_walk_rotations(n, rng, step_deg=4.0):
    out = [random_rotations(1, rng)[0]]
    for _ in range(n - 1):
        out.append(out[-1] @ axis_angle_to_matrix(rng.normal(size=3) * np.radians(step_deg)))
    return np.stack(out)


# ---------------------------------------------------------------------------

def test_calibration_recovery():
    rng = np.random.default_rng(0)
    t_true = random_rotations(1, rng)[0]
    world = random_walk_rotations(600, rng)
    t0 = time.perf_counter()
    clean = calibrate_spatial(world, t_true.T @ world, stride=5)
    noise = axis_angle_to_matrix(rng.normal(size=(600, 3)) * np.radians(0.5))
    noisy = calibrate_spatial(world, t_true.T @ world @ noise, stride=5)
    secs = time.perf_counter() - t0
    e0 = geodesic_angle(clean.transform, t_true)
    e1 = np.degrees(geodesic_angle(noisy.transform, t_true))
    record("calibration recovery", e0 < 1e-6 and e1 < 1.0 and secs < 1.0,
           f"noiseless {e0:.2e} rad (< 1e-6), 0.5 deg noise {e1:.3f} deg (< 1.0), {secs:.2f} s (< 1)")


def test_lever_arm_normalization():
    w, rho, fps = 3.0, 0.1, 60.0
    t = np.arange(int(2 * fps)) / fps
    rots = axis_angle_to_matrix(np.outer(w * t, [0, 0, 1]))
    r = np.array([rho, 0, 0])
    st = ImuStream(t, rots, -w * w * rots @ r, np.tile([0, 0, w], (len(t), 1)), fps, "free")
    t0 = time.perf_counter()
    fixed = normalize_lever_arm(st, r)
    secs = time.perf_counter() - t0
    frac = np.linalg.norm(fixed.accelerations, axis=1).max() / (w * w * rho)
    record("lever-arm normalization", frac < 0.05 and secs < 1.0,
           f"residual {100 * frac:.3f}% of w^2 rho (< 5%), {secs:.3f} s (< 1)")


def test_synthetic_imu_exactness():
    tau = 1 / 30
    t = np.arange(90) * tau
    a = np.array([0.3, -0.2, 0.5])
    quad = PoseSequence(np.tile(np.eye(3), (90, 1, 1)), [0.1, 0.0, 1.0] + 0.5 * np.outer(t * t, a), tau)
    q_err = np.abs(simulate_imu(quad, n=4).accelerations - a).max()

    # sin(w t): the second difference over step h = n tau scales the truth by
    # (2 - 2 cos wh) / (wh)^2, whose error is below (wh)^2 / 12
    amp, w, n = 0.1, 2 * np.pi * 0.5, 4
    ratios, ok_bound = [], True
    errs = []
    for fps in (30.0, 60.0):
        tt = np.arange(int(4 * fps)) / fps
        traj = PoseSequence(np.tile(np.eye(3), (len(tt), 1, 1)), np.outer(amp * np.sin(w * tt), [1, 0, 0]), 1 / fps)
        acc = simulate_imu(traj, n=n).accelerations[n:-n, 0]
        truth = -amp * w * w * np.sin(w * tt[n:-n])
        err = np.abs(acc - truth).max()
        bound = amp * w * w * (w * n / fps) ** 2 / 12
        ok_bound &= err <= bound
        errs.append(err)
        ratios.append(err / bound)
    order = np.log2(errs[0] / errs[1])
    ok = q_err < 1e-9 and ok_bound and abs(order - 2) < 0.1
    record("synthetic IMU exactness", ok,
           f"quadratic error {q_err:.1e} (< 1e-9); sinusoid error / ((n tau)^2 bound) = "
           f"{ratios[0]:.3f}, {ratios[1]:.3f} (<= 1), observed order {order:.3f} (2)")


# ---------------------------------------------------------------------------

FD_STEP = 1e-7     # below the spacing of signed-distance kinks inside faces


def fd_gradient(f, x, h=FD_STEP):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)))


def gradient_config(seed, mesh, cam):
    rng = np.random.default_rng(seed)
    n = 4
    target = PoseSequence(random_rotations(n, rng), np.array([0, 0, 0.6]) + rng.normal(size=(n, 3)) * 0.03, 1 / 30)
    masks = np.stack([rasterize_hard(mesh, target[k], cam) for k in range(n)])
    imu = simulate_imu(target, n=1)
    r6 = matrix_to_rot6d(target.rotations @ axis_angle_to_matrix(rng.normal(size=(n, 3)) * 0.2))
    t = target.translations + rng.normal(size=(n, 3)) * 0.02
    return r6, t, masks, imu


def test_gradient_correctness():
    mesh = egg_mesh(n_lon=12, n_lat=9)
    cam = Camera.simple(80.0, 48, 48)
    worst = dict.fromkeys(["silhouette", "area", "E_imu", "E"], 0.0)
    t0 = time.perf_counter()
    for seed in range(50):
        r6, t, masks, imu = gradient_config(seed, mesh, cam)
        for name, loss in (("silhouette", silhouette_loss), ("area", area_loss)):
            out = loss(mesh, (r6[0], t[0]), cam, 1.0, masks[0])
            x = np.concatenate([r6[0], t[0]])
            fd = fd_gradient(lambda v: loss(mesh, (v[:6], v[6:]), cam, 1.0, masks[0]).value, x)
            worst[name] = max(worst[name], rel_error(np.concatenate([out.grad_rot6d, out.grad_translation]), fd))
        e = energy_imu((r6, t), imu, 1 / 30)
        g6 = fd_gradient(lambda v: energy_imu((v, t), imu, 1 / 30, need_grad=False).value, r6, 1e-6)
        gt = fd_gradient(lambda v: energy_imu((r6, v), imu, 1 / 30, need_grad=False).value, t, 1e-6)
        worst["E_imu"] = max(worst["E_imu"], rel_error(e.grad_rot6d, g6), rel_error(e.grad_translation, gt))
        init = PoseSequence(np.tile(np.eye(3), (4, 1, 1)), t, 1 / 30)
        p = TrackProblem(mesh, cam, masks, imu, init, w_area=1e-3, sigma=1.0)
        e = energy(p, (r6, t))
        g6 = fd_gradient(lambda v: energy(p, (v, t), need_grad=False).value, r6)
        gt = fd_gradient(lambda v: energy(p, (r6, v), need_grad=False).value, t)
        worst["E"] = max(worst["E"], rel_error(e.grad_rot6d, g6), rel_error(e.grad_translation, gt))
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-3 and secs < 120
    record("gradient correctness", ok,
           "worst relative error over 50 configs " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
           + f" (< 1e-3), {secs:.0f} s (< 120)")


# ---------------------------------------------------------------------------

TRACK_SCENE = {"fps": 30.0, "duration": 10.0}      # defaults: 256x256 camera, 2048-face egg
OCCLUSION = [[105, 195]]                           # 90 of 300 frames


def run_tracking(kind, occlusion=(), w_imu=1e5):
    s = generate_scene({**TRACK_SCENE, "kind": kind, "occlusion": [list(o) for o in occlusion]})
    init = perturb_poses(s.trajectory, 5.0, 5.0, seed=0)
    res = track(TrackProblem(s.mesh, s.camera, s.masks, s.imu, init, w_imu=w_imu))
    pts = sample_surface(s.mesh, 1000, seed=0)
    gt, pr = object_points(pts, s.trajectory), object_points(pts, res.poses)
    cd = np.array([chamfer_distance(pr[k], gt[k]) for k in range(len(gt))])
    terr = 100 * np.linalg.norm(res.poses.translations - s.trajectory.translations, axis=1)
    return s, cd, terr, res.seconds


def test_tracking_accuracy():
    t0 = time.perf_counter()
    cds = {kind: run_tracking(kind)[1] for kind in ("circular", "tumbling")}
    s, _, terr, _ = run_tracking("circular", OCCLUSION)
    _, _, terr_ablate, _ = run_tracking("circular", OCCLUSION, w_imu=0.0)
    secs = time.perf_counter() - t0
    occ = s.occluded
    e_occ, e_abl = terr[occ].mean(), terr_ablate[occ].mean()
    ok = (all(c.max() < 1.0 for c in cds.values()) and e_occ < 2.0 and e_abl >= 3 * e_occ and secs < 600)
    record("tracking accuracy", ok,
           "; ".join(f"{k} CD mean {c.mean():.3f} cm max {c.max():.3f} cm" for k, c in cds.items())
           + f" (< 1.0); occluded translation error {e_occ:.3f} cm (< 2); without IMU {e_abl:.3f} cm "
           f"({e_abl / e_occ:.1f}x, >= 3x); {secs:.0f} s (< 600)")


# ---------------------------------------------------------------------------

def test_diffusion_forward_statistics():
    sch = DiffusionSchedule.linear()
    x0 = np.array([1.0, -2.0, 0.5])
    worst_mean = worst_var = 0.0
    for n in (1, 10, 100, 500, 1000):
        ab = sch.alpha_bar(n)
        x = forward_diffuse(np.tile(x0, (100_000, 1)), n, sch, seed=n)
        mean, var = np.sqrt(ab) * x0, 1 - ab
        # mean error relative to the larger of |mean| and the marginal std
        worst_mean = max(worst_mean, float(np.max(np.abs(x.mean(0) - mean) / np.maximum(np.abs(mean), np.sqrt(var)))))
        worst_var = max(worst_var, float(np.max(np.abs(x.var(0) - var) / var)))
    record("diffusion forward statistics", worst_mean < 0.02 and worst_var < 0.02,
           f"worst mean error {100 * worst_mean:.2f}%, variance error {100 * worst_var:.2f}% "
           f"(< 2%) at 5 levels over 1e5 draws")


class OracleDenoiser:
    trained = True
    dtype = torch.float64

    def __init__(self, truth, window):
        self.window = window
        self.truth = torch.as_tensor(sliding_windows(truth, window)[0])

    def __call__(self, x_n, n, c, m, valid):
        return self.truth.clone()


def test_oracle_reverse_process():
    rng = np.random.default_rng(0)
    truth = rng.normal(size=(6, STATE_DIM))
    initial = truth + rng.normal(size=truth.shape) * 0.1
    sch = DiffusionSchedule.linear()
    oracle = OracleDenoiser(truth, 4)
    worst = max(np.abs(refine(initial, oracle, sch, n0, seed=n0) - truth).max() for n0 in range(1, sch.n_steps + 1))
    record("oracle reverse process", worst == 0.0,
           f"max deviation {worst:.1e} over all {sch.n_steps} start levels (exact)")


def fk_positions(frame, skel):
    rots = rot6d_to_matrix_torch(torch.as_tensor(frame[THETA_H]).reshape(N_JOINTS, 6))
    return fk_anchored(skel, torch.as_tensor(frame[J_H][:3]), rots).numpy()


def moves_joints(x, y, skel):
    """Whether a rotation bump changes any forward-kinematics joint position."""
    return np.abs(fk_positions(y, skel) - fk_positions(x, skel)).max() > 1e-12


def test_regularizer_fixtures():
    s = generate_scene({"kind": "tumbling", "duration": 1.0, "fps": 30.0,
                        "camera": {"height": 32, "width": 32, "focal": 40.0}})
    x = state_from_capture(s.trajectory, s.human, s.imu)[:10].copy()
    t = np.arange(10) / 30
    x[:, J_O] = [0.1, 0, 0.8] + np.outer(t, [0.2, 0.1, 0]) + 0.5 * np.outer(t * t, [0.4, -0.3, 0.2])
    x[:, A] = [0.4, -0.3, 0.2]
    losses = {"L_off": lambda y: loss_offset(y, x), "L_vel": lambda y: loss_velocity(y, x),
              "L_consist": lambda y: loss_consistency(y, s.skeleton), "L_imu": lambda y: loss_imu(y, x, 1 / 30)}
    zero = {k: float(f(x)) for k, f in losses.items()}

    leaves = set(range(N_JOINTS)) - set(int(p) for p in s.skeleton.parents if p >= 0)
    pos = list(range(J_H.start, J_H.stop)) + list(range(J_O.start, J_O.stop))
    rot = [THETA_H.start + 6 * j + k for j in range(N_JOINTS) if j not in leaves for k in range(6)]
    # coordinates each term reads; the last frame has no successor in L_acc
    coords = {"L_off": (pos, 10), "L_vel": (pos, 10), "L_consist": (list(range(J_H.start, J_H.stop)) + rot, 10),
              "L_imu": (list(range(J_O.start, J_O.stop)) + list(range(THETA_O.start, THETA_O.stop)), 9)}
    min_bump, invisible = {}, 0
    for k, (cs, frames) in coords.items():
        vals = []
        for i in cs:
            for f in (0, frames - 1):
                y = x.copy()
                y[f, i] += 1e-6
                if k == "L_consist" and i in rot and not moves_joints(x[f], y[f], s.skeleton):
                    invisible += 1          # 6D scale or twist about a bone: no joint moves
                    continue
                vals.append(float(losses[k](y)) - zero[k])
        min_bump[k] = min(vals)

    shift = np.tile([0.1, -0.2, 0.3], N_JOINTS + 1)
    both = x.copy()
    both[:, np.r_[J_H.start:J_H.stop, J_O.start:J_O.stop]] += shift
    inv_off = float(loss_offset(both, x))
    inv_vel = float(loss_velocity(x + np.random.default_rng(0).normal(size=STATE_DIM), x))

    c, m = split_condition(x)
    layout = (COND_DIM + HAND_DIM == STATE_DIM == 486 and COND_DIM == 216 and HAND_DIM == 270
              and np.array_equal(merge_condition(c, m), x)
              and sum(sl.stop - sl.start for sl in COND_SLICES + HAND_SLICES) == STATE_DIM)
    ok = (max(zero.values()) < 1e-12 and min(min_bump.values()) > 1e-12 and inv_off < 1e-12 and inv_vel < 1e-12
          and layout)
    record("regularizer fixtures", ok,
           "zero on fixtures (max " + f"{max(zero.values()):.1e}" + "), smallest increase from a 1e-6 bump "
           + ", ".join(f"{k} {v:.1e}" for k, v in min_bump.items())
           + f" (> 1e-12; {invisible} rotation bumps move no joint and are skipped), "
           f"common-translation L_off {inv_off:.1e}, constant-shift L_vel {inv_vel:.1e}, "
           f"layout 486 = 216 + 270 {'holds' if layout else 'broken'}")


def test_toy_manifold_refinement():
    torch.set_num_threads(1)
    rng = np.random.default_rng(0)
    w, k = 4, 8
    dim = w * STATE_DIM
    basis = np.linalg.qr(rng.normal(size=(dim, k)))[0]
    offset = rng.normal(size=dim) * 0.5

    def sample(n):
        return (offset + rng.normal(size=(n, k)) @ basis.T).reshape(n, w, STATE_DIM)

    def residual(x):
        d = x.reshape(len(x), -1) - offset
        return np.linalg.norm(d - (d @ basis) @ basis.T, axis=1)

    cfg = DiffusionConfig(window=w, residual=False, hidden=256, layers=3, epochs=100, warmup_epochs=0,
                          batch_size=64, lambda_off=0, lambda_vel=0, lambda_consist=0, lambda_imu=0,
                          condition_noise=0.25)
    sch = DiffusionSchedule.linear()
    t0 = time.perf_counter()
    model = train_filter(sample(2048), build_denoiser(cfg, sch), sch, cfg, hand_drop=0.0).denoiser
    secs = time.perf_counter() - t0
    test = sample(64)
    noisy = test + 0.1 * rng.normal(size=test.shape)
    before = residual(noisy).mean()
    ratios = {}
    for n0 in (50, 100, 200):
        out = np.stack([refine(x, model, sch, n0, hands_valid=True, seed=i) for i, x in enumerate(noisy)])
        ratios[n0] = residual(out).mean() / before
    ok = max(ratios.values()) < 0.05 and secs < 600
    record("toy manifold refinement", ok,
           "residual after / before " + ", ".join(f"n0={n} {100 * r:.2f}%" for n, r in ratios.items())
           + f" (< 5%), training {secs:.0f} s (< 600)")


def test_metric_sanity():
    s = generate_scene({"kind": "circular", "duration": 1.0, "fps": 30.0,
                        "camera": {"height": 32, "width": 32, "focal": 40.0}})
    rng = np.random.default_rng(0)
    h = human_points(s.human.joint_positions)
    o = object_points(sample_surface(s.mesh, 300, seed=0), s.trajectory)
    zero_f = max(cd_per_frame(h[0], o[0], h[0], o[0]))
    zero_w = max(cd_window(h, o, h, o, 1.0, 30.0))
    ph, po = h + rng.normal(size=h.shape) * 0.01, o + rng.normal(size=o.shape) * 0.01
    rot, t = random_rotations(1, rng)[0], rng.normal(size=3)
    mv = lambda x: x @ rot.T + t
    inv_f = max(abs(a - b) for a, b in zip(cd_per_frame(mv(ph[4]), mv(po[4]), h[4], o[4]),
                                            cd_per_frame(ph[4], po[4], h[4], o[4])))
    inv_w = max(abs(a - b) for a, b in zip(cd_window(mv(ph), mv(po), h, o, 0.5, 30.0),
                                            cd_window(ph, po, h, o, 0.5, 30.0)))
    drift = np.arange(len(h))[:, None, None] * np.array([0.004, 0.0, 0.002])
    per = np.mean([cd_per_frame(h[k] + drift[k], o[k] + drift[k], h[k], o[k]) for k in range(len(h))], axis=0)
    win = cd_window(h + drift, o + drift, h, o, 1.0, 30.0)
    ok = (zero_f < 1e-8 and zero_w < 1e-8 and inv_f < 1e-8 and inv_w < 1e-8 and win[0] > per[0]
          and win[1] > per[1])
    record("metric sanity", ok,
           f"identical inputs {max(zero_f, zero_w):.1e}, rigid invariance {max(inv_f, inv_w):.1e} (< 1e-8); "
           f"drifting window CD {win[0]:.2f}/{win[1]:.2f} cm vs per-frame {per[0]:.1e}/{per[1]:.1e} cm")


PIPELINE = """
seed = 3
output_dir = "{out}"

[scene]
kind = "tumbling"
duration = 2.0
fps = 30.0
occlusion = [[20, 30]]

[scene.camera]
focal = 110.0
height = 96
width = 96

[scene.noise]
imu_rotation_deg = 0.5
mask_band_px = 1.0

[tracking]
iterations = 20

[diffusion]
window = 8
hidden = 64
layers = 2
epochs = 3
warmup_epochs = 1
train_scenes = 2
start_level = 50
category = "tumbling"

[evaluation]
window_seconds = 1.0
n_points = 500
"""


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def test_end_to_end_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        out = tmp / "out"
        cfg = tmp / "pipeline.toml"
        cfg.write_text(PIPELINE.format(out=out.as_posix()))
        digests, codes = [], []
        for _ in range(2):
            shutil.rmtree(out, ignore_errors=True)
            for cmd in ("simulate", "track", "train-filter", "refine", "eval", "render"):
                codes.append(cli_main([cmd, str(cfg)]))
            digests.append(tree_digest(out))
        n_files = sum(1 for p in out.rglob("*") if p.is_file())
    ok = all(c == 0 for c in codes) and digests[0] == digests[1]
    record("end-to-end determinism", ok,
           f"{n_files} artifacts, digests {digests[0][:12]} / {digests[1][:12]} "
           f"({'identical' if digests[0] == digests[1] else 'different'}), exit codes {sorted(set(codes))}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
