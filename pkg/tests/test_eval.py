import numpy as np
import pytest

from hoicap.config import EvaluationConfig
from hoicap.errors import DegenerateInput, TooShort
from hoicap.eval import cd_per_frame, cd_window, evaluate, human_points, object_points, sphere_directions
from hoicap.geometry import PoseSequence, random_rotations, sample_surface
from hoicap.simulate import generate_scene


@pytest.fixture(scope="module")
def scene():
    return generate_scene({"kind": "circular", "duration": 1.0, "fps": 30.0,
                           "camera": {"height": 32, "width": 32, "focal": 40.0}})


@pytest.fixture(scope="module")
def clouds(scene):
    template = sample_surface(scene.mesh, 300, seed=0)
    return human_points(scene.human.joint_positions), object_points(template, scene.trajectory)


def rigid(x, rot, t):
    return x @ rot.T + t


def test_human_points_layout():
    j = np.zeros((2, 52, 3))
    pts = human_points(j, radius=0.02, per_joint=20)
    assert pts.shape == (2, 52 * 21, 3)
    np.testing.assert_allclose(np.linalg.norm(sphere_directions(20), axis=1), 1.0)
    assert np.linalg.norm(pts[0, :21], axis=1).max() == pytest.approx(0.02)


def test_per_frame_identity_and_rigid_invariance(clouds, rng):
    h, o = clouds
    assert cd_per_frame(h[0], o[0], h[0], o[0]) == pytest.approx((0.0, 0.0), abs=1e-10)
    rot, t = random_rotations(1, rng)[0], rng.normal(size=3)
    for mode in ("similarity", "rigid"):
        res = cd_per_frame(rigid(h[3], rot, t), rigid(o[3], rot, t), h[3], o[3], mode)
        assert max(res) < 1e-8


def test_per_frame_invariant_to_common_transform_of_predictions(clouds, rng):
    h, o = clouds
    ph, po = h[5] + rng.normal(size=h[5].shape) * 0.01, o[5] + 0.02
    base = cd_per_frame(ph, po, h[5], o[5])
    rot, t = random_rotations(1, rng)[0], rng.normal(size=3)
    moved = cd_per_frame(rigid(ph, rot, t), rigid(po, rot, t), h[5], o[5])
    assert np.abs(np.subtract(moved, base)).max() < 1e-8


def test_object_offset_splits_error(clouds):
    h, o = clouds
    hc, oc = cd_per_frame(h[0], o[0] + [0.03, 0, 0], h[0], o[0])
    assert 0 < hc < 3 and 0 < oc < 3


def test_degenerate_alignment():
    pts = np.zeros((4, 3))
    with pytest.raises(DegenerateInput):
        cd_per_frame(pts, pts, pts, pts)


def test_window_identity_and_invariance(clouds, rng):
    h, o = clouds
    assert cd_window(h, o, h, o, 1.0, 30.0) == pytest.approx((0.0, 0.0), abs=1e-10)
    ph, po = h + rng.normal(size=h.shape) * 0.005, o + rng.normal(size=o.shape) * 0.005
    base = cd_window(ph, po, h, o, 0.5, 30.0)
    rot, t = random_rotations(1, rng)[0], rng.normal(size=3)
    moved = cd_window(rigid(ph, rot, t), rigid(po, rot, t), h, o, 0.5, 30.0)
    assert np.abs(np.subtract(moved, base)).max() < 1e-8


def test_window_exceeds_per_frame_on_drift(clouds):
    h, o = clouds
    drift = np.arange(len(h))[:, None, None] * np.array([0.004, 0.0, 0.002])
    ph, po = h + drift, o + drift                    # every frame exact up to its own translation
    per = np.array([cd_per_frame(ph[k], po[k], h[k], o[k]) for k in range(len(h))]).mean(0)
    win = cd_window(ph, po, h, o, 1.0, 30.0)
    assert per.max() < 1e-8
    assert win[0] > per[0] and win[1] > per[1]


def test_single_frame_window_equals_per_frame(clouds, rng):
    h, o = clouds
    ph, po = h[:1] + rng.normal(size=h[:1].shape) * 0.01, o[:1] + 0.01
    np.testing.assert_allclose(cd_window(ph, po, h[:1], o[:1], 1 / 30, 30.0),
                               cd_per_frame(ph[0], po[0], h[0], o[0]), atol=1e-12)


def test_window_too_short(clouds):
    h, o = clouds
    with pytest.raises(TooShort):
        cd_window(h, o, h, o, 10.0, 30.0)


def test_evaluate_identical_and_report(scene, tmp_path):
    cfg = EvaluationConfig(n_points=500, window_seconds=0.5)
    j = scene.human.joint_positions
    rep = evaluate(scene.trajectory, j, scene.trajectory, j, scene.mesh, cfg)
    assert rep.human_cd < 1e-8 and rep.object_cd < 1e-8 and rep.object_cd_window < 1e-8
    assert rep.per_frame.shape == (30, 2) and rep.per_frame.min() >= 0
    rep.write(tmp_path)
    assert {"report.json", "report.txt", "per_frame.csv"} <= {p.name for p in tmp_path.iterdir()}
    assert len((tmp_path / "per_frame.csv").read_text().splitlines()) == 31


def test_evaluate_is_deterministic(scene):
    cfg = EvaluationConfig(n_points=500, window_seconds=0.5)
    j = scene.human.joint_positions
    pred = PoseSequence(scene.trajectory.rotations, scene.trajectory.translations + 0.01, 1 / 30)
    a = evaluate(pred, j, scene.trajectory, j, scene.mesh, cfg, seed=4)
    b = evaluate(pred, j, scene.trajectory, j, scene.mesh, cfg, seed=4)
    assert a.to_dict() == b.to_dict() and a.object_cd > 0
