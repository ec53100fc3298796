import hashlib

import numpy as np
import pytest

from hoicap.errors import ConfigError
from hoicap.formats import load_human, load_trajectory
from hoicap.geometry import RigidPose, axis_angle_to_matrix
from hoicap.imu import load_imu_csv
from hoicap.render import load_mask, rasterize_hard
from hoicap.simulate import generate_scene, write_scene
from hoicap.skeleton import N_JOINTS, SkeletonModel, forward_kinematics, load_skeleton

SHORT = {"duration": 1.0, "fps": 30.0, "camera": {"height": 96, "width": 96, "focal": 110.0}}


def scene(**kw):
    return generate_scene({**SHORT, **kw})


def test_static_scene():
    s = scene(kind="static")
    assert np.ptp(s.trajectory.translations, axis=0).max() == 0.0
    assert np.abs(s.imu.accelerations).max() < 1e-12
    assert all(np.array_equal(m, s.masks[0]) for m in s.masks)


def test_circular_centripetal_at_60fps():
    rho, w = 0.12, 2 * np.pi * 0.5
    s = generate_scene({**SHORT, "kind": "circular", "fps": 60.0, "duration": 2.0,
                        "imu_source": "difference",
                        "trajectory": {"radius": rho, "angular_rate": w}})
    mag = np.linalg.norm(s.imu.accelerations, axis=1)
    np.testing.assert_allclose(mag, w * w * rho, rtol=0.02)


def test_occlusion_blanks_masks():
    s = scene(kind="circular", occlusion=[[10, 20]])
    assert s.masks[10:20].max() == 0.0
    assert s.masks[:10].sum(axis=(1, 2)).min() > 0 and s.masks[20:].sum(axis=(1, 2)).min() > 0
    assert s.occluded[10:20].all() and not s.occluded[:10].any()


def test_masks_match_hard_raster_outside_occlusion():
    s = scene(kind="tumbling", occlusion=[[5, 8]])
    for k in (0, 12, 29):
        np.testing.assert_array_equal(s.masks[k], rasterize_hard(s.mesh, s.trajectory[k], s.camera))


def test_boundary_noise_only_near_boundary():
    clean = scene(kind="static")
    noisy = scene(kind="static", noise={"mask_band_px": 2.0, "mask_flip_prob": 0.3})
    diff = clean.masks[0] != noisy.masks[0]
    assert diff.any()
    from scipy.ndimage import distance_transform_edt
    hard = clean.masks[0] >= 0.5
    dist = np.where(hard, distance_transform_edt(hard), distance_transform_edt(~hard))
    assert dist[diff].max() <= 2.0


@pytest.mark.parametrize("bad", [{"occlusion": [[20, 40]]}, {"fps": 0.0}, {"kind": "wobble"},
                                 {"unknown": 1}, {"human": {"attach_joint": "tail"}}])
def test_config_errors(bad):
    with pytest.raises(ConfigError) as err:
        scene(**bad)
    assert err.value.field


def test_keyframes_trajectory():
    kf = [{"time": 0.0, "translation": [0, 0, 1.0]}, {"time": 1.0, "translation": [0.1, 0, 1.0]}]
    s = scene(kind="keyframes", trajectory={"keyframes": kf})
    np.testing.assert_allclose(s.trajectory.translations[0], [0, 0, 1.0])


def test_object_rigidly_attached_to_joint():
    s = scene(kind="tumbling")
    j = s.attach_joint
    pos, rot = forward_kinematics(s.skeleton, (s.human.root_rotations, s.human.root_translations),
                                  s.human.local_rotations, return_rotations=True)
    np.testing.assert_allclose(rot[:, j], s.trajectory.rotations, atol=1e-12)
    held = pos[:, j] + np.einsum("tij,j->ti", rot[:, j], s.attach_offset)
    np.testing.assert_allclose(held, s.trajectory.translations, atol=1e-12)


def test_scene_is_deterministic(tmp_path):
    cfg = {**SHORT, "kind": "tumbling", "noise": {"mask_band_px": 1.0, "imu_rotation_deg": 0.5}}
    digests = []
    for name in ("a", "b"):
        out = write_scene(generate_scene(cfg, seed=3), tmp_path / name)
        h = hashlib.sha256()
        for p in sorted(out.rglob("*")):
            if p.is_file():
                h.update(p.relative_to(out).as_posix().encode() + p.read_bytes())
        digests.append(h.hexdigest())
    assert digests[0] == digests[1]
    other = generate_scene(cfg, seed=4)
    assert not np.array_equal(other.imu.rotations, generate_scene(cfg, seed=3).imu.rotations)


def test_written_files_round_trip(tmp_path):
    s = scene(kind="circular")
    out = write_scene(s, tmp_path / "scene")
    assert {"trajectory.json", "imu.csv", "masks", "skeleton.json"} <= {p.name for p in out.iterdir()}
    np.testing.assert_allclose(load_trajectory(out / "trajectory.json").translations, s.trajectory.translations)
    np.testing.assert_allclose(load_imu_csv(out / "imu.csv").accelerations, s.imu.accelerations)
    np.testing.assert_array_equal(load_mask(out / "masks" / "000003.png"), s.masks[3])
    skel, motion, _ = load_human(out / "skeleton.json")
    np.testing.assert_allclose(motion.joint_positions, s.human.joint_positions)
    np.testing.assert_allclose(motion.local_rotations, s.human.local_rotations, atol=1e-12)


# -- skeleton and forward kinematics ---------------------------------------

def test_bundled_skeleton():
    skel = load_skeleton()
    assert skel.n_joints == N_JOINTS == 52 and skel.parents[0] == -1


def test_fk_identity_is_cumulative_offsets():
    skel = load_skeleton()
    pos = forward_kinematics(skel, RigidPose(np.eye(3), np.zeros(3)), np.tile(np.eye(3), (52, 1, 1)))
    expect = np.zeros((52, 3))
    for j, p in enumerate(skel.parents):
        expect[j] = skel.offsets[j] + (expect[p] if p >= 0 else 0)
    np.testing.assert_allclose(pos, expect, atol=1e-15)


def test_fk_two_joint_chain():
    skel = SkeletonModel([-1, 0], [[0, 0, 0], [1, 0, 0]])
    rz = axis_angle_to_matrix([0, 0, np.pi / 2])
    pos = forward_kinematics(skel, RigidPose(np.eye(3), [2, 0, 0]), np.stack([rz, np.eye(3)]))
    np.testing.assert_allclose(pos[1], [2, 1, 0], atol=1e-15)


def test_fk_preserves_bone_lengths(rng):
    skel = load_skeleton()
    rots = axis_angle_to_matrix(rng.normal(size=(52, 3)))
    pos = forward_kinematics(skel, RigidPose(axis_angle_to_matrix(rng.normal(size=3)), rng.normal(size=3)), rots)
    child = np.arange(1, 52)
    bones = np.linalg.norm(pos[child] - pos[skel.parents[child]], axis=1)
    np.testing.assert_allclose(bones, np.linalg.norm(skel.offsets[child], axis=1), atol=1e-12)


def test_skeleton_rejects_cycles():
    from hoicap.errors import DegenerateInput
    with pytest.raises(DegenerateInput):
        SkeletonModel([-1, 2, 1], np.zeros((3, 3)))


def test_shape_scales_offsets():
    skel = load_skeleton()
    np.testing.assert_allclose(skel.scaled(2.0).offsets, skel.offsets * 1.1)
    np.testing.assert_allclose(skel.scaled([2.0] + [5.0] * 9).offsets, skel.offsets * 1.1)
