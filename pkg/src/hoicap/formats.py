"""JSON schemas shared between pipeline stages (trajectories, human motion)."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MissingArtifact, ShapeMismatch
from .geometry import PoseSequence, matrix_to_rot6d, rot6d_to_matrix
from .skeleton import SkeletonModel


def write_json(path, obj):
    """Deterministic JSON (sorted keys, shortest round-trip floats)."""
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing file: {path}")
    return json.loads(path.read_text())


def require(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing file: {path}")
    return path


def trajectory_to_dict(seq: PoseSequence):
    return {"frame_interval": seq.frame_interval, "fps": 1.0 / seq.frame_interval,
            "frames": [{"rotation": r.reshape(-1).tolist(), "translation": t.tolist()}
                       for r, t in zip(seq.rotations, seq.translations)]}


def trajectory_from_dict(d) -> PoseSequence:
    fr = d["frames"]
    rots = np.array([f["rotation"] for f in fr], float).reshape(-1, 3, 3)
    trans = np.array([f["translation"] for f in fr], float).reshape(-1, 3)
    return PoseSequence(rots, trans, float(d["frame_interval"]))


def save_trajectory(seq: PoseSequence, path):
    write_json(path, trajectory_to_dict(seq))


def load_trajectory(path) -> PoseSequence:
    return trajectory_from_dict(read_json(path))


@dataclass
class HumanMotion:
    """Per-frame skeleton state: root pose, local joint rotations and the
    resulting global joint positions."""
    root_rotations: np.ndarray      # (T, 3, 3)
    root_translations: np.ndarray   # (T, 3)
    local_rotations: np.ndarray     # (T, J, 3, 3)
    joint_positions: np.ndarray     # (T, J, 3)

    def __len__(self):
        return len(self.root_translations)

    def slice(self, start, stop):
        sl = slice(start, stop)
        return HumanMotion(self.root_rotations[sl], self.root_translations[sl],
                           self.local_rotations[sl], self.joint_positions[sl])


def save_human(path, skel: SkeletonModel, motion: HumanMotion, frame_interval, extra=None):
    d = {"skeleton": skel.to_dict(), "frame_interval": frame_interval,
         "frames": [{"root_rotation": rr.reshape(-1).tolist(), "root_translation": rt.tolist(),
                     "joint_rot6d": matrix_to_rot6d(lr).tolist(), "joint_positions": jp.tolist()}
                    for rr, rt, lr, jp in zip(motion.root_rotations, motion.root_translations,
                                              motion.local_rotations, motion.joint_positions)]}
    d.update(extra or {})
    write_json(path, d)


def load_human(path):
    """Returns (skeleton, motion, raw dict)."""
    d = read_json(path)
    skel = SkeletonModel.from_dict(d["skeleton"])
    fr = d["frames"]
    motion = HumanMotion(np.array([f["root_rotation"] for f in fr], float).reshape(-1, 3, 3),
                         np.array([f["root_translation"] for f in fr], float).reshape(-1, 3),
                         rot6d_to_matrix(np.array([f["joint_rot6d"] for f in fr], float)),
                         np.array([f["joint_positions"] for f in fr], float))
    if motion.local_rotations.shape[1] != skel.n_joints:
        raise ShapeMismatch("joint count in motion differs from skeleton")
    return skel, motion, d
