"""Rigid kinematic tree standing in for a skinned body model.

The default tree has 52 joints, 22 body joints followed by 15 joints per
hand, in the usual body-then-left-hand-then-right-hand order. Offsets are in
meters in a z-up frame.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DegenerateInput, ShapeMismatch
from .geometry import RigidPose

N_BODY = 22
N_HAND = 30
N_JOINTS = N_BODY + N_HAND
SHAPE_SCALE_PER_UNIT = 0.05


@dataclass(frozen=True)
class SkeletonModel:
    parents: np.ndarray         # (J,), parents[0] == -1
    offsets: np.ndarray         # (J, 3) rest offset from the parent joint
    names: tuple = ()

    def __post_init__(self):
        par = np.asarray(self.parents, int).reshape(-1)
        off = np.asarray(self.offsets, float).reshape(len(par), 3)
        if len(par) == 0 or par[0] != -1:
            raise DegenerateInput("joint 0 must be the root (parent -1)")
        # parents listed before children rules out cycles
        if np.any(par[1:] < 0) or np.any(par[1:] >= np.arange(1, len(par))):
            raise DegenerateInput("every non-root parent must precede its child")
        if not np.all(np.isfinite(off)):
            raise DegenerateInput("non-finite rest offsets")
        names = tuple(self.names) or tuple(f"joint{k}" for k in range(len(par)))
        if len(names) != len(par):
            raise ShapeMismatch("one name per joint expected")
        object.__setattr__(self, "parents", par)
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "names", names)

    @property
    def n_joints(self):
        return len(self.parents)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no joint named {name!r}") from None

    def scaled(self, shape):
        """Uniform rest-offset scale ``1 + 0.05 · β₀``; ``shape`` may be a
        scalar or a β vector whose first entry is used."""
        b0 = float(np.ravel(shape)[0]) if np.ndim(shape) else float(shape)
        s = 1.0 + SHAPE_SCALE_PER_UNIT * b0
        if s <= 0:
            raise DegenerateInput(f"shape {b0} gives a non-positive scale")
        return SkeletonModel(self.parents, self.offsets * s, self.names)

    def to_dict(self):
        return {"joints": [{"name": n, "parent": int(p), "offset": [float(x) for x in o]}
                           for n, p, o in zip(self.names, self.parents, self.offsets)]}

    @classmethod
    def from_dict(cls, d):
        js = d["joints"]
        return cls(np.array([j["parent"] for j in js]), np.array([j["offset"] for j in js], float),
                   tuple(j["name"] for j in js))


def load_skeleton(path=None) -> SkeletonModel:
    """Read a skeleton JSON file; ``None`` loads the bundled 52-joint tree."""
    if path is None:
        text = resources.files("hoicap").joinpath("data/skeleton52.json").read_text()
    else:
        text = Path(path).read_text()
    return SkeletonModel.from_dict(json.loads(text))


def forward_kinematics(skel: SkeletonModel, root: RigidPose | tuple, joint_rotations, return_rotations=False):
    """Global joint positions for local joint rotations.

    ``joint_rotations`` is (..., J, 3, 3); ``root`` a RigidPose or a pair of
    (..., 3, 3) rotations and (..., 3) translations. Each joint's global
    transform is its parent's composed with (local rotation, rest offset).
    """
    rots = np.asarray(joint_rotations, float)
    if rots.shape[-3:] != (skel.n_joints, 3, 3):
        raise ShapeMismatch(f"expected (..., {skel.n_joints}, 3, 3) rotations, got {rots.shape}")
    if isinstance(root, RigidPose):
        root_r, root_t = root.rotation, root.translation
    else:
        root_r, root_t = (np.asarray(x, float) for x in root)
    batch = rots.shape[:-3]
    g_rot = np.empty(batch + (skel.n_joints, 3, 3))
    g_pos = np.empty(batch + (skel.n_joints, 3))
    for j, p in enumerate(skel.parents):
        if p < 0:
            pr, pt = np.broadcast_to(root_r, batch + (3, 3)), np.broadcast_to(root_t, batch + (3,))
        else:
            pr, pt = g_rot[..., p, :, :], g_pos[..., p, :]
        g_pos[..., j, :] = pt + pr @ skel.offsets[j]
        g_rot[..., j, :, :] = pr @ rots[..., j, :, :]
    return (g_pos, g_rot) if return_rotations else g_pos
