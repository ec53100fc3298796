"""Chamfer-distance metrics for captured human-object sequences.

Per frame, the predicted human and object points are aligned to ground
truth by one Procrustes solve on their union, then scored separately. The
window metric does the same on all frames of a fixed-length window pooled
into one point set, so drift that per-frame alignment hides shows up.

With no skinned body model, the human is a point proxy: every skeleton
joint plus a few points on a small sphere around it.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import EvaluationConfig
from .errors import ShapeMismatch, TooShort
from .formats import write_json
from .geometry import PoseSequence, TriMesh, apply_similarity, chamfer_distance, procrustes_align, sample_surface

HUMAN_PROXY = "skeleton joints plus points on spheres around them"


def sphere_directions(n):
    """``n`` near-uniform unit vectors (Fibonacci lattice); deterministic."""
    if n <= 0:
        return np.zeros((0, 3))
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def human_points(joints, radius=0.02, per_joint=20):
    """Point proxy (..., J · (1 + per_joint), 3) for joint positions (..., J, 3)."""
    joints = np.asarray(joints, float)
    shell = joints[..., :, None, :] + radius * sphere_directions(per_joint)
    pts = np.concatenate([joints[..., :, None, :], shell], axis=-2)
    return pts.reshape(joints.shape[:-2] + (-1, 3))


def object_points(template, poses: PoseSequence):
    """Template points (N, 3) posed per frame -> (T, N, 3)."""
    return np.einsum("tij,nj->tni", poses.rotations, template) + poses.translations[:, None, :]


def _aligned_cd(ph, po, gh, go, with_scale):
    src = np.concatenate([ph, po])
    dst = np.concatenate([gh, go])
    rot, t, s = procrustes_align(src, dst, with_scale)
    return (chamfer_distance(apply_similarity(ph, rot, t, s), gh),
            chamfer_distance(apply_similarity(po, rot, t, s), go))


def cd_per_frame(pred_human, pred_object, gt_human, gt_object, alignment="similarity"):
    """(human, object) Chamfer distance in cm for one frame after holistic
    alignment of the predicted union onto the ground-truth union."""
    ph, po, gh, go = (np.asarray(a, float).reshape(-1, 3) for a in (pred_human, pred_object, gt_human, gt_object))
    if ph.shape != gh.shape or po.shape != go.shape:
        raise ShapeMismatch("predicted and ground-truth point sets must correspond one to one")
    return _aligned_cd(ph, po, gh, go, alignment == "similarity")


def window_frames(window_seconds, fps):
    return max(int(round(window_seconds * fps)), 1)


def cd_window(pred_human, pred_object, gt_human, gt_object, window_seconds=10.0, fps=30.0,
              alignment="similarity"):
    """Mean over non-overlapping windows of the pooled-window (human, object)
    Chamfer distance; inputs are (T, N, 3) per part. A trailing partial
    window is dropped."""
    arrs = [np.asarray(a, float) for a in (pred_human, pred_object, gt_human, gt_object)]
    if arrs[0].shape != arrs[2].shape or arrs[1].shape != arrs[3].shape:
        raise ShapeMismatch("predicted and ground-truth sequences must correspond one to one")
    n = len(arrs[0])
    w = window_frames(window_seconds, fps)
    if n < w:
        raise TooShort(f"{n} frames do not fill one {window_seconds} s window ({w} frames)")
    res = [_aligned_cd(*(a[s:s + w].reshape(-1, 3) for a in arrs), alignment == "similarity")
           for s in range(0, n - w + 1, w)]
    return tuple(float(v) for v in np.mean(res, axis=0))


@dataclass
class EvalReport:
    human_cd: float             # mean per-frame (cm)
    object_cd: float
    human_cd_window: float      # mean over windows (cm)
    object_cd_window: float
    per_frame: np.ndarray       # (T, 2) human, object
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {"human_cd_cm": self.human_cd, "object_cd_cm": self.object_cd,
                "human_cd_window_cm": self.human_cd_window, "object_cd_window_cm": self.object_cd_window,
                "n_frames": len(self.per_frame), "metadata": self.metadata}

    def to_text(self):
        rows = [("metric", "human (cm)", "object (cm)"),
                ("per-frame CD", f"{self.human_cd:.4f}", f"{self.object_cd:.4f}"),
                ("window CD", f"{self.human_cd_window:.4f}", f"{self.object_cd_window:.4f}")]
        width = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(c.ljust(width[i]) if i == 0 else c.rjust(width[i]) for i, c in enumerate(r))
                 for r in rows]
        lines.insert(1, "  ".join("-" * x for x in width))
        meta = [f"{k}: {v}" for k, v in sorted(self.metadata.items())]
        return "\n".join(meta + [""] + lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["frame", "human_cd_cm", "object_cd_cm"])
        for k, (h, o) in enumerate(self.per_frame):
            wr.writerow([k, f"{h:.17g}", f"{o:.17g}"])
        return buf.getvalue()

    def write(self, out_dir, per_frame_csv=True):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "report.json", self.to_dict())
        (out / "report.txt").write_text(self.to_text())
        if per_frame_csv:
            (out / "per_frame.csv").write_text(self.to_csv())


def evaluate(pred_poses: PoseSequence, pred_joints, gt_poses: PoseSequence, gt_joints, mesh: TriMesh,
             cfg: EvaluationConfig | None = None, seed=0, sequence_id="sequence") -> EvalReport:
    """Score a predicted capture against ground truth."""
    cfg = cfg or EvaluationConfig()
    n = len(gt_poses)
    if len(pred_poses) != n or len(pred_joints) != n or len(gt_joints) != n:
        raise ShapeMismatch("prediction and ground truth cover different frame counts")
    template = sample_surface(mesh, cfg.n_points, seed)
    po, go = object_points(template, pred_poses), object_points(template, gt_poses)
    ph = human_points(pred_joints, cfg.human_sphere_radius, cfg.human_sphere_points)
    gh = human_points(gt_joints, cfg.human_sphere_radius, cfg.human_sphere_points)
    per = np.array([cd_per_frame(ph[k], po[k], gh[k], go[k], cfg.alignment) for k in range(n)])
    fps = 1.0 / gt_poses.frame_interval
    window = cfg.window_seconds
    if n < window_frames(window, fps):
        window = n / fps            # too short for one window: pool the whole sequence
    hw, ow = cd_window(ph, po, gh, go, window, fps, cfg.alignment)
    meta = {"sequence": sequence_id, "fps": fps, "alignment": cfg.alignment,
            "window_seconds": window, "human_proxy": HUMAN_PROXY, "n_points": cfg.n_points}
    return EvalReport(float(per[:, 0].mean()), float(per[:, 1].mean()), hw, ow, per, meta)
