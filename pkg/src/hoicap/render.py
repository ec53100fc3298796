"""Soft silhouette rasterization with analytic pose gradients.

Per pixel p the occupancy is ``1 - Π_j (1 - sigmoid(d_j(p) / σ))`` where
``d_j`` is the signed 2D distance from p to projected face j (positive
inside). The product is accumulated in log space,
``1 - exp(-Σ_j softplus(d_j / σ))``.

Faces only influence pixels within ``support · σ`` of their projection. The
per-face term is tapered to zero with matching slope at that radius, so the
image stays C¹ in the pose and the analytic gradient is exact for what is
rendered. ``support=None`` evaluates every face at every pixel.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from PIL import Image

from .errors import BehindCamera, DegenerateInput, ShapeMismatch
from .geometry import RigidPose, TriMesh, matrix_to_rot6d, rot6d_backward, rot6d_to_matrix

DEFAULT_SIGMA = 1.0
DEFAULT_SUPPORT = 6.0
Z_NEAR = 1e-3


@dataclass(frozen=True)
class Camera:
    intrinsics: np.ndarray          # 3x3
    extrinsics: RigidPose           # world -> camera
    height: int
    width: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, float).reshape(3, 3)
        object.__setattr__(self, "intrinsics", k)
        fx, fy, cx, cy = k[0, 0], k[1, 1], k[0, 2], k[1, 2]
        if not (fx > 0 and fy > 0):
            raise DegenerateInput("focal lengths must be positive")
        if not (0 < cx < self.width and 0 < cy < self.height):
            raise DegenerateInput("principal point must lie inside the image")
        if not np.allclose(k[2], [0, 0, 1]) or k[1, 0] != 0:
            raise DegenerateInput("intrinsics must be upper triangular with last row (0, 0, 1)")

    @classmethod
    def simple(cls, f, height=256, width=256, rotation=None, translation=(0.0, 0.0, 0.0)):
        k = np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]])
        rot = np.eye(3) if rotation is None else rotation
        return cls(k, RigidPose(rot, translation), height, width)

    @property
    def shape(self):
        return (self.height, self.width)

    def project(self, points_world):
        """Pixel coordinates (u, v) and camera depth of world points."""
        xc = points_world @ self.extrinsics.rotation.T + self.extrinsics.translation
        uvw = xc @ self.intrinsics.T
        return uvw[:, :2] / xc[:, 2:3], xc[:, 2]

    def to_dict(self):
        return {
            "intrinsics": self.intrinsics.tolist(),
            "rotation": self.extrinsics.rotation.reshape(-1).tolist(),
            "translation": self.extrinsics.translation.tolist(),
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["intrinsics"], float),
                   RigidPose(np.array(d["rotation"], float).reshape(3, 3), d["translation"]),
                   int(d["height"]), int(d["width"]))


def save_camera(cam: Camera, path):
    Path(path).write_text(json.dumps(cam.to_dict(), indent=2) + "\n")


def load_camera(path) -> Camera:
    return Camera.from_dict(json.loads(Path(path).read_text()))


def save_mask(mask, path):
    arr = np.clip(np.rint(np.asarray(mask, float) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, optimize=False)


def load_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=float) / 255.0


def check_mask(mask, cam: Camera):
    m = np.asarray(mask, float)
    if m.shape != cam.shape:
        raise ShapeMismatch(f"mask shape {m.shape} does not match camera {cam.shape}")
    if m.size and (m.min() < 0.0 or m.max() > 1.0):
        raise DegenerateInput("mask values must lie in [0, 1]")
    return m


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

_JIT = dict(cache=True, fastmath=True)


@numba.njit(inline="always", **_JIT)
def _edge(px, py, ax, ay, ex, ey, il2, orient):
    """Oriented edge function, squared distance to the segment and the
    parameter of the nearest segment point."""
    rx = px - ax
    ry = py - ay
    e = (ex * ry - ey * rx) * orient
    t = (rx * ex + ry * ey) * il2
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    qx = rx - t * ex
    qy = ry - t * ey
    return e, qx * qx + qy * qy, t


@numba.njit(**_JIT)
def _face_range(p2, fa, fb, fc, margin, oi, oj, h, w):
    """Pixel rows/columns, local to an (h, w) window at (oi, oj), whose
    centres lie within ``margin`` of the face's bounding box."""
    ax, ay = p2[fa, 0], p2[fa, 1]
    bx, by = p2[fb, 0], p2[fb, 1]
    cx, cy = p2[fc, 0], p2[fc, 1]
    j0 = max(0, int(math.ceil(min(ax, bx, cx) - margin - 0.5)) - oj)
    j1 = min(w - 1, int(math.floor(max(ax, bx, cx) + margin - 0.5)) - oj)
    i0 = max(0, int(math.ceil(min(ay, by, cy) - margin - 0.5)) - oi)
    i1 = min(h - 1, int(math.floor(max(ay, by, cy) + margin - 0.5)) - oi)
    return i0, i1, j0, j1


@numba.njit(**_JIT)
def _pair_capacity(p2, faces, valid, margin, oi, oj, h, w):
    n = 0
    for f in range(faces.shape[0]):
        if valid[f]:
            i0, i1, j0, j1 = _face_range(p2, faces[f, 0], faces[f, 1], faces[f, 2], margin, oi, oj, h, w)
            if i1 >= i0 and j1 >= j0:
                n += (i1 - i0 + 1) * (j1 - j0 + 1)
    return n


@numba.njit(**_JIT)
def _forward(p2, faces, valid, sigma, support, oi, oj, h, w, keep, taper, record,
             pair_pix, pair_a, pair_b, pair_coef, pair_nx, pair_ny, pair_t):
    """Multiply (1 - sigmoid(x)) of every contributing face into ``keep``.

    With a finite support the per-face log term is tapered by
    ``softplus(-c) + sigmoid(-c) (x + c)``; that sum is collected in
    ``taper`` and applied once per pixel by the caller (keep · exp(taper)).
    ``keep`` and ``taper`` cover the (h, w) window whose top-left pixel is
    (oi, oj).

    With ``record`` set each contributing (pixel, face) pair stores the
    nearest edge's endpoints, d(log-term)/dd, the unit vector from the nearest
    edge point to the pixel and the edge parameter. Returns the pair count.
    """
    inv_s = 1.0 / sigma
    finite = support > 0.0
    sp_c = 0.0
    sg_c = 0.0
    margin = 1e7
    if finite:
        sp_c = math.log1p(math.exp(-support))
        sg_c = 1.0 / (1.0 + math.exp(support))
        margin = support * sigma
    margin2 = margin * margin
    n = 0
    for f in range(faces.shape[0]):
        if not valid[f]:
            continue
        va = faces[f, 0]
        vb = faces[f, 1]
        vc = faces[f, 2]
        ax = p2[va, 0]
        ay = p2[va, 1]
        bx = p2[vb, 0]
        by = p2[vb, 1]
        cx = p2[vc, 0]
        cy = p2[vc, 1]
        e0x = bx - ax
        e0y = by - ay
        e1x = cx - bx
        e1y = cy - by
        e2x = ax - cx
        e2y = ay - cy
        l0 = e0x * e0x + e0y * e0y
        l1 = e1x * e1x + e1y * e1y
        l2 = e2x * e2x + e2y * e2y
        il0 = 1.0 / l0 if l0 > 0.0 else 0.0
        il1 = 1.0 / l1 if l1 > 0.0 else 0.0
        il2 = 1.0 / l2 if l2 > 0.0 else 0.0
        area2 = e0x * (cy - ay) - e0y * (cx - ax)
        orient = 1.0 if area2 > 0.0 else (-1.0 if area2 < 0.0 else 0.0)
        i0, i1, j0, j1 = _face_range(p2, va, vb, vc, margin, oi, oj, h, w)
        for i in range(i0, i1 + 1):
            py = i + oi + 0.5
            for j in range(j0, j1 + 1):
                px = j + oj + 0.5
                ea, da, ta = _edge(px, py, ax, ay, e0x, e0y, il0, orient)
                eb, db, tb = _edge(px, py, bx, by, e1x, e1y, il1, orient)
                ec, dc, tc = _edge(px, py, cx, cy, e2x, e2y, il2, orient)
                inside = orient != 0.0 and ea > 0.0 and eb > 0.0 and ec > 0.0
                if da <= db and da <= dc:
                    dm = da
                    k = 0
                    t = ta
                elif db <= dc:
                    dm = db
                    k = 1
                    t = tb
                else:
                    dm = dc
                    k = 2
                    t = tc
                if not inside and dm >= margin2:
                    continue
                d = math.sqrt(dm)
                x = d * inv_s if inside else -d * inv_s
                ez = math.exp(-abs(x))
                sg = 1.0 / (1.0 + ez) if x > 0.0 else ez / (1.0 + ez)
                keep[i, j] *= 1.0 - sg
                if finite:
                    taper[i, j] += sp_c + sg_c * (x + support)
                if record and d > 1e-12:
                    if k == 0:
                        qax, qay, qex, qey, ia, ib = ax, ay, e0x, e0y, va, vb
                    elif k == 1:
                        qax, qay, qex, qey, ia, ib = bx, by, e1x, e1y, vb, vc
                    else:
                        qax, qay, qex, qey, ia, ib = cx, cy, e2x, e2y, vc, va
                    pair_pix[n] = i * w + j
                    pair_a[n] = ia
                    pair_b[n] = ib
                    pair_coef[n] = (sg - sg_c) * inv_s if inside else -(sg - sg_c) * inv_s
                    pair_nx[n] = (px - qax - t * qex) / d
                    pair_ny[n] = (py - qay - t * qey) / d
                    pair_t[n] = t
                    n += 1
    return n


@numba.njit(**_JIT)
def _scatter(n, d_s_flat, pair_pix, pair_a, pair_b, pair_coef, pair_nx, pair_ny, pair_t, grad):
    # ∂|p - q| / ∂A = -n (1 - t), ∂|p - q| / ∂B = -n t for q on edge (A, B)
    for m in range(n):
        c = -d_s_flat[pair_pix[m]] * pair_coef[m]
        if c == 0.0:
            continue
        t = pair_t[m]
        gx = c * pair_nx[m]
        gy = c * pair_ny[m]
        a = pair_a[m]
        b = pair_b[m]
        grad[a, 0] += gx * (1.0 - t)
        grad[a, 1] += gy * (1.0 - t)
        grad[b, 0] += gx * t
        grad[b, 1] += gy * t


@numba.njit(**_JIT)
def _hard_raster(p2, faces, valid, h, w, out):
    for f in range(faces.shape[0]):
        if not valid[f]:
            continue
        fa, fb, fc = faces[f, 0], faces[f, 1], faces[f, 2]
        i0, i1, j0, j1 = _face_range(p2, fa, fb, fc, 0.0, 0, 0, h, w)
        ax, ay = p2[fa, 0], p2[fa, 1]
        bx, by = p2[fb, 0], p2[fb, 1]
        cx, cy = p2[fc, 0], p2[fc, 1]
        area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area2 == 0.0:
            continue
        for i in range(i0, i1 + 1):
            py = i + 0.5
            for j in range(j0, j1 + 1):
                px = j + 0.5
                e0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                e1 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                e2 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                if area2 > 0:
                    if e0 >= 0 and e1 >= 0 and e2 >= 0:
                        out[i, j] = 1.0
                elif e0 <= 0 and e1 <= 0 and e2 <= 0:
                    out[i, j] = 1.0


# ---------------------------------------------------------------------------
# forward / backward wrappers
# ---------------------------------------------------------------------------

def _support_value(support):
    return -1.0 if support is None else float(support)


class _Projection:
    """Posed mesh projected into a camera, with what the backward pass needs."""

    def __init__(self, mesh: TriMesh, rotation, translation, cam: Camera):
        self.mesh = mesh
        self.cam = cam
        self.rotation = rotation
        world = mesh.vertices @ rotation.T + translation
        xc = world @ cam.extrinsics.rotation.T + cam.extrinsics.translation
        z = xc[:, 2]
        in_front = z > Z_NEAR
        self.valid = np.all(in_front[mesh.faces], axis=1)
        if not self.valid.any():
            raise BehindCamera("no face lies in front of the camera")
        zs = np.where(in_front, z, 1.0)
        k = cam.intrinsics
        u = (k[0, 0] * xc[:, 0] + k[0, 1] * xc[:, 1]) / zs + k[0, 2]
        v = k[1, 1] * xc[:, 1] / zs + k[1, 2]
        self.p2 = np.ascontiguousarray(np.stack([u, v], axis=1))
        self.xc = xc
        self.zs = zs

    def pull_back(self, g2):
        """Map per-vertex image-plane gradients to (dL/dR, dL/dT)."""
        k = self.cam.intrinsics
        gu, gv = g2[:, 0], g2[:, 1]
        z = self.zs
        gx = gu * k[0, 0] / z
        gy = (gu * k[0, 1] + gv * k[1, 1]) / z
        gz = -(gu * (self.p2[:, 0] - k[0, 2]) + gv * (self.p2[:, 1] - k[1, 2])) / z
        gxc = np.stack([gx, gy, gz], axis=1)
        gw = gxc @ self.cam.extrinsics.rotation
        return gw.T @ self.mesh.vertices, gw.sum(axis=0)


def _unpack_pose(pose):
    """Accept a RigidPose or a ``(rot6d, translation)`` pair."""
    if isinstance(pose, RigidPose):
        r6 = matrix_to_rot6d(pose.rotation)
        return r6, pose.rotation, pose.translation
    r6, t = pose
    r6 = np.asarray(r6, float)
    return r6, rot6d_to_matrix(r6), np.asarray(t, float)


class _Pairs:
    __slots__ = ("n", "pix", "a", "b", "coef", "nx", "ny", "t")


_EMPTY_I = np.zeros(0, np.int32)
_EMPTY_F = np.zeros(0)


def _window(proj: _Projection, margin):
    """Smallest pixel window outside of which every face contributes 0."""
    h, w = proj.cam.shape
    if margin >= 1e7:
        return 0, 0, h, w
    pts = proj.p2[np.unique(proj.mesh.faces[proj.valid])]
    lo = np.ceil(pts.min(axis=0) - margin - 0.5)
    hi = np.floor(pts.max(axis=0) + margin - 0.5)
    j0, i0 = (int(np.clip(x, 0, m)) for x, m in zip(lo, (w, h)))
    j1, i1 = (int(np.clip(x, -1, m - 1)) for x, m in zip(hi, (w, h)))
    return i0, j0, max(i1 - i0 + 1, 0), max(j1 - j0 + 1, 0)


def _keep_map(proj: _Projection, sigma, support, record=False):
    """Π_j (1 - s_j) = 1 - occupancy over the contributing window, the
    window origin and size, and the recorded pair data."""
    sup = _support_value(support)
    margin = sup * sigma if sup > 0 else 1e7
    oi, oj, h, w = _window(proj, margin)
    keep = np.ones((h, w))
    taper = np.zeros((h, w))
    pairs = _Pairs()
    if record:
        cap = _pair_capacity(proj.p2, proj.mesh.faces, proj.valid, margin, oi, oj, h, w)
        pairs.pix, pairs.a, pairs.b = (np.empty(cap, np.int32) for _ in range(3))
        pairs.coef, pairs.nx, pairs.ny, pairs.t = (np.empty(cap) for _ in range(4))
    else:
        pairs.pix = pairs.a = pairs.b = _EMPTY_I
        pairs.coef = pairs.nx = pairs.ny = pairs.t = _EMPTY_F
    pairs.n = _forward(proj.p2, proj.mesh.faces, proj.valid, float(sigma), sup, oi, oj, h, w, keep, taper,
                       record, pairs.pix, pairs.a, pairs.b, pairs.coef, pairs.nx, pairs.ny, pairs.t)
    if sup > 0:
        keep *= np.exp(taper)
    return keep, (oi, oj, h, w), pairs


def _full(crop, win, shape, fill):
    out = np.full(shape, fill)
    oi, oj, h, w = win
    out[oi:oi + h, oj:oj + w] = crop
    return out


def render_soft_silhouette(mesh: TriMesh, pose, cam: Camera, sigma=DEFAULT_SIGMA,
                           support=DEFAULT_SUPPORT):
    """Soft occupancy mask (h, w) with values in [0, 1]."""
    if not sigma > 0:
        raise DegenerateInput("sigma must be positive")
    _, rot, trans = _unpack_pose(pose)
    proj = _Projection(mesh, rot, trans, cam)
    keep, win, _ = _keep_map(proj, sigma, support)
    return _full(1.0 - keep, win, cam.shape, 0.0)


def rasterize_hard(mesh: TriMesh, pose, cam: Camera):
    """Binary mask of pixel centres covered by any projected face."""
    _, rot, trans = _unpack_pose(pose)
    proj = _Projection(mesh, rot, trans, cam)
    h, w = cam.shape
    out = np.zeros((h, w))
    _hard_raster(proj.p2, mesh.faces, proj.valid, h, w, out)
    return out


@dataclass
class LossGrad:
    value: float
    grad_rot6d: np.ndarray
    grad_translation: np.ndarray
    grad_rotation: np.ndarray | None = None     # dL/dR for the 3x3 matrix
    occupancy_window: np.ndarray | None = None
    window: tuple | None = None
    shape: tuple | None = None

    @property
    def occupancy(self):
        """Full-size rendered soft mask."""
        return _full(self.occupancy_window, self.window, self.shape, 0.0)


def mask_losses(mesh: TriMesh, pose, cam: Camera, target, sigma=DEFAULT_SIGMA,
                support=DEFAULT_SUPPORT, w_silhouette=1.0, w_area=0.0, need_grad=True):
    """Weighted sum of the silhouette and area losses with one render pass.

    Returns a :class:`LossGrad`; the gradient is w.r.t. the 6D rotation and
    translation of ``pose`` (and the rotation matrix itself).
    """
    if not sigma > 0:
        raise DegenerateInput("sigma must be positive")
    target = check_mask(target, cam)
    r6, rot, trans = _unpack_pose(pose)
    proj = _Projection(mesh, rot, trans, cam)
    keep, win, pairs = _keep_map(proj, sigma, support, record=need_grad)
    oi, oj, h, w = win
    occ = 1.0 - keep
    tgt = target[oi:oi + h, oj:oj + w]
    resid = occ - tgt
    outside = float(np.sum(target * target)) - float(np.sum(tgt * tgt))
    area_gap = float(occ.sum()) - float(target.sum())
    value = w_silhouette * (float(np.sum(resid * resid)) + outside) + w_area * area_gap * area_gap
    out = LossGrad(value, np.zeros(6), np.zeros(3), np.zeros((3, 3)), occ, win, cam.shape)
    if not need_grad:
        return out
    d_occ = 2.0 * w_silhouette * resid + 2.0 * w_area * area_gap
    d_s = np.ascontiguousarray(d_occ * keep).reshape(-1)
    g2 = np.zeros_like(proj.p2)
    _scatter(pairs.n, d_s, pairs.pix, pairs.a, pairs.b, pairs.coef, pairs.nx, pairs.ny, pairs.t, g2)
    g_rot, g_trans = proj.pull_back(g2)
    out.grad_rot6d = rot6d_backward(r6, g_rot)
    out.grad_translation = g_trans
    out.grad_rotation = g_rot
    return out


def silhouette_loss(mesh, pose, cam, sigma, target, support=DEFAULT_SUPPORT):
    """Σ_p (D(pose)[p] − target[p])² and its gradient."""
    return mask_losses(mesh, pose, cam, target, sigma, support, 1.0, 0.0)


def area_loss(mesh, pose, cam, sigma, target, support=DEFAULT_SUPPORT):
    """(Σ D(pose) − Σ target)² and its gradient."""
    return mask_losses(mesh, pose, cam, target, sigma, support, 0.0, 1.0)
