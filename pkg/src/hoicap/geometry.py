"""Rotations, rigid poses, triangle meshes, Procrustes alignment and Chamfer distance.

All lengths are meters; ``chamfer_distance`` is the one place that reports
centimeters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import DegenerateInput, EmptySet, ShapeMismatch

_EPS_NORM = 1e-12
M_TO_CM = 100.0


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def rot6d_to_matrix(r):
    """Map 6D rotation vectors (..., 6) to rotation matrices (..., 3, 3).

    The 6 numbers are the first two matrix columns, column-major. The first
    column is normalized, the second is Gram-Schmidt orthogonalized against
    it and the third is their cross product.
    """
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != 6:
        raise ShapeMismatch(f"expected trailing dimension 6, got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise DegenerateInput("6D rotation has non-finite components")
    a1 = r[..., 0:3]
    a2 = r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < _EPS_NORM) or np.any(np.linalg.norm(a2, axis=-1) < _EPS_NORM):
        raise DegenerateInput("6D rotation column has near-zero norm")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < _EPS_NORM * np.maximum(1.0, np.linalg.norm(a2, axis=-1, keepdims=True))):
        raise DegenerateInput("6D rotation columns are parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_backward(r, grad_matrix):
    """Pull a gradient w.r.t. ``rot6d_to_matrix(r)`` back onto ``r``.

    ``grad_matrix`` has shape (..., 3, 3) and holds dL/dR; returns dL/dr (..., 6).
    """
    r = np.asarray(r, dtype=float)
    g = np.asarray(grad_matrix, dtype=float)
    a1 = r[..., 0:3]
    a2 = r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    b1 = a1 / n1
    dot12 = np.sum(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - dot12 * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    b2 = u2 / n2

    g1 = g[..., :, 0].copy()
    g2 = g[..., :, 1].copy()
    g3 = g[..., :, 2]
    # b3 = b1 x b2
    g1 += np.cross(b2, g3)
    g2 += np.cross(g3, b1)
    # b2 = u2 / |u2|
    gu2 = (g2 - b2 * np.sum(b2 * g2, axis=-1, keepdims=True)) / n2
    # u2 = a2 - (b1.a2) b1
    ga2 = gu2 - b1 * np.sum(b1 * gu2, axis=-1, keepdims=True)
    g1 = g1 - dot12 * gu2 - np.sum(gu2 * b1, axis=-1, keepdims=True) * a2
    # b1 = a1 / |a1|
    ga1 = (g1 - b1 * np.sum(b1 * g1, axis=-1, keepdims=True)) / n1
    return np.concatenate([ga1, ga2], axis=-1)


def matrix_to_rot6d(m):
    m = np.asarray(m, dtype=float)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def axis_angle_to_matrix(v):
    v = np.asarray(v, dtype=float)
    return Rotation.from_rotvec(v.reshape(-1, 3)).as_matrix().reshape(v.shape[:-1] + (3, 3))


def matrix_to_axis_angle(m):
    m = np.asarray(m, dtype=float)
    return Rotation.from_matrix(m.reshape(-1, 3, 3)).as_rotvec().reshape(m.shape[:-2] + (3,))


def geodesic_angle(r1, r2):
    """Angle in radians of r1ᵀ·r2, batched over leading dimensions."""
    rel = np.swapaxes(np.asarray(r1, float), -1, -2) @ np.asarray(r2, float)
    cos = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    # arccos loses precision near 0; use the skew part for small angles
    skew = np.stack([rel[..., 2, 1] - rel[..., 1, 2],
                     rel[..., 0, 2] - rel[..., 2, 0],
                     rel[..., 1, 0] - rel[..., 0, 1]], axis=-1)
    sin = np.linalg.norm(skew, axis=-1) / 2.0
    return np.arctan2(sin, np.clip(cos, -1.0, 1.0))


def random_rotations(n, rng):
    return Rotation.random(n, random_state=rng).as_matrix()


def project_to_so3(m):
    """Closest rotation in Frobenius norm, with determinant sign correction."""
    u, _, vt = np.linalg.svd(np.asarray(m, float))
    d = np.sign(np.linalg.det(u @ vt))
    d = np.where(d == 0, 1.0, d)
    fix = np.ones(u.shape[:-2] + (3,))
    fix[..., 2] = d
    return (u * fix[..., None, :]) @ vt


def is_rotation(m, tol=1e-9):
    m = np.asarray(m, float)
    if m.shape[-2:] != (3, 3) or not np.all(np.isfinite(m)):
        return False
    eye = np.eye(3)
    ortho = np.abs(np.swapaxes(m, -1, -2) @ m - eye).max() <= tol
    return bool(ortho and np.all(np.abs(np.linalg.det(m) - 1.0) <= tol))


def skew(w):
    w = np.asarray(w, float)
    z = np.zeros(w.shape[:-1])
    return np.stack([
        np.stack([z, -w[..., 2], w[..., 1]], -1),
        np.stack([w[..., 2], z, -w[..., 0]], -1),
        np.stack([-w[..., 1], w[..., 0], z], -1),
    ], axis=-2)


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, float).reshape(3, 3)
        trans = np.asarray(self.translation, float).reshape(3)
        if not is_rotation(rot, tol=1e-6):
            raise DegenerateInput("pose rotation is not a valid rotation matrix")
        if not np.all(np.isfinite(trans)):
            raise DegenerateInput("pose translation is not finite")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return np.asarray(points, float) @ self.rotation.T + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self ∘ other: apply ``other`` first."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)


@dataclass
class PoseSequence:
    """Per-frame object poses stored as stacked arrays."""

    rotations: np.ndarray          # (T, 3, 3)
    translations: np.ndarray       # (T, 3)
    frame_interval: float

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, float).reshape(-1, 3, 3)
        self.translations = np.asarray(self.translations, float).reshape(-1, 3)
        if len(self.rotations) < 1:
            raise DegenerateInput("pose sequence needs at least one frame")
        if len(self.rotations) != len(self.translations):
            raise ShapeMismatch("rotation and translation counts differ")
        if not self.frame_interval > 0:
            raise DegenerateInput("frame interval must be positive")
        self.frame_interval = float(self.frame_interval)

    def __len__(self):
        return len(self.rotations)

    def __getitem__(self, t) -> RigidPose:
        return RigidPose(self.rotations[t], self.translations[t])

    @property
    def frames(self):
        return [self[t] for t in range(len(self))]

    @classmethod
    def from_poses(cls, poses, frame_interval):
        return cls(np.stack([p.rotation for p in poses]),
                   np.stack([p.translation for p in poses]), frame_interval)

    def copy(self):
        return PoseSequence(self.rotations.copy(), self.translations.copy(), self.frame_interval)


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

def triangle_areas(vertices, faces):
    tri = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    _areas: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(np.asarray(self.vertices, float).reshape(-1, 3))
        self.faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if len(self.faces) == 0:
            raise DegenerateInput("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise DegenerateInput("face index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise DegenerateInput("mesh vertices are not finite")
        self._areas = triangle_areas(self.vertices, self.faces)
        if np.any(self._areas <= 1e-18):
            raise DegenerateInput(f"{int(np.sum(self._areas <= 1e-18))} degenerate (zero-area) faces")

    @property
    def face_areas(self):
        return self._areas

    @property
    def area(self):
        return float(self._areas.sum())

    def transformed(self, pose: RigidPose) -> "TriMesh":
        return TriMesh(pose.apply(self.vertices), self.faces.copy())


def load_obj(path, drop_degenerate=True) -> TriMesh:
    """Read a Wavefront OBJ. Normals and texture coordinates are ignored;
    polygons are fan-triangulated."""
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    v = np.array(verts, float).reshape(-1, 3)
    f = np.array(faces, np.int64).reshape(-1, 3)
    if drop_degenerate and len(f) and f.max() < len(v):
        f = f[triangle_areas(v, f) > 1e-18]
    return TriMesh(v, f)


def save_obj(mesh: TriMesh, path):
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def egg_mesh(radii=(0.10, 0.05, 0.035), n_lon=32, n_lat=33, taper=0.3):
    """Closed egg-shaped test object: a UV ellipsoid whose cross-section
    shrinks along +x. ``2 * n_lon * (n_lat - 1)`` faces (2048 by default)."""
    rx, ry, rz = radii
    theta = np.linspace(0.0, np.pi, n_lat + 1)[1:-1]        # interior rings
    phi = np.linspace(0.0, 2 * np.pi, n_lon, endpoint=False)
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    x = rx * ct * np.ones_like(phi)
    y = ry * st * np.cos(phi)
    z = rz * st * np.sin(phi)
    scale = 1.0 - taper * (x / rx)
    ring = np.stack([x, y * scale, z * scale], axis=-1).reshape(-1, 3)
    verts = np.vstack([[rx, 0, 0], ring, [-rx, 0, 0]])
    top, bottom = 0, len(verts) - 1
    n_rings = n_lat - 1
    faces = []
    for j in range(n_lon):
        jn = (j + 1) % n_lon
        faces.append([top, 1 + jn, 1 + j])
        for i in range(n_rings - 1):
            a, b = 1 + i * n_lon + j, 1 + i * n_lon + jn
            c, d = a + n_lon, b + n_lon
            faces.append([a, b, d])
            faces.append([a, d, c])
        last = 1 + (n_rings - 1) * n_lon
        faces.append([bottom, last + j, last + jn])
    return TriMesh(verts, np.array(faces))


def box_mesh(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)):
    sx, sy, sz = np.asarray(size, float) / 2
    c = np.asarray(center, float)
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]) + c
    f = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
         [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
    return TriMesh(v, np.array(f))


# ---------------------------------------------------------------------------
# sampling, alignment, distances
# ---------------------------------------------------------------------------

def sample_surface(mesh: TriMesh, n: int, seed: int, return_index=False):
    """Area-uniform surface samples. With ``return_index`` also returns the
    source face of each point and its barycentric weights."""
    if n < 1:
        raise DegenerateInput("sample count must be >= 1")
    rng = np.random.default_rng(seed)
    prob = mesh.face_areas / mesh.face_areas.sum()
    face_idx = rng.choice(len(prob), size=n, p=prob)
    u = rng.random(n)
    v = rng.random(n)
    su = np.sqrt(u)
    bary = np.stack([1.0 - su, su * (1.0 - v), su * v], axis=1)
    tri = mesh.vertices[mesh.faces[face_idx]]
    pts = np.einsum("nk,nkd->nd", bary, tri)
    if return_index:
        return pts, face_idx, bary
    return pts


def barycentric_coordinates(points, triangles):
    """Barycentric weights of points w.r.t. their (coplanar) triangles."""
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    v0, v1, v2 = b - a, c - a, points - a
    d00 = np.sum(v0 * v0, 1)
    d01 = np.sum(v0 * v1, 1)
    d11 = np.sum(v1 * v1, 1)
    d20 = np.sum(v2 * v0, 1)
    d21 = np.sum(v2 * v1, 1)
    den = d00 * d11 - d01 * d01
    w1 = (d11 * d20 - d01 * d21) / den
    w2 = (d00 * d21 - d01 * d20) / den
    return np.stack([1.0 - w1 - w2, w1, w2], axis=1)


def procrustes_align(source, target, with_scale=True):
    """Similarity (or rigid) transform minimizing Σ‖s·R·p + t − q‖².

    Returns ``(R, t, s)``; ``s`` is 1 when ``with_scale`` is false.
    """
    p = np.asarray(source, float)
    q = np.asarray(target, float)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ShapeMismatch(f"point sets differ in shape: {p.shape} vs {q.shape}")
    if len(p) < 3:
        raise DegenerateInput("Procrustes needs at least 3 points")
    mp, mq = p.mean(0), q.mean(0)
    pc, qc = p - mp, q - mq
    sv_src = np.linalg.svd(pc, compute_uv=False)
    if sv_src[0] <= 0 or sv_src[1] <= 1e-10 * sv_src[0]:
        raise DegenerateInput("source points are collinear or coincident")
    cov = qc.T @ pc / len(p)
    u, sv, vt = np.linalg.svd(cov)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateInput("cross-covariance is rank deficient")
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rot = (u * d) @ vt
    if with_scale:
        var_p = np.sum(pc ** 2) / len(p)
        s = float(np.sum(sv * d) / var_p)
    else:
        s = 1.0
    t = mq - s * rot @ mp
    return rot, t, s


def apply_similarity(points, rot, t, s=1.0):
    return s * np.asarray(points, float) @ rot.T + t


def chamfer_distance(a, b):
    """Symmetric mean nearest-neighbour distance, meters in, centimeters out."""
    a = np.asarray(a, float).reshape(-1, 3)
    b = np.asarray(b, float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("chamfer distance needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (d_ab.mean() + d_ba.mean()) * M_TO_CM
