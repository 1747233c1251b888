"""Procedural parametric body: blended-capsule humanoid, skinning weights,
one-axis shape morph and signed-distance queries.

The body stands in T pose, z up, facing +y, bilaterally symmetric about x=0.
A single shape coefficient in [-3, 3] inflates or deflates the figure, with
the effect concentrated on torso and hips.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh

JOINT_COUNT = 24

JOINT_NAMES = [
    "pelvis", "hip_l", "hip_r", "spine1", "knee_l", "knee_r", "spine2",
    "ankle_l", "ankle_r", "spine3", "foot_l", "foot_r", "neck", "collar_l",
    "collar_r", "head", "shoulder_l", "shoulder_r", "elbow_l", "elbow_r",
    "wrist_l", "wrist_r", "hand_l", "hand_r",
]

_J = {
    "pelvis": (0.0, 0.0, 0.98),
    "hip_l": (0.095, 0.0, 0.92),
    "hip_r": (-0.095, 0.0, 0.92),
    "spine1": (0.0, 0.0, 1.10),
    "knee_l": (0.105, 0.0, 0.50),
    "knee_r": (-0.105, 0.0, 0.50),
    "spine2": (0.0, 0.0, 1.22),
    "ankle_l": (0.11, 0.0, 0.12),
    "ankle_r": (-0.11, 0.0, 0.12),
    "spine3": (0.0, 0.0, 1.32),
    "foot_l": (0.11, 0.13, 0.045),
    "foot_r": (-0.11, 0.13, 0.045),
    "neck": (0.0, 0.0, 1.50),
    "collar_l": (0.07, 0.0, 1.44),
    "collar_r": (-0.07, 0.0, 1.44),
    "head": (0.0, 0.0, 1.60),
    "shoulder_l": (0.21, 0.0, 1.44),
    "shoulder_r": (-0.21, 0.0, 1.44),
    "elbow_l": (0.48, 0.0, 1.44),
    "elbow_r": (-0.48, 0.0, 1.44),
    "wrist_l": (0.73, 0.0, 1.44),
    "wrist_r": (-0.73, 0.0, 1.44),
    "hand_l": (0.84, 0.0, 1.44),
    "hand_r": (-0.84, 0.0, 1.44),
}

# auxiliary endpoints that are not joints
_HEAD_TOP = (0.0, 0.0, 1.66)
_TOE_L = (0.11, 0.20, 0.035)
_TOE_R = (-0.11, 0.20, 0.035)
_FINGER_L = (0.91, 0.0, 1.44)
_FINGER_R = (-0.91, 0.0, 1.44)

# (start, end, radius, owner joint): owner receives this bone's skin weight
_BONES = [
    ("pelvis", "spine1", 0.130, "pelvis"),
    ("spine1", "spine2", 0.122, "spine1"),
    ("spine2", "spine3", 0.128, "spine2"),
    ("spine3", "neck", 0.118, "spine3"),
    ("neck", "head", 0.052, "neck"),
    ("head", _HEAD_TOP, 0.088, "head"),
    ("collar_l", "shoulder_l", 0.055, "collar_l"),
    ("collar_r", "shoulder_r", 0.055, "collar_r"),
    ("shoulder_l", "elbow_l", 0.046, "shoulder_l"),
    ("shoulder_r", "elbow_r", 0.046, "shoulder_r"),
    ("elbow_l", "wrist_l", 0.038, "elbow_l"),
    ("elbow_r", "wrist_r", 0.038, "elbow_r"),
    ("wrist_l", "hand_l", 0.030, "wrist_l"),
    ("wrist_r", "hand_r", 0.030, "wrist_r"),
    ("hand_l", _FINGER_L, 0.024, "hand_l"),
    ("hand_r", _FINGER_R, 0.024, "hand_r"),
    ("hip_l", "knee_l", 0.082, "hip_l"),
    ("hip_r", "knee_r", 0.082, "hip_r"),
    ("knee_l", "ankle_l", 0.056, "knee_l"),
    ("knee_r", "ankle_r", 0.056, "knee_r"),
    ("ankle_l", "foot_l", 0.046, "ankle_l"),
    ("ankle_r", "foot_r", 0.046, "ankle_r"),
    ("foot_l", _TOE_L, 0.034, "foot_l"),
    ("foot_r", _TOE_R, 0.034, "foot_r"),
]

# per-owner-joint morph gain in meters per unit shape coefficient;
# concentrated on torso and hips, tapering along the limbs
_MORPH_GAIN = {
    "pelvis": 0.0070, "spine1": 0.0070, "spine2": 0.0062, "spine3": 0.0060,
    "neck": 0.0018, "head": 0.0006,
    "collar_l": 0.0040, "collar_r": 0.0040,
    "shoulder_l": 0.0020, "shoulder_r": 0.0020,
    "elbow_l": 0.0014, "elbow_r": 0.0014,
    "wrist_l": 0.0008, "wrist_r": 0.0008,
    "hand_l": 0.0005, "hand_r": 0.0005,
    "hip_l": 0.0042, "hip_r": 0.0042,
    "knee_l": 0.0018, "knee_r": 0.0018,
    "ankle_l": 0.0008, "ankle_r": 0.0008,
    "foot_l": 0.0005, "foot_r": 0.0005,
}

_BLEND = 0.024  # capsule union smoothing length
SHAPE_RANGE = (-3.0, 3.0)


def _as_point(p):
    return np.asarray(_J[p] if isinstance(p, str) else p, dtype=np.float64)


def _segments():
    segs = []
    for s, e, r, owner in _BONES:
        segs.append((_as_point(s), _as_point(e), r, JOINT_NAMES.index(owner)))
    return segs


def _segment_distances(points, segs):
    """Distances from points to capsule surfaces plus closest axis points."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(p)
    d = np.empty((n, len(segs)))
    cp = np.empty((n, len(segs), 3))
    for bi, (a, b, r, _o) in enumerate(segs):
        ab = b - a
        denom = float(ab @ ab)
        t = ((p - a) @ ab) / denom if denom > 0 else np.zeros(n)
        t = np.clip(t, 0.0, 1.0)
        q = a + t[:, None] * ab
        cp[:, bi] = q
        d[:, bi] = np.linalg.norm(p - q, axis=1) - r
    return d, cp


def _capsule_field(points, segs, blend=_BLEND):
    """Smooth-min union of capsule SDFs; 1-Lipschitz, so the value lower-bounds
    the true distance to the implicit surface outside of it."""
    d, _ = _segment_distances(points, segs)
    m = d.min(axis=1, keepdims=True)
    w = np.exp(-(d - m) / blend)
    return m[:, 0] - blend * np.log(w.sum(axis=1))


@dataclass
class BodyModel:
    """Template surface plus joints, skin weights and the shape morph field."""
    template: TriangleMesh
    joints: np.ndarray        # (24, 3)
    weights: np.ndarray       # (V, 24), rows sum to 1
    shape_dir: np.ndarray     # (V, 3) displacement per unit shape coefficient

    @property
    def joint_count(self) -> int:
        return self.weights.shape[1]


def _symmetric_axis(lo, hi, h):
    """Grid coords exactly symmetric about 0 when lo == -hi."""
    if abs(lo + hi) < 1e-12:
        k = int(np.ceil(hi / h))
        pos = np.arange(1, k + 1) * h
        return np.concatenate([-pos[::-1], [0.0], pos])
    return np.arange(lo, hi + h * 0.5, h)


def build_body(resolution: float = 0.015) -> BodyModel:
    """Polygonize the capsule union and attach weights and the morph field.

    The marching grid is symmetric about x=0 so the extracted mesh is
    bilaterally symmetric to floating-point accuracy.
    """
    from skimage import measure

    segs = _segments()
    xs = _symmetric_axis(-0.98, 0.98, resolution)
    ys = np.arange(-0.30, 0.38, resolution)
    zs = np.arange(-0.04, 1.80, resolution)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    vol = np.empty(len(pts))
    chunk = 200_000
    for s in range(0, len(pts), chunk):
        vol[s:s + chunk] = _capsule_field(pts[s:s + chunk], segs)
    vol = vol.reshape(gx.shape)

    verts, faces, _normals, _vals = measure.marching_cubes(
        vol, level=0.0, spacing=(resolution, resolution, resolution))
    verts = verts + np.array([xs[0], ys[0], zs[0]])

    mesh = TriangleMesh(verts, faces.astype(np.int32))
    # orient outward: positive signed volume under CCW-outside convention
    v = mesh.vertices
    f = mesh.faces
    vol6 = np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum()
    if vol6 < 0:
        mesh = TriangleMesh(v, f[:, ::-1].copy())

    weights = skinning_weights(mesh.vertices)
    joints = np.array([_J[name] for name in JOINT_NAMES])
    shape_dir = _shape_direction(mesh.vertices, weights, segs)
    return BodyModel(template=mesh, joints=joints, weights=weights, shape_dir=shape_dir)


def skinning_weights(points) -> np.ndarray:
    """Inverse-distance weights over the two nearest bone segments, summed
    onto each bone's owner joint. Rows sum to 1."""
    segs = _segments()
    d, _cp = _segment_distances(points, segs)
    axis_d = d + np.array([r for (_a, _b, r, _o) in segs])  # distance to bone axis
    n = len(axis_d)
    w = np.zeros((n, JOINT_COUNT))
    near2 = np.argsort(axis_d, axis=1)[:, :2]
    eps = 1e-9
    d0 = axis_d[np.arange(n), near2[:, 0]]
    d1 = axis_d[np.arange(n), near2[:, 1]]
    inv0 = 1.0 / (d0 + eps)
    inv1 = 1.0 / (d1 + eps)
    tot = inv0 + inv1
    owners = np.array([o for (_a, _b, _r, o) in segs])
    np.add.at(w, (np.arange(n), owners[near2[:, 0]]), inv0 / tot)
    np.add.at(w, (np.arange(n), owners[near2[:, 1]]), inv1 / tot)
    return w


def _shape_direction(verts, weights, segs):
    """Radial-from-skeleton direction scaled by the per-joint morph gain."""
    d, cp = _segment_distances(verts, segs)
    order = np.argsort(d, axis=1)[:, :2]
    n = len(verts)
    rows = np.arange(n)
    radial0 = verts - cp[rows, order[:, 0]]
    radial1 = verts - cp[rows, order[:, 1]]
    a0 = np.linalg.norm(radial0, axis=1)
    a1 = np.linalg.norm(radial1, axis=1)
    inv0 = 1.0 / (a0 + 1e-9)
    inv1 = 1.0 / (a1 + 1e-9)
    tot = inv0 + inv1
    dirs = np.zeros((n, 3))
    for radial, share in ((radial0, inv0 / tot), (radial1, inv1 / tot)):
        ln = np.linalg.norm(radial, axis=1, keepdims=True)
        ln[ln[:, 0] == 0] = 1.0
        dirs += share[:, None] * radial / ln
    ln = np.linalg.norm(dirs, axis=1, keepdims=True)
    ln[ln[:, 0] == 0] = 1.0
    dirs /= ln
    gains = np.array([_MORPH_GAIN[name] for name in JOINT_NAMES])
    mag = weights @ gains
    return dirs * mag[:, None]


def body_mesh(model: BodyModel, beta: float) -> TriangleMesh:
    """Morphed body surface: template + beta * shape_dir. beta in [-3, 3]."""
    lo, hi = SHAPE_RANGE
    if not (lo <= beta <= hi):
        raise ValueError(f"shape coefficient {beta} outside [{lo}, {hi}]")
    return model.template.with_vertices(model.template.vertices + beta * model.shape_dir)


def load_external_body(obj_path, weights_path) -> BodyModel:
    """Body from an OBJ plus a whitespace table of per-vertex joint weights.

    The weight file has one row per vertex and 24 columns. The morph field is
    zero for external bodies (only the given shape is available).
    """
    from .mesh import load_obj

    mesh = load_obj(obj_path)
    w = np.loadtxt(weights_path, dtype=np.float64)
    if w.ndim == 1:
        w = w.reshape(-1, JOINT_COUNT)
    if w.shape != (mesh.n_vertices, JOINT_COUNT):
        raise ValueError(
            f"weights shape {w.shape} does not match ({mesh.n_vertices}, {JOINT_COUNT})")
    sums = w.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("weight rows must sum to 1 within 1e-6")
    joints = np.array([_J[name] for name in JOINT_NAMES])
    return BodyModel(template=mesh, joints=joints, weights=w,
                     shape_dir=np.zeros((mesh.n_vertices, 3)))


# ---------------------------------------------------------------------------
# Signed distance


class MeshSDF:
    """Exact signed distance to a closed triangle mesh.

    Nearest faces come from a k-NN search over face centroids that escalates
    k until the best hit is certified closer than any unexamined face can be.
    Sign uses the angle-weighted pseudo-normal of the closest feature.
    """

    def __init__(self, mesh: TriangleMesh):
        if not mesh.is_closed():
            raise ValueError("signed distance requires a closed (watertight) mesh")
        from scipy.spatial import cKDTree

        self.mesh = mesh
        v, f = mesh.vertices, mesh.faces
        self.tri = v[f]
        centroids = self.tri.mean(axis=1)
        self.tree = cKDTree(centroids)
        # max distance from any face centroid to its own corners
        self.reach = float(np.linalg.norm(self.tri - centroids[:, None, :], axis=2).max())

        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        ln = np.linalg.norm(fn, axis=1, keepdims=True)
        ln[ln == 0] = 1.0
        self.face_n = fn / ln

        vn = np.zeros_like(v)
        for c in range(3):
            a = v[f[:, c]]
            b = v[f[:, (c + 1) % 3]]
            d = v[f[:, (c + 2) % 3]]
            e1, e2 = b - a, d - a
            cosang = (e1 * e2).sum(axis=1) / (
                np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            np.add.at(vn, f[:, c], self.face_n * ang[:, None])
        self.vert_n = vn

        edges = mesh.edges()
        nvert = mesh.n_vertices
        self.edge_codes = edges[:, 0].astype(np.int64) * nvert + edges[:, 1]
        en = np.zeros((len(edges), 3))
        for c in range(3):
            a = f[:, c].astype(np.int64)
            b = f[:, (c + 1) % 3].astype(np.int64)
            code = np.minimum(a, b) * nvert + np.maximum(a, b)
            idx = np.searchsorted(self.edge_codes, code)
            np.add.at(en, idx, self.face_n)
        self.edge_n = en

    def _nearest_faces(self, pts):
        """Exact nearest faces/points via escalating centroid k-NN."""
        n = len(pts)
        best_d = np.full(n, np.inf)
        best_cp = np.zeros((n, 3))
        best_f = np.zeros(n, dtype=np.int64)
        pending = np.arange(n)
        k = min(16, len(self.tri))
        while len(pending):
            dk, idx = self.tree.query(pts[pending], k=k)
            if k == 1:
                dk, idx = dk[:, None], idx[:, None]
            sub = pts[pending]
            cand_tris = self.tri[idx.reshape(-1)].reshape(len(sub), k, 3, 3)
            cps = _closest_points_rowwise(sub, cand_tris)
            diffs = np.linalg.norm(cps - sub[:, None, :], axis=2)
            j = np.argmin(diffs, axis=1)
            rows = np.arange(len(sub))
            d_new = diffs[rows, j]
            better = d_new < best_d[pending]
            upd = pending[better]
            best_d[upd] = d_new[better]
            best_cp[upd] = cps[rows[better], j[better]]
            best_f[upd] = idx[rows[better], j[better]]
            if k >= len(self.tri):
                break
            # certified when nothing unexamined can be closer
            kth = dk[:, -1]
            uncertified = best_d[pending] > (kth - self.reach)
            pending = pending[uncertified]
            k = min(k * 4, len(self.tri))
        return best_d, best_cp, best_f

    def query(self, points, return_faces: bool = False):
        """Return (signed_distance, outward_gradient[, nearest_face]) arrays."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        d, cp, bf = self._nearest_faces(pts)
        f = self.mesh.faces
        v = self.mesh.vertices
        tri = f[bf]
        a, b, c = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
        v0, v1, v2 = b - a, c - a, cp - a
        d00 = (v0 * v0).sum(1)
        d01 = (v0 * v1).sum(1)
        d11 = (v1 * v1).sum(1)
        d20 = (v2 * v0).sum(1)
        d21 = (v2 * v1).sum(1)
        den = d00 * d11 - d01 * d01
        den = np.where(den <= 0, 1.0, den)
        bv = (d11 * d20 - d01 * d21) / den
        bw = (d00 * d21 - d01 * d20) / den
        bu = 1.0 - bv - bw

        t = 1e-6
        zu, zv, zw = bu < t, bv < t, bw < t
        nzero = zu.astype(int) + zv.astype(int) + zw.astype(int)

        normal = self.face_n[bf].copy()

        edge_mask = nzero == 1
        if edge_mask.any():
            nvert = self.mesh.n_vertices
            ea = np.where(zu[edge_mask], tri[edge_mask, 1],
                          np.where(zv[edge_mask], tri[edge_mask, 0], tri[edge_mask, 0]))
            eb = np.where(zu[edge_mask], tri[edge_mask, 2],
                          np.where(zv[edge_mask], tri[edge_mask, 2], tri[edge_mask, 1]))
            code = (np.minimum(ea, eb).astype(np.int64) * nvert
                    + np.maximum(ea, eb).astype(np.int64))
            pos = np.searchsorted(self.edge_codes, code)
            pos = np.clip(pos, 0, len(self.edge_codes) - 1)
            hit = self.edge_codes[pos] == code
            en = normal[edge_mask]
            en[hit] = self.edge_n[pos[hit]]
            normal[edge_mask] = en

        vert_mask = nzero >= 2
        if vert_mask.any():
            bary = np.stack([bu, bv, bw], axis=1)
            vi = tri[np.arange(len(tri)), np.argmax(bary, axis=1)]
            normal[vert_mask] = self.vert_n[vi[vert_mask]]

        away = pts - cp
        sign = np.where((away * normal).sum(1) >= 0.0, 1.0, -1.0)
        sd = sign * d
        grad = np.empty_like(pts)
        far = d > 1e-12
        grad[far] = (away[far] / d[far, None]) * sign[far, None]
        if (~far).any():
            nn = normal[~far]
            ln = np.linalg.norm(nn, axis=1, keepdims=True)
            ln[ln == 0] = 1.0
            grad[~far] = nn / ln
        if return_faces:
            return sd, grad, bf
        return sd, grad


def _closest_points_rowwise(pts, tris_per_point):
    """Closest points where each query has its own candidate triangle list.

    pts: (P, 3), tris_per_point: (P, K, 3, 3) -> (P, K, 3).
    """
    P, K = tris_per_point.shape[:2]
    flat_p = np.repeat(pts, K, axis=0)
    flat_t = tris_per_point.reshape(P * K, 3, 3)
    # closest_points_on_triangles is pairwise (Q, T); use its diagonal by
    # calling with singleton triangle lists in chunks
    out = np.empty((P * K, 3))
    chunk = 16384
    for s in range(0, P * K, chunk):
        e = min(s + chunk, P * K)
        out[s:e] = _closest_point_single(flat_p[s:e], flat_t[s:e])
    return out.reshape(P, K, 3)


def _closest_point_single(p, tri):
    """Vectorized closest point for matched (N,3) points and (N,3,3) triangles."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]

    def dot(u, w):
        return (u * w).sum(axis=1)

    ab = b - a
    ac = c - a
    ap = p - a
    d1 = dot(ab, ap)
    d2 = dot(ac, ap)
    bp = p - b
    d3 = dot(ab, bp)
    d4 = dot(ac, bp)
    cp = p - c
    d5 = dot(ab, cp)
    d6 = dot(ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom_ab = d1 - d3
    v_ab = np.divide(d1, denom_ab, out=np.zeros_like(d1), where=denom_ab != 0)
    denom_ac = d2 - d6
    w_ac = np.divide(d2, denom_ac, out=np.zeros_like(d2), where=denom_ac != 0)
    denom_bc = (d4 - d3) + (d5 - d6)
    w_bc = np.divide(d4 - d3, denom_bc, out=np.zeros_like(d4), where=denom_bc != 0)

    tot = va + vb + vc
    tot = np.where(tot == 0, 1.0, tot)
    v_in = (vb / tot)[:, None]
    w_in = (vc / tot)[:, None]
    out = a + v_in * ab + w_in * ac

    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    out[m] = (b + np.clip(w_bc, 0, 1)[:, None] * (c - b))[m]
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out[m] = (a + np.clip(w_ac, 0, 1)[:, None] * ac)[m]
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out[m] = (a + np.clip(v_ab, 0, 1)[:, None] * ab)[m]
    m = (d6 >= 0) & (d5 <= d6)
    out[m] = c[m]
    m = (d3 >= 0) & (d4 <= d3)
    out[m] = b[m]
    m = (d1 <= 0) & (d2 <= 0)
    out[m] = a[m]
    return out


def signed_distance(body: TriangleMesh, points):
    """Signed distance and outward gradient from points to a closed mesh.

    Negative inside, positive outside; gradient points away from the surface.
    Raises ValueError for open meshes.
    """
    sdf = body._cache.get("mesh_sdf")
    if sdf is None:
        sdf = MeshSDF(body)
        body._cache["mesh_sdf"] = sdf
    single = np.asarray(points).ndim == 1
    d, g = sdf.query(points)
    if single:
        return float(d[0]), g[0]
    return d, g


class VoxelSDF:
    """Trilinear signed-distance samples of a closed mesh on a padded grid.

    Exact mesh distances fill a band around the surface; far cells get a
    conservative approximation (contact projection never reads them). Signs
    outside the band come from a flood fill through a thick surface shell.
    """

    def __init__(self, mesh: TriangleMesh, h: float = 0.012, band: float = 0.05,
                 padding: float = 0.10):
        from scipy import ndimage

        self.h = float(h)
        lo = mesh.vertices.min(axis=0) - padding
        hi = mesh.vertices.max(axis=0) + padding
        dims = (np.ceil((hi - lo) / h).astype(int) + 1)
        self.origin = lo
        self.dims = dims

        # rasterize the surface conservatively (sample spacing h/2)
        surf = np.zeros(dims, dtype=bool)
        v, f = mesh.vertices, mesh.faces
        tri = v[f]
        emax = np.linalg.norm(tri - np.roll(tri, 1, axis=1), axis=2).max(axis=1)
        for t in range(len(f)):
            n = max(2, int(np.ceil(emax[t] / (h * 0.5))) + 1)
            uu, vv = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
            keep = uu + vv <= 1.0
            uu, vv = uu[keep], vv[keep]
            pts = (tri[t, 0][None, :] * (1 - uu - vv)[:, None]
                   + tri[t, 1][None, :] * uu[:, None] + tri[t, 2][None, :] * vv[:, None])
            ijk = np.round((pts - lo) / h).astype(int)
            ijk = np.clip(ijk, 0, dims - 1)
            surf[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = True

        approx = ndimage.distance_transform_edt(~surf, sampling=h)

        shell = approx <= (1.6 * h)
        free = ~shell
        labels, _count = ndimage.label(free)
        outside = free & (labels == labels[0, 0, 0])
        inside = free & ~outside

        D = np.where(inside, -approx, approx)

        band_idx = np.argwhere(approx <= band)
        pts = lo + band_idx * h
        sdf = MeshSDF(mesh)
        d_exact, _g = sdf.query(pts)
        D[tuple(band_idx.T)] = d_exact

        self.D = D
        gx, gy, gz = np.gradient(D, h)
        self.G = np.stack([gx, gy, gz], axis=-1)

    def query(self, points):
        """Trilinear signed distance and unit outward gradient."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        q = (p - self.origin) / self.h
        q = np.clip(q, 0.0, np.asarray(self.dims, dtype=np.float64) - 1.000001)
        i0 = np.floor(q).astype(int)
        frac = q - i0
        i1 = np.minimum(i0 + 1, np.asarray(self.dims) - 1)

        def gather(A):
            vals = [
                A[i0[:, 0], i0[:, 1], i0[:, 2]], A[i1[:, 0], i0[:, 1], i0[:, 2]],
                A[i0[:, 0], i1[:, 1], i0[:, 2]], A[i1[:, 0], i1[:, 1], i0[:, 2]],
                A[i0[:, 0], i0[:, 1], i1[:, 2]], A[i1[:, 0], i0[:, 1], i1[:, 2]],
                A[i0[:, 0], i1[:, 1], i1[:, 2]], A[i1[:, 0], i1[:, 1], i1[:, 2]],
            ]
            fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
            if A.ndim == 4:
                fx, fy, fz = fx[:, None], fy[:, None], fz[:, None]
            c00 = vals[0] * (1 - fx) + vals[1] * fx
            c10 = vals[2] * (1 - fx) + vals[3] * fx
            c01 = vals[4] * (1 - fx) + vals[5] * fx
            c11 = vals[6] * (1 - fx) + vals[7] * fx
            c0 = c00 * (1 - fy) + c10 * fy
            c1 = c01 * (1 - fy) + c11 * fy
            return c0 * (1 - fz) + c1 * fz

        d = gather(self.D)
        g = gather(self.G)
        ln = np.linalg.norm(g, axis=1, keepdims=True)
        ln[ln == 0] = 1.0
        return d, g / ln


def collision_field(body: TriangleMesh, h: float = 0.012) -> VoxelSDF:
    """Cached VoxelSDF for a body mesh (keyed on the mesh instance)."""
    fld = body._cache.get("voxel_sdf")
    if fld is None:
        fld = VoxelSDF(body, h=h)
        body._cache["voxel_sdf"] = fld
    return fld
