"""Triangle meshes, OBJ I/O, graph Laplacians and exact surface distances.

Conventions: positions are float64 meters, faces are CCW when viewed from
outside, OBJ indices are 1-based. Meshes are immutable after construction;
operations return new instances.
"""
from __future__ import annotations

import hashlib

import numpy as np
import scipy.sparse as _sp


class MeshFormatError(ValueError):
    """Malformed OBJ input or violated mesh invariant."""


class SparseMatrix:
    """Immutable real sparse matrix (CSR backed).

    Exposes (row, col, value) triplets plus matvec/matmat with dense arrays,
    which is all the graph layers need.
    """

    def __init__(self, csr: _sp.csr_matrix):
        csr = _sp.csr_matrix(csr, dtype=np.float64)
        csr.sum_duplicates()
        self._csr = csr
        self._t = None

    @classmethod
    def from_triplets(cls, rows, cols, values, shape):
        m = _sp.coo_matrix((np.asarray(values, dtype=np.float64),
                            (np.asarray(rows), np.asarray(cols))), shape=shape)
        return cls(m.tocsr())

    @classmethod
    def from_dense(cls, a):
        return cls(_sp.csr_matrix(np.asarray(a, dtype=np.float64)))

    @property
    def shape(self):
        return self._csr.shape

    @property
    def rows(self) -> int:
        return self._csr.shape[0]

    @property
    def cols(self) -> int:
        return self._csr.shape[1]

    @property
    def nnz(self) -> int:
        return self._csr.nnz

    def triplets(self):
        """Return (row_idx, col_idx, value) arrays; no duplicate (row, col) pairs."""
        coo = self._csr.tocoo()
        return coo.row.copy(), coo.col.copy(), coo.data.copy()

    def to_dense(self):
        return self._csr.toarray()

    def transpose(self):
        if self._t is None:
            self._t = SparseMatrix(self._csr.T.tocsr())
            self._t._t = self
        return self._t

    def __matmul__(self, other):
        if isinstance(other, SparseMatrix):
            return SparseMatrix(self._csr @ other._csr)
        out = self._csr @ np.asarray(other, dtype=np.float64)
        return np.asarray(out)

    def is_symmetric(self, tol=1e-10) -> bool:
        d = self._csr - self._csr.T
        return abs(d).max() <= tol if d.nnz else True

    def scaled(self, alpha):
        return SparseMatrix(self._csr * float(alpha))

    def add(self, other, beta=1.0):
        return SparseMatrix(self._csr + other._csr * float(beta))

    @classmethod
    def identity(cls, n):
        return cls(_sp.identity(n, dtype=np.float64, format="csr"))

    def __repr__(self):
        return f"SparseMatrix({self.rows}x{self.cols}, nnz={self.nnz})"


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class TriangleMesh:
    """Indexed triangle mesh.

    Fields:
      vertices    (N, 3) float64
      faces       (F, 3) int32, CCW winding
      uv          optional (N, 2): one chart coordinate per vertex
      panel_id    optional (N,) int32: panel label per vertex
      corner_uv   optional (F, 3, 2): per-corner chart coords (differs from
                  the per-vertex uv only along panel seams)
      face_panel  optional (F,) int32: panel owning each face
    """

    def __init__(self, vertices, faces, uv=None, panel_id=None,
                 corner_uv=None, face_panel=None, validate=True):
        self.vertices = _readonly(np.asarray(vertices, dtype=np.float64).reshape(-1, 3))
        self.faces = _readonly(np.asarray(faces, dtype=np.int32).reshape(-1, 3))
        self.uv = None if uv is None else _readonly(np.asarray(uv, dtype=np.float64).reshape(-1, 2))
        self.panel_id = None if panel_id is None else _readonly(np.asarray(panel_id, dtype=np.int32).reshape(-1))
        self.corner_uv = None if corner_uv is None else _readonly(
            np.asarray(corner_uv, dtype=np.float64).reshape(-1, 3, 2))
        self.face_panel = None if face_panel is None else _readonly(
            np.asarray(face_panel, dtype=np.int32).reshape(-1))
        self._cache = {}
        if validate:
            self._validate()

    def _validate(self):
        n, f = len(self.vertices), len(self.faces)
        if f and (self.faces.min() < 0 or self.faces.max() >= n):
            raise MeshFormatError("face index out of range")
        if f:
            a, b, c = self.faces.T
            if np.any((a == b) | (b == c) | (a == c)):
                raise MeshFormatError("degenerate face with repeated vertex indices")
        if self.uv is not None and len(self.uv) != n:
            raise MeshFormatError(f"uv count {len(self.uv)} != vertex count {n}")
        if self.panel_id is not None and len(self.panel_id) != n:
            raise MeshFormatError("panel_id count != vertex count")
        if self.corner_uv is not None and len(self.corner_uv) != f:
            raise MeshFormatError("corner_uv count != face count")
        if self.face_panel is not None and len(self.face_panel) != f:
            raise MeshFormatError("face_panel count != face count")
        counts = self.edge_face_counts()
        if counts.size and counts.max() > 2:
            raise MeshFormatError("non-manifold edge shared by more than two faces")

    # ---- derived data (cached; recomputation is the only race, which is benign)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges(self):
        """Unique undirected edges as an (E, 2) int32 array with e[:,0] < e[:,1]."""
        if "edges" not in self._cache:
            f = self.faces
            raw = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
            raw = np.sort(raw, axis=1)
            self._cache["edges"] = _readonly(np.unique(raw, axis=0).astype(np.int32))
        return self._cache["edges"]

    def edge_face_counts(self):
        """Per unique undirected edge, how many faces use it."""
        if "efc" not in self._cache:
            f = self.faces
            if not len(f):
                self._cache["efc"] = np.zeros(0, dtype=np.int64)
                self._cache["edges"] = _readonly(np.zeros((0, 2), dtype=np.int32))
            else:
                raw = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
                raw = np.sort(raw, axis=1)
                uniq, counts = np.unique(raw, axis=0, return_counts=True)
                self._cache["edges"] = _readonly(uniq.astype(np.int32))
                self._cache["efc"] = counts
        return self._cache["efc"]

    def boundary_edges(self):
        counts = self.edge_face_counts()
        return self.edges()[counts == 1]

    def is_closed(self) -> bool:
        counts = self.edge_face_counts()
        return bool(counts.size) and bool(np.all(counts == 2))

    def face_normals(self, normalize=True):
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if normalize:
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            ln[ln == 0] = 1.0
            n = n / ln
        return n

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def with_vertices(self, new_vertices):
        """Same topology and chart data, new positions."""
        return TriangleMesh(new_vertices, self.faces, uv=self.uv, panel_id=self.panel_id,
                            corner_uv=self.corner_uv, face_panel=self.face_panel, validate=False)

    def topology_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.n_vertices).tobytes())
        h.update(np.ascontiguousarray(self.faces, dtype=np.int64).tobytes())
        return h.hexdigest()

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_cache"] = {}
        return state

    def __repr__(self):
        return f"TriangleMesh(V={self.n_vertices}, F={self.n_faces})"


# ---------------------------------------------------------------------------
# OBJ I/O


def load_obj(path) -> TriangleMesh:
    """Parse an ASCII OBJ (v/vt/f records, optional g groups as panels).

    Quads and malformed records raise MeshFormatError with the line number.
    Per-corner vt indices are kept in corner_uv; the per-vertex uv takes the
    first chart seen for each vertex.
    """
    verts: list = []
    uvs: list = []
    faces: list = []
    face_uv_idx: list = []
    face_group: list = []
    group_names: dict = {}
    current_group = None

    def err(lineno, msg):
        return MeshFormatError(f"{path}:{lineno}: {msg}")

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise err(lineno, "vertex needs 3 coordinates")
                try:
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError:
                    raise err(lineno, f"bad vertex coordinate in {s!r}")
            elif tag == "vt":
                if len(parts) < 3:
                    raise err(lineno, "vt needs 2 coordinates")
                try:
                    uvs.append([float(parts[1]), float(parts[2])])
                except ValueError:
                    raise err(lineno, f"bad uv coordinate in {s!r}")
            elif tag == "g" or tag == "o":
                name = parts[1] if len(parts) > 1 else ""
                if name not in group_names:
                    group_names[name] = len(group_names)
                current_group = group_names[name]
            elif tag == "f":
                refs = parts[1:]
                if len(refs) != 3:
                    raise err(lineno, f"only triangles supported, face has {len(refs)} corners")
                vi, ti = [], []
                for ref in refs:
                    bits = ref.split("/")
                    try:
                        v = int(bits[0])
                    except ValueError:
                        raise err(lineno, f"bad face reference {ref!r}")
                    if v <= 0 or v > len(verts):
                        raise err(lineno, f"vertex index {v} out of range")
                    vi.append(v - 1)
                    t = None
                    if len(bits) > 1 and bits[1]:
                        t = int(bits[1])
                        if t <= 0 or t > len(uvs):
                            raise err(lineno, f"uv index {t} out of range")
                        t -= 1
                    ti.append(t)
                faces.append(vi)
                face_uv_idx.append(ti)
                face_group.append(current_group if current_group is not None else 0)
            elif tag in ("vn", "s", "usemtl", "mtllib"):
                continue
            else:
                raise err(lineno, f"unsupported record {tag!r}")

    if not verts:
        raise MeshFormatError(f"{path}: no vertices")
    v = np.asarray(verts, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int32).reshape(-1, 3)

    uv = None
    corner_uv = None
    if uvs and any(t is not None for tri in face_uv_idx for t in tri):
        uvt = np.asarray(uvs, dtype=np.float64)
        uv_arr = np.zeros((len(v), 2))
        seen = np.zeros(len(v), dtype=bool)
        corner = np.zeros((len(f), 3, 2))
        for fi, (tri, tuv) in enumerate(zip(faces, face_uv_idx)):
            for ci, (vi, t) in enumerate(zip(tri, tuv)):
                if t is None:
                    raise MeshFormatError(f"{path}: face {fi + 1} mixes corners with and without uv")
                corner[fi, ci] = uvt[t]
                if not seen[vi]:
                    uv_arr[vi] = uvt[t]
                    seen[vi] = True
        uv = uv_arr
        corner_uv = corner

    panel_id = None
    face_panel = None
    if len(group_names) > 1:
        face_panel = np.asarray(face_group, dtype=np.int32)
        panel_id = np.zeros(len(v), dtype=np.int32)
        filled = np.zeros(len(v), dtype=bool)
        for fi in range(len(f)):
            for vi in f[fi]:
                if not filled[vi]:
                    panel_id[vi] = face_panel[fi]
                    filled[vi] = True

    return TriangleMesh(v, f, uv=uv, panel_id=panel_id, corner_uv=corner_uv, face_panel=face_panel)


def save_obj(path, mesh: TriangleMesh):
    """Write an ASCII OBJ; 1-based indices, '%.8f' coordinates.

    corner_uv (when present) is emitted as per-corner vt references so seam
    charts survive a round trip; face_panel becomes g groups.
    """
    from ._util import atomic_write_text

    lines = ["# drapenet mesh"]
    for p in mesh.vertices:
        lines.append(f"v {p[0]:.8f} {p[1]:.8f} {p[2]:.8f}")

    fcount = mesh.n_faces
    if mesh.corner_uv is not None:
        uv_index: dict = {}
        uv_list: list = []
        corner_ref = np.zeros((fcount, 3), dtype=np.int64)
        for fi in range(fcount):
            for ci in range(3):
                key = (round(mesh.corner_uv[fi, ci, 0], 9), round(mesh.corner_uv[fi, ci, 1], 9))
                idx = uv_index.get(key)
                if idx is None:
                    idx = len(uv_list)
                    uv_index[key] = idx
                    uv_list.append(key)
                corner_ref[fi, ci] = idx
        for u in uv_list:
            lines.append(f"vt {u[0]:.8f} {u[1]:.8f}")

        def face_line(fi):
            a = mesh.faces[fi]
            r = corner_ref[fi]
            return (f"f {a[0] + 1}/{r[0] + 1} {a[1] + 1}/{r[1] + 1} {a[2] + 1}/{r[2] + 1}")
    elif mesh.uv is not None:
        for u in mesh.uv:
            lines.append(f"vt {u[0]:.8f} {u[1]:.8f}")

        def face_line(fi):
            a = mesh.faces[fi]
            return f"f {a[0] + 1}/{a[0] + 1} {a[1] + 1}/{a[1] + 1} {a[2] + 1}/{a[2] + 1}"
    else:
        def face_line(fi):
            a = mesh.faces[fi]
            return f"f {a[0] + 1} {a[1] + 1} {a[2] + 1}"

    if mesh.face_panel is not None:
        order = np.argsort(mesh.face_panel, kind="stable")
        current = None
        for fi in order:
            pid = int(mesh.face_panel[fi])
            if pid != current:
                lines.append(f"g panel_{pid}")
                current = pid
            lines.append(face_line(fi))
    else:
        for fi in range(fcount):
            lines.append(face_line(fi))

    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Differential helpers


def vertex_normals(mesh: TriangleMesh):
    """Area-weighted vertex normals, unit length; isolated vertices get zeros."""
    v, f = mesh.vertices, mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # length 2*area
    out = np.zeros_like(v)
    for c in range(3):
        np.add.at(out, f[:, c], fn)
    ln = np.linalg.norm(out, axis=1, keepdims=True)
    nz = ln[:, 0] > 0
    out[nz] = out[nz] / ln[nz]
    return out


def _neighbor_centroids(mesh):
    e = mesh.edges()
    n = mesh.n_vertices
    deg = np.bincount(e[:, 0], minlength=n) + np.bincount(e[:, 1], minlength=n)
    acc = np.zeros((n, 3))
    for k in range(3):
        acc[:, k] = (np.bincount(e[:, 0], weights=mesh.vertices[e[:, 1], k], minlength=n)
                     + np.bincount(e[:, 1], weights=mesh.vertices[e[:, 0], k], minlength=n))
    return acc, deg


def uniform_laplacian_smooth(mesh: TriangleMesh, iterations: int, step: float) -> TriangleMesh:
    """Move each vertex toward its 1-ring centroid by `step` per iteration."""
    if not (0.0 < step <= 1.0):
        raise ValueError(f"step must be in (0, 1], got {step}")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    e = mesh.edges()
    n = mesh.n_vertices
    deg = (np.bincount(e[:, 0], minlength=n) + np.bincount(e[:, 1], minlength=n)).astype(np.float64)
    active = deg > 0
    v = mesh.vertices.copy()
    for _ in range(iterations):
        acc = np.zeros_like(v)
        for k in range(3):
            acc[:, k] = (np.bincount(e[:, 0], weights=v[e[:, 1], k], minlength=n)
                         + np.bincount(e[:, 1], weights=v[e[:, 0], k], minlength=n))
        cent = np.where(active[:, None], acc / np.maximum(deg, 1.0)[:, None], v)
        v = v + step * (cent - v)
    return mesh.with_vertices(v)


def graph_laplacian(mesh: TriangleMesh, normalized: bool) -> SparseMatrix:
    """Combinatorial L = D - A over mesh edges, or its symmetric normalization.

    Isolated vertices get an identity row in the normalized variant.
    """
    n = mesh.n_vertices
    e = mesh.edges()
    if not len(e):
        return SparseMatrix.identity(n) if normalized else SparseMatrix.from_triplets([], [], [], (n, n))
    deg = (np.bincount(e[:, 0], minlength=n) + np.bincount(e[:, 1], minlength=n)).astype(np.float64)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    if normalized:
        dinv = np.zeros(n)
        nz = deg > 0
        dinv[nz] = 1.0 / np.sqrt(deg[nz])
        vals = -dinv[rows] * dinv[cols]
        rows = np.concatenate([rows, np.arange(n)])
        cols = np.concatenate([cols, np.arange(n)])
        vals = np.concatenate([vals, np.ones(n)])
        return SparseMatrix.from_triplets(rows, cols, vals, (n, n))
    vals = -np.ones(len(rows))
    rows = np.concatenate([rows, np.arange(n)])
    cols = np.concatenate([cols, np.arange(n)])
    vals = np.concatenate([vals, deg])
    return SparseMatrix.from_triplets(rows, cols, vals, (n, n))


# ---------------------------------------------------------------------------
# Exact point-to-triangle distance (vectorized closest-point, Ericson regions)


def closest_points_on_triangles(p, tri):
    """Closest points on triangles for each (point, triangle) pair.

    p: (Q, 3), tri: (T, 3, 3). Returns (Q, T, 3) closest points. Memory is
    O(Q*T); callers chunk Q for large batches.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    tri = np.asarray(tri, dtype=np.float64).reshape(-1, 3, 3)
    a = tri[None, :, 0, :]
    b = tri[None, :, 1, :]
    c = tri[None, :, 2, :]
    pq = p[:, None, :]

    def dot(u, w):
        return (u * w).sum(axis=-1)

    ab = b - a
    ac = c - a
    ap = pq - a
    d1 = dot(ab, ap)
    d2 = dot(ac, ap)

    bp = pq - b
    d3 = dot(ab, bp)
    d4 = dot(ac, bp)

    cp = pq - c
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
    v_in = vb / tot
    w_in = vc / tot

    out = a + v_in[..., None] * ab + w_in[..., None] * ac  # interior by default

    m_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    wbc = np.clip(w_bc, 0.0, 1.0)[..., None]
    out = np.where(m_bc[..., None], b + wbc * (c - b), out)

    m_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    wac = np.clip(w_ac, 0.0, 1.0)[..., None]
    out = np.where(m_ac[..., None], a + wac * ac, out)

    m_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    vab = np.clip(v_ab, 0.0, 1.0)[..., None]
    out = np.where(m_ab[..., None], a + vab * ab, out)

    m_c = (d6 >= 0) & (d5 <= d6)
    out = np.where(m_c[..., None], np.broadcast_to(c, out.shape), out)
    m_b = (d3 >= 0) & (d4 <= d3)
    out = np.where(m_b[..., None], np.broadcast_to(b, out.shape), out)
    m_a = (d1 <= 0) & (d2 <= 0)
    out = np.where(m_a[..., None], np.broadcast_to(a, out.shape), out)
    return out


def point_triangle_distances(p, tri):
    """(Q, T) Euclidean distances from points to triangles."""
    cp = closest_points_on_triangles(p, tri)
    return np.linalg.norm(cp - np.asarray(p, dtype=np.float64).reshape(-1, 1, 3), axis=2)


class TriangleGrid:
    """Uniform grid over triangle AABBs for exact nearest-surface queries.

    Queries expand cell rings until the ring's lower distance bound exceeds
    the best hit, so results match brute force exactly.
    """

    def __init__(self, mesh: TriangleMesh, cell: float | None = None):
        self.mesh = mesh
        v, f = mesh.vertices, mesh.faces
        if not len(f):
            raise ValueError("mesh has no faces")
        self.tri = v[f]  # (T, 3, 3)
        lo = self.tri.min(axis=1)
        hi = self.tri.max(axis=1)
        self.bb_lo = lo.min(axis=0)
        self.bb_hi = hi.max(axis=0)
        if cell is None:
            e = mesh.edges()
            med = np.median(np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1)) if len(e) else 1.0
            diag = float(np.linalg.norm(self.bb_hi - self.bb_lo)) or 1.0
            cell = max(float(med) * 2.0, diag / 128.0)
        self.cell = float(cell)
        self.dims = np.maximum(1, np.ceil((self.bb_hi - self.bb_lo) / self.cell).astype(int))
        lo_cells = np.clip(((lo - self.bb_lo) / self.cell).astype(int), 0, self.dims - 1)
        hi_cells = np.clip(((hi - self.bb_lo) / self.cell).astype(int), 0, self.dims - 1)
        buckets: dict = {}
        for t in range(len(f)):
            x0, y0, z0 = lo_cells[t]
            x1, y1, z1 = hi_cells[t]
            for i in range(x0, x1 + 1):
                for j in range(y0, y1 + 1):
                    for k in range(z0, z1 + 1):
                        buckets.setdefault((i, j, k), []).append(t)
        self.buckets = {k: np.asarray(idx, dtype=np.int64) for k, idx in buckets.items()}

    def _ring_cells(self, c0, r):
        x0, y0, z0 = c0
        if r == 0:
            yield (x0, y0, z0)
            return
        for i in range(x0 - r, x0 + r + 1):
            for j in range(y0 - r, y0 + r + 1):
                for k in range(z0 - r, z0 + r + 1):
                    if max(abs(i - x0), abs(j - y0), abs(k - z0)) == r:
                        yield (i, j, k)

    def nearest(self, p):
        """Return (distance, closest_point, face_index) for one query; exact."""
        p = np.asarray(p, dtype=np.float64).reshape(3)
        c0 = tuple(np.clip(((p - self.bb_lo) / self.cell).astype(int), 0, self.dims - 1))
        best_d = np.inf
        best_cp = None
        best_f = -1
        max_r = int(self.dims.max()) + 2
        r = 0
        while True:
            cand = [self.buckets[c] for c in self._ring_cells(c0, r) if c in self.buckets]
            if cand:
                idx = np.unique(np.concatenate(cand))
                cp = closest_points_on_triangles(p[None, :], self.tri[idx])[0]
                d = np.linalg.norm(cp - p[None, :], axis=1)
                j = int(np.argmin(d))
                if d[j] < best_d:
                    best_d = float(d[j])
                    best_cp = cp[j]
                    best_f = int(idx[j])
            # Everything unvisited lies outside the searched cell cube; bound
            # its distance via the clamped query point (triangle inequality).
            p_in = np.clip(p, self.bb_lo, self.bb_hi)
            slack = float(np.linalg.norm(p - p_in))
            lo_corner = self.bb_lo + (np.array(c0) - r) * self.cell
            hi_corner = self.bb_lo + (np.array(c0) + r + 1) * self.cell
            ring_lb = min(np.min(p_in - lo_corner), np.min(hi_corner - p_in)) - slack
            if best_cp is not None and ring_lb >= best_d:
                break
            r += 1
            if r > max_r and best_cp is not None:
                break
        return best_d, best_cp, best_f

    def nearest_many(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        d = np.empty(len(pts))
        cp = np.empty_like(pts)
        fi = np.empty(len(pts), dtype=np.int64)
        for i, p in enumerate(pts):
            d[i], cp[i], fi[i] = self.nearest(p)
        return d, cp, fi


def _surface_grid(mesh: TriangleMesh) -> TriangleGrid:
    g = mesh._cache.get("trigrid")
    if g is None:
        g = TriangleGrid(mesh)
        mesh._cache["trigrid"] = g
    return g


def point_to_surface_distance(points, mesh: TriangleMesh):
    """Exact distances from points to the mesh surface (grid accelerated)."""
    d, _, _ = _surface_grid(mesh).nearest_many(points)
    return d


def hausdorff(a: TriangleMesh, b: TriangleMesh):
    """Symmetric vertex-to-surface Hausdorff distance.

    Sample points are the vertices of one mesh, targets are the full surface
    of the other; the symmetric value is the max of the two directed values.
    Returns (symmetric, a_to_b, b_to_a).
    """
    if not a.n_faces or not b.n_faces:
        raise ValueError("hausdorff requires non-empty meshes")
    d_ab = float(point_to_surface_distance(a.vertices, b).max())
    d_ba = float(point_to_surface_distance(b.vertices, a).max())
    return max(d_ab, d_ba), d_ab, d_ba


def nearest_vertex(p, mesh: TriangleMesh) -> int:
    """Index of the mesh vertex closest to p; ties resolve to the lowest index."""
    diff = mesh.vertices - np.asarray(p, dtype=np.float64).reshape(3)
    return int(np.argmin((diff * diff).sum(axis=1)))


def nearest_vertices(points, mesh: TriangleMesh, chunk=512):
    """Batch nearest_vertex with identical tie handling."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(points), dtype=np.int64)
    v = mesh.vertices
    for s in range(0, len(points), chunk):
        block = points[s:s + chunk]
        d2 = ((block[:, None, :] - v[None, :, :]) ** 2).sum(axis=2)
        out[s:s + chunk] = np.argmin(d2, axis=1)
    return out
