"""Parametric garment family: 2D panel outlines driven by a 3-vector of
design coordinates, panel triangulation, and seaming/lifting of the flat
panels into an initial 3D garment wrapped around the body.

The outline family interpolates hand-authored extreme outlines stored as
package data. Parameter 0 grows the torso (top -> dress), parameter 1 grows
the sleeves (none -> wrist), parameter 2 widens the cut.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import TriangleMesh

PARAM_COUNT = 3
MIN_SLEEVE_LENGTH = 0.02   # sleeves shorter than this are dropped entirely
NECK_HEIGHT = 1.50         # z of the torso panels' top edge when lifted
ARM_AXIS_Z = 1.44          # z of the sleeve tube axis
ARM_ROOT_X = 0.20          # |x| where sleeve tubes start
LIFT_CLEARANCE = 5e-3      # minimum body clearance after lifting

TORSO_SEGMENTS = ["hem", "side_r", "armhole_r", "neck", "armhole_l", "side_l"]
SLEEVE_SEGMENTS = ["under_lo", "cuff", "under_hi", "armhole_front", "armhole_back"]

_OUTLINE_FILES = {
    "base": "panels_base.txt",
    "torso": "panels_torso_long.txt",
    "sleeve": "panels_sleeve_long.txt",
    "width": "panels_wide.txt",
}


@dataclass(frozen=True)
class Panel:
    """Closed 2D outline: corners in CCW order, one segment label per edge."""
    corners: np.ndarray           # (C, 2)
    segments: tuple               # C labels; segments[k] is corner k -> k+1

    def segment_points(self, label: str):
        k = self.segments.index(label)
        c = self.corners
        return c[k], c[(k + 1) % len(c)]

    def segment_length(self, label: str) -> float:
        a, b = self.segment_points(label)
        return float(np.linalg.norm(b - a))

    def area(self) -> float:
        c = self.corners
        x, y = c[:, 0], c[:, 1]
        return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2)


@dataclass(frozen=True)
class Seam:
    a: tuple  # (panel name, segment label)
    b: tuple


@dataclass
class PanelSet:
    panels: dict = field(default_factory=dict)   # name -> Panel
    seams: list = field(default_factory=list)    # list of Seam


def _read_outlines(key: str):
    from importlib import resources

    blocks = {}
    name = None
    pts = []
    text = resources.files("drapenet").joinpath(
        "data", _OUTLINE_FILES[key]).read_text()
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("panel "):
            if name is not None:
                blocks[name] = np.array(pts)
            name = line.split(None, 1)[1]
            pts = []
        else:
            x, y = line.split()
            pts.append([float(x), float(y)])
    if name is not None:
        blocks[name] = np.array(pts)
    return blocks


def clamp_params(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape != (PARAM_COUNT,):
        raise ValueError(f"design vector must have {PARAM_COUNT} components")
    return np.clip(p, 0.0, 1.0)


_outline_cache = {}


def _outline_family():
    if not _outline_cache:
        for key in _OUTLINE_FILES:
            _outline_cache[key] = _read_outlines(key)
    return _outline_cache


def _outlines_for(p):
    """Additively interpolated corner outlines, one array per panel."""
    fam = _outline_family()
    base = fam["base"]
    axes = [("torso", p[0]), ("sleeve", p[1]), ("width", p[2])]
    outlines = {}
    for name, pts in base.items():
        acc = pts.copy()
        for key, w in axes:
            acc = acc + w * (fam[key][name] - pts)
        outlines[name] = acc
    return outlines


def panel_layout(p) -> PanelSet:
    """Interpolated panel outlines for a design vector (components in [0,1]).

    Degenerate sleeves (below MIN_SLEEVE_LENGTH) are dropped along with their
    seams, leaving a sleeveless two-panel top.
    """
    p = clamp_params(p)
    outlines = _outlines_for(p)

    panels = {}
    for name in ("front", "back"):
        panels[name] = Panel(outlines[name], tuple(TORSO_SEGMENTS))

    sleeve_len = float(outlines["sleeve_r"][1, 0])  # cuff corner x
    seams = [
        Seam(("front", "side_r"), ("back", "side_r")),
        Seam(("front", "side_l"), ("back", "side_l")),
    ]
    if sleeve_len >= MIN_SLEEVE_LENGTH:
        for name in ("sleeve_r", "sleeve_l"):
            panels[name] = Panel(outlines[name], tuple(SLEEVE_SEGMENTS))
        seams += [
            Seam(("front", "armhole_r"), ("sleeve_r", "armhole_front")),
            Seam(("back", "armhole_r"), ("sleeve_r", "armhole_back")),
            Seam(("front", "armhole_l"), ("sleeve_l", "armhole_front")),
            Seam(("back", "armhole_l"), ("sleeve_l", "armhole_back")),
            Seam(("sleeve_r", "under_lo"), ("sleeve_r", "under_hi")),
            Seam(("sleeve_l", "under_lo"), ("sleeve_l", "under_hi")),
        ]
    return PanelSet(panels=panels, seams=seams)


# ---------------------------------------------------------------------------
# Triangulation


def _points_in_polygon(pts, poly):
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    px, py = poly[:, 0], poly[:, 1]
    qx, qy = np.roll(px, -1), np.roll(py, -1)
    for i in range(len(poly)):
        if py[i] == qy[i]:
            continue
        crosses = (py[i] > y) != (qy[i] > y)
        xc = px[i] + (y - py[i]) / (qy[i] - py[i]) * (qx[i] - px[i])
        inside ^= crosses & (x < xc)
    return inside


def _distance_to_polyline(pts, poly):
    """Min distance from each point to the closed polygon boundary."""
    a = poly
    b = np.roll(poly, -1, axis=0)
    ab = b - a                                  # (S, 2)
    denom = (ab * ab).sum(axis=1)
    denom[denom == 0] = 1.0
    ap = pts[:, None, :] - a[None, :, :]        # (P, S, 2)
    t = np.clip((ap * ab[None]).sum(axis=2) / denom[None, :], 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    d = np.linalg.norm(pts[:, None, :] - closest, axis=2)
    return d.min(axis=1)


@dataclass
class PanelMesh:
    """Flat triangulated panel plus ordered boundary samples per segment."""
    mesh: TriangleMesh
    boundary: dict  # segment label -> ordered vertex index list (incl. ends)


def _segment_counts(ps: PanelSet, edge_len: float):
    """Subdivision count per (panel, label), shared across seam pairs."""
    counts = {}
    for name, panel in ps.panels.items():
        for label in panel.segments:
            L = panel.segment_length(label)
            counts[(name, label)] = max(1, int(round(L / edge_len)))
    for seam in ps.seams:
        la = ps.panels[seam.a[0]].segment_length(seam.a[1])
        lb = ps.panels[seam.b[0]].segment_length(seam.b[1])
        n = max(1, int(round((la + lb) / 2 / edge_len)))
        counts[seam.a] = counts[seam.b] = n
    return counts


def triangulate_panels(ps: PanelSet, edge_len: float):
    """Triangulate every panel with near-uniform edge length.

    Boundary sampling is arc-length uniform per segment; seamed segments get
    identical sample counts on both sides so they can later be welded 1:1.
    Returns {panel name: PanelMesh}.
    """
    from scipy.spatial import Delaunay

    if edge_len <= 0:
        raise ValueError("edge_len must be positive")
    counts = _segment_counts(ps, edge_len)
    out = {}
    for name, panel in ps.panels.items():
        c = panel.corners
        ncorner = len(c)
        boundary_pts = []
        seg_ranges = {}
        for k, label in enumerate(panel.segments):
            a, b = c[k], c[(k + 1) % ncorner]
            n = counts[(name, label)]
            start = len(boundary_pts)
            for s in range(n):
                boundary_pts.append(a + (b - a) * (s / n))
            seg_ranges[label] = (start, n)
        boundary_pts = np.array(boundary_pts)
        nb = len(boundary_pts)

        # interior: hexagonal lattice, kept clear of the boundary
        lo = c.min(axis=0)
        hi = c.max(axis=0)
        dy = edge_len * np.sqrt(3) / 2
        rows = []
        yv = lo[1] + dy * 0.75
        row_i = 0
        while yv < hi[1] - dy * 0.4:
            xoff = (edge_len / 2) if (row_i % 2) else 0.0
            xs = np.arange(lo[0] + edge_len * 0.5 + xoff, hi[0] - edge_len * 0.3,
                           edge_len)
            if len(xs):
                rows.append(np.stack([xs, np.full(len(xs), yv)], axis=1))
            yv += dy
            row_i += 1
        interior = np.concatenate(rows) if rows else np.zeros((0, 2))
        if len(interior):
            keep = _points_in_polygon(interior, c)
            interior = interior[keep]
        if len(interior):
            keep = _distance_to_polyline(interior, c) >= 0.62 * edge_len
            interior = interior[keep]

        pts = np.concatenate([boundary_pts, interior]) if len(interior) else boundary_pts
        if len(pts) < 3:
            raise ValueError(f"panel {name!r} too small to triangulate")
        tri = Delaunay(pts)
        simplices = tri.simplices
        cent = pts[simplices].mean(axis=1)
        keep = _points_in_polygon(cent, c)
        # drop degenerate slivers
        pa, pb, pc = (pts[simplices[:, i]] for i in range(3))
        area2 = (pb[:, 0] - pa[:, 0]) * (pc[:, 1] - pa[:, 1]) - \
                (pb[:, 1] - pa[:, 1]) * (pc[:, 0] - pa[:, 0])
        keep &= np.abs(area2) > 1e-12
        simplices = simplices[keep]
        area2 = area2[keep]
        # CCW faces
        flip = area2 < 0
        simplices[flip] = simplices[flip][:, ::-1]

        used = np.unique(simplices)
        remap = -np.ones(len(pts), dtype=np.int64)
        remap[used] = np.arange(len(used))
        if np.any(remap[:nb] < 0):
            raise ValueError(f"panel {name!r}: boundary sample dropped by "
                             "triangulation; reduce edge_len")
        verts2 = pts[used]
        faces = remap[simplices]
        v3 = np.concatenate([verts2, np.zeros((len(verts2), 1))], axis=1)
        mesh = TriangleMesh(v3, faces.astype(np.int32), uv=verts2)

        bnd = {}
        for k, label in enumerate(panel.segments):
            start, n = seg_ranges[label]
            nxt = (start + n) % nb
            idx = [remap[start + s] for s in range(n)] + [remap[nxt]]
            bnd[label] = [int(i) for i in idx]
        out[name] = PanelMesh(mesh=mesh, boundary=bnd)
    return out


# ---------------------------------------------------------------------------
# Lifting and seaming


def _torso_width_profile(panel: Panel):
    """Piecewise-linear half-width as a function of height."""
    c = panel.corners
    hem_w, armpit = c[1], c[2]
    neck = c[3]
    heights = np.array([0.0, armpit[1], neck[1]])
    widths = np.array([hem_w[0], armpit[0], neck[0]])
    return heights, widths


def _lift_torso(panel: Panel, uv: np.ndarray, front: bool):
    heights, widths = _torso_width_profile(panel)
    h_top = heights[-1]
    v = uv[:, 1]
    w = np.interp(v, heights, widths)
    w = np.maximum(w, 1e-6)
    theta = (uv[:, 0] / w) * (np.pi / 2)
    r = 2.0 * w / np.pi
    z = NECK_HEIGHT - (h_top - v)
    x = r * np.sin(theta)
    y = r * np.cos(theta)
    if not front:
        y = -y
    return np.stack([x, y, z], axis=1)


def _lift_sleeve(panel: Panel, uv: np.ndarray, right: bool):
    c = panel.corners
    root_half = abs(c[3, 1])          # armhole-end half height
    cuff_half = abs(c[2, 1])
    length = max(c[1, 0], 1e-6)
    s = np.clip(uv[:, 0], 0.0, None)
    h = root_half + (cuff_half - root_half) * (s / length)
    h = np.maximum(h, 1e-6)
    psi = (uv[:, 1] / h) * np.pi
    r = h / np.pi
    x = ARM_ROOT_X + s
    y = r * np.sin(psi)
    z = ARM_AXIS_Z + r * np.cos(psi)
    if not right:
        x, y = -x, -y
    return np.stack([x, y, z], axis=1)


def _lift_generic(uv: np.ndarray, index: int):
    side = 1.0 if index % 2 == 0 else -1.0
    return np.stack([uv[:, 0], np.full(len(uv), 0.01 * side), uv[:, 1]], axis=1)


def _lift_panel(name: str, panel: Panel, uv: np.ndarray, index: int):
    if name == "front":
        return _lift_torso(panel, uv, front=True)
    if name == "back":
        return _lift_torso(panel, uv, front=False)
    if name == "sleeve_r":
        return _lift_sleeve(panel, uv, right=True)
    if name == "sleeve_l":
        return _lift_sleeve(panel, uv, right=False)
    return _lift_generic(uv, index)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def seam_and_lift(ps: PanelSet, panel_meshes, body=None) -> TriangleMesh:
    """Assemble flat panels into one 3D garment around the mean body.

    Panels are wrapped as generalized cylinders, seam samples are welded
    (positions averaged), and everything is pushed to at least
    LIFT_CLEARANCE outside the body when one is given. Raises ValueError
    when a seam pair's outlines differ in length by more than 1%.
    """
    names = sorted(panel_meshes)
    offsets = {}
    all_pos = []
    all_uv = []
    all_pid = []
    faces = []
    face_panel = []
    total = 0
    for idx, name in enumerate(names):
        pm = panel_meshes[name]
        offsets[name] = total
        uv = pm.mesh.uv
        pos = _lift_panel(name, ps.panels[name], uv, idx)
        all_pos.append(pos)
        all_uv.append(uv)
        all_pid.append(np.full(pm.mesh.n_vertices, idx, dtype=np.int32))
        faces.append(pm.mesh.faces + total)
        face_panel.append(np.full(pm.mesh.n_faces, idx, dtype=np.int32))
        total += pm.mesh.n_vertices
    pos = np.concatenate(all_pos)
    uv = np.concatenate(all_uv)
    pid = np.concatenate(all_pid)
    faces = np.concatenate(faces)
    face_panel = np.concatenate(face_panel)

    uf = _UnionFind(total)
    for seam in ps.seams:
        (pa, la), (pb, lb) = seam.a, seam.b
        len_a = ps.panels[pa].segment_length(la)
        len_b = ps.panels[pb].segment_length(lb)
        ref = max(len_a, len_b, 1e-12)
        if abs(len_a - len_b) / ref > 0.01:
            raise ValueError(
                f"seam {seam.a} <-> {seam.b}: lengths {len_a:.4f} and "
                f"{len_b:.4f} differ by more than 1%")
        ia = [offsets[pa] + i for i in panel_meshes[pa].boundary[la]]
        ib = [offsets[pb] + i for i in panel_meshes[pb].boundary[lb]]
        if len(ia) != len(ib):
            raise ValueError(f"seam {seam.a} <-> {seam.b}: sample count mismatch")
        fwd = np.linalg.norm(pos[ia[0]] - pos[ib[0]]) + \
            np.linalg.norm(pos[ia[-1]] - pos[ib[-1]])
        rev = np.linalg.norm(pos[ia[0]] - pos[ib[-1]]) + \
            np.linalg.norm(pos[ia[-1]] - pos[ib[0]])
        if rev < fwd:
            ib = ib[::-1]
        for i, j in zip(ia, ib):
            uf.union(i, j)

    root = np.array([uf.find(i) for i in range(total)])
    uniq, new_index = np.unique(root, return_inverse=True)
    merged = np.zeros((len(uniq), 3))
    counts = np.bincount(new_index)
    np.add.at(merged, new_index, pos)
    merged /= counts[:, None]

    new_faces = new_index[faces]
    keep = ~((new_faces[:, 0] == new_faces[:, 1])
             | (new_faces[:, 1] == new_faces[:, 2])
             | (new_faces[:, 0] == new_faces[:, 2]))
    new_faces = new_faces[keep]
    face_panel = face_panel[keep]
    corner_uv = uv[faces[keep]]

    new_uv = np.zeros((len(uniq), 2))
    new_pid = np.zeros(len(uniq), dtype=np.int32)
    new_uv[new_index] = uv
    new_pid[new_index] = pid

    # orient every face outward from its panel's wrap axis
    v0 = merged[new_faces[:, 0]]
    v1 = merged[new_faces[:, 1]]
    v2 = merged[new_faces[:, 2]]
    n = np.cross(v1 - v0, v2 - v0)
    cent = (v0 + v1 + v2) / 3
    radial = cent.copy()
    is_sleeve = np.array([names[i].startswith("sleeve") for i in face_panel])
    radial[:, 2] = np.where(is_sleeve, cent[:, 2] - ARM_AXIS_Z, 0.0)
    radial[is_sleeve, 0] = 0.0
    for idx, name in enumerate(names):
        sel = face_panel == idx
        if not sel.any():
            continue
        score = (n[sel] * radial[sel]).sum()
        if score < 0:
            new_faces[sel] = new_faces[sel][:, ::-1]
            corner_uv[sel] = corner_uv[sel][:, ::-1]

    if body is not None:
        from .body import signed_distance

        template = body.template if hasattr(body, "template") else body
        for _ in range(20):
            d, g = signed_distance(template, merged)
            low = d < LIFT_CLEARANCE
            if not low.any():
                break
            merged[low] += (LIFT_CLEARANCE + 5e-4 - d[low])[:, None] * g[low]

    return TriangleMesh(merged, new_faces.astype(np.int32), uv=new_uv,
                        panel_id=new_pid, corner_uv=corner_uv,
                        face_panel=face_panel)


def build_garment(p, body=None, edge_len: float = 0.016) -> TriangleMesh:
    """Layout, triangulate, seam and lift a garment for a design vector."""
    ps = panel_layout(p)
    meshes = triangulate_panels(ps, edge_len)
    return seam_and_lift(ps, meshes, body)


# ---------------------------------------------------------------------------
# Canonical high-resolution correspondence and the coarse template

CANON_EDGE = 0.011259   # calibrated: full-layout weld -> 17,246 vertices
TEMPLATE_VERTS = 403


def _full_panel_set(p) -> PanelSet:
    """All four panels for any design, with sleeve length floored.

    Unlike panel_layout this never drops sleeves: short designs get a
    MIN_SLEEVE_LENGTH stub so every design shares one vertex layout.
    """
    p = clamp_params(p)
    outlines = _outlines_for(p)
    for name in ("sleeve_r", "sleeve_l"):
        o = outlines[name]
        if o[1, 0] < MIN_SLEEVE_LENGTH:
            o = o.copy()
            o[1, 0] = o[2, 0] = MIN_SLEEVE_LENGTH
            outlines[name] = o
    panels = {}
    for name in ("front", "back"):
        panels[name] = Panel(outlines[name], tuple(TORSO_SEGMENTS))
    for name in ("sleeve_r", "sleeve_l"):
        panels[name] = Panel(outlines[name], tuple(SLEEVE_SEGMENTS))
    seams = [
        Seam(("front", "side_r"), ("back", "side_r")),
        Seam(("front", "side_l"), ("back", "side_l")),
        Seam(("front", "armhole_r"), ("sleeve_r", "armhole_front")),
        Seam(("back", "armhole_r"), ("sleeve_r", "armhole_back")),
        Seam(("front", "armhole_l"), ("sleeve_l", "armhole_front")),
        Seam(("back", "armhole_l"), ("sleeve_l", "armhole_back")),
        Seam(("sleeve_r", "under_lo"), ("sleeve_r", "under_hi")),
        Seam(("sleeve_l", "under_lo"), ("sleeve_l", "under_hi")),
    ]
    return PanelSet(panels=panels, seams=seams)


class _Canonical:
    """Everything derived once from the full-design triangulation."""

    def __init__(self):
        from scipy.sparse import coo_matrix, identity
        from scipy.sparse.linalg import splu

        self.ps = _full_panel_set(np.ones(PARAM_COUNT))
        self.meshes = triangulate_panels(self.ps, CANON_EDGE)

        # per-panel harmonic warp operators: Dirichlet boundary, interior
        # solved with the uniform graph Laplacian (panels are convex, so
        # the warped triangulation cannot fold)
        self.warp = {}
        for name, pm in self.meshes.items():
            faces = pm.mesh.faces
            n = pm.mesh.n_vertices
            on_boundary = np.zeros(n, dtype=bool)
            for ids in pm.boundary.values():
                on_boundary[ids] = True
            interior = np.nonzero(~on_boundary)[0]
            bnd = np.nonzero(on_boundary)[0]
            ea = faces.reshape(-1)
            eb = np.roll(faces, -1, axis=1).reshape(-1)
            und = np.unique(np.sort(np.stack([ea, eb], axis=1), axis=1),
                            axis=0)
            rows = np.concatenate([und[:, 0], und[:, 1]])
            cols = np.concatenate([und[:, 1], und[:, 0]])
            A = coo_matrix((np.ones(len(rows)), (rows, cols)),
                           shape=(n, n)).tocsr()
            deg = np.asarray(A.sum(axis=1)).reshape(-1)
            L = identity(n, format="csr").multiply(deg) - A
            self.warp[name] = (interior, bnd,
                               splu(L[interior][:, interior].tocsc()),
                               A[interior][:, bnd])

        # the canonical mesh itself goes through the warp, so the full
        # design is bit-identical to canonical_highres of all-ones
        self.welded = seam_and_lift(self.ps, _warped_meshes(self, self.ps))

        from .sampling import qem_decimate
        self.dec = qem_decimate(self.welded.vertices, self.welded.faces,
                                TEMPLATE_VERTS)


_canonical_obj = None


def _canonical() -> _Canonical:
    global _canonical_obj
    if _canonical_obj is None:
        _canonical_obj = _Canonical()
    return _canonical_obj


def _warped_meshes(can: _Canonical, ps: PanelSet):
    """Canonical panel triangulations moved into a new outline."""
    meshes = {}
    for name, pm in can.meshes.items():
        uv = pm.mesh.uv.copy()
        panel = ps.panels[name]
        c = panel.corners
        for k, label in enumerate(panel.segments):
            ids = pm.boundary[label]
            nseg = len(ids) - 1
            a, b = c[k], c[(k + 1) % len(c)]
            frac = np.arange(nseg + 1)[:, None] / nseg
            uv[ids] = a + (b - a) * frac
        interior, bnd, solver, a_ib = can.warp[name]
        if len(interior):
            uv[interior] = solver.solve(a_ib @ uv[bnd])
        v3 = np.concatenate([uv, np.zeros((len(uv), 1))], axis=1)
        meshes[name] = PanelMesh(
            mesh=TriangleMesh(v3, pm.mesh.faces, uv=uv), boundary=pm.boundary)
    return meshes


def canonical_highres(p, body=None) -> TriangleMesh:
    """The design's garment on the shared canonical vertex layout.

    Panel outlines move with p while the triangulation keeps the exact
    topology and vertex ordering of the full design, so vertex i means
    the same material point for every design vector.
    """
    can = _canonical()
    ps = _full_panel_set(p)
    out = seam_and_lift(ps, _warped_meshes(can, ps), body)
    e = out.corner_uv
    area2 = (e[:, 1, 0] - e[:, 0, 0]) * (e[:, 2, 1] - e[:, 0, 1]) - \
            (e[:, 1, 1] - e[:, 0, 1]) * (e[:, 2, 0] - e[:, 0, 0])
    if np.abs(area2).min() <= 0:
        raise ValueError("degenerate warped panel triangle")
    return out


def downsample_to_template(highres: TriangleMesh) -> TriangleMesh:
    """Reduce a canonical-correspondence garment to the coarse template.

    The vertex selection is a quadric decimation computed once on the
    canonical mesh; applying it to any mesh in correspondence keeps the
    selected vertices' positions untouched.
    """
    can = _canonical()
    if (highres.n_vertices != can.welded.n_vertices
            or highres.n_faces != can.welded.n_faces):
        raise ValueError("input is not in canonical vertex correspondence")
    dec = can.dec
    uv = highres.uv[dec.keep] if highres.uv is not None else None
    pid = highres.panel_id[dec.keep] if highres.panel_id is not None else None
    return TriangleMesh(highres.vertices[dec.keep],
                        dec.faces.astype(np.int32), uv=uv, panel_id=pid)
