"""Quasi-static cloth relaxation for ground-truth drape generation.

Position-based iteration: gravity kick, Jacobi edge-length projection,
flap-flattening bend springs, body collision push-out to a fixed offset,
velocity damping. Runs until the largest per-iteration vertex displacement
falls below tolerance.

Collision uses two tiers: a trilinear voxel field culls and pushes
provisionally every iteration, and exact mesh distances refresh the active
contact set periodically, so converged drapes respect the true surface, not
the interpolated one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import MeshSDF, _closest_point_single, collision_field
from .mesh import TriangleMesh


@dataclass(frozen=True)
class Material:
    id: str
    stretch_stiffness: float
    bend_stiffness: float
    density: float  # kg / m^2

    def __post_init__(self):
        if self.stretch_stiffness <= 0 or self.bend_stiffness <= 0 or self.density <= 0:
            raise ValueError("material constants must be positive")


MATERIALS = {
    "M1": Material("M1", stretch_stiffness=1.0, bend_stiffness=5e-3, density=0.15),
    "M2": Material("M2", stretch_stiffness=1.0, bend_stiffness=5e-4, density=0.15),
}

GRAVITY = 9.81
CONTACT_OFFSET = 3e-3  # rest clearance between cloth and body
BEND_RESPONSE = 40.0   # material bend units -> per-iteration correction fraction
ENERGY_WINDOW = 100    # converged energy must be non-increasing this long
ENERGY_SLACK = 1e-8


class NonConvergenceError(RuntimeError):
    """Relaxation hit the iteration cap; carries the residual displacement."""

    def __init__(self, residual: float, iterations: int):
        super().__init__(
            f"no equilibrium after {iterations} iterations "
            f"(residual displacement {residual:.3e} m)")
        self.residual = residual
        self.iterations = iterations


def _interior_flaps(mesh: TriangleMesh):
    """(a, b, flat_rest) for each interior edge: a/b are the vertices opposite
    the edge in its two faces, flat_rest the a-b distance with both rest
    triangles unfolded into a common plane."""
    from collections import defaultdict

    v = mesh.vertices
    f = mesh.faces
    edge_faces = defaultdict(list)
    for fi in range(len(f)):
        tri = f[fi]
        for c in range(3):
            i, j = int(tri[c]), int(tri[(c + 1) % 3])
            key = (min(i, j), max(i, j))
            edge_faces[key].append((fi, int(tri[(c + 2) % 3])))

    pa, pb, rest = [], [], []
    for (i, j), lst in edge_faces.items():
        if len(lst) != 2:
            continue
        (_f1, a), (_f2, b) = lst
        L = float(np.linalg.norm(v[j] - v[i]))
        if L <= 0:
            continue

        def unfold(k):
            c1 = float(np.linalg.norm(v[k] - v[i]))
            c2 = float(np.linalg.norm(v[k] - v[j]))
            x = (c1 * c1 - c2 * c2 + L * L) / (2 * L)
            y2 = max(c1 * c1 - x * x, 0.0)
            return x, np.sqrt(y2)

        xa, ya = unfold(a)
        xb, yb = unfold(b)
        pa.append(a)
        pb.append(b)
        rest.append(np.hypot(xa - xb, ya + yb))
    return (np.array(pa, dtype=np.int64), np.array(pb, dtype=np.int64),
            np.array(rest))


def _vertex_masses(mesh: TriangleMesh, density: float):
    areas = mesh.face_areas()
    m = np.zeros(mesh.n_vertices)
    np.add.at(m, mesh.faces.ravel(), np.repeat(areas / 3.0, 3) * density)
    m[m == 0] = density * float(areas.mean()) / 3.0 if len(areas) else density
    return m


def relax_drape(garment: TriangleMesh, body: TriangleMesh | None,
                material: Material, *, pins=(), gravity: bool = True,
                initial_vertices=None, max_iterations: int = 20000,
                tolerance: float = 1e-5, contact_offset: float = CONTACT_OFFSET,
                return_info: bool = False):
    """Relax a garment to static equilibrium around a body.

    The input mesh defines the rest metric (edge lengths, flap shapes); an
    optional initial_vertices warm-starts the positions. Topology is
    unchanged. Raises NonConvergenceError at the iteration cap.
    """
    rest_v = garment.vertices
    edges = garment.edges()
    ei = edges[:, 0].astype(np.int64)
    ej = edges[:, 1].astype(np.int64)
    rest_len = np.linalg.norm(rest_v[ej] - rest_v[ei], axis=1)
    if np.any(rest_len <= 0):
        raise ValueError("degenerate rest edge")

    fa, fb, flap_rest = _interior_flaps(garment)
    n = garment.n_vertices

    inv_mass = 1.0 / _vertex_masses(garment, material.density)
    pins = np.asarray(list(pins), dtype=np.int64)
    if len(pins):
        inv_mass[pins] = 0.0

    # Jacobi scatter as a fixed sparse map: corrections per constraint go to
    # both endpoints, mass-weighted, averaged by vertex constraint count
    def _scatter_matrix(a, b):
        from scipy import sparse

        deg = np.bincount(a, minlength=n) + np.bincount(b, minlength=n)
        deg = np.maximum(deg, 1).astype(np.float64)
        wa, wb = inv_mass[a], inv_mass[b]
        wsum = np.maximum(wa + wb, 1e-30)
        m = len(a)
        rows = np.concatenate([a, b])
        cols = np.concatenate([np.arange(m), np.arange(m)])
        vals = np.concatenate([(wa / wsum) / deg[a], -(wb / wsum) / deg[b]])
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n, m))

    scatter_s = _scatter_matrix(ei, ej)
    scatter_b = _scatter_matrix(fa, fb) if len(fa) else None

    voxel = exact = None
    if body is not None:
        voxel = collision_field(body)
        exact = body._cache.get("mesh_sdf")
        if exact is None:
            exact = MeshSDF(body)
            body._cache["mesh_sdf"] = exact

    p = np.array(rest_v if initial_vertices is None else initial_vertices,
                 dtype=np.float64)
    if p.shape != rest_v.shape:
        raise ValueError("initial_vertices shape mismatch")
    prev = p.copy()

    dt2 = (2.0e-3) ** 2
    damping = 0.99
    stretch_rounds = 6
    k_s = min(material.stretch_stiffness, 1.0)
    k_b = min(material.bend_stiffness * BEND_RESPONSE, 1.0)
    g_step = np.array([0.0, 0.0, -GRAVITY * dt2]) if gravity else np.zeros(3)

    refresh_every = 32
    cull_pad = 6e-3
    cached_face = np.full(n, -1, dtype=np.int64)
    energy_log = []
    flat_run = 0
    residual = np.inf
    clean_exact = False  # last exact refresh found no deep violations

    def exact_refresh():
        nonlocal clean_exact
        d_vox, _ = voxel.query(p)
        cand = np.nonzero(d_vox < contact_offset + cull_pad)[0]
        cached_face[:] = -1
        if len(cand) == 0:
            clean_exact = True
            return 0.0
        d, g, faces_idx = exact.query(p[cand], return_faces=True)
        cached_face[cand] = faces_idx
        viol = d < contact_offset
        moved = 0.0
        if viol.any():
            push = (contact_offset - d[viol])[:, None] * g[viol]
            target = cand[viol]
            live = inv_mass[target] > 0
            p[target[live]] += push[live]
            moved = float(np.abs(push[live]).max()) if live.any() else 0.0
        clean_exact = moved <= tolerance
        return moved

    for it in range(1, max_iterations + 1):
        if residual > 20 * tolerance:
            damp = damping
        elif residual > 3 * tolerance:
            damp = 0.85
        else:
            damp = 0.6
        vel = (p - prev) * damp
        prev = p.copy()
        movable = (inv_mass > 0)[:, None]
        p += np.where(movable, vel + g_step, 0.0)

        for _ in range(stretch_rounds):
            d = p[ej] - p[ei]
            ln = np.linalg.norm(d, axis=1)
            ln = np.maximum(ln, 1e-12)
            corr = (k_s * (ln - rest_len) / ln)[:, None] * d
            p += scatter_s @ corr

        if scatter_b is not None:
            d = p[fb] - p[fa]
            ln = np.linalg.norm(d, axis=1)
            ln = np.maximum(ln, 1e-12)
            corr = (k_b * (ln - flap_rest) / ln)[:, None] * d
            p += scatter_b @ corr

        pen_depth = None
        if voxel is not None:
            d_vox, g_vox = voxel.query(p)
            near = d_vox < contact_offset
            if near.any():
                idx = np.nonzero(near & (inv_mass > 0))[0]
                p[idx] += (contact_offset - d_vox[idx])[:, None] * g_vox[idx]
            # exact correction against cached nearest faces
            cidx = np.nonzero((cached_face >= 0) & (inv_mass > 0))[0]
            if len(cidx):
                tri = exact.tri[cached_face[cidx]]
                cp = _closest_point_single(p[cidx], tri)
                away = p[cidx] - cp
                dist = np.linalg.norm(away, axis=1)
                nrm = exact.face_n[cached_face[cidx]]
                sgn = np.where((away * nrm).sum(1) >= 0, 1.0, -1.0)
                sd = sgn * dist
                viol = sd < contact_offset
                if viol.any():
                    dirs = np.where(dist[viol][:, None] > 1e-12,
                                    away[viol] / np.maximum(dist[viol][:, None], 1e-12),
                                    nrm[viol])
                    dirs *= sgn[viol][:, None]
                    p[cidx[viol]] += (contact_offset - sd[viol])[:, None] * dirs
            pen_depth = np.maximum(contact_offset - d_vox, 0.0)

        if len(pins):
            p[pins] = rest_v[pins] if initial_vertices is None else \
                np.asarray(initial_vertices)[pins]

        # constraint energy: stretch + bend + collision quadratics
        ln = np.linalg.norm(p[ej] - p[ei], axis=1)
        e_s = 0.5 * k_s * float(((ln - rest_len) ** 2).sum())
        e_b = 0.0
        if len(fa):
            lb = np.linalg.norm(p[fb] - p[fa], axis=1)
            e_b = 0.5 * k_b * float(((lb - flap_rest) ** 2).sum())
        e_c = 0.5 * float((pen_depth ** 2).sum()) if pen_depth is not None else 0.0
        energy = e_s + e_b + e_c
        if energy_log and energy - energy_log[-1] <= ENERGY_SLACK:
            flat_run += 1
        else:
            flat_run = 0
        energy_log.append(energy)

        residual = float(np.abs(p - prev).max())

        if voxel is not None and it % refresh_every == 0:
            moved = exact_refresh()
            residual = max(residual, moved)

        if (residual < tolerance and flat_run >= ENERGY_WINDOW
                and voxel is not None):
            # confirm against the exact surface before accepting equilibrium
            moved = exact_refresh()
            residual = max(residual, moved)

        if (residual < tolerance and (voxel is None or clean_exact)
                and flat_run >= ENERGY_WINDOW):
            out = garment.with_vertices(p.copy())
            if return_info:
                return out, {"iterations": it, "residual": residual,
                             "energy": np.array(energy_log)}
            return out

    raise NonConvergenceError(residual, max_iterations)


def decompose_gt(sims, mean_fit: TriangleMesh, iterations: int = 30,
                 step: float = 0.5):
    """Split simulated drapes into a shared smooth offset and per-material
    fine offsets.

    sims maps material id -> simulated mesh (all on the same topology as
    mean_fit). Returns (smooth_gt, fine_gt) where smooth_gt is the
    cross-material mean of Laplacian-smoothed drapes minus the mean fit, and
    fine_gt[m] is each drape minus its own smoothed version.
    """
    from .mesh import uniform_laplacian_smooth

    if not sims:
        raise ValueError("need at least one simulated drape")
    keys = sorted(sims)
    ref_faces = mean_fit.faces
    for k in keys:
        m = sims[k]
        if m.n_vertices != mean_fit.n_vertices or not np.array_equal(m.faces, ref_faces):
            raise ValueError(f"sample {k!r} topology does not match the mean fit")
    smoothed = {k: uniform_laplacian_smooth(sims[k], iterations, step) for k in keys}
    mean_smooth = np.mean([smoothed[k].vertices for k in keys], axis=0)
    smooth_gt = mean_smooth - mean_fit.vertices
    fine_gt = {k: sims[k].vertices - smoothed[k].vertices for k in keys}
    return smooth_gt, fine_gt


def mean_curvature_proxy(mesh: TriangleMesh) -> np.ndarray:
    """Per-vertex curvature magnitude proxy: displacement of each vertex from
    its neighborhood centroid, normalized by squared mean edge length."""
    v = mesh.vertices
    edges = mesh.edges()
    n = mesh.n_vertices
    acc = np.zeros_like(v)
    cnt = np.zeros(n)
    for a, b in ((edges[:, 0], edges[:, 1]), (edges[:, 1], edges[:, 0])):
        np.add.at(acc, a, v[b])
        np.add.at(cnt, a, 1.0)
    cnt = np.maximum(cnt, 1.0)
    lap = acc / cnt[:, None] - v
    h = float(np.linalg.norm(v[edges[:, 1]] - v[edges[:, 0]], axis=1).mean())
    return np.linalg.norm(lap, axis=1) / max(h * h, 1e-12)
