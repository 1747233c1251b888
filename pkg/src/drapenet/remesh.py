"""Topology-optimization operator: isotropic incremental remeshing of a
garment in the UV space of its panels, lifted back onto the input surface.

The mesh is processed as a whole (welded seams stay welded); every length
and quality measure is taken in the per-panel charts carried by corner_uv,
so panel boundaries and seam chains survive unchanged except where splits
and collapses refine them. All operations run in sorted-edge-index order
and use no randomness, making the operator a pure function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh

DEFAULT_T_AREA = 3.2e-4   # calibrated so a long dress lands near 3,500 vertices
DEFAULT_T_DIST = 4.5

# split/collapse hysteresis, wide enough that relaxation jitter cannot feed
# an endless split/collapse cycle; the loop reaches a true fixed point
SPLIT_FACTOR = 1.45
COLLAPSE_FACTOR = 0.70
# collapses may not create edges longer than this; keeping it well under
# SPLIT_FACTOR stops collapse/relax churn from coarsening without bound
COLLAPSE_MAX_FACTOR = 1.17
# thresholds measure against a slightly inflated unit edge: relaxation
# settles the realized mean area below the unit-edge estimate, and this
# factor recenters it on t_area from both the refine and coarsen side
ELL_SCALE = 1.05
# transitional slivers up to this multiple of t_dist may appear during
# collapse; without the slack, chains meeting at a protected corner
# deadlock and keep their input resolution (each collapse alone would
# worsen the corner triangle, so a plain guard rejects every one of them)
COLLAPSE_ASPECT_SLACK = 2.0


@dataclass(frozen=True)
class RemeshTargets:
    """Quality targets: mean triangle area (m^2) and max edge/altitude ratio."""
    t_area: float = DEFAULT_T_AREA
    t_dist: float = DEFAULT_T_DIST

    def __post_init__(self):
        if not (self.t_area > 0):
            raise ValueError("t_area must be positive")
        if not (self.t_dist >= 1):
            raise ValueError("t_dist must be >= 1")

    @property
    def edge_length(self) -> float:
        return float(np.sqrt(4.0 * self.t_area / np.sqrt(3.0)))


def _edge_table(faces):
    """Unique undirected edges plus the edge id for every face slot.

    Slot j of a face is the edge from corner j to corner (j+1)%3. Edges are
    lexicographically sorted vertex pairs, which fixes the processing order.
    """
    ea = faces
    eb = np.roll(faces, -1, axis=1)
    raw = np.stack([ea, eb], axis=2).reshape(-1, 2)
    und = np.sort(raw, axis=1)
    edges, inv = np.unique(und, axis=0, return_inverse=True)
    return edges, inv.reshape(-1, 3)


def _edge_uv_lengths(cuv, slot_edge, n_edges):
    d = cuv - np.roll(cuv, -1, axis=1)
    ln = np.linalg.norm(d, axis=2).reshape(-1)
    total = np.zeros(n_edges)
    count = np.zeros(n_edges)
    np.add.at(total, slot_edge.reshape(-1), ln)
    np.add.at(count, slot_edge.reshape(-1), 1.0)
    return total / np.maximum(count, 1.0), count


def _chart_area2(cuv):
    """Twice the signed uv area of each face."""
    a, b, c = cuv[:, 0], cuv[:, 1], cuv[:, 2]
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - \
           (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])


def _uv_aspect(rows):
    """Longest edge over shortest altitude for uv triangles (..., 3, 2)."""
    rows = np.asarray(rows)
    e = rows - np.roll(rows, -1, axis=-2)
    ln = np.linalg.norm(e, axis=-1)
    area2 = np.abs(_chart_area2(rows.reshape(-1, 3, 2))).reshape(rows.shape[:-2])
    alt = area2[..., None] / np.maximum(ln, 1e-300)
    return ln.max(axis=-1) / np.maximum(alt.min(axis=-1), 1e-300)


class _State:
    """Mutable remeshing state: positions, faces, per-corner uv, face panel."""

    def __init__(self, pos, faces, cuv, fp, chart_sign,
                 t_dist: float = DEFAULT_T_DIST):
        self.pos = pos          # (V, 3) float, grows
        self.faces = faces      # (F, 3) int64
        self.cuv = cuv          # (F, 3, 2) float
        self.fp = fp            # (F,) int
        self.chart_sign = chart_sign  # panel id -> +-1 uv orientation
        self.t_dist = t_dist

    def signed_area2(self, faces_cuv, fp):
        s = self.chart_sign[fp]
        return _chart_area2(faces_cuv) * s


def _split_pass(st: _State, ell: float):
    """Split every edge longer than SPLIT_FACTOR * ell at its chart midpoint."""
    edges, slot_edge = _edge_table(st.faces)
    lengths, _ = _edge_uv_lengths(st.cuv, slot_edge, len(edges))
    long = lengths > SPLIT_FACTOR * ell
    if not long.any():
        return False
    n_new = int(long.sum())
    new_id = -np.ones(len(edges), dtype=np.int64)
    new_id[long] = len(st.pos) + np.arange(n_new)
    mid = 0.5 * (st.pos[edges[long, 0]] + st.pos[edges[long, 1]])
    st.pos = np.concatenate([st.pos, mid])

    slot_new = new_id[slot_edge]            # (F, 3), -1 where not split
    pattern = ((slot_new[:, 0] >= 0).astype(int)
               + 2 * (slot_new[:, 1] >= 0).astype(int)
               + 4 * (slot_new[:, 2] >= 0).astype(int))
    mid_uv = 0.5 * (st.cuv + np.roll(st.cuv, -1, axis=1))  # (F, 3, 2)

    F = st.faces
    C = st.cuv
    keep = pattern == 0
    out_faces = [F[keep]]
    out_cuv = [C[keep]]
    out_fp = [st.fp[keep]]

    def emit(sel, corner_ids, corner_uvs):
        f = np.stack(corner_ids, axis=1)
        u = np.stack(corner_uvs, axis=1)
        out_faces.append(f)
        out_cuv.append(u)
        out_fp.append(st.fp[sel])

    v = [F[:, 0], F[:, 1], F[:, 2]]
    m = [slot_new[:, 0], slot_new[:, 1], slot_new[:, 2]]
    cu = [C[:, 0], C[:, 1], C[:, 2]]
    mu = [mid_uv[:, 0], mid_uv[:, 1], mid_uv[:, 2]]

    def sub(arrs, sel):
        return [a[sel] for a in arrs]

    for pat in range(1, 8):
        sel = pattern == pat
        if not sel.any():
            continue
        V0, V1, V2 = sub(v, sel)
        M0, M1, M2 = sub(m, sel)
        U0, U1, U2 = sub(cu, sel)
        W0, W1, W2 = sub(mu, sel)
        if pat == 1:
            emit(sel, (V0, M0, V2), (U0, W0, U2))
            emit(sel, (M0, V1, V2), (W0, U1, U2))
        elif pat == 2:
            emit(sel, (V0, V1, M1), (U0, U1, W1))
            emit(sel, (V0, M1, V2), (U0, W1, U2))
        elif pat == 4:
            emit(sel, (V0, V1, M2), (U0, U1, W2))
            emit(sel, (V1, V2, M2), (U1, U2, W2))
        elif pat == 3:
            emit(sel, (M0, V1, M1), (W0, U1, W1))
            emit(sel, (V0, M0, M1), (U0, W0, W1))
            emit(sel, (V0, M1, V2), (U0, W1, U2))
        elif pat == 5:
            emit(sel, (V0, M0, M2), (U0, W0, W2))
            emit(sel, (M0, V1, M2), (W0, U1, W2))
            emit(sel, (M2, V1, V2), (W2, U1, U2))
        elif pat == 6:
            emit(sel, (V0, V1, M1), (U0, U1, W1))
            emit(sel, (V0, M1, M2), (U0, W1, W2))
            emit(sel, (M2, M1, V2), (W2, W1, U2))
        else:  # 7
            emit(sel, (V0, M0, M2), (U0, W0, W2))
            emit(sel, (M0, V1, M1), (W0, U1, W1))
            emit(sel, (M2, M1, V2), (W2, W1, U2))
            emit(sel, (M0, M1, M2), (W0, W1, W2))

    st.faces = np.concatenate(out_faces)
    st.cuv = np.concatenate(out_cuv)
    st.fp = np.concatenate(out_fp)
    return True


class _Flags:
    """Per-edge and per-vertex classification for one topology snapshot."""

    __slots__ = ("rank", "edges", "slot_edge", "chain_edge", "chain_nbr")

    def __init__(self, rank, edges, slot_edge, chain_edge, chain_nbr):
        self.rank = rank              # (V,) 0 interior, 1 chain, 2 protected
        self.edges = edges
        self.slot_edge = slot_edge
        self.chain_edge = chain_edge  # (E,) boundary or seam edge
        self.chain_nbr = chain_nbr    # (V, 2) chain neighbours, -1 outside


def _vertex_flags(st: _State) -> _Flags:
    """Classify vertices: 0 interior, 1 boundary/seam chain, 2 protected."""
    edges, slot_edge = _edge_table(st.faces)
    n_edges = len(edges)
    counts = np.zeros(n_edges, dtype=np.int64)
    np.add.at(counts, slot_edge.reshape(-1), 1)
    boundary_edge = counts == 1

    # uv agreement across an edge's two faces: disagreement marks a seam
    flat = slot_edge.reshape(-1)
    order = np.argsort(flat, kind="stable")
    sorted_e = flat[order]
    starts = np.searchsorted(sorted_e, np.arange(n_edges))
    first_slot = order[starts]
    seam_edge = np.zeros(n_edges, dtype=bool)
    two = counts == 2
    if two.any():
        ends = np.searchsorted(sorted_e, np.arange(n_edges), side="right")
        second_slot = order[np.minimum(ends - 1, len(order) - 1)]
        f1, j1 = first_slot[two] // 3, first_slot[two] % 3
        f2, j2 = second_slot[two] // 3, second_slot[two] % 3
        ua1 = st.cuv[f1, j1]
        ub1 = st.cuv[f1, (j1 + 1) % 3]
        # face 2 traverses the shared edge in the opposite direction
        same_a = st.faces[f1, j1] == st.faces[f2, j2]
        ua2 = np.where(same_a[:, None], st.cuv[f2, j2], st.cuv[f2, (j2 + 1) % 3])
        ub2 = np.where(same_a[:, None], st.cuv[f2, (j2 + 1) % 3], st.cuv[f2, j2])
        mismatch = (np.abs(ua1 - ua2).max(axis=1) > 1e-9) | \
                   (np.abs(ub1 - ub2).max(axis=1) > 1e-9)
        # charts with identical layouts weld with matching uv, so a
        # chart-id change across the edge marks a seam on its own
        seam_edge[two] = mismatch | (st.fp[f1] != st.fp[f2])

    chain_edge = boundary_edge | seam_edge
    nv = len(st.pos)
    chain_deg = np.zeros(nv, dtype=np.int64)
    on_boundary = np.zeros(nv, dtype=bool)
    on_seam = np.zeros(nv, dtype=bool)
    chain_nbr = -np.ones((nv, 2), dtype=np.int64)
    if chain_edge.any():
        ce = edges[chain_edge]
        np.add.at(chain_deg, ce.reshape(-1), 1)
        on_boundary[edges[boundary_edge].reshape(-1)] = True
        on_seam[edges[seam_edge].reshape(-1)] = True
        both = np.concatenate([ce, ce[:, ::-1]])
        srt = both[np.lexsort((both[:, 1], both[:, 0]))]
        vs, first = np.unique(srt[:, 0], return_index=True)
        deg = chain_deg[vs]
        d2 = deg == 2
        chain_nbr[vs[d2], 0] = srt[first[d2], 1]
        chain_nbr[vs[d2], 1] = srt[first[d2] + 1, 1]

    rank = np.zeros(nv, dtype=np.int8)
    chain_vert = on_boundary | on_seam
    rank[chain_vert] = 1
    protected = chain_vert & (chain_deg != 2)
    protected |= on_boundary & on_seam

    # kink protection: corners of the chain polylines must not move. The
    # test runs in chart space, where chains are straight between true
    # corners regardless of how the lifted 3D curve bends, and is done
    # per chart side of each vertex (seam vertices carry two charts).
    deg2 = chain_vert & (chain_deg == 2) & ~protected
    if deg2.any():
        corner_v = st.faces.reshape(-1)
        corner_uv = st.cuv.reshape(-1, 2)
        rows = deg2[corner_v]
        key = np.zeros(rows.sum(),
                       dtype=[("v", np.int64), ("u", np.float64),
                              ("w", np.float64)])
        key["v"] = corner_v[rows]
        key["u"] = corner_uv[rows, 0]
        key["w"] = corner_uv[rows, 1]
        uniq, group = np.unique(key, return_inverse=True)
        n_g = len(uniq)
        dirs = np.zeros((n_g, 2, 2))
        got = np.zeros((n_g, 2), dtype=bool)
        cn_rows = chain_nbr[corner_v[rows]]
        cuv_rows = corner_uv[rows]
        for nv_arr, nuv_arr in (
                (np.roll(st.faces, -1, axis=1), np.roll(st.cuv, -1, axis=1)),
                (np.roll(st.faces, 1, axis=1), np.roll(st.cuv, 1, axis=1))):
            nv_m = nv_arr.reshape(-1)[rows]
            nuv_m = nuv_arr.reshape(-1, 2)[rows]
            for side in (0, 1):
                hit = nv_m == cn_rows[:, side]
                dirs[group[hit], side] = nuv_m[hit] - cuv_rows[hit]
                got[group[hit], side] = True
        both = got.all(axis=1)
        nn = np.linalg.norm(dirs[:, 0], axis=1) * \
            np.linalg.norm(dirs[:, 1], axis=1)
        cosv = (dirs[:, 0] * dirs[:, 1]).sum(axis=1) / np.maximum(nn, 1e-300)
        kinked = (~both) | (nn <= 0) | (cosv > -0.85)  # straight ~ -1
        protected[uniq["v"][kinked]] = True
    rank[protected] = 2
    return _Flags(rank, edges, slot_edge, chain_edge, chain_nbr)


def _row_metrics(row):
    """Scalar (signed uv area x2, longest edge, aspect) for one (3,2) row."""
    import math

    ax, ay = float(row[0, 0]), float(row[0, 1])
    bx, by = float(row[1, 0]), float(row[1, 1])
    cx, cy = float(row[2, 0]), float(row[2, 1])
    area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    lmax = max(math.hypot(bx - ax, by - ay), math.hypot(cx - bx, cy - by),
               math.hypot(ax - cx, ay - cy))
    asp = lmax * lmax / max(abs(area2), 1e-300)
    return area2, lmax, asp


def _collapse_pass(st: _State, ell: float, t_dist: float = DEFAULT_T_DIST,
                   flags: _Flags | None = None):
    """Collapse edges shorter than COLLAPSE_FACTOR * ell, keeping chains."""
    if flags is None:
        flags = _vertex_flags(st)
    rank, edges = flags.rank, flags.edges
    slot_edge, chain_edge = flags.slot_edge, flags.chain_edge
    lengths, _ = _edge_uv_lengths(st.cuv, slot_edge, len(edges))
    short = np.nonzero(lengths < COLLAPSE_FACTOR * ell)[0]
    if not len(short):
        return False

    faces = st.faces.copy()
    cuv = st.cuv.copy()
    alive = np.ones(len(faces), dtype=bool)
    vert_faces = {}
    for fi, f in enumerate(faces):
        for vtx in f:
            vert_faces.setdefault(int(vtx), set()).add(fi)
    touched = np.zeros(len(st.pos), dtype=bool)
    max_len = COLLAPSE_MAX_FACTOR * ell
    changed = False

    for ei in short:
        a, b = int(edges[ei, 0]), int(edges[ei, 1])
        if touched[a] or touched[b]:
            continue
        ra, rb = rank[a], rank[b]
        if ra == 2 and rb == 2:
            continue
        if ra == rb:
            if ra == 1 and not chain_edge[ei]:
                continue
            keep_v, drop_v, midpoint = (a, b, True)
        else:
            keep_v, drop_v = (a, b) if ra > rb else (b, a)
            midpoint = False
            if rank[drop_v] == 1 and not chain_edge[ei]:
                continue
        fa = vert_faces.get(a, set())
        fb = vert_faces.get(b, set())
        shared = [fi for fi in fa & fb if alive[fi]]
        # link condition: a and b may share only the edge's opposite vertices
        opp = set()
        for fi in shared:
            for vtx in faces[fi]:
                if vtx != a and vtx != b:
                    opp.add(int(vtx))
        na = {int(vtx) for fi in fa if alive[fi] for vtx in faces[fi]} - {a}
        nb = {int(vtx) for fi in fb if alive[fi] for vtx in faces[fi]} - {b}
        if na & nb != opp:
            continue

        # chart-consistent uv rewrites, harvested from the dying faces
        remap = []
        ok = True
        for fi in shared:
            f = faces[fi]
            sa = int(np.nonzero(f == a)[0][0])
            sb = int(np.nonzero(f == b)[0][0])
            ua, ub = cuv[fi, sa], cuv[fi, sb]
            target = 0.5 * (ua + ub) if midpoint else \
                (ua if keep_v == a else ub)
            remap.append((ua.copy(), ub.copy(), target))
        survivors = [fi for fi in (fa | fb) if alive[fi] and fi not in shared]

        def corner_target(old_uv):
            for ua, ub, tgt in remap:
                if np.abs(old_uv - ua).max() < 1e-9 or \
                   np.abs(old_uv - ub).max() < 1e-9:
                    return tgt
            return None

        new_rows = {}
        for fi in survivors:
            f = faces[fi]
            row = cuv[fi].copy()
            fnew = f.copy()
            for j in range(3):
                if f[j] == drop_v or (midpoint and f[j] == keep_v):
                    tgt = corner_target(row[j])
                    if tgt is None:
                        ok = False
                        break
                    row[j] = tgt
                    fnew[j] = keep_v
            if not ok:
                break
            if fnew[0] == fnew[1] or fnew[1] == fnew[2] or fnew[0] == fnew[2]:
                ok = False
                break
            area2, emax, asp = _row_metrics(row)
            area2 *= st.chart_sign[st.fp[fi]]
            if area2 < 1e-14 or emax > max_len:
                ok = False
                break
            # never manufacture a sliver much worse than the face already was
            if asp > max(COLLAPSE_ASPECT_SLACK * t_dist, _row_metrics(cuv[fi])[2]):
                ok = False
                break
            new_rows[fi] = (fnew, row)
        if not ok:
            continue

        if midpoint:
            st.pos[keep_v] = 0.5 * (st.pos[a] + st.pos[b])
        for fi in shared:
            alive[fi] = False
        for fi, (fnew, row) in new_rows.items():
            for vtx in faces[fi]:
                vert_faces[int(vtx)].discard(fi)
            faces[fi] = fnew
            cuv[fi] = row
            for vtx in fnew:
                vert_faces.setdefault(int(vtx), set()).add(fi)
        touched[a] = touched[b] = True
        changed = True

    if changed:
        st.faces = faces[alive]
        st.cuv = cuv[alive]
        st.fp = st.fp[alive]
    return changed


def _tri_metrics(rows):
    """(min interior angle rad, aspect) per uv triangle, batched."""
    e = np.roll(rows, -1, axis=1) - rows
    ln = np.linalg.norm(e, axis=2)
    area2 = np.abs(_chart_area2(rows))
    lsort = np.sort(ln, axis=1)
    # the smallest angle faces the shortest edge and is always acute
    ang = np.arcsin(np.clip(area2 / np.maximum(lsort[:, 1] * lsort[:, 2],
                                               1e-300), 0, 1))
    asp = lsort[:, 2] ** 2 / np.maximum(area2, 1e-300)
    return ang, asp


def _flip_pass(st: _State, mode: str = "valence",
               t_dist: float = DEFAULT_T_DIST, flags: _Flags | None = None):
    """Flip interior same-chart edges to even valences or open up slivers.

    Candidates are screened in one vectorized sweep; the apply loop then
    walks them in sorted edge order with face locking, so a vertex's faces
    change at most once per sweep and the result is order-deterministic.
    """
    if flags is None:
        flags = _vertex_flags(st)
    rank, edges = flags.rank, flags.edges
    slot_edge, chain_edge = flags.slot_edge, flags.chain_edge
    n_edges = len(edges)
    flat = slot_edge.reshape(-1)
    order = np.argsort(flat, kind="stable")
    sorted_e = flat[order]
    counts = np.bincount(flat, minlength=n_edges)
    starts = np.searchsorted(sorted_e, np.arange(n_edges))
    cand = np.nonzero((counts == 2) & ~chain_edge)[0]
    if not len(cand):
        return False

    s1, s2 = order[starts[cand]], order[starts[cand] + 1]
    f1, j1 = s1 // 3, s1 % 3
    f2, j2 = s2 // 3, s2 % 3
    faces = st.faces
    cuv = st.cuv
    rows = np.arange(len(cand))
    a = faces[f1, j1]
    b = faces[f1, (j1 + 1) % 3]
    c = faces[f1, (j1 + 2) % 3]
    d = faces[f2, (j2 + 2) % 3]
    ua = cuv[f1, j1]
    ub = cuv[f1, (j1 + 1) % 3]
    uc = cuv[f1, (j1 + 2) % 3]
    ud = cuv[f2, (j2 + 2) % 3]
    t1 = np.stack([ua, ud, uc], axis=1)
    t2 = np.stack([ud, ub, uc], axis=1)
    sign = st.chart_sign[st.fp[f1]]
    ok = (st.fp[f1] == st.fp[f2]) & (d != a) & (d != b) & (d != c)
    ok &= (sign * _chart_area2(t1) > 1e-14) & (sign * _chart_area2(t2) > 1e-14)

    ang1n, asp1n = _tri_metrics(t1)
    ang2n, asp2n = _tri_metrics(t2)
    ango1, aspo1 = _tri_metrics(cuv[f1])
    ango2, aspo2 = _tri_metrics(cuv[f2])
    valence = np.zeros(len(st.pos), dtype=np.int64)
    np.add.at(valence, edges.reshape(-1), 1)
    target = np.where(rank >= 1, 4, 6)
    if mode == "valence":
        ok &= np.maximum(asp1n, asp2n) <= np.maximum(np.maximum(aspo1, aspo2),
                                                     t_dist)
        # screened with pre-sweep valences; rechecked exactly when applying
        dev = lambda vs, off: (valence[vs] + off - target[vs]) ** 2
        before = dev(a, 0) + dev(b, 0) + dev(c, 0) + dev(d, 0)
        after = dev(a, -1) + dev(b, -1) + dev(c, 1) + dev(d, 1)
        ok &= after < before
    else:
        ok &= np.minimum(ang1n, ang2n) > np.minimum(ango1, ango2) + 1e-12

    face_locked = np.zeros(len(faces), dtype=bool)
    changed = False
    nv = len(st.pos)
    edge_set = set((int(x) * nv + int(y)) for x, y in edges)
    for i in np.nonzero(ok)[0]:
        fa, fb = f1[i], f2[i]
        if face_locked[fa] or face_locked[fb]:
            continue
        va, vb, vc, vd = int(a[i]), int(b[i]), int(c[i]), int(d[i])
        key_new = min(vc, vd) * nv + max(vc, vd)
        if key_new in edge_set:  # the flipped edge already exists elsewhere
            continue
        if mode == "valence":
            bef = ((valence[va] - target[va]) ** 2
                   + (valence[vb] - target[vb]) ** 2
                   + (valence[vc] - target[vc]) ** 2
                   + (valence[vd] - target[vd]) ** 2)
            aft = ((valence[va] - 1 - target[va]) ** 2
                   + (valence[vb] - 1 - target[vb]) ** 2
                   + (valence[vc] + 1 - target[vc]) ** 2
                   + (valence[vd] + 1 - target[vd]) ** 2)
            if aft >= bef:
                continue
        faces[fa] = (va, vd, vc)
        faces[fb] = (vd, vb, vc)
        cuv[fa] = t1[i]
        cuv[fb] = t2[i]
        valence[va] -= 1
        valence[vb] -= 1
        valence[vc] += 1
        valence[vd] += 1
        edge_set.discard(min(va, vb) * nv + max(va, vb))
        edge_set.add(key_new)
        face_locked[fa] = face_locked[fb] = True
        changed = True
    return changed


def _chain_relax_pass(st: _State, flags: _Flags | None = None):
    """Even out spacing along boundary/seam chains.

    Chains are straight between protected corners in every chart, so the
    midpoint of a vertex's two chain neighbours stays exactly on the chain.
    Corner uvs for one vertex side are bit-identical by construction, which
    lets chart sides be grouped by exact uv value.
    """
    if flags is None:
        flags = _vertex_flags(st)
    movable = (flags.rank == 1) & (flags.chain_nbr[:, 0] >= 0)
    if not movable.any():
        return

    F = len(st.faces)
    corner_v = st.faces.reshape(-1)
    nb1_v = np.roll(st.faces, -1, axis=1).reshape(-1)
    nb2_v = np.roll(st.faces, 1, axis=1).reshape(-1)
    nb1_uv = np.roll(st.cuv, -1, axis=1).reshape(-1, 2)
    nb2_uv = np.roll(st.cuv, 1, axis=1).reshape(-1, 2)
    corner_uv = st.cuv.reshape(-1, 2)

    mv = movable[corner_v]
    # (vertex, side-uv) keys; exact byte grouping of the vertex's chart sides
    key = np.zeros(len(corner_v),
                   dtype=[("v", np.int64), ("u", np.float64), ("w", np.float64)])
    key["v"] = corner_v
    key["u"] = corner_uv[:, 0]
    key["w"] = corner_uv[:, 1]
    uniq, group = np.unique(key[mv], return_inverse=True)
    n_groups = len(uniq)
    got = np.zeros((n_groups, 2), dtype=bool)
    nbr_uv = np.zeros((n_groups, 2, 2))
    cn = flags.chain_nbr
    for which, (nv_arr, nuv_arr) in enumerate(((nb1_v, nb1_uv),
                                               (nb2_v, nb2_uv))):
        nv_m = nv_arr[mv]
        hit1 = nv_m == cn[corner_v[mv], 0]
        hit2 = nv_m == cn[corner_v[mv], 1]
        for side, hit in ((0, hit1), (1, hit2)):
            g = group[hit]
            nbr_uv[g, side] = nuv_arr[mv][hit]
            got[g, side] = True
    ready = got.all(axis=1)
    target = 0.5 * (nbr_uv[:, 0] + nbr_uv[:, 1])

    frozen = np.zeros(len(st.pos), dtype=bool)
    old_asp = _uv_aspect(st.cuv)
    corner_group = -np.ones(len(corner_v), dtype=np.int64)
    corner_group[np.nonzero(mv)[0]] = group
    for _ in range(3):
        trial = corner_uv.copy()
        live = (corner_group >= 0)
        g = corner_group[live]
        ok = ready[g] & ~frozen[corner_v[live]]
        rows = np.nonzero(live)[0][ok]
        trial[rows] = target[corner_group[rows]]
        trial = trial.reshape(F, 3, 2)
        area2 = st.signed_area2(trial, st.fp)
        bad = (area2 < 1e-14) | \
              (_uv_aspect(trial) > np.maximum(old_asp, st.t_dist))
        if not bad.any():
            st.cuv = trial
            return
        frozen[np.unique(st.faces[bad])] = True


def _relax_pass(st: _State, strength: float = 0.5,
                flags: _Flags | None = None):
    """Area-weighted tangential relaxation of interior vertices.

    Each vertex moves toward the area-weighted centroid of its one-ring
    faces, which drives triangle areas toward uniformity in the chart.
    """
    if flags is None:
        flags = _vertex_flags(st)
    movable = flags.rank == 0
    if not movable.any():
        return
    nv = len(st.pos)
    acc = np.zeros((nv, 2))
    cnt = np.zeros(nv)
    cur = np.zeros((nv, 2))
    w = np.abs(_chart_area2(st.cuv)) + 1e-18
    centroid = st.cuv.mean(axis=1)
    for j in range(3):
        vs = st.faces[:, j]
        np.add.at(acc, vs, w[:, None] * centroid)
        np.add.at(cnt, vs, w)
        cur[vs] = st.cuv[:, j]
    mean = acc / np.maximum(cnt, 1e-300)[:, None]
    new = cur + strength * (mean - cur)
    new[~movable] = cur[~movable]

    old_asp = _uv_aspect(st.cuv)
    t_dist = st.t_dist
    for _ in range(3):
        trial = st.cuv.copy()
        for j in range(3):
            vs = st.faces[:, j]
            sel = movable[vs]
            trial[sel, j] = new[vs[sel]]
        area2 = st.signed_area2(trial, st.fp)
        bad = (area2 < 1e-14) | (_uv_aspect(trial) > np.maximum(old_asp, t_dist))
        if not bad.any():
            st.cuv = trial
            return
        # freeze vertices whose move would invert or degrade a face, retry
        bad_verts = np.unique(st.faces[bad])
        new[bad_verts] = cur[bad_verts]
        movable[bad_verts] = False


class _ChartLocator:
    """Vectorized point location in one panel's input uv triangulation."""

    def __init__(self, tri_uv, tri_3d):
        from scipy.spatial import cKDTree

        self.tri_uv = tri_uv      # (T, 3, 2)
        self.tri_3d = tri_3d      # (T, 3, 3)
        self.tree = cKDTree(tri_uv.mean(axis=1))

    def lift(self, q):
        """Map uv points (Q, 2) to 3D via barycentric interpolation."""
        Q = len(q)
        best_bary = np.zeros((Q, 3))
        best_tri = np.zeros(Q, dtype=np.int64)
        best_score = np.full(Q, -np.inf)
        resolved = np.zeros(Q, dtype=bool)
        k = 8
        idx_pending = np.arange(Q)
        while len(idx_pending):
            kq = min(k, len(self.tri_uv))
            _, cand = self.tree.query(q[idx_pending], k=kq)
            cand = np.atleast_2d(cand)
            if cand.shape[0] != len(idx_pending):
                cand = cand.reshape(len(idx_pending), -1)
            a = self.tri_uv[cand, 0]
            b = self.tri_uv[cand, 1]
            c = self.tri_uv[cand, 2]
            p = q[idx_pending][:, None, :]
            v0 = b - a
            v1 = c - a
            v2 = p - a
            den = v0[..., 0] * v1[..., 1] - v0[..., 1] * v1[..., 0]
            den = np.where(np.abs(den) < 1e-30, 1e-30, den)
            l1 = (v2[..., 0] * v1[..., 1] - v2[..., 1] * v1[..., 0]) / den
            l2 = (v0[..., 0] * v2[..., 1] - v0[..., 1] * v2[..., 0]) / den
            l0 = 1.0 - l1 - l2
            bary = np.stack([l0, l1, l2], axis=2)
            score = bary.min(axis=2)
            pick = score.argmax(axis=1)
            rows = np.arange(len(idx_pending))
            sc = score[rows, pick]
            improve = sc > best_score[idx_pending]
            gi = idx_pending[improve]
            best_score[gi] = sc[improve]
            best_tri[gi] = cand[rows[improve], pick[improve]]
            best_bary[gi] = bary[rows[improve], pick[improve]]
            resolved[idx_pending] = best_score[idx_pending] >= -1e-9
            if resolved[idx_pending].all() or kq == len(self.tri_uv):
                break
            idx_pending = idx_pending[~resolved[idx_pending]]
            k *= 4
        bary = np.clip(best_bary, 0.0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        tri = self.tri_3d[best_tri]
        return (bary[:, :, None] * tri).sum(axis=1)


def _ensure_charts(t: TriangleMesh):
    if t.corner_uv is not None and t.face_panel is not None:
        return t.corner_uv.copy(), t.face_panel.copy()
    if t.uv is None:
        raise ValueError("mesh must carry uv coordinates for remeshing")
    cuv = t.uv[t.faces]
    fp = np.zeros(t.n_faces, dtype=np.int32)
    return cuv, fp


def remesh_phi(t: TriangleMesh, p=None, targets: RemeshTargets | None = None,
               passes: int = 15) -> TriangleMesh:
    """Re-triangulate a garment toward uniform chart-space triangle areas.

    Long edges split at chart midpoints, short edges collapse, interior
    edges flip toward regular valence, and interior vertices relax; the
    result is lifted back onto the input surface exactly (barycentric in
    the input charts). The design vector is accepted for interface
    uniformity but the operation depends only on the mesh and targets.
    """
    if targets is None:
        targets = RemeshTargets()
    cuv, fp = _ensure_charts(t)
    ell = ELL_SCALE * targets.edge_length

    n_panels = int(fp.max()) + 1 if len(fp) else 0
    chart_sign = np.ones(max(n_panels, 1))
    total_area = 0.0
    for q in range(n_panels):
        sel = fp == q
        a2 = _chart_area2(cuv[sel])
        s = np.sign(np.median(a2)) or 1.0
        chart_sign[q] = s
        total_area += float(np.abs(a2).sum()) / 2.0
    if targets.t_area > total_area:
        raise ValueError("t_area exceeds total panel area; target unachievable")

    # input charts for the final lift-back
    locators = {}
    for q in range(n_panels):
        sel = fp == q
        if sel.any():
            locators[q] = _ChartLocator(cuv[sel], t.vertices[t.faces[sel]])

    st = _State(t.vertices.copy(), t.faces.astype(np.int64).copy(),
                cuv.copy(), fp.copy(), chart_sign, t_dist=targets.t_dist)
    for it in range(passes):
        changed = _split_pass(st, ell)
        flags = _vertex_flags(st)
        changed |= _collapse_pass(st, ell, targets.t_dist, flags)
        flags = _vertex_flags(st)
        changed |= _flip_pass(st, "valence", targets.t_dist, flags)
        changed |= _flip_pass(st, "quality", targets.t_dist)
        flags = _vertex_flags(st)
        _chain_relax_pass(st, flags)
        for _ in range(3):
            _relax_pass(st, flags=flags)
        if not changed:
            break

    # the hysteresis band leaves a dead zone: an input whose edges all sit
    # between the collapse and split thresholds converges untouched even
    # when its mean area misses the contract window. Nudge the unit edge
    # toward the deficit and resettle until the realized mean fits.
    def _settle(rounds: int):
        for _ in range(rounds):
            ch = _split_pass(st, ell)
            fl = _vertex_flags(st)
            ch |= _collapse_pass(st, ell, targets.t_dist, fl)
            fl = _vertex_flags(st)
            ch |= _flip_pass(st, "valence", targets.t_dist, fl)
            ch |= _flip_pass(st, "quality", targets.t_dist)
            fl = _vertex_flags(st)
            _chain_relax_pass(st, fl)
            for _ in range(3):
                _relax_pass(st, flags=fl)
            if not ch:
                break

    for _ in range(3):
        area_sum = 0.5 * float(np.abs(_chart_area2(st.cuv)).sum())
        realized = area_sum / (len(st.faces) * targets.t_area)
        if 0.8 <= realized <= 1.2:
            break
        if realized > 1.2:
            forced = ell * 1.18 / SPLIT_FACTOR
            for _ in range(2):
                if not _split_pass(st, forced):
                    break
                fl = _vertex_flags(st)
                _chain_relax_pass(st, fl)
                for _ in range(2):
                    _relax_pass(st, flags=fl)
        else:
            forced = ell * 0.92 / COLLAPSE_FACTOR
            for _ in range(2):
                fl = _vertex_flags(st)
                if not _collapse_pass(st, forced, targets.t_dist, fl):
                    break
                fl = _vertex_flags(st)
                _chain_relax_pass(st, fl)
                for _ in range(2):
                    _relax_pass(st, flags=fl)
        _settle(2)

    # cleanup: sliver-opening flips interleaved with relaxation
    for _ in range(4):
        flags = _vertex_flags(st)
        _chain_relax_pass(st, flags)
        _relax_pass(st, flags=flags)
        if not _flip_pass(st, "quality", targets.t_dist):
            break
    _relax_pass(st)

    # compact vertices and pick one chart per vertex (lowest face id wins)
    used = np.unique(st.faces)
    remap = -np.ones(len(st.pos), dtype=np.int64)
    remap[used] = np.arange(len(used))
    faces = remap[st.faces]
    nv = len(used)
    flat_v = faces.reshape(-1)
    _, first = np.unique(flat_v, return_index=True)  # first occurrence wins
    vert_uv = st.cuv.reshape(-1, 2)[first]
    vert_panel = np.repeat(st.fp, 3)[first]

    pos = np.zeros((nv, 3))
    for q in range(n_panels):
        sel = vert_panel == q
        if sel.any():
            pos[sel] = locators[q].lift(vert_uv[sel])

    return TriangleMesh(pos, faces.astype(np.int32), uv=vert_uv,
                        panel_id=vert_panel.astype(np.int32),
                        corner_uv=st.cuv, face_panel=st.fp.astype(np.int32))
