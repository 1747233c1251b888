"""Deterministic quadric-error mesh decimation.

Collapses place the surviving vertex at one of the two edge endpoints, so
every output vertex keeps its exact input position. Used to derive the
coarse garment template and the pooling hierarchies of the graph network.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

BOUNDARY_PENALTY = 1e3


@dataclass(frozen=True)
class Decimation:
    """Result of a decimation run.

    keep: ascending original ids of the surviving vertices
    faces: (F, 3) indices into keep
    assign: for every original vertex, the slot in keep it merged into
    """
    keep: np.ndarray
    faces: np.ndarray
    assign: np.ndarray


def _face_quadrics(vertices, faces):
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    n = np.cross(v1 - v0, v2 - v0)
    norm = np.linalg.norm(n, axis=1)
    area = 0.5 * norm
    n = n / np.maximum(norm, 1e-300)[:, None]
    d = -(n * v0).sum(axis=1)
    plane = np.concatenate([n, d[:, None]], axis=1)          # (F, 4)
    K = plane[:, :, None] * plane[:, None, :]                # (F, 4, 4)
    K *= np.maximum(area, 1e-300)[:, None, None]

    Q = np.zeros((len(vertices), 4, 4))
    for j in range(3):
        np.add.at(Q, faces[:, j], K)
    return Q, n


def _boundary_quadrics(Q, vertices, faces, face_n):
    """Constraint planes perpendicular to each open-boundary face."""
    ea = faces.reshape(-1)
    eb = np.roll(faces, -1, axis=1).reshape(-1)
    und = np.sort(np.stack([ea, eb], axis=1), axis=1)
    edges, inv, counts = np.unique(und, axis=0, return_inverse=True,
                                   return_counts=True)
    face_of = np.full(len(edges), -1, dtype=np.int64)
    face_of[inv] = np.repeat(np.arange(len(faces)), 3)
    open_e = counts == 1
    if not open_e.any():
        return
    a = vertices[edges[open_e, 0]]
    b = vertices[edges[open_e, 1]]
    t = b - a
    length = np.linalg.norm(t, axis=1)
    m = np.cross(face_n[face_of[open_e]], t)
    m = m / np.maximum(np.linalg.norm(m, axis=1), 1e-300)[:, None]
    d = -(m * a).sum(axis=1)
    plane = np.concatenate([m, d[:, None]], axis=1)
    K = plane[:, :, None] * plane[:, None, :]
    K *= (BOUNDARY_PENALTY * length ** 2)[:, None, None]
    np.add.at(Q, edges[open_e, 0], K)
    np.add.at(Q, edges[open_e, 1], K)


def _cost(Q, pos):
    h = np.array([pos[0], pos[1], pos[2], 1.0])
    return float(h @ Q @ h)


def qem_decimate(vertices, faces, target_verts: int, strict: bool = True) -> Decimation:
    """Edge-collapse decimation down to target_verts surviving vertices.

    Deterministic: the candidate heap breaks cost ties on vertex ids and
    all geometry is evaluated in input order. With strict=False a mesh
    that runs out of legal collapses is returned at whatever size it
    reached instead of raising.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    nv = len(vertices)
    if target_verts >= nv:
        return Decimation(np.arange(nv), faces.copy(), np.arange(nv))
    if target_verts < 3:
        raise ValueError("target_verts must be at least 3")

    Q, face_n = _face_quadrics(vertices, faces)
    _boundary_quadrics(Q, vertices, faces, face_n)

    cur = {fi: tuple(int(v) for v in f) for fi, f in enumerate(faces)}
    vert_faces = {}
    for fi, f in cur.items():
        for v in f:
            vert_faces.setdefault(v, set()).add(fi)

    alive = np.ones(nv, dtype=bool)
    version = np.zeros(nv, dtype=np.int64)
    assign = np.arange(nv)
    n_alive = nv

    def push_edge(heap, a, b):
        if a > b:
            a, b = b, a
        Qe = Q[a] + Q[b]
        ca = _cost(Qe, vertices[a])
        cb = _cost(Qe, vertices[b])
        if ca <= cb:
            heapq.heappush(heap, (ca, a, b, 0, version[a], version[b]))
        else:
            heapq.heappush(heap, (cb, a, b, 1, version[a], version[b]))

    heap = []
    seen = set()
    for f in cur.values():
        for j in range(3):
            a, b = f[j], f[(j + 1) % 3]
            k = (min(a, b), max(a, b))
            if k not in seen:
                seen.add(k)
                push_edge(heap, *k)
    del seen

    while n_alive > target_verts and heap:
        cost, a, b, which, va, vb = heapq.heappop(heap)
        if not (alive[a] and alive[b]):
            continue
        if version[a] != va or version[b] != vb:
            continue
        keep, drop = (a, b) if which == 0 else (b, a)

        fa = {fi for fi in vert_faces.get(a, ()) if fi in cur}
        fb = {fi for fi in vert_faces.get(b, ()) if fi in cur}
        shared = fa & fb
        if not shared:
            continue  # endpoints merged apart by earlier collapses
        opp = set()
        for fi in shared:
            for v in cur[fi]:
                if v != a and v != b:
                    opp.add(v)
        na = {v for fi in fa for v in cur[fi]} - {a}
        nb = {v for fi in fb for v in cur[fi]} - {b}
        if na & nb != opp:
            continue

        # reject collapses that fold any surviving face over
        drop_faces = (fa if drop == a else fb) - shared
        ok = True
        for fi in drop_faces:
            f = cur[fi]
            old = [vertices[v] for v in f]
            new = [vertices[keep if v == drop else v] for v in f]
            n_old = np.cross(old[1] - old[0], old[2] - old[0])
            n_new = np.cross(new[1] - new[0], new[2] - new[0])
            if float(n_old @ n_new) <= 0 or float(n_new @ n_new) < 1e-24:
                ok = False
                break
        if not ok:
            continue

        for fi in shared:
            for v in cur[fi]:
                vert_faces[v].discard(fi)
            del cur[fi]
        for fi in drop_faces:
            f = cur[fi]
            cur[fi] = tuple(keep if v == drop else v for v in f)
            vert_faces[drop].discard(fi)
            vert_faces[keep].add(fi)

        Q[keep] = Q[keep] + Q[drop]
        alive[drop] = False
        assign[drop] = keep
        version[keep] += 1
        n_alive -= 1

        nbrs = sorted({v for fi in vert_faces[keep] for v in cur[fi]} - {keep})
        for v in nbrs:
            push_edge(heap, keep, v)

    if n_alive > target_verts and strict:
        raise RuntimeError("decimation blocked before reaching target size")

    keep_ids = np.nonzero(alive)[0]
    slot = -np.ones(nv, dtype=np.int64)
    slot[keep_ids] = np.arange(len(keep_ids))
    root = assign.copy()
    for v in range(nv):  # resolve collapse chains
        r = v
        while root[r] != r:
            r = root[r]
        root[v] = r
    out_faces = np.array([cur[fi] for fi in sorted(cur)], dtype=np.int64)
    return Decimation(keep=keep_ids, faces=slot[out_faces],
                      assign=slot[root])
