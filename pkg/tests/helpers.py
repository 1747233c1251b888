"""Shared mesh builders for tests."""
from __future__ import annotations

import numpy as np

from drapenet.mesh import TriangleMesh


def grid_mesh(nx, ny, spacing=1.0, z=0.0):
    """Flat triangulated rectangle in the z plane, CCW seen from +z."""
    xs = np.arange(nx) * spacing
    ys = np.arange(ny) * spacing
    verts = np.array([[x, y, z] for y in ys for x in xs], dtype=np.float64)
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b = a + 1
            c = a + nx
            d = c + 1
            faces.append([a, b, d])
            faces.append([a, d, c])
    return TriangleMesh(verts, faces)


def tube_mesh(n_around, n_along, radius, length, axis="z"):
    """Open-ended triangulated cylinder shell."""
    verts = []
    for j in range(n_along):
        t = j / (n_along - 1)
        for i in range(n_around):
            ang = 2 * np.pi * i / n_around
            x, y = radius * np.cos(ang), radius * np.sin(ang)
            h = t * length
            if axis == "z":
                verts.append([x, y, h])
            else:
                verts.append([h, x, y])
    faces = []
    for j in range(n_along - 1):
        for i in range(n_around):
            a = j * n_around + i
            b = j * n_around + (i + 1) % n_around
            c = a + n_around
            d = b + n_around
            faces.append([a, b, d])
            faces.append([a, d, c])
    return TriangleMesh(verts, faces)


def capped_cylinder_mesh(n_around, n_along, radius, z0, z1):
    """Closed (watertight) cylinder along z from z0 to z1."""
    shell = tube_mesh(n_around, n_along, radius, z1 - z0)
    verts = shell.vertices.copy()
    verts[:, 2] += z0
    verts = list(map(list, verts))
    faces = list(map(list, shell.faces))
    bot = len(verts)
    verts.append([0.0, 0.0, z0])
    top = len(verts)
    verts.append([0.0, 0.0, z1])
    last = (n_along - 1) * n_around
    for i in range(n_around):
        a, b = i, (i + 1) % n_around
        faces.append([bot, b, a])  # bottom cap faces -z
        faces.append([top, last + a, last + b])
    return TriangleMesh(verts, faces)


def fan_cube_mesh(size=1.0):
    """Axis-aligned cube with each face split as a 4-triangle fan.

    Every corner touches two triangles per adjacent face with equal areas, so
    area-weighted corner normals align with the (+-1, +-1, +-1) diagonals.
    """
    s = size / 2.0
    corners = np.array([[sx, sy, sz] for sx in (-s, s) for sy in (-s, s) for sz in (-s, s)])
    verts = list(map(list, corners))
    faces = []
    # each face: 4 corner indices in CCW order viewed from outside
    quads = [
        ([0, 1, 3, 2], [-1, 0, 0]),
        ([4, 6, 7, 5], [1, 0, 0]),
        ([0, 4, 5, 1], [0, -1, 0]),
        ([2, 3, 7, 6], [0, 1, 0]),
        ([0, 2, 6, 4], [0, 0, -1]),
        ([1, 5, 7, 3], [0, 0, 1]),
    ]
    for quad, _n in quads:
        center = corners[quad].mean(axis=0)
        ci = len(verts)
        verts.append(list(center))
        for k in range(4):
            a, b = quad[k], quad[(k + 1) % 4]
            faces.append([a, b, ci])
    return TriangleMesh(verts, faces)


def icosphere(subdiv=1, radius=1.0):
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    verts = list(map(list, verts))
    for _ in range(subdiv):
        mid = {}
        new_faces = []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in mid:
                p = (np.array(verts[a]) + np.array(verts[b])) / 2.0
                p /= np.linalg.norm(p)
                mid[key] = len(verts)
                verts.append(list(p))
            return mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    v = np.array(verts) * radius
    return TriangleMesh(v, faces)


def brute_point_triangle_distance(p, a, b, c):
    """Scalar reference point-triangle distance via plane projection + edge clamps.

    Written independently of the library implementation on purpose.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    n = np.cross(b - a, c - a)
    nn = np.dot(n, n)
    best = np.inf
    if nn > 0:
        q = p - n * (np.dot(p - a, n) / nn)
        # barycentric of q
        v0, v1, v2 = b - a, c - a, q - a
        d00, d01, d11 = np.dot(v0, v0), np.dot(v0, v1), np.dot(v1, v1)
        d20, d21 = np.dot(v2, v0), np.dot(v2, v1)
        den = d00 * d11 - d01 * d01
        if den > 0:
            v = (d11 * d20 - d01 * d21) / den
            w = (d00 * d21 - d01 * d20) / den
            if v >= 0 and w >= 0 and v + w <= 1:
                best = np.linalg.norm(p - q)
    for s, e in ((a, b), (b, c), (c, a)):
        d = e - s
        dd = np.dot(d, d)
        t = 0.0 if dd == 0 else np.clip(np.dot(p - s, d) / dd, 0.0, 1.0)
        best = min(best, np.linalg.norm(p - (s + t * d)))
    return best


def brute_point_mesh_distance(p, mesh):
    return min(
        brute_point_triangle_distance(p, *mesh.vertices[f]) for f in mesh.faces
    )
