"""Tests for panel layout, triangulation, seaming, remeshing and templates."""
import numpy as np
import pytest
from scipy.spatial import cKDTree

from drapenet.body import build_body, signed_distance
from drapenet.garment import (
    MIN_SLEEVE_LENGTH,
    Panel,
    PanelSet,
    Seam,
    build_garment,
    canonical_highres,
    downsample_to_template,
    panel_layout,
    seam_and_lift,
    triangulate_panels,
)
from drapenet.mesh import TriangleMesh
from drapenet.remesh import DEFAULT_T_AREA, DEFAULT_T_DIST, RemeshTargets, remesh_phi

from helpers import brute_point_triangle_distance

DRESS = np.array([1.0, 1.0, 1.0])
TEE = np.array([0.3, 0.2, 0.5])


@pytest.fixture(scope="module")
def dress_garment():
    return build_garment(DRESS)


@pytest.fixture(scope="module")
def dress_remeshed(dress_garment):
    return remesh_phi(dress_garment)


def euler_characteristic(mesh):
    ea = mesh.faces.reshape(-1)
    eb = np.roll(mesh.faces, -1, axis=1).reshape(-1)
    edges = np.unique(np.sort(np.stack([ea, eb], axis=1), axis=1), axis=0)
    return mesh.n_vertices - len(edges) + mesh.n_faces


def connected_components(mesh):
    import scipy.sparse as sp

    ea = mesh.faces.reshape(-1)
    eb = np.roll(mesh.faces, -1, axis=1).reshape(-1)
    n = mesh.n_vertices
    a = sp.coo_matrix((np.ones(len(ea)), (ea, eb)), shape=(n, n))
    return sp.csgraph.connected_components(a, directed=False)[0]


# ---------------------------------------------------------------------------
# panel_layout


def test_layout_midpoint_interpolation():
    lo = panel_layout([0, 0, 0])
    hi = panel_layout([1, 1, 1])
    mid = panel_layout([0.5, 0.5, 0.5])
    for name in ("front", "back"):
        expect = 0.5 * (lo.panels[name].corners + hi.panels[name].corners)
        assert np.allclose(mid.panels[name].corners, expect, atol=1e-12)


def test_layout_drops_degenerate_sleeves():
    ps = panel_layout([0.0, 0.0, 0.5])
    assert sorted(ps.panels) == ["back", "front"]
    assert len(ps.seams) == 2
    with_sleeves = panel_layout([0.5, 0.8, 0.5])
    assert sorted(with_sleeves.panels) == ["back", "front", "sleeve_l", "sleeve_r"]
    assert len(with_sleeves.seams) == 8


def test_layout_torso_height_monotone():
    heights = []
    for t in np.linspace(0, 1, 11):
        c = panel_layout([t, 0.5, 0.5]).panels["front"].corners
        heights.append(c[:, 1].max() - c[:, 1].min())
    assert all(b >= a - 1e-12 for a, b in zip(heights, heights[1:]))
    assert heights[-1] > heights[0]


def test_layout_clamps_out_of_range():
    a = panel_layout([2.0, -1.0, 0.5])
    b = panel_layout([1.0, 0.0, 0.5])
    for name in a.panels:
        assert np.array_equal(a.panels[name].corners, b.panels[name].corners)


def test_layout_is_lipschitz():
    # corner motion is linear in p, so the constant from one probe bounds all
    rng = np.random.default_rng(7)
    delta = 1e-3

    def flat(ps):
        return np.concatenate([ps.panels[n].corners.ravel()
                               for n in ("front", "back")])

    base_dirs = np.eye(3)
    c_fit = 0.0
    for d in base_dirs:
        move = np.abs(flat(panel_layout([0.5, 0.5, 0.5] + delta * d))
                      - flat(panel_layout([0.5, 0.5, 0.5])))
        c_fit = max(c_fit, move.max() / delta)
    for _ in range(20):
        p = rng.uniform(0.1, 0.9, 3)
        d = rng.normal(size=3)
        d /= np.abs(d).max()
        move = np.abs(flat(panel_layout(p + delta * d)) - flat(panel_layout(p)))
        assert move.max() <= c_fit * delta * np.abs(d).max() + 1e-12


# ---------------------------------------------------------------------------
# triangulate_panels


def unit_square_set():
    sq = Panel(np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]]),
               ("bottom", "right", "top", "left"))
    return PanelSet(panels={"sq": sq}, seams=[])


def cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def mesh_area(mesh):
    v = mesh.uv[mesh.faces]
    return 0.5 * np.abs(cross2(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])).sum()


def test_triangulate_unit_square_area():
    pm = triangulate_panels(unit_square_set(), 1.0)["sq"]
    assert pm.mesh.n_faces >= 2
    assert abs(mesh_area(pm.mesh) - 1.0) < 1e-6


def test_triangulate_polygon_area_conserved():
    ps = panel_layout(TEE)
    meshes = triangulate_panels(ps, 0.02)
    for name, pm in meshes.items():
        poly = ps.panels[name].area()
        assert abs(mesh_area(pm.mesh) - poly) <= 1e-3 * poly


def test_triangulate_halving_edge_multiplies_count():
    ps = panel_layout(DRESS)
    coarse = triangulate_panels(ps, 0.04)
    fine = triangulate_panels(ps, 0.02)
    for name in ps.panels:
        ratio = fine[name].mesh.n_faces / coarse[name].mesh.n_faces
        assert 3.0 <= ratio <= 5.0


def test_triangulate_interior_edge_lengths():
    ps = panel_layout(DRESS)
    for pm in triangulate_panels(ps, 0.016).values():
        f = pm.mesh.faces
        ea = f.reshape(-1)
        eb = np.roll(f, -1, axis=1).reshape(-1)
        und = np.sort(np.stack([ea, eb], axis=1), axis=1)
        edges, counts = np.unique(und, axis=0, return_counts=True)
        interior = edges[counts == 2]
        uv = pm.mesh.uv
        lens = np.linalg.norm(uv[interior[:, 0]] - uv[interior[:, 1]], axis=1)
        assert lens.min() >= 0.5 * 0.016
        assert lens.max() <= 2.0 * 0.016


def test_triangulate_rejects_bad_edge_len():
    with pytest.raises(ValueError):
        triangulate_panels(unit_square_set(), -0.1)


# ---------------------------------------------------------------------------
# seam_and_lift


def two_rectangle_set(width_b=0.4):
    corners_a = np.array([[0.0, 0], [0.4, 0], [0.4, 1], [0, 1]])
    corners_b = np.array([[0.0, 0], [width_b, 0], [width_b, 1], [0, 1]])
    labels = ("bottom", "right", "top", "left")
    return PanelSet(
        panels={"a": Panel(corners_a, labels), "b": Panel(corners_b, labels)},
        seams=[Seam(("a", "left"), ("b", "left")),
               Seam(("a", "right"), ("b", "right"))])


def test_two_rectangles_make_a_tube():
    ps = two_rectangle_set()
    meshes = triangulate_panels(ps, 0.1)
    tube = seam_and_lift(ps, meshes)
    assert connected_components(tube) == 1
    assert euler_characteristic(tube) == 0


def test_seam_merges_exactly_the_seam_samples():
    ps = two_rectangle_set()
    meshes = triangulate_panels(ps, 0.1)
    before = sum(pm.mesh.n_vertices for pm in meshes.values())
    merged = seam_and_lift(ps, meshes)
    samples = sum(len(meshes["a"].boundary[lab]) for lab in ("left", "right"))
    assert merged.n_vertices == before - samples


def test_seam_length_mismatch_raises():
    ps = two_rectangle_set(width_b=0.45)  # left/right stay equal, top differs
    ps.seams.append(Seam(("a", "top"), ("b", "top")))
    with pytest.raises(ValueError, match="1%"):
        triangulate_panels(ps, 0.1)
        seam_and_lift(ps, triangulate_panels(ps, 0.1))


def test_lifted_garment_clears_body():
    body = build_body(resolution=0.02)
    g = build_garment(TEE, body)
    d, _ = signed_distance(body.template, g.vertices)
    assert d.min() >= 0.0


def test_garment_is_single_component(dress_garment):
    assert connected_components(dress_garment) == 1


# ---------------------------------------------------------------------------
# remesh_phi


def corner_metrics(mesh):
    e = mesh.corner_uv
    a2 = np.abs(cross2(e[:, 1] - e[:, 0], e[:, 2] - e[:, 0]))
    lens = np.stack([
        np.linalg.norm(e[:, 1] - e[:, 0], axis=1),
        np.linalg.norm(e[:, 2] - e[:, 1], axis=1),
        np.linalg.norm(e[:, 0] - e[:, 2], axis=1),
    ], axis=1)
    lmax = lens.max(axis=1)
    lmid = np.sort(lens, axis=1)[:, 1]
    aspect = lmax ** 2 / a2
    min_angle = np.arcsin(np.clip(a2 / (lmid * lmax), 0, 1))
    return a2 / 2, aspect, np.degrees(min_angle)


def test_remesh_mean_area_window(dress_remeshed):
    areas, _, _ = corner_metrics(dress_remeshed)
    assert 0.8 * DEFAULT_T_AREA <= areas.mean() <= 1.2 * DEFAULT_T_AREA


def test_remesh_quality(dress_remeshed):
    _, aspect, min_angle = corner_metrics(dress_remeshed)
    assert aspect.max() <= DEFAULT_T_DIST
    assert min_angle.min() > 15.0


def test_remesh_dress_vertex_count(dress_remeshed):
    assert 3300 <= dress_remeshed.n_vertices <= 3800
    assert dress_remeshed.n_vertices > 403


def test_remesh_is_manifold(dress_remeshed):
    TriangleMesh(dress_remeshed.vertices, dress_remeshed.faces)  # validates


def test_remesh_idempotent(dress_remeshed):
    again = remesh_phi(dress_remeshed)
    change = abs(again.n_vertices - dress_remeshed.n_vertices)
    assert change / dress_remeshed.n_vertices < 0.10


def test_remesh_deterministic(dress_garment):
    a = remesh_phi(dress_garment)
    b = remesh_phi(dress_garment)
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.faces, b.faces)


def test_remesh_lift_back_on_input_surface(dress_garment, dress_remeshed):
    tri = dress_garment.vertices[dress_garment.faces]
    tree = cKDTree(tri.mean(axis=1))
    rng = np.random.default_rng(3)
    sample = rng.choice(dress_remeshed.n_vertices, 200, replace=False)
    for vi in sample:
        p = dress_remeshed.vertices[vi]
        _, cand = tree.query(p, k=24)
        d = min(brute_point_triangle_distance(p, *tri[fi]) for fi in cand)
        assert d <= 1e-6


def test_remesh_window_holds_from_coarse_inputs(dress_garment):
    coarse = remesh_phi(dress_garment,
                        targets=RemeshTargets(t_area=2 * DEFAULT_T_AREA))
    fine = remesh_phi(coarse)
    areas, aspect, min_angle = corner_metrics(fine)
    assert 0.8 * DEFAULT_T_AREA <= areas.mean() <= 1.2 * DEFAULT_T_AREA
    assert aspect.max() <= DEFAULT_T_DIST
    assert min_angle.min() > 15.0


def test_remesh_sleeveless_design():
    g = build_garment([0.5, 0.0, 1.0])
    m = remesh_phi(g)
    areas, aspect, min_angle = corner_metrics(m)
    assert 0.8 * DEFAULT_T_AREA <= areas.mean() <= 1.2 * DEFAULT_T_AREA
    assert min_angle.min() > 15.0


def test_remesh_unachievable_target_raises(dress_garment):
    with pytest.raises(ValueError):
        remesh_phi(dress_garment, targets=RemeshTargets(t_area=100.0))


# ---------------------------------------------------------------------------
# canonical correspondence and the coarse template


def test_canonical_meshes_share_layout():
    a = canonical_highres(DRESS)
    b = canonical_highres([0.1, 0.0, 0.9])
    assert a.n_vertices == b.n_vertices
    assert np.array_equal(a.faces, b.faces)
    assert not np.allclose(a.vertices, b.vertices)


def test_template_vertex_count():
    for p in (DRESS, TEE, [0.0, 0.0, 0.0]):
        tpl = downsample_to_template(canonical_highres(p))
        assert tpl.n_vertices == 403


def test_template_positions_are_subset():
    hi = canonical_highres(TEE)
    tpl = downsample_to_template(hi)
    pool = {tuple(v) for v in hi.vertices}
    assert all(tuple(v) in pool for v in tpl.vertices)


def test_template_rigid_equivariance():
    hi = canonical_highres(TEE)
    th = 0.9
    rot = np.array([[np.cos(th), -np.sin(th), 0],
                    [np.sin(th), np.cos(th), 0], [0, 0, 1]])
    shift = np.array([0.2, -0.4, 1.3])
    moved = TriangleMesh(hi.vertices @ rot.T + shift, hi.faces, uv=hi.uv,
                         panel_id=hi.panel_id, corner_uv=hi.corner_uv,
                         face_panel=hi.face_panel)
    a = downsample_to_template(moved)
    b = downsample_to_template(hi)
    assert np.abs(a.vertices - (b.vertices @ rot.T + shift)).max() < 1e-12


def test_template_rejects_non_canonical_input(dress_garment):
    with pytest.raises(ValueError, match="correspondence"):
        downsample_to_template(dress_garment)


def test_template_is_connected_manifold():
    tpl = downsample_to_template(canonical_highres(DRESS))
    TriangleMesh(tpl.vertices, tpl.faces)  # manifoldness
    assert connected_components(tpl) == 1
