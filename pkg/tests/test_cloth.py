"""Tests for the quasi-static cloth relaxation and GT decomposition."""
import numpy as np
import pytest

from drapenet.body import signed_distance
from drapenet.cloth import (
    CONTACT_OFFSET,
    MATERIALS,
    Material,
    NonConvergenceError,
    decompose_gt,
    mean_curvature_proxy,
    relax_drape,
)
from drapenet.mesh import TriangleMesh, uniform_laplacian_smooth

from helpers import capped_cylinder_mesh, grid_mesh, tube_mesh


def _rod_body():
    cyl = capped_cylinder_mesh(48, 24, radius=0.10, z0=-0.30, z1=0.30)
    return TriangleMesh(cyl.vertices[:, [2, 0, 1]], cyl.faces)  # axis -> x


def _cloth_tube():
    tube = tube_mesh(40, 30, radius=0.18, length=0.50, axis="x")
    v = tube.vertices.copy()
    v[:, 0] -= 0.25
    return TriangleMesh(v, tube.faces)


@pytest.fixture(scope="module")
def rod_drapes():
    body = _rod_body()
    tube = _cloth_tube()
    out = {}
    for mid in ("M1", "M2"):
        mesh, info = relax_drape(tube, body, MATERIALS[mid], return_info=True)
        out[mid] = (mesh, info)
    return body, tube, out


def test_material_presets():
    assert set(MATERIALS) == {"M1", "M2"}
    m1, m2 = MATERIALS["M1"], MATERIALS["M2"]
    assert m1.bend_stiffness > m2.bend_stiffness
    assert m1.stretch_stiffness == m2.stretch_stiffness
    with pytest.raises(ValueError):
        Material("bad", stretch_stiffness=0.0, bend_stiffness=1.0, density=1.0)


def test_pinned_square_sags_in_the_middle():
    cloth = grid_mesh(9, 9, spacing=0.05, z=0.0)
    corners = [0, 8, 72, 80]
    out, info = relax_drape(cloth, None, MATERIALS["M1"], pins=corners,
                            return_info=True)
    assert info["residual"] < 1e-5
    z = out.vertices[:, 2]
    assert np.allclose(z[corners], 0.0)
    center = 4 * 9 + 4
    assert z[center] < -0.01
    interior = np.setdiff1d(np.arange(81), corners)
    assert z[interior].max() < 0.0


def test_stretched_triangle_relaxes_to_rest_lengths():
    rest = TriangleMesh([[0, 0, 0], [0.1, 0, 0], [0, 0.1, 0]], [[0, 1, 2]])
    stretched = rest.vertices * 1.25
    out = relax_drape(rest, None, MATERIALS["M1"], gravity=False,
                      initial_vertices=stretched)
    e = rest.edges()
    rest_len = np.linalg.norm(rest.vertices[e[:, 1]] - rest.vertices[e[:, 0]], axis=1)
    new_len = np.linalg.norm(out.vertices[e[:, 1]] - out.vertices[e[:, 0]], axis=1)
    assert np.abs(new_len / rest_len - 1.0).max() < 1e-3


def test_draped_tube_clears_the_body(rod_drapes):
    body, _tube, out = rod_drapes
    for mid in ("M1", "M2"):
        d, _ = signed_distance(body, out[mid][0].vertices)
        assert (d < CONTACT_OFFSET - 1e-3).sum() == 0
        assert out[mid][0].vertices[:, 2].min() < -0.25  # actually draped down


def test_draped_tube_strain_below_ten_percent(rod_drapes):
    _body, tube, out = rod_drapes
    e = tube.edges()
    rest_len = np.linalg.norm(tube.vertices[e[:, 1]] - tube.vertices[e[:, 0]], axis=1)
    mesh = out["M1"][0]
    new_len = np.linalg.norm(mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]], axis=1)
    assert np.abs(new_len / rest_len - 1.0).max() <= 0.10


def test_energy_non_increasing_over_final_window(rod_drapes):
    for mid in ("M1", "M2"):
        energy = rod_drapes[2][mid][1]["energy"]
        tail = np.diff(energy[-100:])
        assert tail.max() <= 1e-8


def test_topology_is_preserved(rod_drapes):
    _body, tube, out = rod_drapes
    mesh = out["M1"][0]
    assert np.array_equal(mesh.faces, tube.faces)
    assert mesh.n_vertices == tube.n_vertices


def test_low_bend_material_wrinkles_more(rod_drapes):
    _body, _tube, out = rod_drapes
    c1 = mean_curvature_proxy(out["M1"][0]).mean()
    c2 = mean_curvature_proxy(out["M2"][0]).mean()
    assert c2 > c1


def test_relaxation_is_deterministic():
    cloth = grid_mesh(7, 7, spacing=0.05)
    a = relax_drape(cloth, None, MATERIALS["M1"], pins=[0, 6, 42, 48])
    b = relax_drape(cloth, None, MATERIALS["M1"], pins=[0, 6, 42, 48])
    assert a.vertices.tobytes() == b.vertices.tobytes()


def test_non_convergence_raises_with_residual():
    cloth = grid_mesh(5, 5, spacing=0.05)  # free fall, no pins, no body
    with pytest.raises(NonConvergenceError) as exc:
        relax_drape(cloth, None, MATERIALS["M1"], max_iterations=40)
    assert exc.value.residual > 0


def test_degenerate_rest_edge_rejected():
    m = TriangleMesh([[0, 0, 0], [0, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    with pytest.raises(ValueError):
        relax_drape(m, None, MATERIALS["M1"])


# ---------------------------------------------------------------------------
# GT decomposition


def _bumpy_pair():
    rng = np.random.default_rng(0)
    base = grid_mesh(12, 12, spacing=0.02)
    v1 = base.vertices.copy()
    v1[:, 2] += 0.003 * np.sin(v1[:, 0] * 40) + rng.normal(0, 5e-4, len(v1))
    v2 = base.vertices.copy()
    v2[:, 2] += 0.003 * np.cos(v2[:, 1] * 35) + rng.normal(0, 8e-4, len(v2))
    return base, base.with_vertices(v1), base.with_vertices(v2)


def test_decompose_single_material_is_smoothed_minus_mean():
    mean_fit, sim, _ = _bumpy_pair()
    smooth_gt, fine_gt = decompose_gt({"M1": sim}, mean_fit)
    expect = uniform_laplacian_smooth(sim, 30, 0.5).vertices - mean_fit.vertices
    np.testing.assert_allclose(smooth_gt, expect, atol=1e-12)
    assert set(fine_gt) == {"M1"}


def test_decompose_identical_sims_give_equal_fine_offsets():
    mean_fit, sim, _ = _bumpy_pair()
    _, fine_gt = decompose_gt({"M1": sim, "M2": sim}, mean_fit)
    np.testing.assert_array_equal(fine_gt["M1"], fine_gt["M2"])


def test_decompose_reconstruction_identity():
    mean_fit, s1, s2 = _bumpy_pair()
    sims = {"M1": s1, "M2": s2}
    smooth_gt, fine_gt = decompose_gt(sims, mean_fit)
    sm = {k: uniform_laplacian_smooth(sims[k], 30, 0.5).vertices for k in sims}
    mean_smooth = (sm["M1"] + sm["M2"]) / 2
    for k in sims:
        recon = mean_fit.vertices + smooth_gt + fine_gt[k]
        gap = np.abs(recon - sims[k].vertices).max()
        expected = np.abs(mean_smooth - sm[k]).max()
        assert abs(gap - expected) < 1e-12


def test_decompose_rejects_mismatched_topology():
    mean_fit, sim, _ = _bumpy_pair()
    other = grid_mesh(5, 5, spacing=0.02)
    with pytest.raises(ValueError):
        decompose_gt({"M1": other}, mean_fit)
    with pytest.raises(ValueError):
        decompose_gt({}, mean_fit)
