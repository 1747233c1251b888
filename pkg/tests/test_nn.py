import struct

import numpy as np
import pytest

from drapenet import autodiff as ad
from drapenet import nn
from drapenet.mesh import SparseMatrix, TriangleMesh, graph_laplacian
from drapenet.nn import (
    ChebLayerParams,
    CheckpointError,
    ModelParams,
    adam_step,
    build_sampling,
    cheb_conv,
    dense_forward,
    estimate_lambda_max,
    graph_hierarchy,
    init_dense_params,
    init_unet_params,
    load_checkpoint,
    mlp_forward,
    save_checkpoint,
    scaled_laplacian,
    unet_forward,
    weight_decay,
)

from helpers import grid_mesh, icosphere


def random_graph_laplacian(seed, n_max=30):
    """Dense combinatorial Laplacian of a random simple graph, n >= 2."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, n_max + 1))
    adj = (rng.random((n, n)) < 0.35).astype(np.float64)
    adj = np.triu(adj, 1)
    if not adj.any():
        adj[0, 1] = 1.0
    adj = adj + adj.T
    return np.diag(adj.sum(axis=1)) - adj, rng


def dense_cheb(x, l_tilde, theta, bias=None):
    """Reference filter response via explicit Chebyshev matrix powers."""
    k = theta.shape[0]
    n = l_tilde.shape[0]
    t_mats = [np.eye(n), l_tilde]
    for _ in range(2, k):
        t_mats.append(2.0 * l_tilde @ t_mats[-1] - t_mats[-2])
    y = sum(t_mats[i] @ x @ theta[i] for i in range(k))
    return y if bias is None else y + bias


def k7_torus(seed=42):
    """Closed 7-vertex torus whose vertex graph is complete.

    Every edge collapse violates the link condition, so simplification
    cannot remove a single vertex.
    """
    faces = []
    for i in range(7):
        faces.append([i, (i + 1) % 7, (i + 3) % 7])
        faces.append([i, (i + 3) % 7, (i + 2) % 7])
    rng = np.random.default_rng(seed)
    return TriangleMesh(rng.standard_normal((7, 3)), np.array(faces, dtype=np.int32))


def fd_gradient(build_loss, var, h=1e-4):
    """Central finite differences of a scalar tape function wrt one leaf."""
    fd = np.zeros_like(var.value)
    it = np.nditer(var.value, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = var.value[idx]
        var.value[idx] = old + h
        f_plus = float(build_loss().value)
        var.value[idx] = old - h
        f_minus = float(build_loss().value)
        var.value[idx] = old
        fd[idx] = (f_plus - f_minus) / (2.0 * h)
    return fd


def assert_grad_matches_fd(build_loss, leaves, tol=1e-5):
    for leaf in leaves:
        leaf.grad = None
    loss = build_loss()
    ad.backward(loss)
    for leaf in leaves:
        assert leaf.grad is not None
        fd = fd_gradient(build_loss, leaf)
        err = np.abs(leaf.grad - fd).max() / (1.0 + np.abs(fd).max())
        assert err < tol, f"gradient mismatch {err} for {leaf.name or 'leaf'}"


# ---------------------------------------------------------------- Laplacian prep


def test_scaled_laplacian_at_lambda_two_is_shift_by_identity():
    l_dense, _ = random_graph_laplacian(0)
    l = SparseMatrix.from_dense(l_dense)
    got = scaled_laplacian(l, 2.0).to_dense()
    assert np.allclose(got, l_dense - np.eye(len(l_dense)), atol=1e-14)


def test_scaled_laplacian_spectrum_in_unit_interval():
    for seed in range(12):
        l_dense, _ = random_graph_laplacian(seed)
        lam_true = float(np.linalg.eigvalsh(l_dense)[-1])
        got = scaled_laplacian(SparseMatrix.from_dense(l_dense), lam_true)
        eig = np.linalg.eigvalsh(got.to_dense())
        assert eig[0] >= -1.0 - 1e-9
        assert eig[-1] <= 1.0 + 1e-9


def test_scaled_laplacian_preserves_symmetry():
    l_dense, _ = random_graph_laplacian(3)
    got = scaled_laplacian(SparseMatrix.from_dense(l_dense), 1.7).to_dense()
    assert np.allclose(got, got.T, atol=1e-14)


def test_scaled_laplacian_rejects_nonsymmetric():
    bad = SparseMatrix.from_dense(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(ValueError, match="symmetric"):
        scaled_laplacian(bad, 2.0)


def test_scaled_laplacian_rejects_nonpositive_lambda():
    l = SparseMatrix.identity(3)
    with pytest.raises(ValueError, match="positive"):
        scaled_laplacian(l, 0.0)


def test_power_iteration_estimate_tracks_top_eigenvalue():
    for seed in (1, 5, 9):
        l_dense, _ = random_graph_laplacian(seed)
        lam_true = float(np.linalg.eigvalsh(l_dense)[-1])
        est = estimate_lambda_max(SparseMatrix.from_dense(l_dense))
        assert est <= lam_true + 1e-9   # Rayleigh quotient never overshoots
        assert est >= 0.95 * lam_true


# ---------------------------------------------------------------- cheb_conv


def test_cheb_identity_filter_passes_input_through():
    x = np.arange(15, dtype=np.float64).reshape(5, 3)
    layer = ChebLayerParams(theta=ad.Var(np.eye(3)[None, :, :]))
    y = cheb_conv(x, SparseMatrix.identity(5), layer)
    assert np.array_equal(y.value, x)


def test_cheb_two_node_path_hand_values():
    # Path graph Laplacian [[1,-1],[-1,1]] has top eigenvalue 2, so the
    # rescaled operator is [[0,-1],[-1,0]].  With theta = (2, -1) and
    # x = (1, 3): y = 2*x - L~x = (2+3, 6+1).
    l = SparseMatrix.from_dense(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    l_tilde = scaled_laplacian(l, 2.0)
    theta = np.array([[[2.0]], [[-1.0]]])
    x = np.array([[1.0], [3.0]])
    layer = ChebLayerParams(theta=ad.Var(theta))
    y = cheb_conv(x, l_tilde, layer)
    assert np.allclose(y.value, [[5.0], [7.0]], atol=1e-14)
    assert np.allclose(y.value, dense_cheb(x, l_tilde.to_dense(), theta), atol=1e-14)


def test_cheb_zero_input_broadcasts_bias():
    rng = np.random.default_rng(2)
    bias = rng.standard_normal(4)
    layer = ChebLayerParams(theta=ad.Var(rng.standard_normal((3, 2, 4))),
                            bias=ad.Var(bias))
    l = SparseMatrix.identity(6)
    y = cheb_conv(np.zeros((6, 2)), l, layer)
    assert np.allclose(y.value, np.tile(bias, (6, 1)), atol=1e-14)


def test_cheb_matches_dense_spectral_formula_on_many_graphs():
    worst = 0.0
    for seed in range(200):
        l_dense, rng = random_graph_laplacian(seed)
        n = len(l_dense)
        lam = float(np.linalg.eigvalsh(l_dense)[-1]) or 1.0
        l_tilde = 2.0 / lam * l_dense - np.eye(n)
        k = int(rng.integers(1, 5))
        f_in = int(rng.integers(1, 5))
        f_out = int(rng.integers(1, 5))
        theta = rng.standard_normal((k, f_in, f_out))
        bias = rng.standard_normal(f_out)
        x = rng.standard_normal((n, f_in))
        layer = ChebLayerParams(theta=ad.Var(theta), bias=ad.Var(bias))
        got = cheb_conv(x, SparseMatrix.from_dense(l_tilde), layer)
        want = dense_cheb(x, l_tilde, theta, bias)
        worst = max(worst, float(np.abs(got.value - want).max()))
    assert worst < 1e-8


def test_cheb_recurrence_gives_t2_matrix():
    # Filter with theta_2 = I and other coefficients zero applies exactly
    # T_2(L~) = 2 L~^2 - I to the input.
    l_dense, rng = random_graph_laplacian(7)
    n = len(l_dense)
    lam = float(np.linalg.eigvalsh(l_dense)[-1])
    l_tilde = 2.0 / lam * l_dense - np.eye(n)
    theta = np.zeros((3, n, n))
    theta[2] = np.eye(n)
    layer = ChebLayerParams(theta=ad.Var(theta))
    got = cheb_conv(np.eye(n), SparseMatrix.from_dense(l_tilde), layer)
    assert np.allclose(got.value, 2.0 * l_tilde @ l_tilde - np.eye(n), atol=1e-10)


def test_cheb_rejects_row_mismatch():
    layer = ChebLayerParams(theta=ad.Var(np.zeros((2, 3, 3))))
    with pytest.raises(ValueError, match="Laplacian dimension"):
        cheb_conv(np.zeros((4, 3)), SparseMatrix.identity(5), layer)


def test_cheb_rejects_channel_mismatch():
    layer = ChebLayerParams(theta=ad.Var(np.zeros((2, 3, 3))))
    with pytest.raises(ValueError, match="width"):
        cheb_conv(np.zeros((5, 2)), SparseMatrix.identity(5), layer)


def test_cheb_layer_requires_positive_order():
    with pytest.raises(ValueError, match="K"):
        ChebLayerParams(theta=ad.Var(np.zeros((0, 3, 3))))


# ---------------------------------------------------------------- sampling pairs


def test_sampling_halves_the_garment_template():
    from drapenet.garment import canonical_highres, downsample_to_template
    template = downsample_to_template(canonical_highres(np.ones(3)))
    pair = build_sampling(template, 0.5)
    n = template.n_vertices
    assert 0.45 * n <= pair.coarse_mesh.n_vertices <= 0.55 * n


def test_sampling_down_rows_each_select_one_vertex():
    pair = build_sampling(grid_mesh(9, 9), 0.5)
    rows, cols, vals = pair.down.triplets()
    assert len(rows) == pair.down.rows             # one entry per row
    assert np.array_equal(np.sort(rows), np.arange(pair.down.rows))
    assert np.all(vals == 1.0)


def test_sampling_up_rows_are_barycentric():
    pair = build_sampling(grid_mesh(9, 9), 0.5)
    rows, _, vals = pair.up.triplets()
    assert vals.min() >= 0.0
    sums = np.zeros(pair.up.rows)
    np.add.at(sums, rows, vals)
    assert np.abs(sums - 1.0).max() <= 1e-6


def test_sampling_round_trip_constant_signal():
    pair = build_sampling(grid_mesh(9, 9), 0.5)
    x = np.full((pair.up.rows, 2), -2.25)
    back = pair.up @ (pair.down @ x)
    assert np.abs(back - x).max() < 1e-12


def test_sampling_round_trip_linear_field_on_flat_grid():
    mesh = grid_mesh(11, 9, spacing=0.5)
    pair = build_sampling(mesh, 0.5)
    f = mesh.vertices[:, :1].copy()
    back = pair.up @ (pair.down @ f)
    assert np.abs(back - f).max() < 1e-6


def test_sampling_survivors_keep_their_positions():
    mesh = icosphere(2)
    pair = build_sampling(mesh, 0.5)
    fine_rows = {tuple(v) for v in np.round(mesh.vertices, 12)}
    for v in np.round(pair.coarse_mesh.vertices, 12):
        assert tuple(v) in fine_rows


def test_sampling_blocked_mesh_stops_early_and_reports(caplog):
    mesh = k7_torus()
    with caplog.at_level("WARNING"):
        pair = build_sampling(mesh, 0.5)
    assert pair.coarse_mesh.n_vertices == 7
    assert pair.achieved_ratio == 1.0
    assert any("stalled" in r.message for r in caplog.records)
    x = np.arange(7, dtype=np.float64)[:, None]
    assert np.allclose(pair.up @ (pair.down @ x), x)   # both are permutations


def test_sampling_rejects_bad_ratio():
    with pytest.raises(ValueError, match="target_ratio"):
        build_sampling(grid_mesh(3, 3), 0.0)


# ---------------------------------------------------------------- dense layers


def test_dense_identity_weights_pass_through():
    w = ad.Var(np.eye(3))
    b = ad.Var(np.zeros(3))
    x = np.array([0.5, -1.0, 2.0])
    y = dense_forward(x, w, b, "linear")
    assert np.allclose(y.value, x, atol=1e-15)


def test_dense_rectifier_values():
    w = ad.Var(np.eye(2))
    y = dense_forward(np.array([-1.0, 2.0]), w, None, "relu")
    assert np.allclose(y.value, [0.0, 2.0])


def test_dense_stack_shapes_for_parameter_to_vertex_net():
    # 3 design parameters -> 10 hidden units -> 3 coords for 403 vertices.
    params = init_dense_params([3, 10, 3 * 403], seed=0)
    y = mlp_forward(np.array([0.1, -0.2, 0.9]), params, n_layers=2)
    assert y.value.shape == (1209,)
    batch = mlp_forward(np.zeros((5, 3)), params, n_layers=2)
    assert batch.value.shape == (5, 1209)


def test_dense_rejects_width_mismatch():
    w = ad.Var(np.zeros((4, 2)))
    with pytest.raises(ValueError, match="width"):
        dense_forward(np.zeros(3), w)


def test_dense_rejects_unknown_activation():
    w = ad.Var(np.eye(2))
    with pytest.raises(ValueError, match="activation"):
        dense_forward(np.zeros(2), w, None, "tanh")


# ---------------------------------------------------------------- losses


def test_l2_loss_zero_for_equal_inputs():
    x = np.random.default_rng(0).standard_normal((8, 3))
    assert float(ad.l2_displacement_loss(ad.Var(x), x).value) == 0.0


def test_l2_loss_single_vertex_offset():
    pred = ad.Var(np.array([[0.0, 0.0, 2.0]]))
    gt = np.zeros((1, 3))
    assert float(ad.l2_displacement_loss(pred, gt).value) == 4.0


def test_l2_loss_invariant_to_shared_permutation():
    rng = np.random.default_rng(1)
    pred = rng.standard_normal((20, 3))
    gt = rng.standard_normal((20, 3))
    perm = rng.permutation(20)
    a = float(ad.l2_displacement_loss(ad.Var(pred), gt).value)
    b = float(ad.l2_displacement_loss(ad.Var(pred[perm]), gt[perm]).value)
    assert np.isclose(a, b, rtol=1e-12)


def test_l2_loss_gradient_is_analytic():
    rng = np.random.default_rng(2)
    pred = ad.Var(rng.standard_normal((6, 3)), requires_grad=True)
    gt = rng.standard_normal((6, 3))
    loss = ad.l2_displacement_loss(pred, gt)
    ad.backward(loss)
    assert np.allclose(pred.grad, 2.0 * (pred.value - gt) / 6.0, atol=1e-14)


def test_l2_loss_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        ad.l2_displacement_loss(ad.Var(np.zeros((3, 3))), np.zeros((4, 3)))


def test_weight_decay_values_and_bias_exclusion():
    params = ModelParams()
    params.add("layer.weight", np.array([3.0]))
    params.add("layer.bias", np.array([100.0]))
    assert float(weight_decay(params, 0.1).value) == pytest.approx(0.9)
    assert float(weight_decay(params, 0.2).value) == pytest.approx(1.8)
    empty = ModelParams()
    assert float(weight_decay(empty, 0.5).value) == 0.0


def test_collision_loss_zero_at_surface_contact():
    v = ad.Var(np.array([[1.0, 2.0, 3.0]]))
    body = np.array([[1.0, 2.0, 3.0]])
    normals = np.array([[0.0, 0.0, 1.0]])
    assert float(ad.collision_loss(v, body, normals, [0]).value) == 0.0


def test_collision_loss_outside_is_free_inside_is_depth():
    body = np.zeros((1, 3))
    normals = np.array([[0.0, 0.0, 1.0]])
    outside = ad.collision_loss(ad.Var(np.array([[0.0, 0.0, 0.1]])), body, normals, [0])
    inside = ad.collision_loss(ad.Var(np.array([[0.0, 0.0, -0.05]])), body, normals, [0])
    assert float(outside.value) == 0.0
    assert float(inside.value) == pytest.approx(0.05)


def test_collision_loss_rejects_bad_correspondence():
    v = ad.Var(np.zeros((2, 3)))
    with pytest.raises(IndexError):
        ad.collision_loss(v, np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), [0, 5])


def test_collision_loss_gradient_zero_for_clear_vertices():
    v = ad.Var(np.array([[0.0, 0.0, 0.2], [0.0, 0.0, -0.2]]), requires_grad=True)
    body = np.zeros((2, 3))
    normals = np.tile([[0.0, 0.0, 1.0]], (2, 1))
    loss = ad.collision_loss(v, body, normals, [0, 1])
    ad.backward(loss)
    assert np.all(v.grad[0] == 0.0)        # outside: flat region
    assert np.allclose(v.grad[1], [0.0, 0.0, -0.5])  # -n / N


# ---------------------------------------------------------------- gradients vs FD


def test_gradients_cheb_layer_match_finite_differences():
    l_dense, rng = random_graph_laplacian(10, n_max=10)
    n = len(l_dense)
    lam = float(np.linalg.eigvalsh(l_dense)[-1])
    l = SparseMatrix.from_dense(2.0 / lam * l_dense - np.eye(n))
    theta = ad.Var(0.5 * rng.standard_normal((3, 4, 2)), requires_grad=True, name="theta")
    bias = ad.Var(0.5 * rng.standard_normal(2), requires_grad=True, name="bias")
    x = ad.Var(rng.standard_normal((n, 4)), requires_grad=True, name="x")
    gt = rng.standard_normal((n, 2))

    def build():
        y = ad.leaky_relu(cheb_conv(x, l, ChebLayerParams(theta, bias)), 0.1)
        return ad.l2_displacement_loss(y, gt)

    assert_grad_matches_fd(build, [theta, bias, x])


def test_gradients_dense_stack_match_finite_differences():
    rng = np.random.default_rng(11)
    w1 = ad.Var(0.7 * rng.standard_normal((4, 6)), requires_grad=True, name="w1")
    b1 = ad.Var(0.3 * rng.standard_normal(6), requires_grad=True, name="b1")
    w2 = ad.Var(0.7 * rng.standard_normal((6, 3)), requires_grad=True, name="w2")
    x = rng.standard_normal((5, 4))
    gt = rng.standard_normal((5, 3))

    def build():
        h = dense_forward(x, w1, b1, "leaky_relu")
        return ad.l2_displacement_loss(dense_forward(h, w2), gt)

    assert_grad_matches_fd(build, [w1, b1, w2])


def test_gradients_through_pooling_and_concat_match_fd():
    mesh = grid_mesh(5, 4)
    pair = build_sampling(mesh, 0.5)
    rng = np.random.default_rng(12)
    x = ad.Var(rng.standard_normal((mesh.n_vertices, 3)), requires_grad=True, name="x")
    gt = rng.standard_normal((mesh.n_vertices, 6))

    def build():
        down = ad.spmm(pair.down, x)
        back = ad.spmm(pair.up, down)
        return ad.l2_displacement_loss(ad.concat([back, x], axis=1), gt)

    assert_grad_matches_fd(build, [x])


def test_gradients_collision_loss_match_fd():
    rng = np.random.default_rng(13)
    body = rng.standard_normal((5, 3))
    normals = rng.standard_normal((5, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    corr = np.array([0, 2, 4])
    # push garment vertices well inside/outside so FD never crosses the kink
    v = ad.Var(body[corr] - 0.5 * normals[corr], requires_grad=True, name="v")

    def build():
        return ad.collision_loss(v, body, normals, corr)

    assert_grad_matches_fd(build, [v])


def test_gradients_weight_decay_match_fd():
    params = ModelParams()
    rng = np.random.default_rng(14)
    w = params.add("a.weight", rng.standard_normal((3, 2)))
    params.add("a.bias", rng.standard_normal(2))

    def build():
        return weight_decay(params, 0.37)

    assert_grad_matches_fd(build, [w])


def test_gradients_full_unet_match_fd():
    mesh = icosphere(0)   # 12 vertices keeps the FD sweep cheap
    laps, samps = graph_hierarchy(mesh, depth=1)
    # seeds chosen so no rectifier pre-activation falls inside the FD step
    params = init_unet_params(f_in=3, widths=(4,), k=2, seed=22)
    # the output bank starts at zero; nudge it so its gradient is generic
    params["out.theta"].value = 0.3 * np.random.default_rng(23).standard_normal(
        params["out.theta"].value.shape)
    rng = np.random.default_rng(24)
    feats = rng.standard_normal((mesh.n_vertices, 3))
    gt = rng.standard_normal((mesh.n_vertices, 3))

    def build():
        pred = unet_forward(feats, laps, samps, params, depth=1)
        return ad.l2_displacement_loss(pred, gt)

    assert_grad_matches_fd(build, [params[n] for n in params.names()])


def test_backward_requires_scalar_loss():
    v = ad.Var(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.scale(v, 2.0))


# ---------------------------------------------------------------- optimizer


def test_adam_zero_gradient_leaves_params_unchanged():
    params = ModelParams()
    w = params.add("w", np.array([1.0, -2.0]))
    adam_step(params, grads={"w": np.zeros(2)})
    assert np.array_equal(w.value, [1.0, -2.0])


def test_adam_first_step_matches_hand_formula():
    params = ModelParams()
    w = params.add("w", np.array([0.0]))
    adam_step(params, grads={"w": np.array([1.0])}, lr=1e-3)
    expected = -1e-3 / (1.0 + 1e-8)
    assert abs(float(w.value[0]) - expected) < 1e-15


def test_adam_descends_quadratic_monotonically():
    params = ModelParams()
    w = params.add("w", np.array([1.0]))
    losses = []
    for _ in range(100):
        losses.append(float(w.value[0] ** 2))
        adam_step(params, grads={"w": 2.0 * w.value})
    diffs = np.diff(losses)
    assert np.all(diffs <= 0.0)
    assert losses[-1] < losses[0]


def test_adam_rejects_shape_mismatch():
    params = ModelParams()
    params.add("w", np.zeros((2, 2)))
    with pytest.raises(ValueError, match="shape"):
        adam_step(params, grads={"w": np.zeros(3)})


def test_model_params_rejects_duplicate_names():
    params = ModelParams()
    params.add("w", np.zeros(2))
    with pytest.raises(ValueError, match="duplicate"):
        params.add("w", np.zeros(2))


# ---------------------------------------------------------------- U-Net


def test_unet_output_is_three_channels_for_any_mesh():
    for mesh in (icosphere(1), grid_mesh(8, 7)):
        laps, samps = graph_hierarchy(mesh, depth=2)
        params = init_unet_params(f_in=5, widths=(6, 8), k=3, seed=3)
        feats = np.random.default_rng(4).standard_normal((mesh.n_vertices, 5))
        out = unet_forward(feats, laps, samps, params, depth=2)
        assert out.value.shape == (mesh.n_vertices, 3)


def test_unet_zero_params_give_zero_offsets():
    mesh = icosphere(1)
    laps, samps = graph_hierarchy(mesh, depth=2)
    params = init_unet_params(f_in=4, widths=(6, 8), k=3, seed=5)
    for _, v in params.items():
        v.value = np.zeros_like(v.value)
    feats = np.random.default_rng(6).standard_normal((mesh.n_vertices, 4))
    out = unet_forward(feats, laps, samps, params, depth=2)
    assert np.abs(out.value).max() == 0.0


def test_unet_fresh_params_give_zero_offsets():
    # the output bank is zero-initialized, so an untrained net is a no-op
    mesh = icosphere(1)
    laps, samps = graph_hierarchy(mesh, depth=2)
    params = init_unet_params(f_in=4, widths=(6, 8), k=3, seed=7)
    feats = np.random.default_rng(8).standard_normal((mesh.n_vertices, 4))
    out = unet_forward(feats, laps, samps, params, depth=2)
    assert np.abs(out.value).max() == 0.0


def test_unet_overfits_single_pair():
    mesh = icosphere(1)
    laps, samps = graph_hierarchy(mesh, depth=2)
    params = init_unet_params(f_in=6, widths=(8, 16), k=3, seed=11)
    rng = np.random.default_rng(5)
    feats = rng.standard_normal((mesh.n_vertices, 6))
    gt = 0.05 * rng.standard_normal((mesh.n_vertices, 3))
    loss_val = np.inf
    for _ in range(2000):
        params.zero_grad()
        pred = unet_forward(feats, laps, samps, params, depth=2)
        loss = ad.l2_displacement_loss(pred, gt)
        ad.backward(loss)
        adam_step(params, lr=1e-2)
        loss_val = float(loss.value)
        if loss_val < 1e-6:
            break
    assert loss_val < 1e-6


def _permute_sparse(p_rows, p_cols, m):
    return SparseMatrix(p_rows) @ m @ SparseMatrix(p_cols)


def test_unet_is_permutation_equivariant():
    import scipy.sparse as sp

    mesh = grid_mesh(5, 4)   # 20 vertices
    laps, samps = graph_hierarchy(mesh, depth=1)
    params = init_unet_params(f_in=3, widths=(6,), k=3, seed=9)
    params["out.theta"].value = np.random.default_rng(10).standard_normal(
        params["out.theta"].value.shape)
    rng = np.random.default_rng(11)
    feats = rng.standard_normal((mesh.n_vertices, 3))
    base = unet_forward(feats, laps, samps, params, depth=1).value

    n0 = laps[0].rows
    n1 = laps[1].rows
    perm0 = rng.permutation(n0)
    perm1 = rng.permutation(n1)
    p0 = sp.csr_matrix((np.ones(n0), (np.arange(n0), perm0)), shape=(n0, n0))
    p1 = sp.csr_matrix((np.ones(n1), (np.arange(n1), perm1)), shape=(n1, n1))

    laps_p = [_permute_sparse(p0, p0.T, laps[0]), _permute_sparse(p1, p1.T, laps[1])]
    pair = samps[0]
    samps_p = [nn.SamplingPair(
        down=_permute_sparse(p1, p0.T, pair.down),
        up=_permute_sparse(p0, p1.T, pair.up),
        coarse_mesh=pair.coarse_mesh,
        achieved_ratio=pair.achieved_ratio)]
    out_p = unet_forward(feats[perm0], laps_p, samps_p, params, depth=1).value
    assert np.allclose(out_p, base[perm0], atol=1e-10)


def test_unet_rejects_level_count_mismatch():
    mesh = icosphere(1)
    laps, samps = graph_hierarchy(mesh, depth=2)
    params = init_unet_params(f_in=3, widths=(4, 4), k=2, seed=1)
    feats = np.zeros((mesh.n_vertices, 3))
    with pytest.raises(ValueError, match="Laplacians"):
        unet_forward(feats, laps[:2], samps, params, depth=2)
    with pytest.raises(ValueError, match="sampling"):
        unet_forward(feats, laps, samps[:1], params, depth=2)


def test_unet_forward_and_init_are_deterministic():
    mesh = icosphere(1)
    laps, samps = graph_hierarchy(mesh, depth=2)
    a = init_unet_params(f_in=4, widths=(6, 8), k=3, seed=33)
    b = init_unet_params(f_in=4, widths=(6, 8), k=3, seed=33)
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a[name].value, b[name].value)
    feats = np.random.default_rng(0).standard_normal((mesh.n_vertices, 4))
    y1 = unet_forward(feats, laps, samps, a, depth=2).value
    y2 = unet_forward(feats, laps, samps, a, depth=2).value
    assert np.array_equal(y1, y2)


def test_hierarchy_levels_shrink_and_cache_hits():
    mesh = icosphere(2)   # 162 vertices
    first = graph_hierarchy(mesh, depth=3)
    sizes = [l.rows for l in first[0]]
    for a, b in zip(sizes, sizes[1:]):
        assert 0.4 * a <= b <= 0.6 * a
    again = graph_hierarchy(mesh, depth=3)
    assert again is first   # cached by mesh digest
    assert graph_hierarchy(mesh, depth=3, lambda_max=2.0) is not first


# ---------------------------------------------------------------- checkpoints


def _demo_params(seed=0):
    rng = np.random.default_rng(seed)
    params = ModelParams()
    params.add("enc0.theta", rng.standard_normal((2, 3, 4)))
    params.add("enc0.bias", rng.standard_normal(4))
    return params


def test_checkpoint_round_trip_preserves_values(tmp_path):
    params = _demo_params()
    path = tmp_path / "weights.gnnw"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.names() == params.names()
    for name in params.names():
        want = params[name].value.astype(np.float32).astype(np.float64)
        assert np.array_equal(loaded[name].value, want)
        assert loaded[name].value.shape == params[name].value.shape


def test_checkpoint_restores_optimizer_state(tmp_path):
    params = _demo_params(1)
    for _ in range(3):
        grads = {n: np.ones_like(v.value) for n, v in params.items()}
        adam_step(params, grads=grads)
    path = tmp_path / "weights.gnnw"
    save_checkpoint(path, params)
    assert (tmp_path / ("weights.gnnw" + nn.OPTIMIZER_SUFFIX)).exists()
    loaded = load_checkpoint(path)
    assert loaded.step == 3
    for name in params.names():
        want_m = params._m[name].astype(np.float32).astype(np.float64)
        assert np.array_equal(loaded._m[name], want_m)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "weights.gnnw"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_rejects_future_version(tmp_path):
    path = tmp_path / "weights.gnnw"
    path.write_bytes(nn.CHECKPOINT_MAGIC + struct.pack("<II", 99, 0))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_byte_layout_is_frozen(tmp_path):
    params = ModelParams()
    params.add("w", np.array([[1.5, -2.0]]))
    path = tmp_path / "weights.gnnw"
    save_checkpoint(path, params, optimizer=False)
    raw = path.read_bytes()
    assert raw[:4] == b"GNNW"
    version, count = struct.unpack_from("<II", raw, 4)
    assert (version, count) == (1, 1)
    name_len = struct.unpack_from("<I", raw, 12)[0]
    assert name_len == 1
    assert raw[16:17] == b"w"
    rank = struct.unpack_from("<I", raw, 17)[0]
    assert rank == 2
    dims = struct.unpack_from("<II", raw, 21)
    assert dims == (1, 2)
    data = np.frombuffer(raw[29:], dtype="<f4")
    assert np.allclose(data, [1.5, -2.0])
    assert len(raw) == 29 + 8
