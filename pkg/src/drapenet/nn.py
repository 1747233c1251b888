"""Graph network building blocks: spectral convolution, mesh pooling,
dense layers, parameter store, Adam, and checkpoint I/O.

Convolutions are truncated Chebyshev filters over a rescaled graph
Laplacian; pooling levels come from quadric edge-collapse simplification
of the input mesh, so the whole stack works on any triangulation without
retraining.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, as_var
from .mesh import SparseMatrix, TriangleGrid, TriangleMesh, graph_laplacian
from .sampling import qem_decimate
from ._util import atomic_write_bytes

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.1          # rectifier slope on every layer except the last
DEFAULT_CHEB_ORDER = 3
SMOOTH_WIDTHS = (16, 32, 64, 128)   # coarse-deformation regressor channels
FINE_WIDTHS = (16, 32, 64)          # detail regressor channels

CHECKPOINT_MAGIC = b"GNNW"
CHECKPOINT_VERSION = 1
OPTIMIZER_SUFFIX = ".opt"


class CheckpointError(ValueError):
    """Raised for unreadable or mismatched checkpoint files."""


# ---------------------------------------------------------------------------
# Laplacian preparation

def estimate_lambda_max(l: SparseMatrix, iterations: int = 50) -> float:
    """Top-eigenvalue estimate of a symmetric PSD matrix by power iteration.

    Deterministic: the start vector comes from a fixed seed.
    """
    if l.rows != l.cols:
        raise ValueError("matrix must be square")
    if not l.is_symmetric(1e-8):
        raise ValueError("power iteration expects a symmetric matrix")
    rng = np.random.default_rng(0)
    b = rng.standard_normal(l.rows)
    b /= np.linalg.norm(b)
    for _ in range(iterations):
        c = l @ b
        n = float(np.linalg.norm(c))
        if n < 1e-300:
            return 2.0  # matrix annihilated the iterate; conventional bound
        b = c / n
    return float(b @ (l @ b))


def scaled_laplacian(l: SparseMatrix, lambda_max: float) -> SparseMatrix:
    """Rescale a symmetric Laplacian so its spectrum lands in [-1, 1]."""
    if l.rows != l.cols:
        raise ValueError("Laplacian must be square")
    if not l.is_symmetric(1e-8):
        raise ValueError("Laplacian must be symmetric")
    if not lambda_max > 0:
        raise ValueError(f"lambda_max must be positive, got {lambda_max}")
    eye = SparseMatrix.identity(l.rows)
    return l.scaled(2.0 / lambda_max).add(eye, -1.0)


# ---------------------------------------------------------------------------
# Chebyshev spectral convolution

@dataclass
class ChebLayerParams:
    """Coefficient bank for one spectral layer.

    theta: (K, F_in, F_out) tape variable; bias: (F_out,) or None.
    """
    theta: Var
    bias: Var | None = None

    def __post_init__(self):
        if self.theta.value.ndim != 3:
            raise ValueError("theta must be (K, F_in, F_out)")
        if self.theta.value.shape[0] < 1:
            raise ValueError("polynomial order K must be >= 1")
        if self.bias is not None and self.bias.value.shape != (self.f_out,):
            raise ValueError("bias length must match output channels")

    @property
    def k(self) -> int:
        return self.theta.value.shape[0]

    @property
    def f_in(self) -> int:
        return self.theta.value.shape[1]

    @property
    def f_out(self) -> int:
        return self.theta.value.shape[2]


def cheb_conv(x, l_scaled: SparseMatrix, params: ChebLayerParams) -> Var:
    """y = sum_k T_k(L~) x theta_k + bias via the three-term recurrence.

    Cost is K sparse matvecs; never materializes a dense polynomial of L~.
    """
    x = as_var(x)
    if x.value.ndim != 2:
        raise ValueError("features must be (N, F_in)")
    n, f_in = x.value.shape
    if l_scaled.rows != n:
        raise ValueError(f"feature rows {n} != Laplacian dimension {l_scaled.rows}")
    if f_in != params.f_in:
        raise ValueError(f"feature width {f_in} != theta input width {params.f_in}")

    y = ad.matmul(x, ad.index_axis0(params.theta, 0))
    if params.k > 1:
        t_prev2 = x                     # T_0 applied to x
        t_prev1 = ad.spmm(l_scaled, x)  # T_1 applied to x
        y = ad.add(y, ad.matmul(t_prev1, ad.index_axis0(params.theta, 1)))
        for kk in range(2, params.k):
            t_cur = ad.sub(ad.scale(ad.spmm(l_scaled, t_prev1), 2.0), t_prev2)
            y = ad.add(y, ad.matmul(t_cur, ad.index_axis0(params.theta, kk)))
            t_prev2, t_prev1 = t_prev1, t_cur
    if params.bias is not None:
        y = ad.add(y, params.bias)
    return y


# ---------------------------------------------------------------------------
# Mesh pooling from quadric simplification

@dataclass(frozen=True)
class SamplingPair:
    """Pool/unpool operators between one mesh level and the next coarser one.

    down rows each select one surviving fine vertex; up rows carry the
    barycentric coordinates of each fine vertex projected onto its nearest
    coarse triangle (survivors project onto themselves).
    """
    down: SparseMatrix
    up: SparseMatrix
    coarse_mesh: TriangleMesh
    achieved_ratio: float = field(default=0.5, compare=False)


def _barycentric_in_face(p, a, b, c):
    v0, v1, v2 = b - a, c - a, p - a
    d00 = v0 @ v0
    d01 = v0 @ v1
    d11 = v1 @ v1
    denom = d00 * d11 - d01 * d01
    if denom <= 1e-30:
        return None
    w1 = (d11 * (v2 @ v0) - d01 * (v2 @ v1)) / denom
    w2 = (d00 * (v2 @ v1) - d01 * (v2 @ v0)) / denom
    w = np.array([1.0 - w1 - w2, w1, w2])
    w = np.maximum(w, 0.0)
    return w / w.sum()


def build_sampling(mesh: TriangleMesh, target_ratio: float = 0.5) -> SamplingPair:
    """Halve a mesh by quadric edge collapse and derive transfer matrices.

    If legal collapses run out before the target, the pair is built at the
    size actually reached and achieved_ratio reports it.
    """
    if not 0 < target_ratio <= 1:
        raise ValueError("target_ratio must be in (0, 1]")
    nv = mesh.n_vertices
    target = max(3, math.ceil(target_ratio * nv))
    dec = qem_decimate(mesh.vertices, mesh.faces, target, strict=False)
    coarse = TriangleMesh(mesh.vertices[dec.keep], dec.faces.astype(np.int32))
    n_c = coarse.n_vertices
    achieved = n_c / nv
    if n_c > target:
        log.warning("simplification stalled at %d of %d target vertices "
                    "(achieved ratio %.3f)", n_c, target, achieved)

    down = SparseMatrix.from_triplets(
        np.arange(n_c), dec.keep, np.ones(n_c), (n_c, nv))

    # Survivors keep their slot exactly; removed vertices get projection
    # barycentrics against the coarse surface.
    is_kept = np.zeros(nv, dtype=bool)
    is_kept[dec.keep] = True
    rows, cols, vals = [], [], []
    for fine, slot in enumerate(dec.assign):
        if is_kept[fine]:
            rows.append(fine)
            cols.append(slot)
            vals.append(1.0)
    removed = np.nonzero(~is_kept)[0]
    if len(removed) and not coarse.n_faces:
        for fine in removed:  # nothing to project onto; follow the collapse
            rows.append(fine)
            cols.append(int(dec.assign[fine]))
            vals.append(1.0)
    elif len(removed):
        grid = TriangleGrid(coarse)
        cv, cf = coarse.vertices, coarse.faces
        for fine in removed:
            p = mesh.vertices[fine]
            _, _, fi = grid.nearest(p)
            tri = cf[fi]
            w = _barycentric_in_face(p, cv[tri[0]], cv[tri[1]], cv[tri[2]])
            if w is None:
                rows.append(fine)
                cols.append(int(dec.assign[fine]))
                vals.append(1.0)
                continue
            for j in range(3):
                if w[j] > 0:
                    rows.append(fine)
                    cols.append(int(tri[j]))
                    vals.append(float(w[j]))
    up = SparseMatrix.from_triplets(rows, cols, vals, (nv, n_c))
    return SamplingPair(down=down, up=up, coarse_mesh=coarse,
                        achieved_ratio=achieved)


def barycentric_transfer(points, mesh: TriangleMesh) -> SparseMatrix:
    """Interpolation matrix that samples a per-vertex field at given points.

    Row i holds the barycentric weights of point i's closest-surface
    projection onto the mesh, so (matrix @ vertex_field) evaluates the field
    at the projections. Rows are non-negative and sum to one, which makes the
    matrix a valid position-transfer between two triangulations of the same
    surface: build it on rest geometry, then apply it to deformed vertices.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be an (n, 3) array")
    if not mesh.n_faces:
        raise ValueError("mesh has no faces to project onto")
    grid = TriangleGrid(mesh)
    verts, faces = mesh.vertices, mesh.faces
    rows, cols, vals = [], [], []
    for i, q in enumerate(pts):
        _, close, fi = grid.nearest(q)
        tri = faces[fi]
        w = _barycentric_in_face(close, verts[tri[0]], verts[tri[1]], verts[tri[2]])
        if w is None:
            w = np.array([1.0, 0.0, 0.0])
        for j in range(3):
            if w[j] > 0:
                rows.append(i)
                cols.append(int(tri[j]))
                vals.append(float(w[j]))
    return SparseMatrix.from_triplets(rows, cols, vals, (len(pts), mesh.n_vertices))


# ---------------------------------------------------------------------------
# Parameter store

class ModelParams:
    """Named ordered tensors plus Adam moment state.

    Tensor shapes are fixed at registration; names are unique. Biases are
    any tensor whose final dotted component is "bias" (they are skipped by
    weight decay).
    """

    def __init__(self):
        self._vars: dict[str, Var] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Var:
        if name in self._vars:
            raise ValueError(f"duplicate tensor name: {name!r}")
        v = Var(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._vars[name] = v
        return v

    def __getitem__(self, name: str) -> Var:
        return self._vars[name]

    def __contains__(self, name: str) -> bool:
        return name in self._vars

    def __len__(self) -> int:
        return len(self._vars)

    def names(self):
        return list(self._vars)

    def items(self):
        return self._vars.items()

    def zero_grad(self):
        for v in self._vars.values():
            v.grad = None

    def n_scalars(self) -> int:
        return sum(v.value.size for v in self._vars.values())

    def grads(self) -> dict:
        return {name: v.grad for name, v in self._vars.items()}

    def copy_values(self) -> dict:
        return {name: v.value.copy() for name, v in self._vars.items()}

    def __repr__(self):
        return f"ModelParams({len(self._vars)} tensors, {self.n_scalars()} scalars)"


def weight_decay(params: ModelParams, coeff: float) -> Var:
    """coeff times the summed squared norm of all non-bias tensors.

    Bookkeeping tensors under the `meta.` prefix are not decayed either.
    """
    total = Var(np.float64(0.0))
    for name, v in params.items():
        parts = name.split(".")
        if parts[-1] == "bias" or parts[0] == "meta":
            continue
        total = ad.add(total, ad.sum_squares(v))
    return ad.scale(total, coeff)


def adam_step(params: ModelParams, grads=None, lr: float = 1e-3,
              betas=(0.9, 0.999), eps: float = 1e-8) -> ModelParams:
    """One Adam update with bias correction; state lives on the params.

    grads defaults to the gradients accumulated on the tensors by
    backward(); missing entries are treated as zero.
    """
    b1, b2 = betas
    params.step += 1
    t = params.step
    for name, var in params.items():
        g = grads.get(name) if grads is not None else var.grad
        if g is None:
            g = np.zeros_like(var.value)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != var.value.shape:
            raise ValueError(f"gradient shape {g.shape} != tensor shape "
                             f"{var.value.shape} for {name!r}")
        m = b1 * params._m.get(name, 0.0) + (1 - b1) * g
        v = b2 * params._v.get(name, 0.0) + (1 - b2) * g * g
        params._m[name] = m
        params._v[name] = v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        var.value = var.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


def sgd_step(params: ModelParams, grads=None, lr: float = 1e-3) -> ModelParams:
    """Plain gradient descent; a zero gradient leaves a tensor untouched.

    Used where update magnitude must stay proportional to the gradient
    (Adam's normalized steps would defeat anchor-style regularizers).
    """
    params.step += 1
    for name, var in params.items():
        g = grads.get(name) if grads is not None else var.grad
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != var.value.shape:
            raise ValueError(f"gradient shape {g.shape} != tensor shape "
                             f"{var.value.shape} for {name!r}")
        var.value = var.value - lr * g
    return params


# ---------------------------------------------------------------------------
# Dense layers

_ACTIVATION_SLOPES = {"linear": None, "relu": 0.0, "leaky_relu": LEAKY_SLOPE}


def _activate(y: Var, activation: str) -> Var:
    if activation not in _ACTIVATION_SLOPES:
        raise ValueError(f"unknown activation {activation!r}")
    slope = _ACTIVATION_SLOPES[activation]
    return y if slope is None else ad.leaky_relu(y, slope)


def dense_forward(x, w: Var, b: Var | None = None,
                  activation: str = "linear") -> Var:
    """act(x W + b) for a single vector or a (batch, features) matrix."""
    x = as_var(x)
    vec = x.value.ndim == 1
    h = ad.reshape(x, (1, -1)) if vec else x
    if h.value.shape[1] != w.value.shape[0]:
        raise ValueError(f"input width {h.value.shape[1]} != weight rows "
                         f"{w.value.shape[0]}")
    y = ad.matmul(h, w)
    if b is not None:
        y = ad.add(y, b)
    y = _activate(y, activation)
    return ad.reshape(y, (-1,)) if vec else y


def init_dense_params(sizes, seed: int, prefix: str = "fc") -> ModelParams:
    """Stacked dense layers; weights are (in, out), uniform by fan-in."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = 1.0 / math.sqrt(a)
        params.add(f"{prefix}{i}.weight", rng.uniform(-lim, lim, size=(a, b)))
        params.add(f"{prefix}{i}.bias", np.zeros(b))
    return params


def mlp_forward(x, params: ModelParams, n_layers: int, prefix: str = "fc") -> Var:
    """Dense stack with leaky rectifiers between layers, linear output."""
    h = as_var(x)
    for i in range(n_layers):
        act = "leaky_relu" if i < n_layers - 1 else "linear"
        h = dense_forward(h, params[f"{prefix}{i}.weight"],
                          params[f"{prefix}{i}.bias"], act)
    return h


# ---------------------------------------------------------------------------
# Graph U-Net

def init_unet_params(f_in: int, widths, k: int, seed: int,
                     out_channels: int = 3) -> ModelParams:
    """Parameters for a depth = len(widths) encoder/decoder conv stack.

    The output layer is zero-initialized so a fresh network predicts zero
    offsets; everything else is uniform scaled by fan-in (K * F_in).
    """
    widths = list(widths)
    if not widths:
        raise ValueError("at least one level width required")
    rng = np.random.default_rng(seed)
    params = ModelParams()

    def bank(name, c_in, c_out):
        lim = 1.0 / math.sqrt(k * c_in)
        params.add(f"{name}.theta", rng.uniform(-lim, lim, size=(k, c_in, c_out)))
        params.add(f"{name}.bias", np.zeros(c_out))

    c = f_in
    for i, w in enumerate(widths):
        bank(f"enc{i}", c, w)
        c = w
    bank("bottleneck", widths[-1], widths[-1])
    c = widths[-1]
    for i in reversed(range(len(widths))):
        bank(f"dec{i}", c + widths[i], widths[i])
        c = widths[i]
    params.add("out.theta", np.zeros((k, widths[0], out_channels)))
    return params


def _layer(params: ModelParams, name: str, bias: bool = True) -> ChebLayerParams:
    return ChebLayerParams(theta=params[f"{name}.theta"],
                           bias=params[f"{name}.bias"] if bias else None)


def unet_forward(features, laplacians, samplings, params: ModelParams,
                 depth: int) -> Var:
    """Encoder/decoder over the mesh hierarchy; returns per-vertex offsets.

    laplacians: depth+1 rescaled Laplacians, finest first. samplings: depth
    SamplingPairs bridging consecutive levels. Skip connections concatenate
    encoder activations onto the decoder path at the same level; the final
    convolution is linear and bias-free.
    """
    if len(laplacians) != depth + 1:
        raise ValueError(f"expected {depth + 1} Laplacians, got {len(laplacians)}")
    if len(samplings) != depth:
        raise ValueError(f"expected {depth} sampling pairs, got {len(samplings)}")
    h = as_var(features)
    for lvl in range(depth):
        if samplings[lvl].down.cols != laplacians[lvl].rows:
            raise ValueError(f"sampling/Laplacian mismatch at level {lvl}")
        if samplings[lvl].down.rows != laplacians[lvl + 1].rows:
            raise ValueError(f"sampling/Laplacian mismatch at level {lvl + 1}")

    skips = []
    for lvl in range(depth):
        h = ad.leaky_relu(cheb_conv(h, laplacians[lvl], _layer(params, f"enc{lvl}")),
                          LEAKY_SLOPE)
        skips.append(h)
        h = ad.spmm(samplings[lvl].down, h)
    h = ad.leaky_relu(cheb_conv(h, laplacians[depth], _layer(params, "bottleneck")),
                      LEAKY_SLOPE)
    for lvl in reversed(range(depth)):
        h = ad.spmm(samplings[lvl].up, h)
        h = ad.concat([h, skips[lvl]], axis=1)
        h = ad.leaky_relu(cheb_conv(h, laplacians[lvl], _layer(params, f"dec{lvl}")),
                          LEAKY_SLOPE)
    return cheb_conv(h, laplacians[0], _layer(params, "out", bias=False))


# ---------------------------------------------------------------------------
# Hierarchy construction and caching

def mesh_hash(mesh: TriangleMesh) -> str:
    """Digest over both connectivity and positions (pooling depends on both)."""
    h = hashlib.sha256()
    h.update(mesh.topology_hash().encode())
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    return h.hexdigest()


_HIERARCHY_CACHE: dict = {}


def graph_hierarchy(mesh: TriangleMesh, depth: int, target_ratio: float = 0.5,
                    lambda_max: float | None = None, cache: bool = True):
    """Scaled Laplacians (depth+1) and sampling pairs (depth) for a mesh.

    lambda_max=None estimates the top eigenvalue per level by power
    iteration; a fixed value (conventionally 2.0) skips the estimate.
    Results are cached by mesh hash.
    """
    key = (mesh_hash(mesh), depth, target_ratio, lambda_max)
    if cache and key in _HIERARCHY_CACHE:
        return _HIERARCHY_CACHE[key]
    laplacians = []
    samplings = []
    level = mesh
    for _ in range(depth):
        l = graph_laplacian(level, normalized=True)
        lm = lambda_max if lambda_max is not None else estimate_lambda_max(l)
        laplacians.append(scaled_laplacian(l, lm))
        pair = build_sampling(level, target_ratio)
        samplings.append(pair)
        level = pair.coarse_mesh
    l = graph_laplacian(level, normalized=True)
    lm = lambda_max if lambda_max is not None else estimate_lambda_max(l)
    laplacians.append(scaled_laplacian(l, lm))
    out = (laplacians, samplings)
    if cache:
        _HIERARCHY_CACHE[key] = out
    return out


# ---------------------------------------------------------------------------
# Checkpoint I/O

def _encode_tensors(named) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(named))]
    for name, arr in named:
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        if arr.ndim:
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def _decode_tensors(data: bytes, origin: str):
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{origin}: bad magic {data[:4]!r}")
    off = 4

    def u32():
        nonlocal off
        if off + 4 > len(data):
            raise CheckpointError(f"{origin}: truncated file")
        v = struct.unpack_from("<I", data, off)[0]
        off += 4
        return v

    version = u32()
    if version > CHECKPOINT_VERSION:
        raise CheckpointError(f"{origin}: unsupported format version {version}")
    out = []
    for _ in range(u32()):
        nlen = u32()
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        rank = u32()
        dims = tuple(u32() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        end = off + 4 * count
        if end > len(data):
            raise CheckpointError(f"{origin}: truncated tensor data for {name!r}")
        arr = np.frombuffer(data[off:end], dtype="<f4").astype(np.float64)
        out.append((name, arr.reshape(dims)))
        off = end
    return out


def save_checkpoint(path, params: ModelParams, optimizer: bool = True):
    """Write weights, and optimizer state to a sibling file, atomically."""
    path = str(path)
    atomic_write_bytes(path, _encode_tensors(list((n, v.value) for n, v in params.items())))
    if optimizer:
        named = []
        for name in params.names():
            named.append((f"{name}.m", np.asarray(params._m.get(name, np.zeros_like(params[name].value)))))
            named.append((f"{name}.v", np.asarray(params._v.get(name, np.zeros_like(params[name].value)))))
        named.append(("step", np.float64(params.step)))
        atomic_write_bytes(path + OPTIMIZER_SUFFIX, _encode_tensors(named))


def load_checkpoint(path, optimizer: bool = True) -> ModelParams:
    """Restore a parameter store; picks up the optimizer sibling if present."""
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    params = ModelParams()
    for name, arr in _decode_tensors(data, path):
        params.add(name, arr)
    opt_path = path + OPTIMIZER_SUFFIX
    if optimizer and os.path.exists(opt_path):
        with open(opt_path, "rb") as fh:
            entries = dict(_decode_tensors(fh.read(), opt_path))
        for name in params.names():
            m = entries.get(f"{name}.m")
            v = entries.get(f"{name}.v")
            if m is None or v is None:
                raise CheckpointError(f"{opt_path}: missing moment tensors for {name!r}")
            if m.shape != params[name].value.shape or v.shape != params[name].value.shape:
                raise CheckpointError(f"{opt_path}: moment shape mismatch for {name!r}")
            params._m[name] = m
            params._v[name] = v
        if "step" not in entries:
            raise CheckpointError(f"{opt_path}: missing step counter")
        params.step = int(entries["step"])
    return params
