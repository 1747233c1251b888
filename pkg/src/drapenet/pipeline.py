"""Three-stage drape prediction over parametric garments and bodies.

Stage one is a small dense net that regresses the coarse mean-body drape
from the design parameters. Its output is prolonged onto a remeshed garment
topology, where a graph U-Net adds the shared shape deformation and a
per-material graph U-Net adds the detail layer. Training of the detail nets
can be followed by a self-supervised pass that minimizes body penetration
only, without any simulated ground truth.
"""
from __future__ import annotations

import logging
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import body as bodymod
from . import nn
from .autodiff import Var
from .dataset import load_sample, manifest_samples, topology_area_factor
from .garment import canonical_highres, downsample_to_template
from .mesh import TriangleMesh, hausdorff, vertex_normals
from .remesh import DEFAULT_T_AREA, RemeshTargets, remesh_phi

log = logging.getLogger(__name__)

FEATURE_WIDTH = 28          # position (3) + body skinning weights (24) + shape (1)
SMOOTH_DEPTH = 4
FINE_DEPTH = 3
MEAN_SIZES = (3, 10, 3 * 403)
FC_HIDDEN = 32

R_MEAN_FILE = "r_mean.gnnw"
R_SMOOTH_FILE = "r_smooth.gnnw"


def r_fine_file(material: str) -> str:
    return f"r_fine_{material}.gnnw"


class PipelineError(RuntimeError):
    """A stage of the try-on pipeline failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Cached heavy intermediates

_BODY_CACHE: OrderedDict = OrderedDict()
_BODY_CACHE_CAP = 6


def shaped_body(model: bodymod.BodyModel, beta: float) -> TriangleMesh:
    """Body mesh for a shape coefficient, LRU-cached per model instance."""
    key = (id(model), round(float(beta), 12))
    mesh = _BODY_CACHE.get(key)
    if mesh is None:
        mesh = bodymod.body_mesh(model, float(beta))
        _BODY_CACHE[key] = mesh
        while len(_BODY_CACHE) > _BODY_CACHE_CAP:
            _BODY_CACHE.popitem(last=False)
    else:
        _BODY_CACHE.move_to_end(key)
    return mesh


def _nearest_body_index(body: TriangleMesh, points) -> np.ndarray:
    """Closest body vertex id per query point (KD-tree, cached per body)."""
    from scipy.spatial import cKDTree

    tree = body._cache.get("kdtree")
    if tree is None:
        tree = cKDTree(body.vertices)
        body._cache["kdtree"] = tree
    return tree.query(np.asarray(points, dtype=np.float64))[1]


@dataclass
class _Topology:
    """Remeshed rest garment for one (design, topology seed) pair."""
    rest: TriangleMesh
    template: TriangleMesh
    prolong: object          # rest-vertex rows of template barycentrics
    canonical_faces: np.ndarray
    prepare_s: float


_TOPO_CACHE: OrderedDict = OrderedDict()
_TOPO_CACHE_CAP = 16


def garment_topology(model, p, topology_seed=None, t_area=None) -> _Topology:
    """Build (or fetch) the remeshed topology a design is predicted on."""
    p = np.asarray(p, dtype=np.float64)
    if t_area is None:
        t_area = DEFAULT_T_AREA
    key = (id(model), p.tobytes(), topology_seed, round(float(t_area), 12))
    topo = _TOPO_CACHE.get(key)
    if topo is not None:
        _TOPO_CACHE.move_to_end(key)
        return topo
    t0 = time.perf_counter()
    high = canonical_highres(p, body=model)
    template = downsample_to_template(high)
    factor = 1.0 if topology_seed is None else topology_area_factor(topology_seed)
    rest = remesh_phi(high, targets=RemeshTargets(t_area=float(t_area) * factor))
    prolong = nn.barycentric_transfer(rest.vertices, template)
    topo = _Topology(rest=rest, template=template, prolong=prolong,
                     canonical_faces=high.faces,
                     prepare_s=time.perf_counter() - t0)
    _TOPO_CACHE[key] = topo
    while len(_TOPO_CACHE) > _TOPO_CACHE_CAP:
        _TOPO_CACHE.popitem(last=False)
    return topo


# ---------------------------------------------------------------------------
# Graphs

@dataclass
class GarmentGraph:
    """A garment mesh with regression features and its pooling hierarchy."""
    mesh: TriangleMesh
    node_features: np.ndarray
    laplacians: list
    samplings: list

    @property
    def depth(self) -> int:
        return len(self.samplings)


def build_graph(mesh: TriangleMesh, body: TriangleMesh, weights, beta: float,
                levels: int, hierarchy_mesh: TriangleMesh | None = None) -> GarmentGraph:
    """Assemble per-vertex features and the pooling stack for one garment.

    Features are [position, skinning weights of the nearest body vertex,
    shape coefficient]. hierarchy_mesh, when given, supplies the geometry
    used for pooling; it must share the garment's topology (this lets every
    deformation of one topology reuse a single cached hierarchy).
    """
    if mesh.n_vertices == 0 or body.n_vertices == 0:
        raise ValueError("empty mesh")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] != body.n_vertices:
        raise ValueError("weights must have one row per body vertex")
    idx = _nearest_body_index(body, mesh.vertices)
    feats = np.concatenate([
        mesh.vertices,
        weights[idx],
        np.full((mesh.n_vertices, 1), float(beta)),
    ], axis=1)
    base = mesh if hierarchy_mesh is None else hierarchy_mesh
    if base.n_vertices != mesh.n_vertices:
        raise ValueError("hierarchy mesh does not match the garment topology")
    laps, samps = nn.graph_hierarchy(base, levels)
    return GarmentGraph(mesh=mesh, node_features=feats,
                        laplacians=laps, samplings=samps)


# ---------------------------------------------------------------------------
# Model container

@dataclass
class TryOnModels:
    """The trained pipeline: one dense net plus the graph regressors."""
    r_mean: nn.ModelParams
    r_smooth: nn.ModelParams
    r_fine: dict

    @property
    def materials(self) -> list:
        return sorted(self.r_fine)

    def parameter_count(self) -> int:
        total = 0
        for params in [self.r_mean, self.r_smooth, *self.r_fine.values()]:
            total += sum(v.value.size for name, v in params.items()
                         if not name.startswith("meta."))
        return total

    def save(self, directory):
        directory = os.fspath(directory)
        nn.save_checkpoint(os.path.join(directory, R_MEAN_FILE), self.r_mean)
        nn.save_checkpoint(os.path.join(directory, R_SMOOTH_FILE), self.r_smooth)
        for mat, params in self.r_fine.items():
            nn.save_checkpoint(os.path.join(directory, r_fine_file(mat)), params)

    @classmethod
    def load(cls, directory) -> "TryOnModels":
        directory = os.fspath(directory)
        for fname in (R_MEAN_FILE, R_SMOOTH_FILE):
            if not os.path.exists(os.path.join(directory, fname)):
                raise FileNotFoundError(f"missing checkpoint {fname} in {directory}")
        fine = {}
        for fname in sorted(os.listdir(directory)):
            if fname.startswith("r_fine_") and fname.endswith(".gnnw"):
                mat = fname[len("r_fine_"):-len(".gnnw")]
                fine[mat] = nn.load_checkpoint(os.path.join(directory, fname))
        if not fine:
            raise FileNotFoundError(f"no r_fine_<material>.gnnw in {directory}")
        return cls(r_mean=nn.load_checkpoint(os.path.join(directory, R_MEAN_FILE)),
                   r_smooth=nn.load_checkpoint(os.path.join(directory, R_SMOOTH_FILE)),
                   r_fine=fine)


def _tag_seed(params: nn.ModelParams, seed: int) -> nn.ModelParams:
    params.add("meta.seed", np.float64(seed))
    return params


def init_models(seed: int, materials) -> TryOnModels:
    k = nn.DEFAULT_CHEB_ORDER
    fine = {}
    for i, mat in enumerate(sorted(materials)):
        fine[mat] = _tag_seed(
            nn.init_unet_params(FEATURE_WIDTH, nn.FINE_WIDTHS, k, seed + 2 + i), seed)
    return TryOnModels(
        r_mean=_tag_seed(nn.init_dense_params(MEAN_SIZES, seed), seed),
        r_smooth=_tag_seed(
            nn.init_unet_params(FEATURE_WIDTH, nn.SMOOTH_WIDTHS, k, seed + 1), seed),
        r_fine=fine)


def _unet_depth(params: nn.ModelParams) -> int:
    return sum(1 for name in params.names()
               if name.startswith("enc") and name.endswith(".theta"))


# ---------------------------------------------------------------------------
# Stage predictions

_TEMPLATE_FACES = None


def predict_mean(params: nn.ModelParams, p) -> TriangleMesh:
    """Coarse mean-body drape from design parameters (dense regression)."""
    global _TEMPLATE_FACES
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape != (3,):
        raise ValueError("design parameters must be a 3-vector")
    if params.step == 0:
        raise ValueError("untrained parameters: no optimizer steps recorded")
    out = nn.mlp_forward(p.reshape(1, 3), params, n_layers=2)
    verts = out.value.reshape(403, 3)
    if _TEMPLATE_FACES is None:
        _TEMPLATE_FACES = downsample_to_template(canonical_highres(p)).faces
    return TriangleMesh(verts, _TEMPLATE_FACES)


def predict_smooth(params: nn.ModelParams, g: GarmentGraph):
    """Shared deformation offsets on top of the prolonged coarse drape."""
    depth = _unet_depth(params)
    if g.depth != depth:
        raise ValueError(f"level mismatch: graph has {g.depth} levels, "
                         f"parameters expect {depth}")
    delta = nn.unet_forward(g.node_features, g.laplacians, g.samplings,
                            params, depth).value
    return delta, g.mesh.with_vertices(g.mesh.vertices + delta)


def predict_fine(fine_params: dict, g: GarmentGraph, material: str):
    """Material detail offsets on top of the smooth drape."""
    if material not in fine_params:
        raise ValueError(f"unknown material {material!r}; trained materials: "
                         f"{sorted(fine_params)}")
    params = fine_params[material]
    depth = _unet_depth(params)
    if g.depth != depth:
        raise ValueError(f"level mismatch: graph has {g.depth} levels, "
                         f"parameters expect {depth}")
    delta = nn.unet_forward(g.node_features, g.laplacians, g.samplings,
                            params, depth).value
    return delta, g.mesh.with_vertices(g.mesh.vertices + delta)


# ---------------------------------------------------------------------------
# Training

@dataclass
class _TrainItem:
    key: str
    features: np.ndarray
    laplacians: list
    samplings: list
    target: np.ndarray


def _unet_loss(item: _TrainItem, params: nn.ModelParams) -> Var:
    pred = nn.unet_forward(item.features, item.laplacians, item.samplings,
                           params, _unet_depth(params))
    return ad.l2_displacement_loss(pred, item.target)


def unet_rmse(items, params: nn.ModelParams) -> float:
    """Root mean squared vertex displacement error over a set of items."""
    if not items:
        return 0.0
    sq, n = 0.0, 0
    for item in items:
        pred = nn.unet_forward(item.features, item.laplacians, item.samplings,
                               params, _unet_depth(params)).value
        sq += float(((pred - item.target) ** 2).sum())
        n += item.target.size
    return float(np.sqrt(sq / n))


def zero_baseline_rmse(items) -> float:
    """RMSE of predicting no offsets at all; the untrained reference."""
    if not items:
        return 0.0
    sq = sum(float((item.target ** 2).sum()) for item in items)
    n = sum(item.target.size for item in items)
    return float(np.sqrt(sq / n))


def _train_unet(items, val_items, params, *, lr, epochs, batch_size,
                weight_decay_coeff, seed, patience=None) -> list:
    """Adam over mini-batches in seeded order; returns per-epoch history."""
    if not items:
        raise ValueError("empty training split")
    history = []
    best_val, stale = np.inf, 0
    val_probe = val_items[:24]
    for epoch in range(epochs):
        order = np.random.default_rng(seed * 100003 + epoch).permutation(len(items))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = [items[i] for i in order[start:start + batch_size]]
            params.zero_grad()
            for item in batch:
                loss = _unet_loss(item, params)
                ad.backward(loss)
                epoch_loss += float(loss.value)
            grads = {name: var.grad / len(batch)
                     for name, var in params.items() if var.grad is not None}
            if weight_decay_coeff:
                params.zero_grad()
                ad.backward(nn.weight_decay(params, weight_decay_coeff))
                for name, var in params.items():
                    if var.grad is not None:
                        grads[name] = grads.get(name, 0.0) + var.grad
            nn.adam_step(params, grads=grads, lr=lr)
        train_loss = epoch_loss / len(items)
        val_rmse = unet_rmse(val_probe, params)
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_rmse": val_rmse})
        if epoch % 10 == 0 or epoch == epochs - 1:
            log.info("epoch %d: train loss %.3e, val rmse %.3e",
                     epoch, train_loss, val_rmse)
        if patience is not None:
            if val_rmse < best_val - 1e-9:
                best_val, stale = val_rmse, 0
            else:
                stale += 1
                if stale >= patience:
                    log.info("early stop at epoch %d (val plateau)", epoch)
                    break
    return history


def train_r_mean(pairs, *, seed: int = 0, lr: float = 1e-2,
                 epochs: int = 4000, patience: int = 400,
                 params: nn.ModelParams | None = None):
    """Fit the dense coarse-drape net on (design, 403-vertex drape) pairs."""
    if not pairs:
        raise ValueError("empty dataset: no design targets")
    if params is None:
        params = _tag_seed(nn.init_dense_params(MEAN_SIZES, seed), seed)
    xs = [np.asarray(p, dtype=np.float64).reshape(1, 3) for p, _ in pairs]
    ys = [np.asarray(t, dtype=np.float64).reshape(1, -1) for _, t in pairs]
    n_val = len(pairs) // 5
    val_ids = list(range(0, len(pairs), 5))[:n_val] if n_val else list(range(len(pairs)))
    train_ids = [i for i in range(len(pairs)) if i not in val_ids] or list(range(len(pairs)))

    def _rmse(ids):
        sq = n = 0
        for i in ids:
            pred = nn.mlp_forward(xs[i], params, n_layers=2).value
            sq += float(((pred - ys[i]) ** 2).sum())
            n += ys[i].size
        return float(np.sqrt(sq / n))

    history = []
    best, stale = np.inf, 0
    for epoch in range(epochs):
        params.zero_grad()
        total = Var(np.float64(0.0))
        for i in train_ids:
            pred = nn.mlp_forward(xs[i], params, n_layers=2)
            total = ad.add(total, ad.l2_displacement_loss(pred, ys[i]))
        total = ad.scale(total, 1.0 / len(train_ids))
        ad.backward(total)
        nn.adam_step(params, lr=lr)
        val = _rmse(val_ids)
        history.append({"epoch": epoch, "train_loss": float(total.value),
                        "val_rmse": val})
        if val < best - 1e-12:
            best, stale = val, 0
        else:
            stale += 1
            if stale >= patience:
                log.info("coarse net early stop at epoch %d", epoch)
                break
    log.info("coarse net trained: final val rmse %.3e m", history[-1]["val_rmse"])
    return params, history


def _smooth_items(root, manifest, entries, body_model) -> list:
    """One training item per (design, topology, shape); materials share it."""
    mean_body = shaped_body(body_model, 0.0)
    items, seen, weight_cache = [], set(), {}
    for e in sorted(entries, key=lambda e: e["key"]):
        gkey = (e["design_index"], e["topology_index"], e["beta_index"])
        if gkey in seen:
            continue
        seen.add(gkey)
        s = load_sample(root, e, manifest)
        tkey = gkey[:2]
        if tkey not in weight_cache:
            idx = _nearest_body_index(mean_body, s.mean_fit.vertices)
            weight_cache[tkey] = body_model.weights[idx]
        w = weight_cache[tkey]
        feats = np.concatenate([s.mean_fit.vertices, w,
                                np.full((len(w), 1), s.beta)], axis=1)
        laps, samps = nn.graph_hierarchy(s.garment_rest, SMOOTH_DEPTH)
        items.append(_TrainItem(key=e["key"], features=feats, laplacians=laps,
                                samplings=samps, target=s.smooth_gt))
    return items


def _fine_items(root, manifest, entries, body_model) -> list:
    """Items for one material: graph on the smoothed GT vs the shaped body."""
    items = []
    for e in sorted(entries, key=lambda e: (e["beta_index"], e["key"])):
        s = load_sample(root, e, manifest)
        base = s.mean_fit.vertices + s.smooth_gt
        body = shaped_body(body_model, s.beta)
        idx = _nearest_body_index(body, base)
        feats = np.concatenate([base, body_model.weights[idx],
                                np.full((len(base), 1), s.beta)], axis=1)
        laps, samps = nn.graph_hierarchy(s.garment_rest, FINE_DEPTH)
        items.append(_TrainItem(key=e["key"], features=feats, laplacians=laps,
                                samplings=samps, target=s.fine_gt))
    items.sort(key=lambda it: it.key)
    return items


def train_r_smooth(root, manifest, body_model, *, seed: int = 0,
                   lr: float = 1e-3, epochs: int = 60, batch_size: int = 8,
                   weight_decay_coeff: float = 1e-6, designs=None,
                   patience=None, params=None):
    """Train the shared-deformation U-Net on the dataset's train split."""
    train_e = manifest_samples(manifest, split="train", designs=designs)
    if not train_e:
        raise ValueError("empty training split")
    val_e = manifest_samples(manifest, split="test", designs=designs)
    items = _smooth_items(root, manifest, train_e, body_model)
    val_items = _smooth_items(root, manifest, val_e, body_model)
    if params is None:
        params = _tag_seed(nn.init_unet_params(
            FEATURE_WIDTH, nn.SMOOTH_WIDTHS, nn.DEFAULT_CHEB_ORDER, seed + 1), seed)
    log.info("training shared-deformation net: %d items, %d validation",
             len(items), len(val_items))
    history = _train_unet(items, val_items, params, lr=lr, epochs=epochs,
                          batch_size=batch_size,
                          weight_decay_coeff=weight_decay_coeff, seed=seed,
                          patience=patience)
    return params, history


def train_r_fine(root, manifest, body_model, material: str, *, seed: int = 0,
                 lr: float = 1e-3, epochs: int = 60, batch_size: int = 8,
                 weight_decay_coeff: float = 1e-6, designs=None,
                 patience=None, params=None):
    """Train one material's detail U-Net; the smooth stage stays frozen."""
    train_e = manifest_samples(manifest, split="train", materials=(material,),
                               designs=designs)
    if not train_e:
        raise ValueError(f"empty training split for material {material!r}")
    val_e = manifest_samples(manifest, split="test", materials=(material,),
                             designs=designs)
    items = _fine_items(root, manifest, train_e, body_model)
    val_items = _fine_items(root, manifest, val_e, body_model)
    if params is None:
        params = _tag_seed(nn.init_unet_params(
            FEATURE_WIDTH, nn.FINE_WIDTHS, nn.DEFAULT_CHEB_ORDER, seed + 2), seed)
    log.info("training %s detail net: %d items, %d validation",
             material, len(items), len(val_items))
    history = _train_unet(items, val_items, params, lr=lr, epochs=epochs,
                          batch_size=batch_size,
                          weight_decay_coeff=weight_decay_coeff, seed=seed,
                          patience=patience)
    return params, history


# ---------------------------------------------------------------------------
# End-to-end prediction

@dataclass
class TryOnResult:
    """All four pipeline outputs plus per-stage metrics."""
    mean_fit: TriangleMesh
    optimized: TriangleMesh
    smooth: TriangleMesh
    fine: TriangleMesh
    metrics: dict = field(default_factory=dict)


def predict_end_to_end(models: TryOnModels, p, beta: float, material: str,
                       body_model: bodymod.BodyModel, *, topology_seed=None,
                       t_area=None) -> TryOnResult:
    """Run the full pipeline for one (design, shape, material) query.

    Stage timings land in metrics; the one-time topology preparation
    (remeshing + pooling) is reported separately from inference time since
    it is cached across calls for the same design and topology seed.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape != (3,):
        raise ValueError("design parameters must be a 3-vector")
    beta = float(beta)
    lo, hi = bodymod.SHAPE_RANGE
    if not lo <= beta <= hi:
        raise ValueError(f"shape coefficient {beta} outside [{lo}, {hi}]")
    if material not in models.r_fine:
        raise ValueError(f"unknown material {material!r}; trained materials: "
                         f"{models.materials}")

    timings = {}

    def _stage(name, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except Exception as e:
            raise PipelineError(name, str(e)) from e
        timings[name] = time.perf_counter() - t0
        return out

    topo = _stage("prepare", lambda: garment_topology(
        body_model, p, topology_seed=topology_seed, t_area=t_area))
    prepare_s = timings.pop("prepare")

    tbar = _stage("mean", lambda: predict_mean(models.r_mean, p))
    optimized = _stage("optimize", lambda: topo.rest.with_vertices(
        np.asarray(topo.prolong @ tbar.vertices)))

    def _smooth():
        g = build_graph(optimized, shaped_body(body_model, 0.0),
                        body_model.weights, beta, SMOOTH_DEPTH,
                        hierarchy_mesh=topo.rest)
        return predict_smooth(models.r_smooth, g)[1]
    smooth_mesh = _stage("smooth", _smooth)

    def _fine():
        g = build_graph(smooth_mesh, shaped_body(body_model, beta),
                        body_model.weights, beta, FINE_DEPTH,
                        hierarchy_mesh=topo.rest)
        return predict_fine(models.r_fine, g, material)[1]
    fine_mesh = _stage("fine", _fine)

    inference_s = sum(timings.values())
    return TryOnResult(
        mean_fit=tbar, optimized=optimized, smooth=smooth_mesh, fine=fine_mesh,
        metrics={"timings": timings, "prepare_s": prepare_s,
                 "inference_s": inference_s,
                 "total_s": inference_s + prepare_s,
                 "n_vertices": optimized.n_vertices})


# ---------------------------------------------------------------------------
# Self-supervised collision fine-tuning

@dataclass
class _FinetuneContext:
    base: np.ndarray
    features: np.ndarray
    laplacians: list
    samplings: list
    body_vertices: np.ndarray
    body_normals: np.ndarray
    correspondence: np.ndarray
    frozen_delta: np.ndarray


def manifest_sampler(manifest, *, seed: int = 0, designs=None):
    """Endless (p, topology_seed, beta) stream over a dataset's designs."""
    rng = np.random.default_rng(seed)
    choices = []
    for d in manifest["designs"]:
        if designs is not None and d["index"] not in designs:
            continue
        for t in d["topologies"]:
            if t.get("alive", True):
                choices.append((np.asarray(d["p"], dtype=np.float64), t["seed"]))
    if not choices:
        raise ValueError("no usable designs in manifest")
    while True:
        p, tseed = choices[int(rng.integers(len(choices)))]
        yield p, tseed, float(rng.uniform(*bodymod.SHAPE_RANGE))


def selfsup_collision_finetune(models: TryOnModels, material: str, sampler,
                               steps: int, body_model: bodymod.BodyModel, *,
                               reg_coeff: float = 0.0, lr: float = 1e-4,
                               batch_size: int = 8, t_area=None):
    """Reduce body penetration of the detail stage without ground truth.

    Draws a batch of random inputs once, then descends the batch-mean
    collision loss with plain gradient steps; only the chosen material's
    detail net moves. reg_coeff > 0 adds an anchor pulling the predicted
    offsets toward their pre-finetune values. Returns (params, log rows).
    """
    if material not in models.r_fine:
        raise ValueError(f"unknown material {material!r}; trained materials: "
                         f"{models.materials}")
    params = models.r_fine[material]
    stream = iter(sampler)
    drawn = []
    for _ in range(batch_size):
        try:
            drawn.append(next(stream))
        except StopIteration:
            raise ValueError(f"sampler exhausted after {len(drawn)} of "
                             f"{batch_size} inputs")

    contexts = []
    for p, tseed, beta in drawn:
        topo = garment_topology(body_model, p, topology_seed=tseed, t_area=t_area)
        tbar = predict_mean(models.r_mean, p)
        optimized = topo.rest.with_vertices(np.asarray(topo.prolong @ tbar.vertices))
        g_s = build_graph(optimized, shaped_body(body_model, 0.0),
                          body_model.weights, beta, SMOOTH_DEPTH,
                          hierarchy_mesh=topo.rest)
        smooth_mesh = predict_smooth(models.r_smooth, g_s)[1]
        body = shaped_body(body_model, beta)
        g_f = build_graph(smooth_mesh, body, body_model.weights, beta,
                          FINE_DEPTH, hierarchy_mesh=topo.rest)
        normals = body._cache.get("vnormals")
        if normals is None:
            normals = vertex_normals(body)
            body._cache["vnormals"] = normals
        frozen = nn.unet_forward(g_f.node_features, g_f.laplacians,
                                 g_f.samplings, params, FINE_DEPTH).value.copy()
        contexts.append(_FinetuneContext(
            base=smooth_mesh.vertices, features=g_f.node_features,
            laplacians=g_f.laplacians, samplings=g_f.samplings,
            body_vertices=body.vertices.copy(), body_normals=normals.copy(),
            correspondence=_nearest_body_index(body, smooth_mesh.vertices),
            frozen_delta=frozen))

    initial = params.copy_values()
    rows = []
    for step in range(steps):
        params.zero_grad()
        loss_sum = 0.0
        count = 0
        for ctx in contexts:
            delta = nn.unet_forward(ctx.features, ctx.laplacians,
                                    ctx.samplings, params, FINE_DEPTH)
            verts = ad.add(Var(ctx.base), delta)
            closs = ad.collision_loss(verts, ctx.body_vertices,
                                      ctx.body_normals, ctx.correspondence)
            loss = closs
            if reg_coeff:
                anchor = ad.sum_squares(ad.sub(delta, Var(ctx.frozen_delta)))
                loss = ad.add(closs, ad.scale(anchor, reg_coeff))
            ad.backward(loss)
            loss_sum += float(closs.value)
            d = ((verts.value - ctx.body_vertices[ctx.correspondence])
                 * ctx.body_normals[ctx.correspondence]).sum(axis=1)
            count += int((d < 0).sum())
        grads = {name: var.grad / len(contexts)
                 for name, var in params.items() if var.grad is not None}
        nn.sgd_step(params, grads=grads, lr=lr)
        drift = np.sqrt(sum(float(((var.value - initial[name]) ** 2).sum())
                            for name, var in params.items()))
        rows.append({"step": step, "collision_loss": loss_sum / len(contexts),
                     "collision_vertices": count, "param_drift": drift})
        if step % 25 == 0 or step == steps - 1:
            log.info("finetune step %d: loss %.3e, %d colliding vertices",
                     step, rows[-1]["collision_loss"], count)
    return params, rows


def collision_vertex_count(models: TryOnModels, inputs, material: str,
                           body_model: bodymod.BodyModel, t_area=None) -> int:
    """Correspondence-based penetration count over a set of inputs."""
    total = 0
    for p, tseed, beta in inputs:
        res = predict_end_to_end(models, p, beta, material, body_model,
                                 topology_seed=tseed, t_area=t_area)
        body = shaped_body(body_model, beta)
        normals = body._cache.get("vnormals")
        if normals is None:
            normals = vertex_normals(body)
            body._cache["vnormals"] = normals
        corr = _nearest_body_index(body, res.smooth.vertices)
        d = ((res.fine.vertices - body.vertices[corr])
             * normals[corr]).sum(axis=1)
        total += int((d < 0).sum())
    return total


# ---------------------------------------------------------------------------
# Fully connected baseline

def fc_sizes(n_out_vertices: int, n_materials: int, hidden: int = FC_HIDDEN):
    return (4 + n_materials, hidden, 3 * n_out_vertices)


def fc_parameter_count(n_out_vertices: int, n_materials: int,
                       hidden: int = FC_HIDDEN) -> int:
    sizes = fc_sizes(n_out_vertices, n_materials, hidden)
    return sum(sizes[i] * sizes[i + 1] + sizes[i + 1]
               for i in range(len(sizes) - 1))


def fc_input_vector(p, beta: float, material: str, materials) -> np.ndarray:
    materials = list(materials)
    onehot = np.zeros(len(materials))
    onehot[materials.index(material)] = 1.0
    return np.concatenate([np.asarray(p, dtype=np.float64).reshape(3),
                           [float(beta)], onehot])


def predict_fc(params: nn.ModelParams, p, beta: float, material: str,
               materials, faces) -> TriangleMesh:
    """Baseline drape: one dense net over a fixed high-density template."""
    x = fc_input_vector(p, beta, material, materials)
    out = nn.mlp_forward(x.reshape(1, -1), params, n_layers=2)
    return TriangleMesh(out.value.reshape(-1, 3), faces)


def train_fc_baseline(root, manifest, body_model, *, seed: int = 0,
                      lr: float = 1e-3, epochs: int = 150,
                      batch_size: int = 16, hidden: int = FC_HIDDEN,
                      designs=None):
    """Train the dense baseline on the same drapes as the graph pipeline.

    Targets are the simulated meshes transferred onto the shared canonical
    template, so every sample regresses the same fixed vertex set.
    """
    entries = manifest_samples(manifest, split="train", designs=designs)
    if not entries:
        raise ValueError("empty training split")
    materials = manifest["config"]["materials"]

    transfer_cache = {}
    xs, ys = [], []
    for e in sorted(entries, key=lambda e: e["key"]):
        s = load_sample(root, e, manifest)
        tkey = (e["design_index"], e["topology_index"])
        if tkey not in transfer_cache:
            high = canonical_highres(s.design, body=body_model)
            transfer_cache[tkey] = (nn.barycentric_transfer(
                high.vertices, s.garment_rest), high.faces)
        tr, faces = transfer_cache[tkey]
        xs.append(fc_input_vector(s.design, s.beta, s.material, materials))
        ys.append(np.asarray(tr @ s.sim_mesh.vertices).reshape(1, -1))
    n_verts = ys[0].size // 3
    params = _tag_seed(nn.init_dense_params(
        fc_sizes(n_verts, len(materials), hidden), seed + 9), seed)

    history = []
    for epoch in range(epochs):
        order = np.random.default_rng(seed * 99991 + epoch).permutation(len(xs))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            ids = order[start:start + batch_size]
            params.zero_grad()
            for i in ids:
                pred = nn.mlp_forward(xs[i].reshape(1, -1), params, n_layers=2)
                loss = ad.l2_displacement_loss(pred, ys[i])
                ad.backward(loss)
                epoch_loss += float(loss.value)
            grads = {name: var.grad / len(ids)
                     for name, var in params.items() if var.grad is not None}
            nn.adam_step(params, grads=grads, lr=lr)
        history.append({"epoch": epoch, "train_loss": epoch_loss / len(xs)})
        if epoch % 25 == 0 or epoch == epochs - 1:
            log.info("fc baseline epoch %d: loss %.3e", epoch,
                     history[-1]["train_loss"])
    return params, history


def fc_train_rmse(root, manifest, params, body_model, *, designs=None,
                  split: str = "train") -> float:
    """Vertex RMSE of the dense baseline against transferred GT drapes."""
    entries = manifest_samples(manifest, split=split, designs=designs)
    materials = manifest["config"]["materials"]
    transfer_cache = {}
    sq = n = 0
    for e in sorted(entries, key=lambda e: e["key"]):
        s = load_sample(root, e, manifest)
        tkey = (e["design_index"], e["topology_index"])
        if tkey not in transfer_cache:
            high = canonical_highres(s.design, body=body_model)
            transfer_cache[tkey] = nn.barycentric_transfer(high.vertices,
                                                           s.garment_rest)
        gt = np.asarray(transfer_cache[tkey] @ s.sim_mesh.vertices)
        x = fc_input_vector(s.design, s.beta, s.material, materials)
        pred = nn.mlp_forward(x.reshape(1, -1), params,
                              n_layers=2).value.reshape(-1, 3)
        sq += float(((pred - gt) ** 2).sum())
        n += gt.size
    return float(np.sqrt(sq / n))


# ---------------------------------------------------------------------------
# Evaluation

def pipeline_train_rmse(root, manifest, models: TryOnModels,
                        body_model: bodymod.BodyModel, *, designs=None,
                        split: str = "train") -> float:
    """Vertex RMSE of the end-to-end prediction against simulated drapes."""
    entries = manifest_samples(manifest, split=split, designs=designs)
    t_area = manifest["config"]["t_area"]
    sq = n = 0
    for e in sorted(entries, key=lambda e: (e["beta_index"], e["key"])):
        s = load_sample(root, e, manifest)
        res = predict_end_to_end(models, s.design, s.beta, s.material,
                                 body_model, topology_seed=s.topology_seed,
                                 t_area=t_area)
        sq += float(((res.fine.vertices - s.sim_mesh.vertices) ** 2).sum())
        n += s.sim_mesh.vertices.size
    return float(np.sqrt(sq / n))


def evaluate(root, manifest, models: TryOnModels,
             body_model: bodymod.BodyModel, *, split: str = "test",
             designs=None, materials=None, fc_params=None):
    """Per-sample accuracy report plus an aggregate summary.

    Rows carry the symmetric Hausdorff distance between the predicted and
    simulated drape and the penetration vertex count; the summary aggregates
    per shape coefficient and reports model parameter counts. Wall-clock
    numbers are intentionally excluded so reruns are byte-identical.
    """
    entries = manifest_samples(manifest, split=split, designs=designs,
                               materials=materials)
    if not entries:
        raise ValueError(f"empty split {split!r}: nothing to evaluate")
    cfg = manifest["config"]
    t_area = cfg["t_area"]
    fc_materials = cfg["materials"]
    fc_faces = None

    rows = []
    for e in sorted(entries, key=lambda e: (e["beta_index"], e["key"])):
        s = load_sample(root, e, manifest)
        res = predict_end_to_end(models, s.design, s.beta, s.material,
                                 body_model, topology_seed=s.topology_seed,
                                 t_area=t_area)
        h = float(hausdorff(res.fine, s.sim_mesh)[0])
        body = shaped_body(body_model, s.beta)
        d = bodymod.signed_distance(body, res.fine.vertices)[0]
        row = {
            "key": s.key, "design_index": s.design_index,
            "topology_index": s.topology_index,
            "topology_seed": s.topology_seed,
            "beta": s.beta, "beta_index": s.beta_index,
            "material": s.material, "split": s.split,
            "hausdorff": h,
            "collision_vertices": int((d < 0).sum()),
            "n_vertices": res.fine.n_vertices,
        }
        if fc_params is not None:
            if fc_faces is None:
                fc_faces = canonical_highres(s.design, body=body_model).faces
            fc_mesh = predict_fc(fc_params, s.design, s.beta, s.material,
                                 fc_materials, fc_faces)
            row["fc_hausdorff"] = float(hausdorff(fc_mesh, s.sim_mesh)[0])
        rows.append(row)
    rows.sort(key=lambda r: r["key"])

    per_beta = {}
    for r in rows:
        per_beta.setdefault(r["beta_index"], []).append(r["hausdorff"])
    beta_table = [{"beta_index": bi, "beta": float(manifest["betas"][bi]),
                   "count": len(v), "hausdorff_mean": float(np.mean(v)),
                   "hausdorff_max": float(np.max(v))}
                  for bi, v in sorted(per_beta.items())]

    params_conv = models.parameter_count()
    if fc_params is not None:
        params_fc = sum(v.value.size for name, v in fc_params.items()
                        if not name.startswith("meta."))
    else:
        n_canon = canonical_highres(
            np.asarray(manifest["designs"][0]["p"]), body=body_model).n_vertices
        params_fc = fc_parameter_count(n_canon, len(fc_materials))
    summary = {
        "split": split, "count": len(rows),
        "designs": sorted({r["design_index"] for r in rows}),
        "materials": sorted({r["material"] for r in rows}),
        "hausdorff_mean": float(np.mean([r["hausdorff"] for r in rows])),
        "hausdorff_max": float(np.max([r["hausdorff"] for r in rows])),
        "collision_mean": float(np.mean([r["collision_vertices"] for r in rows])),
        "per_beta": beta_table,
        "params_conv": int(params_conv),
        "params_fc": int(params_fc),
        "param_ratio": float(params_fc / params_conv),
    }
    if fc_params is not None:
        summary["fc_hausdorff_mean"] = float(
            np.mean([r["fc_hausdorff"] for r in rows]))
    return rows, summary
