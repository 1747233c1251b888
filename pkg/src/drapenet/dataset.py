"""Drape dataset generation and loading.

For every (design, topology, body shape, material) combination this module
simulates the draped garment on the remeshed topology and splits the result
into a shared low-frequency offset plus a per-material detail offset. The
coarse 403-vertex drape sampled from the mean-body simulation doubles as the
regression target for the dense first-stage predictor.

Generation is deterministic in the seed: reruns produce byte-identical
directories, including the manifest.
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import body as bodymod
from ._util import (atomic_write_bytes, atomic_write_text, canonical_json,
                    sha256_file, worker_count)
from .cloth import (CONTACT_OFFSET, MATERIALS, NonConvergenceError,
                    decompose_gt, relax_drape)
from .garment import canonical_highres, downsample_to_template
from .mesh import TriangleMesh, load_obj, save_obj, uniform_laplacian_smooth
from .nn import barycentric_transfer
from .remesh import DEFAULT_T_AREA, RemeshTargets, remesh_phi

log = logging.getLogger(__name__)

OFFSET_MAGIC = b"DGF1"
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
BETA_RANGE = (-3.0, 3.0)
DEFAULT_MATERIALS = ("M1", "M2")
MAX_PENETRATION = 1e-3      # metres, hard invariant on every stored sim
SMOOTH_ITERATIONS = 30      # decomposition smoothing schedule
SMOOTH_STEP = 0.5


# ---------------------------------------------------------------------------
# Offset files

def write_offsets(path, offsets):
    """Store per-vertex 3-vectors: magic, u32 count, little-endian f32 xyz."""
    arr = np.asarray(offsets, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("offsets must be an (n, 3) array")
    if not np.all(np.isfinite(arr)):
        raise ValueError("offsets contain non-finite values")
    payload = OFFSET_MAGIC + struct.pack("<I", arr.shape[0])
    payload += arr.astype("<f4").tobytes()
    atomic_write_bytes(path, payload)


def read_offsets(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != OFFSET_MAGIC:
        raise ValueError(f"{path}: not an offset file (bad magic)")
    (count,) = struct.unpack_from("<I", data, 4)
    need = 8 + 12 * count
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=8).reshape(count, 3)
    return arr.astype(np.float64)


# ---------------------------------------------------------------------------
# Sampling grids

def beta_grid(count: int) -> np.ndarray:
    """Evenly spaced body-shape coefficients across the supported range."""
    if count < 1:
        raise ValueError("beta count must be >= 1")
    if count == 1:
        return np.array([0.0])
    return np.linspace(BETA_RANGE[0], BETA_RANGE[1], count)


def beta_split(count: int) -> list:
    """Interleaved split: even grid indices train, odd indices test."""
    return ["train" if i % 2 == 0 else "test" for i in range(count)]


def topology_area_factor(topology_seed: int) -> float:
    """Deterministic +-10% jitter on the remesh area target."""
    r = np.random.default_rng(int(topology_seed)).random()
    return float(1.0 + 0.2 * (r - 0.5))


# ---------------------------------------------------------------------------
# Generation

class _Group:
    """One (design, topology) slot: remeshed rest garment plus transfers."""

    def __init__(self, design_index, topo_index, topo_seed, area_factor,
                 rest, template, rel_dir):
        self.design_index = design_index
        self.topo_index = topo_index
        self.topo_seed = topo_seed
        self.area_factor = area_factor
        self.rest = rest
        self.template = template
        self.rel_dir = rel_dir
        # both transfers are built on rest geometry and applied to drapes
        self.sample_matrix = barycentric_transfer(template.vertices, rest)
        self.prolong_matrix = barycentric_transfer(rest.vertices, template)
        self.alive = True
        self.mean_fit = None
        self.tbar = None
        self.mean_stats = {}


_STEP_CTX: dict = {}


def _run_sim_job(job):
    """Worker entry: one relaxation against the step body (fork-shared)."""
    gi, material, warm = job
    group = _STEP_CTX["groups"][gi]
    opts = _STEP_CTX["opts"]
    try:
        mesh, info = relax_drape(
            group.rest, _STEP_CTX["body"], MATERIALS[material],
            initial_vertices=warm, max_iterations=opts["max_iterations"],
            tolerance=opts["tolerance"], return_info=True)
    except NonConvergenceError as e:
        return ("fail", f"no equilibrium after {opts['max_iterations']} iterations "
                        f"(residual {e.args[0]:.3g})")
    return ("ok", mesh.vertices, int(info["iterations"]), float(info["residual"]))


def _run_step(jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        import multiprocessing
        from concurrent.futures import ProcessPoolExecutor

        try:
            ctx = multiprocessing.get_context("fork")
        except ValueError:
            return [_run_sim_job(j) for j in jobs]
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            return list(pool.map(_run_sim_job, jobs))
    return [_run_sim_job(j) for j in jobs]


def _sim_step(groups, body, materials, warm_of, workers, opts):
    """Relax every live chain against one body; returns {(gi, mat): result}."""
    _STEP_CTX.update({"groups": groups, "body": body, "opts": opts})
    jobs = []
    for gi, g in enumerate(groups):
        if not g.alive:
            continue
        for mat in materials:
            jobs.append((gi, mat, warm_of(gi, mat)))
    results = _run_step(jobs, workers)
    _STEP_CTX.clear()
    return {(j[0], j[1]): r for j, r in zip(jobs, results)}


def _finalize_beta(group, beta_idx, beta, split, sims, body, out_root,
                   entries, exclusions):
    """Decompose one shape's sims, check invariants, write the files."""
    converged = {}
    for mat, res in sims.items():
        key = _sample_key(group, beta_idx, mat)
        if res[0] != "ok":
            log.warning("excluding %s: %s", key, res[1])
            exclusions.append({"key": key, "reason": res[1]})
            continue
        verts = res[1]
        dmin = float(bodymod.signed_distance(body, verts)[0].min())
        if -dmin > MAX_PENETRATION:
            msg = f"penetration {-dmin * 1000:.2f} mm exceeds 1 mm"
            log.warning("excluding %s: %s", key, msg)
            exclusions.append({"key": key, "reason": msg})
            continue
        converged[mat] = (group.rest.with_vertices(verts), res[2], res[3], dmin)
    if not converged:
        return

    sim_meshes = {m: c[0] for m, c in converged.items()}
    smooth_gt, fine_gt = decompose_gt(sim_meshes, group.mean_fit,
                                      iterations=SMOOTH_ITERATIONS,
                                      step=SMOOTH_STEP)

    # the three-way split must rebuild each sim up to the cross-material
    # smoothing residual; anything larger means the decomposition is broken
    own_sm = {m: uniform_laplacian_smooth(s, iterations=SMOOTH_ITERATIONS,
                                          step=SMOOTH_STEP).vertices
              for m, s in sim_meshes.items()}
    mean_sm = np.mean([own_sm[m] for m in sorted(own_sm)], axis=0)
    base = group.mean_fit.vertices
    for mat, mesh in sim_meshes.items():
        lhs = np.abs(base + smooth_gt + fine_gt[mat] - mesh.vertices).max()
        rhs = np.abs(mean_sm - own_sm[mat]).max()
        if abs(lhs - rhs) > 1e-9:
            raise RuntimeError(
                f"{_sample_key(group, beta_idx, mat)}: decomposition identity "
                f"violated ({lhs:.3e} vs {rhs:.3e})")

    beta_rel = f"{group.rel_dir}/beta_{beta_idx:02d}"
    beta_dir = os.path.join(out_root, beta_rel)
    write_offsets(os.path.join(beta_dir, "smooth_gt.bin"), smooth_gt)
    for mat, mesh in sim_meshes.items():
        save_obj(os.path.join(beta_dir, f"sim_{mat}.obj"), mesh)
        write_offsets(os.path.join(beta_dir, f"fine_{mat}.bin"), fine_gt[mat])
    for mat in sorted(sim_meshes):
        _, iters, residual, dmin = converged[mat]
        files = {
            "garment_rest": f"{group.rel_dir}/garment_rest.obj",
            "mean_fit": f"{group.rel_dir}/mean_fit.obj",
            "tbar": f"design_{group.design_index:02d}/tbar.bin",
            "sim": f"{beta_rel}/sim_{mat}.obj",
            "smooth_gt": f"{beta_rel}/smooth_gt.bin",
            "fine_gt": f"{beta_rel}/fine_{mat}.bin",
        }
        entries.append({
            "key": _sample_key(group, beta_idx, mat),
            "design_index": group.design_index,
            "topology_index": group.topo_index,
            "topology_seed": group.topo_seed,
            "beta_index": beta_idx,
            "beta": float(beta),
            "material": mat,
            "split": split,
            "files": files,
            "sha256": {
                "sim": sha256_file(os.path.join(out_root, files["sim"])),
                "smooth_gt": sha256_file(os.path.join(out_root, files["smooth_gt"])),
                "fine_gt": sha256_file(os.path.join(out_root, files["fine_gt"])),
            },
            "stats": {
                "iterations": iters,
                "residual": residual,
                "penetration": max(0.0, -dmin),
                "n_vertices": group.rest.n_vertices,
            },
        })


def _sample_key(group, beta_idx, material):
    return (f"d{group.design_index:02d}_t{group.topo_index}"
            f"_b{beta_idx:02d}_{material}")


def generate_dataset(out_dir, *, designs: int = 4, betas: int = 21,
                     topologies_per_design: int = 2,
                     materials=DEFAULT_MATERIALS, seed: int = 0,
                     t_area: float | None = None,
                     body_resolution: float = 0.015,
                     max_iterations: int = 20000, tolerance: float = 1e-5,
                     workers: int | None = None) -> dict:
    """Simulate and store the full drape dataset; returns the manifest.

    Shapes sweep the grid centre-out so each relaxation warm-starts from its
    neighbour on the same side of the mean. Samples that fail to converge or
    that penetrate the body are excluded and logged, never truncated.
    """
    if designs < 1 or betas < 1 or topologies_per_design < 1:
        raise ValueError("designs, betas and topologies_per_design must be >= 1")
    materials = tuple(materials)
    if not materials:
        raise ValueError("at least one material is required")
    for m in materials:
        if m not in MATERIALS:
            raise ValueError(f"unknown material {m!r}")
    if t_area is None:
        t_area = DEFAULT_T_AREA

    out_root = os.fspath(out_dir)
    workers = worker_count(workers)
    rng = np.random.default_rng(seed)
    p_mat = rng.random((designs, 3))
    topo_seeds = rng.integers(0, 2 ** 31 - 1, size=(designs, topologies_per_design))
    grid = beta_grid(betas)
    splits = beta_split(betas)
    opts = {"max_iterations": int(max_iterations), "tolerance": float(tolerance)}

    log.info("building body model (resolution %.3f)", body_resolution)
    model = bodymod.build_body(body_resolution)

    groups = []
    for d in range(designs):
        high = canonical_highres(p_mat[d], body=model)
        template = downsample_to_template(high)
        for t in range(topologies_per_design):
            tseed = int(topo_seeds[d, t])
            factor = topology_area_factor(tseed)
            rest = remesh_phi(high, targets=RemeshTargets(t_area=t_area * factor))
            g = _Group(d, t, tseed, factor, rest, template,
                       f"design_{d:02d}/topo_{t}")
            groups.append(g)
            save_obj(os.path.join(out_root, g.rel_dir, "garment_rest.obj"), rest)
            log.info("design %d topo %d: %d vertices (area factor %.3f)",
                     d, t, rest.n_vertices, factor)

    entries: list = []
    exclusions: list = []
    warm = {}   # (gi, mat, side) -> vertex array

    # mean-body pass: seeds every warm chain and defines the coarse targets
    mean_body = bodymod.body_mesh(model, 0.0)
    results = _sim_step(groups, mean_body, materials,
                        lambda gi, mat: None, workers, opts)
    for gi, g in enumerate(groups):
        ok = {m: results[(gi, m)] for m in materials
              if results[(gi, m)][0] == "ok"}
        if not ok:
            g.alive = False
            for m in materials:
                for bi in range(betas):
                    key = _sample_key(g, bi, m)
                    exclusions.append({"key": key,
                                       "reason": "mean-body drape diverged"})
            log.warning("design %d topo %d: no converged mean drape, dropped",
                        g.design_index, g.topo_index)
            continue
        mf_raw = np.mean([ok[m][1] for m in sorted(ok)], axis=0)
        g.tbar = np.asarray(g.sample_matrix @ mf_raw)
        g.mean_fit = g.rest.with_vertices(np.asarray(g.prolong_matrix @ g.tbar))
        g.mean_stats = {m: {"iterations": ok[m][2], "residual": ok[m][3]}
                        for m in sorted(ok)}
        save_obj(os.path.join(out_root, g.rel_dir, "mean_fit.obj"), g.mean_fit)
        for m in materials:
            if m in ok:
                warm[(gi, m, "pos")] = ok[m][1]
                warm[(gi, m, "neg")] = ok[m][1]

    for d in range(designs):
        tbars = [g.tbar for g in groups if g.design_index == d and g.alive]
        if tbars:
            write_offsets(os.path.join(out_root, f"design_{d:02d}", "tbar.bin"),
                          np.mean(tbars, axis=0))

    # centre-out shape sweep; the exact-zero shape reuses the mean-body sims
    zero_idx = [i for i in range(betas) if grid[i] == 0.0]
    if zero_idx:
        bi = zero_idx[0]
        for gi, g in enumerate(groups):
            if g.alive:
                _finalize_beta(g, bi, grid[bi], splits[bi],
                               {m: results[(gi, m)] for m in materials
                                if (gi, m) in results},
                               mean_body, out_root, entries, exclusions)
    del results, mean_body

    order = sorted((i for i in range(betas) if i not in zero_idx),
                   key=lambda i: (abs(grid[i]), grid[i] < 0))
    for bi in order:
        beta = float(grid[bi])
        side = "pos" if beta >= 0 else "neg"
        body = bodymod.body_mesh(model, beta)
        log.info("shape %d/%d (beta %+.2f)", bi + 1, betas, beta)
        step = _sim_step(groups, body, materials,
                         lambda gi, mat: warm.get((gi, mat, side)), workers, opts)
        for (gi, mat), res in step.items():
            if res[0] == "ok":
                warm[(gi, mat, side)] = res[1]
        for gi, g in enumerate(groups):
            if g.alive:
                _finalize_beta(g, bi, beta, splits[bi],
                               {m: step[(gi, m)] for m in materials
                                if (gi, m) in step},
                               body, out_root, entries, exclusions)
        del body, step

    entries.sort(key=lambda e: e["key"])
    exclusions.sort(key=lambda e: e["key"])
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": int(seed),
        "config": {
            "designs": designs,
            "betas": betas,
            "topologies_per_design": topologies_per_design,
            "materials": list(materials),
            "t_area": float(t_area),
            "body_resolution": float(body_resolution),
            "beta_range": list(BETA_RANGE),
            "tolerance": float(tolerance),
            "max_iterations": int(max_iterations),
            "contact_offset": CONTACT_OFFSET,
            "smooth_iterations": SMOOTH_ITERATIONS,
            "smooth_step": SMOOTH_STEP,
            "workers": workers,
        },
        "betas": [float(b) for b in grid],
        "beta_split": splits,
        "designs": [
            {
                "index": d,
                "p": [float(x) for x in p_mat[d]],
                "tbar": (f"design_{d:02d}/tbar.bin"
                         if any(g.alive and g.design_index == d for g in groups)
                         else None),
                "tbar_sha256": (sha256_file(os.path.join(
                    out_root, f"design_{d:02d}", "tbar.bin"))
                    if any(g.alive and g.design_index == d for g in groups)
                    else None),
                "topologies": [
                    {
                        "index": g.topo_index,
                        "seed": g.topo_seed,
                        "area_factor": g.area_factor,
                        "alive": g.alive,
                        "dir": g.rel_dir,
                        "n_vertices": g.rest.n_vertices,
                        "n_faces": g.rest.n_faces,
                        "mean_stats": g.mean_stats,
                    }
                    for g in groups if g.design_index == d
                ],
            }
            for d in range(designs)
        ],
        "samples": entries,
        "exclusions": exclusions,
    }
    atomic_write_text(os.path.join(out_root, MANIFEST_NAME),
                      canonical_json(manifest))
    log.info("dataset complete: %d samples, %d exclusions",
             len(entries), len(exclusions))
    return manifest


# ---------------------------------------------------------------------------
# Loading

@dataclass(frozen=True)
class DatasetSample:
    """One stored drape with everything its regressors need."""
    key: str
    design: np.ndarray
    design_index: int
    topology_index: int
    topology_seed: int
    beta: float
    beta_index: int
    material: str
    split: str
    garment_rest: TriangleMesh
    mean_fit: TriangleMesh
    sim_mesh: TriangleMesh
    smooth_gt: np.ndarray
    fine_gt: np.ndarray


_MESH_CACHE: dict = {}


def _cached_mesh(path) -> TriangleMesh:
    st = os.stat(path)
    key = (os.path.abspath(path), st.st_mtime_ns, st.st_size)
    mesh = _MESH_CACHE.get(key)
    if mesh is None:
        mesh = load_obj(path)
        if len(_MESH_CACHE) > 64:
            _MESH_CACHE.clear()
        _MESH_CACHE[key] = mesh
    return mesh


def load_manifest(root) -> dict:
    import json

    path = os.path.join(os.fspath(root), MANIFEST_NAME)
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version "
                         f"{manifest.get('version')!r}")
    return manifest


def manifest_samples(manifest, split=None, materials=None, designs=None,
                     topologies=None) -> list:
    """Filter manifest sample entries; None keeps every value of a field."""
    out = []
    for e in manifest["samples"]:
        if split is not None and e["split"] != split:
            continue
        if materials is not None and e["material"] not in materials:
            continue
        if designs is not None and e["design_index"] not in designs:
            continue
        if topologies is not None and e["topology_index"] not in topologies:
            continue
        out.append(e)
    return out


def load_sample(root, entry, manifest=None) -> DatasetSample:
    root = os.fspath(root)
    files = entry["files"]
    rest = _cached_mesh(os.path.join(root, files["garment_rest"]))
    mean_fit = _cached_mesh(os.path.join(root, files["mean_fit"]))
    sim = _cached_mesh(os.path.join(root, files["sim"]))
    smooth_gt = read_offsets(os.path.join(root, files["smooth_gt"]))
    fine_gt = read_offsets(os.path.join(root, files["fine_gt"]))
    n = rest.n_vertices
    for name, arr in (("smooth_gt", smooth_gt), ("fine_gt", fine_gt)):
        if arr.shape[0] != n:
            raise ValueError(f"{entry['key']}: {name} has {arr.shape[0]} rows "
                             f"for a {n}-vertex garment")
    if sim.n_vertices != n:
        raise ValueError(f"{entry['key']}: sim mesh vertex count mismatch")
    design = np.zeros(3)
    if manifest is not None:
        design = np.asarray(manifest["designs"][entry["design_index"]]["p"],
                            dtype=np.float64)
    return DatasetSample(
        key=entry["key"], design=design,
        design_index=entry["design_index"],
        topology_index=entry["topology_index"],
        topology_seed=entry["topology_seed"],
        beta=entry["beta"], beta_index=entry["beta_index"],
        material=entry["material"], split=entry["split"],
        garment_rest=rest, mean_fit=mean_fit, sim_mesh=sim,
        smooth_gt=smooth_gt, fine_gt=fine_gt)


def design_targets(root, manifest) -> list:
    """(p, coarse mean-drape) training pairs for the dense first stage."""
    out = []
    for d in manifest["designs"]:
        if d["tbar"] is None:
            continue
        tbar = read_offsets(os.path.join(os.fspath(root), d["tbar"]))
        out.append((np.asarray(d["p"], dtype=np.float64), tbar))
    return out
