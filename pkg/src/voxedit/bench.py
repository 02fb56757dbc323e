"""End-to-end benchmark: dataset, training, the edit pipeline and metrics."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import io, shapes
from .cases import EditCase, appearance_field, color_thumbnail, make_case
from .flow import AnalyticPointMass, Condition, MlpModel, ResampledModel, TrainConfig, evaluate_loss, train
from .flowedit import FlowEditConfig, flowedit_run
from .latent import decode, downsample_avg, downsample_mask, encode, feather
from .mesh import TriMesh, atlas_uv, export_obj, marching_cubes
from .repaint import RepaintConfig, build_feature_mask, repaint_run
from .silhouette import pool_raster, render_silhouette, silhouette_energy, silhouette_mask
from .texture import auxiliary_cameras, bake_texture, front_camera, fuse_texture, render_view, texel_samples

log = logging.getLogger(__name__)

RESOLUTION = 32
COND_SIZE = 16
FACTOR = 2
FEATURE_DIM = 4
HELDOUT_OFFSET = 500


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    flowedit: FlowEditConfig = field(default_factory=FlowEditConfig)
    repaint: RepaintConfig = field(default_factory=RepaintConfig)
    texture: bool = True
    atlas_size: int = 512
    view_size: int = 128
    fusion_exponent: float = 2.0
    mask_dilation: int = 1
    dump_every: int = 0


def structure_train_config(**overrides) -> TrainConfig:
    base = dict(lr=1e-3, steps=2000, batch_size=32, optimizer="adam", weighting="clean")
    return TrainConfig(**{**base, **overrides})


def appearance_train_config(**overrides) -> TrainConfig:
    base = dict(lr=1e-3, steps=1000, batch_size=32, optimizer="adam", weighting="clean")
    return TrainConfig(**{**base, **overrides})


# ---------------------------------------------------------------- dataset


def case_seed(seed: int, index: int) -> int:
    return 1000 * (seed + 1) + index


def structure_condition(grid: np.ndarray) -> np.ndarray:
    return pool_raster(silhouette_mask(grid), COND_SIZE)


def appearance_condition(spec: shapes.ShapeSpec, grid: np.ndarray) -> np.ndarray:
    return color_thumbnail(appearance_field(spec, grid.shape[0]), grid, COND_SIZE)


def _write_case(case: EditCase, case_dir: Path):
    case_dir.mkdir(parents=True, exist_ok=True)
    (case_dir / "case.txt").write_text(case.dumps(), encoding="ascii")
    for name, spec in (("source", case.source), ("target", case.target)):
        grid = shapes.rasterize(spec, RESOLUTION)
        io.write_voxgrid(case_dir / f"{name}.voxgrid", grid)
        io.write_pgm16(case_dir / f"{name}_cond.pgm", structure_condition(grid))
    io.write_voxgrid(case_dir / "mask.voxgrid", case.mask(RESOLUTION))


def gen_data(count: int, seed: int, out, heldout: int = 10) -> list[EditCase]:
    """Write ``count`` benchmark cases (plus ``heldout`` extra ones) under ``out``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    out = Path(out)
    cases = []
    for i in range(count):
        case = make_case(f"case{i:03d}", case_seed(seed, i), R=RESOLUTION)
        _write_case(case, out / "cases" / case.case_id)
        cases.append(case)
    for i in range(heldout):
        case = make_case(f"held{i:03d}", case_seed(seed, HELDOUT_OFFSET + i), R=RESOLUTION)
        _write_case(case, out / "heldout" / case.case_id)
    return cases


def load_cases(data_dir, split: str = "cases") -> list[EditCase]:
    root = Path(data_dir) / split
    if not root.is_dir():
        raise ConfigError(f"no {split} directory in {data_dir}")
    return [EditCase.loads((d / "case.txt").read_text(encoding="ascii")) for d in sorted(root.iterdir()) if d.is_dir()]


def training_arrays(cases: list[EditCase], which: str):
    """Reduced latents and flat condition rasters for every source and target shape."""
    X, C = [], []
    for case in cases:
        for spec in (case.source, case.target):
            grid = shapes.rasterize(spec, RESOLUTION)
            if which == "structure":
                X.append(downsample_avg(encode(grid), FACTOR).ravel())
                C.append(structure_condition(grid).ravel())
            elif which == "appearance":
                X.append(downsample_avg(appearance_field(spec, RESOLUTION), FACTOR).ravel())
                C.append(appearance_condition(spec, grid).ravel())
            else:
                raise ValueError(f"unknown model kind {which!r}")
    return np.array(X), np.array(C)


def new_model(which: str, seed: int = 0) -> MlpModel:
    r = RESOLUTION // FACTOR
    if which == "structure":
        return MlpModel((r, r, r), COND_SIZE**2, hidden=256, in_scale=0.125, seed=seed)
    if which == "appearance":
        return MlpModel((r, r, r, FEATURE_DIM), 3 * COND_SIZE**2, hidden=128, in_scale=1.0, seed=seed)
    raise ValueError(f"unknown model kind {which!r}")


def train_model(data_dir, which: str, config: TrainConfig, out) -> dict:
    """Train one toy flow model and save it; returns the training summary."""
    cases = load_cases(data_dir)
    if not cases:
        raise ConfigError(f"dataset {data_dir} is empty")
    X, C = training_arrays(cases, which)
    held = load_cases(data_dir, "heldout") if (Path(data_dir) / "heldout").is_dir() else cases
    Xh, Ch = training_arrays(held, which)
    model = new_model(which, config.seed)

    def held_loss(m):
        return evaluate_loss(m, Xh, Ch, seed=config.seed + 1, draws=8, weighting=config.weighting)

    baseline = held_loss(model)
    state = train(model, X, C, config, log=lambda s, l: log.info("%s step %d loss %.4g", which, s, l))
    final = held_loss(model)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.save_checkpoint(out, ResampledModel(model, FACTOR))
    summary = {
        "which": which,
        "config": asdict(config),
        "heldout_loss_initial": baseline,
        "heldout_loss_final": final,
        "loss_every_100": state.losses[::100],
    }
    out.with_suffix(".json").write_text(json.dumps(summary, indent=2) + "\n", encoding="ascii")
    return summary


# ---------------------------------------------------------------- pipeline


def nearest_active_colors(features: np.ndarray, active: np.ndarray):
    """Colour lookup at surface points: the active voxel nearest to a point half a voxel inside."""
    R = active.shape[0]
    active = np.asarray(active) > 0
    if not active.any():
        return lambda p, n: np.zeros((len(p), 3))
    _, nearest = ndimage.distance_transform_edt(~active, return_indices=True)
    rgb = np.clip(features[..., :3], 0.0, 1.0)

    def lookup(points, normals):
        q = np.clip(np.floor((points - normals * (0.5 / R)) * R).astype(int), 0, R - 1)
        i, j, k = (nearest[a, q[:, 0], q[:, 1], q[:, 2]] for a in range(3))
        return rgb[i, j, k]

    return lookup


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def chamfer(a: np.ndarray, b: np.ndarray) -> float | None:
    """Symmetric mean nearest-neighbour distance; ``None`` if exactly one cloud is empty."""
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return None
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(0.5 * (da.mean() + db.mean()))


@dataclass
class Models:
    structure: object
    appearance: object
    oracle: bool = False


def oracle_models(case: EditCase) -> Models:
    """Point-mass fields whose source and target anchors are the case's own latents."""
    src = shapes.rasterize(case.source, RESOLUTION)
    tgt = shapes.rasterize(case.target, RESOLUTION)
    structure = AnalyticPointMass({"source": encode(src), "target": encode(tgt), "null": encode(src)})
    app_tgt = appearance_field(case.target, RESOLUTION)
    appearance = AnalyticPointMass({"target": app_tgt, "null": app_tgt})
    return Models(structure, appearance, oracle=True)


def load_models(structure_path, appearance_path) -> Models:
    for p in (structure_path, appearance_path):
        if p is None or not Path(p).exists():
            raise ConfigError(f"missing checkpoint {p}")
    return Models(io.load_checkpoint(structure_path), io.load_checkpoint(appearance_path))


def edit_case(case: EditCase, models: Models, config: PipelineConfig, out_dir) -> dict:
    """Run structure edit, repaint, meshing and texture fusion for one case.

    Writes every artifact to ``out_dir`` and returns the metrics row.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now

    R = RESOLUTION
    src_grid = shapes.rasterize(case.source, R)
    tgt_grid = shapes.rasterize(case.target, R)
    mesh_mask = case.mask(R)
    x_src0 = encode(src_grid)
    latent_mask = downsample_mask(mesh_mask, R, config.mask_dilation)
    cond_src = Condition(raster=structure_condition(src_grid), label="source")
    cond_tgt = Condition(raster=structure_condition(tgt_grid), label="target")
    target_sil = render_silhouette(encode(tgt_grid), config.flowedit.kappa)

    dumps = []

    def dump(step, t, x):
        if config.dump_every and step % config.dump_every == 0:
            dumps.append(io.write_voxgrid(out / f"trajectory_{step:03d}.voxgrid", decode(x)))

    fe_config = replace(config.flowedit, seed=case.seed + config.flowedit.seed)
    if models.oracle:
        fe_config = replace(fe_config, cfg_src=1.0, cfg_tgt=1.0)
    x_edit = flowedit_run(models.structure, x_src0, latent_mask, cond_src, cond_tgt, target_sil, fe_config, dump)
    occupancy = decode(x_edit)
    active = occupancy > 0.5
    io.write_voxgrid(out / "edited.voxgrid", occupancy)
    rendered_sil = render_silhouette(x_edit, fe_config.kappa)
    io.write_pgm16(out / "silhouette.pgm", rendered_sil)
    lap("structure")

    z_src = appearance_field(case.source, R)
    _, feat_mask = build_feature_mask(mesh_mask, active, config.repaint.sigma_b, config.mask_dilation)
    app_cond = Condition(raster=appearance_condition(case.target, tgt_grid), label="target")
    rp_config = replace(config.repaint, seed=case.seed + config.repaint.seed)
    if models.oracle:
        rp_config = replace(rp_config, cfg=1.0)
    slat = repaint_run(z_src, feat_mask, models.appearance, app_cond, rp_config, activity=active)
    io.write_slatf(out / "edited.slatf", slat.features, slat.activity)
    lap("repaint")

    mesh = marching_cubes(occupancy)
    target_mesh = marching_cubes(tgt_grid)
    texture_err = None
    if mesh.n_faces:
        mesh = atlas_uv(mesh, config.atlas_size)
        samples = texel_samples(mesh, config.atlas_size)
        texture = bake_texture(mesh, config.atlas_size, nearest_active_colors(slat.features, active), samples)
        target_colors = nearest_active_colors(appearance_field(case.target, R), tgt_grid > 0.5)
        if config.texture:
            views = [
                render_view(mesh, cam, config.view_size, color_fn=target_colors, shade=False)
                for cam in auxiliary_cameras()
            ]
            soft_mask = feather(mesh_mask, config.repaint.sigma_b)
            texture = fuse_texture(mesh, views, soft_mask, texture, config.fusion_exponent, samples=samples)
        _, points, normals = samples
        texture_err = float(np.abs(texture.image[texture.valid] - target_colors(points, normals)).mean())
        export_obj(mesh, texture.image, out / "mesh")
        preview = render_view(mesh, front_camera(), config.view_size, texture=texture)
    else:
        export_obj(mesh, None, out / "mesh")
        preview = render_view(mesh, front_camera(), config.view_size)
    io.write_ppm(out / "preview.ppm", preview.image)
    lap("mesh_texture")

    outside = mesh_mask == 0
    row = {
        "case_id": case.case_id,
        "kind": case.kind,
        "status": "ok",
        "guidance": fe_config.guidance_enabled,
        "texture": config.texture,
        "silhouette_iou": iou(rendered_sil >= 0.5, target_sil >= 0.5),
        "preservation_iou": iou(active[outside], src_grid[outside] > 0.5),
        "chamfer": chamfer(mesh.vertices, target_mesh.vertices),
        "e_sil": silhouette_energy(x_edit, target_sil, fe_config.kappa),
        "texture_error": texture_err,
    }
    (out / "metrics.json").write_text(json.dumps(row, indent=2) + "\n", encoding="ascii")
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n", encoding="ascii")
    return row


def _edit_job(args):
    case, models, config, out_dir = args
    return edit_case(case, models, config, out_dir)


def edit_cases(cases, models: Models, config: PipelineConfig, out, workers: int = 1) -> list[dict]:
    out = Path(out)
    jobs = [(c, models, config, out / c.case_id) for c in cases]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_edit_job, jobs))
    return [_edit_job(j) for j in jobs]


# ---------------------------------------------------------------- reports


METRIC_KEYS = ("silhouette_iou", "preservation_iou", "chamfer", "e_sil", "texture_error")


def evaluate(run_dir) -> dict:
    """Aggregate per-case metrics rows in case-id order into ``report.json``."""
    run_dir = Path(run_dir)
    rows = []
    for case_dir in sorted(d for d in run_dir.iterdir() if d.is_dir()):
        path = case_dir / "metrics.json"
        if path.exists():
            rows.append(json.loads(path.read_text(encoding="ascii")))
        else:
            rows.append({"case_id": case_dir.name, "status": "failed"})
    ok = [r for r in rows if r.get("status") == "ok"]
    if not ok:
        raise ValueError(f"no completed cases in {run_dir}")
    means = {}
    for key in METRIC_KEYS:
        values = [r[key] for r in ok if r.get(key) is not None]
        means[key] = float(np.mean(values)) if values else None
    report = {"n_cases": len(rows), "n_ok": len(ok), "means": means, "cases": rows}
    (run_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="ascii")
    return report


VOLATILE = ("timings.json", "manifest.json")


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(root) -> dict:
    """Content hash of every file under ``root``; wall-clock files are flagged volatile."""
    root = Path(root)
    entries = []
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel == "manifest.json":
            continue
        entries.append({"path": rel, "sha256": sha256(path), "bytes": path.stat().st_size, "volatile": path.name in VOLATILE})
    manifest = {"files": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="ascii")
    return manifest


def stable_hashes(manifest: dict) -> dict[str, str]:
    return {e["path"]: e["sha256"] for e in manifest["files"] if not e["volatile"]}


def run_benchmark(out, count: int = 20, seed: int = 0, structure_cfg=None, appearance_cfg=None, pipeline=None, workers: int = 1) -> dict:
    """Generate data, train both models, run guided and unguided arms, evaluate."""
    out = Path(out)
    pipeline = pipeline or PipelineConfig()
    structure_cfg = structure_cfg or structure_train_config(seed=seed)
    appearance_cfg = appearance_cfg or appearance_train_config(seed=seed)
    timings = {}
    t0 = time.perf_counter()
    gen_data(count, seed, out / "data")
    timings["gen_data"] = time.perf_counter() - t0
    summaries = {}
    for which, cfg in (("structure", structure_cfg), ("appearance", appearance_cfg)):
        t0 = time.perf_counter()
        summaries[which] = train_model(out / "data", which, cfg, out / "models" / f"{which}.vflow")
        timings[f"train_{which}"] = time.perf_counter() - t0
    models = load_models(out / "models" / "structure.vflow", out / "models" / "appearance.vflow")
    cases = load_cases(out / "data")
    reports = {}
    for arm, guided in (("guided", True), ("unguided", False)):
        t0 = time.perf_counter()
        cfg = replace(pipeline, flowedit=replace(pipeline.flowedit, guidance_enabled=guided))
        edit_cases(cases, models, cfg, out / "runs" / arm, workers)
        reports[arm] = evaluate(out / "runs" / arm)
        timings[f"edit_{arm}"] = time.perf_counter() - t0
    g, u = reports["guided"]["means"], reports["unguided"]["means"]
    summary = {
        "training": {k: {"heldout_loss_initial": v["heldout_loss_initial"], "heldout_loss_final": v["heldout_loss_final"]} for k, v in summaries.items()},
        "guided": g,
        "unguided": u,
        "iou_gain": g["silhouette_iou"] - u["silhouette_iou"],
        "e_sil_drop": u["e_sil"] - g["e_sil"],
    }
    (out / "ablation.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="ascii")
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n", encoding="ascii")
    write_manifest(out)
    return summary
