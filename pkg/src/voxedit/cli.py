"""Command-line interface.

Settings come from an optional INI file (``--config``) and are overridden
by explicit flags. Recognised sections and keys::

    [data]              count, seed, heldout
    [train.structure]   lr, steps, batch_size, cond_dropout, optimizer, weighting, seed
    [train.appearance]  (same keys)
    [flowedit]          steps, cfg_src, cfg_tgt, n_avg, gamma, eta, kappa, guidance
    [repaint]           steps, sigma_b, cfg
    [texture]           enabled, atlas_size, view_size, exponent
    [run]               workers, dump_every
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import bench, io
from .flowedit import FlowEditConfig
from .mesh import read_obj
from .repaint import RepaintConfig
from .texture import UvTexture, orbit_camera, render_view


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value.strip()


def _section_update(obj, parser: configparser.ConfigParser, section: str, renames=None):
    """Replace dataclass fields of ``obj`` with keys found in ``section``."""
    if not parser.has_section(section):
        return obj
    renames = renames or {}
    names = {f.name for f in fields(obj)}
    updates = {}
    for key, value in parser.items(section):
        name = renames.get(key, key)
        if name not in names:
            raise bench.ConfigError(f"unknown key {key!r} in [{section}]")
        updates[name] = _coerce(value, getattr(obj, name))
    return replace(obj, **updates)


def load_config(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise bench.ConfigError(f"config file {path} not found")
        parser.read(path)
    return parser


def pipeline_config(args, parser) -> bench.PipelineConfig:
    fe = _section_update(FlowEditConfig(), parser, "flowedit", {"guidance": "guidance_enabled"})
    rp = _section_update(RepaintConfig(), parser, "repaint")
    pipe = bench.PipelineConfig(flowedit=fe, repaint=rp)
    if parser.has_section("texture"):
        sec = parser["texture"]
        pipe = replace(
            pipe,
            texture=sec.getboolean("enabled", pipe.texture),
            atlas_size=sec.getint("atlas_size", pipe.atlas_size),
            view_size=sec.getint("view_size", pipe.view_size),
            fusion_exponent=sec.getfloat("exponent", pipe.fusion_exponent),
        )
    if parser.has_section("run"):
        pipe = replace(pipe, dump_every=parser["run"].getint("dump_every", pipe.dump_every))
    fe_over = {}
    if getattr(args, "steps", None) is not None:
        fe_over["steps"] = args.steps
    if args.cfg_tgt is not None:
        fe_over["cfg_tgt"] = args.cfg_tgt
    if args.n_avg is not None:
        fe_over["n_avg"] = args.n_avg
    if args.no_guidance:
        fe_over["guidance_enabled"] = False
    if getattr(args, "seed", None) is not None and args.command == "edit":
        # edit seeds are offsets added to each case's own seed
        fe_over["seed"] = args.seed
        pipe = replace(pipe, repaint=replace(pipe.repaint, seed=args.seed))
    pipe = replace(pipe, flowedit=replace(pipe.flowedit, **fe_over))
    if args.no_texture:
        pipe = replace(pipe, texture=False)
    if getattr(args, "dump_every", None) is not None:
        pipe = replace(pipe, dump_every=args.dump_every)
    return pipe


def train_config(which: str, args, parser, seed: int):
    base = bench.structure_train_config(seed=seed) if which == "structure" else bench.appearance_train_config(seed=seed)
    cfg = _section_update(base, parser, f"train.{which}")
    if getattr(args, "train_steps", None) is not None:
        cfg = replace(cfg, steps=args.train_steps)
    return cfg


def _seed(args, parser, section="data") -> int:
    if args.seed is not None:
        return args.seed
    return parser.getint(section, "seed", fallback=0) if parser.has_section(section) else 0


def _workers(args, parser) -> int:
    if args.workers is not None:
        return args.workers
    return parser.getint("run", "workers", fallback=1) if parser.has_section("run") else 1


def cmd_gen_data(args, parser):
    count = args.count if args.count is not None else parser.getint("data", "count", fallback=20)
    heldout = parser.getint("data", "heldout", fallback=10) if parser.has_section("data") else 10
    cases = bench.gen_data(count, _seed(args, parser), args.out, heldout)
    print(f"wrote {len(cases)} cases to {args.out}")


def cmd_train(args, parser):
    cfg = train_config(args.which, args, parser, _seed(args, parser, f"train.{args.which}"))
    summary = bench.train_model(args.data, args.which, cfg, args.out)
    print(json.dumps({k: summary[k] for k in ("which", "heldout_loss_initial", "heldout_loss_final")}, indent=2))


def _models(args, case=None):
    if args.oracle:
        return bench.oracle_models(case)
    return bench.load_models(args.structure, args.appearance)


def cmd_edit(args, parser):
    pipe = pipeline_config(args, parser)
    cases = bench.load_cases(args.data)
    if args.case:
        wanted = set(args.case)
        cases = [c for c in cases if c.case_id in wanted]
        if not cases:
            raise bench.ConfigError(f"no case matches {sorted(wanted)}")
    out = Path(args.out)
    if args.oracle:
        for case in cases:
            bench.edit_case(case, bench.oracle_models(case), pipe, out / case.case_id)
    else:
        bench.edit_cases(cases, _models(args), pipe, out, _workers(args, parser))
    report = bench.evaluate(out)
    bench.write_manifest(out)
    print(json.dumps(report["means"], indent=2))


def cmd_eval(args, parser):
    report = bench.evaluate(args.out)
    print(json.dumps({"n_cases": report["n_cases"], "n_ok": report["n_ok"], "means": report["means"]}, indent=2))


def cmd_render(args, parser):
    cam = orbit_camera(args.azimuth, args.elevation, args.extent)
    if args.grid:
        view = render_view(io.read_voxgrid(args.grid), cam, args.size)
    else:
        mesh = read_obj(args.obj)
        texture = None
        if args.texture:
            image = io.read_ppm(args.texture)
            texture = UvTexture(image, (image >= 0).all(axis=2))
        view = render_view(mesh, cam, args.size, texture=texture)
    io.write_ppm(args.out, view.image)
    print(f"wrote {args.out}")


def cmd_bench(args, parser):
    seed = _seed(args, parser)
    count = args.count if args.count is not None else parser.getint("data", "count", fallback=20)
    summary = bench.run_benchmark(
        args.out,
        count=count,
        seed=seed,
        structure_cfg=train_config("structure", args, parser, seed),
        appearance_cfg=train_config("appearance", args, parser, seed),
        pipeline=pipeline_config(args, parser),
        workers=_workers(args, parser),
    )
    print(json.dumps(summary, indent=2))


def _pipeline_flags(p):
    p.add_argument("--steps", type=int, help="FlowEdit sampling steps")
    p.add_argument("--cfg-tgt", type=float, help="target-branch CFG scale")
    p.add_argument("--n-avg", type=int, help="noise draws averaged per step")
    p.add_argument("--no-guidance", action="store_true", help="drop trajectory correction and silhouette guidance")
    p.add_argument("--no-texture", action="store_true", help="skip multi-view texture fusion")
    p.add_argument("--workers", type=int, help="parallel case workers")
    p.add_argument("--dump-every", type=int, help="write the edit state every k steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxedit", description="Guided flow-matching voxel editing toolkit.")
    parser.add_argument("--config", help="INI file with default settings")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write procedural edit cases")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the structure or appearance flow model")
    p.add_argument("--data", required=True)
    p.add_argument("--which", choices=("structure", "appearance"), required=True)
    p.add_argument("--steps", dest="train_steps", type=int, help="optimizer steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("edit", help="run the edit pipeline on dataset cases")
    p.add_argument("--data", required=True)
    p.add_argument("--structure", help="structure checkpoint")
    p.add_argument("--appearance", help="appearance checkpoint")
    p.add_argument("--oracle", action="store_true", help="use point-mass fields built from each case")
    p.add_argument("--case", action="append", help="case id (repeatable); default all")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _pipeline_flags(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="aggregate metrics of a run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a grid or OBJ mesh to a PPM image")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--grid")
    src.add_argument("--obj")
    p.add_argument("--texture", help="PPM texture for --obj")
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--extent", type=float, default=1.0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="data, training, both ablation arms and reports in one go")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-steps", type=int, help="override optimizer steps of both models")
    p.add_argument("--out", required=True)
    _pipeline_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args, load_config(args.config))
    except (bench.ConfigError, FileNotFoundError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
