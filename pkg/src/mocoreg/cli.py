"""Command-line entry points: register, simulate, track, evaluate, phantom.

Exit codes: 0 success, 2 input error (unreadable file, bad container or
config), 3 solver failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io as mio
from .config import RunConfig, set_threads
from .errors import ConfigError, FormatError, MocoError
from .evaluation import CaseResult, evaluate_run, get_regime, sample_motion
from .geometry import RigidTransform
from .phantom import make_phantom
from .pipeline import joint_register, track_sequence
from .rigid_solver import ModalityPair
from .volume import Mask3, resample_mask, resample_rigid

log = logging.getLogger("mocoreg")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 2, 3


class InputError(Exception):
    pass


def _out(prefix: str, suffix: str) -> Path:
    p = Path(prefix)
    return p.with_name(p.name + suffix)


def _ensure_parent(prefix) -> None:
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)


def _run_config(args, **overrides) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    return cfg.updated(**overrides)


def _load_inputs(paths: dict):
    out = {}
    for key, path in paths.items():
        if path is None:
            out[key] = None
        elif key.endswith("mask"):
            out[key] = mio.read_mask(path)
        else:
            out[key] = mio.read_volume(path)
            if isinstance(out[key], Mask3):
                out[key] = out[key].as_volume()
    return out


# -- commands -----------------------------------------------------------------


def cmd_register(args) -> int:
    cfg = _run_config(args, source=args.source, target=args.target, source_mask=args.source_mask,
                      target_mask=args.target_mask, out_prefix=args.out_prefix)
    if cfg.source is None or cfg.target is None or cfg.out_prefix is None:
        raise ConfigError("register needs source, target and out_prefix (flags or config keys)")
    if args.no_deformation:
        cfg = cfg.updated(deformation=False)
    set_threads(cfg.threads)
    vols = _load_inputs({"source": cfg.source, "target": cfg.target,
                         "source_mask": cfg.source_mask, "target_mask": cfg.target_mask})
    try:
        pair = ModalityPair.build(vols["source"], vols["target"], vols["source_mask"], vols["target_mask"],
                                  normalize=cfg.normalize, shape_sigma_vox=cfg.shape_sigma_vox,
                                  smooth_mm=cfg.smooth_mm)
    except MocoError as exc:
        raise InputError(str(exc)) from None
    result = joint_register(pair, cfg.joint_config())

    prefix = cfg.out_prefix
    _ensure_parent(prefix)
    outputs = {"warped": str(_out(prefix, "_warped.mvol"))}
    mio.write_volume(outputs["warped"], result.warp_source(vols["source"]))
    if vols["source_mask"] is not None:
        outputs["warped_mask"] = str(_out(prefix, "_warped_mask.mvol"))
        mio.write_volume(outputs["warped_mask"], result.warp_mask(vols["source_mask"]))
    ops = cfg.joint_config().shooting.operators(pair.grid.dims)
    for name, sol in (("image", result.deform_image), ("shape", result.deform_shape)):
        if sol is not None:
            outputs[f"velocity_{name}"] = str(_out(prefix, f"_{name}.bvel"))
            mio.write_velocity(outputs[f"velocity_{name}"], sol.v0, ops)
            outputs[f"diagnostics_{name}"] = str(_out(prefix, f"_{name}_diag.json"))
            mio.write_json(outputs[f"diagnostics_{name}"], sol.diagnostics())
    outputs["result"] = str(_out(prefix, ".json"))
    body = result.to_dict()
    body["solver_config"] = body.pop("config")
    doc = {
        "command": "register",
        "config": cfg.to_dict(),
        "pivot_mm": pair.grid.center.tolist(),
        "outputs": outputs,
        **body,
    }
    mio.write_json(outputs["result"], doc)
    print(outputs["result"])
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _run_config(args, regime=args.regime, seed=args.seed, out_prefix=args.out_prefix)
    set_threads(cfg.threads)
    vol = _load_inputs({"input": args.input})["input"]
    regime = get_regime(cfg.regime)
    pivot = vol.grid.center
    truth = sample_motion(regime, pivot, np.random.default_rng(cfg.seed))
    prefix = cfg.out_prefix
    _ensure_parent(prefix)
    outputs = {"moved": str(_out(prefix, ".mvol"))}
    mio.write_volume(outputs["moved"], resample_rigid(vol, truth))
    if args.input_mask:
        mask = mio.read_mask(args.input_mask)
        outputs["moved_mask"] = str(_out(prefix, "_mask.mvol"))
        mio.write_volume(outputs["moved_mask"], resample_mask(mask, truth))
    outputs["truth"] = str(_out(prefix, "_truth.json"))
    doc = {
        "command": "simulate",
        "config": cfg.to_dict(),
        "input": str(args.input),
        "regime": regime.to_dict(),
        "seed": cfg.seed,
        "pivot_mm": pivot.tolist(),
        # registering the input (source) onto the moved volume (target) recovers this
        "transform": truth.to_dict(),
        "outputs": outputs,
    }
    mio.write_json(outputs["truth"], doc)
    print(outputs["truth"])
    return EXIT_OK


def _frame_files(directory: Path) -> tuple[list, list]:
    if not directory.is_dir():
        raise FileNotFoundError(f"frames directory not found: {directory}")
    files = sorted(p for p in directory.glob("*.mvol") if not p.stem.endswith("_mask"))
    masks = [p.with_name(p.stem + "_mask.mvol") for p in files]
    if not all(m.exists() for m in masks):
        masks = []
    return files, masks


def cmd_track(args) -> int:
    cfg = _run_config(args, out_prefix=args.out_prefix)
    if args.deformation:
        cfg = cfg.updated(deformation=True)
    elif not args.config:
        cfg = cfg.updated(deformation=False)
    set_threads(cfg.threads)
    files, mask_files = _frame_files(Path(args.frames_dir))
    if len(files) < 2:
        raise InputError(f"{args.frames_dir}: need at least 2 .mvol frames, found {len(files)}")
    frames = [_load_inputs({"f": f})["f"] for f in files]
    masks = [mio.read_mask(m) for m in mask_files] or None
    smooth = None if args.smooth_mm is None else float(args.smooth_mm)
    result = track_sequence(frames, masks, cfg.joint_config(), normalize=cfg.normalize, smooth_mm=smooth)
    prefix = cfg.out_prefix
    _ensure_parent(prefix)
    doc = {"command": "track", "config": cfg.to_dict(), "frames": [str(f) for f in files],
           "smooth_mm": smooth, "pivot_mm": frames[0].grid.center.tolist()}
    body = result.to_dict()
    body["solver_config"] = body.pop("config")
    doc["sequence"] = body
    out = _out(prefix, ".json")
    mio.write_json(out, doc)
    if args.write_corrected:
        cdir = _out(prefix, "_corrected")
        cdir.mkdir(parents=True, exist_ok=True)
        for f, v in zip(files, result.corrected(frames)):
            mio.write_volume(cdir / f.name, v)
    print(out)
    return EXIT_OK if not result.failures else EXIT_SOLVER


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None


def _case_files(spec: str, suffix: str) -> dict:
    """Map case id to JSON file from a directory (stripping ``suffix``) or a single file."""
    p = Path(spec)
    if p.is_dir():
        files = sorted(p.glob("*.json"))
    elif p.exists():
        files = [p]
    else:
        raise FileNotFoundError(f"not found: {p}")
    out = {}
    for f in files:
        cid = f.stem[: -len(suffix)] if suffix and f.stem.endswith(suffix) else f.stem
        out[cid] = f
    return out


def cmd_evaluate(args) -> int:
    cfg = _run_config(args, out_prefix=args.out_prefix)
    truth_files = _case_files(args.truths, "_truth")
    result_files = _case_files(args.results, "")
    truths, pivots, regimes = {}, {}, {}
    for cid, f in truth_files.items():
        doc = _read_json(f)
        if doc.get("command") != "simulate":
            continue
        truths[cid] = RigidTransform.from_dict(doc["transform"])
        pivots[cid] = tuple(doc.get("pivot_mm", (0.0, 0.0, 0.0)))
        regimes[cid] = doc.get("regime", {}).get("name", "")
    results, masks = {}, {}
    for cid, f in result_files.items():
        doc = _read_json(f)
        if doc.get("command") != "register":
            continue
        pred_mask = None
        warped = doc.get("outputs", {}).get("warped_mask")
        if args.masks and warped:
            ref = Path(args.masks) / f"{cid}_mask.mvol"
            if ref.exists():
                pred_mask = mio.read_mask(warped)
                masks[cid] = mio.read_mask(ref)
        wall = doc.get("wall_time", {})
        results[cid] = CaseResult(
            RigidTransform.from_dict(doc["transform"]),
            regime=regimes.get(cid, ""),
            pred_mask=pred_mask,
            pivot=pivots.get(cid, tuple(doc.get("pivot_mm", (0.0, 0.0, 0.0)))),
            wall_time_s=float(sum(v for v in wall.values() if isinstance(v, (int, float)))) or None,
        )
    report = evaluate_run(results, truths, masks)
    _ensure_parent(cfg.out_prefix)
    csv_path, json_path = report.write(cfg.out_prefix)
    if report.unmatched:
        print(f"warning: unmatched case ids: {', '.join(report.unmatched)}", file=sys.stderr)
    print(csv_path)
    print(json_path)
    return EXIT_OK


def cmd_phantom(args) -> int:
    dims = tuple(args.dims) * 3 if len(args.dims) == 1 else tuple(args.dims)
    if len(dims) != 3 or min(dims) < 4:
        raise ConfigError("--dims takes one or three integers >= 4")
    vol, mask = make_phantom(args.kind, dims, args.spacing, args.seed)
    _ensure_parent(args.out_prefix)
    vpath, mpath = _out(args.out_prefix, ".mvol"), _out(args.out_prefix, "_mask.mvol")
    mio.write_volume(vpath, vol)
    mio.write_volume(mpath, mask)
    print(vpath)
    print(mpath)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="bound internal parallelism (default: MOCOREG_THREADS or 1)")
    common.add_argument("--config", default=None, help="flat JSON or TOML run configuration")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mocoreg", description="Rigid and deformable motion correction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", parents=[common], help="register a source volume onto a target")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--source-mask")
    p.add_argument("--target-mask")
    p.add_argument("--out-prefix")
    p.add_argument("--no-deformation", action="store_true", help="rigid alignment only")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("simulate", parents=[common], help="apply a seeded random rigid motion")
    p.add_argument("--input", required=True)
    p.add_argument("--input-mask")
    p.add_argument("--regime", choices=sorted(["small", "medium", "large"]))
    p.add_argument("--seed", type=int)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", parents=[common], help="chain frame-to-frame registrations")
    p.add_argument("--frames-dir", required=True, help="directory of .mvol frames, sorted by name")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--smooth-mm", type=float, default=None, help="pre-smoothing (default two voxels)")
    p.add_argument("--deformation", action="store_true", help="also solve deformations per link")
    p.add_argument("--write-corrected", action="store_true")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("evaluate", parents=[common], help="score register results against truths")
    p.add_argument("--results", required=True, help="register result JSON file or directory")
    p.add_argument("--truths", required=True, help="simulate truth JSON file or directory")
    p.add_argument("--masks", help="directory of reference masks named <case>_mask.mvol (as written by simulate)")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic volume and its mask")
    p.add_argument("--kind", choices=["sphere", "blobs"], default="blobs")
    p.add_argument("--dims", type=int, nargs="+", default=[64])
    p.add_argument("--spacing", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_phantom)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        t0 = time.perf_counter()
        code = args.func(args)
        log.info("%s finished in %.2f s", args.command, time.perf_counter() - t0)
        return code
    except (FileNotFoundError, FormatError, ConfigError, InputError) as exc:
        print(f"mocoreg {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MocoError as exc:
        print(f"mocoreg {args.command}: solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"mocoreg {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        set_threads(None)


if __name__ == "__main__":
    sys.exit(main())
