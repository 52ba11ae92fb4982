"""Command-line entry point: ``uva <command> [options]``.

Settings come from dataclass defaults, then an optional YAML file (sections
``scene``, ``model``, ``train``, ``render``, ``paint``), then command-line
flags. Every dataclass key is addressable as ``--key-with-dashes``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .body_model import BodySpec, Pose
from .camera import Camera
from .config import ModelConfig, RenderSettings, TrainConfig, from_dict
from .images import load_mask, load_png, save_png
from .metrics import psnr, ssim

PAINT_KEYS = ("dilation", "iterations", "code_lr", "decoder_lr", "freeze_decoder", "distance_threshold",
              "batch_rays", "samples_per_ray", "seed")


class ConfigError(ValueError):
    pass


def _scene_fields():
    from .synth_data import SceneSpec

    out = {}
    for f in dataclasses.fields(SceneSpec):
        if f.name == "body":
            for b in dataclasses.fields(BodySpec):
                out[f"body_{b.name}"] = b.default
        else:
            out[f.name] = f.default
    return out


def _section_defaults() -> dict[str, dict]:
    from .editor import PaintJob

    paint = {f.name: f.default for f in dataclasses.fields(PaintJob) if f.name in PAINT_KEYS}
    return {
        "scene": _scene_fields(),
        "model": {f.name: f.default for f in dataclasses.fields(ModelConfig)},
        "train": {f.name: f.default for f in dataclasses.fields(TrainConfig)},
        "render": {f.name: f.default for f in dataclasses.fields(RenderSettings)},
        "paint": paint,
    }


COMMAND_SECTIONS = {
    "generate": ("scene",),
    "train": ("train", "model"),
    "render": ("render",),
    "eval": ("render",),
    "edit-geometry": (),
    "swap-texture": (),
    "paint-texture": ("paint",),
}


def load_config_file(path) -> dict[str, dict]:
    """Parse and validate a YAML config; unknown sections and keys are rejected by name."""
    doc = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    defaults = _section_defaults()
    for section, values in doc.items():
        if section not in defaults:
            raise ConfigError(f"unknown config key: {section}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section} must be a mapping")
        for key in values:
            if key not in defaults[section]:
                raise ConfigError(f"unknown config key: {section}.{key}")
    return doc


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_section_flags(p: argparse.ArgumentParser, section: str, seen: set) -> None:
    for key, default in _section_defaults()[section].items():
        if key in seen or key == "seed":
            continue
        seen.add(key)
        dest = f"{section}.{key}"
        if isinstance(default, bool):
            p.add_argument(_flag(key), dest=dest, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, tuple):
            p.add_argument(_flag(key), dest=dest, type=float, nargs=len(default), default=None)
        elif default is None or isinstance(default, float):
            p.add_argument(_flag(key), dest=dest, type=float, default=None)
        else:
            p.add_argument(_flag(key), dest=dest, type=type(default), default=None)


def resolve(args, sections) -> dict[str, dict]:
    """Merge defaults, file values and flags (flags win) per section."""
    doc = load_config_file(args.config) if args.config else {}
    merged = {}
    for section in sections:
        vals = dict(_section_defaults()[section])
        vals.update(doc.get(section, {}))
        for key in list(vals):
            flag_val = getattr(args, f"{section}.{key}", None)
            if flag_val is not None:
                vals[key] = tuple(flag_val) if isinstance(flag_val, list) else flag_val
        if args.seed is not None and "seed" in vals:
            vals["seed"] = args.seed
        if args.deterministic and section == "render":
            vals["stochastic"] = False
        merged[section] = vals
    return merged


def _scene_spec(vals: dict):
    from .synth_data import SceneSpec

    body = BodySpec(**{k[5:]: vals[k] for k in vals if k.startswith("body_")})
    return SceneSpec(body=body, **{k: v for k, v in vals.items() if not k.startswith("body_")})


def _load_pose(path) -> Pose:
    return Pose.from_dict(json.loads(Path(path).read_text()))


def _set_deterministic(on: bool) -> None:
    if on:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg):
    from .synth_data import generate_dataset

    ds = generate_dataset(_scene_spec(cfg["scene"]), args.out)
    n = sum(len(ds.split(s)) for s in ("train", "test_novel_view", "test_novel_pose"))
    print(f"wrote {n} frames to {args.out}")


def cmd_train(args, cfg):
    from .synth_data import Dataset
    from .trainer import fit, save_checkpoint

    tc = from_dict(TrainConfig, cfg["train"])
    mc = from_dict(ModelConfig, cfg["model"])
    state = fit(Dataset.load(args.data), tc, mc, log_path=args.log)
    save_checkpoint(state, args.out)
    print(f"trained {state.iteration} iterations; checkpoint {args.out}")


def cmd_render(args, cfg):
    from .renderer import render_image
    from .trainer import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    settings = from_dict(RenderSettings, cfg["render"])
    out = render_image(model, Camera.load(args.camera), _load_pose(args.pose), settings)
    save_png(args.out, out["image"])
    if args.alpha_out:
        save_png(args.alpha_out, out["alpha"])
    print(f"rendered {args.out}")


def cmd_eval(args, cfg):
    from .renderer import render_image
    from .synth_data import Dataset
    from .trainer import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    settings = from_dict(RenderSettings, cfg["render"])
    ds = Dataset.load(args.data)
    rows = []
    for fid in ds.split(args.split):
        fr = ds.frame(fid)
        img = render_image(model, fr.camera, fr.pose, settings)["image"]
        rows.append({"frame_id": fid, "psnr": psnr(img, fr.image), "ssim": ssim(img, fr.image)})
    report = {
        "checkpoint": str(args.checkpoint),
        "dataset": str(args.data),
        "split": args.split,
        "frames": len(rows),
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])) if rows else None,
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])) if rows else None,
        "lpips": None,
        "notes": "LPIPS not computed (needs a pretrained perceptual network).",
        "per_frame": rows,
    }
    prefix = Path(args.report)
    with open(prefix.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["frame_id", "psnr", "ssim"])
        w.writeheader()
        for r in rows:
            w.writerow({"frame_id": r["frame_id"], "psnr": f"{r['psnr']:.6f}", "ssim": f"{r['ssim']:.6f}"})
    prefix.with_suffix(".json").write_text(json.dumps(report, indent=1))
    if not rows:
        print(f"{args.split}: no frames in this split")
        return
    print(f"{args.split}: PSNR {report['mean_psnr']:.3f} dB, SSIM {report['mean_ssim']:.4f} over {len(rows)} frames")


def cmd_edit_geometry(args, cfg):
    from .editor import GeometryEdit, apply_geometry_edit
    from .trainer import load_checkpoint, save_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    edited = apply_geometry_edit(model, GeometryEdit.from_obj(args.obj))
    save_checkpoint(edited, args.out)
    print(f"edited geometry written to {args.out}")


def _selection_from_args(args, model):
    from .editor import NodeSelection, select_nodes_from_mask

    if args.nodes:
        return NodeSelection.from_json(args.nodes)
    if not (args.mask and args.camera and args.pose):
        raise ConfigError("give --nodes, or --mask with --camera and --pose")
    return select_nodes_from_mask(Camera.load(args.camera), _load_pose(args.pose), load_mask(args.mask), model,
                                  args.distance_threshold)


def cmd_swap(args, cfg):
    from .editor import swap_texture
    from .trainer import load_checkpoint, save_checkpoint

    target, _ = load_checkpoint(args.target)
    source, _ = load_checkpoint(args.source)
    sel = _selection_from_args(args, target)
    if args.nodes_out:
        sel.to_json(args.nodes_out)
    save_checkpoint(swap_texture(target, source, sel), args.out)
    print(f"swapped {len(sel)} nodes; checkpoint {args.out}")


def cmd_paint(args, cfg):
    from .editor import PaintJob, paint_texture
    from .trainer import load_checkpoint, save_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    p = dict(cfg["paint"])
    for k in ("dilation", "iterations", "batch_rays", "samples_per_ray", "seed"):
        p[k] = int(p[k])
    job = PaintJob(Camera.load(args.camera), _load_pose(args.pose), load_png(args.reference)[..., :3],
                   load_mask(args.mask), **p)
    edited, sel = paint_texture(model, job)
    if args.nodes_out:
        sel.to_json(args.nodes_out)
    save_checkpoint(edited, args.out)
    print(f"painted {len(sel)} nodes; checkpoint {args.out}")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "edit-geometry": cmd_edit_geometry,
    "swap-texture": cmd_swap,
    "paint-texture": cmd_paint,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uva", description="Volumetric avatar pipeline.")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int, default=None, help="override every seed key")
    parser.add_argument("--deterministic", action="store_true", help="deterministic sampling and kernels")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        seen: set = set()
        for section in COMMAND_SECTIONS[name]:
            _add_section_flags(p, section, seen)
        return p

    p = add("generate", "render the synthetic dataset")
    p.add_argument("--out", required=True)
    p = add("train", "fit an avatar to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="CSV training log")
    p = add("render", "render a checkpoint for a camera and pose")
    for k in ("checkpoint", "camera", "pose", "out"):
        p.add_argument(f"--{k}", required=True)
    p.add_argument("--alpha-out")
    p = add("eval", "PSNR/SSIM report over a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test_novel_view", choices=["train", "test_novel_view", "test_novel_pose"])
    p.add_argument("--report", required=True, help="output prefix; writes .csv and .json")
    p = add("edit-geometry", "replace canonical anchors with an edited OBJ")
    for k in ("checkpoint", "obj", "out"):
        p.add_argument(f"--{k}", required=True)
    p = add("swap-texture", "swap appearance from a source avatar")
    for k in ("target", "source", "out"):
        p.add_argument(f"--{k}", required=True)
    p.add_argument("--nodes", help="JSON node selection")
    p.add_argument("--mask")
    p.add_argument("--camera")
    p.add_argument("--pose")
    p.add_argument("--distance-threshold", type=float, default=0.02)
    p.add_argument("--nodes-out")
    p = add("paint-texture", "fine-tune codes toward a painted reference")
    for k in ("checkpoint", "camera", "pose", "reference", "mask", "out"):
        p.add_argument(f"--{k}", required=True)
    p.add_argument("--nodes-out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args, COMMAND_SECTIONS[args.command])
        _set_deterministic(args.deterministic)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, KeyError) as exc:
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
