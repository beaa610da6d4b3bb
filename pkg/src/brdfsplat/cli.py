"""Command-line interface: generate / train / render / relight / edit / eval / check-grads."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .control import ControlConfig
from .data import (
    Dataset, load_dataset, render_outputs_to_disk, visual_hull_init,
)
from .grad import check_gradients, random_scene
from .losses import LossConfig
from .metrics import evaluate
from .optim import TrainConfig
from .pfm import write_pfm
from .render import RasterConfig, render_view
from .scene import (
    BasisSet, PointLight, load_checkpoint, resize_weight_vectors, save_checkpoint,
)
from .synthetic import SCENES, generate_synthetic
from .train import train

logger = logging.getLogger("brdfsplat")

_FLAG_TYPES = (int, float, str, bool)


def _add_dataclass_args(parser: argparse.ArgumentParser, dc_type, group_name: str) -> None:
    group = parser.add_argument_group(group_name)
    for f in dataclasses.fields(dc_type):
        if f.type in ("int", "float", "str", "bool") or isinstance(f.default, _FLAG_TYPES):
            flag = "--" + f.name.replace("_", "-")
            if isinstance(f.default, bool):
                group.add_argument(flag, default=None, action=argparse.BooleanOptionalAction,
                                   help=f"{group_name}.{f.name} (default {f.default})")
            else:
                group.add_argument(flag, type=type(f.default), default=None,
                                   help=f"{group_name}.{f.name} (default {f.default})")


def _build_config(dc_type, args: argparse.Namespace, file_section: dict):
    values = dict(file_section)
    for f in dataclasses.fields(dc_type):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    known = {f.name for f in dataclasses.fields(dc_type)}
    unknown = set(values) - known
    if unknown:
        raise SystemExit(f"unknown config keys for {dc_type.__name__}: {sorted(unknown)}")
    return dc_type(**values)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _parse_vec3(text: str) -> list[float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 comma-separated floats, got '{text}'")
    return parts


def _setup(args: argparse.Namespace) -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None):
        torch.set_num_threads(args.threads)


def cmd_generate(args: argparse.Namespace) -> int:
    _setup(args)
    if args.scene not in SCENES:
        raise SystemExit(f"unknown scene '{args.scene}'; available: {sorted(SCENES)}")
    spec = SCENES[args.scene]()
    train_manifest, test_manifest = generate_synthetic(
        spec, args.train_views, args.test_views, args.resolution, args.seed, args.out
    )
    print(f"wrote {train_manifest}")
    print(f"wrote {test_manifest}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    _setup(args)
    cfg_file = _load_config_file(args.config)
    train_cfg = _build_config(TrainConfig, args, cfg_file.get("train", {}))
    loss_cfg = _build_config(LossConfig, args, cfg_file.get("loss", {}))
    control_cfg = _build_config(ControlConfig, args, cfg_file.get("control", {}))
    raster_cfg = _build_config(RasterConfig, args, cfg_file.get("raster", {}))
    if args.no_sparsity:
        train_cfg = dataclasses.replace(train_cfg, enable_sparsity=False)
    if args.no_control:
        train_cfg = dataclasses.replace(train_cfg, enable_control=False)
    if args.no_specular_weight:
        train_cfg = dataclasses.replace(train_cfg, enable_specular_weight=False)

    dataset = load_dataset(args.data)
    if dataset.points is not None:
        points = dataset.points
    else:
        if dataset.bounds is None:
            raise SystemExit("dataset has neither an initial point cloud nor bounds")
        points = visual_hull_init(
            dataset.views, train_cfg.n_init_points, dataset.bounds, train_cfg.seed
        )
    result = train(dataset.views, points, train_cfg, loss_cfg, control_cfg, raster_cfg, args.out)
    print(f"final checkpoint: {result.checkpoint}")
    print(f"loss log: {result.loss_csv}")
    return 0


def _render_one(args, light_position=None, light_intensity=None):
    cloud, basis, _, extra = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    if not 0 <= args.view < len(dataset.views):
        raise SystemExit(f"view {args.view} out of range (0..{len(dataset.views) - 1})")
    view = dataset.views[args.view]
    light = view.light
    if light_position is not None:
        light = PointLight(
            position=torch.tensor(light_position, dtype=torch.float64),
            intensity=torch.tensor(light_intensity, dtype=torch.float64)
            if light_intensity is not None else view.light.intensity,
        )
    temperature = extra.get("temperature", 0.0125)
    with torch.no_grad():
        out = render_view(cloud, basis, view.camera, light, temperature, RasterConfig())
    return cloud, basis, view, out


def cmd_render(args: argparse.Namespace) -> int:
    _setup(args)
    light_pos = _parse_vec3(args.light) if args.light else None
    cloud, basis, view, out = _render_one(args, light_pos)
    written = render_outputs_to_disk(out, args.out, stem=f"view_{args.view:03d}")
    from .data import write_basis_swatches

    written += write_basis_swatches(basis, args.out)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def cmd_relight(args: argparse.Namespace) -> int:
    _setup(args)
    with open(args.trajectory) as f:
        traj = json.load(f)
    positions = traj["light_positions"]
    intensity = traj.get("light_intensity")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, pos in enumerate(positions):
        _, _, _, out = _render_one(args, pos, intensity)
        render_outputs_to_disk(out, out_dir, stem=f"frame_{k:03d}")
    print(f"relit {len(positions)} frames into {out_dir}")
    return 0


def cmd_edit(args: argparse.Namespace) -> int:
    _setup(args)
    cloud, basis, _, extra = load_checkpoint(args.checkpoint)
    temperature = extra.get("temperature", 0.0125)

    if args.keep_basis:
        keep = sorted({int(i) for i in args.keep_basis.split(",")})
        if not all(0 <= i < len(basis) for i in keep):
            raise SystemExit(f"--keep-basis indices out of range for {len(basis)} bases")
        weights = cloud.effective_weights(temperature)
        owner = weights.argmax(dim=1)
        keep_t = torch.tensor(keep)
        keep_rows = (owner.unsqueeze(1) == keep_t.unsqueeze(0)).any(dim=1)
        if args.box:
            lo = torch.tensor(_parse_vec3(args.box.split(";")[0]), dtype=torch.float64)
            hi = torch.tensor(_parse_vec3(args.box.split(";")[1]), dtype=torch.float64)
            inside = ((cloud.positions >= lo) & (cloud.positions <= hi)).all(dim=1)
            keep_rows &= inside
        if not bool(keep_rows.any()):
            raise SystemExit("edit would delete every Gaussian")
        cloud = cloud.select(torch.nonzero(keep_rows).reshape(-1))
        index_map: list[int | None] = [None] * len(basis)
        for new, old in enumerate(keep):
            index_map[old] = new
        cloud = dataclasses.replace(
            cloud,
            weight_logits=resize_weight_vectors(
                cloud.weight_logits, index_map, len(keep), temperature
            ),
        )
        basis = basis.select(keep)
    elif args.basis is not None:
        if not 0 <= args.basis < len(basis):
            raise SystemExit(f"--basis {args.basis} out of range for {len(basis)} bases")
        colors = basis.base_colors()
        rough = basis.roughness()
        metal = basis.metallic()
        if args.color:
            colors = colors.clone()
            colors[args.basis] = torch.tensor(_parse_vec3(args.color), dtype=torch.float64)
        if args.roughness is not None:
            rough = rough.clone()
            rough[args.basis] = args.roughness
        if args.metallic is not None:
            metal = metal.clone()
            metal[args.basis] = args.metallic
        basis = BasisSet.from_values(colors, rough, metal)
    else:
        raise SystemExit("edit needs --basis with new values or --keep-basis")

    save_checkpoint(args.out, cloud, basis, None, extra=extra)
    print(f"wrote edited checkpoint {args.out} ({len(cloud)} gaussians, {len(basis)} bases)")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    _setup(args)
    dataset = load_dataset(args.data)
    report = evaluate(args.checkpoint, dataset, out_dir=args.out)
    line = f"psnr {report['mean_psnr']:.2f} dB  ssim {report['mean_ssim']:.4f}"
    if "mean_normal_mae_deg" in report:
        line += f"  normal mae {report['mean_normal_mae_deg']:.2f} deg"
    print(line)
    return 0


def cmd_check_grads(args: argparse.Namespace) -> int:
    _setup(args)
    cloud, basis, view = random_scene(args.gaussians, args.bases, args.resolution, args.seed)
    loss_cfg = LossConfig(lambda_ssim=args.lambda_ssim)
    report = check_gradients(
        cloud, basis, view, loss_cfg,
        iteration=loss_cfg.sparsity_image_start + 1,
        step=args.step, rtol=args.rtol, atol=args.atol,
    )
    if args.out:
        report.to_csv(args.out)
    print(report.to_text(failures_only=not args.full_table))
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brdfsplat",
        description="Inverse rendering with 2D Gaussian surfels and basis BRDFs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--scene", default="desk")
    p.add_argument("--out", required=True)
    p.add_argument("--train-views", type=int, default=24)
    p.add_argument("--test-views", type=int, default=4)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run the full optimization")
    p.add_argument("--data", required=True, help="manifest.json of the training split")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file with train/loss/control/raster sections")
    p.add_argument("--no-sparsity", action="store_true", help="disable the sparsity loss")
    p.add_argument("--no-control", action="store_true", help="disable basis merge/removal")
    p.add_argument("--no-specular-weight", action="store_true",
                   help="disable the specular-weighted rendering loss")
    p.add_argument("--threads", type=int)
    _add_dataclass_args(p, TrainConfig, "train")
    _add_dataclass_args(p, LossConfig, "loss")
    _add_dataclass_args(p, ControlConfig, "control")
    _add_dataclass_args(p, RasterConfig, "raster")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one dataset view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--light", help="override light position 'x,y,z'")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("relight", help="render a light trajectory from a fixed view")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--trajectory", required=True,
                   help='JSON {"light_positions": [[x,y,z], ...], "light_intensity": [r,g,b]}')
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("edit", help="edit basis parameters or extract a sub-scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="path of the edited checkpoint")
    p.add_argument("--basis", type=int, help="basis index to modify")
    p.add_argument("--color", help="new base color 'r,g,b'")
    p.add_argument("--roughness", type=float)
    p.add_argument("--metallic", type=float)
    p.add_argument("--keep-basis", help="comma list of bases to keep; deletes the rest "
                                        "plus Gaussians owned by them")
    p.add_argument("--box", help="position filter 'x0,y0,z0;x1,y1,z1' used with --keep-basis")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="metrics report over a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for eval.json / eval.csv")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check-grads", help="finite-difference gradient audit")
    p.add_argument("--gaussians", type=int, default=5)
    p.add_argument("--bases", type=int, default=3)
    p.add_argument("--resolution", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--rtol", type=float, default=1e-3)
    p.add_argument("--atol", type=float, default=1e-6)
    p.add_argument("--lambda-ssim", type=float, default=0.2)
    p.add_argument("--out", help="CSV report path")
    p.add_argument("--full-table", action="store_true")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_check_grads)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
