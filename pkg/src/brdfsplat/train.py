"""Analysis-by-synthesis training loop."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from sklearn.neighbors import NearestNeighbors

from .control import ControlConfig, ControlEvent, control_tick, kmeans_init
from .grad import backward, parameter_dict
from .losses import LossConfig, total_loss
from .optim import Adam, DensifyStats, TrainConfig, densify_and_prune, position_lr
from .render import RasterConfig, render_view
from .scene import BasisSet, GaussianCloud, View, save_checkpoint

logger = logging.getLogger(__name__)


GAUSSIAN_PARAM_NAMES = [
    "gaussians.positions",
    "gaussians.quaternions",
    "gaussians.scale_logits",
    "gaussians.opacity_logits",
    "gaussians.weight_logits",
]


def camera_extent(views: list[View]) -> float:
    centers = torch.stack([v.camera.center() for v in views])
    radius = (centers - centers.mean(dim=0)).norm(dim=-1).max()
    return float(radius.clamp_min(1e-6))


def random_unit_quaternions(n: int, rng: np.random.Generator) -> torch.Tensor:
    q = torch.from_numpy(rng.standard_normal((n, 4)))
    return q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def _logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def initialize_scene(
    views: list[View],
    points: np.ndarray,
    n_bases: int,
    cfg: TrainConfig,
    seed: int,
) -> tuple[GaussianCloud, BasisSet]:
    """Gaussians on the initial point cloud plus k-means color bases.

    Scales start at the mean distance to the 3 nearest neighbors, orientations
    random, opacity at cfg.init_opacity, blending weights uniform.
    """
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 1:
        raise ValueError(f"need an (m, 3) point cloud, got {points.shape}")
    rng = np.random.default_rng(seed)
    n = points.shape[0]
    if n >= 4:
        nn = NearestNeighbors(n_neighbors=4).fit(points)
        dist, _ = nn.kneighbors(points)
        spacing = dist[:, 1:].mean(axis=1)
    else:
        spacing = np.full(n, 0.1)
    spacing = np.clip(spacing, 1e-6, None)
    scale_logits = torch.from_numpy(np.log(spacing))[:, None].repeat(1, 2)

    opacity = float(np.clip(cfg.init_opacity, 1e-4, 1 - 1e-4))
    cloud = GaussianCloud(
        positions=torch.from_numpy(np.asarray(points, dtype=np.float64)).clone(),
        quaternions=random_unit_quaternions(n, rng),
        scale_logits=scale_logits.clone(),
        opacity_logits=torch.full((n,), _logit(opacity), dtype=torch.float64),
        weight_logits=torch.zeros((n, n_bases), dtype=torch.float64),
    )
    basis = kmeans_init(views, n_bases, seed)
    return cloud, basis


def _column_map(event: ControlEvent, old_n: int) -> torch.Tensor:
    """Adam column map for one control event: unique source -> gather, merged
    target -> -1 (moments restart)."""
    new_n = len({m for m in event.index_map if m is not None})
    sources: dict[int, list[int]] = {}
    for old, m in enumerate(event.index_map):
        if m is not None:
            sources.setdefault(m, []).append(old)
    col_map = torch.full((new_n,), -1, dtype=torch.long)
    for slot, olds in sources.items():
        if len(olds) == 1:
            col_map[slot] = olds[0]
    return col_map


@dataclass
class TrainResult:
    cloud: GaussianCloud
    basis: BasisSet
    checkpoint: Path
    loss_csv: Path
    events_path: Path
    history: list[dict]


def train(
    views: list[View],
    init_points: np.ndarray,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    control_cfg: ControlConfig,
    raster_cfg: RasterConfig,
    out_dir: str | Path,
    log_every: int = 200,
) -> TrainResult:
    """Optimize Gaussians and bases against the training views.

    Deterministic for a fixed seed and thread count; writes a per-iteration
    loss CSV, an event log (JSONL), periodic checkpoints, and a final
    checkpoint containing optimizer state.
    """
    if not views:
        raise ValueError("need at least one training view")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)

    loss_cfg = replace(
        loss_cfg,
        specular_weighting=loss_cfg.specular_weighting and train_cfg.enable_specular_weight,
        lambda_sparse=loss_cfg.lambda_sparse if train_cfg.enable_sparsity else 0.0,
    )
    temperature = loss_cfg.temperature

    cloud, basis = initialize_scene(views, init_points, control_cfg.n_init, train_cfg, train_cfg.seed)
    extent = camera_extent(views)

    adam = Adam(
        lrs={
            "gaussians.positions": train_cfg.lr_position,
            "gaussians.quaternions": train_cfg.lr_rotation,
            "gaussians.scale_logits": train_cfg.lr_scale,
            "gaussians.opacity_logits": train_cfg.lr_opacity,
            "gaussians.weight_logits": train_cfg.lr_weights,
            "basis.color_logits": train_cfg.lr_brdf,
            "basis.roughness_logits": train_cfg.lr_brdf,
            "basis.metallic_logits": train_cfg.lr_brdf,
        },
        beta1=train_cfg.beta1,
        beta2=train_cfg.beta2,
        eps=train_cfg.adam_eps,
    )
    stats = DensifyStats(len(cloud))

    loss_csv = out_dir / "losses.csv"
    events_path = out_dir / "events.jsonl"
    history: list[dict] = []
    order: list[int] = []
    started = time.time()

    with open(loss_csv, "w", newline="") as loss_file, open(events_path, "w") as events_file:
        writer = csv.writer(loss_file)
        writer.writerow(["iteration", "render", "geom", "mask", "sparse", "total",
                         "n_gaussians", "n_bases"])

        for it in range(1, train_cfg.iterations + 1):
            if not order:
                order = rng.permutation(len(views)).tolist()
            view = views[order.pop(0)]

            cloud.requires_grad_(True)
            basis.requires_grad_(True)
            out = render_view(cloud, basis, view.camera, view.light, temperature, raster_cfg)
            breakdown = total_loss(out, view.image, view.mask, cloud, loss_cfg, it)
            params = parameter_dict(cloud, basis)
            grads = backward(breakdown.total, params)

            with torch.no_grad():
                depth = view.camera.to_camera(cloud.positions)[:, 2]
                focal = 0.5 * (view.camera.fx + view.camera.fy)
                stats.update(grads["gaussians.positions"], out.visible, depth, focal)

            adam.step(params, grads, {
                "gaussians.positions": position_lr(train_cfg, it, extent),
            })

            row = breakdown.floats()
            row.update({"iteration": it, "n_gaussians": len(cloud), "n_bases": len(basis)})
            history.append(row)
            writer.writerow([it, row["render"], row["geom"], row["mask"], row["sparse"],
                             row["total"], len(cloud), len(basis)])

            if (
                train_cfg.densify_start <= it <= train_cfg.densify_stop
                and it % train_cfg.densify_interval == 0
            ):
                cloud, row_map, event = densify_and_prune(
                    cloud, stats, train_cfg, extent, rng, it
                )
                adam.remap_rows(GAUSSIAN_PARAM_NAMES, row_map)
                stats.reset(len(cloud))
                events_file.write(json.dumps(event.to_json()) + "\n")

            if train_cfg.enable_control:
                old_n = len(basis)
                cloud, basis, events = control_tick(
                    it, cloud, basis, control_cfg, temperature, views, raster_cfg
                )
                for event in events:
                    adam.remap_columns(
                        "gaussians.weight_logits", _column_map(event, old_n)
                    )
                    old_n = len({m for m in event.index_map if m is not None})
                    events_file.write(json.dumps(event.to_json()) + "\n")

            if it % train_cfg.checkpoint_interval == 0 and it < train_cfg.iterations:
                save_checkpoint(
                    out_dir / f"checkpoint_{it:06d}.npz", cloud, basis,
                    adam.state_dict(), extra=_extra(it, loss_cfg),
                )
            if log_every and it % log_every == 0:
                logger.info(
                    "iter %d loss %.5f n %d bases %d (%.1fs)",
                    it, row["total"], len(cloud), len(basis), time.time() - started,
                )

    final = out_dir / "checkpoint_final.npz"
    save_checkpoint(final, cloud, basis, adam.state_dict(),
                    extra=_extra(train_cfg.iterations, loss_cfg))
    return TrainResult(
        cloud=cloud, basis=basis, checkpoint=final, loss_csv=loss_csv,
        events_path=events_path, history=history,
    )


def _extra(iteration: int, loss_cfg: LossConfig) -> dict:
    return {"iteration": iteration, "temperature": loss_cfg.temperature}
