"""Adam updates, learning-rate schedule, and adaptive density control."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .grad import GradientError, GradientStore
from .scene import GaussianCloud


@dataclass
class TrainConfig:
    iterations: int = 15000
    seed: int = 0
    # learning rates per parameter group; position decays exponentially and is
    # multiplied by the camera extent of the scene
    lr_position: float = 1.6e-4
    lr_position_final_scale: float = 0.01
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_weights: float = 2.5e-2
    lr_brdf: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    # adaptive density control (2DGS-style policy; the interval is pinned at 500)
    densify_interval: int = 500
    densify_start: int = 500
    densify_stop: int = 9000
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.05
    percent_dense: float = 0.01
    # scene init
    n_init_points: int = 4096
    init_opacity: float = 0.1
    # bookkeeping
    checkpoint_interval: int = 1000
    # ablation switches
    enable_sparsity: bool = True
    enable_control: bool = True
    enable_specular_weight: bool = True

    def __post_init__(self):
        for name in ("densify_interval", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr_position", "lr_rotation", "lr_scale", "lr_opacity",
                     "lr_weights", "lr_brdf"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def position_lr(cfg: TrainConfig, iteration: int, extent: float) -> float:
    """Exponential decay from lr_position to lr_position * lr_position_final_scale."""
    t = min(max(iteration / max(cfg.iterations, 1), 0.0), 1.0)
    return cfg.lr_position * extent * cfg.lr_position_final_scale**t


class Adam:
    """Bias-corrected Adam over a dict of named parameter tensors.

    Moments follow parameter resizes through remap_rows / remap_columns;
    remapped-in slots restart from zero moments.
    """

    def __init__(self, lrs: dict[str, float], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-15, unit_rows: tuple[str, ...] = ("gaussians.quaternions",)):
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.unit_rows = unit_rows
        self.step_count = 0
        self.m: dict[str, Tensor] = {}
        self.v: dict[str, Tensor] = {}

    def _ensure(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = torch.zeros_like(p)
                self.v[name] = torch.zeros_like(p)

    @torch.no_grad()
    def step(
        self,
        params: dict[str, Tensor],
        grads: GradientStore,
        lr_overrides: dict[str, float] | None = None,
    ) -> None:
        self._ensure(params)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            lr = (lr_overrides or {}).get(name, self.lrs[name])
            m = self.m[name]
            v = self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            update = (m / bc1) / ((v / bc2).sqrt() + self.eps)
            p.data.add_(update, alpha=-lr)
            if not torch.isfinite(p.data).all():
                raise GradientError(f"non-finite parameter after Adam update in '{name}'")
        for name in self.unit_rows:
            if name in params:
                q = params[name].data
                q /= q.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    @torch.no_grad()
    def remap_rows(self, names: list[str], row_map: Tensor) -> None:
        """Reindex moment rows; entries with row_map < 0 restart at zero."""
        for name in names:
            if name not in self.m:
                continue
            old_m, old_v = self.m[name], self.v[name]
            shape = (row_map.shape[0],) + old_m.shape[1:]
            new_m = torch.zeros(shape, dtype=old_m.dtype)
            new_v = torch.zeros(shape, dtype=old_v.dtype)
            keep = row_map >= 0
            new_m[keep] = old_m[row_map[keep]]
            new_v[keep] = old_v[row_map[keep]]
            self.m[name], self.v[name] = new_m, new_v

    @torch.no_grad()
    def remap_columns(self, name: str, col_map: Tensor) -> None:
        """Reindex moment columns (basis merge/removal); col_map < 0 resets to zero."""
        if name not in self.m:
            return
        old_m, old_v = self.m[name], self.v[name]
        shape = old_m.shape[:1] + (col_map.shape[0],)
        new_m = torch.zeros(shape, dtype=old_m.dtype)
        new_v = torch.zeros(shape, dtype=old_v.dtype)
        keep = col_map >= 0
        new_m[:, keep] = old_m[:, col_map[keep]]
        new_v[:, keep] = old_v[:, col_map[keep]]
        self.m[name], self.v[name] = new_m, new_v

    def state_dict(self) -> dict:
        return {
            "moments": {k: (self.m[k], self.v[k]) for k in self.m},
            "step": self.step_count,
        }

    def load_state_dict(self, state: dict) -> None:
        self.m = {k: m.clone() for k, (m, _) in state["moments"].items()}
        self.v = {k: v.clone() for k, (_, v) in state["moments"].items()}
        self.step_count = int(state["step"])


def adam_step(params: dict[str, Tensor], grads: GradientStore, adam: Adam,
              lr_overrides: dict[str, float] | None = None) -> None:
    """Single optimizer step; thin functional wrapper over Adam.step."""
    adam.step(params, grads, lr_overrides)


class DensifyStats:
    """Running mean of a screen-space positional-gradient proxy per Gaussian."""

    def __init__(self, n: int):
        self.grad_accum = torch.zeros(n, dtype=torch.float64)
        self.count = torch.zeros(n, dtype=torch.float64)

    @torch.no_grad()
    def update(self, position_grad: Tensor, visible: Tensor, depth: Tensor, focal: float) -> None:
        """position_grad: (n, 3) world-space; converted to pixels via depth/focal."""
        norm = position_grad.norm(dim=-1) * depth.clamp_min(1e-6) / focal
        self.grad_accum += norm * visible
        self.count += visible.to(self.count.dtype)

    def mean(self) -> Tensor:
        return self.grad_accum / self.count.clamp_min(1.0)

    def reset(self, n: int) -> None:
        self.grad_accum = torch.zeros(n, dtype=torch.float64)
        self.count = torch.zeros(n, dtype=torch.float64)


@dataclass
class DensifyEvent:
    iteration: int
    n_split: int
    n_cloned: int
    n_pruned: int
    n_after: int

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration, "kind": "densify", "n_split": self.n_split,
            "n_cloned": self.n_cloned, "n_pruned": self.n_pruned, "n_after": self.n_after,
        }


@torch.no_grad()
def densify_and_prune(
    cloud: GaussianCloud,
    stats: DensifyStats,
    cfg: TrainConfig,
    extent: float,
    rng: np.random.Generator,
    iteration: int = 0,
) -> tuple[GaussianCloud, Tensor, DensifyEvent]:
    """Split large high-gradient splats, clone small ones, prune transparent ones.

    Returns the new cloud, a row map into the old cloud (-1 for fresh rows used
    to remap optimizer state), and an event record. Split children inherit
    weights and sample positions from the parent surfel; their scales shrink
    by 1.6. Split parents and low-opacity splats are dropped.
    """
    mean_grad = stats.mean()
    scales = cloud.scales()
    big = mean_grad > cfg.densify_grad_threshold
    wide = scales.max(dim=1).values > cfg.percent_dense * extent
    split_mask = big & wide
    clone_mask = big & ~wide
    prune_mask = cloud.opacities() < cfg.prune_opacity

    keep_mask = ~(prune_mask | split_mask)
    keep_idx = torch.nonzero(keep_mask).reshape(-1)
    clone_idx = torch.nonzero(clone_mask & ~prune_mask).reshape(-1)
    split_idx = torch.nonzero(split_mask & ~prune_mask).reshape(-1)

    params = cloud.parameters()
    pieces = {k: [v.detach()[keep_idx]] for k, v in params.items()}
    row_map = [keep_idx]

    if clone_idx.numel():
        for k, v in params.items():
            pieces[k].append(v.detach()[clone_idx])
        row_map.append(torch.full((clone_idx.numel(),), -1, dtype=torch.long))

    if split_idx.numel():
        t_a, t_b, _ = cloud.tangent_frames()
        for _ in range(2):
            eps = torch.from_numpy(rng.standard_normal((split_idx.numel(), 2)))
            offset = (
                eps[:, 0:1] * scales[split_idx, 0:1] * t_a[split_idx]
                + eps[:, 1:2] * scales[split_idx, 1:2] * t_b[split_idx]
            )
            pieces["positions"].append(cloud.positions.detach()[split_idx] + offset)
            pieces["quaternions"].append(cloud.quaternions.detach()[split_idx])
            pieces["scale_logits"].append(
                cloud.scale_logits.detach()[split_idx] - math.log(1.6)
            )
            pieces["opacity_logits"].append(cloud.opacity_logits.detach()[split_idx])
            pieces["weight_logits"].append(cloud.weight_logits.detach()[split_idx])
            row_map.append(torch.full((split_idx.numel(),), -1, dtype=torch.long))

    new_cloud = GaussianCloud(**{k: torch.cat(v).clone() for k, v in pieces.items()})
    event = DensifyEvent(
        iteration=iteration,
        n_split=int(split_idx.numel()),
        n_cloned=int(clone_idx.numel()),
        n_pruned=int((prune_mask & ~split_mask).sum()),
        n_after=len(new_cloud),
    )
    return new_cloud, torch.cat(row_map), event
