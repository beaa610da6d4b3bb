"""Basis BRDF initialization and dynamic merge/removal control."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from sklearn.cluster import KMeans

from . import brdf
from .render import RasterConfig, render_view
from .scene import BasisSet, GaussianCloud, View, resize_weight_vectors


@dataclass
class ControlConfig:
    n_init: int = 12
    tau_merge: float = 0.4
    tau_removal_weight: float = 0.1
    tau_removal_number: float = 0.005
    warmup_iteration: int = 6000  # first control tick
    interval: int = 500
    curve_samples: int = 90  # halfway angles per reflectance curve

    def __post_init__(self):
        if min(self.tau_merge, self.tau_removal_weight, self.tau_removal_number) <= 0:
            raise ValueError("control thresholds must be positive")
        if self.interval < 1:
            raise ValueError("control interval must be >= 1")


@dataclass
class ControlEvent:
    iteration: int
    kind: str  # "merge" | "removal"
    kept: int
    removed: int
    d_radio: float | None
    d_point: float | None
    pixel_fraction: float | None
    n_after: int
    index_map: list[int | None] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "kind": self.kind,
            "kept": self.kept,
            "removed": self.removed,
            "d_radio": self.d_radio,
            "d_point": self.d_point,
            "pixel_fraction": self.pixel_fraction,
            "n_after": self.n_after,
            "index_map": self.index_map,
        }


def kmeans_init(views: Sequence[View], n: int, seed: int, max_pixels: int = 200_000) -> BasisSet:
    """Initial bases from k-means of foreground pixel colors; sigma=0.5, m=0."""
    if n < 1:
        raise ValueError("need at least one basis")
    chunks = []
    for v in views:
        fg = v.mask > 0.5
        chunks.append(v.image[fg].reshape(-1, 3).numpy())
    pixels = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))
    if pixels.shape[0] < n:
        raise ValueError(f"{pixels.shape[0]} foreground pixels cannot seed {n} bases")
    if pixels.shape[0] > max_pixels:
        rng = np.random.default_rng(seed)
        pixels = pixels[rng.choice(pixels.shape[0], max_pixels, replace=False)]

    km = KMeans(n_clusters=n, init="k-means++", n_init=1, max_iter=50, random_state=seed)
    km.fit(pixels)
    centers = np.asarray(km.cluster_centers_, dtype=np.float64)

    for i in range(n):
        for j in range(i):
            if np.allclose(centers[i], centers[j], atol=1e-9):
                warnings.warn(
                    f"duplicate k-means centers {j}/{i}; perturbing center {i} by 1e-3"
                )
                centers[i] = centers[i] + 1e-3 * (i + 1)
    centers = np.clip(centers, 1e-4, 1.0 - 1e-4)
    return BasisSet.from_values(
        colors=centers, roughness=np.full(n, 0.5), metallic=np.full(n, 1e-6)
    )


def radiometric_matrix(basis: BasisSet, count: int) -> np.ndarray:
    """Pairwise reflectance-curve differences: mean over the sampled halfway
    angles of the rgb L2 difference. Symmetric, zero diagonal."""
    curves = brdf.basis_curves(basis, count).detach().numpy()  # (N, C, 3)
    diff = curves[:, None] - curves[None, :]  # (N, N, C, 3)
    return np.linalg.norm(diff, axis=-1).mean(axis=-1)


def assign_point_clouds(cloud: GaussianCloud, temperature: float) -> list[np.ndarray]:
    """Partition Gaussian centers by the argmax basis weight (ties to lowest index)."""
    n_b = cloud.n_bases
    if len(cloud) == 0:
        return [np.zeros((0, 3)) for _ in range(n_b)]
    weights = cloud.effective_weights(temperature).detach().numpy()
    owner = np.argmax(weights, axis=1)  # first max wins ties
    centers = cloud.positions.detach().numpy()
    return [centers[owner == i] for i in range(n_b)]


def chamfer(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbor distance; +inf when a side is empty."""
    if p.shape[0] == 0 or q.shape[0] == 0:
        return float("inf")
    d2 = ((p[:, None, :] - q[None, :, :]) ** 2).sum(-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def point_matrix(clouds: list[np.ndarray]) -> np.ndarray:
    n = len(clouds)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = chamfer(clouds[i], clouds[j])
    return d


def _apply_index_map(
    cloud: GaussianCloud,
    basis: BasisSet,
    index_map: list[int | None],
    owners: list[int],
    temperature: float,
) -> tuple[GaussianCloud, BasisSet]:
    """Resize weight vectors per index_map and keep the basis rows in owners.

    owners[slot] is the old basis index whose parameters survive in that new
    slot (for a merge this is the kept basis, not the one folded into it).
    """
    new_n = len(owners)
    logits = resize_weight_vectors(cloud.weight_logits, index_map, new_n, temperature)
    return replace(cloud, weight_logits=logits), basis.select(owners)


def merge_step(
    cloud: GaussianCloud,
    basis: BasisSet,
    cfg: ControlConfig,
    temperature: float,
    iteration: int = 0,
) -> tuple[GaussianCloud, BasisSet, list[ControlEvent]]:
    """Merge radiometrically similar bases whose point clouds are mutual nearest.

    Scans bases in ascending order; after every merge the matrices are
    recomputed so later decisions see the current state.
    """
    events: list[ControlEvent] = []
    while len(basis) >= 2:
        d_radio = radiometric_matrix(basis, cfg.curve_samples)
        clouds = assign_point_clouds(cloud, temperature)
        d_point = point_matrix(clouds)
        merged = False
        for i in range(len(basis)):
            others = [j for j in range(len(basis)) if j != i]
            dists = [d_point[i, j] for j in others]
            if not np.isfinite(dists).any():
                continue
            j = others[int(np.argmin(dists))]
            if d_radio[i, j] >= cfg.tau_merge:
                continue
            # survivor is the basis with more associated Gaussians
            if len(clouds[j]) >= len(clouds[i]):
                kept, removed = (min(i, j), max(i, j)) if len(clouds[i]) == len(clouds[j]) else (j, i)
            else:
                kept, removed = i, j
            index_map: list[int | None] = []
            owners: list[int] = []
            new = 0
            for k in range(len(basis)):
                if k == removed:
                    index_map.append(None)  # patched to kept's slot below
                else:
                    index_map.append(new)
                    owners.append(k)
                    new += 1
            index_map[removed] = index_map[kept]
            cloud, basis = _apply_index_map(cloud, basis, index_map, owners, temperature)
            events.append(
                ControlEvent(
                    iteration=iteration, kind="merge", kept=kept, removed=removed,
                    d_radio=float(d_radio[i, j]), d_point=float(d_point[i, j]),
                    pixel_fraction=None, n_after=len(basis), index_map=index_map,
                )
            )
            merged = True
            break
        if not merged:
            break
    return cloud, basis, events


def valid_pixel_fractions(weight_images: torch.Tensor, threshold: float) -> np.ndarray:
    """Fraction of pixels where each basis weight image exceeds threshold.

    weight_images: (..., N, H, W) stacked over views; the fraction counts all
    pixels across every view.
    """
    w = weight_images.detach()
    n_b = w.shape[-3]
    flat = w.reshape(-1, n_b, w.shape[-2] * w.shape[-1])
    counts = (flat > threshold).sum(dim=(0, 2)).numpy()
    total = flat.shape[0] * flat.shape[2]
    return counts / max(total, 1)


def removal_step(
    cloud: GaussianCloud,
    basis: BasisSet,
    weight_images: torch.Tensor,
    cfg: ControlConfig,
    temperature: float,
    iteration: int = 0,
) -> tuple[GaussianCloud, BasisSet, list[ControlEvent]]:
    """Remove bases whose weight images light up too few pixels; never the last."""
    events: list[ControlEvent] = []
    fractions = valid_pixel_fractions(weight_images, cfg.tau_removal_weight)
    removable = sorted(
        (i for i in range(len(basis)) if fractions[i] < cfg.tau_removal_number),
        key=lambda i: fractions[i],
    )
    drop: list[int] = []
    for i in removable:
        if len(basis) - len(drop) <= 1:
            break
        drop.append(i)
    if not drop:
        return cloud, basis, events
    index_map: list[int | None] = []
    owners: list[int] = []
    new = 0
    for k in range(len(basis)):
        if k in drop:
            index_map.append(None)
        else:
            index_map.append(new)
            owners.append(k)
            new += 1
    for i in drop:
        events.append(
            ControlEvent(
                iteration=iteration, kind="removal", kept=-1, removed=i,
                d_radio=None, d_point=None, pixel_fraction=float(fractions[i]),
                n_after=len(basis) - len(drop), index_map=index_map,
            )
        )
    cloud, basis = _apply_index_map(cloud, basis, index_map, owners, temperature)
    return cloud, basis, events


def render_weight_images(
    cloud: GaussianCloud,
    basis: BasisSet,
    views: Sequence[View],
    temperature: float,
    raster_cfg: RasterConfig,
) -> torch.Tensor:
    """Weight images over all training views, stacked (V, N, H, W)."""
    with torch.no_grad():
        stacks = [
            render_view(cloud, basis, v.camera, v.light, temperature, raster_cfg).weight_images
            for v in views
        ]
    return torch.stack(stacks)


def control_tick(
    iteration: int,
    cloud: GaussianCloud,
    basis: BasisSet,
    cfg: ControlConfig,
    temperature: float,
    views: Sequence[View],
    raster_cfg: RasterConfig = RasterConfig(),
) -> tuple[GaussianCloud, BasisSet, list[ControlEvent]]:
    """Run merge then removal on scheduled iterations; no-op otherwise."""
    if iteration < cfg.warmup_iteration or (iteration - cfg.warmup_iteration) % cfg.interval != 0:
        return cloud, basis, []
    cloud, basis, events = merge_step(cloud, basis, cfg, temperature, iteration)
    images = render_weight_images(cloud, basis, views, temperature, raster_cfg)
    cloud, basis, removal_events = removal_step(cloud, basis, images, cfg, temperature, iteration)
    return cloud, basis, events + removal_events
