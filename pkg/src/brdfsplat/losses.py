"""Every term of the training objective and its configuration."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .render import RenderOutput
from .scene import GaussianCloud


@dataclass
class LossConfig:
    lambda_ssim: float = 0.2  # SSIM share inside the rendering loss
    lambda_geom: float = 1.0
    lambda_mask: float = 0.1
    lambda_sparse: float = 0.01
    theta_gain: float = 5.0  # specular-map gain (lambda_theta_h)
    theta_power: int = 10  # specular-map exponent k
    temperature: float = 0.0125  # weight-softmax temperature
    geom_distortion_weight: float = 100.0
    geom_normal_weight: float = 0.05
    sparsity_weight_start: int = 5000  # iteration gating the Gaussian-weight entropy
    sparsity_image_start: int = 9000  # iteration gating the weight-image entropy
    specular_weighting: bool = True
    entropy_alpha_min: float = 0.5  # weight-image entropy counts pixels above this coverage

    def __post_init__(self):
        for name in ("lambda_ssim", "lambda_geom", "lambda_mask", "lambda_sparse", "theta_gain"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.theta_power < 1:
            raise ValueError("theta_power must be >= 1")


@dataclass
class LossBreakdown:
    render: Tensor
    geom: Tensor
    mask: Tensor
    sparse: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {
            "render": float(self.render),
            "geom": float(self.geom),
            "mask": float(self.mask),
            "sparse": float(self.sparse),
            "total": float(self.total),
        }


def specular_weight_map(theta: Tensor, gain: float = 5.0, power: int = 10) -> Tensor:
    """H = 1 + gain * cos(theta)^power; emphasizes pixels seen near normal incidence."""
    return 1.0 + gain * torch.cos(theta).clamp_min(0.0) ** power


@dataclass
class DetachedState:
    """Curriculum-style quantities excluded from differentiation.

    The specular weight map and the entropy pixel selection are treated as
    constants of the current step. Freezing them lets a finite-difference probe
    evaluate the same piecewise objective the analytic gradient differentiates.
    """

    weight_map: Tensor | None = None
    entropy_mask: Tensor | None = None


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    k = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def ssim(image: Tensor, reference: Tensor, window: int = 11, sigma: float = 1.5,
         c1: float = 0.01**2, c2: float = 0.03**2) -> tuple[Tensor, Tensor]:
    """Single-scale SSIM on a [0, 1] dynamic range.

    image/reference: (H, W, 3) or (H, W). Inputs are reflection-padded so the
    channel-averaged per-pixel map keeps the full (H, W) shape.
    Returns (map, mean).
    """
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch {tuple(image.shape)} vs {tuple(reference.shape)}")
    if image.dim() == 2:
        image = image.unsqueeze(-1)
        reference = reference.unsqueeze(-1)
    h, w, c = image.shape
    if h < window or w < window:
        raise ValueError(f"images ({h}x{w}) smaller than the {window}x{window} SSIM window")

    k = _gaussian_kernel(window, sigma)
    kx = k.reshape(1, 1, 1, window).expand(c, 1, 1, window)
    ky = k.reshape(1, 1, window, 1).expand(c, 1, window, 1)
    pad = window // 2

    def blur(x: Tensor) -> Tensor:
        x = x.permute(2, 0, 1).unsqueeze(0)  # (1, C, H, W)
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
        x = F.conv2d(x, kx, groups=c)
        x = F.conv2d(x, ky, groups=c)
        return x.squeeze(0).permute(1, 2, 0)

    mu1 = blur(image)
    mu2 = blur(reference)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    sigma1_sq = blur(image * image) - mu1_sq
    sigma2_sq = blur(reference * reference) - mu2_sq
    sigma12 = blur(image * reference) - mu12
    ssim_map = ((2 * mu12 + c1) * (2 * sigma12 + c2)) / (
        (mu1_sq + mu2_sq + c1) * (sigma1_sq + sigma2_sq + c2)
    )
    ssim_map = ssim_map.mean(dim=-1)
    return ssim_map, ssim_map.mean()


def render_loss(image: Tensor, reference: Tensor, weight_map: Tensor, lambda_ssim: float) -> Tensor:
    """mean_u H(u) ((1 - ls) |I - I'|_1(u) + ls (1 - SSIM(u)))."""
    l1 = (image - reference).abs().sum(dim=-1)
    per_pixel = (1.0 - lambda_ssim) * l1
    if lambda_ssim > 0:
        ssim_map, _ = ssim(image, reference)
        per_pixel = per_pixel + lambda_ssim * (1.0 - ssim_map)
    return (weight_map * per_pixel).mean()


def geometric_loss(out: RenderOutput, cfg: LossConfig) -> Tensor:
    """Depth distortion plus splat-normal / depth-normal consistency."""
    return (
        cfg.geom_distortion_weight * out.distortion.mean()
        + cfg.geom_normal_weight * out.consistency.mean()
    )


def mask_loss(alpha: Tensor, mask: Tensor) -> Tensor:
    """Mean binary cross-entropy between rendered coverage and the given mask."""
    a = alpha.clamp(1e-6, 1.0 - 1e-6)
    return -(mask * torch.log(a) + (1.0 - mask) * torch.log(1.0 - a)).mean()


def _entropy(p: Tensor) -> Tensor:
    """Elementwise -p log p with the 0 log 0 := 0 convention."""
    return -p * torch.log(p.clamp_min(1e-12))


def weight_entropy(weights: Tensor) -> Tensor:
    """Mean over Gaussians of the entropy of their blending weights; (n, N) -> scalar."""
    if weights.shape[0] == 0:
        return weights.new_zeros(())
    return _entropy(weights).sum(dim=1).mean()


def image_entropy(weight_images: Tensor, selected: Tensor) -> Tensor:
    """Mean over selected pixels of the entropy of the composited weight images."""
    if not selected.any():
        return weight_images.new_zeros(())
    per_pixel = _entropy(weight_images).sum(dim=0)
    return per_pixel[selected].mean()


def sparsity_loss(
    cloud: GaussianCloud,
    out: RenderOutput,
    cfg: LossConfig,
    iteration: int,
    entropy_mask: Tensor | None = None,
) -> Tensor:
    """Entropy regularizer on Gaussian weights plus rendered weight images.

    The Gaussian-weight component activates at sparsity_weight_start, the
    weight-image component at sparsity_image_start.
    """
    total = out.image.new_zeros(())
    if iteration >= cfg.sparsity_weight_start:
        total = total + weight_entropy(cloud.effective_weights(cfg.temperature))
    if iteration >= cfg.sparsity_image_start:
        if entropy_mask is None:
            entropy_mask = out.alpha.detach() > cfg.entropy_alpha_min
        total = total + image_entropy(out.weight_images, entropy_mask)
    return total


def total_loss(
    out: RenderOutput,
    reference_image: Tensor,
    reference_mask: Tensor,
    cloud: GaussianCloud,
    cfg: LossConfig,
    iteration: int,
    detached: DetachedState | None = None,
) -> LossBreakdown:
    """Weighted sum of all active terms at the given iteration.

    A DetachedState captures (on first use) and replays (afterwards) the
    detached specular weight map and entropy pixel selection.
    """
    weight_map = detached.weight_map if detached is not None else None
    if weight_map is None:
        if cfg.specular_weighting:
            weight_map = specular_weight_map(
                out.theta_with_background(), cfg.theta_gain, cfg.theta_power
            ).detach()
        else:
            weight_map = torch.ones_like(out.alpha)
        if detached is not None:
            detached.weight_map = weight_map

    entropy_mask = detached.entropy_mask if detached is not None else None
    if entropy_mask is None and iteration >= cfg.sparsity_image_start:
        entropy_mask = out.alpha.detach() > cfg.entropy_alpha_min
        if detached is not None:
            detached.entropy_mask = entropy_mask

    render = render_loss(out.image, reference_image, weight_map, cfg.lambda_ssim)
    geom = geometric_loss(out, cfg)
    mask = mask_loss(out.alpha, reference_mask)
    sparse = sparsity_loss(cloud, out, cfg, iteration, entropy_mask)
    total = render + cfg.lambda_geom * geom + cfg.lambda_mask * mask + cfg.lambda_sparse * sparse
    return LossBreakdown(render=render, geom=geom, mask=mask, sparse=sparse, total=total)
