"""Forward rendering of Gaussian surfels under a point light.

The fast path culls splats with projected bounding boxes, intersects each
candidate (pixel, splat) pair analytically on the splat plane, sorts pairs by
intersection depth per pixel, and alpha-composites front to back. All math on
surviving pairs is differentiable; culling only selects indices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from . import brdf
from .scene import BasisSet, Camera, GaussianCloud, PointLight


@dataclass
class RasterConfig:
    near: float = 1e-4  # intersections at or before this ray distance are discarded
    cutoff: float = 3.0  # elliptical extent in tangent-frame sigmas
    parallel_eps: float = 1e-9  # |ray . normal| below this counts as parallel
    max_blend: float = 1.0 - 1e-12  # keeps transmittance gradients finite
    chunk: int = 2_000_000  # candidate pairs per culling chunk
    alpha_valid: float = 0.5  # coverage needed for depth-derived normals


@dataclass
class RenderOutput:
    """Composited radiance plus every auxiliary map produced in the same pass."""

    image: Tensor  # (H, W, 3)
    alpha: Tensor  # (H, W) accumulated blending weight
    depth: Tensor  # (H, W) expected ray distance (alpha-normalized)
    normal: Tensor  # (H, W, 3) composited splat normals
    theta: Tensor  # (H, W) composited halfway angle, background 0
    weight_images: Tensor  # (N, H, W)
    distortion: Tensor  # (H, W) pairwise depth-distortion accumulator
    consistency: Tensor  # (H, W) splat-normal vs depth-normal accumulator
    visible: Tensor  # (n,) bool, splats that contributed at least one pair

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def theta_with_background(self) -> Tensor:
        """Halfway-angle map with uncovered mass treated as pi/2 (cos = 0)."""
        return self.theta + (1.0 - self.alpha) * (math.pi / 2.0)


def pixel_rays(camera: Camera) -> tuple[Tensor, Tensor]:
    """Rays through all pixel centers: origin (3,), unit directions (H*W, 3)."""
    h, w = camera.height, camera.width
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=torch.float64),
        torch.arange(w, dtype=torch.float64),
        indexing="ij",
    )
    dirs_cam = torch.stack(
        [
            (xs + 0.5 - camera.cx) / camera.fx,
            (ys + 0.5 - camera.cy) / camera.fy,
            torch.ones_like(xs),
        ],
        dim=-1,
    ).reshape(-1, 3)
    dirs = dirs_cam @ camera.rotation  # R^T applied row-wise
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    return camera.center(), dirs


def ray_for_pixel(camera: Camera, x: int, y: int) -> tuple[Tensor, Tensor]:
    """Origin and unit direction of the ray through pixel center (x+0.5, y+0.5)."""
    origin, dirs = pixel_rays(camera)
    return origin, dirs[y * camera.width + x]


def intersect(
    gaussian_index: int, cloud: GaussianCloud, origin: Tensor, direction: Tensor,
    cfg: RasterConfig = RasterConfig(),
):
    """Ray/splat-plane intersection for one Gaussian.

    Returns (a, b, z, filter_value) or None when the ray is parallel, the hit
    is behind the near plane, or outside the elliptical cutoff.
    """
    t_a, t_b, normal = cloud.tangent_frames()
    t_a, t_b, normal = t_a[gaussian_index], t_b[gaussian_index], normal[gaussian_index]
    p = cloud.positions[gaussian_index]
    s = cloud.scales()[gaussian_index]
    denom = (direction * normal).sum()
    if denom.abs() < cfg.parallel_eps:
        return None
    z = ((p - origin) * normal).sum() / denom
    if z <= cfg.near:
        return None
    x = origin + z * direction
    d = x - p
    a = (d * t_a).sum() / s[0]
    b = (d * t_b).sum() / s[1]
    if a * a + b * b > cfg.cutoff**2:
        return None
    filter_value = torch.exp(-(a * a + b * b) / 2.0)
    return a, b, z, filter_value


def composite(entries):
    """Front-to-back alpha blend sum_i L_i a_i G_i prod_{j<i} (1 - a_j G_j).

    entries: iterable of (payload, alpha, filter_value) sorted by depth
    ascending. Returns the accumulated payload; 0 for an empty list.
    """
    total = 0.0
    transmittance = 1.0
    for payload, alpha, g in entries:
        blend = alpha * g
        total = total + payload * blend * transmittance
        transmittance = transmittance * (1.0 - blend)
    return total


def shade(
    points: Tensor,  # (P, 3) surface points
    normals: Tensor,  # (P, 3) splat normals (unflipped)
    view_dirs: Tensor,  # (P, 3) unit surface -> camera
    weights: Tensor,  # (P, N) effective blending weights
    basis: BasisSet,
    light: PointLight,
) -> tuple[Tensor, Tensor, Tensor]:
    """Radiance of each shading point under the point light.

    Returns (radiance (P, 3), flipped normals (P, 3), halfway angle (P,)).
    Normals are flipped toward the camera; back-lit points go black through
    the clamped lambert factor.
    """
    to_light = light.position - points
    dist_sq = (to_light * to_light).sum(-1).clamp_min(1e-12)
    incident = to_light / dist_sq.sqrt().unsqueeze(-1)
    flip = (normals * view_dirs).sum(-1) < 0
    normals = torch.where(flip.unsqueeze(-1), -normals, normals)
    geom = brdf.ShadingGeometry.from_directions(incident, view_dirs, normals)
    lambert = (normals * incident).sum(-1).clamp_min(0.0)
    irradiance = light.intensity / dist_sq.unsqueeze(-1)
    radiance = lambert.unsqueeze(-1) * brdf.eval_mixture(geom, weights, basis) * irradiance
    cos_hn = (normals * geom.halfway).sum(-1).clamp(-1.0 + 1e-9, 1.0 - 1e-9)
    theta = torch.arccos(cos_hn)
    return radiance, normals, theta


def _empty_output(cloud: GaussianCloud, camera: Camera) -> RenderOutput:
    h, w, n_b = camera.height, camera.width, cloud.n_bases
    z = lambda *shape: torch.zeros(shape, dtype=torch.float64)
    return RenderOutput(
        image=z(h, w, 3), alpha=z(h, w), depth=z(h, w), normal=z(h, w, 3),
        theta=z(h, w), weight_images=z(n_b, h, w), distortion=z(h, w),
        consistency=z(h, w), visible=torch.zeros(len(cloud), dtype=torch.bool),
    )


@torch.no_grad()
def _candidate_pairs(cloud: GaussianCloud, camera: Camera, cfg: RasterConfig):
    """Conservative (pixel, gaussian) candidates from projected corner boxes."""
    n = len(cloud)
    h, w = camera.height, camera.width
    t_a, t_b, _ = cloud.tangent_frames()
    s = cloud.scales()
    ext_a = cfg.cutoff * s[:, 0:1] * t_a
    ext_b = cfg.cutoff * s[:, 1:2] * t_b
    p = cloud.positions
    corners = torch.stack(
        [p + ext_a + ext_b, p + ext_a - ext_b, p - ext_a + ext_b, p - ext_a - ext_b], dim=1
    )  # (n, 4, 3)
    cam = corners @ camera.rotation.T + camera.translation
    z = cam[..., 2]
    in_front = z > cfg.near
    alive = in_front.any(dim=1)
    # splats crossing the camera plane project unboundedly; fall back to full frame
    unbounded = alive & ~in_front.all(dim=1)
    zc = z.clamp_min(cfg.near)
    u = camera.fx * cam[..., 0] / zc + camera.cx
    v = camera.fy * cam[..., 1] / zc + camera.cy
    x0 = torch.floor(u.min(dim=1).values).long() - 1
    x1 = torch.ceil(u.max(dim=1).values).long() + 1
    y0 = torch.floor(v.min(dim=1).values).long() - 1
    y1 = torch.ceil(v.max(dim=1).values).long() + 1
    x0 = torch.where(unbounded, torch.zeros_like(x0), x0).clamp(0, w - 1)
    x1 = torch.where(unbounded, torch.full_like(x1, w - 1), x1).clamp(0, w - 1)
    y0 = torch.where(unbounded, torch.zeros_like(y0), y0).clamp(0, h - 1)
    y1 = torch.where(unbounded, torch.full_like(y1, h - 1), y1).clamp(0, h - 1)
    offscreen = (u.min(dim=1).values > w) | (u.max(dim=1).values < 0) | (
        v.min(dim=1).values > h) | (v.max(dim=1).values < 0)
    alive &= unbounded | ~offscreen

    widths = (x1 - x0 + 1).clamp_min(0) * alive
    heights = (y1 - y0 + 1).clamp_min(0) * alive
    areas = widths * heights
    total = int(areas.sum())
    if total == 0:
        return None
    gid = torch.repeat_interleave(torch.arange(n), areas)
    starts = torch.cumsum(areas, 0) - areas
    offset = torch.arange(total) - starts[gid]
    bw = widths[gid]
    px = x0[gid] + offset % bw
    py = y0[gid] + offset // bw
    return gid, py * w + px


def _pair_geometry(
    cloud: GaussianCloud, origin: Tensor, dirs: Tensor, gid: Tensor, pix: Tensor,
    cfg: RasterConfig,
):
    """Differentiable ray/splat intersection for index pairs (gid, pix)."""
    t_a, t_b, normal = cloud.tangent_frames()
    s = cloud.scales()
    g_ta, g_tb, g_n = t_a[gid], t_b[gid], normal[gid]
    g_p = cloud.positions[gid]
    g_s = s[gid]
    d = dirs[pix]
    denom = (d * g_n).sum(-1)
    safe = denom.abs().clamp_min(cfg.parallel_eps) * torch.where(denom < 0, -1.0, 1.0)
    z = ((g_p - origin) * g_n).sum(-1) / safe
    x = origin + z.unsqueeze(-1) * d
    rel = x - g_p
    a = (rel * g_ta).sum(-1) / g_s[:, 0]
    b = (rel * g_tb).sum(-1) / g_s[:, 1]
    r2 = a * a + b * b
    keep = (denom.abs() >= cfg.parallel_eps) & (z > cfg.near) & (r2 <= cfg.cutoff**2)
    return z, x, r2, g_n, keep


def render_view(
    cloud: GaussianCloud,
    basis: BasisSet,
    camera: Camera,
    light: PointLight,
    temperature: float,
    cfg: RasterConfig = RasterConfig(),
) -> RenderOutput:
    """Render every output map in one pass with shared sorting and compositing."""
    h, w = camera.height, camera.width
    n_b = len(basis)
    if len(cloud) == 0:
        return _empty_output(cloud, camera)
    origin, dirs = pixel_rays(camera)

    pairs = _candidate_pairs(cloud, camera, cfg)
    if pairs is None:
        return _empty_output(cloud, camera)
    gid_all, pix_all = pairs

    # cheap non-differentiable pass to find surviving pairs
    keep_chunks = []
    with torch.no_grad():
        for lo in range(0, gid_all.shape[0], cfg.chunk):
            sl = slice(lo, lo + cfg.chunk)
            *_, keep = _pair_geometry(cloud, origin, dirs, gid_all[sl], pix_all[sl], cfg)
            keep_chunks.append(keep)
    keep = torch.cat(keep_chunks)
    gid, pix = gid_all[keep], pix_all[keep]
    if gid.numel() == 0:
        return _empty_output(cloud, camera)

    z, points, r2, normals, _ = _pair_geometry(cloud, origin, dirs, gid, pix, cfg)
    gaussian_filter = torch.exp(-r2 / 2.0)
    blend = (cloud.opacities()[gid] * gaussian_filter).clamp_max(cfg.max_blend)

    weights = cloud.effective_weights(temperature)[gid]
    radiance, flipped_n, theta = shade(points, normals, -dirs[pix], weights, basis, light)

    # depth-ascending stable sort grouped by pixel
    order = torch.argsort(z, stable=True)
    order = order[torch.argsort(pix[order], stable=True)]
    pix_s, z_s, blend_s = pix[order], z[order], blend[order]

    # per-pixel exclusive transmittance via segmented log-space cumsum
    seg_new = torch.ones_like(pix_s, dtype=torch.bool)
    seg_new[1:] = pix_s[1:] != pix_s[:-1]
    seg_id = torch.cumsum(seg_new, 0) - 1
    counts = torch.bincount(seg_id)
    seg_start = torch.cumsum(counts, 0) - counts  # first pair index per segment
    log_t = torch.log1p(-blend_s)
    excl = torch.cumsum(log_t, 0) - log_t
    excl = excl - excl[seg_start][seg_id]
    contrib = blend_s * torch.exp(excl)  # t_i in the blending formula

    # pairwise depth distortion: sum_{j<i} t_i t_j (z_i - z_j) along each ray
    cum_t = torch.cumsum(contrib, 0) - contrib
    cum_tz = torch.cumsum(contrib * z_s, 0) - contrib * z_s
    base_t = cum_t[seg_start][seg_id]
    base_tz = cum_tz[seg_start][seg_id]
    distortion_pairs = contrib * (z_s * (cum_t - base_t) - (cum_tz - base_tz))

    payload = torch.cat(
        [
            radiance[order],
            flipped_n[order],
            z_s.unsqueeze(-1),
            theta[order].unsqueeze(-1),
            weights[order],
            torch.ones_like(z_s).unsqueeze(-1),
        ],
        dim=-1,
    )
    flat = torch.zeros((h * w, payload.shape[1]), dtype=torch.float64)
    flat.index_add_(0, pix_s, contrib.unsqueeze(-1) * payload)

    image = flat[:, 0:3].reshape(h, w, 3)
    normal_map = flat[:, 3:6].reshape(h, w, 3)
    depth_raw = flat[:, 6].reshape(h, w)
    theta_map = flat[:, 7].reshape(h, w)
    weight_images = flat[:, 8 : 8 + n_b].T.reshape(n_b, h, w)
    alpha = flat[:, 8 + n_b].reshape(h, w)

    distortion = torch.zeros(h * w, dtype=torch.float64)
    distortion.index_add_(0, pix_s, distortion_pairs)
    distortion = distortion.reshape(h, w)

    depth = depth_raw / alpha.clamp_min(1e-12)
    depth_normal, depth_valid = normals_from_depth(depth, alpha, origin, dirs, cfg)
    align = 1.0 - (flipped_n[order] * depth_normal.reshape(-1, 3)[pix_s]).sum(-1)
    consistency = torch.zeros(h * w, dtype=torch.float64)
    consistency.index_add_(0, pix_s, contrib * align * depth_valid.reshape(-1)[pix_s])
    consistency = consistency.reshape(h, w)

    visible = torch.zeros(len(cloud), dtype=torch.bool)
    visible[gid] = True

    return RenderOutput(
        image=image, alpha=alpha, depth=depth, normal=normal_map, theta=theta_map,
        weight_images=weight_images, distortion=distortion, consistency=consistency,
        visible=visible,
    )


def normals_from_depth(
    depth: Tensor, alpha: Tensor, origin: Tensor, dirs: Tensor, cfg: RasterConfig
) -> tuple[Tensor, Tensor]:
    """Normals from central differences of back-projected depth, camera-facing.

    Returns (H, W, 3) normals (zero where invalid) and an (H, W) validity
    mask requiring the center and its four neighbors to be covered.
    """
    h, w = depth.shape
    points = origin + depth.unsqueeze(-1) * dirs.reshape(h, w, 3)
    normal = torch.zeros((h, w, 3), dtype=depth.dtype)
    valid = torch.zeros((h, w), dtype=depth.dtype)
    if h < 3 or w < 3:
        return normal, valid
    dx = points[1:-1, 2:] - points[1:-1, :-2]
    dy = points[2:, 1:-1] - points[:-2, 1:-1]
    cross = torch.cross(dx, dy, dim=-1)
    cross = cross / cross.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    covered = alpha > cfg.alpha_valid
    ok = (
        covered[1:-1, 1:-1]
        & covered[1:-1, 2:]
        & covered[1:-1, :-2]
        & covered[2:, 1:-1]
        & covered[:-2, 1:-1]
    )
    toward = (cross * dirs.reshape(h, w, 3)[1:-1, 1:-1]).sum(-1)
    cross = torch.where((toward > 0).unsqueeze(-1), -cross, cross)
    normal[1:-1, 1:-1] = cross * ok.unsqueeze(-1)
    valid[1:-1, 1:-1] = ok.to(depth.dtype)
    return normal, valid
