"""Brute-force reference renderer.

Semantically identical to render.render_view but written as the plainest
possible loop over pixels x all Gaussians with a full per-pixel sort: no
culling, no vectorized compositing, and its own numpy copies of the
quaternion, BRDF, and blending math. Exists purely as a test oracle.
"""
from __future__ import annotations

import math

import numpy as np
import torch

from .render import RasterConfig, RenderOutput
from .scene import BasisSet, Camera, GaussianCloud, PointLight


def _quat_to_rot(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    s = logits / temperature
    s = s - s.max()
    e = np.exp(s)
    return e / e.sum()


def _eval_bases(cos_hn, cos_oh, cos_in, cos_on, colors, rough, metal) -> np.ndarray:
    """All basis BRDF values at one shading configuration: (N, 3)."""
    cos_in = max(cos_in, 1e-4)
    cos_on = max(cos_on, 1e-4)
    s2 = rough * rough
    d = np.exp((2.0 / s2) * (cos_hn - 1.0)) / (math.pi * s2)
    f0 = 0.04 * (1.0 - metal)[:, None] + metal[:, None] * colors
    p = min(max(1.0 - cos_oh, 0.0), 1.0)
    fres = f0 + (1.0 - f0) * p**5
    alpha = (1.0 + rough) ** 2 / 8.0
    g = (cos_in / ((1.0 - alpha) * cos_in + alpha)) * (cos_on / ((1.0 - alpha) * cos_on + alpha))
    diffuse = ((1.0 - metal) / math.pi)[:, None] * colors
    return diffuse + (d * g / (4.0 * cos_in * cos_on))[:, None] * fres


def brute_force_render(
    cloud: GaussianCloud,
    basis: BasisSet,
    camera: Camera,
    light: PointLight,
    temperature: float,
    cfg: RasterConfig = RasterConfig(),
) -> RenderOutput:
    h, w = camera.height, camera.width
    n = len(cloud)
    n_b = len(basis)

    positions = cloud.positions.detach().numpy()
    quats = cloud.quaternions.detach().numpy()
    scales = np.exp(cloud.scale_logits.detach().numpy())
    opacities = 1.0 / (1.0 + np.exp(-cloud.opacity_logits.detach().numpy()))
    weight_logits = cloud.weight_logits.detach().numpy()
    colors = 1.0 / (1.0 + np.exp(-basis.color_logits.detach().numpy()))
    rough = 0.01 + 0.99 / (1.0 + np.exp(-basis.roughness_logits.detach().numpy()))
    metal = 1.0 / (1.0 + np.exp(-basis.metallic_logits.detach().numpy()))

    frames = [_quat_to_rot(quats[i]) for i in range(n)]
    tangents_a = [r[:, 0] for r in frames]
    tangents_b = [r[:, 1] for r in frames]
    normals = [np.cross(r[:, 0], r[:, 1]) for r in frames]
    weights = [_softmax(weight_logits[i], temperature) for i in range(n)]

    rot = camera.rotation.numpy()
    origin = -(rot.T @ camera.translation.numpy())
    light_pos = light.position.numpy()
    light_phi = light.intensity.numpy()

    image = np.zeros((h, w, 3))
    alpha_map = np.zeros((h, w))
    depth_raw = np.zeros((h, w))
    normal_map = np.zeros((h, w, 3))
    theta_map = np.zeros((h, w))
    weight_images = np.zeros((n_b, h, w))
    distortion = np.zeros((h, w))
    visible = np.zeros(n, dtype=bool)
    dirs = np.zeros((h, w, 3))
    per_pixel: list[list[tuple]] = [[] for _ in range(h * w)]

    for py in range(h):
        for px in range(w):
            d_cam = np.array(
                [(px + 0.5 - camera.cx) / camera.fx, (py + 0.5 - camera.cy) / camera.fy, 1.0]
            )
            d = rot.T @ d_cam
            d = d / np.linalg.norm(d)
            dirs[py, px] = d

            hits = []
            for g in range(n):
                denom = float(d @ normals[g])
                if abs(denom) < cfg.parallel_eps:
                    continue
                z = float((positions[g] - origin) @ normals[g]) / denom
                if z <= cfg.near:
                    continue
                x = origin + z * d
                rel = x - positions[g]
                a = float(rel @ tangents_a[g]) / scales[g, 0]
                b = float(rel @ tangents_b[g]) / scales[g, 1]
                r2 = a * a + b * b
                if r2 > cfg.cutoff**2:
                    continue
                hits.append((z, g, x, math.exp(-r2 / 2.0)))
            hits.sort(key=lambda hit: hit[0])

            transmittance = 1.0
            for z, g, x, filt in hits:
                visible[g] = True
                blend = min(opacities[g] * filt, cfg.max_blend)
                t_i = blend * transmittance
                transmittance *= 1.0 - blend

                to_light = light_pos - x
                dist_sq = max(float(to_light @ to_light), 1e-12)
                inc = to_light / math.sqrt(dist_sq)
                out_dir = -d
                nrm = normals[g]
                if float(nrm @ out_dir) < 0:
                    nrm = -nrm
                half = inc + out_dir
                half = half / max(np.linalg.norm(half), 1e-12)
                lambert = max(float(nrm @ inc), 0.0)
                values = _eval_bases(
                    float(nrm @ half), float(out_dir @ half), float(nrm @ inc),
                    float(nrm @ out_dir), colors, rough, metal,
                )
                radiance = lambert * (weights[g] @ values) * (light_phi / dist_sq)
                cos_hn = min(max(float(nrm @ half), -1.0 + 1e-9), 1.0 - 1e-9)
                theta = math.acos(cos_hn)

                image[py, px] += t_i * radiance
                alpha_map[py, px] += t_i
                depth_raw[py, px] += t_i * z
                normal_map[py, px] += t_i * nrm
                theta_map[py, px] += t_i * theta
                weight_images[:, py, px] += t_i * weights[g]
                per_pixel[py * w + px].append((z, t_i, nrm))

            running_t = 0.0
            running_tz = 0.0
            for z, t_i, _ in per_pixel[py * w + px]:
                distortion[py, px] += t_i * (z * running_t - running_tz)
                running_t += t_i
                running_tz += t_i * z

    depth = depth_raw / np.maximum(alpha_map, 1e-12)

    # depth-derived normals, central differences on back-projected points
    points = origin + depth[..., None] * dirs
    depth_normal = np.zeros((h, w, 3))
    depth_valid = np.zeros((h, w))
    if h >= 3 and w >= 3:
        dx = points[1:-1, 2:] - points[1:-1, :-2]
        dy = points[2:, 1:-1] - points[:-2, 1:-1]
        cross = np.cross(dx, dy)
        cross = cross / np.maximum(np.linalg.norm(cross, axis=-1, keepdims=True), 1e-12)
        covered = alpha_map > cfg.alpha_valid
        ok = (
            covered[1:-1, 1:-1]
            & covered[1:-1, 2:]
            & covered[1:-1, :-2]
            & covered[2:, 1:-1]
            & covered[:-2, 1:-1]
        )
        toward = (cross * dirs[1:-1, 1:-1]).sum(-1)
        cross = np.where((toward > 0)[..., None], -cross, cross)
        depth_normal[1:-1, 1:-1] = cross * ok[..., None]
        depth_valid[1:-1, 1:-1] = ok.astype(float)

    consistency = np.zeros((h, w))
    for py in range(h):
        for px in range(w):
            if not depth_valid[py, px]:
                continue
            for _, t_i, nrm in per_pixel[py * w + px]:
                consistency[py, px] += t_i * (1.0 - float(nrm @ depth_normal[py, px]))

    return RenderOutput(
        image=torch.from_numpy(image),
        alpha=torch.from_numpy(alpha_map),
        depth=torch.from_numpy(depth),
        normal=torch.from_numpy(normal_map),
        theta=torch.from_numpy(theta_map),
        weight_images=torch.from_numpy(weight_images),
        distortion=torch.from_numpy(distortion),
        consistency=torch.from_numpy(consistency),
        visible=torch.from_numpy(visible),
    )
