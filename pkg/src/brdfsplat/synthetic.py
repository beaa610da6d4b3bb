"""Analytic ground-truth scenes: ray-traced spheres and disks under co-located
flash, sharing the BRDF formulas with the splat renderer but none of its
geometry path. Used to build the synthetic desk-scale dataset."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import brdf
from .data import save_manifest
from .pfm import write_pfm
from .scene import Camera, PointLight, look_at_camera


@dataclass
class Material:
    color: tuple[float, float, float]
    roughness: float
    metallic: float


@dataclass
class Sphere:
    center: tuple[float, float, float]
    radius: float
    material: int


@dataclass
class Disk:
    center: tuple[float, float, float]
    normal: tuple[float, float, float]
    radius: float
    material: int


@dataclass
class SceneSpec:
    name: str
    materials: list[Material]
    surfaces: list[Sphere | Disk]
    bounds: list[list[float]]  # sampling box for point initialization
    camera_radius: float = 3.0
    focal: float = 48.0
    light_intensity: tuple[float, float, float] = (9.0, 9.0, 9.0)
    elevations_deg: tuple[float, ...] = (25.0, 40.0, 55.0)
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.25)


def desk_scene() -> SceneSpec:
    """Two-material test scene: glossy metal sphere resting on a diffuse red disk."""
    return SceneSpec(
        name="desk",
        materials=[
            Material(color=(0.75, 0.10, 0.06), roughness=0.8, metallic=0.0),
            Material(color=(0.85, 0.85, 0.80), roughness=0.15, metallic=0.9),
        ],
        surfaces=[
            Disk(center=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0), radius=2.0, material=0),
            Sphere(center=(0.0, 0.0, 0.5), radius=0.5, material=1),
        ],
        bounds=[[-2.2, -2.2, -0.1], [2.2, 2.2, 1.1]],
    )


SCENES = {"desk": desk_scene}


def _ray_dirs(camera: Camera) -> np.ndarray:
    h, w = camera.height, camera.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.stack(
        [(xs + 0.5 - camera.cx) / camera.fx, (ys + 0.5 - camera.cy) / camera.fy,
         np.ones_like(xs)],
        axis=-1,
    )
    d = d @ camera.rotation.numpy()
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def trace(spec: SceneSpec, camera: Camera):
    """Nearest-hit ray trace of all pixel rays.

    Returns (hit (H,W) bool, points (H,W,3), normals (H,W,3) camera-facing,
    material ids (H,W) int, -1 where no hit).
    """
    h, w = camera.height, camera.width
    origin = camera.center().numpy()
    dirs = _ray_dirs(camera)

    best_t = np.full((h, w), np.inf)
    normals = np.zeros((h, w, 3))
    mats = np.full((h, w), -1, dtype=np.int64)

    for surf in spec.surfaces:
        if isinstance(surf, Sphere):
            c = np.asarray(surf.center)
            oc = origin - c
            b = (dirs * oc).sum(-1)
            disc = b * b - ((oc @ oc) - surf.radius**2)
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t = np.where(ok, -b - sq, np.inf)
            t = np.where(t > 1e-6, t, np.where(ok & (-b + sq > 1e-6), -b + sq, np.inf))
            closer = t < best_t
            pts = origin + t[..., None] * dirs
            n = (pts - c) / surf.radius
        else:
            nrm = np.asarray(surf.normal, dtype=np.float64)
            nrm = nrm / np.linalg.norm(nrm)
            c = np.asarray(surf.center)
            denom = dirs @ nrm
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((c - origin) @ nrm) / denom
            pts = origin + t[..., None] * dirs
            inside = np.linalg.norm(pts - c, axis=-1) <= surf.radius
            t = np.where((np.abs(denom) > 1e-12) & (t > 1e-6) & inside, t, np.inf)
            closer = t < best_t
            n = np.broadcast_to(nrm, pts.shape).copy()
        best_t = np.where(closer, t, best_t)
        normals = np.where(closer[..., None], n, normals)
        mats = np.where(closer, surf.material, mats)

    hit = np.isfinite(best_t)
    points = origin + np.where(hit, best_t, 0.0)[..., None] * dirs
    facing = (normals * dirs).sum(-1) > 0
    normals = np.where((facing & hit)[..., None], -normals, normals)
    return hit, points, normals, mats


@torch.no_grad()
def shade_analytic(
    spec: SceneSpec,
    camera: Camera,
    light: PointLight,
    hit: np.ndarray,
    points: np.ndarray,
    normals: np.ndarray,
    mats: np.ndarray,
) -> np.ndarray:
    """Radiance of the traced surface points under the point light: (H, W, 3)."""
    h, w = hit.shape
    image = np.zeros((h, w, 3))
    if not hit.any():
        return image
    pts = torch.from_numpy(points[hit])
    nrm = torch.from_numpy(normals[hit])
    eye = camera.center()
    out_dir = eye - pts
    out_dir = out_dir / out_dir.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    to_light = light.position - pts
    dist_sq = (to_light * to_light).sum(-1).clamp_min(1e-12)
    inc = to_light / dist_sq.sqrt().unsqueeze(-1)
    geom = brdf.ShadingGeometry.from_directions(inc, out_dir, nrm)

    mat_ids = mats[hit]
    values = torch.zeros((pts.shape[0], 3), dtype=torch.float64)
    for mid, mat in enumerate(spec.materials):
        sel = torch.from_numpy(mat_ids == mid)
        if not sel.any():
            continue
        sub = brdf.ShadingGeometry(
            geom.incident[sel], geom.outgoing[sel], geom.normal[sel], geom.halfway[sel]
        )
        values[sel] = brdf.eval_basis(
            sub,
            torch.tensor(mat.color, dtype=torch.float64),
            torch.tensor(mat.roughness, dtype=torch.float64),
            torch.tensor(mat.metallic, dtype=torch.float64),
        )
    lambert = (nrm * inc).sum(-1).clamp_min(0.0)
    radiance = lambert.unsqueeze(-1) * values * (light.intensity / dist_sq.unsqueeze(-1))
    image[hit] = radiance.numpy()
    return image


def camera_ring(
    spec: SceneSpec, n_views: int, width: int, height: int, seed: int, phase: float = 0.0
) -> list[Camera]:
    """Cameras on jittered rings around the scene, co-located flash assumed."""
    rng = np.random.default_rng(seed)
    cams = []
    target = np.asarray(spec.look_at)
    for k in range(n_views):
        azimuth = 2.0 * math.pi * (k / n_views) + phase + rng.uniform(-0.02, 0.02)
        elev = math.radians(spec.elevations_deg[k % len(spec.elevations_deg)])
        elev += rng.uniform(-0.01, 0.01)
        r = spec.camera_radius * (1.0 + rng.uniform(-0.02, 0.02))
        eye = np.array(
            [r * math.cos(elev) * math.cos(azimuth),
             r * math.cos(elev) * math.sin(azimuth),
             r * math.sin(elev)]
        )
        cams.append(look_at_camera(eye, target, width, height, spec.focal))
    return cams


def generate_synthetic(
    spec: SceneSpec,
    n_train: int,
    n_test: int,
    resolution: int,
    seed: int,
    out_dir: str | Path,
) -> tuple[Path, Path]:
    """Write train/ and test/ datasets with GT normals and material labels.

    Returns the two manifest paths.
    """
    out_dir = Path(out_dir)
    splits = (
        ("train", n_train, 0.0, seed),
        ("test", n_test, math.pi / max(n_train, 1), seed + 1),
    )
    manifests = []
    for split, count, phase, split_seed in splits:
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        cams = camera_ring(spec, count, resolution, resolution, split_seed, phase)
        records = []
        for k, cam in enumerate(cams):
            light = PointLight(position=cam.center(), intensity=torch.tensor(spec.light_intensity))
            hit, points, normals, mats = trace(spec, cam)
            image = shade_analytic(spec, cam, light, hit, points, normals, mats)

            write_pfm(split_dir / f"img_{k:03d}.pfm", image.astype(np.float32))
            Image.fromarray((hit * 255).astype(np.uint8)).save(split_dir / f"mask_{k:03d}.png")
            write_pfm(split_dir / f"normal_{k:03d}.pfm", normals.astype(np.float32))
            Image.fromarray((mats + 1).astype(np.uint8)).save(split_dir / f"label_{k:03d}.png")

            records.append({
                "image": f"img_{k:03d}.pfm",
                "mask": f"mask_{k:03d}.png",
                "normals": f"normal_{k:03d}.pfm",
                "labels": f"label_{k:03d}.png",
                "width": cam.width, "height": cam.height,
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "rotation": cam.rotation.reshape(-1).tolist(),
                "translation": cam.translation.tolist(),
                "light_position": light.position.tolist(),
                "light_intensity": light.intensity.tolist(),
            })
        manifest = {
            "version": 1,
            "units": "meters",
            "scene": spec.name,
            "bounds": spec.bounds,
            "views": records,
        }
        path = split_dir / "manifest.json"
        save_manifest(path, manifest)
        manifests.append(path)
    return manifests[0], manifests[1]
