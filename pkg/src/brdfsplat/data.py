"""Dataset manifests, image and mask I/O, point initialization, disk output.

A dataset is a manifest.json next to its image files:

    {
      "version": 1,
      "units": "meters",
      "bounds": [[x0, y0, z0], [x1, y1, z1]],        # optional sampling box
      "points": "init_points.npy",                    # optional (m, 3) array
      "views": [
        {"image": "img_000.pfm", "mask": "mask_000.png",
         "width": 64, "height": 64,
         "fx": 80.0, "fy": 80.0, "cx": 32.0, "cy": 32.0,
         "rotation": [r00, r01, ..., r22],            # world-to-camera, row major
         "translation": [tx, ty, tz],
         "light_position": [x, y, z],
         "light_intensity": [r, g, b],
         "normals": "normal_000.pfm",                 # optional ground truth
         "labels": "label_000.png"}                   # optional material ids
      ]
    }

PFM images are read as-is (linear); 8-bit PNG images pass through the sRGB
EOTF. Masks map to [0, 1] without de-gamma.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .pfm import read_pfm, write_pfm
from .render import RenderOutput
from .scene import Camera, PointLight, View

MANIFEST_VERSION = 1


class DatasetError(ValueError):
    """Base for everything wrong with a dataset on disk."""


class SchemaError(DatasetError):
    pass


class FileMissingError(DatasetError):
    pass


class DimensionError(DatasetError):
    pass


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, x * 12.92, 1.055 * x ** (1 / 2.4) - 0.055)


def _load_image(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileMissingError(f"image file missing: {path}")
    if path.suffix.lower() == ".pfm":
        data = read_pfm(path)
        if data.ndim == 2:
            data = np.repeat(data[..., None], 3, axis=2)
        return data.astype(np.float64)
    raw = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(raw)


def _load_mask(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileMissingError(f"mask file missing: {path}")
    if path.suffix.lower() == ".pfm":
        data = read_pfm(path)
        if data.ndim == 3:
            data = data.mean(axis=2)
        return np.clip(data.astype(np.float64), 0.0, 1.0)
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


@dataclass
class Dataset:
    views: list[View]
    points: np.ndarray | None
    bounds: np.ndarray | None  # (2, 3) sampling box
    view_records: list[dict]  # raw manifest entries (for gt normals/labels)
    root: Path


def _require(record: dict, key: str, context: str):
    if key not in record:
        raise SchemaError(f"{context}: missing key '{key}'")
    return record[key]


def load_dataset(manifest_path: str | Path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileMissingError(f"manifest missing: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("version") != MANIFEST_VERSION:
        raise SchemaError(f"unsupported manifest version {manifest.get('version')}")
    records = _require(manifest, "views", "manifest")
    if not isinstance(records, list) or not records:
        raise SchemaError("manifest has an empty view list")
    root = manifest_path.parent

    views: list[View] = []
    for k, rec in enumerate(records):
        ctx = f"view {k}"
        camera = Camera(
            fx=float(_require(rec, "fx", ctx)),
            fy=float(_require(rec, "fy", ctx)),
            cx=float(_require(rec, "cx", ctx)),
            cy=float(_require(rec, "cy", ctx)),
            width=int(_require(rec, "width", ctx)),
            height=int(_require(rec, "height", ctx)),
            rotation=torch.tensor(_require(rec, "rotation", ctx), dtype=torch.float64).reshape(3, 3),
            translation=torch.tensor(_require(rec, "translation", ctx), dtype=torch.float64),
        )
        light = PointLight(
            position=torch.tensor(_require(rec, "light_position", ctx), dtype=torch.float64),
            intensity=torch.tensor(_require(rec, "light_intensity", ctx), dtype=torch.float64),
        )
        image = _load_image(root / _require(rec, "image", ctx))
        mask = _load_mask(root / _require(rec, "mask", ctx))
        if image.shape[:2] != (camera.height, camera.width):
            raise DimensionError(
                f"{ctx}: image is {image.shape[:2]}, camera says "
                f"{(camera.height, camera.width)}"
            )
        if mask.shape != (camera.height, camera.width):
            raise DimensionError(f"{ctx}: mask is {mask.shape}, expected camera dims")
        views.append(View(camera=camera, light=light,
                          image=torch.from_numpy(np.ascontiguousarray(image)),
                          mask=torch.from_numpy(np.ascontiguousarray(mask))))

    centers = torch.stack([v.camera.center() for v in views])
    scene_scale = float((centers - centers.mean(0)).norm(dim=-1).max().clamp_min(1e-9))
    for k, v in enumerate(views):
        offset = float((v.light.position - v.camera.center()).norm())
        if offset > 0.01 * scene_scale:
            warnings.warn(
                f"view {k}: light sits {offset:.4g} from the camera center "
                f"(> 1% of scene scale {scene_scale:.4g}); expected co-located flash"
            )

    points = None
    if manifest.get("points"):
        ppath = root / manifest["points"]
        if not ppath.exists():
            raise FileMissingError(f"point cloud missing: {ppath}")
        points = np.load(ppath)
        if points.ndim != 2 or points.shape[1] != 3:
            raise SchemaError(f"point cloud must be (m, 3), got {points.shape}")
    bounds = np.asarray(manifest["bounds"], dtype=np.float64) if manifest.get("bounds") else None
    if bounds is not None and bounds.shape != (2, 3):
        raise SchemaError(f"bounds must be (2, 3), got {bounds.shape}")
    return Dataset(views=views, points=points, bounds=bounds, view_records=records,
                   root=root)


def save_manifest(path: str | Path, manifest: dict) -> None:
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)


def visual_hull_init(
    views: list[View],
    n_points: int,
    bounds: np.ndarray,
    seed: int,
    inlier_fraction: float = 0.95,
    max_batches: int = 1000,
) -> np.ndarray:
    """Uniform samples inside bounds kept when their projections land inside
    the foreground mask in >= inlier_fraction of the views that see them."""
    if not views:
        raise DatasetError("visual hull needs at least one view")
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    rng = np.random.default_rng(seed)
    masks = [v.mask.numpy() > 0.5 for v in views]
    cams = [(v.camera.rotation.numpy(), v.camera.translation.numpy(), v.camera) for v in views]

    accepted: list[np.ndarray] = []
    total = 0
    for _ in range(max_batches):
        batch = rng.uniform(bounds[0], bounds[1], size=(max(4 * n_points, 1024), 3))
        in_frame = np.zeros(batch.shape[0], dtype=np.int64)
        inside = np.zeros(batch.shape[0], dtype=np.int64)
        for mask, (rot, trans, cam) in zip(masks, cams):
            cam_pts = batch @ rot.T + trans
            z = cam_pts[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                u = cam.fx * cam_pts[:, 0] / z + cam.cx
                v = cam.fy * cam_pts[:, 1] / z + cam.cy
            vis = (z > 1e-9) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
            in_frame += vis
            ui = np.clip(u[vis].astype(np.int64), 0, cam.width - 1)
            vi = np.clip(v[vis].astype(np.int64), 0, cam.height - 1)
            hit = np.zeros(batch.shape[0], dtype=bool)
            hit[vis] = mask[vi, ui]
            inside += hit
        seen = in_frame > 0
        good = seen & (inside >= inlier_fraction * in_frame)
        accepted.append(batch[good])
        total += int(good.sum())
        if total >= n_points:
            break
    points = np.concatenate(accepted) if accepted else np.zeros((0, 3))
    if points.shape[0] == 0:
        raise DatasetError(
            "visual hull accepted zero points; masks may be empty or bounds too small"
        )
    return points[:n_points]


def render_outputs_to_disk(out: RenderOutput, directory: str | Path, stem: str = "view") -> list[Path]:
    """Radiance as PFM + tonemapped PNG, normals/alpha/weights as PNG, depth as PFM."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def _png(name: str, array: np.ndarray) -> None:
        path = directory / name
        Image.fromarray(array).save(path)
        written.append(path)

    radiance = out.image.detach().numpy()
    write_pfm(directory / f"{stem}_radiance.pfm", radiance)
    written.append(directory / f"{stem}_radiance.pfm")
    _png(f"{stem}_radiance.png",
         (linear_to_srgb(radiance) * 255.0 + 0.5).astype(np.uint8))

    normal = out.normal.detach().numpy()
    _png(f"{stem}_normal.png",
         np.clip((normal * 0.5 + 0.5) * 255.0 + 0.5, 0, 255).astype(np.uint8))

    alpha = out.alpha.detach().numpy()
    _png(f"{stem}_alpha.png", np.clip(alpha * 255.0 + 0.5, 0, 255).astype(np.uint8))

    write_pfm(directory / f"{stem}_depth.pfm", out.depth.detach().numpy())
    written.append(directory / f"{stem}_depth.pfm")

    weights = out.weight_images.detach().numpy()
    for i in range(weights.shape[0]):
        _png(f"{stem}_weight_{i:02d}.png",
             np.clip(weights[i] * 255.0 + 0.5, 0, 255).astype(np.uint8))
    return written


def write_basis_swatches(basis, directory: str | Path, size: int = 64) -> list[Path]:
    """One shaded-sphere preview PNG per basis, lit head-on (co-located setup)."""
    from . import brdf

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (xs + 0.5) / size * 2.0 - 1.0
    v = (ys + 0.5) / size * 2.0 - 1.0
    r2 = u * u + v * v
    hit = r2 <= 1.0
    nz = np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
    normals = np.stack([u, -v, nz], axis=-1)

    n = torch.from_numpy(normals[hit])
    d = torch.zeros_like(n)
    d[:, 2] = 1.0
    geom = brdf.ShadingGeometry.from_directions(d, d, n)
    written = []
    colors = basis.base_colors()
    rough = basis.roughness()
    metal = basis.metallic()
    with torch.no_grad():
        for i in range(len(basis)):
            values = brdf.eval_basis(geom, colors[i], rough[i], metal[i])
            lambert = n[:, 2].clamp_min(0.0).unsqueeze(-1)
            image = np.zeros((size, size, 3))
            image[hit] = (values * lambert).numpy()
            path = directory / f"basis_{i:02d}.png"
            Image.fromarray(
                (linear_to_srgb(image) * 255.0 + 0.5).astype(np.uint8)
            ).save(path)
            written.append(path)
    return written
