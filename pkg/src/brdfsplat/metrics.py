"""Quantitative evaluation: PSNR, SSIM, normal mean angular error."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .data import Dataset
from .losses import ssim
from .pfm import read_pfm
from .render import RasterConfig, render_view
from .scene import BasisSet, GaussianCloud, load_checkpoint

PSNR_CAP_DB = 99.0


def psnr(image: Tensor, reference: Tensor, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 99 dB."""
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch {tuple(image.shape)} vs {tuple(reference.shape)}")
    mse = float(((image - reference) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP_DB)


def normal_mae(normals: Tensor, reference: Tensor, mask: Tensor) -> float:
    """Mean angular error in degrees over mask > 0.5; both maps unit where masked."""
    sel = mask > 0.5
    if not bool(sel.any()):
        raise ValueError("empty evaluation mask")
    dots = (normals[sel] * reference[sel]).sum(-1).clamp(-1.0, 1.0)
    return float(torch.rad2deg(torch.arccos(dots)).mean())


def evaluate(
    checkpoint: str | Path | tuple[GaussianCloud, BasisSet],
    dataset: Dataset,
    out_dir: str | Path | None = None,
    temperature: float | None = None,
    raster_cfg: RasterConfig = RasterConfig(),
) -> dict:
    """Render every view of the dataset and score it against ground truth.

    MAE is computed over GT-mask AND rendered-alpha > 0.5 pixels, and omitted
    (with a note) when a view carries no ground-truth normals.
    """
    if isinstance(checkpoint, (str, Path)):
        cloud, basis, _, extra = load_checkpoint(checkpoint)
        if temperature is None:
            temperature = extra.get("temperature", 0.0125)
    else:
        cloud, basis = checkpoint
        if temperature is None:
            temperature = 0.0125

    rows = []
    notes = []
    for k, view in enumerate(dataset.views):
        with torch.no_grad():
            out = render_view(cloud, basis, view.camera, view.light, temperature, raster_cfg)
        row = {
            "view": k,
            "psnr": psnr(out.image, view.image),
            "ssim": float(ssim(out.image.clamp(0, 1), view.image.clamp(0, 1))[1]),
        }
        record = dataset.view_records[k]
        if record.get("normals"):
            gt = torch.from_numpy(read_pfm(dataset.root / record["normals"]).astype(np.float64))
            region = (view.mask > 0.5) & (out.alpha > 0.5)
            rendered = out.normal / out.normal.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            if bool(region.any()):
                row["normal_mae_deg"] = normal_mae(rendered, gt, region.to(torch.float64))
            else:
                notes.append(f"view {k}: no overlap between mask and rendered alpha")
        else:
            notes.append(f"view {k}: no ground-truth normals; MAE omitted")
        rows.append(row)

    report = {
        "n_views": len(rows),
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
        "per_view": rows,
        "notes": notes,
    }
    maes = [r["normal_mae_deg"] for r in rows if "normal_mae_deg" in r]
    if maes:
        report["mean_normal_mae_deg"] = float(np.mean(maes))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "eval.json", "w") as f:
            json.dump(report, f, indent=2)
        with open(out_dir / "eval.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["view", "psnr", "ssim", "normal_mae_deg"])
            writer.writeheader()
            for r in rows:
                writer.writerow(r)
    return report
