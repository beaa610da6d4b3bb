"""Gradients of scalar losses w.r.t. every learnable parameter.

The forward pass is recorded on the autograd tape; backward() materializes a
GradientStore keyed like the parameter store and hard-errors on non-finite
entries. check_gradients compares every analytic entry against central finite
differences of the full forward evaluation.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .losses import DetachedState, LossConfig, total_loss
from .render import RasterConfig, render_view
from .scene import BasisSet, GaussianCloud, PointLight, View, look_at_camera


class GradientError(RuntimeError):
    """Raised when a backward pass produces a non-finite gradient."""


def random_scene(
    n_gaussians: int, n_bases: int, resolution: int, seed: int,
    temperature: float = 0.0125,
) -> tuple[GaussianCloud, BasisSet, View]:
    """Small randomized scene for gradient audits and rasterizer equivalence tests.

    Weight logits are drawn at the softmax temperature scale so their
    gradients are exercised rather than saturated away.
    """
    rng = np.random.default_rng(seed)
    t = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float64))

    quats = rng.standard_normal((n_gaussians, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    cloud = GaussianCloud(
        positions=t(rng.uniform(-0.8, 0.8, (n_gaussians, 3))),
        quaternions=t(quats),
        scale_logits=t(rng.uniform(math.log(0.15), math.log(0.7), (n_gaussians, 2))),
        opacity_logits=t(rng.uniform(-1.0, 2.5, n_gaussians)),
        weight_logits=t(rng.standard_normal((n_gaussians, n_bases)) * temperature),
    )
    basis = BasisSet(
        color_logits=t(rng.uniform(-1.5, 1.5, (n_bases, 3))),
        roughness_logits=t(rng.uniform(-1.5, 1.5, n_bases)),
        metallic_logits=t(rng.uniform(-2.0, 2.0, n_bases)),
    )

    azimuth = rng.uniform(0, 2 * math.pi)
    elev = rng.uniform(0.3, 1.0)
    eye = 4.0 * np.array(
        [np.cos(elev) * np.cos(azimuth), np.cos(elev) * np.sin(azimuth), np.sin(elev)]
    )
    camera = look_at_camera(eye, np.zeros(3), resolution, resolution, focal=1.2 * resolution)
    light = PointLight(
        position=camera.center() + t(rng.uniform(-0.05, 0.05, 3)),
        intensity=t(rng.uniform(4.0, 10.0, 3) * 4.0),
    )
    view = View(
        camera=camera,
        light=light,
        image=t(rng.uniform(0.0, 1.0, (resolution, resolution, 3))),
        mask=t((rng.uniform(0, 1, (resolution, resolution)) > 0.4).astype(float)),
    )
    return cloud, basis, view


def parameter_dict(cloud: GaussianCloud, basis: BasisSet) -> dict[str, Tensor]:
    params = {f"gaussians.{k}": v for k, v in cloud.parameters().items()}
    params.update({f"basis.{k}": v for k, v in basis.parameters().items()})
    return params


@dataclass
class GradientStore:
    """One gradient slot per learnable scalar, keyed identically to the parameters."""

    grads: dict[str, Tensor]

    def __getitem__(self, key: str) -> Tensor:
        return self.grads[key]

    def keys(self):
        return self.grads.keys()

    def flat(self) -> dict[tuple[str, int], float]:
        out = {}
        for name, g in self.grads.items():
            for i, v in enumerate(g.reshape(-1).tolist()):
                out[(name, i)] = v
        return out

    def add(self, other: "GradientStore") -> "GradientStore":
        return GradientStore({k: self.grads[k] + other.grads[k] for k in self.grads})


def backward(loss: Tensor, params: dict[str, Tensor]) -> GradientStore:
    """d(loss)/d(theta) for every parameter tensor; zero where loss has no dependence."""
    for p in params.values():
        p.grad = None
    loss.backward()
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            bad = (~torch.isfinite(g)).nonzero()[0].tolist()
            raise GradientError(f"non-finite gradient in '{name}' at index {bad}")
        grads[name] = g.detach().clone()
    return GradientStore(grads)


def scene_loss(
    cloud: GaussianCloud,
    basis: BasisSet,
    view: View,
    loss_cfg: LossConfig,
    raster_cfg: RasterConfig,
    iteration: int,
    detached: DetachedState | None = None,
) -> Tensor:
    """Full forward pass: render the view and reduce to the weighted total loss."""
    out = render_view(cloud, basis, view.camera, view.light, loss_cfg.temperature, raster_cfg)
    return total_loss(out, view.image, view.mask, cloud, loss_cfg, iteration, detached).total


@dataclass
class GradCheckRow:
    key: str
    index: int
    analytic: float
    numeric: float
    abs_err: float
    rel_err: float
    ok: bool


@dataclass
class GradCheckReport:
    rows: list[GradCheckRow] = field(default_factory=list)
    step: float = 0.0
    rtol: float = 0.0
    atol: float = 0.0

    @property
    def n_checked(self) -> int:
        return len(self.rows)

    @property
    def failures(self) -> list[GradCheckRow]:
        return [r for r in self.rows if not r.ok]

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        return (
            f"checked {self.n_checked} parameters, {len(self.failures)} failed "
            f"(step={self.step:g}, rtol={self.rtol:g}, atol={self.atol:g})"
        )

    def to_text(self, failures_only: bool = False) -> str:
        lines = [f"{'parameter':<32} {'idx':>5} {'analytic':>14} {'numeric':>14} {'rel_err':>10} ok"]
        for r in self.rows:
            if failures_only and r.ok:
                continue
            lines.append(
                f"{r.key:<32} {r.index:>5} {r.analytic:>14.6e} {r.numeric:>14.6e} "
                f"{r.rel_err:>10.2e} {'y' if r.ok else 'N'}"
            )
        lines.append(self.summary())
        return "\n".join(lines)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["parameter", "index", "analytic", "numeric", "abs_err", "rel_err", "ok"])
            for r in self.rows:
                w.writerow([r.key, r.index, r.analytic, r.numeric, r.abs_err, r.rel_err, int(r.ok)])


def check_gradients(
    cloud: GaussianCloud,
    basis: BasisSet,
    view: View,
    loss_cfg: LossConfig,
    raster_cfg: RasterConfig = RasterConfig(),
    iteration: int = 1,
    step: float = 1e-4,
    rtol: float = 1e-3,
    atol: float = 1e-6,
    corrupt: tuple[str, int] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of the total loss against central differences.

    corrupt, when given, perturbs one analytic slot before comparison; used as
    a negative control in tests.
    """
    cloud.requires_grad_(True)
    basis.requires_grad_(True)
    params = parameter_dict(cloud, basis)
    detached = DetachedState()  # probes reuse the base point's detached pieces
    loss = scene_loss(cloud, basis, view, loss_cfg, raster_cfg, iteration, detached)
    store = backward(loss, params)
    if corrupt is not None:
        key, idx = corrupt
        store.grads[key].reshape(-1)[idx] += 1.0

    report = GradCheckReport(step=step, rtol=rtol, atol=atol)
    with torch.no_grad():
        for name, p in params.items():
            flat = p.reshape(-1)
            g = store[name].reshape(-1)
            for i in range(flat.numel()):
                saved = flat[i].item()
                flat[i] = saved + step
                hi = scene_loss(cloud, basis, view, loss_cfg, raster_cfg, iteration, detached).item()
                flat[i] = saved - step
                lo = scene_loss(cloud, basis, view, loss_cfg, raster_cfg, iteration, detached).item()
                flat[i] = saved
                numeric = (hi - lo) / (2.0 * step)
                analytic = g[i].item()
                abs_err = abs(analytic - numeric)
                rel_err = abs_err / max(abs(analytic), abs(numeric), 1e-30)
                ok = rel_err < rtol or abs_err < atol
                report.rows.append(
                    GradCheckRow(name, i, analytic, numeric, abs_err, rel_err, ok)
                )
    return report
