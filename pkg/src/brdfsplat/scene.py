"""Persistent scene state: Gaussian surfels, basis BRDFs, cameras, lights, views.

All learnable quantities are stored as unconstrained logits and mapped into
their valid domains at read time (exp for scales, sigmoid for opacity/color,
temperature softmax for blending weights).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

DTYPE = torch.float64

ROUGHNESS_FLOOR = 0.01

CHECKPOINT_VERSION = 1


def quaternion_to_rotation(q: Tensor) -> Tensor:
    """Unit-normalize quaternions (w, x, y, z) and convert to rotation matrices.

    q: (..., 4) -> (..., 3, 3). Columns are the tangent axes t_a, t_b and the
    normal direction t_c.
    """
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = torch.unbind(q, dim=-1)
    rot = torch.stack(
        [
            1 - 2 * (y * y + z * z),
            2 * (x * y - w * z),
            2 * (x * z + w * y),
            2 * (x * y + w * z),
            1 - 2 * (x * x + z * z),
            2 * (y * z - w * x),
            2 * (x * z - w * y),
            2 * (y * z + w * x),
            1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return rot.reshape(q.shape[:-1] + (3, 3))


def temperature_softmax(logits: Tensor, temperature: float) -> Tensor:
    """softmax(logits / T) along the last dim; max-subtraction via torch.softmax."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return torch.softmax(logits / temperature, dim=-1)


def logits_from_weights(weights: Tensor, temperature: float, floor: float = 1e-12) -> Tensor:
    """Inverse of temperature_softmax up to the softmax shift invariance."""
    return temperature * torch.log(weights.clamp_min(floor))


@dataclass
class GaussianCloud:
    """Struct-of-arrays store for all 2D Gaussian surfels.

    positions:      (n, 3) world-space centers
    quaternions:    (n, 4) (w, x, y, z); unit norm after every optimizer step
    scale_logits:   (n, 2) log of the tangent-axis extents s_a, s_b
    opacity_logits: (n,)   sigmoid -> opacity in (0, 1)
    weight_logits:  (n, N) blending-weight logits, N = live basis count
    """

    positions: Tensor
    quaternions: Tensor
    scale_logits: Tensor
    opacity_logits: Tensor
    weight_logits: Tensor

    def __post_init__(self):
        n = self.positions.shape[0]
        for name in ("quaternions", "scale_logits", "opacity_logits", "weight_logits"):
            t = getattr(self, name)
            if t.shape[0] != n:
                raise ValueError(f"{name} has {t.shape[0]} rows, expected {n}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n_bases(self) -> int:
        return self.weight_logits.shape[1]

    def scales(self) -> Tensor:
        return torch.exp(self.scale_logits)

    def opacities(self) -> Tensor:
        return torch.sigmoid(self.opacity_logits)

    def rotations(self) -> Tensor:
        return quaternion_to_rotation(self.quaternions)

    def tangent_frames(self) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (t_a, t_b, n) each (n, 3); n = t_a x t_b."""
        rot = self.rotations()
        t_a = rot[..., :, 0]
        t_b = rot[..., :, 1]
        normal = torch.cross(t_a, t_b, dim=-1)
        return t_a, t_b, normal

    def normals(self) -> Tensor:
        return self.tangent_frames()[2]

    def effective_weights(self, temperature: float) -> Tensor:
        return temperature_softmax(self.weight_logits, temperature)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "positions": self.positions,
            "quaternions": self.quaternions,
            "scale_logits": self.scale_logits,
            "opacity_logits": self.opacity_logits,
            "weight_logits": self.weight_logits,
        }

    def requires_grad_(self, flag: bool = True) -> "GaussianCloud":
        for t in self.parameters().values():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.detach().clone() for k, v in self.parameters().items()})

    def select(self, idx: Tensor) -> "GaussianCloud":
        """New cloud with rows gathered by idx (detached leaves)."""
        return GaussianCloud(**{k: v.detach()[idx].clone() for k, v in self.parameters().items()})


def gaussian_normal(quaternion: Tensor) -> Tensor:
    """Surfel normal t_a x t_b for a single quaternion (4,) -> (3,)."""
    rot = quaternion_to_rotation(quaternion.reshape(1, 4))[0]
    return torch.cross(rot[:, 0], rot[:, 1], dim=-1)


def resize_weight_vectors(
    weight_logits: Tensor,
    index_map: list[int | None],
    new_n: int,
    temperature: float,
    renormalize: bool = True,
) -> Tensor:
    """Remap per-Gaussian weight vectors after a basis merge/removal.

    index_map[i] is the new index of old basis i, or None for a dropped basis.
    Entries mapping to the same new index are summed in probability space;
    dropped mass is renormalized across survivors (or discarded when
    renormalize=False). Returns new (n, new_n) logits.
    """
    old_n = weight_logits.shape[1]
    if len(index_map) != old_n:
        raise ValueError(f"index_map has {len(index_map)} entries for {old_n} bases")
    targets = [m for m in index_map if m is not None]
    if sorted(set(targets)) != list(range(new_n)):
        raise ValueError(f"index_map {index_map} is not a surjection onto 0..{new_n - 1}")

    weights = temperature_softmax(weight_logits.detach(), temperature)
    combined = weights.new_zeros((weights.shape[0], new_n))
    for old, new in enumerate(index_map):
        if new is not None:
            combined[:, new] += weights[:, old]
    if renormalize:
        combined = combined / combined.sum(dim=1, keepdim=True).clamp_min(1e-12)
    return logits_from_weights(combined, temperature)


@dataclass
class BasisSet:
    """Live collection of basis BRDFs, stored as logits.

    color_logits:     (N, 3) sigmoid -> base color in (0, 1)
    roughness_logits: (N,)   sigmoid -> roughness in (ROUGHNESS_FLOOR, 1)
    metallic_logits:  (N,)   sigmoid -> metallic in (0, 1)
    """

    color_logits: Tensor
    roughness_logits: Tensor
    metallic_logits: Tensor

    def __post_init__(self):
        if len(self) < 1:
            raise ValueError("a BasisSet needs at least one basis")
        if self.roughness_logits.shape[0] != len(self) or self.metallic_logits.shape[0] != len(self):
            raise ValueError("basis parameter arrays disagree on N")

    def __len__(self) -> int:
        return self.color_logits.shape[0]

    def base_colors(self) -> Tensor:
        return torch.sigmoid(self.color_logits)

    def roughness(self) -> Tensor:
        return ROUGHNESS_FLOOR + (1.0 - ROUGHNESS_FLOOR) * torch.sigmoid(self.roughness_logits)

    def metallic(self) -> Tensor:
        return torch.sigmoid(self.metallic_logits)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "color_logits": self.color_logits,
            "roughness_logits": self.roughness_logits,
            "metallic_logits": self.metallic_logits,
        }

    def requires_grad_(self, flag: bool = True) -> "BasisSet":
        for t in self.parameters().values():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "BasisSet":
        return BasisSet(**{k: v.detach().clone() for k, v in self.parameters().items()})

    def select(self, keep: list[int]) -> "BasisSet":
        idx = torch.as_tensor(keep, dtype=torch.long)
        return BasisSet(**{k: v.detach()[idx].clone() for k, v in self.parameters().items()})

    @staticmethod
    def from_values(colors, roughness, metallic) -> "BasisSet":
        """Build logits that map back to the given constrained values."""
        colors = torch.as_tensor(colors, dtype=DTYPE).reshape(-1, 3)
        roughness = torch.as_tensor(roughness, dtype=DTYPE).reshape(-1)
        metallic = torch.as_tensor(metallic, dtype=DTYPE).reshape(-1)
        rough_unit = (roughness - ROUGHNESS_FLOOR) / (1.0 - ROUGHNESS_FLOOR)
        return BasisSet(
            color_logits=torch.logit(colors.clamp(1e-6, 1 - 1e-6)),
            roughness_logits=torch.logit(rough_unit.clamp(1e-6, 1 - 1e-6)),
            metallic_logits=torch.logit(metallic.clamp(1e-6, 1 - 1e-6)),
        )


@dataclass
class Camera:
    """Pinhole camera. world-to-camera: x_cam = R @ x_world + t."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: Tensor  # (3, 3)
    translation: Tensor  # (3,)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        self.rotation = torch.as_tensor(self.rotation, dtype=DTYPE).reshape(3, 3)
        self.translation = torch.as_tensor(self.translation, dtype=DTYPE).reshape(3)
        err = (self.rotation @ self.rotation.T - torch.eye(3, dtype=DTYPE)).abs().max()
        if err > 1e-6:
            raise ValueError(f"camera rotation is not orthonormal (max err {err:.2e})")

    def center(self) -> Tensor:
        """Camera center in world coordinates."""
        return -(self.rotation.T @ self.translation)

    def forward_axis(self) -> Tensor:
        """World-space optical axis (+z of the camera frame)."""
        return self.rotation.T @ torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE)

    def to_camera(self, points: Tensor) -> Tensor:
        return points @ self.rotation.T + self.translation

    def project(self, points: Tensor) -> tuple[Tensor, Tensor]:
        """World points (m, 3) -> pixel coords (m, 2) and camera-frame depth (m,)."""
        cam = self.to_camera(points)
        z = cam[:, 2]
        u = self.fx * cam[:, 0] / z + self.cx
        v = self.fy * cam[:, 1] / z + self.cy
        return torch.stack([u, v], dim=-1), z


def look_at_camera(
    eye, target, width: int, height: int, focal: float
) -> Camera:
    """Camera at eye looking toward target, z-up world, principal point centered."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])  # world-to-camera rows
    trans = -rot @ eye
    return Camera(
        fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
        width=width, height=height,
        rotation=torch.from_numpy(rot), translation=torch.from_numpy(trans),
    )


@dataclass
class PointLight:
    position: Tensor  # (3,)
    intensity: Tensor  # (3,) radiant intensity, >= 0

    def __post_init__(self):
        self.position = torch.as_tensor(self.position, dtype=DTYPE).reshape(3)
        self.intensity = torch.as_tensor(self.intensity, dtype=DTYPE).reshape(3)
        if (self.intensity < 0).any():
            raise ValueError("light intensity must be nonnegative")


@dataclass
class View:
    """One flash photograph: camera, co-located point light, HDR image, mask."""

    camera: Camera
    light: PointLight
    image: Tensor  # (H, W, 3) linear
    mask: Tensor  # (H, W) in [0, 1]

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        if tuple(self.image.shape) != (h, w, 3):
            raise ValueError(f"image shape {tuple(self.image.shape)} != camera dims {(h, w, 3)}")
        if tuple(self.mask.shape) != (h, w):
            raise ValueError(f"mask shape {tuple(self.mask.shape)} != camera dims {(h, w)}")
        if not torch.isfinite(self.image).all():
            raise ValueError("image contains non-finite values")
        if (self.image < 0).any():
            raise ValueError("image contains negative values")


# ---------------------------------------------------------------------------
# Checkpoints
#
# A checkpoint is a .npz archive; layout (all float64 unless noted):
#   meta                utf-8 JSON: {"version", "n_gaussians", "n_bases", "extra"}
#   gaussians/<field>   cloud arrays (positions, quaternions, scale_logits,
#                       opacity_logits, weight_logits)
#   basis/<field>       basis arrays (color_logits, roughness_logits, metallic_logits)
#   adam/<name>/m, /v   first/second Adam moments per parameter (optional)
#   adam/step           int64 scalar (optional)
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    cloud: GaussianCloud,
    basis: BasisSet,
    adam_state: dict | None = None,
    extra: dict | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for k, v in cloud.parameters().items():
        arrays[f"gaussians/{k}"] = v.detach().cpu().numpy()
    for k, v in basis.parameters().items():
        arrays[f"basis/{k}"] = v.detach().cpu().numpy()
    if adam_state is not None:
        for name, (m, v) in adam_state["moments"].items():
            arrays[f"adam/{name}/m"] = m.detach().cpu().numpy()
            arrays[f"adam/{name}/v"] = v.detach().cpu().numpy()
        arrays["adam/step"] = np.asarray(adam_state["step"], dtype=np.int64)
    meta = {
        "version": CHECKPOINT_VERSION,
        "n_gaussians": len(cloud),
        "n_bases": len(basis),
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8).copy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> tuple[GaussianCloud, BasisSet, dict | None, dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cloud = GaussianCloud(
            **{k: torch.from_numpy(z[f"gaussians/{k}"].copy()) for k in (
                "positions", "quaternions", "scale_logits", "opacity_logits", "weight_logits")}
        )
        basis = BasisSet(
            **{k: torch.from_numpy(z[f"basis/{k}"].copy()) for k in (
                "color_logits", "roughness_logits", "metallic_logits")}
        )
        adam_state = None
        moment_keys = [k for k in z.files if k.startswith("adam/") and k.endswith("/m")]
        if moment_keys:
            moments = {}
            for k in moment_keys:
                name = k[len("adam/"):-len("/m")]
                moments[name] = (
                    torch.from_numpy(z[f"adam/{name}/m"].copy()),
                    torch.from_numpy(z[f"adam/{name}/v"].copy()),
                )
            adam_state = {"moments": moments, "step": int(z["adam/step"])}
    return cloud, basis, adam_state, meta["extra"]
