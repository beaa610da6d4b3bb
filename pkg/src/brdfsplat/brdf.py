"""Simplified Disney microfacet BRDF, basis mixtures, and halfway-angle curves.

Everything here is a pure function of tensors and broadcasts: geometry inputs
may be (..., 3) batches, material parameters scalars or (...,) batches.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import Tensor

# cosine clamp used inside the specular denominator; callers zero out
# contributions where n.i or n.o fall below this
COS_EPS = 1e-4


def normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp_min(eps)


class ShadingGeometry(NamedTuple):
    """Unit incident/outgoing/normal directions plus the normalized halfway vector."""

    incident: Tensor  # (..., 3) surface -> light
    outgoing: Tensor  # (..., 3) surface -> camera
    normal: Tensor  # (..., 3)
    halfway: Tensor  # (..., 3)

    @staticmethod
    def from_directions(incident: Tensor, outgoing: Tensor, normal: Tensor) -> "ShadingGeometry":
        return ShadingGeometry(incident, outgoing, normal, normalize(incident + outgoing))


def ndf_d(cos_hn: Tensor, roughness: Tensor) -> Tensor:
    """Spherical-Gaussian normal distribution: (1/(pi s^2)) exp((2/s^2)(cos_hn - 1))."""
    s2 = roughness * roughness
    return torch.exp((2.0 / s2) * (cos_hn - 1.0)) / (math.pi * s2)


def fresnel_f(cos_oh: Tensor, base_color: Tensor, metallic: Tensor) -> Tensor:
    """Schlick Fresnel with F0 = 0.04 (1 - m) + m b. Returns rgb (..., 3)."""
    if not torch.is_tensor(metallic):
        metallic = torch.as_tensor(metallic, dtype=base_color.dtype)
    f0 = 0.04 * (1.0 - metallic.unsqueeze(-1)) + metallic.unsqueeze(-1) * base_color
    p = (1.0 - cos_oh).clamp(0.0, 1.0)
    return f0 + (1.0 - f0) * (p**5).unsqueeze(-1)


def ggx_smith(z: Tensor, roughness: Tensor) -> Tensor:
    """Single GGX attenuation factor z / ((1 - a) z + a) with a = (1 + s)^2 / 8."""
    a = (1.0 + roughness) ** 2 / 8.0
    return z / ((1.0 - a) * z + a)


def geom_g(cos_in: Tensor, cos_on: Tensor, roughness: Tensor) -> Tensor:
    return ggx_smith(cos_in, roughness) * ggx_smith(cos_on, roughness)


def eval_basis(
    geom: ShadingGeometry,
    base_color: Tensor,
    roughness: Tensor,
    metallic: Tensor,
) -> Tensor:
    """BRDF value ((1-m)/pi) b + D F G / (4 (n.i)(n.o)) as rgb (..., 3).

    The (n.i)(n.o) denominator is clamped to COS_EPS; contributions where the
    true cosines are nonpositive must be zeroed by the caller.
    """
    if not torch.is_tensor(metallic):
        metallic = torch.as_tensor(metallic, dtype=base_color.dtype)
    if not torch.is_tensor(roughness):
        roughness = torch.as_tensor(roughness, dtype=base_color.dtype)
    cos_hn = (geom.halfway * geom.normal).sum(-1).clamp(-1.0, 1.0)
    cos_oh = (geom.outgoing * geom.halfway).sum(-1).clamp(0.0, 1.0)
    cos_in = (geom.incident * geom.normal).sum(-1).clamp_min(COS_EPS)
    cos_on = (geom.outgoing * geom.normal).sum(-1).clamp_min(COS_EPS)

    diffuse = ((1.0 - metallic) / math.pi).unsqueeze(-1) * base_color
    d = ndf_d(cos_hn, roughness)
    f = fresnel_f(cos_oh, base_color, metallic)
    g = geom_g(cos_in, cos_on, roughness)
    specular = (d * g / (4.0 * cos_in * cos_on)).unsqueeze(-1) * f
    return diffuse + specular


def eval_all_bases(geom: ShadingGeometry, basis) -> Tensor:
    """Evaluate every basis BRDF at the given geometry.

    geom entries: (..., 3). Returns (..., N, 3).
    """
    inc = geom.incident.unsqueeze(-2)
    out = geom.outgoing.unsqueeze(-2)
    nrm = geom.normal.unsqueeze(-2)
    hlf = geom.halfway.unsqueeze(-2)
    g = ShadingGeometry(inc, out, nrm, hlf)
    return eval_basis(g, basis.base_colors(), basis.roughness(), basis.metallic())


def eval_mixture(geom: ShadingGeometry, weights: Tensor, basis) -> Tensor:
    """Weighted blend sum_i w_i f_i; weights (..., N) should sum to 1."""
    if weights.shape[-1] != len(basis):
        raise ValueError(f"{weights.shape[-1]} weights for {len(basis)} bases")
    values = eval_all_bases(geom, basis)  # (..., N, 3)
    return (weights.unsqueeze(-1) * values).sum(dim=-2)


def halfway_angles(count: int) -> Tensor:
    """count angles uniformly spanning [0, pi/2)."""
    if count < 2:
        raise ValueError("need at least 2 halfway samples")
    return torch.arange(count, dtype=torch.float64) * (math.pi / 2.0) / count


def sample_halfway_curve(
    base_color: Tensor, roughness: Tensor, metallic: Tensor, count: int
) -> Tensor:
    """Reflectance curve (count, 3) over halfway angles in the co-located setup.

    Co-located flash means i = o, so the halfway vector equals both and the
    halfway angle is the angle between them and the normal.
    """
    theta = halfway_angles(count)
    n = torch.zeros((count, 3), dtype=torch.float64)
    n[:, 2] = 1.0
    d = torch.stack([torch.sin(theta), torch.zeros_like(theta), torch.cos(theta)], dim=-1)
    geom = ShadingGeometry.from_directions(d, d, n)
    return eval_basis(geom, base_color, roughness, metallic)


def basis_curves(basis, count: int) -> Tensor:
    """Stacked halfway curves for a whole BasisSet: (N, count, 3)."""
    colors = basis.base_colors()
    rough = basis.roughness()
    metal = basis.metallic()
    return torch.stack(
        [sample_halfway_curve(colors[i], rough[i], metal[i], count) for i in range(len(basis))]
    )
