"""Coordinate spaces: perspective NDC projection and its inverse,
displacement transport between world and NDC, density transformation,
and finite-difference step sizes.

World coordinates are camera-aligned: the reference (first) camera looks
down -z, so visible points have z < 0.  NDC maps the frustum between the
near and far planes into [-1, 1]^3.

All transforms are written with plain arithmetic so they accept either
numpy arrays or autodiff Tensors (shape [..., 3]).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad


class CoordinateError(ValueError):
    pass


class BehindCamera(CoordinateError):
    pass


class DegenerateDepth(CoordinateError):
    pass


class SingularJacobian(CoordinateError):
    pass


class Space(Enum):
    NDC = "ndc"
    WORLD = "world"


@dataclass(frozen=True)
class NdcCamera:
    """Frustum bounds of the reference camera: near/far planes and the
    right/top extents of the near plane."""

    near: float
    far: float
    right: float
    top: float

    def __post_init__(self):
        if not (self.near > 0.0 and self.far > self.near):
            raise CoordinateError("require 0 < near < far")
        if not (self.right > 0.0 and self.top > 0.0):
            raise CoordinateError("right/top bounds must be positive")

    @classmethod
    def from_intrinsics(cls, near, far, width, height, fx, fy):
        # Near-plane extents matching the image border of the reference view.
        return cls(near=near, far=far,
                   right=near * width / (2.0 * fx),
                   top=near * height / (2.0 * fy))


@dataclass(frozen=True)
class SpacetimePoint:
    position: np.ndarray
    time: float
    space: Space = Space.NDC


def _components(p):
    if isinstance(p, ad.Tensor):
        return p[..., 0], p[..., 1], p[..., 2]
    p = np.asarray(p, dtype=np.float64)
    return p[..., 0], p[..., 1], p[..., 2]


def _pack(x, y, z):
    if isinstance(x, ad.Tensor) or isinstance(y, ad.Tensor) or isinstance(z, ad.Tensor):
        return ad.stack([ad.astensor(x), ad.astensor(y), ad.astensor(z)], axis=-1)
    return np.stack([np.asarray(x), np.asarray(y), np.asarray(z)], axis=-1)


def _values(x):
    return x.value if isinstance(x, ad.Tensor) else np.asarray(x)


def world_to_ndc(p, cam: NdcCamera):
    """Project camera-aligned world points (z < 0) into NDC."""
    x, y, z = _components(p)
    neg_z = -z
    if np.any(_values(neg_z) <= 0.0):
        raise BehindCamera("point at or behind the camera plane (-z <= 0)")
    n, f = cam.near, cam.far
    xn = (n / cam.right) * x / neg_z
    yn = (n / cam.top) * y / neg_z
    zn = (f + n) / (f - n) - (2.0 * f * n / (f - n)) / neg_z
    return _pack(xn, yn, zn)


def ndc_to_world(p, cam: NdcCamera):
    """Invert the NDC projection.  z_ndc = -1 maps to the near plane and
    z_ndc = +1 to the far plane."""
    xn, yn, zn = _components(p)
    n, f = cam.near, cam.far
    denom = (f + n) - zn * (f - n)
    if np.any(np.abs(_values(denom)) < 1e-12):
        raise DegenerateDepth("depth inversion denominator vanishes")
    neg_z = 2.0 * f * n / denom
    x = neg_z * xn * cam.right / n
    y = neg_z * yn * cam.top / n
    return _pack(x, y, -neg_z)


def displace_in_ndc(p, d_world, cam: NdcCamera):
    """NDC displacement equivalent to adding ``d_world`` in world space."""
    w = ndc_to_world(p, cam)
    moved = world_to_ndc(w + d_world, cam)
    return moved - p


def jacobian_fd(transform, p, h=1e-5):
    """3x3 Jacobian of ``transform`` at ``p`` by central differences.

    Accepts batched points [..., 3]; returns [..., 3, 3]."""
    p = np.asarray(p, dtype=np.float64)
    cols = []
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        cols.append((np.asarray(transform(p + e)) - np.asarray(transform(p - e))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def density_to_world(sigma_ndc, p, cam: NdcCamera, C=1.0, transform=None):
    """Convert a density defined per unit NDC volume to world space:
    sigma_world = C * sigma_ndc / |det J_g(p)| with g = ndc_to_world.

    ``transform`` overrides g (used by tests with synthetic maps);
    ``sigma_ndc`` may be a Tensor, the Jacobian is position-only."""
    if np.any(_values(sigma_ndc) < 0.0):
        raise ValueError("density must be nonnegative")
    if transform is None:
        transform = lambda q: ndc_to_world(q, cam)
    det = np.linalg.det(jacobian_fd(transform, p))
    if np.any(np.abs(det) < 1e-12):
        raise SingularJacobian("transform Jacobian is singular")
    return sigma_ndc * (C / np.abs(det))


def epsilon_world(p, eps_ndc, axis, cam: NdcCamera, transform=None):
    """World-space half chord length of a +-eps_ndc offset along ``axis``.

    ``axis`` is 0, 1, 2 or one of 'x', 'y', 'z'.  Batched points give a
    per-point array."""
    if isinstance(axis, str):
        axis = "xyz".index(axis)
    if eps_ndc <= 0.0:
        raise ValueError("eps_ndc must be positive")
    if transform is None:
        transform = lambda q: ndc_to_world(q, cam)
    p = np.asarray(p, dtype=np.float64)
    e = np.zeros(3)
    e[axis] = eps_ndc
    chord = np.asarray(transform(p + e)) - np.asarray(transform(p - e))
    return 0.5 * np.linalg.norm(chord, axis=-1)


def spatial_epsilon(grid_res, lambda_scale=0.2):
    """NDC finite-difference step tied to the voxel resolution: 2*lambda/X."""
    if grid_res < 2:
        raise ValueError("resolution must be >= 2")
    return 2.0 * lambda_scale / grid_res


def temporal_epsilon(time_res, lambda_scale=0.2):
    if time_res < 2:
        raise ValueError("resolution must be >= 2")
    return 2.0 * lambda_scale / time_res
