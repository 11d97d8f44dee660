"""Kinematic field and the physics losses built on it.

The field maps NDC spacetime points to world-space velocity,
acceleration, jerk (and optionally snap, crackle).  Spatial derivatives
are central differences taken along world axes with the voxel-derived
step converted to world units; time derivatives stay in the native time
axis.  Stencil points that leave the domain mask out the whole sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import coords
from .tensor_fields import DecomposedVolume
from .radiance import MlpHead

MAX_ORDER = 5
_FACTORIALS = np.array([1.0, 1.0, 2.0, 6.0, 24.0, 120.0])


class StencilOutOfBounds(ValueError):
    pass


@dataclass
class KinematicSample:
    v: np.ndarray
    a: np.ndarray
    j: np.ndarray
    s: np.ndarray
    c: np.ndarray
    order: int

    @classmethod
    def from_vector(cls, q, order):
        q = np.asarray(q, dtype=np.float64).reshape(MAX_ORDER, 3).copy()
        q[order:] = 0.0
        return cls(v=q[0], a=q[1], j=q[2], s=q[3], c=q[4], order=order)

    def as_vector(self):
        return np.concatenate([self.v, self.a, self.j, self.s, self.c])


@dataclass
class StrainRate:
    D: np.ndarray


@dataclass
class EpsilonConfig:
    """Finite-difference steps, tied to the current grid resolution."""
    eps_ndc: float
    eps_t: float

    @classmethod
    def from_resolution(cls, spatial_res, time_res, lambda_scale=0.2):
        return cls(eps_ndc=coords.spatial_epsilon(spatial_res, lambda_scale),
                   eps_t=coords.temporal_epsilon(time_res, lambda_scale))


def _order_mask(order):
    m = np.zeros(3 * MAX_ORDER)
    m[: 3 * order] = 1.0
    return m


class KinematicField:
    """4D feature volume plus an MLP head emitting all kinematic orders;
    orders above the active one are gated to exactly zero."""

    def __init__(self, store, name, resolution, tdim, ranks, hidden=128,
                 order=3, rng=None):
        rng = np.random.default_rng(rng)
        self.name = name
        self.volume = DecomposedVolume.create(
            store, f"{name}.feat", resolution, ranks, tdim=tdim, rng=rng)
        self.head = MlpHead(store, f"{name}.head", self.volume.feature_dim,
                            hidden, 3 * MAX_ORDER, rng=rng)
        if not 1 <= order <= MAX_ORDER:
            raise ValueError("order must be in 1..5")
        self.order = order

    def query(self, points4, mask=None, order=None):
        """Raw [N, 15] output (v, a, j, s, c), gated by the active order."""
        order = self.order if order is None else order
        feat = self.volume.sample(points4, mask=mask)
        raw = self.head(feat)
        return raw * _order_mask(order)

    def query_sample(self, point: coords.SpacetimePoint) -> KinematicSample:
        if point.space is not coords.Space.NDC:
            raise ValueError("kinematic queries take NDC points")
        p4 = np.concatenate([np.asarray(point.position, dtype=np.float64),
                             [point.time]])[None, :]
        out = self.query(p4)
        return KinematicSample.from_vector(out.value[0], self.order)

    def velocity(self, points4, mask=None):
        return self.query(points4, mask=mask)[:, 0:3]

    def volumes(self):
        return {f"{self.name}.feat": self.volume}


def displacement(kin, dt):
    """Taylor displacement: sum over active orders of dt^n q_n / n!.

    ``kin`` is a KinematicSample, a [15] vector, or a Tensor [N, 15];
    ``dt`` is a scalar or [N] array."""
    if isinstance(kin, KinematicSample):
        kin = kin.as_vector()
    single = not isinstance(kin, ad.Tensor) and np.asarray(kin).ndim == 1
    q = ad.astensor(kin)
    if single:
        q = ad.reshape(q, (1, 3 * MAX_ORDER))
    dt = np.asarray(dt, dtype=np.float64)
    coeffs = np.stack([dt ** n / _FACTORIALS[n] for n in range(1, MAX_ORDER + 1)],
                      axis=-1)                                   # [..., 5]
    n = q.value.shape[0]
    coeffs = np.broadcast_to(coeffs, (n, MAX_ORDER))
    terms = ad.reshape(q, (n, MAX_ORDER, 3)) * ad.Tensor(coeffs[..., None])
    out = ad.tsum(terms, axis=1)
    if single and not isinstance(kin, ad.Tensor):
        return out.value[0]
    return out


def displace_points_ndc(points3, times, dt, field: KinematicField,
                        cam: coords.NdcCamera, order=None, kin=None):
    """Move NDC points by the field's world-space Taylor displacement over
    ``dt``, through the world pathway.  Returns (new points Tensor [N, 3],
    valid mask [N]); invalid rows keep their original position.

    ``kin`` may carry a precomputed field query at (points3, times) so two
    displacements from the same anchors share one query."""
    is_tensor = isinstance(points3, ad.Tensor)
    vals = points3.value if is_tensor else np.asarray(points3, dtype=np.float64)
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), (vals.shape[0],))
    inside = np.all(np.abs(vals) <= 1.0 + 1e-9, axis=1)
    if is_tensor:
        w = coords.ndc_to_world(points3, cam)
        w_val = w.value
    else:
        w = coords.ndc_to_world(vals, cam)
        w_val = np.asarray(w)
    if kin is None:
        if is_tensor:
            p4 = ad.concatenate([points3, ad.Tensor(times[:, None])], axis=1)
        else:
            p4 = np.concatenate([vals, times[:, None]], axis=1)
        kin = field.query(p4, mask=inside, order=order)
    d_world = displacement(kin, dt)

    # Validity is decided numerically first: the world point must stay in
    # front of the camera and the reprojection inside the NDC box.
    moved_val = w_val + d_world.value
    valid = inside & (moved_val[:, 2] < -1e-9)
    safe = np.where(valid[:, None], moved_val, w_val)
    valid &= np.all(np.abs(np.asarray(coords.world_to_ndc(safe, cam))) <= 1.0 + 1e-9,
                    axis=1)
    keep = valid.astype(np.float64)[:, None]
    moved = w + d_world * keep                   # zero displacement where invalid
    new_pts = coords.world_to_ndc(moved, cam)
    return new_pts, valid


# -- numerical derivatives ---------------------------------------------

def world_gradient(fieldfn, points3, times, eps_ndc, cam,
                   transform=None, inverse=None, domain_check=True):
    """Central-difference derivative of ``fieldfn`` along each world axis.

    ``fieldfn(points3, times) -> Tensor [N, K]`` is evaluated at NDC
    points; the +-step is taken in world space with the per-point,
    per-axis step from ``epsilon_world``.  Returns ([Dx, Dy, Dz] with
    each [N, K], valid mask [N])."""
    if transform is None:
        transform = lambda q: coords.ndc_to_world(q, cam)
    if inverse is None:
        inverse = lambda q: coords.world_to_ndc(q, cam)
    pts = np.asarray(points3, dtype=np.float64)
    n = pts.shape[0]
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), (n,))
    w = np.asarray(transform(pts))
    # Assemble all six stencil points first so the field is queried once.
    stencils = []
    scales = []
    mask = np.ones(n, dtype=bool)
    for axis in range(3):
        eps_w = coords.epsilon_world(pts, eps_ndc, axis, cam, transform=transform)
        e = np.zeros(3)
        e[axis] = 1.0
        plus_w = w + eps_w[:, None] * e
        minus_w = w - eps_w[:, None] * e
        ok = (plus_w[:, 2] < 0.0) & (minus_w[:, 2] < 0.0) if domain_check \
            else np.ones(n, dtype=bool)
        safe_plus = np.where(ok[:, None], plus_w, w)
        safe_minus = np.where(ok[:, None], minus_w, w)
        p_plus = np.asarray(inverse(safe_plus))
        p_minus = np.asarray(inverse(safe_minus))
        if domain_check:
            ok &= np.all(np.abs(p_plus) <= 1.0 + 1e-9, axis=1)
            ok &= np.all(np.abs(p_minus) <= 1.0 + 1e-9, axis=1)
            p_plus = np.clip(p_plus, -1.0, 1.0)
            p_minus = np.clip(p_minus, -1.0, 1.0)
        mask &= ok
        scale = np.zeros(n)
        np.divide(0.5, eps_w, out=scale, where=eps_w > 0)
        stencils.extend([p_plus, p_minus])
        scales.append(scale)
    f_all = fieldfn(np.concatenate(stencils, axis=0), np.tile(times, 6))
    derivs = [(f_all[2 * a * n:(2 * a + 1) * n]
               - f_all[(2 * a + 1) * n:(2 * a + 2) * n]) * scales[a][:, None]
              for a in range(3)]
    return derivs, mask


def time_derivative(fieldfn, points3, times, eps_t, domain_check=True):
    """Central difference along the time axis (no space conversion)."""
    pts = np.asarray(points3, dtype=np.float64)
    n = pts.shape[0]
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), (n,))
    t_plus = times + eps_t
    t_minus = times - eps_t
    if domain_check:
        mask = (t_plus <= 1.0 + 1e-12) & (t_minus >= -1e-12)
        t_plus = np.clip(t_plus, 0.0, 1.0)
        t_minus = np.clip(t_minus, 0.0, 1.0)
    else:
        mask = np.ones(n, dtype=bool)
    f_all = fieldfn(np.concatenate([pts, pts], axis=0),
                    np.concatenate([t_plus, t_minus]))
    return (f_all[:n] - f_all[n:]) * (0.5 / eps_t), mask


def jacobian(fieldfn, point: coords.SpacetimePoint, eps_ndc, cam,
             transform=None, inverse=None, domain_check=True):
    """3x3 (or gradient) world-space Jacobian at a single spacetime point."""
    p = np.asarray(point.position, dtype=np.float64)[None, :]
    derivs, mask = world_gradient(fieldfn, p, point.time, eps_ndc, cam,
                                  transform=transform, inverse=inverse,
                                  domain_check=domain_check)
    if not mask[0]:
        raise StencilOutOfBounds("stencil leaves the valid domain")
    cols = [d.value[0] for d in derivs]
    out = np.stack(cols, axis=-1)
    return out[0] if out.shape[0] == 1 else out


# -- strain rate and losses --------------------------------------------

def strain_rate(grad_v):
    """Symmetric part of the velocity gradient, D = (J + J^T) / 2."""
    if isinstance(grad_v, ad.Tensor):
        axes = list(range(grad_v.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return (grad_v + ad.transpose(grad_v, axes)) * 0.5
    g = np.asarray(grad_v, dtype=np.float64)
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def rigidity_loss(grad_v, lambda_div=1.0):
    """First and second strain-rate invariants:
    lambda_div * (div v)^2 + (0.5 * (tr(D)^2 - tr(D D)))^2.

    Accepts a single 3x3 matrix or a batch [..., 3, 3]; batches return
    per-sample losses."""
    D = strain_rate(grad_v)
    if isinstance(grad_v, ad.Tensor):
        div = grad_v[..., 0, 0] + grad_v[..., 1, 1] + grad_v[..., 2, 2]
        tr_D = D[..., 0, 0] + D[..., 1, 1] + D[..., 2, 2]
        tr_DD = ad.tsum(D * D, axis=(-2, -1))
        second = (tr_D * tr_D - tr_DD) * 0.5
        return lambda_div * (div * div) + second * second
    g = np.asarray(grad_v, dtype=np.float64)
    div = np.trace(g, axis1=-2, axis2=-1)
    tr_D = np.trace(D, axis1=-2, axis2=-1)
    tr_DD = np.sum(D * D, axis=(-2, -1))
    second = 0.5 * (tr_D ** 2 - tr_DD)
    return lambda_div * div ** 2 + second ** 2


def smoothness_loss(kin, adv_v=None, adv_a=None):
    """L2 penalty on higher orders and advective terms:
    ||a||^2 + ||j||^2 + ||dv/dt + v.grad v||^2 + ||da/dt + v.grad a||^2.

    ``kin`` is a [N, 15] Tensor (or KinematicSample); ``adv_v``/``adv_a``
    are the material-derivative terms [N, 3] (zero when omitted)."""
    if isinstance(kin, KinematicSample):
        kin = kin.as_vector()[None, :]
    q = ad.astensor(kin)
    a = q[:, 3:6]
    j = q[:, 6:9]
    total = ad.tsum(a * a, axis=1) + ad.tsum(j * j, axis=1)
    for term in (adv_v, adv_a):
        if term is not None:
            term = ad.astensor(term)
            total = total + ad.tsum(term * term, axis=1)
    return total


def _masked_mean(per_point, mask):
    """Mean over valid points; invalid points are counted out entirely."""
    n = int(mask.sum())
    if n == 0:
        return ad.Tensor(0.0), 0
    return ad.tsum(per_point * mask.astype(np.float64)) * (1.0 / n), n


class KinematicLossTerms:
    def __init__(self, integrity, rigidity, transport, smooth, n_valid):
        self.integrity = integrity
        self.rigidity = rigidity
        self.transport = transport
        self.smooth = smooth
        self.n_valid = n_valid


def evaluate_kinematic_losses(points3, times, field: KinematicField,
                              sigma_world_fn, cam, eps: EpsilonConfig,
                              lambda_div=1.0, order=None):
    """All physics losses at a shared set of sample points, computing the
    shared stencils once.  ``sigma_world_fn(points3, times) -> Tensor
    [N, 1]`` must already be in world space; pass None to skip transport."""
    pts = np.asarray(points3, dtype=np.float64)
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), (pts.shape[0],))
    order = field.order if order is None else order

    def kin_fn(p, t):
        p4 = np.concatenate([p, t[:, None]], axis=1)
        return field.query(p4, order=order)

    center = kin_fn(pts, times)
    derivs, mask_s = world_gradient(kin_fn, pts, times, eps.eps_ndc, cam)
    dq_dt, mask_t = time_derivative(kin_fn, pts, times, eps.eps_t)
    mask = mask_s & mask_t

    v = center[:, 0:3]
    vx = ad.reshape(v[:, 0], (-1, 1))
    vy = ad.reshape(v[:, 1], (-1, 1))
    vz = ad.reshape(v[:, 2], (-1, 1))

    def advect(sl):
        return (vx * derivs[0][:, sl] + vy * derivs[1][:, sl]
                + vz * derivs[2][:, sl])

    # Advective residuals for each order above the first.
    residual_sq = ad.Tensor(np.zeros(len(pts)))
    adv_terms = {}
    for n in range(2, order + 1):
        lower = slice(3 * (n - 2), 3 * (n - 1))
        target = center[:, 3 * (n - 1): 3 * n]
        material = dq_dt[:, lower] + advect(lower)
        adv_terms[n] = material
        r = target - material
        residual_sq = residual_sq + ad.tsum(r * r, axis=1)
    integrity, n_valid = _masked_mean(residual_sq, mask) if order >= 2 \
        else (ad.Tensor(0.0), int(mask.sum()))

    grad_v = ad.stack([d[:, 0:3] for d in derivs], axis=2)       # [N, 3, 3]
    rigidity, _ = _masked_mean(rigidity_loss(grad_v, lambda_div), mask)

    smooth_per_point = smoothness_loss(
        center,
        adv_v=adv_terms.get(2, dq_dt[:, 0:3] + advect(slice(0, 3))),
        adv_a=adv_terms.get(3, dq_dt[:, 3:6] + advect(slice(3, 6))))
    smooth, _ = _masked_mean(smooth_per_point, mask)

    if sigma_world_fn is not None:
        s_derivs, s_mask = world_gradient(sigma_world_fn, pts, times,
                                          eps.eps_ndc, cam)
        ds_dt, st_mask = time_derivative(sigma_world_fn, pts, times, eps.eps_t)
        tmask = mask & s_mask & st_mask
        adv_sigma = (vx * s_derivs[0] + vy * s_derivs[1] + vz * s_derivs[2])
        resid = ds_dt + adv_sigma
        transport, _ = _masked_mean(ad.reshape(resid * resid, (-1,)), tmask)
    else:
        transport = ad.Tensor(0.0)

    return KinematicLossTerms(integrity, rigidity, transport, smooth, n_valid)


def integrity_loss(points3, times, field, cam, eps: EpsilonConfig,
                   order=None):
    terms = evaluate_kinematic_losses(points3, times, field, None, cam, eps,
                                      order=order)
    return terms.integrity


def transport_loss(points3, times, sigma_world_fn, field, cam,
                   eps: EpsilonConfig):
    terms = evaluate_kinematic_losses(points3, times, field, sigma_world_fn,
                                      cam, eps)
    return terms.transport
