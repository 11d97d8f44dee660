"""Volume rendering of the composite static+dynamic field along rays.

Rays live in NDC with tau in [near, far]; densities are per unit NDC
length.  The discrete form uses shared transmittance from sigma_s +
sigma_d and blends segment colors by density weight, which reduces
exactly to single-field rendering when either density vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad

SIGMA_GUARD = 1e-12


class DegenerateRay(ValueError):
    pass


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    time: float = 0.0
    pixel: Optional[tuple] = None


@dataclass
class RayBatch:
    """Vectorized rays: origins/directions [B, 3], bounds and times [B]."""
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    times: np.ndarray
    pixels: Optional[np.ndarray] = None
    gt_colors: Optional[np.ndarray] = None
    frame_ids: Optional[np.ndarray] = None

    def __len__(self):
        return self.origins.shape[0]

    @classmethod
    def from_rays(cls, rays):
        return cls(origins=np.array([r.origin for r in rays], dtype=np.float64),
                   directions=np.array([r.direction for r in rays], dtype=np.float64),
                   near=np.array([r.near for r in rays], dtype=np.float64),
                   far=np.array([r.far for r in rays], dtype=np.float64),
                   times=np.array([r.time for r in rays], dtype=np.float64))

    def select(self, idx):
        return RayBatch(self.origins[idx], self.directions[idx], self.near[idx],
                        self.far[idx], self.times[idx],
                        None if self.pixels is None else self.pixels[idx],
                        None if self.gt_colors is None else self.gt_colors[idx],
                        None if self.frame_ids is None else self.frame_ids[idx])


@dataclass
class RenderResult:
    color: ad.Tensor                      # [B, 3]
    dynamic_weight: ad.Tensor             # [B]
    transmittance: ad.Tensor              # [B]
    sample_weights: Optional[ad.Tensor] = None    # [B, S]
    sample_sigmas: Optional[tuple] = None         # (sigma_s, sigma_d), each [B, S]
    sample_taus: Optional[np.ndarray] = None      # [B, S]


def _as_batch(rays):
    if isinstance(rays, Ray):
        return RayBatch.from_rays([rays]), True
    if isinstance(rays, list):
        return RayBatch.from_rays(rays), False
    return rays, False


def sample_positions(rays, n_samples, jitter=False, rng=None):
    """Stratified tau samples in [near, far]: midpoints when jitter is off,
    uniform within each stratum otherwise.  Returns [B, n_samples]."""
    batch, single = _as_batch(rays)
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    B = len(batch)
    edges = np.linspace(0.0, 1.0, n_samples + 1)
    if jitter:
        rng = np.random.default_rng(rng)
        offs = rng.uniform(0.0, 1.0, size=(B, n_samples))
    else:
        offs = np.full((B, n_samples), 0.5)
    frac = edges[:-1][None, :] + offs / n_samples
    taus = batch.near[:, None] + frac * (batch.far - batch.near)[:, None]
    return taus[0] if single else taus


def render_composite(rays, n_samples, static_field, dynamic_field,
                     jitter=False, rng=None, background=None,
                     keep_samples=False, points_override=None, mask_override=None,
                     taus_override=None, static_points_override=None):
    """Quadrature of the additive two-field rendering integral.

    ``points_override`` (Tensor [B, S, 3], e.g. kinematically displaced
    quadrature points) replaces the straight-line sample positions;
    ``mask_override`` marks displaced samples that left the domain (they
    contribute nothing).  ``static_points_override`` (constant [B, S, 3])
    queries the static field at separate positions: a kinematic warp
    moves only dynamic content, so warped renders keep the static samples
    anchored on the ray.
    """
    batch, single = _as_batch(rays)
    u_norm = np.linalg.norm(batch.directions, axis=-1)
    if np.any(u_norm < 1e-12):
        raise DegenerateRay("ray direction norm below 1e-12")

    B = len(batch)
    S = n_samples
    taus = (sample_positions(batch, S, jitter=jitter, rng=rng)
            if taus_override is None else taus_override)
    delta = ((batch.far - batch.near) / S * u_norm)[:, None]        # [B, 1]

    if points_override is None:
        pts = batch.origins[:, None, :] + taus[..., None] * batch.directions[:, None, :]
        pts_flat = pts.reshape(B * S, 3)
        mask = np.ones(B * S, dtype=bool)
    else:
        pts_flat = ad.reshape(points_override, (B * S, 3))
        mask = (np.ones(B * S, dtype=bool) if mask_override is None
                else mask_override.reshape(B * S))
        pts_flat = _clamp_masked(pts_flat, mask)

    times = np.repeat(batch.times, S)
    dirs = np.repeat(batch.directions / u_norm[:, None], S, axis=0)

    if static_points_override is None:
        spts_flat, smask = pts_flat, mask
    else:
        spts_flat = np.asarray(static_points_override).reshape(B * S, 3)
        smask = np.ones(B * S, dtype=bool)

    pts4 = _with_time(pts_flat, times)
    sigma_s, color_s = static_field.query(_with_time(spts_flat, times),
                                          dirs, mask=smask)
    sigma_d, color_d = dynamic_field.query(pts4, dirs, mask=mask)

    if not np.all(mask):
        m = ad.Tensor(mask.astype(np.float64))
        sigma_d = sigma_d * m
        if smask is mask:
            sigma_s = sigma_s * m

    sigma_s2 = ad.reshape(sigma_s, (B, S))
    sigma_d2 = ad.reshape(sigma_d, (B, S))
    sigma_tot = sigma_s2 + sigma_d2

    optical = sigma_tot * delta
    csum = ad.cumsum(optical, axis=1)
    trans = ad.exp(-(csum - optical))          # exclusive cumsum: T at segment start
    alpha = 1.0 - ad.exp(-optical)
    weights = trans * alpha                    # [B, S]
    t_final = ad.exp(-csum[:, -1])

    ratio_d = sigma_d2 / (sigma_tot + SIGMA_GUARD)
    ratio_s = sigma_s2 / (sigma_tot + SIGMA_GUARD)
    blend = (ad.reshape(color_s, (B, S, 3)) * ad.reshape(ratio_s, (B, S, 1))
             + ad.reshape(color_d, (B, S, 3)) * ad.reshape(ratio_d, (B, S, 1)))
    color = ad.tsum(blend * ad.reshape(weights, (B, S, 1)), axis=1)
    dyn_weight = ad.tsum(weights * ratio_d, axis=1)

    if background is not None:
        bg = np.asarray(background, dtype=np.float64).reshape(1, 3)
        color = color + ad.reshape(t_final, (B, 1)) * bg

    result = RenderResult(color=color, dynamic_weight=dyn_weight,
                          transmittance=t_final,
                          sample_weights=weights if keep_samples else None,
                          sample_sigmas=(sigma_s2, sigma_d2) if keep_samples else None,
                          sample_taus=taus if keep_samples else None)
    if single:
        return _squeeze_result(result)
    return result


def render_single(rays, n_samples, field, **kwargs):
    """Standard emission-absorption rendering of one field (the other is
    replaced by empty space, so results agree with the composite path)."""
    from .radiance import ZeroField
    return render_composite(rays, n_samples, field, ZeroField(), **kwargs)


def render_single_static_only(rays, n_samples, static_field, **kwargs):
    from .radiance import ZeroField
    return render_composite(rays, n_samples, static_field, ZeroField(), **kwargs)


def _with_time(pts, times):
    if isinstance(pts, ad.Tensor):
        return ad.concatenate([pts, ad.Tensor(times[:, None])], axis=1)
    return np.concatenate([pts, times[:, None]], axis=1)


def _clamp_masked(pts, mask):
    """Clamp out-of-domain (masked) rows into the domain so sampling stays
    finite; their contributions are zeroed downstream."""
    if np.all(mask):
        return pts
    vals = pts.value if isinstance(pts, ad.Tensor) else pts
    clamped = np.clip(vals, -1.0, 1.0)
    keep = mask[:, None].astype(np.float64)
    if isinstance(pts, ad.Tensor):
        return pts * keep + ad.Tensor(clamped * (1.0 - keep))
    return vals * keep + clamped * (1.0 - keep)


def _squeeze_result(res):
    return RenderResult(
        color=res.color[0], dynamic_weight=res.dynamic_weight[0],
        transmittance=res.transmittance[0],
        sample_weights=None if res.sample_weights is None else res.sample_weights[0],
        sample_sigmas=None if res.sample_sigmas is None else
        (res.sample_sigmas[0][0], res.sample_sigmas[1][0]),
        sample_taus=None if res.sample_taus is None else res.sample_taus[0])
