"""Training objectives: robust penalty, cycle consistency, photometric
consistency with kinematically warped rays, and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import coords
from . import kinematics
from . import rendering
from .radiance import dynamic_likelihood, entropy_loss

CHARBONNIER_ALPHA = 0.5
CHARBONNIER_EPS = 1e-3


class NonFiniteLoss(ArithmeticError):
    def __init__(self, breakdown):
        super().__init__(f"non-finite loss term: {breakdown}")
        self.breakdown = breakdown


@dataclass
class LossWeights:
    photo_warp: float = 0.5        # lambda on the warped photometric term
    entropy: float = 0.01
    sparsity: float = 0.03         # L1 on sampled densities; kills free fog
    cycle: float = 0.1
    integrity: float = 0.1
    rigidity: float = 0.05
    transport: float = 0.01
    smooth: float = 0.01
    tv: float = 0.001

    def __post_init__(self):
        for name, v in vars(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weight {name} must be finite and nonnegative")


@dataclass
class HopSchedule:
    """Max neighbor-frame gap as a non-decreasing step schedule."""
    steps: tuple = (0,)
    hops: tuple = (2,)

    def __post_init__(self):
        if len(self.steps) != len(self.hops) or self.steps[0] != 0:
            raise ValueError("schedule must start at step 0")
        if any(b < a for a, b in zip(self.hops, self.hops[1:])):
            raise ValueError("max hop must be non-decreasing")

    def max_hop(self, step):
        hop = self.hops[0]
        for s, h in zip(self.steps, self.hops):
            if step >= s:
                hop = h
        return hop


def charbonnier(x, alpha=CHARBONNIER_ALPHA, eps=CHARBONNIER_EPS):
    """Generalized robust penalty (||x||^2 + eps^2)^alpha.

    Vectors reduce over the last axis; batches return per-sample values."""
    if isinstance(x, ad.Tensor):
        sq = ad.tsum(x * x, axis=-1) if x.ndim >= 1 and x.shape else x * x
        return (sq + eps * eps) ** alpha
    x = np.asarray(x, dtype=np.float64)
    sq = np.sum(x * x, axis=-1) if x.ndim >= 1 else x * x
    return (sq + eps * eps) ** alpha


def _masked_mean(per_point, mask):
    n = int(mask.sum())
    if n == 0:
        return ad.Tensor(0.0)
    return ad.tsum(per_point * mask.astype(np.float64)) * (1.0 / n)


def cycle_loss(points3, t, i, gamma, field, cam,
               alpha=CHARBONNIER_ALPHA, eps=CHARBONNIER_EPS, order=None):
    """Cycle constraints among timestamps t, i, j = t + 2(i - t), and an
    intermediate gamma; displacements compose through the NDC<->world
    pathway.  Each residual is masked independently when a hop leaves the
    domain or j leaves the time range.  Times may be scalars or [N]."""
    pts = np.asarray(points3, dtype=np.float64)
    n = pts.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    i = np.broadcast_to(np.asarray(i, dtype=np.float64), (n,))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (n,))
    j = t + 2.0 * (i - t)

    x1, m1 = kinematics.displace_points_ndc(pts, t, i - t, field, cam, order=order)
    d_ti = x1 - pts

    # Forward-backward closure: hop back from the displaced point.
    xb, mb = kinematics.displace_points_ndc(x1, i, t - i, field, cam, order=order)
    r1 = xb - pts
    mask1 = m1 & mb

    # Two-hop via i vs direct to j.
    x2, m2 = kinematics.displace_points_ndc(x1, i, j - i, field, cam, order=order)
    xj, mj = kinematics.displace_points_ndc(pts, t, j - t, field, cam, order=order)
    r2 = (x2 - pts) - (xj - pts)
    mask2 = m1 & m2 & mj & (j >= -1e-12) & (j <= 1.0 + 1e-12)

    # Via the intermediate gamma vs direct to i.
    xg, mg = kinematics.displace_points_ndc(pts, t, gamma - t, field, cam, order=order)
    xgi, mgi = kinematics.displace_points_ndc(xg, gamma, i - gamma, field, cam,
                                              order=order)
    r3 = (xgi - pts) - d_ti
    mask3 = mg & mgi & m1

    loss = ad.Tensor(0.0)
    for r, m in ((r1, mask1), (r2, mask2), (r3, mask3)):
        loss = loss + _masked_mean(charbonnier(r, alpha, eps), m)
    return loss


def photometric_loss(batch, static_field, dynamic_field, kin_field, cam,
                     i_times, n_samples, lam,
                     jitter=False, rng=None, order=None, keep_ref=False):
    """Reconstruction plus dynamic-gated consistency of kinematically
    deformed rays rendered at the neighbor frame time i.

    The warped render displaces only the dynamic-field samples (static
    content does not move) and targets frame times, where the
    time-interpolated dynamic volume is slice-exact; off-frame targets
    cross-fade between slices and reward understated motion.

    ``batch.gt_colors`` holds the reference pixel colors; ``i_times`` are
    per-ray target times [B]."""
    B = len(batch)
    S = n_samples
    taus = rendering.sample_positions(batch, S, jitter=jitter, rng=rng)
    ref = rendering.render_composite(batch, S, static_field, dynamic_field,
                                     keep_samples=True, taus_override=taus)
    gt = np.asarray(batch.gt_colors, dtype=np.float64)
    diff = ref.color - gt
    recon = ad.tmean(ad.tsum(diff * diff, axis=1))

    pts = (batch.origins[:, None, :]
           + taus[..., None] * batch.directions[:, None, :]).reshape(B * S, 3)
    times_rep = np.repeat(batch.times, S)
    # Detached gate: with gradients through alpha the cheapest way to cut
    # the warp penalty is to drain dynamic density into the static field.
    alpha = ref.dynamic_weight.detach()

    inside = np.all(np.abs(pts) <= 1.0 + 1e-9, axis=1)
    p4 = np.concatenate([pts, times_rep[:, None]], axis=1)
    kin = kin_field.query(p4, mask=inside, order=order)

    target = np.asarray(i_times, dtype=np.float64)
    dt = np.repeat(target - batch.times, S)
    moved, valid = kinematics.displace_points_ndc(pts, times_rep, dt,
                                                  kin_field, cam,
                                                  order=order, kin=kin)
    warped_batch = rendering.RayBatch(batch.origins, batch.directions,
                                      batch.near, batch.far, target)
    res = rendering.render_composite(
        warped_batch, S, static_field, dynamic_field,
        points_override=ad.reshape(moved, (B, S, 3)),
        mask_override=valid.reshape(B, S), taus_override=taus,
        static_points_override=pts.reshape(B, S, 3))
    warp = ad.tmean(alpha * charbonnier(res.color - gt))
    total = recon + lam * warp

    if keep_ref:
        return total, ref, [warp]
    return total


@dataclass
class LossBreakdown:
    values: dict
    total: float


def _neighbor_times(fids, frame_times, hop, rng):
    """Per-sample neighbor frame time i within the hop window and an
    intermediate gamma drawn uniformly between t and i."""
    n_frames = len(frame_times)
    i_idx = np.empty(len(fids), dtype=np.intp)
    for b, fid in enumerate(fids):
        lo, hi = max(0, fid - hop), min(n_frames - 1, fid + hop)
        choices = [k for k in range(lo, hi + 1) if k != fid]
        i_idx[b] = choices[rng.integers(len(choices))]
    i_times = frame_times[i_idx]
    t_times = frame_times[fids]
    lo = np.minimum(t_times, i_times)
    hi = np.maximum(t_times, i_times)
    gamma_times = rng.uniform(lo, hi)
    return i_times, gamma_times


def total_loss(model, batch, weights: LossWeights, step, rng, cfg,
               parts=("photo", "physics")):
    """Weighted objective over a ray batch with a per-term breakdown.

    ``model`` bundles fields, camera, frame times, and epsilon config;
    ``cfg`` supplies schedules (hop, kinematic activation, motion order)
    and sampling sizes.  ``parts`` selects the pixel-anchored terms
    (photometric, entropy), the point-anchored ones (cycle, kinematic
    regularizers, tv), or both; the two sub-totals add up to the full
    objective, which lets a trainer chunk rays for the photo part while
    paying for the physics part once per step.  Raises NonFiniteLoss when
    any computed term is NaN/Inf."""
    rng = np.random.default_rng(rng)
    order = cfg.order_at(step)
    hop = cfg.hop_schedule.max_hop(step)
    frame_times = np.asarray(model.frame_times, dtype=np.float64)

    terms = {}
    total = ad.Tensor(0.0)

    if "photo" in parts:
        i_times, _ = _neighbor_times(batch.frame_ids, frame_times, hop, rng)
        photo, ref, _ = photometric_loss(
            batch, model.static, model.dynamic, model.kinematic, model.cam,
            i_times, cfg.n_samples, weights.photo_warp,
            order=order, keep_ref=True)
        sigma_s, sigma_d = ref.sample_sigmas
        p_d = dynamic_likelihood(sigma_d, sigma_s)
        ent = ad.tmean(entropy_loss(p_d, k=cfg.entropy_skew))
        # L1 on sampled densities: emission-absorption accepts a uniform
        # fog painted by the color head; sparsity forces geometry.
        sparse = ad.tmean(sigma_s) + ad.tmean(sigma_d)
        terms["photometric"] = photo
        terms["entropy"] = ent
        terms["sparsity"] = sparse
        total = total + photo + weights.entropy * ent \
            + weights.sparsity * sparse

    if "physics" in parts:
        tv = model.static.sigma_volume.tv_loss() \
            + model.static.rgb_volume.tv_loss() \
            + model.dynamic.sigma_volume.tv_loss() \
            + model.dynamic.rgb_volume.tv_loss()

        # Sample points along random rays of the batch.
        B = len(batch)
        k = cfg.kin_points
        ridx = rng.integers(0, B, size=k)
        u = rng.uniform(size=k)
        taus = batch.near[ridx] + u * (batch.far[ridx] - batch.near[ridx])
        kpts = batch.origins[ridx] + taus[:, None] * batch.directions[ridx]
        ktimes = batch.times[ridx]

        if step >= cfg.kin_activation_step:
            kin_terms = kinematics.evaluate_kinematic_losses(
                kpts, ktimes, model.kinematic, model.sigma_world_fn, model.cam,
                model.eps, lambda_div=cfg.lambda_div, order=order)
            integ, rigid = kin_terms.integrity, kin_terms.rigidity
            transp, smooth = kin_terms.transport, kin_terms.smooth
        else:
            zero = ad.Tensor(0.0)
            integ = rigid = transp = smooth = zero

        i_sel, gamma_sel = _neighbor_times(batch.frame_ids[ridx], frame_times,
                                           hop, rng)
        cyc = cycle_loss(kpts, ktimes, i_sel, gamma_sel, model.kinematic,
                         model.cam, order=order)

        terms.update(cycle=cyc, integrity=integ, rigidity=rigid,
                     transport=transp, smooth=smooth, tv=tv)
        total = total \
            + weights.cycle * cyc \
            + weights.integrity * integ + weights.rigidity * rigid \
            + weights.transport * transp + weights.smooth * smooth \
            + weights.tv * tv

    values = {name: float(t.value) for name, t in terms.items()}
    values["total"] = float(total.value)
    if not all(np.isfinite(v) for v in values.values()):
        raise NonFiniteLoss(values)
    return total, LossBreakdown(values=values, total=values["total"])
