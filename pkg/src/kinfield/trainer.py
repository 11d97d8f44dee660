"""Model assembly, optimization loop, and evaluation.

The scene model ties the static, dynamic, and kinematic fields to one
reference camera; rays from every training view are projected into that
camera's NDC frustum and rendered along straight NDC segments.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import coords
from . import objectives
from . import rendering
from .checkpoint import load_arrays, save_arrays
from .config import ExperimentConfig, ModelConfig, TrainConfig, dump_config
from .images import read_ppm
from .kinematics import MAX_ORDER, EpsilonConfig, KinematicField, displacement
from .metrics import psnr, ssim
from .radiance import DynamicField, StaticField, ZeroField
from .synthetic import Dataset, Frame, load_kinematic_table, load_manifest, pixel_rays
from .tensor_fields import GrowthSchedule, growth_resolutions

LOSS_COLUMNS = ("step", "lr", "photometric", "entropy", "sparsity",
                "cycle", "integrity",
                "rigidity", "transport", "smooth", "tv", "total")


class TrainerLocked(RuntimeError):
    pass


@dataclass
class SceneModel:
    store: ad.ParamStore
    static: StaticField
    dynamic: DynamicField
    kinematic: KinematicField
    cam: coords.NdcCamera
    frame_times: np.ndarray
    eps: EpsilonConfig
    spatial_res: int
    time_res: int

    def sigma_world_fn(self, points3, times):
        """Dynamic density converted to world space, as [N, 1]."""
        p3 = np.asarray(points3, dtype=np.float64)
        t = np.broadcast_to(np.asarray(times, dtype=np.float64), (p3.shape[0],))
        p4 = np.concatenate([p3, t[:, None]], axis=1)
        sigma = self.dynamic.density(p4)
        sigma_w = coords.density_to_world(sigma, p3, self.cam)
        return ad.reshape(sigma_w, (-1, 1))

    def volumes(self):
        return {"static.sigma": self.static.sigma_volume,
                "static.rgb": self.static.rgb_volume,
                "dynamic.sigma": self.dynamic.sigma_volume,
                "dynamic.rgb": self.dynamic.rgb_volume,
                "kin.feat": self.kinematic.volume}


def train_timeline(dataset: Dataset):
    """Sorted unique times of the non-heldout frames; neighbor-frame
    sampling works along this timeline, never through held-out times."""
    return np.unique([f.time for f in dataset.train_frames()])


def build_model(dataset: Dataset, mcfg: ModelConfig, spatial_res=None,
                eps_lambda=0.2, seed=0) -> SceneModel:
    res = mcfg.initial_resolution if spatial_res is None else spatial_res
    tdim = mcfg.time_resolution
    store = ad.ParamStore()
    rng = np.random.default_rng(seed)
    ref = dataset.frames[0]
    cam = coords.NdcCamera.from_intrinsics(
        dataset.near, dataset.far, dataset.width, dataset.height,
        ref.intrinsics[0, 0], ref.intrinsics[1, 1])
    res3 = (res, res, res)
    static = StaticField(store, "static", res3, mcfg.static_density_ranks,
                         mcfg.static_rgb_ranks, hidden=mcfg.radiance_hidden,
                         rng=rng)
    dynamic = DynamicField(store, "dynamic", res3, tdim,
                           mcfg.dynamic_density_ranks, mcfg.dynamic_rgb_ranks,
                           hidden=mcfg.radiance_hidden, rng=rng)
    kin = KinematicField(store, "kin", res3, tdim, mcfg.kinematic_ranks,
                         hidden=mcfg.kinematic_hidden,
                         order=min(mcfg.max_order, MAX_ORDER), rng=rng)
    eps = EpsilonConfig.from_resolution(res, tdim, eps_lambda)
    return SceneModel(store=store, static=static, dynamic=dynamic,
                      kinematic=kin, cam=cam, frame_times=train_timeline(dataset),
                      eps=eps, spatial_res=res, time_res=tdim)


# -- rays --------------------------------------------------------------

def ndc_rays(origins, directions, cam: coords.NdcCamera):
    """Map world rays to straight NDC segments with tau in [near, far].

    Origins are advanced to the near plane; perspective projection keeps
    lines straight, so the segment endpoints fully determine the ray.
    Border rays of offset views can leave the reference frustum, so the
    tau bounds are clipped to the NDC box (empty rays collapse to a
    zero-length segment and render black)."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    if np.any(d[:, 2] >= -1e-12):
        raise rendering.DegenerateRay("rays must head away from the camera (dz < 0)")
    t0 = (-cam.near - o[:, 2]) / d[:, 2]
    t1 = (-cam.far - o[:, 2]) / d[:, 2]
    p0 = o + t0[:, None] * d
    p1 = o + t1[:, None] * d
    o_ndc = coords.world_to_ndc(p0, cam)
    d_ndc = coords.world_to_ndc(p1, cam) - o_ndc
    near, far = _clip_to_box(o_ndc, d_ndc)
    return o_ndc, d_ndc, near, far


def _clip_to_box(o, d, bound=1.0):
    """Intersect NDC segments o + tau*d, tau in [0, 1], with the cube
    [-bound, bound]^3.  Returns (near, far); empty overlaps give
    near == far."""
    t0 = np.zeros(len(o))
    t1 = np.ones(len(o))
    for ax in range(3):
        oa, da = o[:, ax], d[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-bound - oa) / da
            tb = (bound - oa) / da
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        parallel = np.abs(da) < 1e-15
        lo = np.where(parallel, 0.0, lo)
        hi = np.where(parallel, 1.0, hi)
        empty = parallel & (np.abs(oa) > bound)
        t0 = np.maximum(t0, lo)
        t1 = np.minimum(t1, hi)
        t1 = np.where(empty, t0, t1)
    return t0, np.maximum(t1, t0)


def frame_ray_batch(frame: Frame, dataset: Dataset, cam, frame_id,
                    gt_image=None) -> rendering.RayBatch:
    """All pixel rays of one frame as an NDC RayBatch (row-major)."""
    o_w, d_w = pixel_rays(frame.pose, frame.intrinsics,
                          dataset.width, dataset.height)
    o, d, near, far = ndc_rays(o_w, d_w, cam)
    n = o.shape[0]
    jj, ii = np.divmod(np.arange(n), dataset.width)
    gt = None if gt_image is None else gt_image.reshape(n, 3)
    return rendering.RayBatch(
        origins=o, directions=d, near=near, far=far,
        times=np.full(n, frame.time), pixels=np.stack([jj, ii], axis=1),
        gt_colors=gt, frame_ids=np.full(n, frame_id, dtype=np.intp))


def build_ray_pool(dataset: Dataset, cam) -> rendering.RayBatch:
    """Concatenated pixel rays of every non-heldout frame.  Held-out
    frame images are deliberately never opened here."""
    timeline = train_timeline(dataset)
    parts = []
    for frame in dataset.frames:
        if frame.heldout:
            continue
        tid = int(np.searchsorted(timeline, frame.time))
        img = read_ppm(frame.image_path)
        parts.append(frame_ray_batch(frame, dataset, cam, tid, gt_image=img))
    return rendering.RayBatch(
        origins=np.concatenate([p.origins for p in parts]),
        directions=np.concatenate([p.directions for p in parts]),
        near=np.concatenate([p.near for p in parts]),
        far=np.concatenate([p.far for p in parts]),
        times=np.concatenate([p.times for p in parts]),
        pixels=np.concatenate([p.pixels for p in parts]),
        gt_colors=np.concatenate([p.gt_colors for p in parts]),
        frame_ids=np.concatenate([p.frame_ids for p in parts]))


# -- optimizer ---------------------------------------------------------

class Adam:
    """Adam with per-parameter state; state resets automatically when a
    parameter changes shape (grid upsampling)."""

    def __init__(self, beta1=0.9, beta2=0.99, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, store: ad.ParamStore, lr_for):
        for name, p in store.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m or self.m[name].shape != p.value.shape:
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.value -= lr_for(name) * mhat / (np.sqrt(vhat) + self.eps)


def _cosine_lr(base, step, total, final_scale):
    floor = base * final_scale
    return floor + (base - floor) * 0.5 * (1.0 + np.cos(np.pi * step / max(total, 1)))


def make_lr_fn(tcfg: TrainConfig, step):
    drops = sum(1 for s in tcfg.static_drops() if step >= s)
    static_mult = tcfg.static_lr_drop ** drops

    def lr_for(name):
        base = tcfg.lr_volume if ".pair" in name else tcfg.lr_head
        lr = _cosine_lr(base, step, tcfg.steps, tcfg.lr_final_scale)
        if name.startswith("static."):
            lr *= static_mult
        return lr
    return lr_for


# -- checkpoints -------------------------------------------------------

def save_model(model: SceneModel, path):
    arrays = dict(model.store.state_arrays())
    arrays["_meta"] = np.array([model.spatial_res, model.time_res],
                               dtype=np.float64)
    save_arrays(path, arrays)


def load_model(dataset: Dataset, mcfg: ModelConfig, path,
               eps_lambda=0.2) -> SceneModel:
    arrays = load_arrays(path)
    meta = arrays.pop("_meta")
    model = build_model(dataset, mcfg, spatial_res=int(meta[0]),
                        eps_lambda=eps_lambda, seed=0)
    if int(meta[1]) != model.time_res:
        raise ValueError("checkpoint time resolution does not match config")
    names = set(model.store.names())
    if names != set(arrays):
        raise ValueError("checkpoint parameters do not match the model")
    for name in names:
        p = model.store[name]
        if p.value.shape != arrays[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        p.value[...] = arrays[name]
    return model


# -- training ----------------------------------------------------------

def _static_init_loss(model, batch, tcfg):
    res = rendering.render_composite(batch, tcfg.n_samples, model.static,
                                     ZeroField())
    diff = res.color - batch.gt_colors
    mse = ad.tmean(ad.tsum(diff * diff, axis=1))
    tv = model.static.sigma_volume.tv_loss() + model.static.rgb_volume.tv_loss()
    return mse + tcfg.weights.tv * tv, float(mse.value), float(tv.value)


def _upsample_model(model: SceneModel, new_res, eps_lambda):
    res3 = (new_res, new_res, new_res)
    model.static.sigma_volume = model.static.sigma_volume.upsample(
        model.store, "static.sigma", res3)
    model.static.rgb_volume = model.static.rgb_volume.upsample(
        model.store, "static.rgb", res3)
    model.dynamic.sigma_volume = model.dynamic.sigma_volume.upsample(
        model.store, "dynamic.sigma", res3)
    model.dynamic.rgb_volume = model.dynamic.rgb_volume.upsample(
        model.store, "dynamic.rgb", res3)
    model.kinematic.volume = model.kinematic.volume.upsample(
        model.store, "kin.feat", res3)
    model.spatial_res = new_res
    model.eps = EpsilonConfig.from_resolution(new_res, model.time_res,
                                              eps_lambda)


def train(cfg: ExperimentConfig, log=None):
    """Run the optimization; returns (model, dataset, summary)."""
    dataset = load_manifest(cfg.manifest)
    tcfg = cfg.train
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    if lock.exists():
        raise TrainerLocked(f"{lock} exists; another run owns this directory")
    lock.write_text(str(os.getpid()))
    try:
        return _train_locked(cfg, dataset, tcfg, out, log)
    finally:
        lock.unlink(missing_ok=True)


def _train_locked(cfg, dataset, tcfg, out, log):
    (out / "resolved_config.yaml").write_text(dump_config(cfg))
    model = build_model(dataset, cfg.model, eps_lambda=tcfg.eps_lambda,
                        seed=tcfg.seed)
    pool = build_ray_pool(dataset, model.cam)
    rng = np.random.default_rng(tcfg.seed + 1)
    opt = Adam()
    growth = GrowthSchedule(upsample_steps=list(tcfg.upsample_steps),
                            initial_voxels=cfg.model.initial_resolution ** 3,
                            final_voxels=cfg.model.final_resolution ** 3)

    n_rays = len(pool)
    rows = []
    order_cap = min(cfg.model.max_order, MAX_ORDER)

    class _Sched:
        """TrainConfig view with the order clamped to the model's cap."""
        def __getattr__(self, name):
            return getattr(tcfg, name)

        def order_at(self, step):
            return tcfg.order_at(step, max_order=order_cap)

    sched = _Sched()

    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        for step in range(tcfg.steps):
            for s in tcfg.upsample_steps:
                if step == s:
                    new_res = growth_resolutions(growth, step)[0]
                    if new_res > model.spatial_res:
                        _upsample_model(model, new_res, tcfg.eps_lambda)

            idx = rng.choice(n_rays, size=min(tcfg.batch_rays, n_rays),
                             replace=False)
            batch = pool.select(idx)
            model.store.zero_grad()
            # Gradients accumulate over fixed-size chunks so the tape for
            # one chunk is all that lives at a time; the point-anchored
            # physics terms do not scale with rays and run once per step.
            values = {k: 0.0 for k in LOSS_COLUMNS[2:]}
            for start in range(0, len(batch), tcfg.chunk_rays):
                part = batch.select(
                    np.arange(start, min(start + tcfg.chunk_rays, len(batch))))
                frac = len(part) / len(batch)
                if step < tcfg.static_init_steps:
                    loss, mse, tv = _static_init_loss(model, part, tcfg)
                    values["photometric"] += frac * mse
                    values["tv"] += frac * tv
                    values["total"] += frac * float(loss.value)
                else:
                    try:
                        loss, breakdown = objectives.total_loss(
                            model, part, tcfg.weights, step, rng, sched,
                            parts=("photo",))
                    except objectives.NonFiniteLoss:
                        # Keep the last finite state for a post-mortem.
                        save_model(model, out / "checkpoint_aborted.kck")
                        raise
                    for k, v in breakdown.values.items():
                        values[k] += frac * v
                ad.backward(loss * frac)
            if step >= tcfg.static_init_steps:
                try:
                    loss, breakdown = objectives.total_loss(
                        model, batch, tcfg.weights, step, rng, sched,
                        parts=("physics",))
                except objectives.NonFiniteLoss:
                    save_model(model, out / "checkpoint_aborted.kck")
                    raise
                for k, v in breakdown.values.items():
                    values[k] += v
                ad.backward(loss)
            lr_for = make_lr_fn(tcfg, step)
            opt.step(model.store, lr_for)

            lr_now = _cosine_lr(tcfg.lr_volume, step, tcfg.steps,
                                tcfg.lr_final_scale)
            row = [step, repr(float(lr_now))] + \
                [repr(float(values[k])) for k in LOSS_COLUMNS[2:]]
            if step % tcfg.log_every == 0 or step == tcfg.steps - 1:
                writer.writerow(row)
                rows.append(values)
                if log is not None:
                    log(f"step {step} total {values['total']:.5f}")
            if tcfg.checkpoint_every and step and step % tcfg.checkpoint_every == 0:
                save_model(model, out / f"checkpoint_{step:06d}.kck")

    save_model(model, out / "checkpoint_final.kck")
    summary = {"steps": tcfg.steps, "final_total": rows[-1]["total"] if rows else None}
    return model, dataset, summary


# -- rendering and evaluation ------------------------------------------

def render_frame(model: SceneModel, frame: Frame, dataset: Dataset,
                 n_samples=64, time=None, chunk=256):
    """Full-frame render [H, W, 3] at the frame's pose (and time, unless
    overridden)."""
    batch = frame_ray_batch(frame, dataset, model.cam, frame.index)
    if time is not None:
        batch.times[:] = time
    img = np.zeros((len(batch), 3))
    for start in range(0, len(batch), chunk):
        part = batch.select(np.arange(start, min(start + chunk, len(batch))))
        res = rendering.render_composite(part, n_samples, model.static,
                                         model.dynamic)
        img[start:start + len(part)] = res.color.value
    return np.clip(img.reshape(dataset.height, dataset.width, 3), 0.0, 1.0)


def velocity_error(model: SceneModel, dataset: Dataset, frames=None):
    """Median relative velocity error against the per-frame ground-truth
    tables, over points with dynamic density above the scene threshold."""
    frames = dataset.frames if frames is None else frames
    errs = []
    for frame in frames:
        pts_w, sigma, v_gt, _, _ = load_kinematic_table(frame)
        keep = sigma > dataset.kin_threshold
        if not np.any(keep):
            continue
        pts_w, v_gt = pts_w[keep], v_gt[keep]
        pts_ndc = coords.world_to_ndc(pts_w, model.cam)
        inside = np.all(np.abs(pts_ndc) <= 1.0, axis=1)
        if not np.any(inside):
            continue
        pts_ndc, v_gt = pts_ndc[inside], v_gt[inside]
        p4 = np.concatenate([pts_ndc, np.full((len(pts_ndc), 1), frame.time)],
                            axis=1)
        v_pred = model.kinematic.velocity(p4).value
        rel = (np.linalg.norm(v_pred - v_gt, axis=1)
               / np.maximum(np.linalg.norm(v_gt, axis=1), 1e-9))
        errs.append(rel)
    if not errs:
        return float("nan")
    return float(np.median(np.concatenate(errs)))


def evaluate(model: SceneModel, dataset: Dataset, n_samples=64):
    """Per-frame PSNR/SSIM split into seen and held-out frames, plus the
    median relative velocity error."""
    per_frame = []
    for frame in dataset.frames:
        gt = read_ppm(frame.image_path)
        img = render_frame(model, frame, dataset, n_samples=n_samples)
        per_frame.append({"index": frame.index, "heldout": frame.heldout,
                          "psnr": psnr(img, gt), "ssim": ssim(img, gt)})
    def agg(key, held):
        vals = [f[key] for f in per_frame if f["heldout"] == held]
        return float(np.mean(vals)) if vals else float("nan")
    return {
        "psnr_seen": agg("psnr", False), "ssim_seen": agg("ssim", False),
        "psnr_novel": agg("psnr", True), "ssim_novel": agg("ssim", True),
        "velocity_median_rel_error": velocity_error(model, dataset),
        "per_frame": per_frame,
    }


def flow_map(model: SceneModel, frame: Frame, dataset: Dataset,
             n_samples=64, frame_gap=None):
    """Per-pixel kinematics at the depth of maximum rendering weight.

    Returns [H, W, 10]: world velocity, acceleration, jerk, and the
    one-frame-gap Taylor displacement magnitude."""
    if frame_gap is None:
        times = dataset.times
        frame_gap = float(times[1] - times[0]) if len(times) > 1 else 1.0
    batch = frame_ray_batch(frame, dataset, model.cam, frame.index)
    H, W = dataset.height, dataset.width
    out = np.zeros((len(batch), 10))
    chunk = 256
    for start in range(0, len(batch), chunk):
        part = batch.select(np.arange(start, min(start + chunk, len(batch))))
        res = rendering.render_composite(part, n_samples, model.static,
                                         model.dynamic, keep_samples=True)
        w = res.sample_weights.value
        best = np.argmax(w, axis=1)
        taus = res.sample_taus[np.arange(len(part)), best]
        pts = part.origins + taus[:, None] * part.directions
        p4 = np.concatenate([pts, part.times[:, None]], axis=1)
        kin = model.kinematic.query(p4).value
        d = displacement(kin, np.full(len(part), frame_gap))
        out[start:start + len(part), 0:9] = kin[:, 0:9]
        out[start:start + len(part), 9] = np.linalg.norm(d.value, axis=1)
    return out.reshape(H, W, 10)
