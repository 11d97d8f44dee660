"""Tensor-decomposed feature volumes.

4D volumes factorize (x, y, z, t) into three plane pairs
(XY, ZT), (XZ, YT), (YZ, XT); 3D volumes pair each plane with an axis
vector: (XY, Z), (XZ, Y), (YZ, X).  Sampling interpolates both factors
bilinearly (linearly for vectors), multiplies them elementwise per rank
and concatenates the three products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class OutOfBounds(ValueError):
    pass


# Axis index assignments per pair, into (x, y, z, t) query tuples.
_PAIR_AXES_4D = [((0, 1), (2, 3)), ((0, 2), (1, 3)), ((1, 2), (0, 3))]
_PAIR_AXES_3D = [((0, 1), (2,)), ((0, 2), (1,)), ((1, 2), (0,))]

_DOMAIN_TOL = 1e-9


@dataclass
class PlanePair:
    planeA: ad.Tensor                 # [A1, A2, R]
    planeB: ad.Tensor                 # [B1, B2, R] or [B, R]
    axesA: tuple
    axesB: tuple

    @property
    def rank(self):
        return self.planeA.value.shape[-1]


@dataclass
class GrowthSchedule:
    upsample_steps: list
    initial_voxels: int
    final_voxels: int

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.upsample_steps, self.upsample_steps[1:])):
            raise ValueError("upsample steps must be strictly increasing")
        if self.initial_voxels <= 0 or self.final_voxels < self.initial_voxels:
            raise ValueError("invalid voxel counts")


def growth_resolutions(schedule: GrowthSchedule, step: int):
    """Per-axis resolution target at ``step`` under logarithmic voxel growth."""
    k = sum(1 for s in schedule.upsample_steps if step >= s)
    K = len(schedule.upsample_steps)
    if K == 0 or k == 0:
        count = schedule.initial_voxels
    else:
        ratio = schedule.final_voxels / schedule.initial_voxels
        count = schedule.initial_voxels * ratio ** (k / K)
    res = int(round(count ** (1.0 / 3.0)))
    return (res, res, res)


class DecomposedVolume:
    """A 3D or 4D feature grid stored as three factorized plane pairs."""

    def __init__(self, pairs, resolution, tdim=None):
        self.pairs = pairs
        self.resolution = tuple(resolution)   # (X, Y, Z)
        self.tdim = tdim
        self.ranks = tuple(p.rank for p in pairs)

    @property
    def is_4d(self):
        return self.tdim is not None

    @property
    def feature_dim(self):
        return sum(self.ranks)

    @classmethod
    def create(cls, store, name, resolution, ranks, tdim=None,
               init_scale=0.1, rng=None):
        """Register fresh plane parameters in ``store`` under ``name.*``."""
        rng = np.random.default_rng(rng)
        X, Y, Z = resolution
        dims = (X, Y, Z) if tdim is None else (X, Y, Z, tdim)
        axes_spec = _PAIR_AXES_3D if tdim is None else _PAIR_AXES_4D
        pairs = []
        for i, (axA, axB) in enumerate(axes_spec):
            R = ranks[i]
            shapeA = (dims[axA[0]], dims[axA[1]], R)
            shapeB = (dims[axB[0]], dims[axB[1]], R) if len(axB) == 2 else (dims[axB[0]], R)
            planeA = store.add(f"{name}.pair{i}.A",
                               rng.uniform(-init_scale, init_scale, size=shapeA))
            planeB = store.add(f"{name}.pair{i}.B",
                               rng.uniform(-init_scale, init_scale, size=shapeB))
            pairs.append(PlanePair(planeA, planeB, axA, axB))
        return cls(pairs, resolution, tdim=tdim)

    @classmethod
    def from_arrays(cls, arrays, resolution, tdim=None):
        """Wrap plain arrays (no gradients), e.g. from a checkpoint."""
        axes_spec = _PAIR_AXES_3D if tdim is None else _PAIR_AXES_4D
        pairs = [PlanePair(ad.Tensor(a), ad.Tensor(b), axA, axB)
                 for (a, b), (axA, axB) in zip(arrays, axes_spec)]
        return cls(pairs, resolution, tdim=tdim)

    # -- coordinate handling -------------------------------------------
    def _grid_coords(self, pts_value):
        """Map NDC [-1,1] (and t in [0,1]) to continuous grid indices."""
        X, Y, Z = self.resolution
        cols = [
            (pts_value[:, 0] + 1.0) * 0.5 * (X - 1),
            (pts_value[:, 1] + 1.0) * 0.5 * (Y - 1),
            (pts_value[:, 2] + 1.0) * 0.5 * (Z - 1),
        ]
        scales = [0.5 * (X - 1), 0.5 * (Y - 1), 0.5 * (Z - 1)]
        shifts = [scales[0], scales[1], scales[2]]
        if self.is_4d:
            cols.append(pts_value[:, 3] * (self.tdim - 1))
            scales.append(float(self.tdim - 1))
            shifts.append(0.0)
        return cols, scales, shifts

    def check_domain(self, pts_value):
        spatial_ok = np.all(np.abs(pts_value[:, :3]) <= 1.0 + _DOMAIN_TOL, axis=1)
        if self.is_4d:
            t = pts_value[:, 3]
            spatial_ok &= (t >= -_DOMAIN_TOL) & (t <= 1.0 + _DOMAIN_TOL)
        return spatial_ok

    def sample(self, points, mask=None):
        """Sample fused features at ``points`` ([N, 3] or [N, 4]).

        Points must lie in the domain; pass ``mask`` (bool [N]) to declare
        rows whose value the caller will discard (they are evaluated at a
        clamped position instead of raising).  Returns [N, R1+R2+R3].
        """
        is_tensor = isinstance(points, ad.Tensor)
        pts_value = points.value if is_tensor else np.asarray(points, dtype=np.float64)
        if pts_value.ndim != 2 or pts_value.shape[1] != (4 if self.is_4d else 3):
            raise ValueError("bad point shape for this volume")
        ok = self.check_domain(pts_value)
        if mask is None:
            if not np.all(ok):
                raise OutOfBounds("query outside the NDC/time domain")
        elif np.any(~ok & mask):
            raise OutOfBounds("unmasked query outside the NDC/time domain")

        # Continuous grid coordinates per query axis.  Constant (numpy)
        # query points take a fused single-node interpolation path; Tensor
        # points keep coordinate gradients through the fractional weights.
        if is_tensor:
            _, scales, shifts = self._grid_coords(pts_value)
            cols = []
            for axis, (scale, shift) in enumerate(zip(scales, shifts)):
                c = points[:, axis] * scale + shift
                cols.append(c)
            cols_value = [c.value for c in cols]

            feats = []
            for pair in self.pairs:
                fa = _bilinear(pair.planeA, cols[pair.axesA[0]], cols[pair.axesA[1]],
                               cols_value[pair.axesA[0]], cols_value[pair.axesA[1]])
                if len(pair.axesB) == 2:
                    fb = _bilinear(pair.planeB, cols[pair.axesB[0]], cols[pair.axesB[1]],
                                   cols_value[pair.axesB[0]], cols_value[pair.axesB[1]])
                else:
                    fb = _linear1d(pair.planeB, cols[pair.axesB[0]],
                                   cols_value[pair.axesB[0]])
                feats.append(fa * fb)
            return ad.concatenate(feats, axis=1)

        cols_value, _, _ = self._grid_coords(pts_value)
        feats = []
        for pair in self.pairs:
            fa = _bilinear_const(pair.planeA, cols_value[pair.axesA[0]],
                                 cols_value[pair.axesA[1]])
            if len(pair.axesB) == 2:
                fb = _bilinear_const(pair.planeB, cols_value[pair.axesB[0]],
                                     cols_value[pair.axesB[1]])
            else:
                fb = _linear_const(pair.planeB, cols_value[pair.axesB[0]])
            feats.append(fa * fb)
        return ad.concatenate(feats, axis=1)

    # -- resampling -----------------------------------------------------
    def upsample(self, store, name, new_resolution, new_tdim=None):
        """Bilinearly resample every plane to the new resolution, replacing
        the parameters registered under ``name`` in ``store``."""
        if new_tdim is None:
            new_tdim = self.tdim
        old_dims = self.resolution if not self.is_4d else (*self.resolution, self.tdim)
        new_dims = new_resolution if not self.is_4d else (*new_resolution, new_tdim)
        if any(n < o for n, o in zip(new_dims, old_dims)):
            raise ValueError("new resolution must not shrink")
        pairs = []
        for i, pair in enumerate(self.pairs):
            a = _resample_plane(pair.planeA.value,
                                (new_dims[pair.axesA[0]], new_dims[pair.axesA[1]]))
            if len(pair.axesB) == 2:
                b = _resample_plane(pair.planeB.value,
                                    (new_dims[pair.axesB[0]], new_dims[pair.axesB[1]]))
            else:
                b = _resample_vector(pair.planeB.value, new_dims[pair.axesB[0]])
            ta = store.replace(f"{name}.pair{i}.A", a)
            tb = store.replace(f"{name}.pair{i}.B", b)
            pairs.append(PlanePair(ta, tb, pair.axesA, pair.axesB))
        return DecomposedVolume(pairs, new_resolution, tdim=new_tdim)

    def tv_loss(self):
        """Mean squared adjacent-entry difference, accumulated over planes."""
        total = ad.Tensor(0.0)
        for pair in self.pairs:
            total = total + _plane_tv(pair.planeA)
            total = total + _plane_tv(pair.planeB)
        return total

    def plane_arrays(self):
        return [(p.planeA.value, p.planeB.value) for p in self.pairs]


def _clamped_base(u_value, n):
    i0 = np.floor(u_value).astype(np.intp)
    return np.clip(i0, 0, max(n - 2, 0))


def _bilinear(plane, u, v, u_value, v_value):
    """Edge-clamped bilinear interpolation of plane [H, W, R] at Tensor
    coordinates (u, v), fused into one node with coordinate gradients."""
    H, W, R = plane.value.shape
    i0 = _clamped_base(u_value, H)
    j0 = _clamped_base(v_value, W)
    i1 = np.minimum(i0 + 1, H - 1)
    j1 = np.minimum(j0 + 1, W - 1)
    fu = (u_value - i0)[:, None]
    fv = (v_value - j0)[:, None]
    flat = plane.value.reshape(H * W, R)
    k00, k01 = i0 * W + j0, i0 * W + j1
    k10, k11 = i1 * W + j0, i1 * W + j1
    p00, p01, p10, p11 = flat[k00], flat[k01], flat[k10], flat[k11]
    w00 = (1.0 - fu) * (1.0 - fv)
    w01 = (1.0 - fu) * fv
    w10 = fu * (1.0 - fv)
    w11 = fu * fv
    out = w00 * p00 + w01 * p01 + w10 * p10 + w11 * p11

    def bw(g):
        idx = np.concatenate([k00, k01, k10, k11])
        wg = np.concatenate([w00 * g, w01 * g, w10 * g, w11 * g], axis=0)
        gp = ad.scatter_rows(wg, idx, (H * W, R)).reshape(H, W, R)
        gu = np.sum(g * ((p10 - p00) * (1.0 - fv) + (p11 - p01) * fv), axis=1)
        gv = np.sum(g * ((p01 - p00) * (1.0 - fu) + (p11 - p10) * fu), axis=1)
        return gp, gu, gv

    return ad.node(out, (plane, u, v), bw)


def _bilinear_const(plane, u_value, v_value):
    """Single-node bilinear interpolation for constant coordinates."""
    H, W, R = plane.value.shape
    i0 = _clamped_base(u_value, H)
    j0 = _clamped_base(v_value, W)
    i1 = np.minimum(i0 + 1, H - 1)
    j1 = np.minimum(j0 + 1, W - 1)
    fu = (u_value - i0)[:, None]
    fv = (v_value - j0)[:, None]
    w00 = (1.0 - fu) * (1.0 - fv)
    w01 = (1.0 - fu) * fv
    w10 = fu * (1.0 - fv)
    w11 = fu * fv
    flat = plane.value.reshape(H * W, R)
    k00, k01 = i0 * W + j0, i0 * W + j1
    k10, k11 = i1 * W + j0, i1 * W + j1
    out = (w00 * flat[k00] + w01 * flat[k01]
           + w10 * flat[k10] + w11 * flat[k11])

    def bw(g):
        idx = np.concatenate([k00, k01, k10, k11])
        wg = np.concatenate([w00 * g, w01 * g, w10 * g, w11 * g], axis=0)
        return (ad.scatter_rows(wg, idx, (H * W, R)).reshape(H, W, R),)

    return ad.node(out, (plane,), bw)


def _linear_const(vec, u_value):
    n, R = vec.value.shape
    i0 = _clamped_base(u_value, n)
    i1 = np.minimum(i0 + 1, n - 1)
    fu = (u_value - i0)[:, None]
    out = (1.0 - fu) * vec.value[i0] + fu * vec.value[i1]

    def bw(g):
        idx = np.concatenate([i0, i1])
        wg = np.concatenate([(1.0 - fu) * g, fu * g], axis=0)
        return (ad.scatter_rows(wg, idx, (n, R)),)

    return ad.node(out, (vec,), bw)


def _linear1d(vec, u, u_value):
    n, R = vec.value.shape
    i0 = _clamped_base(u_value, n)
    i1 = np.minimum(i0 + 1, n - 1)
    fu = (u_value - i0)[:, None]
    p0, p1 = vec.value[i0], vec.value[i1]
    out = (1.0 - fu) * p0 + fu * p1

    def bw(g):
        idx = np.concatenate([i0, i1])
        wg = np.concatenate([(1.0 - fu) * g, fu * g], axis=0)
        gv = ad.scatter_rows(wg, idx, (n, R))
        gu = np.sum(g * (p1 - p0), axis=1)
        return gv, gu

    return ad.node(out, (vec, u), bw)


def _plane_tv(plane):
    if plane.value.ndim == 3:
        d0 = plane[1:, :, :] - plane[:-1, :, :]
        d1 = plane[:, 1:, :] - plane[:, :-1, :]
        return ad.tmean(d0 * d0) + ad.tmean(d1 * d1)
    d0 = plane[1:, :] - plane[:-1, :]
    return ad.tmean(d0 * d0)


def _resample_axis(arr, axis, new_n):
    old_n = arr.shape[axis]
    if new_n == old_n:
        return arr
    # Corner-aligned linear resampling: endpoints map to endpoints.
    pos = np.linspace(0.0, old_n - 1.0, new_n)
    i0 = np.clip(np.floor(pos).astype(np.intp), 0, old_n - 2)
    f = pos - i0
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i0 + 1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = new_n
    f = f.reshape(shape)
    return a0 * (1.0 - f) + a1 * f


def _resample_plane(plane, new_hw):
    out = _resample_axis(plane, 0, new_hw[0])
    return _resample_axis(out, 1, new_hw[1])


def _resample_vector(vec, new_n):
    return _resample_axis(vec, 0, new_n)
