"""Factorized feature volumes against a scipy interpolation oracle, plus
domain checks, upsampling, TV, and the growth schedule."""

import numpy as np
import pytest
from scipy.ndimage import map_coordinates

from kinfield import autodiff as ad
from kinfield.tensor_fields import (DecomposedVolume, GrowthSchedule, OutOfBounds,
                                    growth_resolutions)


def _make_volume(store, tdim=None, resolution=(5, 6, 7), ranks=(2, 3, 1), seed=0):
    return DecomposedVolume.create(store, "vol", resolution, ranks, tdim=tdim,
                                   rng=np.random.default_rng(seed))


def _oracle_sample(vol, pts):
    """Independent reconstruction: interpolate each factor with scipy and
    multiply, concatenating pair features."""
    X, Y, Z = vol.resolution
    scale = [0.5 * (X - 1), 0.5 * (Y - 1), 0.5 * (Z - 1)]
    cols = [(pts[:, k] + 1.0) * scale[k] for k in range(3)]
    if vol.is_4d:
        cols.append(pts[:, 3] * (vol.tdim - 1))
    feats = []
    for pair in vol.pairs:
        R = pair.rank
        fa = np.stack([map_coordinates(pair.planeA.value[:, :, r],
                                       [cols[pair.axesA[0]], cols[pair.axesA[1]]],
                                       order=1, mode="nearest")
                       for r in range(R)], axis=1)
        if len(pair.axesB) == 2:
            fb = np.stack([map_coordinates(pair.planeB.value[:, :, r],
                                           [cols[pair.axesB[0]], cols[pair.axesB[1]]],
                                           order=1, mode="nearest")
                           for r in range(R)], axis=1)
        else:
            fb = np.stack([np.interp(cols[pair.axesB[0]],
                                     np.arange(pair.planeB.value.shape[0]),
                                     pair.planeB.value[:, r])
                           for r in range(R)], axis=1)
        feats.append(fa * fb)
    return np.concatenate(feats, axis=1)


def test_3d_sample_matches_scipy_oracle(rng):
    store = ad.ParamStore()
    vol = _make_volume(store)
    pts = rng.uniform(-0.999, 0.999, size=(200, 3))
    out = vol.sample(pts)
    assert np.allclose(out.value, _oracle_sample(vol, pts), atol=1e-12)


def test_4d_sample_matches_scipy_oracle(rng):
    store = ad.ParamStore()
    vol = _make_volume(store, tdim=4)
    pts = np.concatenate([rng.uniform(-0.999, 0.999, size=(200, 3)),
                          rng.uniform(0.0, 1.0, size=(200, 1))], axis=1)
    out = vol.sample(pts)
    assert np.allclose(out.value, _oracle_sample(vol, pts), atol=1e-12)


def test_tensor_points_match_constant_points(rng):
    store = ad.ParamStore()
    vol = _make_volume(store, tdim=4)
    pts = np.concatenate([rng.uniform(-0.9, 0.9, size=(50, 3)),
                          rng.uniform(0.0, 1.0, size=(50, 1))], axis=1)
    a = vol.sample(pts).value
    b = vol.sample(ad.Tensor(pts, requires_grad=True)).value
    assert np.allclose(a, b, atol=1e-14)


def test_out_of_bounds_raises_and_mask_clamps(rng):
    store = ad.ParamStore()
    vol = _make_volume(store)
    bad = np.array([[1.5, 0.0, 0.0]])
    with pytest.raises(OutOfBounds):
        vol.sample(bad)
    # Masked-out rows are evaluated at a clamped position instead.
    out = vol.sample(bad, mask=np.array([False]))
    assert np.all(np.isfinite(out.value))
    with pytest.raises(OutOfBounds):
        vol.sample(bad, mask=np.array([True]))


def test_time_domain_check(rng):
    store = ad.ParamStore()
    vol = _make_volume(store, tdim=4)
    with pytest.raises(OutOfBounds):
        vol.sample(np.array([[0.0, 0.0, 0.0, 1.5]]))


def test_plane_gradients(rng):
    store = ad.ParamStore()
    vol = _make_volume(store, tdim=4, resolution=(3, 3, 3), ranks=(2, 1, 1))
    pts = np.concatenate([rng.uniform(-0.9, 0.9, size=(7, 3)),
                          rng.uniform(0.0, 1.0, size=(7, 1))], axis=1)
    report = ad.grad_check(lambda: ad.tsum(vol.sample(pts) ** 2), store,
                           n_probes=60, rng=1)
    assert report["max_rel_error"] < 1e-5


def test_point_gradients(rng):
    store = ad.ParamStore()
    vol = _make_volume(store, resolution=(4, 4, 4), ranks=(2, 2, 2), seed=2)
    pts = ad.Tensor(rng.uniform(-0.8, 0.8, size=(5, 3)), requires_grad=True)

    def loss():
        return ad.tsum(vol.sample(pts) ** 2)

    ad.backward(loss())
    analytic = pts.grad.copy()
    h = 1e-6
    fd = np.zeros_like(analytic)
    for i in range(5):
        for k in range(3):
            orig = pts.value[i, k]
            pts.value[i, k] = orig + h
            fp = float(loss().value)
            pts.value[i, k] = orig - h
            fm = float(loss().value)
            pts.value[i, k] = orig
            fd[i, k] = (fp - fm) / (2.0 * h)
    assert np.allclose(analytic, fd, rtol=1e-4, atol=1e-7)


def test_upsample_preserves_node_values(rng):
    store = ad.ParamStore()
    vol = _make_volume(store, resolution=(4, 4, 4), ranks=(2, 2, 2), seed=3)
    # Corner-aligned resampling keeps values at old node positions.
    grid = np.linspace(-1.0, 1.0, 4)
    g = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
    before = vol.sample(g).value
    up = vol.upsample(store, "vol", (7, 7, 7))
    after = up.sample(g).value
    assert np.allclose(before, after, atol=1e-10)
    assert up.resolution == (7, 7, 7)


def test_upsample_rejects_shrink(rng):
    store = ad.ParamStore()
    vol = _make_volume(store, resolution=(4, 4, 4), ranks=(1, 1, 1), seed=4)
    with pytest.raises(ValueError):
        vol.upsample(store, "vol", (3, 4, 4))


def test_tv_loss_oracle():
    store = ad.ParamStore()
    vol = DecomposedVolume.create(store, "vol", (2, 2, 2), (1, 1, 1),
                                  rng=np.random.default_rng(5))
    expect = 0.0
    for pair in vol.pairs:
        a = pair.planeA.value
        expect += np.mean((a[1:] - a[:-1]) ** 2) + np.mean((a[:, 1:] - a[:, :-1]) ** 2)
        b = pair.planeB.value
        expect += np.mean((b[1:] - b[:-1]) ** 2)
    assert float(vol.tv_loss().value) == pytest.approx(expect, rel=1e-12)


def test_growth_schedule():
    sched = GrowthSchedule(upsample_steps=[1000, 2000],
                           initial_voxels=24 ** 3, final_voxels=48 ** 3)
    assert growth_resolutions(sched, 0) == (24, 24, 24)
    mid = growth_resolutions(sched, 1500)[0]
    # Logarithmic growth: the voxel count midpoint is the geometric mean.
    assert mid == round((24 ** 3 * (48 / 24) ** 1.5) ** (1 / 3))
    assert growth_resolutions(sched, 2500) == (48, 48, 48)


def test_growth_schedule_validation():
    with pytest.raises(ValueError):
        GrowthSchedule(upsample_steps=[5, 5], initial_voxels=8, final_voxels=27)
    with pytest.raises(ValueError):
        GrowthSchedule(upsample_steps=[5], initial_voxels=27, final_voxels=8)


def test_feature_dim():
    store = ad.ParamStore()
    vol = _make_volume(store, ranks=(2, 3, 1))
    assert vol.feature_dim == 6
    assert vol.sample(np.zeros((1, 3))).shape == (1, 6)
