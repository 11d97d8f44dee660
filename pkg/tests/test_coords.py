"""NDC projection, inverse, displacement transport, density conversion,
and finite-difference step sizing."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinfield import autodiff as ad
from kinfield import coords
from kinfield.coords import NdcCamera


def test_round_trip_interior(cam, rng):
    p = rng.uniform(-0.99, 0.99, size=(500, 3))
    back = coords.world_to_ndc(coords.ndc_to_world(p, cam), cam)
    assert np.max(np.abs(back - p)) < 1e-9


def test_round_trip_world_first(cam, rng):
    w = np.stack([rng.uniform(-1.0, 1.0, 200),
                  rng.uniform(-1.0, 1.0, 200),
                  rng.uniform(-5.9, -2.1, 200)], axis=1)
    back = coords.ndc_to_world(coords.world_to_ndc(w, cam), cam)
    assert np.max(np.abs(back - w)) < 1e-9


def test_near_far_boundary_exact(cam):
    near_pt = coords.ndc_to_world(np.array([[0.0, 0.0, -1.0]]), cam)
    far_pt = coords.ndc_to_world(np.array([[0.0, 0.0, 1.0]]), cam)
    assert near_pt[0, 2] == -cam.near
    assert far_pt[0, 2] == -cam.far
    # The near-plane corners map to the NDC corners.
    corner = coords.world_to_ndc(np.array([[cam.right, cam.top, -cam.near]]), cam)
    assert np.allclose(corner, [1.0, 1.0, -1.0], atol=1e-12)


def test_behind_camera_raises(cam):
    with pytest.raises(coords.BehindCamera):
        coords.world_to_ndc(np.array([[0.0, 0.0, 0.5]]), cam)
    with pytest.raises(coords.BehindCamera):
        coords.world_to_ndc(np.array([[0.0, 0.0, 0.0]]), cam)


def test_degenerate_depth_raises(cam):
    # denominator (f+n) - z(f-n) = 0 at z = (f+n)/(f-n) = 2 for near 2 far 6
    with pytest.raises(coords.DegenerateDepth):
        coords.ndc_to_world(np.array([[0.0, 0.0, 2.0]]), cam)


def test_camera_validation():
    with pytest.raises(coords.CoordinateError):
        NdcCamera(near=-1.0, far=6.0, right=1.0, top=1.0)
    with pytest.raises(coords.CoordinateError):
        NdcCamera(near=2.0, far=1.0, right=1.0, top=1.0)
    with pytest.raises(coords.CoordinateError):
        NdcCamera(near=2.0, far=6.0, right=0.0, top=1.0)


def test_from_intrinsics():
    cam = NdcCamera.from_intrinsics(2.0, 6.0, width=32, height=16, fx=40.0, fy=20.0)
    assert cam.right == pytest.approx(2.0 * 32 / 80.0)
    assert cam.top == pytest.approx(2.0 * 16 / 40.0)


def test_displace_in_ndc_definitional_round_trip(cam, rng):
    p = rng.uniform(-0.8, 0.8, size=(300, 3))
    d = rng.uniform(-0.05, 0.05, size=(300, 3))
    dn = coords.displace_in_ndc(p, d, cam)
    # Applying the NDC displacement and mapping back to world must land on
    # world + d exactly (this is the defining property).
    w_moved = coords.ndc_to_world(p + dn, cam)
    w_expected = coords.ndc_to_world(p, cam) + d
    assert np.max(np.abs(w_moved - w_expected)) < 1e-8


def test_displace_zero_is_zero(cam, rng):
    p = rng.uniform(-0.9, 0.9, size=(50, 3))
    dn = coords.displace_in_ndc(p, np.zeros(3), cam)
    assert np.max(np.abs(dn)) < 1e-12


def test_density_to_world_affine_oracle(cam):
    # g(q) = diag(2, 3, 4) q has |det J| = 24 everywhere.
    transform = lambda q: q * np.array([2.0, 3.0, 4.0])
    sigma = np.array([1.0, 5.0])
    p = np.array([[0.1, 0.2, 0.3], [-0.4, 0.0, 0.2]])
    out = coords.density_to_world(sigma, p, cam, C=1.0, transform=transform)
    assert np.allclose(out, sigma / 24.0, rtol=1e-8)
    out2 = coords.density_to_world(sigma, p, cam, C=3.0, transform=transform)
    assert np.allclose(out2, 3.0 * sigma / 24.0, rtol=1e-8)


def test_density_to_world_perspective_jacobian(cam):
    # Against the analytic determinant of the NDC -> world map: the map is
    # separable in depth, so det J = dx/dxn * dy/dyn * dz/dzn.
    p = np.array([[0.2, -0.3, 0.1]])
    n, f = cam.near, cam.far
    zn = p[0, 2]
    neg_z = 2.0 * f * n / ((f + n) - zn * (f - n))
    dz_dzn = 2.0 * f * n * (f - n) / ((f + n) - zn * (f - n)) ** 2
    # x = neg_z * xn * right / n: dx/dxn at fixed zn, plus cross terms in
    # the z-column only; the matrix is triangular in (xn, yn) block.
    det = (neg_z * cam.right / n) * (neg_z * cam.top / n) * dz_dzn
    out = coords.density_to_world(np.array([2.0]), p, cam)
    assert np.allclose(out, 2.0 / abs(det), rtol=1e-6)


def test_density_to_world_rejects_negative(cam):
    with pytest.raises(ValueError):
        coords.density_to_world(np.array([-1.0]), np.zeros((1, 3)), cam)


def test_density_singular_jacobian(cam):
    with pytest.raises(coords.SingularJacobian):
        coords.density_to_world(np.array([1.0]), np.zeros((1, 3)), cam,
                                transform=lambda q: q * 0.0)


def test_epsilon_world_affine(cam):
    transform = lambda q: q * 5.0
    p = np.zeros((4, 3))
    out = coords.epsilon_world(p, 0.01, 0, cam, transform=transform)
    assert np.allclose(out, 0.05)
    assert np.allclose(coords.epsilon_world(p, 0.01, "z", cam, transform=transform), 0.05)


def test_epsilon_world_grows_with_depth(cam):
    # NDC is compressive in depth: the same NDC step covers more world
    # distance near the far plane.
    near_p = np.array([[0.0, 0.0, -0.9]])
    far_p = np.array([[0.0, 0.0, 0.9]])
    e_near = coords.epsilon_world(near_p, 0.01, 2, cam)
    e_far = coords.epsilon_world(far_p, 0.01, 2, cam)
    assert e_far > e_near > 0


def test_epsilon_validation(cam):
    with pytest.raises(ValueError):
        coords.epsilon_world(np.zeros((1, 3)), -0.1, 0, cam)
    with pytest.raises(ValueError):
        coords.spatial_epsilon(1)
    with pytest.raises(ValueError):
        coords.temporal_epsilon(1)


def test_grid_epsilons():
    assert coords.spatial_epsilon(24, 0.2) == pytest.approx(0.4 / 24)
    assert coords.temporal_epsilon(8, 0.2) == pytest.approx(0.4 / 8)


def test_jacobian_fd_on_affine(cam):
    A = np.array([[1.0, 2.0, 0.0], [0.0, 3.0, 1.0], [0.5, 0.0, 2.0]])
    J = coords.jacobian_fd(lambda q: q @ A.T, np.array([[0.1, 0.2, 0.3]]))
    assert np.allclose(J[0], A, atol=1e-8)


def test_tensor_pathway_gradients(cam):
    p = ad.Tensor(np.array([[0.1, -0.2, 0.3]]), requires_grad=True)
    out = coords.world_to_ndc(coords.ndc_to_world(p, cam), cam)
    ad.backward(ad.tsum(out))
    # Round trip is the identity, so the gradient of the sum is all ones.
    assert np.allclose(p.grad, np.ones((1, 3)), atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.95, 0.95), st.floats(-0.95, 0.95), st.floats(-0.95, 0.95))
def test_round_trip_property(x, y, z):
    cam = NdcCamera(near=2.0, far=6.0, right=0.8, top=0.8)
    p = np.array([[x, y, z]])
    back = coords.world_to_ndc(coords.ndc_to_world(p, cam), cam)
    assert np.max(np.abs(back - p)) < 1e-9
