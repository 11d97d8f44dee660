"""Kinematic field machinery: Taylor displacement, order gating, world
finite differences, strain-rate losses with hand-derived oracles, and
the displacement transport path."""

import numpy as np
import pytest

from kinfield import autodiff as ad
from kinfield import coords
from kinfield import kinematics
from kinfield.kinematics import (MAX_ORDER, EpsilonConfig, KinematicField,
                                 KinematicSample, StencilOutOfBounds,
                                 displace_points_ndc, displacement,
                                 evaluate_kinematic_losses, rigidity_loss,
                                 smoothness_loss, strain_rate, world_gradient,
                                 time_derivative)


class StubField:
    """Analytic kinematic field over NDC spacetime; ``fn(world, t)`` maps
    to a [N, 15] array."""

    def __init__(self, cam, fn, order=3):
        self.cam = cam
        self.fn = fn
        self.order = order

    def query(self, p4, mask=None, order=None):
        vals = p4.value if isinstance(p4, ad.Tensor) else np.asarray(p4)
        w = np.asarray(coords.ndc_to_world(vals[:, :3], self.cam))
        out = self.fn(w, vals[:, 3])
        m = np.zeros(3 * MAX_ORDER)
        m[: 3 * (self.order if order is None else order)] = 1.0
        return ad.Tensor(out * m)


def _uniform_field(cam, v):
    v = np.asarray(v, dtype=np.float64)

    def fn(w, t):
        out = np.zeros((w.shape[0], 3 * MAX_ORDER))
        out[:, 0:3] = v
        return out
    return StubField(cam, fn, order=1)


def test_taylor_displacement_oracle(rng):
    q = rng.normal(size=(4, 3 * MAX_ORDER))
    dt = rng.uniform(-1.0, 1.0, size=4)
    d = displacement(ad.Tensor(q), dt).value
    fact = [1.0, 1.0, 2.0, 6.0, 24.0, 120.0]
    expect = sum(dt[:, None] ** n / fact[n] * q[:, 3 * (n - 1):3 * n]
                 for n in range(1, MAX_ORDER + 1))
    assert np.allclose(d, expect, atol=1e-12)


def test_displacement_single_vector():
    kin = KinematicSample.from_vector(np.arange(15.0), order=1)
    d = displacement(kin, 0.5)
    assert np.allclose(d, 0.5 * np.array([0.0, 1.0, 2.0]))


def test_order_gating_exact_zeros():
    store = ad.ParamStore()
    field = KinematicField(store, "k", (4, 4, 4), 3, (2, 1, 1), hidden=8,
                           order=2, rng=0)
    p4 = np.array([[0.1, -0.2, 0.3, 0.5], [0.0, 0.0, 0.0, 0.0]])
    out = field.query(p4).value
    assert np.all(out[:, 6:] == 0.0)          # jerk and above exactly zero
    assert np.any(out[:, :6] != 0.0)
    out1 = field.query(p4, order=1).value
    assert np.all(out1[:, 3:] == 0.0)


def test_kinematic_field_order_validation():
    store = ad.ParamStore()
    with pytest.raises(ValueError):
        KinematicField(store, "k", (4, 4, 4), 3, (2, 1, 1), order=6)


def test_world_gradient_on_affine_field_is_exact(cam):
    # Linear functions are differentiated exactly by central differences.
    A = np.array([[0.5, -1.0, 2.0]])

    def fieldfn(pts3, times):
        w = np.asarray(coords.ndc_to_world(pts3, cam))
        return ad.Tensor(w @ A.T)

    pts = np.random.default_rng(0).uniform(-0.5, 0.5, size=(20, 3))
    derivs, mask = world_gradient(fieldfn, pts, 0.5, 0.02, cam)
    assert np.all(mask)
    for axis in range(3):
        assert np.allclose(derivs[axis].value, A[0, axis], atol=1e-7)


def test_world_gradient_convergence_order(cam):
    # Smooth nonlinear field: error should shrink as O(eps^2).
    def fieldfn(pts3, times):
        w = np.asarray(coords.ndc_to_world(pts3, cam))
        return ad.Tensor(np.sin(2.0 * w[:, 0:1]) * np.cos(w[:, 2:3]))

    p = np.array([[0.1, 0.0, -0.2]])
    w = np.asarray(coords.ndc_to_world(p, cam))
    exact = 2.0 * np.cos(2.0 * w[0, 0]) * np.cos(w[0, 2])
    errs = []
    for eps in (4e-2, 2e-2, 1e-2):
        derivs, mask = world_gradient(fieldfn, p, 0.5, eps, cam)
        assert mask[0]
        errs.append(abs(float(derivs[0].value[0, 0]) - exact))
    order = np.log2(errs[0] / errs[1]), np.log2(errs[1] / errs[2])
    assert 1.8 < order[0] < 2.2 and 1.8 < order[1] < 2.2


def test_world_gradient_masks_boundary(cam):
    def fieldfn(pts3, times):
        return ad.Tensor(pts3[:, 0:1])

    pts = np.array([[0.999, 0.0, 0.0], [0.0, 0.0, 0.0]])
    _, mask = world_gradient(fieldfn, pts, 0.5, 0.05, cam)
    assert not mask[0] and mask[1]


def test_time_derivative_and_mask():
    def fieldfn(pts3, times):
        return ad.Tensor((times ** 2)[:, None])

    pts = np.zeros((3, 3))
    t = np.array([0.5, 0.0, 1.0])
    d, mask = time_derivative(fieldfn, pts, t, 0.05)
    assert d.value[0, 0] == pytest.approx(1.0, abs=1e-9)    # d/dt t^2 = 2t
    assert mask[0] and not mask[1] and not mask[2]


def test_jacobian_single_point_raises_out_of_bounds(cam):
    def fieldfn(pts3, times):
        return ad.Tensor(pts3)

    pt = coords.SpacetimePoint(np.array([0.999, 0.0, 0.0]), 0.5)
    with pytest.raises(StencilOutOfBounds):
        kinematics.jacobian(fieldfn, pt, 0.05, cam)


def test_strain_rate_symmetry(rng):
    J = rng.normal(size=(4, 3, 3))
    D = strain_rate(J)
    assert np.allclose(D, np.swapaxes(D, -1, -2))
    assert np.allclose(D, 0.5 * (J + np.swapaxes(J, -1, -2)))


def test_rigidity_zero_on_rigid_motion(rng):
    # v = v0 + omega x r has a purely antisymmetric gradient.
    for _ in range(100):
        omega = rng.normal(size=3)
        J = np.array([[0.0, -omega[2], omega[1]],
                      [omega[2], 0.0, -omega[0]],
                      [-omega[1], omega[0], 0.0]])
        assert rigidity_loss(J, lambda_div=1.0) < 1e-12


def test_rigidity_dilation_oracle():
    # v = x: div = 3, second invariant = 3, loss = 9 lambda + 9.
    J = np.eye(3)
    for lam in (0.3, 1.0, 2.0):
        assert rigidity_loss(J, lambda_div=lam) == pytest.approx(9.0 * lam + 9.0,
                                                                 abs=1e-12)


def test_rigidity_shear_oracle():
    # v = (y, 0, 0): traceless, second invariant -1/4, loss = 1/16.
    J = np.zeros((3, 3))
    J[0, 1] = 1.0
    assert rigidity_loss(J, lambda_div=5.0) == pytest.approx(0.0625, abs=1e-12)


def test_rigidity_tensor_matches_numpy(rng):
    J = rng.normal(size=(6, 3, 3))
    a = rigidity_loss(J, lambda_div=0.7)
    b = rigidity_loss(ad.Tensor(J), lambda_div=0.7).value
    assert np.allclose(a, b, atol=1e-12)


def test_smoothness_loss_oracle():
    q = np.zeros((1, 15))
    q[0, 3:6] = [1.0, 2.0, 0.0]     # a
    q[0, 6:9] = [0.0, 1.0, 1.0]     # j
    base = float(smoothness_loss(ad.Tensor(q)).value[0])
    assert base == pytest.approx(5.0 + 2.0, abs=1e-12)
    with_adv = float(smoothness_loss(ad.Tensor(q),
                                     adv_v=ad.Tensor(np.array([[3.0, 0.0, 0.0]]))).value[0])
    assert with_adv == pytest.approx(base + 9.0, abs=1e-12)


def test_integrity_zero_for_consistent_linear_field(cam, rng):
    # v = c + A w (time independent): Dv/Dt = A v exactly, and central
    # differences are exact on linear fields, so the residual vanishes.
    A = np.array([[0.1, 0.2, 0.0], [0.0, -0.1, 0.3], [0.2, 0.0, 0.1]])
    c = np.array([0.3, -0.2, 0.1])

    def fn(w, t):
        v = c + w @ A.T
        a = v @ A.T
        out = np.zeros((w.shape[0], 15))
        out[:, 0:3] = v
        out[:, 3:6] = a
        return out

    field = StubField(cam, fn, order=2)
    pts = rng.uniform(-0.4, 0.4, size=(30, 3))
    eps = EpsilonConfig(eps_ndc=0.02, eps_t=0.05)
    terms = evaluate_kinematic_losses(pts, 0.5, field, None, cam, eps)
    assert float(terms.integrity.value) < 1e-18


def test_integrity_nonzero_for_inconsistent_field(cam, rng):
    def fn(w, t):
        out = np.zeros((w.shape[0], 15))
        out[:, 0:3] = [1.0, 0.0, 0.0]
        out[:, 3:6] = [5.0, 0.0, 0.0]     # claims acceleration, flow is uniform
        return out

    field = StubField(cam, fn, order=2)
    pts = rng.uniform(-0.4, 0.4, size=(10, 3))
    eps = EpsilonConfig(eps_ndc=0.02, eps_t=0.05)
    terms = evaluate_kinematic_losses(pts, 0.5, field, None, cam, eps)
    assert float(terms.integrity.value) == pytest.approx(25.0, rel=1e-6)


def test_transport_zero_for_advected_density(cam, rng):
    # sigma(w, t) = G(w - v t) advected by constant v solves the
    # transport equation; the residual is only FD error.
    v = np.array([0.3, -0.2, 0.1])

    def sigma_world_fn(pts3, times):
        w = np.asarray(coords.ndc_to_world(pts3, cam))
        x = w - v * times[:, None] - np.array([0.0, 0.0, -4.0])
        return ad.Tensor(np.exp(-np.sum(x * x, axis=1) / 0.8)[:, None])

    field = _uniform_field(cam, v)
    pts = rng.uniform(-0.3, 0.3, size=(20, 3))
    eps = EpsilonConfig(eps_ndc=1e-3, eps_t=1e-3)
    terms = evaluate_kinematic_losses(pts, 0.5, field, sigma_world_fn, cam, eps)
    assert float(terms.transport.value) < 1e-9


def test_displace_points_uniform_velocity_matches_definition(cam, rng):
    v = np.array([0.2, 0.1, -0.1])
    field = _uniform_field(cam, v)
    pts = rng.uniform(-0.5, 0.5, size=(40, 3))
    dt = 0.3
    moved, valid = displace_points_ndc(pts, 0.5, dt, field, cam)
    assert np.all(valid)
    expect = pts + coords.displace_in_ndc(pts, v * dt, cam)
    assert np.max(np.abs(moved.value - expect)) < 1e-10


def test_displace_points_masks_exits(cam):
    # A large displacement pushes the near-boundary point out of the box.
    field = _uniform_field(cam, np.array([50.0, 0.0, 0.0]))
    pts = np.array([[0.9, 0.0, 0.0], [0.0, 0.0, 0.0]])
    moved, valid = displace_points_ndc(pts, 0.5, 1.0, field, cam)
    assert not valid[0]
    # Invalid rows keep their original position.
    assert np.allclose(moved.value[0], pts[0], atol=1e-12)


def test_displace_points_accepts_tensor(cam):
    field = _uniform_field(cam, np.array([0.1, 0.0, 0.0]))
    pts = ad.Tensor(np.array([[0.1, 0.2, -0.3]]), requires_grad=True)
    moved, valid = displace_points_ndc(pts, 0.5, 0.5, field, cam)
    assert valid[0]
    ad.backward(ad.tsum(moved))
    assert pts.grad is not None and np.all(np.isfinite(pts.grad))


def test_epsilon_config_from_resolution():
    eps = EpsilonConfig.from_resolution(24, 8, 0.2)
    assert eps.eps_ndc == pytest.approx(0.4 / 24)
    assert eps.eps_t == pytest.approx(0.4 / 8)
