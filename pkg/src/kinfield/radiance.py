"""Static and dynamic radiance fields: feature volumes feeding a linear
density decoder (softplus) and a tiny MLP color decoder (sigmoid), plus
the dynamic-likelihood metric and skewed entropy loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .tensor_fields import DecomposedVolume

LIKELIHOOD_GUARD = 1e-10
ENTROPY_CLAMP = 1e-7


@dataclass
class RadianceSample:
    color: np.ndarray
    density: float


class MlpHead:
    """3 affine layers with ReLU activations between."""

    def __init__(self, store, name, in_dim, hidden, out_dim, rng=None):
        rng = np.random.default_rng(rng)
        self.layers = []
        dims = [in_dim, hidden, hidden, out_dim]
        for i, (din, dout) in enumerate(zip(dims, dims[1:])):
            s = np.sqrt(6.0 / (din + dout))
            w = store.add(f"{name}.w{i}", rng.uniform(-s, s, size=(din, dout)))
            # Small positive bias on hidden layers: volume features start
            # near zero, and zero biases would leave every ReLU off (dead
            # head, no gradient into the feature volumes).
            init_b = 0.01 if i < 2 else 0.0
            b = store.add(f"{name}.b{i}", np.full(dout, init_b))
            self.layers.append((w, b))

    def __call__(self, x):
        """Fused forward with a hand-written backward; one tape node for
        the whole 3-layer stack keeps tape overhead down."""
        x = ad.astensor(x)
        (w0, b0), (w1, b1), (w2, b2) = self.layers
        xv = x.value
        h1 = xv @ w0.value + b0.value
        a1 = np.maximum(h1, 0.0)
        h2 = a1 @ w1.value + b1.value
        a2 = np.maximum(h2, 0.0)
        out = a2 @ w2.value + b2.value

        def bw(g):
            gw2 = a2.T @ g
            gb2 = g.sum(axis=0)
            gh2 = (g @ w2.value.T) * (h2 > 0.0)
            gw1 = a1.T @ gh2
            gb1 = gh2.sum(axis=0)
            gh1 = (gh2 @ w1.value.T) * (h1 > 0.0)
            gw0 = xv.T @ gh1
            gb0 = gh1.sum(axis=0)
            gx = gh1 @ w0.value.T
            return gx, gw0, gb0, gw1, gb1, gw2, gb2

        return ad.node(out, (x, w0, b0, w1, b1, w2, b2), bw)


class LinearDensityHead:
    """Single linear layer over the density-volume feature."""

    def __init__(self, store, name, in_dim, rng=None):
        rng = np.random.default_rng(rng)
        s = np.sqrt(6.0 / (in_dim + 1))
        self.w = store.add(f"{name}.w", rng.uniform(-s, s, size=(in_dim, 1)))
        self.b = store.add(f"{name}.b", np.zeros(1))

    def __call__(self, feat):
        return ad.reshape(ad.matmul(feat, self.w) + self.b, (-1,))


def _normalize_dirs(dirs):
    d = np.asarray(dirs, dtype=np.float64)
    norms = np.linalg.norm(d, axis=-1, keepdims=True)
    return d / norms


class StaticField:
    """Time-independent radiance field over 3D VM-factorized volumes."""

    def __init__(self, store, name, resolution, density_ranks, rgb_ranks,
                 hidden=64, rng=None):
        rng = np.random.default_rng(rng)
        self.name = name
        self.sigma_volume = DecomposedVolume.create(
            store, f"{name}.sigma", resolution, density_ranks, rng=rng)
        self.rgb_volume = DecomposedVolume.create(
            store, f"{name}.rgb", resolution, rgb_ranks, rng=rng)
        self.density_head = LinearDensityHead(
            store, f"{name}.sigma_head", self.sigma_volume.feature_dim, rng=rng)
        self.rgb_head = MlpHead(store, f"{name}.rgb_head",
                                self.rgb_volume.feature_dim + 3, hidden, 3, rng=rng)

    def density(self, points, mask=None):
        pts = points[:, :3] if _query_width(points) == 4 else points
        feat = self.sigma_volume.sample(pts, mask=mask)
        return ad.softplus(self.density_head(feat))

    def color(self, points, dirs, mask=None):
        pts = points[:, :3] if _query_width(points) == 4 else points
        feat = self.rgb_volume.sample(pts, mask=mask)
        d = _normalize_dirs(dirs)
        h = ad.concatenate([feat, ad.astensor(d)], axis=1)
        return ad.sigmoid(self.rgb_head(h))

    def query(self, points, dirs, mask=None):
        return self.density(points, mask=mask), self.color(points, dirs, mask=mask)

    def volumes(self):
        return {f"{self.name}.sigma": self.sigma_volume, f"{self.name}.rgb": self.rgb_volume}


class DynamicField:
    """Time-conditioned radiance field over 4D HexPlane-style volumes."""

    def __init__(self, store, name, resolution, tdim, density_ranks, rgb_ranks,
                 hidden=64, rng=None):
        rng = np.random.default_rng(rng)
        self.name = name
        self.sigma_volume = DecomposedVolume.create(
            store, f"{name}.sigma", resolution, density_ranks, tdim=tdim, rng=rng)
        self.rgb_volume = DecomposedVolume.create(
            store, f"{name}.rgb", resolution, rgb_ranks, tdim=tdim, rng=rng)
        self.density_head = LinearDensityHead(
            store, f"{name}.sigma_head", self.sigma_volume.feature_dim, rng=rng)
        self.rgb_head = MlpHead(store, f"{name}.rgb_head",
                                self.rgb_volume.feature_dim + 3, hidden, 3, rng=rng)

    def density(self, points, mask=None):
        feat = self.sigma_volume.sample(points, mask=mask)
        return ad.softplus(self.density_head(feat))

    def color(self, points, dirs, mask=None):
        feat = self.rgb_volume.sample(points, mask=mask)
        d = _normalize_dirs(dirs)
        h = ad.concatenate([feat, ad.astensor(d)], axis=1)
        return ad.sigmoid(self.rgb_head(h))

    def query(self, points, dirs, mask=None):
        return self.density(points, mask=mask), self.color(points, dirs, mask=mask)

    def volumes(self):
        return {f"{self.name}.sigma": self.sigma_volume, f"{self.name}.rgb": self.rgb_volume}


class ZeroField:
    """Empty-space stand-in; lets single-field rendering reuse the
    composite code path bit-for-bit."""

    def query(self, points, dirs, mask=None):
        n = points.shape[0]
        return ad.Tensor(np.zeros(n)), ad.Tensor(np.zeros((n, 3)))

    def density(self, points, mask=None):
        return ad.Tensor(np.zeros(points.shape[0]))


def _query_width(points):
    shape = points.value.shape if isinstance(points, ad.Tensor) else np.shape(points)
    return shape[1]


def dynamic_likelihood(sigma_d, sigma_s, guard=LIKELIHOOD_GUARD):
    """Likelihood that a point belongs to the dynamic field:
    sigma_d / (sigma_d + sigma_s), guarded so 0/0 reads as static."""
    return sigma_d / (sigma_d + sigma_s + guard)


def entropy_loss(p_d, k=2.0):
    """Skewed binary entropy of the dynamic likelihood; k >= 1 biases
    ambiguous points toward the static explanation."""
    if k < 1.0:
        raise ValueError("skew k must be >= 1")
    p = ad.clip(ad.astensor(p_d), ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
    q = p ** k
    q = ad.clip(q, ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
    return -(q * ad.log(q) + (1.0 - q) * ad.log(1.0 - q))
