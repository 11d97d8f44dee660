"""Analytic scenes with known radiance and motion, used as oracles.

Each scene is a sum of Gaussian density blobs on polynomial paths,
optionally over a static textured slab.  Density, color, velocity,
acceleration, and jerk are all available in closed form at any world
point, and frames are rendered by a dense Riemann sum so they carry no
model assumptions.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield
from pathlib import Path
from typing import Optional

import numpy as np

from .images import write_ppm, write_raw, read_raw

DEFAULT_NEAR = 2.0
DEFAULT_FAR = 6.0
GT_SAMPLES = 4096


@dataclass
class Blob:
    """Gaussian density blob on a cubic path c(t) = c0 + v t + a t^2/2 + j t^3/6."""
    center0: np.ndarray
    v: np.ndarray
    a: np.ndarray
    j: np.ndarray
    radius: float
    amplitude: float
    color: np.ndarray

    def center(self, t):
        t = np.asarray(t, dtype=np.float64)
        return (self.center0 + t[..., None] * self.v
                + 0.5 * t[..., None] ** 2 * self.a
                + t[..., None] ** 3 / 6.0 * self.j)

    def velocity(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.v + t[..., None] * self.a + 0.5 * t[..., None] ** 2 * self.j

    def accel(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.a + t[..., None] * self.j

    def sigma(self, pts, t):
        d = pts - self.center(t)
        return self.amplitude * np.exp(-np.sum(d * d, axis=-1)
                                       / (2.0 * self.radius ** 2))


@dataclass
class Slab:
    """Static thin textured slab at constant z, acts as a background."""
    z0: float
    thickness: float
    amplitude: float

    def sigma(self, pts):
        dz = pts[..., 2] - self.z0
        return self.amplitude * np.exp(-dz * dz / (2.0 * self.thickness ** 2))

    def color(self, pts):
        x, y = pts[..., 0], pts[..., 1]
        r = 0.5 + 0.45 * np.sin(3.0 * x) * np.cos(2.0 * y)
        g = 0.5 + 0.45 * np.sin(2.0 * x + 1.0)
        b = 0.5 + 0.45 * np.cos(3.0 * y)
        return np.stack([r, g, b], axis=-1)


@dataclass
class AnalyticScene:
    name: str
    blobs: list
    slab: Optional[Slab] = None
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    @property
    def max_amplitude(self):
        return max(b.amplitude for b in self.blobs)

    def radiance(self, pts, t):
        """Total density [N] and density-weighted color [N, 3] at time t."""
        pts = np.asarray(pts, dtype=np.float64)
        sigma = np.zeros(pts.shape[:-1])
        weighted = np.zeros(pts.shape[:-1] + (3,))
        for b in self.blobs:
            s = b.sigma(pts, t)
            sigma = sigma + s
            weighted = weighted + s[..., None] * b.color
        if self.slab is not None:
            s = self.slab.sigma(pts)
            sigma = sigma + s
            weighted = weighted + s[..., None] * self.slab.color(pts)
        color = np.zeros_like(weighted)
        np.divide(weighted, sigma[..., None], out=color, where=sigma[..., None] > 1e-12)
        return sigma, color

    def dynamic_sigma(self, pts, t):
        pts = np.asarray(pts, dtype=np.float64)
        sigma = np.zeros(pts.shape[:-1])
        for b in self.blobs:
            sigma = sigma + b.sigma(pts, t)
        return sigma

    def kinematics(self, pts, t):
        """Density-weighted (v, a, j) fields at world points, plus the
        dynamic density used as the confidence weight."""
        pts = np.asarray(pts, dtype=np.float64)
        n = pts.shape[:-1]
        wsum = np.zeros(n)
        v = np.zeros(n + (3,))
        a = np.zeros(n + (3,))
        j = np.zeros(n + (3,))
        for b in self.blobs:
            w = b.sigma(pts, t)
            wsum = wsum + w
            v = v + w[..., None] * b.velocity(t)
            a = a + w[..., None] * b.accel(t)
            j = j + w[..., None] * b.j
        scale = np.zeros(n)
        np.divide(1.0, wsum, out=scale, where=wsum > 1e-12)
        return v * scale[..., None], a * scale[..., None], j * scale[..., None], wsum


def make_scene(name) -> AnalyticScene:
    c0 = np.array([-0.5, -0.1, -4.0])
    red = np.array([0.9, 0.25, 0.2])
    blue = np.array([0.2, 0.4, 0.9])
    zeros = np.zeros(3)
    if name == "translate":
        blobs = [Blob(c0, np.array([1.0, 0.3, 0.0]), zeros, zeros,
                      radius=0.45, amplitude=8.0, color=red)]
        return AnalyticScene(name, blobs)
    if name == "parabola":
        blobs = [Blob(np.array([-0.6, -0.5, -4.0]), np.array([1.2, 1.6, 0.0]),
                      np.array([0.0, -3.2, 0.0]), zeros,
                      radius=0.45, amplitude=8.0, color=red)]
        return AnalyticScene(name, blobs)
    if name == "jerky":
        blobs = [Blob(np.array([-0.6, 0.0, -4.0]), np.array([1.8, 0.9, 0.0]),
                      np.array([0.0, -6.0, 0.0]), np.array([-3.0, 9.0, 0.0]),
                      radius=0.45, amplitude=8.0, color=red)]
        return AnalyticScene(name, blobs)
    if name == "two_body":
        blobs = [Blob(np.array([-0.7, 0.3, -3.8]), np.array([1.2, -0.5, 0.0]),
                      zeros, zeros, radius=0.4, amplitude=8.0, color=red),
                 Blob(np.array([0.7, -0.4, -4.3]), np.array([-1.1, 0.7, 0.0]),
                      zeros, zeros, radius=0.4, amplitude=8.0, color=blue)]
        return AnalyticScene(name, blobs, slab=Slab(z0=-5.6, thickness=0.06,
                                                    amplitude=30.0))
    raise ValueError(f"unknown scene {name!r}")


# -- cameras -----------------------------------------------------------

def default_intrinsics(width, height, fov_deg=40.0):
    fx = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
    return np.array([[fx, 0.0, width / 2.0],
                     [0.0, fx, height / 2.0],
                     [0.0, 0.0, 1.0]])


def _look_at(center, target, up=(0.0, 1.0, 0.0)):
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    # Camera looks down -z, x right, y up; columns are camera axes in world.
    R = np.stack([right, true_up, -fwd], axis=1)
    return R


def arc_poses(n_frames, radius=0.12, target=(0.0, 0.0, -4.0)):
    """Camera-to-world [3, 4] poses on a small lateral arc; the first pose
    is the identity (the reference frame)."""
    poses = []
    for k in range(n_frames):
        if k == 0:
            poses.append(np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1))
            continue
        th = 2.0 * np.pi * k / n_frames
        c = np.array([radius * np.sin(th), 0.3 * radius * (1.0 - np.cos(th)), 0.0])
        R = _look_at(c, target)
        poses.append(np.concatenate([R, c[:, None]], axis=1))
    return poses


def pixel_rays(pose, K, width, height):
    """World-space (origins [H*W, 3], unit directions [H*W, 3]) through
    pixel centers, row-major."""
    ii, jj = np.meshgrid(np.arange(width), np.arange(height))
    x = (ii + 0.5 - K[0, 2]) / K[0, 0]
    y = -(jj + 0.5 - K[1, 2]) / K[1, 1]
    d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1).reshape(-1, 3)
    R, t = pose[:, :3], pose[:, 3]
    d = d_cam @ R.T
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(t, d.shape)
    return o.copy(), d


def render_ground_truth(scene, pose, K, width, height, t,
                        n_steps=GT_SAMPLES, chunk=2048):
    """Dense Riemann-sum emission-absorption render, [H, W, 3] in [0, 1].

    Integration runs between the world planes z = -near and z = -far
    along each ray; background is black."""
    o, d = pixel_rays(pose, K, width, height)
    # Distance along the (unit) ray to each bounding plane.
    s0 = (-scene.near - o[:, 2]) / d[:, 2]
    s1 = (-scene.far - o[:, 2]) / d[:, 2]
    img = np.zeros((o.shape[0], 3))
    for start in range(0, o.shape[0], chunk):
        sl = slice(start, start + chunk)
        ob, db = o[sl], d[sl]
        a, b = s0[sl], s1[sl]
        ds = (b - a) / n_steps                                   # [B]
        mids = a[:, None] + (np.arange(n_steps) + 0.5)[None, :] * ds[:, None]
        pts = ob[:, None, :] + mids[..., None] * db[:, None, :]
        sigma, color = scene.radiance(pts.reshape(-1, 3), t)
        sigma = sigma.reshape(mids.shape)
        color = color.reshape(mids.shape + (3,))
        optical = sigma * ds[:, None]
        csum = np.cumsum(optical, axis=1)
        trans = np.exp(-(csum - optical))
        w = trans * (1.0 - np.exp(-optical))
        img[sl] = np.sum(w[..., None] * color, axis=1)
    return np.clip(img.reshape(height, width, 3), 0.0, 1.0)


# -- dataset emission --------------------------------------------------

KIN_GRID = (14, 14, 12)
KIN_BOX = ((-1.6, 1.6), (-1.6, 1.6), (-5.2, -2.8))


def kinematic_grid():
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(KIN_BOX, KIN_GRID)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=-1)


def kinematic_dump(scene, t):
    """[M, 13] table: world point, dynamic density, v, a, j."""
    pts = kinematic_grid()
    v, a, j, w = scene.kinematics(pts, t)
    return np.concatenate([pts, w[:, None], v, a, j], axis=1)


def emit_dataset(scene, out_dir, n_frames=8, width=32, height=32,
                 heldout=(), extra_views=()):
    """Write frames, per-frame kinematic tables, and a manifest.

    ``heldout`` frame indices get images and kinematics but are flagged so
    training code can skip them (their times become novel at evaluation).
    ``extra_views`` lists time indices that additionally get one held-out
    frame at the same time from an in-between arc pose, so seen times can
    be evaluated from an unseen view.  Output is deterministic for a given
    scene and arguments."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "kin").mkdir(parents=True, exist_ok=True)
    K = default_intrinsics(width, height)
    poses = arc_poses(n_frames)
    # Odd entries of the doubled arc sit halfway between training poses.
    between = arc_poses(2 * n_frames)
    times = np.linspace(0.0, 1.0, n_frames)

    records = [(k, times[k], poses[k], k in heldout) for k in range(n_frames)]
    for m, k in enumerate(extra_views):
        records.append((n_frames + m, times[k], between[2 * k + 1], True))

    lines = ["KFSCENE1",
             f"scene {scene.name}",
             f"frames {len(records)}",
             f"width {width}",
             f"height {height}",
             f"ndc_near {scene.near!r}",
             f"ndc_far {scene.far!r}",
             f"kin_threshold {0.5 * scene.max_amplitude!r}"]
    for idx, t, pose, held in records:
        img_rel = f"frames/frame_{idx:03d}.ppm"
        kin_rel = f"kin/frame_{idx:03d}.raw"
        img = render_ground_truth(scene, pose, K, width, height, t)
        write_ppm(out / img_rel, img)
        write_raw(out / kin_rel, kinematic_dump(scene, t), dtype="<f8")
        lines.append(f"frame {idx}")
        lines.append(f"image {img_rel}")
        lines.append(f"time {float(t)!r}")
        lines.append("pose " + " ".join(repr(float(v)) for v in pose.ravel()))
        lines.append("intrinsics " + " ".join(repr(float(v)) for v in K.ravel()))
        lines.append(f"kin {kin_rel}")
        lines.append(f"heldout {1 if held else 0}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out / "manifest.txt"


@dataclass
class Frame:
    index: int
    image_path: Path
    time: float
    pose: np.ndarray
    intrinsics: np.ndarray
    kin_path: Path
    heldout: bool


@dataclass
class Dataset:
    scene_name: str
    width: int
    height: int
    near: float
    far: float
    kin_threshold: float
    frames: list

    @property
    def times(self):
        return np.array([f.time for f in self.frames])

    def train_frames(self):
        return [f for f in self.frames if not f.heldout]


class ManifestError(ValueError):
    pass


def load_manifest(path) -> Dataset:
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != "KFSCENE1":
        raise ManifestError(f"{path}: bad magic")
    head = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("frame "):
        key, _, val = lines[i].partition(" ")
        head[key] = val
        i += 1
    try:
        n_frames = int(head["frames"])
        ds = Dataset(scene_name=head["scene"], width=int(head["width"]),
                     height=int(head["height"]), near=float(head["ndc_near"]),
                     far=float(head["ndc_far"]),
                     kin_threshold=float(head.get("kin_threshold", "0")),
                     frames=[])
    except KeyError as e:
        raise ManifestError(f"{path}: missing header field {e}") from e
    base = path.parent
    while i < len(lines):
        rec = {}
        idx = int(lines[i].split()[1])
        i += 1
        while i < len(lines) and not lines[i].startswith("frame "):
            key, _, val = lines[i].partition(" ")
            rec[key] = val
            i += 1
        try:
            ds.frames.append(Frame(
                index=idx,
                image_path=base / rec["image"],
                time=float(rec["time"]),
                pose=np.array([float(v) for v in rec["pose"].split()]).reshape(3, 4),
                intrinsics=np.array([float(v) for v in rec["intrinsics"].split()]).reshape(3, 3),
                kin_path=base / rec["kin"],
                heldout=rec.get("heldout", "0") == "1"))
        except (KeyError, ValueError) as e:
            raise ManifestError(f"{path}: bad frame record {idx}: {e}") from e
    if len(ds.frames) != n_frames:
        raise ManifestError(f"{path}: frame count mismatch")
    return ds


def load_kinematic_table(frame: Frame):
    """(points [M, 3], sigma [M], v [M, 3], a [M, 3], j [M, 3])."""
    table = read_raw(frame.kin_path)
    return (table[:, 0:3], table[:, 3], table[:, 4:7],
            table[:, 7:10], table[:, 10:13])
