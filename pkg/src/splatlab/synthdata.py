"""Synthetic dynamic scenes with exact ground truth.

Gaussians are grouped into clusters that move rigidly (constant velocity
plus a sinusoidal sway), so positions at any time have a closed form.
Frames are rendered through this package's own rasterizer at float64,
which removes renderer mismatch as a confound: a trained deformation
network is measured purely against the motion model.

The generator also emits a noisy canonical initialization (ground-truth
positions at a reference time plus Gaussian jitter) so the denoising
behaviour of the two-stage deformation is measurable via chamfer
distance.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from . import images
from .diffcore import no_grad
from .gaussians import Camera, GaussianCloud
from .rasterizer import render

CANONICAL_REF_T = 0.5
AABB_MARGIN = 0.15  # relative padding of the encoder AABB around GT motion


@dataclass
class ScenePreset:
    n_gaussians: int = 200
    n_clusters: int = 2
    n_times: int = 10
    n_cameras: int = 4
    image_size: int = 32
    sh_degree: int = 1
    sigma_noise_rel: float = 0.1   # canonical jitter, fraction of scene extent
    camera_radius: float = 2.6
    camera_height: float = 1.1
    fov_deg: float = 50.0


PRESETS = {
    "toy": ScenePreset(),
    "mini": ScenePreset(n_gaussians=36, n_clusters=2, n_times=5, n_cameras=3,
                        image_size=16),
}


@dataclass
class ClusterMotion:
    velocity: np.ndarray    # (3,)
    amplitude: np.ndarray   # (3,)
    freq: float
    phase: float


@dataclass
class FrameSample:
    frame_id: int
    image_path: str
    camera_id: int
    t: float
    split: str


@dataclass
class SceneTruth:
    """Closed-form trajectories plus the static gaussian attributes."""

    base_mu: np.ndarray
    cluster_id: np.ndarray
    motions: list
    q: np.ndarray
    s: np.ndarray
    sigma_logit: np.ndarray
    h: np.ndarray
    times: np.ndarray
    extent: float
    seed: int

    def positions_at(self, t):
        """base + velocity*t + amplitude*sin(2 pi f t + phase), per cluster."""
        out = self.base_mu.copy()
        for cid, m in enumerate(self.motions):
            offset = (m.velocity * t
                      + m.amplitude * np.sin(2.0 * np.pi * m.freq * t + m.phase))
            out[self.cluster_id == cid] += offset
        return out

    def cloud_at(self, t, dtype=np.float64):
        return GaussianCloud.create(
            self.positions_at(t), self.q, self.s, self.sigma_logit, self.h,
            dtype=dtype)


@dataclass
class Dataset:
    root: str
    cameras: list
    frames: list
    times: np.ndarray
    aabb: np.ndarray        # (2,3) encoder query bounds
    extent: float
    background: tuple = (0.0, 0.0, 0.0)
    sigma_noise: float = 0.0
    _image_cache: dict = field(default_factory=dict, repr=False)

    @property
    def train_frames(self):
        return [f for f in self.frames if f.split == "train"]

    @property
    def holdout_frames(self):
        return [f for f in self.frames if f.split == "holdout"]

    @property
    def frame_interval(self):
        ts = np.sort(np.unique(self.times))
        return float(ts[1] - ts[0]) if len(ts) > 1 else 1.0

    def load_image(self, frame):
        path = os.path.join(self.root, frame.image_path)
        if path not in self._image_cache:
            img = images.load_image(path)
            cam = self.cameras[frame.camera_id]
            if img.shape[:2] != (cam.height, cam.width):
                raise ValueError(f"{path}: image {img.shape[:2]} does not match "
                                 f"camera {(cam.height, cam.width)}")
            self._image_cache[path] = img
        return self._image_cache[path]

    def load_canonical(self):
        data = np.load(os.path.join(self.root, "canonical.npz"))
        return {k: data[k] for k in ("mu", "q", "s", "sigma_logit", "h")}


def chamfer(a, b):
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


# ---------------------------------------------------------------------------
# generation

def _ring_cameras(preset):
    cams = []
    for i in range(preset.n_cameras):
        ang = 2.0 * np.pi * i / preset.n_cameras
        eye = (preset.camera_radius * np.cos(ang),
               preset.camera_radius * np.sin(ang),
               preset.camera_height)
        f = preset.image_size / (2.0 * np.tan(np.radians(preset.fov_deg) / 2.0))
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), fx=f,
                                   width=preset.image_size,
                                   height=preset.image_size))
    return cams


def _sample_truth(rng, preset):
    n, k = preset.n_gaussians, preset.n_clusters
    centers = rng.uniform(-0.55, 0.55, size=(k, 3))
    cluster_id = rng.integers(k, size=n)
    base = centers[cluster_id] + rng.normal(0.0, 0.28, size=(n, 3))
    motions = [
        ClusterMotion(
            velocity=rng.uniform(-0.25, 0.25, size=3),
            amplitude=rng.uniform(0.02, 0.14, size=3),
            freq=float(rng.uniform(0.8, 1.6)),
            phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        )
        for _ in range(k)
    ]

    bands = (preset.sh_degree + 1) ** 2
    h = np.zeros((n, bands, 3))
    h[:, 0, :] = rng.uniform(-1.2, 1.4, size=(n, 3))
    if bands > 1:
        h[:, 1:, :] = rng.normal(0.0, 0.12, size=(n, bands - 1, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    s = np.log(rng.uniform(0.05, 0.11, size=(n, 3)))
    opacity = rng.uniform(0.65, 0.95, size=(n, 1))
    sigma_logit = np.log(opacity / (1.0 - opacity))

    times = np.linspace(0.0, 1.0, preset.n_times)
    truth = SceneTruth(base, cluster_id, motions, q, s, sigma_logit, h, times,
                       extent=0.0, seed=0)
    all_pos = np.concatenate([truth.positions_at(t) for t in times])
    truth.extent = float((all_pos.max(axis=0) - all_pos.min(axis=0)).max())
    return truth, all_pos


def generate(seed, preset="toy", out_dir="data", image_format="ppm"):
    """Render a full multi-view multi-time dataset to ``out_dir``.

    Writes manifest.ini, frames/*.{ppm,png}, truth.npz (ground-truth
    trajectories) and canonical.npz (jittered initialization).
    Deterministic given (seed, preset).
    """
    if isinstance(preset, str):
        preset = PRESETS[preset]
    rng = np.random.default_rng(seed)
    truth, all_pos = _sample_truth(rng, preset)
    truth.seed = seed
    cameras = _ring_cameras(preset)

    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    frames = []
    fid = 0
    holdout_cam = preset.n_cameras - 1
    for ci, cam in enumerate(cameras):
        for ti, t in enumerate(truth.times):
            with no_grad():
                img = render(truth.cloud_at(float(t)), cam).rgb.value
            rel = f"frames/cam{ci}_t{ti:03d}.{image_format}"
            images.save_image(os.path.join(out_dir, rel), img)
            frames.append(FrameSample(
                frame_id=fid, image_path=rel, camera_id=ci, t=float(t),
                split="holdout" if ci == holdout_cam else "train"))
            fid += 1

    lo = all_pos.min(axis=0)
    hi = all_pos.max(axis=0)
    pad = AABB_MARGIN * (hi - lo).max()
    aabb = np.stack([lo - pad, hi + pad])

    sigma_noise = preset.sigma_noise_rel * truth.extent
    mu_noisy = (truth.positions_at(CANONICAL_REF_T)
                + rng.normal(0.0, sigma_noise, size=truth.base_mu.shape))
    np.savez(os.path.join(out_dir, "canonical.npz"),
             mu=mu_noisy, q=truth.q, s=truth.s,
             sigma_logit=truth.sigma_logit, h=truth.h)
    np.savez(os.path.join(out_dir, "truth.npz"),
             base_mu=truth.base_mu, cluster_id=truth.cluster_id,
             q=truth.q, s=truth.s, sigma_logit=truth.sigma_logit, h=truth.h,
             times=truth.times, extent=truth.extent, seed=seed,
             velocity=np.stack([m.velocity for m in truth.motions]),
             amplitude=np.stack([m.amplitude for m in truth.motions]),
             freq=np.array([m.freq for m in truth.motions]),
             phase=np.array([m.phase for m in truth.motions]))

    _write_manifest(out_dir, cameras, frames, truth, aabb, sigma_noise)
    return truth, load_dataset(out_dir)


def _write_manifest(out_dir, cameras, frames, truth, aabb, sigma_noise):
    cp = configparser.ConfigParser()
    cp["scene"] = {
        "seed": str(truth.seed),
        "extent": repr(float(truth.extent)),
        "sigma_noise": repr(float(sigma_noise)),
        "aabb": " ".join(repr(float(v)) for v in aabb.reshape(-1)),
        "times": " ".join(repr(float(t)) for t in truth.times),
        "background": "0.0 0.0 0.0",
        "n_cameras": str(len(cameras)),
        "n_frames": str(len(frames)),
    }
    for i, cam in enumerate(cameras):
        cp[f"camera {i}"] = {
            "w2c": " ".join(repr(float(v)) for v in cam.w2c.reshape(-1)),
            "fx": repr(float(cam.fx)), "fy": repr(float(cam.fy)),
            "cx": repr(float(cam.cx)), "cy": repr(float(cam.cy)),
            "width": str(cam.width), "height": str(cam.height),
        }
    for fr in frames:
        cp[f"frame {fr.frame_id}"] = {
            "image": fr.image_path,
            "camera": str(fr.camera_id),
            "t": repr(fr.t),
            "split": fr.split,
        }
    with open(os.path.join(out_dir, "manifest.ini"), "w") as f:
        cp.write(f)


def load_dataset(path):
    cp = configparser.ConfigParser()
    manifest = os.path.join(path, "manifest.ini")
    if not cp.read(manifest):
        raise FileNotFoundError(manifest)
    scene = cp["scene"]
    aabb = np.array([float(v) for v in scene["aabb"].split()]).reshape(2, 3)
    times = np.array([float(v) for v in scene["times"].split()])
    background = tuple(float(v) for v in scene["background"].split())

    cameras = []
    for i in range(int(scene["n_cameras"])):
        sec = cp[f"camera {i}"]
        cameras.append(Camera(
            w2c=np.array([float(v) for v in sec["w2c"].split()]).reshape(4, 4),
            fx=float(sec["fx"]), fy=float(sec["fy"]),
            cx=float(sec["cx"]), cy=float(sec["cy"]),
            width=int(sec["width"]), height=int(sec["height"])))

    frames = []
    for i in range(int(scene["n_frames"])):
        sec = cp[f"frame {i}"]
        frames.append(FrameSample(
            frame_id=i, image_path=sec["image"], camera_id=int(sec["camera"]),
            t=float(sec["t"]), split=sec["split"]))

    return Dataset(root=path, cameras=cameras, frames=frames, times=times,
                   aabb=aabb, extent=float(scene["extent"]),
                   background=background,
                   sigma_noise=float(scene["sigma_noise"]))


def load_truth(path):
    """SceneTruth from a dataset directory, or None if absent."""
    f = os.path.join(path, "truth.npz")
    if not os.path.exists(f):
        return None
    d = np.load(f)
    motions = [
        ClusterMotion(velocity=d["velocity"][i], amplitude=d["amplitude"][i],
                      freq=float(d["freq"][i]), phase=float(d["phase"][i]))
        for i in range(len(d["freq"]))
    ]
    return SceneTruth(
        base_mu=d["base_mu"], cluster_id=d["cluster_id"], motions=motions,
        q=d["q"], s=d["s"], sigma_logit=d["sigma_logit"], h=d["h"],
        times=d["times"], extent=float(d["extent"]), seed=int(d["seed"]))
