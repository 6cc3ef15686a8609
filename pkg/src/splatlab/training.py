"""Loss, optimizer, two-stage schedule, metrics, and checkpoints.

The loss is lambda * L1 + (1 - lambda) * (1 - SSIM)/2 + tv_weight * TV,
with SSIM computed over a valid-region Gaussian window. Training uses an
adaptive-moment optimizer with closed-form exponential learning-rate
decay; grid (plane) parameters get their own rate. Before
``stage1_iters`` only the first deformation is executed and supervised;
afterwards supervision shifts to the stage-2 output.

Checkpoints are a binary container: magic "DN4D", u32 version, then
length-prefixed named little-endian float32 arrays per parameter group.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import encoders as enc
from . import synthdata
from .deformnet import (DeformationModel, DsamConfig, Phase, TamConfig, knn)
from .diffcore import NonFiniteValue, Tensor, as_tensor
from .gaussians import GaussianCloud
from .rasterizer import render

CKPT_MAGIC = b"DN4D"
CKPT_VERSION = 1
PSNR_CAP = 99.0


class DivergedLoss(Exception):
    """Training hit a non-finite loss; a checkpoint was written first."""


class VersionMismatch(Exception):
    """Checkpoint magic/version/contents do not match this build."""


@dataclass
class LossConfig:
    lam: float = 0.9          # L1 weight ("lambda" in config files)
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    tv_weight: float = 1.0    # applied to grid encoders only


@dataclass
class Schedule:
    total_iters: int = 3000
    stage1_iters: int = 1500
    lr0: float = 1.6e-4
    lr_final: float = 1.6e-6
    grid_lr0: float = 1.6e-3
    grid_lr_final: float = 1.6e-5
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0  # 0 = final checkpoint only


def decayed_lr(lr0, lr_final, total_iters, i):
    """lr0 * (lr_final / lr0) ** (i / total_iters), exactly."""
    return lr0 * (lr_final / lr0) ** (i / total_iters)


# ---------------------------------------------------------------------------
# image metrics

def _gaussian_kernel(window, sigma):
    x = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _valid_conv_matrix(size, window, sigma, dtype):
    """Band matrix K (size-window+1, size): rows are the shifted kernel."""
    k = _gaussian_kernel(window, sigma)
    out = size - window + 1
    if out < 1:
        raise dc.ShapeMismatch(f"image side {size} smaller than ssim window {window}")
    m = np.zeros((out, size), dtype=dtype)
    for i in range(out):
        m[i, i:i + window] = k
    return m

_BLUR_CACHE = {}


def _blur_mats(h, w, window, sigma, dtype):
    key = (h, w, window, sigma, np.dtype(dtype).name)
    if key not in _BLUR_CACHE:
        _BLUR_CACHE[key] = (
            Tensor(_valid_conv_matrix(h, window, sigma, dtype)),
            Tensor(_valid_conv_matrix(w, window, sigma, dtype).T),
        )
    return _BLUR_CACHE[key]


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Structural similarity over (H,W,3) images in [0,1], valid windowing.

    Returns a float for array inputs and a scalar Tensor when either
    input is a Tensor (differentiable path).
    """
    tensor_in = isinstance(a, Tensor) or isinstance(b, Tensor)
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise dc.ShapeMismatch(f"ssim: {a.shape} vs {b.shape}")
    h, w, nch = a.shape
    kr, kc = _blur_mats(h, w, window, sigma, a.dtype)
    hv, wv = kr.shape[0], kc.shape[1]
    c1 = k1 * k1
    c2 = k2 * k2

    # blur all 5 statistics maps of all channels with two matmuls
    prods = (a, b, a * a, b * b, a * b)
    maps = [p[:, :, ch] for ch in range(nch) for p in prods]
    x = dc.concat(maps, axis=1)                       # (H, 5*nch*W)
    x = dc.matmul(kr, x)                              # rows blurred
    x = dc.reshape(x, (hv, 5 * nch, w))
    x = dc.reshape(dc.transpose(x, (1, 0, 2)), (5 * nch * hv, w))
    x = dc.matmul(x, kc)                              # cols blurred
    s = dc.reshape(x, (5 * nch, hv, wv))

    mx, my = s[0::5], s[1::5]
    sxx = s[2::5] - mx * mx
    syy = s[3::5] - my * my
    sxy = s[4::5] - mx * my
    num = (2.0 * (mx * my) + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    out = dc.mean(num / den)
    return out if tensor_in else float(out.value)


def psnr(a, b):
    """10 * log10(1 / MSE) for [0,1] images; identical images cap at 99 dB."""
    a = np.asarray(a.value if isinstance(a, Tensor) else a)
    b = np.asarray(b.value if isinstance(b, Tensor) else b)
    if a.shape != b.shape:
        raise dc.ShapeMismatch(f"psnr: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_CAP)


def l1(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise dc.ShapeMismatch(f"l1: {a.shape} vs {b.shape}")
    return dc.mean(dc.absolute(a - b))


def loss(rendered, target, encoders, cfg: LossConfig):
    """Eq.-style total loss. Returns (scalar Tensor, float components)."""
    if not isinstance(encoders, (list, tuple)):
        encoders = [encoders] if encoders is not None else []
    l1_term = l1(rendered, target)
    ssim_term = ssim(rendered, as_tensor(target, like=rendered),
                     cfg.ssim_window, cfg.ssim_sigma, cfg.k1, cfg.k2)
    dssim = (1.0 - ssim_term) * 0.5
    tv = None
    for e in encoders:
        t = enc.tv_loss(e)
        tv = t if tv is None else tv + t
    if tv is None:
        tv = Tensor(np.zeros((), dtype=rendered.dtype if isinstance(rendered, Tensor) else np.float64))
    total = cfg.lam * l1_term + (1.0 - cfg.lam) * dssim + cfg.tv_weight * tv
    parts = {
        "l1": float(l1_term.value),
        "dssim": float(dssim.value),
        "tv": float(tv.value),
    }
    return total, parts


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adaptive-moment optimizer; betas (0.9, 0.999), eps 1e-15."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-15):
        # groups: list of (params: dict name -> Tensor, lr_fn: iter -> lr)
        self.groups = groups
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.steps = {}

    def step(self, iteration):
        for params, lr_fn in self.groups:
            lr = lr_fn(iteration)
            for name, p in params.items():
                if p.grad is None:
                    continue
                g = p.grad
                t = self.steps.get(name, 0) + 1
                self.steps[name] = t
                m = self.m.get(name)
                if m is None:
                    m = np.zeros_like(p.value)
                    v = np.zeros_like(p.value)
                else:
                    v = self.v[name]
                m = self.b1 * m + (1.0 - self.b1) * g
                v = self.b2 * v + (1.0 - self.b2) * (g * g)
                self.m[name] = m
                self.v[name] = v
                mhat = m / (1.0 - self.b1 ** t)
                vhat = v / (1.0 - self.b2 ** t)
                p.value -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.value.dtype)

    def zero_grad(self):
        for params, _ in self.groups:
            for p in params.values():
                p.grad = None


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params):
    """Write named float32 arrays: magic, u32 version, u32 count, entries."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(params)))
        for name in sorted(params):
            arr = params[name]
            arr = np.asarray(arr.value if isinstance(arr, Tensor) else arr,
                             dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path):
    """Read a checkpoint into a dict name -> float32 array."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise VersionMismatch(f"bad magic {magic!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape).copy()
        return out


def restore_params(params, saved):
    """Load checkpoint arrays into live tensors (names and shapes must match)."""
    missing = set(params) - set(saved)
    extra = set(saved) - set(params)
    if missing or extra:
        raise VersionMismatch(f"parameter names differ (missing={sorted(missing)}, "
                              f"extra={sorted(extra)})")
    for name, p in params.items():
        arr = saved[name]
        if tuple(arr.shape) != tuple(p.value.shape):
            raise VersionMismatch(f"shape of {name}: {arr.shape} != {p.value.shape}")
        p.value = arr.astype(p.value.dtype)


# ---------------------------------------------------------------------------
# pipeline assembly

@dataclass
class Pipeline:
    cloud: GaussianCloud
    model: DeformationModel
    dataset: synthdata.Dataset

    def all_params(self):
        out = dict(self.cloud.params())
        out.update(self.model.parameters())
        return out

    def final_phase(self, schedule: Schedule):
        two = (self.model.use_nss and schedule.stage1_iters < schedule.total_iters)
        return Phase.TWO_STAGE if two else Phase.STAGE1_ONLY


def build_pipeline(dataset, encoder_cfg: enc.EncoderConfig, tam_cfg: TamConfig,
                   dsam_cfg: DsamConfig, seed=0, dtype=np.float32,
                   use_nss=True, use_tam=True, use_dsam=True,
                   freeze_stage1=False, hidden=64):
    """Build the canonical cloud and deformation model for a dataset."""
    ss = np.random.SeedSequence(seed)
    rng_cloud, rng_e1, rng_e2, rng_model = (np.random.default_rng(s)
                                            for s in ss.spawn(4))
    canon = dataset.load_canonical()
    n = canon["mu"].shape[0]
    embed = 0.01 * rng_cloud.normal(size=(n, tam_cfg.y_dim))
    cloud = GaussianCloud.create(
        canon["mu"], canon["q"], canon["s"], canon["sigma_logit"], canon["h"],
        embed_y=embed, requires_grad=True, dtype=dtype)

    aabb = dataset.aabb
    encoder1 = enc.make_encoder(encoder_cfg, aabb, rng_e1, dtype)
    encoder2 = enc.make_encoder(encoder_cfg, aabb, rng_e2, dtype)
    model = DeformationModel(
        encoder1, encoder2, tam_cfg, dsam_cfg,
        sh_bands=cloud.sh_bands, frame_interval=dataset.frame_interval,
        rng=rng_model, dtype=dtype, hidden=hidden,
        use_nss=use_nss, use_tam=use_tam, use_dsam=use_dsam,
        freeze_stage1=freeze_stage1)
    return Pipeline(cloud=cloud, model=model, dataset=dataset)


# ---------------------------------------------------------------------------
# training loop

METRICS_HEADER = ["iter", "phase", "loss", "l1", "dssim", "tv", "psnr_holdout"]


@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)
    checkpoint: str = ""
    diverged: bool = False


def _holdout_frame(dataset):
    frames = dataset.holdout_frames or dataset.frames
    return frames[0]


def holdout_psnr(pipe: Pipeline, phase: Phase, frame=None, knn_idx=None):
    dataset = pipe.dataset
    frame = frame or _holdout_frame(dataset)
    cam = dataset.cameras[frame.camera_id]
    target = dataset.load_image(frame)
    with dc.no_grad():
        out = render(pipe.model.nss_forward(pipe.cloud, frame.t, phase, knn_idx),
                     cam, dataset.background)
    return psnr(out.rgb.value, target)


def train(pipe: Pipeline, schedule: Schedule, loss_cfg: LossConfig, out_dir,
          dtype=np.float32):
    """Run the two-stage schedule; writes metrics.csv and checkpoints.

    Raises DivergedLoss on a non-finite loss (after saving a checkpoint).
    Fully deterministic given the schedule seed.
    """
    os.makedirs(out_dir, exist_ok=True)
    dataset = pipe.dataset
    model = pipe.model
    rng = np.random.default_rng(schedule.seed)
    train_frames = dataset.train_frames

    groups = _optimizer_groups(pipe, schedule)
    opt = Adam(groups)
    result = TrainResult(checkpoint=os.path.join(out_dir, "ckpt_final.dn4d"))
    knn_idx = None

    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", newline="") as fcsv:
        writer = csv.writer(fcsv)
        writer.writerow(METRICS_HEADER)

        for i in range(schedule.total_iters):
            two_stage = model.use_nss and i >= schedule.stage1_iters
            phase = Phase.TWO_STAGE if two_stage else Phase.STAGE1_ONLY
            frame = train_frames[rng.integers(len(train_frames))]
            cam = dataset.cameras[frame.camera_id]
            target = dataset.load_image(frame).astype(dtype)

            # neighbor table: rebuilt every knn_refresh iterations from the
            # positions the spatial aggregation actually runs on
            needs_knn = model.use_dsam and (two_stage or not model.use_nss)
            if needs_knn:
                since = i - schedule.stage1_iters if model.use_nss else i
                if knn_idx is None or since % model.dsam_cfg.knn_refresh == 0:
                    pos = (model.stage1_positions(pipe.cloud, frame.t)
                           if model.use_nss else pipe.cloud.mu.value)
                    knn_idx = knn(pos, model.dsam_cfg.k)

            try:
                cloud_t = model.nss_forward(pipe.cloud, frame.t, phase, knn_idx)
                image = render(cloud_t, cam, dataset.background)
                total, parts = loss(image.rgb, target,
                                    model.active_encoders(phase), loss_cfg)
                loss_val = float(total.value)
                if not np.isfinite(loss_val):
                    raise NonFiniteValue("loss")
                opt.zero_grad()
                dc.backward(total)
                opt.step(i)
            except NonFiniteValue as e:
                save_checkpoint(os.path.join(out_dir, "ckpt_diverged.dn4d"),
                                pipe.all_params())
                result.diverged = True
                raise DivergedLoss(str(e)) from e

            it = i + 1
            if it % schedule.log_every == 0 or it == schedule.total_iters:
                row = [it, phase.value, repr(loss_val), repr(parts["l1"]),
                       repr(parts["dssim"]), repr(parts["tv"]),
                       repr(holdout_psnr(pipe, phase, knn_idx=knn_idx))]
                writer.writerow(row)
                fcsv.flush()
                result.metrics.append(dict(zip(METRICS_HEADER, row)))
            if schedule.checkpoint_every and it % schedule.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{it:06d}.dn4d"),
                                pipe.all_params())

    save_checkpoint(result.checkpoint, pipe.all_params())
    return result


def _optimizer_groups(pipe: Pipeline, schedule: Schedule):
    all_params = pipe.all_params()
    grid_names = pipe.model.grid_parameter_names()
    net = {k: v for k, v in all_params.items() if k not in grid_names}
    grid = {k: v for k, v in all_params.items() if k in grid_names}
    net_lr = lambda i: decayed_lr(schedule.lr0, schedule.lr_final,
                                  schedule.total_iters, i)
    grid_lr = lambda i: decayed_lr(schedule.grid_lr0, schedule.grid_lr_final,
                                   schedule.total_iters, i)
    groups = [(net, net_lr)]
    if grid:
        groups.append((grid, grid_lr))
    return groups


# ---------------------------------------------------------------------------
# evaluation

def evaluate(pipe: Pipeline, phase: Phase, frames=None, loss_cfg=None):
    """Per-frame psnr/ssim rows: [frame, t, psnr, ssim]."""
    dataset = pipe.dataset
    frames = frames if frames is not None else dataset.holdout_frames
    rows = []
    for fr in frames:
        cam = dataset.cameras[fr.camera_id]
        target = dataset.load_image(fr)
        with dc.no_grad():
            out = render(pipe.model.nss_forward(pipe.cloud, fr.t, phase),
                         cam, dataset.background)
        rgb = out.rgb.value.astype(np.float64)
        rows.append({
            "frame": fr.frame_id,
            "t": fr.t,
            "psnr": psnr(rgb, target),
            "ssim": ssim(rgb, target),
        })
    return rows
