"""Two-stage denoising deformation network with decoupled aggregation.

Stage 1 deforms the canonical gaussians from temporally aggregated
features: encoder features at t - dt, t, t + dt are channel-mapped,
max-pooled across the three frames, and concatenated with the center
feature and the per-gaussian embedding before the deformation head.

Stage 2 runs on the stage-1-deformed coordinates with a separate encoder:
per-point features of the K nearest neighbors (found on the deformed
positions) are flattened, max-pooled, and concatenated with the deformed
coordinates before the second head. Stage 2 does no temporal
aggregation.

During early training only stage 1 runs and is supervised; afterwards
supervision shifts to the stage-2 output with gradients flowing through
both stages (a freeze flag exists for ablations).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeMismatch, Tensor
from .gaussians import GaussianCloud
from .nets import Mlp


class KTooLarge(Exception):
    """Requested more neighbors than exist (self excluded)."""


class StaleKnn(Exception):
    """Neighbor index table does not match the current gaussian count."""


class Phase(enum.Enum):
    STAGE1_ONLY = "stage1"
    TWO_STAGE = "two_stage"


@dataclass
class TamConfig:
    c1: int = 32       # encoder feature width
    c2: int = 32       # channel-mapped width entering the max-pool
    dt: float = 1.0    # timestep as a multiple of the dataset frame interval
    y_dim: int = 16    # per-gaussian embedding width (0 disables it)


@dataclass
class DsamConfig:
    k: int = 16
    c3: int = 32       # per-neighbor feature width
    knn_refresh: int = 10  # training iterations between neighbor rebuilds


@dataclass
class DeformationDelta:
    """Per-gaussian attribute offsets; shapes mirror the cloud."""

    d_mu: Tensor
    d_r: Tensor
    d_s: Tensor
    d_sigma: Tensor
    d_h: Tensor


def apply_delta(cloud: GaussianCloud, delta: DeformationDelta) -> GaussianCloud:
    """Additive update of every attribute; the input cloud is untouched."""
    pairs = (
        (cloud.mu, delta.d_mu), (cloud.q, delta.d_r), (cloud.s, delta.d_s),
        (cloud.sigma_logit, delta.d_sigma), (cloud.h, delta.d_h),
    )
    for field, d in pairs:
        if field.shape != d.shape:
            raise ShapeMismatch(f"delta shape {d.shape} vs attribute {field.shape}")
    return cloud.replace(
        mu=cloud.mu + delta.d_mu,
        q=cloud.q + delta.d_r,
        s=cloud.s + delta.d_s,
        sigma_logit=cloud.sigma_logit + delta.d_sigma,
        h=cloud.h + delta.d_h,
    )


def knn(positions, k):
    """Brute-force k-nearest-neighbor indices, (N,k), self excluded.

    Rows are sorted by ascending Euclidean distance; exact ties break
    toward the lower index, so results are deterministic.
    """
    pts = np.asarray(positions, dtype=np.float64)
    n = pts.shape[0]
    if k < 1 or k > n - 1:
        raise KTooLarge(f"k={k} with {n} points (self excluded)")
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


class TemporalAggregator:
    """Stack encoder features at (t-dt, t, t+dt), pool, concat embedding."""

    def __init__(self, encoder, cfg: TamConfig, frame_interval, rng, dtype=np.float32):
        self.encoder = encoder
        self.cfg = cfg
        self.frame_interval = float(frame_interval)
        self.channel = Mlp([encoder.out_dim, cfg.c2], rng, dtype)

    @property
    def out_dim(self):
        return self.cfg.c2 + self.encoder.out_dim + self.cfg.y_dim

    def times(self, t):
        dt = self.cfg.dt * self.frame_interval
        return max(0.0, t - dt), t, min(1.0, t + dt)

    def stack_features(self, positions, t):
        """Returns the (3, N, C1) frame stack and the center feature (N, C1).

        The three frames go through the encoder as one batch of 3N points
        (identical results, one third of the tape traffic).
        """
        n = positions.shape[0]
        ts = np.repeat(np.asarray(self.times(t)), n)
        tiled = dc.concat([positions, positions, positions], axis=0)
        f_all = self.encoder.encode_batch(tiled, ts)
        stack = dc.reshape(f_all, (3, n, self.encoder.out_dim))
        return stack, stack[1]

    def forward(self, positions, embed_y, t, return_parts=False):
        stack, f_mid = self.stack_features(positions, t)
        n = f_mid.shape[0]
        c1 = self.encoder.out_dim
        mapped = dc.relu(self.channel(dc.reshape(stack, (3 * n, c1))))
        pooled = dc.max_pool(dc.reshape(mapped, (3, n, self.cfg.c2)), axis=0)
        parts = [pooled, f_mid]
        if self.cfg.y_dim > 0:
            parts.append(embed_y)
        feat = dc.concat(parts, axis=1)
        if return_parts:
            return feat, {"stack": stack, "pooled": pooled, "f_center": f_mid}
        return feat

    def parameters(self, prefix):
        return self.channel.parameters(f"{prefix}.channel")


class SpatialAggregator:
    """KNN gather + max-pool of per-point features on deformed coordinates."""

    def __init__(self, encoder, cfg: DsamConfig, rng, dtype=np.float32):
        self.encoder = encoder
        self.cfg = cfg
        self.point = Mlp([encoder.out_dim, cfg.c3], rng, dtype)

    @property
    def out_dim(self):
        return self.cfg.k * self.cfg.c3 + self.cfg.c3 + 3

    def forward(self, positions, t, knn_idx, return_parts=False):
        n = positions.shape[0]
        if knn_idx is None or knn_idx.shape[0] != n:
            raise StaleKnn(f"knn index rows {None if knn_idx is None else knn_idx.shape[0]} != {n}")
        k, c3 = self.cfg.k, self.cfg.c3
        f = dc.relu(self.point(self.encoder.encode_batch(positions, t)))
        neigh = dc.reshape(dc.gather_rows(f, knn_idx.reshape(-1)), (n, k, c3))
        pooled = dc.max_pool(neigh, axis=1)
        # flatten neighbor-major then channel (checkpoint-stable order)
        feat = dc.concat([dc.reshape(neigh, (n, k * c3)), pooled, positions], axis=1)
        if return_parts:
            return feat, {"neighbors": neigh, "pooled": pooled}
        return feat

    def parameters(self, prefix):
        return self.point.parameters(f"{prefix}.point")


class DeformationHead:
    """Shared trunk with one zero-initialized linear head per attribute."""

    def __init__(self, in_dim, sh_bands, hidden, rng, dtype=np.float32):
        self.sh_bands = sh_bands
        self.trunk = Mlp([in_dim, hidden, hidden], rng, dtype)
        self.heads = {
            name: Mlp([hidden, dim], rng, dtype, zero_last=True)
            for name, dim in (
                ("mu", 3), ("rot", 4), ("scale", 3), ("opacity", 1),
                ("sh", sh_bands * 3),
            )
        }

    def forward(self, feat):
        n = feat.shape[0]
        h = dc.relu(self.trunk(feat))
        return DeformationDelta(
            d_mu=self.heads["mu"](h),
            d_r=self.heads["rot"](h),
            d_s=self.heads["scale"](h),
            d_sigma=self.heads["opacity"](h),
            d_h=dc.reshape(self.heads["sh"](h), (n, self.sh_bands, 3)),
        )

    def parameters(self, prefix):
        out = self.trunk.parameters(f"{prefix}.trunk")
        for name, mlp in self.heads.items():
            out.update(mlp.parameters(f"{prefix}.{name}"))
        return out


class DeformationModel:
    """Full deformation pipeline with component toggles for ablations.

    use_nss: two sequential deformations (stage 2 exists).
    use_tam: stage-1 features are temporally aggregated (otherwise the
        plain center-frame encoder feature).
    use_dsam: spatial aggregation; attached to stage 2 when use_nss,
        otherwise bolted onto the single stage using canonical
        coordinates (the degraded variant).
    """

    def __init__(self, encoder1, encoder2, tam_cfg: TamConfig, dsam_cfg: DsamConfig,
                 sh_bands, frame_interval, rng, dtype=np.float32, hidden=64,
                 use_nss=True, use_tam=True, use_dsam=True, freeze_stage1=False):
        self.encoder1 = encoder1
        self.encoder2 = encoder2
        self.tam_cfg = tam_cfg
        self.dsam_cfg = dsam_cfg
        self.use_nss = use_nss
        self.use_tam = use_tam
        self.use_dsam = use_dsam
        self.freeze_stage1 = freeze_stage1
        self.dtype = dtype

        self.tam = (TemporalAggregator(encoder1, tam_cfg, frame_interval, rng, dtype)
                    if use_tam else None)
        self.dsam = (SpatialAggregator(encoder2, dsam_cfg, rng, dtype)
                     if use_dsam else None)

        width1 = self.tam.out_dim if use_tam else encoder1.out_dim
        if use_dsam and not use_nss:
            width1 += self.dsam.out_dim
        self.head1 = DeformationHead(width1, sh_bands, hidden, rng, dtype)

        self.head2 = None
        if use_nss:
            width2 = self.dsam.out_dim if use_dsam else encoder2.out_dim
            self.head2 = DeformationHead(width2, sh_bands, hidden, rng, dtype)

    # -- stage features ----------------------------------------------------

    def stage1_features(self, cloud, t, knn_idx=None):
        if self.use_tam:
            feat = self.tam.forward(cloud.mu, cloud.embed_y, t)
        else:
            feat = self.encoder1.encode_batch(cloud.mu, t)
        if self.use_dsam and not self.use_nss:
            idx = knn_idx if knn_idx is not None else knn(cloud.mu.value, self.dsam_cfg.k)
            feat = dc.concat([feat, self.dsam.forward(cloud.mu, t, idx)], axis=1)
        return feat

    def stage2_features(self, cloud1, t, knn_idx=None):
        if self.use_dsam:
            idx = knn_idx if knn_idx is not None else knn(cloud1.mu.value, self.dsam_cfg.k)
            return self.dsam.forward(cloud1.mu, t, idx)
        return self.encoder2.encode_batch(cloud1.mu, t)

    # -- deformations --------------------------------------------------------

    def stage1_deform(self, cloud, t, knn_idx=None) -> DeformationDelta:
        return self.head1.forward(self.stage1_features(cloud, t, knn_idx))

    def stage2_deform(self, cloud1, t, knn_idx=None) -> DeformationDelta:
        if self.head2 is None:
            raise ValueError("stage 2 is disabled (use_nss=False)")
        return self.head2.forward(self.stage2_features(cloud1, t, knn_idx))

    def nss_forward(self, cloud, t, phase: Phase, knn_idx=None) -> GaussianCloud:
        """Render-ready cloud for time t under the given training phase."""
        cloud1 = apply_delta(cloud, self.stage1_deform(cloud, t, knn_idx))
        if not (self.use_nss and phase is Phase.TWO_STAGE):
            return cloud1
        if self.freeze_stage1:
            cloud1 = cloud1.detached()
        return apply_delta(cloud1, self.stage2_deform(cloud1, t, knn_idx))

    def stage1_positions(self, cloud, t):
        """Forward-only stage-1 deformed positions (numpy), for KNN rebuilds."""
        with dc.no_grad():
            delta = self.stage1_deform(cloud, t)
            return cloud.mu.value + delta.d_mu.value

    # -- parameters ----------------------------------------------------------

    def parameters(self):
        out = {}
        out.update(self.encoder1.parameters("stage1.enc"))
        if self.tam is not None:
            out.update(self.tam.parameters("stage1.tam"))
        out.update(self.head1.parameters("stage1.head"))
        if self.use_nss or self.use_dsam:
            out.update(self.encoder2.parameters("stage2.enc"))
        if self.dsam is not None:
            out.update(self.dsam.parameters("stage2.dsam"))
        if self.head2 is not None:
            out.update(self.head2.parameters("stage2.head"))
        return out

    def grid_parameter_names(self):
        names = set(self.encoder1.grid_parameters("stage1.enc"))
        if self.use_nss or self.use_dsam:
            names |= set(self.encoder2.grid_parameters("stage2.enc"))
        return names

    def stage2_parameters(self):
        out = {}
        if self.use_nss or self.use_dsam:
            out.update(self.encoder2.parameters("stage2.enc"))
        if self.dsam is not None:
            out.update(self.dsam.parameters("stage2.dsam"))
        if self.head2 is not None:
            out.update(self.head2.parameters("stage2.head"))
        return out

    def active_encoders(self, phase: Phase):
        """Encoders contributing to the graph in this phase (for TV loss)."""
        encs = [self.encoder1]
        if self.use_dsam and not self.use_nss:
            encs.append(self.encoder2)
        elif self.use_nss and phase is Phase.TWO_STAGE:
            encs.append(self.encoder2)
        return encs
