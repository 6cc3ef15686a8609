"""Finite-difference verification of every differentiable subsystem.

Each scope builds a small fixed-seed float64 scene, defines a scalar
loss, and compares analytic gradients against central differences for
every parameter group (coordinates subsampled on large groups to bound
runtime). Scenes use moderate opacities and interior query points so no
clamp/footprint boundary sits within the probe epsilon.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .deformnet import (DeformationModel, DsamConfig, TamConfig, Phase, knn)
from .diffcore import Tensor, finite_difference_check
from .encoders import EncoderConfig, FreqMlpEncoder, HexPlaneEncoder
from .gaussians import Camera, GaussianCloud
from .rasterizer import render
from .training import LossConfig, loss

REL_ERR_LIMIT = 1e-3

_SMALL_ENC = EncoderConfig(kind="hexplane", c1=8, hidden=16, depth=2,
                           l_xyz=3, l_t=2, resolution=8, channels=4)


def _camera(px=8):
    return Camera.look_at((2.1, 0.4, 0.8), (0.0, 0.0, 0.0), fx=1.1 * px,
                          width=px, height=px)


def _random_cloud(rng, n, bands=4, dtype=np.float64, y_dim=4):
    mu = rng.uniform(-0.45, 0.45, size=(n, 3))
    q = rng.normal(size=(n, 4))
    s = np.log(rng.uniform(0.12, 0.3, size=(n, 3)))
    opacity = rng.uniform(0.45, 0.8, size=(n, 1))
    logit = np.log(opacity / (1.0 - opacity))
    h = rng.normal(0.0, 0.3, size=(n, bands, 3))
    embed = 0.1 * rng.normal(size=(n, y_dim))
    return GaussianCloud.create(mu, q, s, logit, h, embed_y=embed,
                                requires_grad=True, dtype=dtype)


def _fd_per_group(make_loss, params, eps, max_coords, seed):
    out = {}
    for name, p in params.items():
        rng = np.random.default_rng(seed)
        out[name] = finite_difference_check(make_loss, [p], eps=eps,
                                            max_coords=max_coords, rng=rng)
    return out


def check_rasterizer(eps=1e-5, max_coords=None, seed=3):
    rng = np.random.default_rng(seed)
    cloud = _random_cloud(rng, n=5)
    cam = _camera(8)
    w_rgb = Tensor(rng.uniform(0.2, 1.0, size=(8, 8, 3)))
    w_a = Tensor(rng.uniform(0.2, 1.0, size=(8, 8)))

    def make_loss():
        img = render(cloud, cam, background=(0.1, 0.2, 0.3))
        return dc.tsum(img.rgb * w_rgb) + dc.tsum(img.alpha * w_a)

    return _fd_per_group(make_loss, cloud.params(), eps, max_coords, seed)


def _encoder_loss(encoder, queries, tvec, weights, tv_weight=0.5):
    def make_loss():
        feat = encoder.encode_batch(queries, tvec)
        return dc.tsum(feat * weights) + tv_weight * encoder.tv_loss()

    return make_loss


def check_encoders(eps=1e-5, max_coords=24, seed=5):
    out = {}
    for kind in ("hexplane", "freqmlp"):
        rng = np.random.default_rng(seed)
        cfg = EncoderConfig(**{**_SMALL_ENC.__dict__, "kind": kind})
        aabb = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
        encoder = (HexPlaneEncoder(cfg, aabb, rng, np.float64) if kind == "hexplane"
                   else FreqMlpEncoder(cfg, rng, np.float64))
        queries = Tensor(rng.uniform(-0.7, 0.7, size=(6, 3)), requires_grad=True)
        tvec = rng.uniform(0.15, 0.85, size=6)
        weights = Tensor(rng.normal(size=(6, cfg.c1)))
        params = dict(encoder.parameters(kind))
        params[f"{kind}.query_xyz"] = queries
        errs = _fd_per_group(_encoder_loss(encoder, queries, tvec, weights),
                             params, eps, max_coords, seed)
        out.update(errs)
    return out


def _small_model(rng, cloud, use_dsam=True, frame_interval=0.1):
    aabb = np.array([[-1.2, -1.2, -1.2], [1.2, 1.2, 1.2]])
    e1 = HexPlaneEncoder(_SMALL_ENC, aabb, rng, np.float64)
    e2 = HexPlaneEncoder(_SMALL_ENC, aabb, rng, np.float64)
    return DeformationModel(
        e1, e2, TamConfig(c1=_SMALL_ENC.c1, c2=8, dt=1.0, y_dim=cloud.y_dim),
        DsamConfig(k=3, c3=6), sh_bands=cloud.sh_bands,
        frame_interval=frame_interval, rng=rng, dtype=np.float64, hidden=16,
        use_dsam=use_dsam)


def check_tam(eps=1e-5, max_coords=24, seed=7):
    rng = np.random.default_rng(seed)
    cloud = _random_cloud(rng, n=6)
    model = _small_model(rng, cloud)
    w = {k: Tensor(rng.normal(size=shape)) for k, shape in
         (("mu", (6, 3)), ("rot", (6, 4)), ("s", (6, 3)), ("o", (6, 1)),
          ("h", (6, 4, 3)))}

    def make_loss():
        d = model.stage1_deform(cloud, 0.5)
        return (dc.tsum(d.d_mu * w["mu"]) + dc.tsum(d.d_r * w["rot"])
                + dc.tsum(d.d_s * w["s"]) + dc.tsum(d.d_sigma * w["o"])
                + dc.tsum(d.d_h * w["h"]))

    params = dict(model.encoder1.parameters("stage1.enc"))
    params.update(model.tam.parameters("stage1.tam"))
    params.update(model.head1.parameters("stage1.head"))
    params["cloud.mu"] = cloud.mu
    params["cloud.embed_y"] = cloud.embed_y
    # the head's final layers are zero-initialized; give them signal
    _kick_heads(model.head1, rng)
    return _fd_per_group(make_loss, params, eps, max_coords, seed)


def check_dsam(eps=1e-5, max_coords=24, seed=9):
    rng = np.random.default_rng(seed)
    cloud = _random_cloud(rng, n=7)
    model = _small_model(rng, cloud)
    _kick_heads(model.head2, rng)
    idx = knn(cloud.mu.value, model.dsam_cfg.k)
    w = Tensor(rng.normal(size=(7, 3)))

    def make_loss():
        d = model.stage2_deform(cloud, 0.5, knn_idx=idx)
        return dc.tsum(d.d_mu * w)

    params = dict(model.encoder2.parameters("stage2.enc"))
    params.update(model.dsam.parameters("stage2.dsam"))
    params.update(model.head2.parameters("stage2.head"))
    params["positions"] = cloud.mu
    return _fd_per_group(make_loss, params, eps, max_coords, seed)


def check_end2end(eps=1e-5, max_coords=6, seed=11):
    rng = np.random.default_rng(seed)
    cloud = _random_cloud(rng, n=6)
    model = _small_model(rng, cloud)
    _kick_heads(model.head1, rng, scale=0.02)
    _kick_heads(model.head2, rng, scale=0.02)
    cam = _camera(8)
    target = rng.uniform(0.0, 1.0, size=(8, 8, 3))
    idx = knn(cloud.mu.value, model.dsam_cfg.k)
    cfg = LossConfig(tv_weight=0.3)

    def make_loss():
        cloud_t = model.nss_forward(cloud, 0.5, Phase.TWO_STAGE, knn_idx=idx)
        img = render(cloud_t, cam, background=(0.05, 0.05, 0.05))
        total, _ = loss(img.rgb, target, [model.encoder1, model.encoder2], cfg)
        return total

    params = dict(cloud.params())
    params.update(model.parameters())
    return _fd_per_group(make_loss, params, eps, max_coords, seed)


def _kick_heads(head, rng, scale=0.05):
    """Replace zero-initialized head outputs with small random weights so
    finite differences see nonzero gradients through them."""
    for mlp in head.heads.values():
        w = mlp.weights[-1]
        w.value = (scale * rng.normal(size=w.value.shape)).astype(w.value.dtype)


SCOPES = {
    "rasterizer": check_rasterizer,
    "encoders": check_encoders,
    "tam": check_tam,
    "dsam": check_dsam,
    "end2end": check_end2end,
}


def run_scope(scope, **kw):
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; choose from {sorted(SCOPES)}")
    return SCOPES[scope](**kw)
