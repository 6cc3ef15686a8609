"""Differentiable forward rendering by depth-sorted front-to-back blending.

Gaussians are globally sorted by camera-space depth of their means (no
tiles), splatted as 2D gaussians limited to a 3-sigma box footprint, and
composited per pixel as C(u) = sum_i T_i a_i color_i + T_final * bg with
T_i = prod_{j<i} (1 - a_j). Alphas clamp at 0.99 and a pixel stops
accumulating once its transmittance falls below 1e-4.

The per-pixel arithmetic is written so that a scalar front-to-back loop
over the same projected quantities reproduces the output bit for bit:
masked-out contributions multiply by exact zeros, and the cross-gaussian
sums/products use strictly sequential accumulation (seq_sum0 /
exclusive_cumprod0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import gaussians as ga
from .diffcore import Tensor, as_tensor

FOOTPRINT_NSIGMA = 3.0
T_EARLY_STOP = 1e-4
ALPHA_MAX = 0.99

# Mahalanobis cap: alpha below exp(-60) is visually nothing, and capping
# keeps every downstream float32 product out of the (very slow) subnormal
# range. Applied identically by the compositing oracle.
QF_CLAMP = 120.0


@dataclass
class RenderedImage:
    """rgb (H,W,3) in [0,1]; alpha (H,W) = 1 - prod(1 - a_i); weight_sum
    (H,W) tracks sum_i T_i a_i for the telescoping identity."""

    rgb: Tensor
    alpha: Tensor
    weight_sum: Tensor


def _splat_alpha(x2d, y2d, ia, ib, ic, sigma, xs, ys, box, alpha_max):
    """Fused per-gaussian alpha maps over the full pixel grid.

    alpha = min(sigma * exp(-0.5 q), alpha_max) * box with
    q = ia*dx*dx - 2*ib*dx*dy + ic*dy*dy; one tape node for what would
    otherwise be ~12 (M,H,W) elementwise ops. The forward arithmetic is
    kept in exactly this order so the scalar compositing oracle matches
    bit for bit.
    """
    col = lambda t: t.value[:, None, None]
    dx = xs[None] - col(x2d)
    dy = ys[None] - col(y2d)
    qf = col(ia) * dx * dx - (2.0 * col(ib)) * dx * dy + col(ic) * dy * dy
    qc = np.minimum(qf, QF_CLAMP)
    expq = np.exp(-0.5 * qc)
    e = col(sigma) * expq
    out = np.minimum(e, alpha_max) * box

    def vjp(g):
        geff = g * box
        geff[e > alpha_max] = 0.0
        c = geff * e * -0.5
        c[qf > QF_CLAMP] = 0.0
        gdx = c * (2.0 * col(ia) * dx - 2.0 * col(ib) * dy)
        gdy = c * (2.0 * col(ic) * dy - 2.0 * col(ib) * dx)
        axes = (1, 2)
        return (
            -gdx.sum(axis=axes),
            -gdy.sum(axis=axes),
            (c * dx * dx).sum(axis=axes),
            (c * dx * dy).sum(axis=axes) * -2.0,
            (c * dy * dy).sum(axis=axes),
            (geff * expq).sum(axis=axes),
        )

    return dc.custom("splat_alpha", out, (x2d, y2d, ia, ib, ic, sigma), vjp)


def _composite(alpha_box, colors, bg, t_stop):
    """Fused front-to-back compositing over depth-ordered alpha maps.

    Forward reproduces the sequential per-pixel loop bit for bit: the
    early-out gate comes from the running transmittance, cumprod is a
    strict left-to-right scan, and per-gaussian contributions accumulate
    in depth order. Returns (H,W,5) packed as [rgb, alpha, weight_sum].

    Backward uses the standard suffix-sum form: dL/da_i = S_i T_i -
    (sum_{k>i} S_k w_k + D T_final) / (1 - a_i).
    """
    av = alpha_box.value
    cv = colors.value
    m, h, w_px = av.shape
    t_fwd = np.empty_like(av)
    t_fwd[0] = 1.0
    if m > 1:
        np.cumprod(1.0 - av[:-1], axis=0, out=t_fwd[1:])
    gate = (t_fwd >= t_stop).astype(av.dtype)
    ae = av * gate
    trans = np.empty_like(ae)
    trans[0] = 1.0
    if m > 1:
        np.cumprod(1.0 - ae[:-1], axis=0, out=trans[1:])
    w = trans * ae

    # np.add.accumulate is a strict left-to-right scan, so taking the last
    # prefix sum equals sequential front-to-back accumulation bit for bit
    contrib = w[:, :, :, None] * cv[:, None, None, :]
    rgb = np.add.accumulate(contrib, axis=0, out=contrib)[m - 1]
    wsum = np.add.accumulate(w, axis=0)[m - 1]
    t_final = trans[m - 1] * (1.0 - ae[m - 1])
    rgb = rgb + t_final[:, :, None] * bg
    packed = np.concatenate(
        [rgb, (1.0 - t_final)[:, :, None], wsum[:, :, None]], axis=2)

    def vjp(g):
        g_rgb = g[:, :, 0:3]
        g_a = g[:, :, 3]
        g_w = g[:, :, 4]
        d_tfin = (g_rgb * bg).sum(axis=-1) - g_a
        s = np.tensordot(cv, g_rgb, axes=([1], [2])) + g_w[None]
        sw = s * w
        tail = np.flip(np.cumsum(np.flip(sw, 0), axis=0), 0) - sw
        p = tail + (d_tfin * t_final)[None]
        g_alpha = (s * trans - p / (1.0 - ae)) * gate
        g_colors = np.tensordot(w, g_rgb, axes=([1, 2], [0, 1]))
        return g_alpha, g_colors

    return dc.custom("composite", packed, (alpha_box, colors), vjp)


def _background_image(cam, background, dtype):
    h, w = cam.height, cam.width
    rgb = np.broadcast_to(np.asarray(background, dtype=dtype), (h, w, 3)).copy()
    zeros = np.zeros((h, w), dtype=dtype)
    return RenderedImage(Tensor(rgb), Tensor(zeros), Tensor(zeros.copy()))


def pixel_grids(cam, dtype):
    ys, xs = np.meshgrid(
        np.arange(cam.height, dtype=dtype),
        np.arange(cam.width, dtype=dtype),
        indexing="ij",
    )
    return xs, ys


def render(cloud, cam, background=(0.0, 0.0, 0.0), z_near=ga.Z_NEAR):
    """Render a GaussianCloud through ``cam``; differentiable end to end."""
    dtype = cloud.mu.dtype
    if cloud.n == 0:
        return _background_image(cam, background, dtype)

    cov = ga.covariance_entries(cloud.q, cloud.s)
    proj = ga.project_entries(cloud.mu, cov, cam)
    depth = proj["depth"].value
    visible = np.nonzero(depth > z_near)[0]
    if visible.size == 0:
        return _background_image(cam, background, dtype)
    order = visible[np.argsort(depth[visible], kind="stable")]

    sigma = dc.sigmoid(cloud.sigma_logit)[:, 0]
    viewdir = dc.normalize_l2(cloud.mu - as_tensor(cam.position, like=cloud.mu))
    colors = ga.sh_color_batch(cloud.h, viewdir)

    g = lambda t: dc.gather_rows(t, order, unique=True)
    x2d, y2d = g(proj["x2d"]), g(proj["y2d"])
    a, b, c = g(proj["a"]), g(proj["b"]), g(proj["c"])
    sigma = g(sigma)
    colors = g(colors)

    det = a * c - b * b
    ia = c / det
    ib = b / det
    ic = a / det

    xs, ys = pixel_grids(cam, dtype)

    # 3-sigma box footprint from the larger 2D eigenvalue (forward values)
    av, bv, cv = a.value, b.value, c.value
    lam_max = 0.5 * (av + cv) + np.sqrt((0.5 * (av - cv)) ** 2 + bv * bv)
    radius = FOOTPRINT_NSIGMA * np.sqrt(lam_max)
    box = ((np.abs(xs[None] - x2d.value[:, None, None]) <= radius[:, None, None])
           & (np.abs(ys[None] - y2d.value[:, None, None]) <= radius[:, None, None]))
    alpha = _splat_alpha(x2d, y2d, ia, ib, ic, sigma, xs, ys,
                         box.astype(dtype), ALPHA_MAX)

    bg = np.asarray(background, dtype=dtype)
    packed = _composite(alpha, colors, bg, T_EARLY_STOP)
    return RenderedImage(rgb=packed[:, :, 0:3], alpha=packed[:, :, 3],
                         weight_sum=packed[:, :, 4])
