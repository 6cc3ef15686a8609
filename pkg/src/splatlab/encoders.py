"""Feature encodings: (x, y, z, t) -> latent feature.

Two interchangeable backends produce the same interface:

* ``FreqMlpEncoder`` — sinusoidal frequency features through a small MLP.
* ``HexPlaneEncoder`` — six single-resolution learnable 2D grids
  (xy, xz, yz, xt, yt, zt), bilinearly sampled; the three spatial and the
  three spatio-temporal plane features are multiplied elementwise within
  their group, concatenated, and fused by an MLP.

The grid backend also carries the total-variation regularizer used by
the training loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, as_tensor
from .nets import Mlp

PLANE_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")


def _bilinear2d(grid, sa, sb):
    """Fused bilinear lookup of ``grid`` (R,R,C) at grid-scaled coords.

    ``sa``/``sb`` are (N,) tensors already scaled by R-1. Differentiable
    in the grid values and in both coordinates (piecewise-bilinear).
    Fused into one tape node: the unfused form is ~20 ops per plane.
    """
    gv, sav, sbv = grid.value, sa.value, sb.value
    r, _, c = gv.shape
    i0 = np.clip(np.floor(sav).astype(np.intp), 0, r - 2)
    j0 = np.clip(np.floor(sbv).astype(np.intp), 0, r - 2)
    fa = (sav - i0)[:, None]
    fb = (sbv - j0)[:, None]
    flat = gv.reshape(r * r, c)
    idx00 = i0 * r + j0
    g00 = flat[idx00]
    g10 = flat[idx00 + r]
    g01 = flat[idx00 + 1]
    g11 = flat[idx00 + r + 1]
    out = ((1.0 - fa) * (1.0 - fb) * g00 + fa * (1.0 - fb) * g10
           + (1.0 - fa) * fb * g01 + fa * fb * g11)

    def vjp(g):
        w = np.concatenate([(1.0 - fa) * (1.0 - fb) * g, fa * (1.0 - fb) * g,
                            (1.0 - fa) * fb * g, fa * fb * g])
        all_idx = np.concatenate([idx00, idx00 + r, idx00 + 1, idx00 + r + 1])
        gflat = dc.scatter_add_rows(flat.shape, gv.dtype, all_idx, w)
        da = (1.0 - fb) * (g10 - g00) + fb * (g11 - g01)
        db = (1.0 - fa) * (g01 - g00) + fa * (g11 - g10)
        return (gflat.reshape(gv.shape),
                (g * da).sum(axis=1),
                (g * db).sum(axis=1))

    return dc.custom("bilinear2d", out, (grid, sa, sb), vjp)


@dataclass
class EncoderConfig:
    kind: str = "hexplane"  # "hexplane" | "freqmlp"
    c1: int = 32            # output feature width
    hidden: int = 64
    depth: int = 2
    l_xyz: int = 6          # frequency counts (freqmlp)
    l_t: int = 4
    resolution: int = 32    # grid side (hexplane, single resolution)
    channels: int = 16      # per-plane channels (hexplane)


def _time_column(t, n, dtype):
    if isinstance(t, Tensor):
        return dc.reshape(t, (n, 1))
    tv = np.asarray(t, dtype=dtype)
    if tv.ndim == 0:
        tv = np.full((n, 1), float(tv), dtype=dtype)
    else:
        tv = tv.reshape(n, 1)
    return Tensor(tv)


class FreqMlpEncoder:
    """Sinusoidal features [sin/cos(2^k pi x)] over coords and t, then an MLP."""

    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.out_dim = cfg.c1
        in_dim = 6 * cfg.l_xyz + 2 * cfg.l_t
        sizes = [in_dim] + [cfg.hidden] * cfg.depth + [cfg.c1]
        self.mlp = Mlp(sizes, rng, dtype)
        self.oob_count = 0  # interface parity with the grid backend

    def encode_batch(self, xyz, t):
        xyz = as_tensor(xyz, dtype=self.dtype)
        n = xyz.shape[0]
        tcol = _time_column(t, n, self.dtype)
        parts = []
        for k in range(self.cfg.l_xyz):
            f = (2.0 ** k) * np.pi
            parts.append(dc.sin(f * xyz))
            parts.append(dc.cos(f * xyz))
        for k in range(self.cfg.l_t):
            f = (2.0 ** k) * np.pi
            parts.append(dc.sin(f * tcol))
            parts.append(dc.cos(f * tcol))
        return self.mlp(dc.concat(parts, axis=1))

    def encode(self, pos, t):
        pos = as_tensor(pos, dtype=self.dtype)
        out = self.encode_batch(dc.reshape(pos, (1, 3)), float(t))
        return dc.reshape(out, (self.out_dim,))

    def tv_loss(self):
        return Tensor(np.zeros((), dtype=self.dtype))

    def parameters(self, prefix):
        return self.mlp.parameters(f"{prefix}.mlp")

    def grid_parameters(self, prefix):
        return {}


class HexPlaneEncoder:
    """Six R x R x C learnable planes over AABB-normalized (x,y,z) and t."""

    def __init__(self, cfg: EncoderConfig, aabb, rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.out_dim = cfg.c1
        self.aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        r, c = cfg.resolution, cfg.channels
        self.planes = {
            name: Tensor(rng.normal(0.0, 0.1, size=(r, r, c)).astype(dtype),
                         requires_grad=True)
            for name in PLANE_NAMES
        }
        self.fuse = Mlp([2 * c, cfg.hidden, cfg.c1], rng, dtype)
        self.oob_count = 0  # queries clamped to the AABB (not fatal)

    def _normalized(self, xyz, t):
        xyz = as_tensor(xyz, dtype=self.dtype)
        n = xyz.shape[0]
        lo = self.aabb[0].astype(self.dtype)
        span = (self.aabb[1] - self.aabb[0]).astype(self.dtype)
        u = (xyz - Tensor(lo)) / Tensor(span)
        tcol = _time_column(t, n, self.dtype)
        oob = ((u.value < 0.0) | (u.value > 1.0)).any(axis=1)
        oob |= ((tcol.value < 0.0) | (tcol.value > 1.0))[:, 0]
        self.oob_count += int(oob.sum())
        return dc.clip(u, 0.0, 1.0), dc.clip(tcol, 0.0, 1.0)

    def sample_plane(self, name, ua, ub):
        """Bilinear sample of one plane at normalized coords (tensors, (N,))."""
        grid = self.planes[name]
        r = grid.shape[0]
        return _bilinear2d(grid, (r - 1.0) * ua, (r - 1.0) * ub)

    def encode_batch(self, xyz, t):
        u, tcol = self._normalized(xyz, t)
        tq = tcol[:, 0]
        coords = {"x": u[:, 0], "y": u[:, 1], "z": u[:, 2], "t": tq}
        feats = {name: self.sample_plane(name, coords[name[0]], coords[name[1]])
                 for name in PLANE_NAMES}
        spatial = feats["xy"] * feats["xz"] * feats["yz"]
        temporal = feats["xt"] * feats["yt"] * feats["zt"]
        return self.fuse(dc.concat([spatial, temporal], axis=1))

    def encode(self, pos, t):
        pos = as_tensor(pos, dtype=self.dtype)
        out = self.encode_batch(dc.reshape(pos, (1, 3)), float(t))
        return dc.reshape(out, (self.out_dim,))

    def tv_loss(self):
        """Mean over planes of the mean squared axis-adjacent difference."""
        total = None
        for name in PLANE_NAMES:
            g = self.planes[name]
            di = g[1:, :, :] - g[:-1, :, :]
            dj = g[:, 1:, :] - g[:, :-1, :]
            ssq = dc.tsum(di * di) + dc.tsum(dj * dj)
            plane_tv = ssq * (1.0 / (di.size + dj.size))
            total = plane_tv if total is None else total + plane_tv
        return total * (1.0 / len(PLANE_NAMES))

    def parameters(self, prefix):
        out = {f"{prefix}.plane_{name}": p for name, p in self.planes.items()}
        out.update(self.fuse.parameters(f"{prefix}.fuse"))
        return out

    def grid_parameters(self, prefix):
        return {f"{prefix}.plane_{name}": p for name, p in self.planes.items()}


def make_encoder(cfg: EncoderConfig, aabb, rng, dtype=np.float32):
    if cfg.kind == "hexplane":
        return HexPlaneEncoder(cfg, aabb, rng, dtype)
    if cfg.kind == "freqmlp":
        return FreqMlpEncoder(cfg, rng, dtype)
    raise ValueError(f"unknown encoder kind {cfg.kind!r}")


def tv_loss(encoder):
    """Grid TV regularizer; exactly zero for non-grid backends."""
    return encoder.tv_loss()
