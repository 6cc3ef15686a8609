"""Canonical 3D Gaussian primitives and their geometric math.

Covers covariance composition from quaternion + log-scale, pinhole
projection of means and covariances to image space, point-wise opacity,
and view-dependent color from real spherical harmonics.

Conventions: opacity is stored as a logit, scale as a log, quaternions
unnormalized (normalized at use) so all attributes optimize
unconstrained. Cameras look along +z with y pointing down in image
space; pixel (row r, col c) has center (x=c, y=r).
"""

from __future__ import annotations

from dataclasses import dataclass, replace as _dc_replace

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, as_tensor


class BehindCamera(Exception):
    """A point required in front of the camera has z <= z_near."""


Z_NEAR = 0.01

# diagonal dilation added to 2D covariances (px^2); keeps sub-pixel
# splats rasterizable
COV2D_FLOOR = 0.3

# real SH basis constants (3DGS storage order: l ascending, m ascending)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)

_BANDS_TO_DEGREE = {1: 0, 4: 1, 9: 2}


@dataclass
class Camera:
    """Pinhole camera: 4x4 world-to-camera transform plus intrinsics."""

    w2c: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.w2c = np.asarray(self.w2c, dtype=np.float64)
        if self.w2c.shape != (4, 4):
            raise ValueError("w2c must be 4x4")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation block of w2c is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def rotation(self):
        return self.w2c[:3, :3]

    @property
    def translation(self):
        return self.w2c[:3, 3]

    @property
    def position(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, fx, width, height, fy=None, cx=None, cy=None,
                up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        w2c = np.eye(4)
        w2c[:3, :3] = r
        w2c[:3, 3] = -r @ eye
        return cls(
            w2c=w2c,
            fx=fx,
            fy=fx if fy is None else fy,
            cx=(width - 1) / 2.0 if cx is None else cx,
            cy=(height - 1) / 2.0 if cy is None else cy,
            width=width,
            height=height,
        )


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussian set; every field is a Tensor.

    mu (N,3) positions, q (N,4) quaternions (unnormalized storage),
    s (N,3) log-scales, sigma_logit (N,1) opacity logits, h (N,B,3) SH
    coefficients, embed_y (N,D) learnable per-gaussian embeddings
    (D may be 0).
    """

    mu: Tensor
    q: Tensor
    s: Tensor
    sigma_logit: Tensor
    h: Tensor
    embed_y: Tensor

    @classmethod
    def create(cls, mu, q, s, sigma_logit, h, embed_y=None,
               requires_grad=False, dtype=np.float32):
        def t(x):
            return Tensor(np.asarray(x, dtype=dtype), requires_grad=requires_grad)

        n = np.asarray(mu).shape[0]
        logit = np.asarray(sigma_logit).reshape(n, 1)
        if embed_y is None:
            embed_y = np.zeros((n, 0))
        return cls(t(mu), t(q), t(s), t(logit), t(h), t(embed_y))

    @property
    def n(self):
        return self.mu.shape[0]

    @property
    def sh_bands(self):
        return self.h.shape[1]

    @property
    def y_dim(self):
        return self.embed_y.shape[1]

    def params(self):
        out = {
            "cloud.mu": self.mu,
            "cloud.q": self.q,
            "cloud.s": self.s,
            "cloud.sigma_logit": self.sigma_logit,
            "cloud.h": self.h,
        }
        if self.y_dim > 0:
            out["cloud.embed_y"] = self.embed_y
        return out

    def replace(self, **kw):
        return _dc_replace(self, **kw)

    def detached(self):
        return GaussianCloud(*(f.detach() for f in
                               (self.mu, self.q, self.s, self.sigma_logit,
                                self.h, self.embed_y)))


# ---------------------------------------------------------------------------
# covariance

def _rotation_entries(q):
    """Nine (N,) tensors of the rotation matrix for (w,x,y,z) quaternions."""
    qn = dc.normalize_l2(q)
    w, x, y, z = (qn[:, i] for i in range(4))
    return [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]


def covariance_entries(q, s):
    """Unique entries of Sigma = R S S^T R^T for a batch.

    Returns a dict keyed by (i, j) with i <= j, each an (N,) tensor.
    """
    q = as_tensor(q)
    s = as_tensor(s)
    r = _rotation_entries(q)
    e = dc.exp(s)
    e2 = [e[:, j] * e[:, j] for j in range(3)]
    out = {}
    for a in range(3):
        for b in range(a, 3):
            acc = r[a][0] * r[b][0] * e2[0]
            acc = acc + r[a][1] * r[b][1] * e2[1]
            acc = acc + r[a][2] * r[b][2] * e2[2]
            out[(a, b)] = acc
    return out


def _entries_to_matrix(ent, n_index=0):
    rows = []
    for a in range(3):
        cells = []
        for b in range(3):
            key = (a, b) if a <= b else (b, a)
            cells.append(dc.reshape(ent[key][n_index], (1, 1)))
        rows.append(dc.concat(cells, axis=1))
    return dc.concat(rows, axis=0)


def build_covariance(q, s):
    """3x3 world covariance for one gaussian (q normalized internally)."""
    q = as_tensor(q)
    s = as_tensor(s)
    ent = covariance_entries(dc.reshape(q, (1, 4)), dc.reshape(s, (1, 3)))
    return _entries_to_matrix(ent)


# ---------------------------------------------------------------------------
# projection

def project_entries(mu, cov_ent, cam):
    """Batched projection to image space.

    Returns (N,) tensors: pixel-space center (x2d, y2d), the unique 2D
    covariance entries (a, b, c) with the diagonal floor applied, and the
    camera-space depth. Callers must cull points behind the near plane
    themselves (the renderer does); ``project`` raises for single points.
    """
    mu = as_tensor(mu)
    r = cam.rotation
    t = cam.translation
    pc = dc.matmul(mu, as_tensor(r.T, like=mu)) + as_tensor(t, like=mu)
    x, y, z = (pc[:, i] for i in range(3))

    # rotate the covariance into camera space; coefficients are constants
    cc = {}
    for a in range(3):
        for b in range(a, 3):
            coefs = {}
            for i in range(3):
                for j in range(3):
                    key = (min(i, j), max(i, j))
                    coefs[key] = coefs.get(key, 0.0) + r[a, i] * r[b, j]
            acc = None
            for key, cf in coefs.items():
                if cf == 0.0:
                    continue
                term = cf * cov_ent[key]
                acc = term if acc is None else acc + term
            cc[(a, b)] = acc

    # perspective Jacobian rows: (u, 0, p) and (0, v, w)
    u = cam.fx / z
    v = cam.fy / z
    p = -(u * x) / z
    w = -(v * y) / z

    a2 = u * u * cc[(0, 0)] + 2.0 * (u * p) * cc[(0, 2)] + p * p * cc[(2, 2)] + COV2D_FLOOR
    b2 = (u * v) * cc[(0, 1)] + (u * w) * cc[(0, 2)] + (v * p) * cc[(1, 2)] + (p * w) * cc[(2, 2)]
    c2 = v * v * cc[(1, 1)] + 2.0 * (v * w) * cc[(1, 2)] + w * w * cc[(2, 2)] + COV2D_FLOOR

    x2d = cam.fx * x / z + cam.cx
    y2d = cam.fy * y / z + cam.cy
    return {"x2d": x2d, "y2d": y2d, "a": a2, "b": b2, "c": c2, "depth": z}


def project(mu, cov, cam, z_near=Z_NEAR):
    """Project one gaussian: (mu2d, cov2d 2x2, depth). Raises BehindCamera."""
    mu = as_tensor(mu)
    cov = as_tensor(cov)
    ent = {
        (a, b): dc.reshape(cov[a, b], (1,))
        for a in range(3)
        for b in range(a, 3)
    }
    out = project_entries(dc.reshape(mu, (1, 3)), ent, cam)
    if float(out["depth"].value[0]) <= z_near:
        raise BehindCamera(f"camera-space z={float(out['depth'].value[0]):.4g} <= {z_near}")
    mu2d = dc.concat([out["x2d"], out["y2d"]], axis=0)
    row0 = dc.concat([dc.reshape(out["a"], (1, 1)), dc.reshape(out["b"], (1, 1))], axis=1)
    row1 = dc.concat([dc.reshape(out["b"], (1, 1)), dc.reshape(out["c"], (1, 1))], axis=1)
    cov2d = dc.concat([row0, row1], axis=0)
    return mu2d, cov2d, out["depth"][0]


# ---------------------------------------------------------------------------
# opacity

def opacity_at(x, mu, cov, sigma):
    """Point opacity: sigma * exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)).

    A near-singular covariance (|det| < 1e-12) is regularized by
    +1e-8 * I before inversion.
    """
    x = as_tensor(x)
    mu = as_tensor(mu, like=x)
    cov = as_tensor(cov, like=x)
    sigma = as_tensor(sigma, like=x)

    if abs(float(np.linalg.det(cov.value))) < 1e-12:
        cov = cov + as_tensor(1e-8 * np.eye(3), like=cov)

    m = [[cov[i, j] for j in range(3)] for i in range(3)]
    cof = [[None] * 3 for _ in range(3)]
    for i in range(3):
        for j in range(3):
            r = [k for k in range(3) if k != i]
            c = [k for k in range(3) if k != j]
            minor = m[r[0]][c[0]] * m[r[1]][c[1]] - m[r[0]][c[1]] * m[r[1]][c[0]]
            cof[i][j] = minor if (i + j) % 2 == 0 else -minor
    det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2]

    rows = []
    for i in range(3):
        cells = [dc.reshape(cof[j][i] / det, (1, 1)) for j in range(3)]  # adjugate transpose
        rows.append(dc.concat(cells, axis=1))
    inv = dc.concat(rows, axis=0)

    d = dc.reshape(x - mu, (1, 3))
    quad = dc.matmul(dc.matmul(d, inv), dc.transpose(d, (1, 0)))
    return dc.reshape(sigma * dc.exp(-0.5 * quad), ())


# ---------------------------------------------------------------------------
# spherical harmonics color

def sh_color_batch(h, v):
    """View-dependent RGB for a batch: (N,B,3) coeffs, (N,3) unit dirs.

    Contracts the real SH basis (degree inferred from B) with the
    coefficients, then shifts by +0.5 and clamps to [0,1] per the 3DGS
    convention.
    """
    h = as_tensor(h)
    v = as_tensor(v, like=h)
    bands = h.shape[1]
    if bands not in _BANDS_TO_DEGREE:
        raise ValueError(f"unsupported SH band count {bands}")
    deg = _BANDS_TO_DEGREE[bands]

    col = SH_C0 * h[:, 0, :]
    if deg >= 1:
        x = v[:, 0:1]
        y = v[:, 1:2]
        z = v[:, 2:3]
        col = col - SH_C1 * (y * h[:, 1, :]) + SH_C1 * (z * h[:, 2, :]) - SH_C1 * (x * h[:, 3, :])
    if deg >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        col = (col
               + SH_C2[0] * (xy * h[:, 4, :])
               + SH_C2[1] * (yz * h[:, 5, :])
               + SH_C2[2] * ((2.0 * zz - xx - yy) * h[:, 6, :])
               + SH_C2[3] * (xz * h[:, 7, :])
               + SH_C2[4] * ((xx - yy) * h[:, 8, :]))
    return dc.clip(col + 0.5, 0.0, 1.0)


def sh_color(h, v):
    """Single-gaussian convenience wrapper around sh_color_batch."""
    h = as_tensor(h)
    v = as_tensor(v, like=h)
    out = sh_color_batch(dc.reshape(h, (1,) + h.shape), dc.reshape(v, (1, 3)))
    return dc.reshape(out, (3,))
