"""Feature Gaussians: storage, covariance assembly, opacity and SH colour.

A scene is held as a :class:`GaussianSet`, a struct of arrays with one row
per primitive. Scales live in the log domain and opacity in the logit
domain so every stored value can be optimized without constraints.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

DEFAULT_FEATURE_DIM = 32
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

GEOMETRY_FIELDS = ("means", "quats", "log_scales", "opacity_logits", "sh")


def sh_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_of(count: int) -> int:
    d = int(round(np.sqrt(count))) - 1
    if sh_count(d) != count or not 0 <= d <= 3:
        raise ValueError(f"{count} SH coefficients per channel is not (degree+1)^2 for degree <= 3")
    return d


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * np.asarray(x)) + 1.0)


def inverse_sigmoid(p):
    p = np.asarray(p)
    return np.log(p / (1.0 - p))


@dataclass
class GaussianSet:
    """N feature Gaussians.

    means (N,3), quats (N,4) as (w,x,y,z), log_scales (N,3), opacity_logits (N,),
    sh (N,K,3) with K=(degree+1)^2, features (N,D).
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    features: np.ndarray
    features_present: bool = True

    def __post_init__(self):
        n = self.means.shape[0]
        expect = {"means": (n, 3), "quats": (n, 4), "log_scales": (n, 3), "opacity_logits": (n,)}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"GaussianSet.{name}: shape {getattr(self, name).shape} != {shape}")
        if self.sh.ndim != 3 or self.sh.shape[0] != n or self.sh.shape[2] != 3:
            raise ValueError(f"GaussianSet.sh: shape {self.sh.shape} is not (N, K, 3)")
        sh_degree_of(self.sh.shape[1])
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(f"GaussianSet.features: shape {self.features.shape} is not (N, D)")

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_of(self.sh.shape[1])

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def dtype(self):
        return self.means.dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "features_present"}

    def copy(self) -> "GaussianSet":
        return replace(self, **{k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype) -> "GaussianSet":
        return replace(self, **{k: v.astype(dtype) for k, v in self.arrays().items()})

    def with_features(self, features: np.ndarray) -> "GaussianSet":
        return replace(self, features=np.asarray(features, dtype=self.dtype), features_present=True)

    @classmethod
    def empty(cls, feature_dim: int = DEFAULT_FEATURE_DIM, sh_degree: int = 3,
              dtype=np.float32) -> "GaussianSet":
        return cls.create(np.zeros((0, 3), dtype), feature_dim=feature_dim, sh_degree=sh_degree, dtype=dtype)

    @classmethod
    def create(cls, means, *, colors=None, scales=None, opacity: float = 0.1,
               feature_dim: int = DEFAULT_FEATURE_DIM, sh_degree: int = 3,
               features=None, quats=None, dtype=np.float32) -> "GaussianSet":
        """Convenience constructor from positions and optional linear-domain attributes."""
        means = np.asarray(means, dtype=dtype).reshape(-1, 3)
        n = len(means)
        if quats is None:
            quats = np.tile(np.array([1, 0, 0, 0], dtype), (n, 1))
        if scales is None:
            scales = np.full((n, 3), 0.05)
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
        sh = np.zeros((n, sh_count(sh_degree), 3), dtype)
        if colors is not None:
            sh[:, 0, :] = (np.asarray(colors, dtype=np.float64) - 0.5) / SH_C0
        present = features is not None
        features = (np.zeros((n, feature_dim), dtype) if features is None
                    else np.asarray(features, dtype=dtype).reshape(n, -1 if n else feature_dim))
        return cls(
            means=means,
            quats=np.asarray(quats, dtype=dtype).reshape(n, 4),
            log_scales=np.log(scales).astype(dtype),
            opacity_logits=np.broadcast_to(inverse_sigmoid(opacity), (n,)).astype(dtype),
            sh=sh,
            features=features,
            features_present=present,
        )


# ---------------------------------------------------------------------------
# rotations and covariance


def _normalize_quats(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(q)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm == 0):
        raise ValueError("zero quaternion has no rotation")
    return q / norm[..., None], norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (w,x,y,z) quaternions, normalized on read."""
    qn, _ = _normalize_quats(q)
    w, x, y, z = np.moveaxis(qn, -1, 0)
    r = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return r.reshape(qn.shape[:-1] + (3, 3))


def _rotmat_grad_to_quat(q: np.ndarray, d_r: np.ndarray) -> np.ndarray:
    qn, norm = _normalize_quats(q)
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = d_r.reshape(d_r.shape[:-2] + (9,))
    g = np.moveaxis(g, -1, 0)
    dw = 2 * (-z * g[1] + y * g[2] + z * g[3] - x * g[5] - y * g[6] + x * g[7])
    dx = 2 * (y * g[1] + z * g[2] + y * g[3] - 2 * x * g[4] - w * g[5] + z * g[6] + w * g[7] - 2 * x * g[8])
    dy = 2 * (-2 * y * g[0] + x * g[1] + w * g[2] + x * g[3] + z * g[5] - w * g[6] + z * g[7] - 2 * y * g[8])
    dz = 2 * (-2 * z * g[0] - w * g[1] + x * g[2] + w * g[3] - 2 * z * g[4] + y * g[5] + x * g[6] + y * g[7])
    d_qn = np.stack([dw, dx, dy, dz], axis=-1)
    # through q / |q|
    return (d_qn - qn * np.sum(qn * d_qn, axis=-1, keepdims=True)) / norm[..., None]


def build_covariance(q: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """``R S S^T R^T`` with ``S = diag(exp(log_scales))``; works on single items or batches."""
    r = quat_to_rotmat(q)
    m = r * np.exp(np.asarray(log_scales))[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def build_covariance_backward(q, log_scales, d_cov):
    """Gradients of a scalar loss w.r.t. ``q`` and ``log_scales`` given ``dL/dSigma``."""
    r = quat_to_rotmat(q)
    s = np.exp(np.asarray(log_scales))
    m = r * s[..., None, :]
    d_m = (d_cov + np.swapaxes(d_cov, -1, -2)) @ m
    d_r = d_m * s[..., None, :]
    d_log_s = np.sum(r * d_m, axis=-2) * s
    return _rotmat_grad_to_quat(q, d_r), d_log_s


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values ``(..., (degree+1)^2)`` for unit directions."""
    if not 0 <= degree <= 3:
        raise ValueError(f"SH degree {degree} unsupported (0..3)")
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full(x.shape, SH_C0, dtype=dirs.dtype)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        out += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d dir, shape ``(..., K, 3)``."""
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        rows += [(zero, -SH_C1 + zero, zero), (zero, zero, SH_C1 + zero), (-SH_C1 + zero, zero, zero)]
    if degree >= 2:
        rows += [
            (SH_C2[0] * y, SH_C2[0] * x, zero),
            (zero, SH_C2[1] * z, SH_C2[1] * y),
            (-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z),
            (SH_C2[3] * z, zero, SH_C2[3] * x),
            (2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero),
            (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
            (SH_C3[2] * -2 * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), SH_C3[2] * 8 * y * z),
            (SH_C3[3] * -6 * x * z, SH_C3[3] * -6 * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (SH_C3[4] * (4 * zz - 3 * xx - yy), SH_C3[4] * -2 * x * y, SH_C3[4] * 8 * x * z),
            (SH_C3[5] * 2 * x * z, SH_C3[5] * -2 * y * z, SH_C3[5] * (xx - yy)),
            (SH_C3[6] * (3 * xx - 3 * yy), SH_C3[6] * -6 * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def sh_to_color(sh: np.ndarray, view_dir: np.ndarray, degree: int | None = None) -> np.ndarray:
    """Colour ``0.5 + sum_k sh[k] Y_k(dir)``, clamped below at 0.

    ``sh`` is ``(..., K, 3)``; only the first ``(degree+1)^2`` coefficients are used.
    """
    sh = np.asarray(sh)
    view_dir = np.asarray(view_dir)
    if degree is None:
        degree = sh_degree_of(sh.shape[-2])
    if degree > 3:
        raise ValueError(f"SH degree {degree} unsupported (0..3)")
    if np.any(np.abs(np.linalg.norm(view_dir, axis=-1) - 1.0) > 1e-4):
        raise ValueError("view_dir must be a unit vector")
    k = sh_count(degree)
    basis = sh_basis(view_dir, degree)
    raw = np.einsum("...k,...kc->...c", basis, sh[..., :k, :]) + 0.5
    return np.maximum(raw, 0.0)


def activate(g: GaussianSet):
    """Return ``(means, covariances, alpha_base, features)``."""
    return (g.means,
            build_covariance(g.quats, g.log_scales) if len(g) else np.zeros((0, 3, 3), g.dtype),
            sigmoid(g.opacity_logits).astype(g.dtype),
            g.features)


def from_points(xyz: np.ndarray, rgb: np.ndarray, *, feature_dim: int = DEFAULT_FEATURE_DIM,
                sh_degree: int = 3, opacity: float = 0.1, dtype=np.float32) -> GaussianSet:
    """Isotropic Gaussians at the given points, sized by the mean distance to 3 neighbours."""
    from scipy.spatial import cKDTree

    xyz = np.asarray(xyz, dtype=np.float64)
    if len(xyz) > 1:
        k = min(4, len(xyz))
        dist, _ = cKDTree(xyz).query(xyz, k=k)
        d2 = np.mean(dist[:, 1:] ** 2, axis=1)
        scale = np.sqrt(np.maximum(d2, 1e-7))
    else:
        scale = np.full(len(xyz), 0.01)
    return GaussianSet.create(xyz, colors=rgb, scales=scale[:, None], opacity=opacity,
                              feature_dim=feature_dim, sh_degree=sh_degree, dtype=dtype)
