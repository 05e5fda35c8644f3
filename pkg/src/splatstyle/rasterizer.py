"""Differentiable splatting of feature Gaussians.

Pipeline per view: activate -> project (EWA, first-order) -> global depth sort
-> front-to-back compositing. Colour and feature share one set of blending
weights, so they are composited in a single pass over a ``[colour | feature]``
value matrix.

Compositing runs over 16x16 pixel tiles. Guards: per-splat opacity clamp at
0.99 and early termination once the transmittance in front of a splat drops
below 1e-4. There is no 3-sigma cutoff per pixel: a splat is only left out
of a tile where its weight is provably below 1e-6 on every pixel of it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import (GaussianSet, build_covariance, build_covariance_backward,
                        sh_basis, sh_basis_jacobian, sigmoid)
from .sceneio import Camera

NEAR = 0.01
DILATION = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
FOOTPRINT_SIGMAS = 3.0
TILE = 16
SKIP_WEIGHT = 1e-6


@dataclass
class Splats2D:
    """Projected splats, one row each, sorted front to back."""

    mean2d: np.ndarray    # (M, 2) pixel coordinates (x, y)
    conic: np.ndarray     # (M, 3) inverse covariance entries (a, b, c) of [[a, b], [b, c]]
    depth: np.ndarray     # (M,)
    alpha_base: np.ndarray  # (M,)
    color: np.ndarray     # (M, 3)
    feature: np.ndarray   # (M, D)
    index: np.ndarray     # (M,) source Gaussian index

    def __len__(self) -> int:
        return len(self.depth)

    def take(self, order: np.ndarray) -> "Splats2D":
        return Splats2D(self.mean2d[order], self.conic[order], self.depth[order],
                        self.alpha_base[order], self.color[order], self.feature[order],
                        self.index[order])


@dataclass
class RenderOutput:
    color: np.ndarray    # (3, H, W)
    feature: np.ndarray  # (D, H, W)
    alpha: np.ndarray    # (1, H, W)
    depth: np.ndarray    # (1, H, W) alpha-normalized expected depth, 0 where empty
    splats: Splats2D


@dataclass
class GaussianGrads:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    features: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(vars(self))


# ---------------------------------------------------------------------------
# projection


@dataclass
class _Projected:
    """Per-Gaussian intermediates of projection kept for the backward pass."""

    visible: np.ndarray
    cam_pts: np.ndarray
    rot: np.ndarray
    t_mat: np.ndarray
    cov3d: np.ndarray
    cov2d: np.ndarray
    dirs_raw: np.ndarray
    dir_norm: np.ndarray
    color_raw: np.ndarray
    splats: Splats2D


def _project_all(g: GaussianSet, cam: Camera) -> _Projected:
    dt = g.dtype
    n = len(g)
    rot, tr = cam.world_to_image_frame()
    rot = rot.astype(dt)
    p = g.means @ rot.T + tr.astype(dt)
    z = p[:, 2]
    safe_z = np.where(z > NEAR, z, 1.0).astype(dt)
    fx, fy = dt.type(cam.fx), dt.type(cam.fy)
    u = fx * p[:, 0] / safe_z + dt.type(cam.cx)
    v = fy * p[:, 1] / safe_z + dt.type(cam.cy)

    jac = np.zeros((n, 2, 3), dt)
    jac[:, 0, 0] = fx / safe_z
    jac[:, 0, 2] = -fx * p[:, 0] / safe_z ** 2
    jac[:, 1, 1] = fy / safe_z
    jac[:, 1, 2] = -fy * p[:, 1] / safe_z ** 2
    t_mat = jac @ rot
    cov3d = build_covariance(g.quats, g.log_scales).astype(dt) if n else np.zeros((0, 3, 3), dt)
    cov2d = t_mat @ cov3d @ np.swapaxes(t_mat, 1, 2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    safe_det = np.where(det > 0, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)

    # 3-sigma footprint against the image rectangle
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = FOOTPRINT_SIGMAS * np.sqrt(np.maximum(lam, 0.0))
    on_screen = ((u + radius >= 0) & (u - radius <= cam.width - 1)
                 & (v + radius >= 0) & (v - radius <= cam.height - 1))
    visible = (z > NEAR) & (det > 0) & on_screen & np.all(np.isfinite(conic), axis=1)

    dirs_raw = g.means - cam.center.astype(dt)
    dir_norm = np.linalg.norm(dirs_raw, axis=1)
    dirs = dirs_raw / np.where(dir_norm > 0, dir_norm, 1.0)[:, None]
    basis = sh_basis(dirs, g.sh_degree).astype(dt)
    color_raw = np.einsum("nk,nkc->nc", basis, g.sh) + dt.type(0.5)
    color = np.maximum(color_raw, 0.0)

    idx = np.nonzero(visible)[0]
    order = idx[np.argsort(z[idx], kind="stable")]
    splats = Splats2D(
        mean2d=np.stack([u, v], axis=1)[order],
        conic=conic[order].astype(dt),
        depth=z[order],
        alpha_base=sigmoid(g.opacity_logits[order]).astype(dt),
        color=color[order],
        feature=g.features[order],
        index=order,
    )
    return _Projected(visible, p, rot, t_mat, cov3d, cov2d, dirs_raw, dir_norm, color_raw, splats)


def project(g: GaussianSet, cam: Camera) -> Splats2D:
    """Project every Gaussian; culled ones are dropped. Output is depth-sorted."""
    return _project_all(g, cam).splats


# ---------------------------------------------------------------------------
# compositing


def _check_sorted(s: Splats2D) -> None:
    if len(s) < 2:
        return
    d0, d1 = s.depth[:-1], s.depth[1:]
    ok = (d1 > d0) | ((d1 == d0) & (s.index[1:] > s.index[:-1]))
    if not np.all(ok):
        raise ValueError("composite: splats must be sorted front to back (ties by source index)")


def _tiles(s: Splats2D, h: int, w: int):
    """Yield ``(r0, r1, c0, c1, selected splat rows)`` for every non-empty tile."""
    if not len(s):
        return
    a, b, c = (s.conic[:, i].astype(np.float64) for i in range(3))
    mid = 0.5 * (a + c)
    lam_min = mid - np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    alpha = s.alpha_base.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        reach = np.where(alpha > SKIP_WEIGHT,
                         np.sqrt(2.0 * np.log(np.maximum(alpha, SKIP_WEIGHT) / SKIP_WEIGHT)
                                 / np.maximum(lam_min, 1e-30)), -1.0)
    u, v = s.mean2d[:, 0].astype(np.float64), s.mean2d[:, 1].astype(np.float64)
    for r0 in range(0, h, TILE):
        r1 = min(h, r0 + TILE)
        in_rows = (v + reach >= r0) & (v - reach <= r1 - 1)
        for c0 in range(0, w, TILE):
            c1 = min(w, c0 + TILE)
            sel = np.nonzero(in_rows & (u + reach >= c0) & (u - reach <= c1 - 1))[0]
            if len(sel):
                yield r0, r1, c0, c1, sel


def _tile_grid(r0, r1, c0, c1, dt) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[r0:r1, c0:c1]
    return xs.reshape(-1).astype(dt), ys.reshape(-1).astype(dt)


def _blend_state(s: Splats2D, sel: np.ndarray, px: np.ndarray, py: np.ndarray):
    """Dense (M, P) blending state of the selected splats over a block of pixels."""
    mean2d, conic, alpha_base = s.mean2d[sel], s.conic[sel], s.alpha_base[sel]
    dx = px[None, :] - mean2d[:, 0:1]
    dy = py[None, :] - mean2d[:, 1:2]
    ca, cb, cc = conic[:, 0:1], conic[:, 1:2], conic[:, 2:3]
    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    raw = alpha_base[:, None] * np.exp(power)
    clamped = raw > ALPHA_MAX
    gval = np.where(clamped, alpha_base.dtype.type(ALPHA_MAX), raw)
    one_minus = 1.0 - gval
    trans = np.empty_like(gval)
    if len(gval):
        trans[0] = 1.0
        np.cumprod(one_minus[:-1], axis=0, out=trans[1:])
    active = trans >= T_MIN
    weight = np.where(active, gval * trans, 0.0)
    return dx, dy, power, gval, clamped, trans, active, weight


def composite(splats: Splats2D, height: int, width: int) -> RenderOutput:
    """Front-to-back blending of depth-sorted splats onto a black background."""
    _check_sorted(splats)
    dt = splats.feature.dtype if len(splats) else np.dtype(np.float32)
    d = splats.feature.shape[1]
    values = np.concatenate([splats.color, splats.feature, splats.depth[:, None]], axis=1).astype(np.float64)
    out = np.zeros((values.shape[1], height, width), np.float64)
    alpha = np.zeros((height, width), np.float64)
    for r0, r1, c0, c1, sel in _tiles(splats, height, width):
        px, py = _tile_grid(r0, r1, c0, c1, dt)
        weight = _blend_state(splats, sel, px, py)[-1].astype(np.float64)
        out[:, r0:r1, c0:c1] = (values[sel].T @ weight).reshape(-1, r1 - r0, c1 - c0)
        alpha[r0:r1, c0:c1] = weight.sum(axis=0).reshape(r1 - r0, c1 - c0)
    depth_sum = out[3 + d]
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(alpha > 0, depth_sum / alpha, 0.0)
    return RenderOutput(
        color=out[:3].astype(dt),
        feature=out[3:3 + d].astype(dt),
        alpha=alpha[None].astype(dt),
        depth=depth[None].astype(dt),
        splats=splats,
    )


def rasterize(g: GaussianSet, cam: Camera) -> RenderOutput:
    """Colour image, feature map, accumulated alpha and expected depth for one view."""
    return composite(project(g, cam), cam.height, cam.width)


# ---------------------------------------------------------------------------
# backward


def _composite_backward(s: Splats2D, h: int, w: int, d_color: np.ndarray, d_feature: np.ndarray):
    """Gradients w.r.t. per-splat mean2d, conic, alpha_base, color and feature."""
    m = len(s)
    dt = s.feature.dtype
    values = np.concatenate([s.color, s.feature], axis=1)
    d_out = np.concatenate([d_color, d_feature], axis=0).astype(dt)
    g_mean = np.zeros((m, 2), np.float64)
    g_conic = np.zeros((m, 3), np.float64)
    g_alpha = np.zeros(m, np.float64)
    g_values = np.zeros(values.shape, np.float64)
    for r0, r1, c0, c1, sel in _tiles(s, h, w):
        px, py = _tile_grid(r0, r1, c0, c1, dt)
        dx, dy, power, gval, clamped, trans, active, weight = _blend_state(s, sel, px, py)
        dblk = d_out[:, r0:r1, c0:c1].reshape(d_out.shape[0], -1)
        g_values[sel] += weight.astype(np.float64) @ dblk.T.astype(np.float64)
        contrib = values[sel] @ dblk  # (M, P): d_out . value_i per pixel
        wc = weight * contrib
        # suffix sums over later splats
        behind = np.zeros_like(wc)
        behind[:-1] = np.cumsum(wc[:0:-1], axis=0)[::-1]
        d_g = np.where(active, trans * contrib - behind / (1.0 - gval), 0.0)
        d_g = np.where(clamped, 0.0, d_g)
        e = np.exp(power)
        g_alpha[sel] += (d_g * e).sum(axis=1, dtype=np.float64)
        d_pow = d_g * gval
        conic = s.conic[sel]
        ca, cb, cc = conic[:, 0:1], conic[:, 1:2], conic[:, 2:3]
        g_mean[sel, 0] += (d_pow * (ca * dx + cb * dy)).sum(axis=1, dtype=np.float64)
        g_mean[sel, 1] += (d_pow * (cb * dx + cc * dy)).sum(axis=1, dtype=np.float64)
        g_conic[sel, 0] += (d_pow * (-0.5 * dx * dx)).sum(axis=1, dtype=np.float64)
        g_conic[sel, 1] += (d_pow * (-dx * dy)).sum(axis=1, dtype=np.float64)
        g_conic[sel, 2] += (d_pow * (-0.5 * dy * dy)).sum(axis=1, dtype=np.float64)
    return g_mean, g_conic, g_alpha, g_values[:, :3], g_values[:, 3:]


def rasterize_backward(g: GaussianSet, cam: Camera, d_color: np.ndarray, d_feature: np.ndarray) -> GaussianGrads:
    """Exact gradients of ``sum(d_color * color) + sum(d_feature * feature)``.

    Forward state is recomputed rather than stored. Clamped opacities and
    terminated pixels contribute no gradient through the clamped quantity.
    """
    h, w = cam.height, cam.width
    d_color = np.asarray(d_color)
    d_feature = np.asarray(d_feature)
    if d_color.shape != (3, h, w):
        raise ValueError(f"d_color shape {d_color.shape} != (3, {h}, {w})")
    if d_feature.shape != (g.feature_dim, h, w):
        raise ValueError(f"d_feature shape {d_feature.shape} != ({g.feature_dim}, {h}, {w})")
    dt = g.dtype
    n = len(g)
    grads = GaussianGrads(*(np.zeros_like(a) for a in
                            (g.means, g.quats, g.log_scales, g.opacity_logits, g.sh, g.features)))
    if n == 0:
        return grads
    pj = _project_all(g, cam)
    s = pj.splats
    if len(s) == 0:
        return grads
    g_mean2d, g_conic, g_alpha, g_color, g_feat = _composite_backward(s, h, w, d_color, d_feature)
    idx = s.index

    grads.features[idx] = g_feat
    alpha = s.alpha_base.astype(np.float64)
    grads.opacity_logits[idx] = g_alpha * alpha * (1.0 - alpha)

    # colour: clamp at zero, then SH coefficients and view direction
    g_color = np.where(pj.color_raw[idx] > 0, g_color, 0.0)
    norm = pj.dir_norm[idx][:, None]
    dirs = pj.dirs_raw[idx] / norm
    deg = g.sh_degree
    basis = sh_basis(dirs, deg)
    grads.sh[idx] = basis[:, :, None] * g_color[:, None, :]
    g_basis = np.einsum("nkc,nc->nk", g.sh[idx], g_color)
    g_dir = np.einsum("nk,nkj->nj", g_basis, sh_basis_jacobian(dirs, deg))
    g_means_w = (g_dir - dirs * np.sum(dirs * g_dir, axis=1, keepdims=True)) / norm

    # conic -> 2D covariance
    cov2d = pj.cov2d[idx].astype(np.float64)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    inv_d2 = 1.0 / (det * det)
    gp, gq, gr = g_conic[:, 0], g_conic[:, 1], g_conic[:, 2]
    g_a = inv_d2 * (-c * c * gp + b * c * gq - b * b * gr)
    g_b = inv_d2 * (2 * b * c * gp - (a * c + b * b) * gq + 2 * a * b * gr)
    g_c = inv_d2 * (-b * b * gp + a * b * gq - a * a * gr)
    g_cov2d = np.empty((len(idx), 2, 2))
    g_cov2d[:, 0, 0] = g_a
    g_cov2d[:, 1, 1] = g_c
    g_cov2d[:, 0, 1] = g_cov2d[:, 1, 0] = 0.5 * g_b

    # cov2d = T cov3d T^T (+ dilation)
    t_mat = pj.t_mat[idx].astype(np.float64)
    cov3d = pj.cov3d[idx].astype(np.float64)
    g_cov3d = np.swapaxes(t_mat, 1, 2) @ g_cov2d @ t_mat
    g_t = 2.0 * g_cov2d @ t_mat @ cov3d
    g_jac = g_t @ pj.rot.astype(np.float64).T
    gq_, gs_ = build_covariance_backward(g.quats[idx].astype(np.float64),
                                         g.log_scales[idx].astype(np.float64), g_cov3d)
    grads.quats[idx] = gq_
    grads.log_scales[idx] = gs_

    # camera-space point from the Jacobian and the pixel mean
    x, y, z = (pj.cam_pts[idx, k].astype(np.float64) for k in range(3))
    fx, fy = cam.fx, cam.fy
    gu, gv = g_mean2d[:, 0], g_mean2d[:, 1]
    g_x = gu * fx / z + g_jac[:, 0, 2] * (-fx / z ** 2)
    g_y = gv * fy / z + g_jac[:, 1, 2] * (-fy / z ** 2)
    g_z = (-gu * fx * x / z ** 2 - gv * fy * y / z ** 2
           - g_jac[:, 0, 0] * fx / z ** 2 + g_jac[:, 0, 2] * 2 * fx * x / z ** 3
           - g_jac[:, 1, 1] * fy / z ** 2 + g_jac[:, 1, 2] * 2 * fy * y / z ** 3)
    g_cam = np.stack([g_x, g_y, g_z], axis=1)
    grads.means[idx] = g_cam @ pj.rot.astype(np.float64) + g_means_w
    return grads


@dataclass
class BlendWeights:
    """Per-view blending weights of a frozen geometry.

    With geometry fixed, a rendered feature map is linear in the per-Gaussian
    features: ``F = features[index].T @ weight``. Caching ``weight`` makes
    repeated feature renders and their backward a pair of matrix products.
    """

    index: np.ndarray   # (M,) source Gaussians, front to back
    weight: np.ndarray  # (M, H*W)
    height: int
    width: int

    def render(self, features: np.ndarray) -> np.ndarray:
        f = features[self.index].astype(np.float64)
        out = f.T @ self.weight.astype(np.float64) if len(self.index) else np.zeros((features.shape[1], self.height * self.width))
        return out.reshape(-1, self.height, self.width).astype(features.dtype)

    def backward(self, d_feature: np.ndarray, n_gaussians: int) -> np.ndarray:
        d = d_feature.reshape(d_feature.shape[0], -1).astype(np.float64)
        grad = np.zeros((n_gaussians, d.shape[0]), np.float64)
        if len(self.index):
            grad[self.index] = self.weight.astype(np.float64) @ d.T
        return grad.astype(d_feature.dtype)


def blend_weights(g: GaussianSet, cam: Camera) -> BlendWeights:
    s = project(g, cam)
    h, w = cam.height, cam.width
    weight = np.zeros((len(s), h * w), g.dtype)
    cols = np.arange(h * w).reshape(h, w)
    for r0, r1, c0, c1, sel in _tiles(s, h, w):
        px, py = _tile_grid(r0, r1, c0, c1, g.dtype)
        weight[np.ix_(sel, cols[r0:r1, c0:c1].ravel())] = _blend_state(s, sel, px, py)[-1]
    return BlendWeights(s.index, weight, h, w)
