"""Procedural fixtures: a small posed scene, style images and a content corpus.

Everything is generated from a seed so tests, demos and the command line
share the same data without shipping binary files.
"""
from __future__ import annotations

import numpy as np

from .gaussians import GaussianSet
from .rasterizer import rasterize
from .sceneio import Camera, SceneDataset


def toy_cameras(n_views: int = 5, size: int = 64, radius: float = 3.0,
                spread_deg: float = 20.0) -> list[Camera]:
    """Cameras on a horizontal arc around the origin, all looking at it."""
    angles = np.deg2rad(np.linspace(-spread_deg, spread_deg, n_views))
    f = 1.1 * size
    cams = []
    for i, a in enumerate(angles):
        eye = [radius * np.sin(a), 0.4 + 0.25 * np.cos(3 * i), radius * np.cos(a)]
        cams.append(Camera.look_at(eye, [0.0, 0.0, 0.0], fx=f, fy=f, cx=(size - 1) / 2,
                                   cy=(size - 1) / 2, width=size, height=size))
    return cams


def toy_gaussians(seed: int = 0, feature_dim: int = 32, sh_degree: int = 3) -> GaussianSet:
    """Ground truth: a textured backdrop filling every toy view and three coloured blobs (495 Gaussians)."""
    rng = np.random.default_rng(seed)
    # backdrop: 20 x 18 grid at z = -0.6 facing +z, wide enough to cover the frame
    u, v = np.meshgrid(np.linspace(-3.0, 3.0, 20), np.linspace(-2.4, 2.6, 18))
    back = np.stack([u.ravel(), v.ravel(), np.full(u.size, -0.6)], 1)
    checker = ((np.floor(u * 1.2) + np.floor(v * 1.2)) % 2).ravel()
    back_rgb = np.stack([0.25 + 0.5 * checker, 0.35 + 0.25 * (v.ravel() + 2.4) / 5.0,
                         0.7 - 0.4 * checker], 1)
    back_scale = np.tile([0.21, 0.21, 0.02], (len(back), 1))

    blobs, blob_rgb, blob_scale = [], [], []
    for center, color, r in [((-0.6, -0.3, 0.2), (0.9, 0.3, 0.2), 0.35),
                             ((0.5, -0.2, 0.0), (0.2, 0.8, 0.3), 0.3),
                             ((0.05, 0.55, -0.1), (0.95, 0.85, 0.2), 0.28)]:
        d = rng.standard_normal((45, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = np.asarray(center) + r * d * rng.uniform(0.7, 1.0, (45, 1))
        shade = 0.75 + 0.25 * d[:, 1:2]
        blobs.append(pts)
        blob_rgb.append(np.clip(np.asarray(color) * shade + 0.05 * rng.standard_normal((45, 3)), 0, 1))
        blob_scale.append(np.full((45, 3), 0.1))
    means = np.concatenate([back] + blobs)
    rgb = np.concatenate([back_rgb] + blob_rgb)
    scales = np.concatenate([back_scale] + blob_scale)
    q = rng.standard_normal((len(means), 4)) * 0.15
    q[:, 0] += 1.0
    q[: len(back)] = [1, 0, 0, 0]
    return GaussianSet.create(means, colors=rgb, scales=scales, opacity=0.95, quats=q,
                              feature_dim=feature_dim, sh_degree=sh_degree)


def toy_scene(seed: int = 0, n_views: int = 5, size: int = 64, point_noise: float = 0.03,
              feature_dim: int = 32) -> tuple[SceneDataset, GaussianSet]:
    """Photographs rendered from the ground truth, plus a noisy initial point cloud."""
    gt = toy_gaussians(seed, feature_dim=feature_dim)
    cams = toy_cameras(n_views, size)
    images = []
    for cam in cams:
        img = np.clip(rasterize(gt, cam).color, 0, 1)
        images.append((np.rint(img * 255) / 255).astype(np.float32))
    rng = np.random.default_rng(seed + 1)
    from .gaussians import SH_C0
    pts = gt.means + point_noise * rng.standard_normal(gt.means.shape)
    rgb = np.clip(gt.sh[:, 0, :] * SH_C0 + 0.5 + 0.05 * rng.standard_normal((len(gt), 3)), 0, 1)
    ds = SceneDataset(cams, images, [f"view_{i:03d}.png" for i in range(n_views)],
                      (pts.astype(np.float32), rgb.astype(np.float32)))
    ds.validate()
    return ds, gt


def _palette(rng) -> np.ndarray:
    return rng.uniform(0, 1, (3, 3))


def style_image(seed: int, size: int = 64) -> np.ndarray:
    """A procedural texture; the seed picks pattern family, palette and frequency."""
    rng = np.random.default_rng(1000 + seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    kind = seed % 4
    freq = rng.uniform(3, 9)
    theta = rng.uniform(0, np.pi)
    if kind == 0:
        t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    elif kind == 1:
        t = ((np.floor(xx * freq) + np.floor(yy * freq)) % 2).astype(float)
    elif kind == 2:
        cx, cy = rng.uniform(0.2, 0.8, 2)
        t = 0.5 + 0.5 * np.cos(2 * np.pi * freq * np.hypot(xx - cx, yy - cy))
    else:
        noise = rng.standard_normal((size // 8 + 1, size // 8 + 1))
        t = np.kron(noise, np.ones((8, 8)))[:size, :size]
        t = (t - t.min()) / (np.ptp(t) + 1e-9)
    pal = _palette(rng)
    t2 = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(1, 3) * (xx + yy))
    img = pal[0][:, None, None] * t + pal[1][:, None, None] * (1 - t) + 0.3 * (pal[2][:, None, None] - 0.5) * t2
    return np.clip(img, 0, 1).astype(np.float32)


def content_image(seed: int, size: int = 64) -> np.ndarray:
    """Random overlapping rectangles and discs on a gradient background."""
    rng = np.random.default_rng(5000 + seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    c0, c1 = rng.uniform(0, 1, (2, 3))
    img = c0[:, None, None] * (1 - yy) + c1[:, None, None] * yy
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0, 1, 3)[:, None, None]
        if rng.random() < 0.5:
            x0, y0 = rng.uniform(0, 0.8, 2)
            w, h = rng.uniform(0.1, 0.5, 2)
            mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        else:
            cx, cy = rng.uniform(0, 1, 2)
            mask = np.hypot(xx - cx, yy - cy) < rng.uniform(0.08, 0.3)
        img = np.where(mask[None], color, img)
    return np.clip(img, 0, 1).astype(np.float32)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to 8-bit levels so saved PNGs reload bit for bit."""
    return (np.rint(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)
