"""Rendering colour and features with the same blend weights.

Run with ``python3 demos/01_render_and_features.py``. Writes PNGs to
``demo_out/render``.
"""
from pathlib import Path

import numpy as np

from splatstyle.rasterizer import project, rasterize
from splatstyle.sceneio import save_image
from splatstyle.toy import toy_cameras, toy_gaussians

out = Path("demo_out/render")

# %% The toy scene: a checkered backdrop and three coloured blobs.
g = toy_gaussians(feature_dim=3)
cams = toy_cameras(n_views=3, size=64)
print(f"{len(g)} Gaussians, SH degree {g.sh_degree}, {len(cams)} cameras")

# %% Plain colour renders from each camera.
for i, cam in enumerate(cams):
    r = rasterize(g, cam)
    save_image(r.color, out / f"color_{i}.png")
    print(f"view {i}: mean alpha {r.alpha.mean():.3f}, depth range "
          f"{r.depth[r.alpha > 0.5].min():.2f}..{r.depth[r.alpha > 0.5].max():.2f}")

# %% Features are composited with exactly the colour weights. Giving every
# Gaussian its own view-dependent colour as a 3-channel feature reproduces
# the colour image bit for bit.
cam = cams[1]
s = project(g, cam)
feats = np.zeros((len(g), 3), g.dtype)
feats[s.index] = s.color
r = rasterize(g.with_features(feats), cam)
print("feature map == colour image:", np.array_equal(r.feature, r.color))

# %% Random features give a smooth false-colour map of the same footprints.
rng = np.random.default_rng(0)
r = rasterize(g.with_features(rng.uniform(0, 1, (len(g), 3)).astype(g.dtype)), cam)
save_image(np.clip(r.feature, 0, 1), out / "random_features.png")
print(f"wrote {len(list(out.glob('*.png')))} images to {out}")
