"""The three training stages on the toy scene, then zero-shot stylization.

A shortened run (minutes, not the full acceptance budget). Run with
``python3 demos/02_toy_pipeline.py [--quick]``; outputs go to
``demo_out/pipeline``.
"""
import sys
import time
from pathlib import Path

import numpy as np

from splatstyle.consistency import ablation_compare
from splatstyle.gaussians import from_points
from splatstyle.rasterizer import rasterize
from splatstyle.sceneio import save_image
from splatstyle.stylizer import TINY, StyleModel, init_decoder, init_encoder, stylize_view
from splatstyle.toy import content_image, style_image, toy_scene
from splatstyle.training import (TrainConfig, moving_average, pretrain_decoder, pretrain_geometry, psnr,
                                 train_style)

quick = "--quick" in sys.argv
scale = 0.1 if quick else 0.5
out = Path("demo_out/pipeline")
ds, _ = toy_scene()
rng = np.random.default_rng(0)
enc, dec = init_encoder(TINY, rng), init_decoder(TINY, rng)
styles = [style_image(i) for i in range(5)]

# %% Stage 1: train the decoder to invert the (fixed, random) tiny encoder
# under AdaIN, on procedural content and style images.
t = time.perf_counter()
dec, log = pretrain_decoder(TrainConfig("decoder", int(300 * scale) or 1, crop=32),
                            [content_image(i) for i in range(10)], styles, enc, TINY, dec)
print(f"decoder: loss {log[0]['loss']:.3f} -> {log[-1]['loss']:.3f} ({time.perf_counter() - t:.0f} s)")

# %% Stage 2: fit splat geometry and colour to the five photographs,
# starting from the noisy point cloud.
t = time.perf_counter()
geo, _ = pretrain_geometry(TrainConfig("geometry", int(2000 * scale), spatial_scale=ds.scene_scale()),
                           ds, from_points(*ds.points))
p = [psnr(np.clip(rasterize(geo, c).color, 0, 1), img) for c, img in zip(ds.cameras, ds.images)]
print(f"geometry: PSNR per view {np.round(p, 1)} dB ({time.perf_counter() - t:.0f} s)")

# %% Stage 3: freeze geometry and networks; learn per-Gaussian features and
# the expansion MLP so rendered features land in normalized encoder space.
t = time.perf_counter()
res = train_style(TrainConfig("style", int(3000 * scale)), ds, geo, enc, dec, TINY, styles, feature_dim=32)
ma = moving_average([r["align"] for r in res.log], 50)
print(f"style: align loss {ma[0]:.3f} -> {ma[-1]:.3f} ({time.perf_counter() - t:.0f} s)")

# %% Zero-shot: a style never seen in training, applied with no optimization.
model = StyleModel(TINY, enc, dec, res.mlp)
new_style = style_image(42)
save_image(new_style, out / "style.png")
for i, cam in enumerate(ds.cameras):
    save_image(np.clip(stylize_view(res.gaussians, cam, new_style, model), 0, 1), out / f"view_{i}.png")

# %% How consistent are neighbouring views? Compare against re-normalizing
# each view on its own before AdaIN.
report = ablation_compare(res.gaussians, ds.cameras, {"s42": new_style}, model, [(0, 1), (1, 2), (2, 3)],
                          scene_scale=ds.scene_scale())
print("mean RGB consistency RMSE:", {k: round(v, 4) for k, v in report["summary"]["mean_rmse_rgb"].items()})
