"""Cross-view consistency of stylized outputs.

Pixels of view A are lifted to 3D with the rendered expected depth, moved
into view B and kept when both the forward and the return trip agree. The
metric is the per-channel RMSE of outputs over those matched pixel pairs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import jsonschema
import numpy as np

from .rasterizer import RenderOutput, rasterize
from .sceneio import Camera
from .stylizer import StyleModel, stylize_feature_map

ALPHA_MIN = 0.5
DEPTH_TOL_FRACTION = 0.01
ROUND_TRIP_PX = 1.0
VARIANTS = ("integrated", "view-specific")


class UndefinedMetricError(ValueError):
    pass


@dataclass
class MatchSet:
    view_a: int
    view_b: int
    pix_a: np.ndarray  # (K, 2) integer (row, col)
    pix_b: np.ndarray

    def __len__(self) -> int:
        return len(self.pix_a)

    def reversed(self) -> "MatchSet":
        return MatchSet(self.view_b, self.view_a, self.pix_b, self.pix_a)

    def pairs(self) -> set[tuple[int, int, int, int]]:
        return {(int(a[0]), int(a[1]), int(b[0]), int(b[1])) for a, b in zip(self.pix_a, self.pix_b)}


def _warp(src_cam: Camera, src: RenderOutput, dst_cam: Camera, rows, cols):
    depth = src.depth[0, rows, cols].astype(np.float64)
    uv = np.stack([cols, rows], axis=1).astype(np.float64)
    world = src_cam.unproject(uv, depth)
    uv_d, z_d = dst_cam.project_points(world)
    return uv_d, z_d


def build_matches(gaussians, cam_a: Camera, cam_b: Camera, *, scene_scale: float = 1.0,
                  view_a: int = 0, view_b: int = 1,
                  renders: tuple[RenderOutput, RenderOutput] | None = None) -> MatchSet:
    """Pixel pairs of two views that see the same surface point."""
    ra, rb = renders if renders is not None else (rasterize(gaussians, cam_a), rasterize(gaussians, cam_b))
    tol = DEPTH_TOL_FRACTION * scene_scale
    rows, cols = np.nonzero(ra.alpha[0] > ALPHA_MIN)
    empty = MatchSet(view_a, view_b, np.zeros((0, 2), int), np.zeros((0, 2), int))
    if len(rows) == 0:
        return empty
    uv_b, z_b = _warp(cam_a, ra, cam_b, rows, cols)
    with np.errstate(invalid="ignore"):
        cb = np.rint(uv_b[:, 0])
        rb_ = np.rint(uv_b[:, 1])
        ok = ((z_b > 0) & np.isfinite(cb) & np.isfinite(rb_)
              & (cb >= 0) & (cb < cam_b.width) & (rb_ >= 0) & (rb_ < cam_b.height))
    rows, cols, z_b = rows[ok], cols[ok], z_b[ok]
    rb_, cb = rb_[ok].astype(int), cb[ok].astype(int)
    ok = rb.alpha[0, rb_, cb] > ALPHA_MIN
    ok &= np.abs(rb.depth[0, rb_, cb] - z_b) < tol
    rows, cols, rb_, cb = rows[ok], cols[ok], rb_[ok], cb[ok]
    if len(rows) == 0:
        return empty
    # return trip from B's own depth must land back on the A pixel
    uv_a, z_a = _warp(cam_b, rb, cam_a, rb_, cb)
    back = np.hypot(uv_a[:, 0] - cols, uv_a[:, 1] - rows)
    ok = (z_a > 0) & (back <= ROUND_TRIP_PX)
    return MatchSet(view_a, view_b, np.stack([rows[ok], cols[ok]], 1), np.stack([rb_[ok], cb[ok]], 1))


def consistency_rmse(outputs_a: np.ndarray, outputs_b: np.ndarray, matches: MatchSet,
                     channel_weights: np.ndarray | None = None) -> float:
    """Root mean square over matches and channels of ``w_c * (a - b)``."""
    if len(matches) == 0:
        raise UndefinedMetricError("consistency RMSE is undefined for an empty match set")
    a = np.asarray(outputs_a, np.float64)[:, matches.pix_a[:, 0], matches.pix_a[:, 1]]
    b = np.asarray(outputs_b, np.float64)[:, matches.pix_b[:, 0], matches.pix_b[:, 1]]
    diff = a - b
    if channel_weights is not None:
        diff = diff * np.asarray(channel_weights, np.float64)[:, None]
    return float(np.sqrt(np.mean(diff * diff)))


REPORT_SCHEMA = {
    "type": "object",
    "required": ["entries", "summary"],
    "properties": {
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["variant", "rmse_rgb", "rmse_feature", "n_matches", "views", "style"],
                "properties": {
                    "variant": {"enum": list(VARIANTS)},
                    "rmse_rgb": {"type": "number", "minimum": 0},
                    "rmse_feature": {"type": "number", "minimum": 0},
                    "n_matches": {"type": "integer", "minimum": 1},
                    "views": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                    "style": {"type": "string"},
                },
                "additionalProperties": False,
            },
        },
        "summary": {
            "type": "object",
            "properties": {
                "mean_rmse_rgb": {"type": "object"},
                "mean_rmse_feature": {"type": "object"},
                "ratio_rgb": {"type": ["number", "null"]},
                "ratio_feature": {"type": ["number", "null"]},
            },
        },
    },
}


def validate_report(report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)


def ablation_compare(gaussians, cameras: Sequence[Camera], styles: dict[str, np.ndarray],
                     model: StyleModel, view_pairs: Sequence[tuple[int, int]], *,
                     scene_scale: float = 1.0,
                     variants: Sequence[str] = VARIANTS) -> dict:
    """Consistency RMSE of each variant for every (view pair, style).

    ``integrated`` restyles the rendered field as is; ``view-specific``
    re-normalizes each view's expanded feature map before AdaIN. The summary
    ratio is view-specific over integrated, so values above 1 favour the
    integrated pipeline.
    """
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    needed = sorted({i for p in view_pairs for i in p})
    renders = {i: rasterize(gaussians, cameras[i]) for i in needed}
    matches = {p: build_matches(gaussians, cameras[p[0]], cameras[p[1]], scene_scale=scene_scale,
                                view_a=p[0], view_b=p[1], renders=(renders[p[0]], renders[p[1]]))
               for p in view_pairs}
    entries = []
    for style_name, style in styles.items():
        code = model.style_code(style)
        for variant in variants:
            outs = {i: stylize_feature_map(renders[i].feature, model, code,
                                           renormalize=variant == "view-specific")
                    for i in needed}
            for p in view_pairs:
                m = matches[p]
                if len(m) == 0:
                    continue
                fa, ia = outs[p[0]]
                fb, ib = outs[p[1]]
                entries.append({
                    "variant": variant,
                    "rmse_rgb": consistency_rmse(np.clip(ia, 0, 1), np.clip(ib, 0, 1), m),
                    "rmse_feature": consistency_rmse(fa, fb, m),
                    "n_matches": len(m),
                    "views": [int(p[0]), int(p[1])],
                    "style": style_name,
                })
    summary: dict = {"mean_rmse_rgb": {}, "mean_rmse_feature": {}}
    for v in variants:
        sel = [e for e in entries if e["variant"] == v]
        if sel:
            summary["mean_rmse_rgb"][v] = float(np.mean([e["rmse_rgb"] for e in sel]))
            summary["mean_rmse_feature"][v] = float(np.mean([e["rmse_feature"] for e in sel]))
    for key, metric in (("ratio_rgb", "mean_rmse_rgb"), ("ratio_feature", "mean_rmse_feature")):
        vals = summary[metric]
        summary[key] = (vals["view-specific"] / vals["integrated"]
                        if {"integrated", "view-specific"} <= vals.keys() and vals["integrated"] > 0 else None)
    report = {"entries": entries, "summary": summary}
    validate_report(report)
    return report
