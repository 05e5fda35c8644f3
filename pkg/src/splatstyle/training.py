"""Losses and the three training stages.

Stage 1 trains the 2D decoder on content/style pairs with a frozen encoder.
Stage 2 fits vanilla splatting geometry (positions, rotations, scales,
opacities, SH colour) to posed photographs; features are not touched.
Stage 3 freezes that geometry and the networks, and learns per-Gaussian
features plus the expansion MLP so that rendered features land in the
normalized encoder space and decode well after restyling.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gaussians import GEOMETRY_FIELDS, GaussianSet
from .optim import AdamState, adam_step
from .rasterizer import blend_weights, rasterize, rasterize_backward
from .sceneio import SceneDataset, save_gaussians, save_weights
from .stylizer import (EncoderArch, StyleCode, adain, decode, encode, expand_feature,
                       init_mlp, mlp_schema)

log = logging.getLogger(__name__)

STAGES = ("decoder", "geometry", "style")
STAGE_NUMBER = {"decoder": 1, "geometry": 2, "style": 3}

GEOMETRY_LR = {
    "means": 1.6e-4,
    "quats": 1e-3,
    "log_scales": 5e-3,
    "opacity_logits": 5e-2,
    "sh_dc": 2.5e-3,
    "sh_rest": 2.5e-3 / 20,
}


class ConfigError(ValueError):
    """A training stage was asked to run with unusable inputs."""


@dataclass
class TrainConfig:
    stage: str
    iterations: int
    seed: int = 0
    lr: dict[str, float] = field(default_factory=dict)
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda_ssim: float = 0.2
    style_weight_2d: float = 1.0
    crop: int = 64
    mode: str = "fullres"
    position_lr_final_ratio: float = 0.01
    spatial_scale: float = 1.0
    align_source: str = "photo"
    checkpoint_every: int = 0
    log_every: int = 50
    out_dir: str | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.align_source not in ("photo", "render"):
            raise ConfigError("align_source must be 'photo' or 'render'")
        defaults = {
            "decoder": {"decoder": 1e-4},
            "geometry": dict(GEOMETRY_LR),
            "style": {"features": 2.5e-3, "mlp": 2.5e-3},
        }[self.stage]
        unknown = set(self.lr) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown learning-rate groups for stage {self.stage}: {sorted(unknown)}")
        self.lr = {**defaults, **self.lr}

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses


def loss_photometric(render: Tensor, target, lambda_ssim: float = 0.2) -> Tensor:
    target = Tensor(np.asarray(target, dtype=render.dtype))
    l1 = ad.l1(render, target)
    if lambda_ssim == 0:
        return l1
    dssim = ad.add_scalar(ad.scale(ad.ssim(render, target), -1.0), 1.0)
    return ad.total([(1.0 - lambda_ssim, l1), (lambda_ssim, dssim)])


def align_target(content_image, encoder, arch: EncoderArch, mode: str = "fullres") -> np.ndarray:
    """Normalized encoder features of a photograph; a constant training target."""
    return ad.normalize(encode(np.asarray(content_image, np.float32), encoder, arch, mode)).value


def loss_align(expanded: Tensor, target) -> Tensor:
    return ad.mse(expanded, Tensor(np.asarray(target, dtype=expanded.dtype)))


def loss_content(output_feat: Tensor, adain_target) -> Tensor:
    """Distance between the re-encoded output and the AdaIN feature it came from.

    The AdaIN feature is used as a fixed target.
    """
    t = adain_target.detach() if isinstance(adain_target, Tensor) else Tensor(adain_target)
    return ad.mse(output_feat, t)


StyleTargets = dict[str, StyleCode]


def style_targets(style, encoder, arch: EncoderArch, mode: str = "fullres") -> StyleTargets:
    _, taps = encode(np.asarray(style, np.float32), encoder, arch, mode, taps=True)
    out = {}
    for name, t in taps.items():
        st = ad.channel_stats(t)
        out[name] = StyleCode(st.mean.value, st.std.value)
    return out


def loss_style_taps(taps: Mapping[str, Tensor], targets: StyleTargets) -> Tensor:
    terms = []
    for name, code in targets.items():
        st = ad.channel_stats(taps[name])
        terms.append((1.0, ad.mse(st.mean, Tensor(code.mean))))
        terms.append((1.0, ad.mse(st.std, Tensor(code.std))))
    return ad.total(terms)


def loss_style(decoded: Tensor, style, encoder, arch: EncoderArch, mode: str = "fullres") -> Tensor:
    """Sum over relu1_1..relu4_1 of mean squared gaps between channel means and stds."""
    _, taps = encode(decoded, encoder, arch, mode, taps=True)
    return loss_style_taps(taps, style_targets(style, encoder, arch, mode))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    err = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if err == 0 else -10.0 * math.log10(err)


# ---------------------------------------------------------------------------
# bookkeeping


class _EpochSampler:
    """Uniform sampling as fixed-seed shuffled passes over ``n`` items."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng, self.queue = n, rng, []

    def __call__(self) -> int:
        if not self.queue:
            self.queue = list(self.rng.permutation(self.n))
        return int(self.queue.pop())


class _Recorder:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.records: list[dict] = []
        self.stage_dir = None
        self._log = None
        if config.out_dir:
            root = Path(config.out_dir)
            root.mkdir(parents=True, exist_ok=True)
            self.stage_dir = root / f"stage-{STAGE_NUMBER[config.stage]}"
            self._log = open(root / "train_log.jsonl", "a")

    def record(self, it: int, **scalars) -> None:
        rec = {"stage": self.config.stage, "iter": it, **{k: float(v) for k, v in scalars.items()}}
        self.records.append(rec)
        if self._log is not None:
            self._log.write(json.dumps(rec) + "\n")
        if self.config.log_every and it % self.config.log_every == 0:
            log.info("%s iter %d: %s", self.config.stage, it,
                     ", ".join(f"{k}={v:.5g}" for k, v in scalars.items()))

    def checkpoint_due(self, it: int) -> bool:
        c = self.config
        return self.stage_dir is not None and (
            it == c.iterations or (c.checkpoint_every and it % c.checkpoint_every == 0))

    def iter_dir(self, it: int) -> Path:
        d = self.stage_dir / f"iter-{it}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
            self._log = None


def _tensors(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def _random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    if h < size or w < size:
        raise ConfigError(f"image {w}x{h} smaller than crop size {size}")
    i = int(rng.integers(0, h - size + 1))
    j = int(rng.integers(0, w - size + 1))
    return img[:, i:i + size, j:j + size]


# ---------------------------------------------------------------------------
# stage 1: decoder


def pretrain_decoder(config: TrainConfig, contents: Sequence[np.ndarray], styles: Sequence[np.ndarray],
                     encoder: Mapping[str, np.ndarray], arch: EncoderArch,
                     decoder: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Train only the decoder; returns new decoder weights and the loss log."""
    if config.stage != "decoder":
        raise ConfigError("pretrain_decoder needs a 'decoder' stage config")
    if not contents or not styles:
        raise ConfigError("decoder pre-training needs at least one content and one style image")
    rng = np.random.default_rng(config.seed)
    pick_c, pick_s = _EpochSampler(len(contents), rng), _EpochSampler(len(styles), rng)
    params = {k: np.array(v, np.float32, copy=True) for k, v in decoder.items()}
    state = AdamState()
    rec = _Recorder(config)
    try:
        for it in range(1, config.iterations + 1):
            c = _random_crop(contents[pick_c()], config.crop, rng)
            s = _random_crop(styles[pick_s()], config.crop, rng)
            fc = encode(c, encoder, arch, config.mode)
            targets = style_targets(s, encoder, arch, config.mode)
            code = targets["relu4_1"]
            t = adain(ad.normalize(fc), code)
            dec = _tensors(params)
            out = decode(t, dec, arch, config.mode)
            feat, taps = encode(out, encoder, arch, config.mode, taps=True)
            l_c = loss_content(feat, t)
            l_s = loss_style_taps(taps, targets)
            loss = ad.total([(1.0, l_c), (config.style_weight_2d, l_s)])
            loss.backward()
            adam_step(params, {k: v.grad for k, v in dec.items()}, state, config.lr["decoder"])
            rec.record(it, loss=loss.item(), content=l_c.item(), style=l_s.item())
            if rec.checkpoint_due(it):
                save_weights(rec.iter_dir(it) / "decoder", params,
                             {"arch": arch.to_dict(), "mode": config.mode, "kind": "decoder"})
    finally:
        rec.close()
    return params, rec.records


# ---------------------------------------------------------------------------
# stage 2: geometry


def _position_lr(config: TrainConfig, it: int) -> float:
    lr0 = config.lr["means"] * config.spatial_scale
    lr1 = lr0 * config.position_lr_final_ratio
    t = min(1.0, (it - 1) / max(1, config.iterations - 1))
    return float(np.exp((1 - t) * np.log(lr0) + t * np.log(lr1)))


def pretrain_geometry(config: TrainConfig, scene: SceneDataset,
                      init: GaussianSet) -> tuple[GaussianSet, list[dict]]:
    """Fit geometry and SH colour to the scene photographs; features are left as they are."""
    if config.stage != "geometry":
        raise ConfigError("pretrain_geometry needs a 'geometry' stage config")
    if len(scene) == 0:
        raise ConfigError("geometry pre-training needs at least one view")
    rng = np.random.default_rng(config.seed)
    pick = _EpochSampler(len(scene), rng)
    g = init.copy()
    # geometry-only view: no feature channels are composited in this stage
    work = replace(g, features=np.zeros((len(g), 0), g.dtype))
    params = {k: getattr(work, k) for k in ("means", "quats", "log_scales", "opacity_logits")}
    params["sh_dc"] = work.sh[:, :1]
    params["sh_rest"] = work.sh[:, 1:]
    state = AdamState()
    rec = _Recorder(config)
    try:
        for it in range(1, config.iterations + 1):
            v = pick()
            cam, target = scene.cameras[v], scene.images[v]
            out = rasterize(work, cam)
            img = Tensor(out.color, requires_grad=True)
            loss = loss_photometric(img, target, config.lambda_ssim)
            loss.backward()
            gr = rasterize_backward(work, cam, img.grad, np.zeros((0, cam.height, cam.width), g.dtype))
            grads = {"means": gr.means, "quats": gr.quats, "log_scales": gr.log_scales,
                     "opacity_logits": gr.opacity_logits,
                     "sh_dc": gr.sh[:, :1], "sh_rest": gr.sh[:, 1:]}
            lrs = dict(config.lr)
            lrs["means"] = _position_lr(config, it)
            adam_step(params, grads, state, lrs)
            rec.record(it, loss=loss.item(), psnr=psnr(out.color, target), view=v)
            if rec.checkpoint_due(it):
                save_gaussians(replace(g, **{k: getattr(work, k) for k in GEOMETRY_FIELDS}),
                               rec.iter_dir(it) / "gaussians.ply")
    finally:
        rec.close()
    return replace(g, **{k: getattr(work, k).copy() for k in GEOMETRY_FIELDS}), rec.records


# ---------------------------------------------------------------------------
# stage 3: style


@dataclass
class StyleTrainResult:
    gaussians: GaussianSet
    mlp: dict[str, np.ndarray]
    log: list[dict]


def train_style(config: TrainConfig, scene: SceneDataset, geometry: GaussianSet,
                encoder: Mapping[str, np.ndarray], decoder: Mapping[str, np.ndarray],
                arch: EncoderArch, styles: Sequence[np.ndarray],
                mlp: Mapping[str, np.ndarray] | None = None,
                feature_dim: int | None = None,
                on_iteration: Callable[[int, dict], None] | None = None) -> StyleTrainResult:
    """Learn per-Gaussian features and the expansion MLP on a frozen geometry.

    Loss: align + lambda1 * content + lambda2 * style, with the decoder and
    encoder frozen. Only ``features`` and the MLP change.
    """
    if config.stage != "style":
        raise ConfigError("train_style needs a 'style' stage config")
    if len(scene) == 0 or not styles:
        raise ConfigError("style training needs views and at least one style image")
    if not encoder or not decoder:
        raise ConfigError("style training needs pre-trained encoder and decoder weights")
    rng = np.random.default_rng(config.seed)
    d = feature_dim or geometry.feature_dim
    g = geometry.copy()
    if not g.features_present or g.feature_dim != d:
        g = g.with_features((0.1 * rng.standard_normal((len(g), d))).astype(g.dtype))
    mlp_params = ({k: np.array(v, np.float32, copy=True) for k, v in mlp.items()} if mlp is not None
                  else init_mlp(d, arch.out_channels, rng))
    for k, shape in mlp_schema(d, arch.out_channels).items():
        if mlp_params[k].shape != shape:
            raise ConfigError(f"MLP entry {k!r} has shape {mlp_params[k].shape}, expected {shape}")

    blends = [blend_weights(g, cam) for cam in scene.cameras]
    if config.align_source == "photo":
        sources = scene.images
    else:
        sources = [rasterize(replace(g, features=g.features[:, :0]), cam).color for cam in scene.cameras]
    targets = [align_target(img, encoder, arch, config.mode) for img in sources]
    style_tgts = [style_targets(s, encoder, arch, config.mode) for s in styles]

    pick_v, pick_s = _EpochSampler(len(scene), rng), _EpochSampler(len(styles), rng)
    params = {"features": g.features, **mlp_params}
    lrs = {"features": config.lr["features"], **{k: config.lr["mlp"] for k in mlp_params}}
    state = AdamState()
    rec = _Recorder(config)
    try:
        for it in range(1, config.iterations + 1):
            v, si = pick_v(), pick_s()
            fmap = Tensor(blends[v].render(g.features), requires_grad=True)
            mt = {k: Tensor(params[k], requires_grad=True) for k in mlp_params}
            expanded = expand_feature(fmap, mt)
            l_align = loss_align(expanded, targets[v])
            terms = [(1.0, l_align)]
            scalars = {"align": l_align.item()}
            if config.lambda1 > 0 or config.lambda2 > 0:
                tg = style_tgts[si]
                t = adain(expanded, tg["relu4_1"])
                out = decode(t, decoder, arch, config.mode)
                feat, taps = encode(out, encoder, arch, config.mode, taps=True)
                l_c = loss_content(feat, t)
                l_s = loss_style_taps(taps, tg)
                terms += [(config.lambda1, l_c), (config.lambda2, l_s)]
                scalars.update(content=l_c.item(), style=l_s.item())
            loss = ad.total(terms)
            loss.backward()
            grads = {"features": blends[v].backward(fmap.grad, len(g)),
                     **{k: mt[k].grad for k in mlp_params}}
            adam_step(params, grads, state, lrs)
            scalars["loss"] = loss.item()
            rec.record(it, view=v, style_index=si, **scalars)
            if on_iteration is not None:
                on_iteration(it, scalars)
            if rec.checkpoint_due(it):
                d_ = rec.iter_dir(it)
                save_gaussians(g, d_ / "gaussians.ply")
                save_weights(d_ / "mlp", mlp_params, {"kind": "mlp", "feature_dim": d,
                                                      "out_dim": arch.out_channels})
    finally:
        rec.close()
    return StyleTrainResult(g, mlp_params, rec.records)


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, np.float64)
    if len(v) < window:
        return np.array([v.mean()])
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window
