"""Encoder, feature expansion, AdaIN and decoder.

The encoder is a VGG-style stack cut at ``relu4_1``. Each of its first three
stages ends in a 2x2 max-pool in ``pooled`` mode; in ``fullres`` mode those
pools are identities and the resolution is kept end to end. The decoder
mirrors the encoder, with nearest-neighbour doubling (or identity) in place
of the pools and a linear last layer.

Parameter names (all float32)::

    conv{s}_{k}.weight  (out, in, 3, 3)   conv{s}_{k}.bias  (out,)   encoder
    dec{s}_{k}.weight   (out, in, 3, 3)   dec{s}_{k}.bias   (out,)   decoder
    mlp.weight          (C, D)            mlp.bias          (C,)     expansion

See :func:`encoder_schema`, :func:`decoder_schema` and :func:`mlp_schema`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sceneio import NetWeights, WeightValidationError

MODES = ("fullres", "pooled")


@dataclass(frozen=True)
class EncoderArch:
    """Channel width and number of 3x3 convolutions for each of the four stages."""

    widths: tuple[int, int, int, int] = (64, 128, 256, 512)
    convs: tuple[int, int, int, int] = (2, 2, 4, 1)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def encoder_layers(self) -> list[tuple[str, int, int]]:
        """``(name, in, out)`` for every encoder convolution, in order."""
        layers, cin = [], 3
        for s, (w, n) in enumerate(zip(self.widths, self.convs), start=1):
            for k in range(1, n + 1):
                layers.append((f"conv{s}_{k}", cin, w))
                cin = w
        return layers

    def decoder_layers(self) -> list[tuple[str, int, int]]:
        layers = []
        widths = (3,) + tuple(self.widths)
        for s in range(4, 0, -1):
            w, below = widths[s], widths[s - 1]
            n = 1 if s == 4 else self.convs[s - 1]
            for k in range(1, n + 1):
                out = below if k == n else w
                layers.append((f"dec{s}_{k}", w, out))
        return layers

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "convs": list(self.convs)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderArch":
        return cls(tuple(d["widths"]), tuple(d["convs"]))


VGG19_RELU4 = EncoderArch()
TINY = EncoderArch((16, 32, 64, 128), (1, 1, 1, 1))


def _conv_schema(layers) -> dict[str, tuple[int, ...]]:
    out = {}
    for name, cin, cout in layers:
        out[f"{name}.weight"] = (cout, cin, 3, 3)
        out[f"{name}.bias"] = (cout,)
    return out


def encoder_schema(arch: EncoderArch) -> dict[str, tuple[int, ...]]:
    return _conv_schema(arch.encoder_layers())


def decoder_schema(arch: EncoderArch) -> dict[str, tuple[int, ...]]:
    return _conv_schema(arch.decoder_layers())


def mlp_schema(in_dim: int, out_dim: int) -> dict[str, tuple[int, ...]]:
    return {"mlp.weight": (out_dim, in_dim), "mlp.bias": (out_dim,)}


def _init_convs(schema, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in schema.items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            out[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        else:
            out[name] = np.zeros(shape, np.float32)
    return out


def init_encoder(arch: EncoderArch, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return _init_convs(encoder_schema(arch), rng)


def init_decoder(arch: EncoderArch, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return _init_convs(decoder_schema(arch), rng)


def init_mlp(in_dim: int, out_dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "mlp.weight": (rng.standard_normal((out_dim, in_dim)) * np.sqrt(2.0 / in_dim)).astype(np.float32),
        "mlp.bias": np.zeros(out_dim, np.float32),
    }


def _params(weights) -> Mapping:
    return weights.params if isinstance(weights, NetWeights) else weights


def _check(weights, schema, what) -> None:
    for name, shape in schema.items():
        if name not in weights:
            raise WeightValidationError(f"{what}: missing weight entry {name!r}")
        if tuple(weights[name].shape) != tuple(shape):
            raise WeightValidationError(
                f"{what}: weight entry {name!r} has shape {tuple(weights[name].shape)}, expected {shape}")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


def encode(image, weights, arch: EncoderArch, mode: str = "fullres",
           taps: bool = False):
    """Run the encoder to ``relu4_1``.

    Returns the final feature tensor, or ``(feature, {tap_name: tensor})`` with
    taps ``relu1_1 .. relu4_1`` when ``taps`` is set.
    """
    _mode(mode)
    weights = _params(weights)
    _check(weights, encoder_schema(arch), "encoder")
    x = _t(image)
    if x.shape[0] != 3:
        raise ad.ShapeError(f"encode: expected a 3-channel image, got {x.shape}")
    tapped: dict[str, Tensor] = {}
    for name, _, _ in arch.encoder_layers():
        s, k = name[4:].split("_")
        if k == "1" and s != "1" and mode == "pooled":
            x = ad.maxpool2(x)
        x = ad.relu(ad.conv2d(x, _t(weights[f"{name}.weight"]), _t(weights[f"{name}.bias"])))
        if k == "1":
            tapped[f"relu{s}_1"] = x
    return (x, tapped) if taps else x


def decode(feat, weights, arch: EncoderArch, mode: str = "fullres") -> Tensor:
    """Map a ``relu4_1``-space feature map back to an RGB grid (unclamped)."""
    _mode(mode)
    weights = _params(weights)
    _check(weights, decoder_schema(arch), "decoder")
    x = _t(feat)
    if x.shape[0] != arch.out_channels:
        raise ad.ShapeError(f"decode: expected {arch.out_channels} channels, got {x.shape[0]}")
    layers = arch.decoder_layers()
    for i, (name, _, cout) in enumerate(layers):
        x = ad.conv2d(x, _t(weights[f"{name}.weight"]), _t(weights[f"{name}.bias"]))
        if i == len(layers) - 1:
            break
        x = ad.relu(x)
        s = int(name[3])
        next_stage = int(layers[i + 1][0][3])
        if next_stage != s and mode == "pooled":
            x = ad.upsample2(x)
    return x


def expand_feature(feat, mlp) -> Tensor:
    """Per-pixel ``relu(W f + b)`` lifting a D-channel map to the encoder width."""
    mlp = _params(mlp)
    x = _t(feat)
    w = _t(mlp["mlp.weight"])
    if w.shape[1] != x.shape[0]:
        raise ad.ShapeError(f"expand_feature: MLP expects {w.shape[1]} channels, got {x.shape[0]}")
    return ad.relu(ad.dense(x, w, _t(mlp["mlp.bias"])))


class StyleCode(NamedTuple):
    mean: np.ndarray
    std: np.ndarray


def compute_style_code(style, encoder, arch: EncoderArch, mode: str = "fullres") -> StyleCode:
    feat = encode(np.asarray(style, dtype=np.float32) if not isinstance(style, Tensor) else style,
                  encoder, arch, mode)
    st = ad.channel_stats(feat.detach())
    return StyleCode(st.mean.value, st.std.value)


def adain(feat, code: StyleCode) -> Tensor:
    """``std(style) * feat + mean(style)``; the input is not re-normalized here."""
    x = _t(feat)
    if x.shape[0] != len(code.mean):
        raise ad.ShapeError(f"adain: feature has {x.shape[0]} channels, style code {len(code.mean)}")
    return ad.affine_channel(x, Tensor(code.std.astype(x.dtype)), Tensor(code.mean.astype(x.dtype)))


@dataclass
class StyleModel:
    """Everything needed to stylize a rendered feature map."""

    arch: EncoderArch
    encoder: dict[str, np.ndarray]
    decoder: dict[str, np.ndarray]
    mlp: dict[str, np.ndarray]
    mode: str = "fullres"
    _codes: dict = field(default_factory=dict, repr=False, compare=False)

    def style_code(self, style: np.ndarray) -> StyleCode:
        key = (style.shape, style.tobytes())
        if key not in self._codes:
            self._codes[key] = compute_style_code(style, self.encoder, self.arch, self.mode)
        return self._codes[key]


def stylize_feature_map(feature: np.ndarray, model: StyleModel, code: StyleCode,
                        renormalize: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Expanded+stylized feature and decoded image for one rasterized feature map.

    ``renormalize`` applies a per-view normalization before AdaIN (the
    view-specific variant used for comparison).
    """
    expanded = expand_feature(feature, model.mlp)
    if renormalize:
        expanded = ad.normalize(expanded)
    stylized = adain(expanded, code)
    image = decode(stylized, model.decoder, model.arch, model.mode)
    return stylized.value, image.value


def stylize_view(gaussians, cam, style: np.ndarray, model: StyleModel,
                 renormalize: bool = False) -> np.ndarray:
    """Render, expand, restyle and decode one view; returns an unclamped (3, H, W) image."""
    from .rasterizer import rasterize

    out = rasterize(gaussians, cam)
    return stylize_feature_map(out.feature, model, model.style_code(style), renormalize)[1]


# ---------------------------------------------------------------------------
# published-weight conversion

# positions of the convolutions inside the commonly distributed sequential
# VGG (with a leading 1x1 colour conv) and decoder used for AdaIN
VGG_SEQUENTIAL_CONVS = {0: "conv0", 2: "conv1_1", 5: "conv1_2", 9: "conv2_1", 12: "conv2_2",
                        16: "conv3_1", 19: "conv3_2", 22: "conv3_3", 25: "conv3_4", 29: "conv4_1"}
DECODER_SEQUENTIAL_CONVS = {1: "dec4_1", 5: "dec3_1", 8: "dec3_2", 11: "dec3_3", 14: "dec3_4",
                            18: "dec2_1", 21: "dec2_2", 25: "dec1_1", 28: "dec1_2"}


def fold_input_conv(w0, b0, w1, b1) -> tuple[np.ndarray, np.ndarray]:
    """Fold a pointwise ``(3, 3, 1, 1)`` colour conv into the following 3x3 conv.

    Exact under reflection padding, since padding commutes with a pointwise map.
    """
    m = np.asarray(w0, dtype=np.float64).reshape(w0.shape[0], w0.shape[1])
    w1 = np.asarray(w1, dtype=np.float64)
    w = np.einsum("ojhw,ji->oihw", w1, m)
    b = np.asarray(b1, dtype=np.float64) + np.einsum("ojhw,j->o", w1, np.asarray(b0, dtype=np.float64))
    return w.astype(np.float32), b.astype(np.float32)


def convert_sequential_vgg(state: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Encoder weights from a ``{"<index>.weight": array, ...}`` sequential VGG dump."""
    convs = {name: (np.asarray(state[f"{i}.weight"]), np.asarray(state[f"{i}.bias"]))
             for i, name in VGG_SEQUENTIAL_CONVS.items()}
    out = {}
    for name, (w, b) in convs.items():
        if name == "conv0":
            continue
        if name == "conv1_1":
            w, b = fold_input_conv(*convs["conv0"], w, b)
        out[f"{name}.weight"] = np.asarray(w, np.float32)
        out[f"{name}.bias"] = np.asarray(b, np.float32)
    _check(out, encoder_schema(VGG19_RELU4), "converted encoder")
    return out


def convert_sequential_decoder(state: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for i, name in DECODER_SEQUENTIAL_CONVS.items():
        out[f"{name}.weight"] = np.asarray(state[f"{i}.weight"], np.float32)
        out[f"{name}.bias"] = np.asarray(state[f"{i}.bias"], np.float32)
    _check(out, decoder_schema(VGG19_RELU4), "converted decoder")
    return out
