import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splatstyle import autodiff as ad
from splatstyle.autodiff import ShapeError, Tensor
from splatstyle.sceneio import WeightValidationError
from splatstyle.stylizer import (DECODER_SEQUENTIAL_CONVS, TINY, VGG19_RELU4, VGG_SEQUENTIAL_CONVS, EncoderArch,
                                 StyleCode, StyleModel, adain, compute_style_code, convert_sequential_decoder,
                                 convert_sequential_vgg, decode, decoder_schema, encode, encoder_schema,
                                 expand_feature, fold_input_conv, init_decoder, init_encoder, init_mlp,
                                 stylize_feature_map)


@pytest.fixture(scope="module")
def nets():
    rng = np.random.default_rng(0)
    return init_encoder(TINY, rng), init_decoder(TINY, rng), init_mlp(8, TINY.out_channels, rng)


def test_arch_layer_names_and_round_trip():
    assert [n for n, _, _ in VGG19_RELU4.encoder_layers()][-1] == "conv4_1"
    assert len(VGG19_RELU4.encoder_layers()) == 9
    assert EncoderArch.from_dict(TINY.to_dict()) == TINY
    assert encoder_schema(VGG19_RELU4)["conv4_1.weight"] == (512, 256, 3, 3)
    assert decoder_schema(VGG19_RELU4)["dec1_2.weight"] == (3, 64, 3, 3)


@pytest.mark.parametrize("size", [8, 13, 21, 32, 47, 64])
def test_fullres_preserves_spatial_size(nets, size):
    enc, dec, _ = nets
    img = np.random.default_rng(size).uniform(0, 1, (3, size, size + 3)).astype(np.float32)
    feat = encode(img, enc, TINY, "fullres")
    assert feat.shape == (128, size, size + 3)
    assert decode(feat, dec, TINY, "fullres").shape == (3, size, size + 3)


@pytest.mark.parametrize("size", [16, 32, 64])
def test_pooled_mode_reduces_by_eight(nets, size):
    enc, dec, _ = nets
    img = np.zeros((3, size, size), np.float32)
    feat, taps = encode(img, enc, TINY, "pooled", taps=True)
    assert feat.shape == (128, size // 8, size // 8)
    assert [taps[f"relu{s}_1"].shape[1] for s in range(1, 5)] == [size, size // 2, size // 4, size // 8]
    assert decode(feat, dec, TINY, "pooled").shape == (3, size, size)


def test_encode_rejects_wrong_inputs(nets):
    enc, dec, _ = nets
    with pytest.raises(ShapeError):
        encode(np.zeros((1, 8, 8)), enc, TINY)
    with pytest.raises(ValueError):
        encode(np.zeros((3, 8, 8)), enc, TINY, mode="half")
    with pytest.raises(WeightValidationError):
        encode(np.zeros((3, 8, 8)), {k: v for k, v in enc.items() if k != "conv2_1.bias"}, TINY)
    with pytest.raises(ShapeError):
        decode(np.zeros((7, 8, 8)), dec, TINY)


def test_adain_of_normalized_input_hits_the_style_code():
    rng = np.random.default_rng(1)
    x = ad.normalize(Tensor(rng.standard_normal((6, 9, 11)) * 3 + 2))
    code = StyleCode(rng.standard_normal(6), rng.uniform(0.1, 2, 6))
    st_ = ad.channel_stats(adain(x, code))
    np.testing.assert_allclose(st_.mean.value, code.mean, atol=1e-5)
    np.testing.assert_allclose(st_.std.value, code.std, atol=1e-5)


def test_adain_with_unit_code_is_bitwise_identity():
    x = np.random.default_rng(2).standard_normal((4, 5, 5)).astype(np.float32)
    out = adain(Tensor(x), StyleCode(np.zeros(4, np.float32), np.ones(4, np.float32))).value
    assert np.array_equal(out, x)


def test_adain_channel_mismatch():
    with pytest.raises(ShapeError):
        adain(Tensor(np.zeros((3, 2, 2))), StyleCode(np.zeros(4), np.ones(4)))


@given(st.integers(0, 1000))
def test_expand_and_adain_act_per_pixel(seed):
    rng = np.random.default_rng(seed)
    mlp = init_mlp(5, 7, rng)
    code = StyleCode(rng.standard_normal(7), rng.uniform(0.1, 2, 7))
    f = rng.standard_normal((5, 4, 6))
    perm = rng.permutation(24)
    permute = lambda a: a.reshape(a.shape[0], -1)[:, perm].reshape(a.shape)  # noqa: E731
    y = adain(expand_feature(f, mlp), code).value
    y_p = adain(expand_feature(permute(f), mlp), code).value
    np.testing.assert_allclose(y_p, permute(y), rtol=1e-12, atol=1e-12)


def test_expand_feature_checks_width():
    with pytest.raises(ShapeError):
        expand_feature(np.zeros((4, 2, 2)), init_mlp(5, 3, np.random.default_rng(0)))


def test_fold_input_conv_equals_two_layer_stack():
    rng = np.random.default_rng(3)
    w0, b0 = rng.standard_normal((3, 3, 1, 1)), rng.standard_normal(3)
    w1, b1 = rng.standard_normal((5, 3, 3, 3)), rng.standard_normal(5)
    x = rng.uniform(0, 1, (3, 7, 6))
    # the 1x1 conv as an explicit per-pixel matrix product, then the 3x3 conv
    mid = np.einsum("oi,ihw->ohw", w0[:, :, 0, 0], x) + b0[:, None, None]
    ref = ad.conv2d(Tensor(mid), Tensor(w1), Tensor(b1)).value
    wf, bf = fold_input_conv(w0, b0, w1, b1)
    out = ad.conv2d(Tensor(x), Tensor(wf.astype(np.float64)), Tensor(bf.astype(np.float64))).value
    np.testing.assert_allclose(out, ref, atol=1e-4)


def test_sequential_converters_map_every_layer():
    rng = np.random.default_rng(4)
    enc_schema = encoder_schema(VGG19_RELU4)
    state = {"0.weight": rng.standard_normal((3, 3, 1, 1)), "0.bias": rng.standard_normal(3)}
    for idx, name in VGG_SEQUENTIAL_CONVS.items():
        if name != "conv0":
            state[f"{idx}.weight"] = rng.standard_normal(enc_schema[f"{name}.weight"]).astype(np.float32)
            state[f"{idx}.bias"] = rng.standard_normal(enc_schema[f"{name}.bias"]).astype(np.float32)
    enc = convert_sequential_vgg(state)
    assert set(enc) == set(enc_schema)
    np.testing.assert_array_equal(enc["conv4_1.weight"], state["29.weight"])
    dec_schema = decoder_schema(VGG19_RELU4)
    dstate = {}
    for idx, name in DECODER_SEQUENTIAL_CONVS.items():
        dstate[f"{idx}.weight"] = np.zeros(dec_schema[f"{name}.weight"], np.float32)
        dstate[f"{idx}.bias"] = np.zeros(dec_schema[f"{name}.bias"], np.float32)
    assert set(convert_sequential_decoder(dstate)) == set(dec_schema)


def test_style_code_and_model_cache(nets):
    enc, dec, mlp = nets
    style = np.random.default_rng(5).uniform(0, 1, (3, 16, 16)).astype(np.float32)
    model = StyleModel(TINY, enc, dec, mlp)
    code = model.style_code(style)
    ref = compute_style_code(style, enc, TINY)
    np.testing.assert_array_equal(code.mean, ref.mean)
    assert model.style_code(style) is code


def test_renormalize_variant_matches_code_exactly(nets):
    enc, dec, mlp = nets
    rng = np.random.default_rng(6)
    model = StyleModel(TINY, enc, dec, mlp)
    code = model.style_code(rng.uniform(0, 1, (3, 16, 16)).astype(np.float32))
    feat = rng.standard_normal((8, 10, 10)).astype(np.float32)
    stylized, img = stylize_feature_map(feat, model, code, renormalize=True)
    live = ad.channel_stats(Tensor(expand_feature(feat, mlp).value)).std.value > 1e-3
    st_ = ad.channel_stats(Tensor(stylized))
    np.testing.assert_allclose(st_.mean.value[live], code.mean[live], atol=1e-4)
    np.testing.assert_allclose(st_.std.value[live], code.std[live], rtol=1e-3)
    assert img.shape == (3, 10, 10)
