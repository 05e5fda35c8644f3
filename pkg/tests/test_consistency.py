import numpy as np
import pytest
from jsonschema import ValidationError

from splatstyle.consistency import (MatchSet, UndefinedMetricError, ablation_compare, build_matches,
                                    consistency_rmse, validate_report)
from splatstyle.gaussians import GaussianSet
from splatstyle.sceneio import Camera
from splatstyle.stylizer import TINY, StyleModel, init_decoder, init_encoder, init_mlp
from splatstyle.toy import style_image, toy_cameras, toy_gaussians


@pytest.fixture(scope="module")
def scene():
    g = toy_gaussians(feature_dim=6)
    g = g.with_features(np.random.default_rng(0).standard_normal((len(g), 6)).astype(np.float32))
    return g, toy_cameras(3, 24)


def _wall(z=-3.0):
    # a dense opaque plane of small Gaussians facing +z
    u, v = np.meshgrid(np.linspace(-3, 3, 61), np.linspace(-3, 3, 61))
    means = np.stack([u.ravel(), v.ravel(), np.full(u.size, z)], 1)
    return GaussianSet.create(means, scales=np.tile([0.08, 0.08, 0.005], (len(means), 1)), opacity=0.99,
                              sh_degree=0, dtype=np.float64)


def test_a_view_matches_itself_pixel_for_pixel(scene):
    g, cams = scene
    m = build_matches(g, cams[0], cams[0])
    assert len(m) > 0
    np.testing.assert_array_equal(m.pix_a, m.pix_b)


def test_shifted_camera_over_a_plane_matches_by_the_analytic_disparity():
    # a camera translated sideways by b over a plane at depth z shifts pixels by fx * b / z
    size, f, z, b = 16, 16.0, 3.0, 0.375
    cam_a = Camera(np.eye(4), f, f, 7.5, 7.5, size, size)
    pose = np.eye(4)
    pose[0, 3] = b
    cam_b = Camera(pose, f, f, 7.5, 7.5, size, size)
    m = build_matches(_wall(-z), cam_a, cam_b)
    assert len(m) > 100
    np.testing.assert_array_equal(m.pix_b[:, 0], m.pix_a[:, 0])
    np.testing.assert_array_equal(m.pix_b[:, 1], m.pix_a[:, 1] - int(f * b / z))


def test_views_facing_away_have_no_matches():
    cam_a = Camera(np.eye(4), 10, 10, 4.5, 4.5, 10, 10)
    turned = np.diag([-1.0, 1.0, -1.0, 1.0])
    cam_b = Camera(turned, 10, 10, 4.5, 4.5, 10, 10)
    m = build_matches(_wall(), cam_a, cam_b)
    assert len(m) == 0
    with pytest.raises(UndefinedMetricError):
        consistency_rmse(np.zeros((3, 10, 10)), np.zeros((3, 10, 10)), m)


def test_rmse_is_symmetric_under_reversal(scene):
    g, cams = scene
    m = build_matches(g, cams[0], cams[1])
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((2, 3, 24, 24))
    assert consistency_rmse(a, b, m) == consistency_rmse(b, a, m.reversed())
    assert m.reversed().reversed().pairs() == m.pairs()


def test_rmse_of_a_constant_offset_and_a_channel_scaling():
    m = MatchSet(0, 1, np.array([[0, 0], [1, 2]]), np.array([[2, 2], [0, 1]]))
    a = np.random.default_rng(1).uniform(0, 1, (3, 4, 4))
    b = a.copy()
    b[:, 2, 2] = a[:, 0, 0] + 0.1
    b[:, 0, 1] = a[:, 1, 2] + 0.1
    assert consistency_rmse(a, b, m) == pytest.approx(0.1)
    w = np.array([2.0, 2.0, 2.0])
    assert consistency_rmse(a, b, m, channel_weights=w) == pytest.approx(0.2)
    # scaling both sides by s scales the metric by s
    assert consistency_rmse(3 * a, 3 * b, m) == pytest.approx(0.3)


def test_ablation_report_is_valid_and_reproducible(scene):
    g, cams = scene
    rng = np.random.default_rng(2)
    model = StyleModel(TINY, init_encoder(TINY, rng), init_decoder(TINY, rng), init_mlp(6, 128, rng))
    styles = {"s0": style_image(0, 16), "s1": style_image(1, 16)}
    r1 = ablation_compare(g, cams, styles, model, [(0, 1), (1, 2)])
    r2 = ablation_compare(g, cams, styles, model, [(0, 1), (1, 2)])
    assert r1 == r2
    assert len(r1["entries"]) == 2 * 2 * 2
    assert r1["summary"]["ratio_feature"] is not None
    one = ablation_compare(g, cams, styles, model, [(0, 1)], variants=["integrated"])
    assert one["summary"]["ratio_rgb"] is None
    with pytest.raises(ValueError):
        ablation_compare(g, cams, styles, model, [(0, 1)], variants=["other"])


def test_identical_outputs_give_zero_rmse(scene):
    g, cams = scene
    m = build_matches(g, cams[1], cams[1])
    x = np.random.default_rng(3).standard_normal((4, 24, 24))
    assert consistency_rmse(x, x, m) == 0.0


def test_report_schema_rejects_malformed_entries():
    entry = {"variant": "integrated", "rmse_rgb": 0.1, "rmse_feature": 0.2, "n_matches": 5,
             "views": [0, 1], "style": "a"}
    validate_report({"entries": [entry], "summary": {}})
    for bad in ({**entry, "variant": "other"}, {**entry, "n_matches": 0}, {**entry, "views": [0]},
                {**entry, "extra": 1}):
        with pytest.raises(ValidationError):
            validate_report({"entries": [bad], "summary": {}})
