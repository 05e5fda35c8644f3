"""Finite-difference checks shared by the unit tests and the acceptance suite.

Every check runs in float64. A scalar probe ``sum(out * R)`` with a fixed
random ``R`` turns any op into a scalar function; its analytic gradient is
compared norm-wise against central differences.
"""
import numpy as np

from oracles import numeric_grad, rel_err
from splatstyle import autodiff as ad
from splatstyle.autodiff import Tensor

NET_TOL = 1e-3
GEOMETRY_TOL = 2e-2


def _grid(rng, c=2, h=5, w=6):
    return rng.standard_normal((c, h, w))


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _ssim_pair(rng):
    a = rng.uniform(0, 1, (2, 8, 9))
    return {"a": a, "b": np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)}


# name -> (inputs builder, function of Tensors)
OPS = {
    "add": (lambda r: {"a": _grid(r), "b": _grid(r)}, lambda t: ad.add(t["a"], t["b"])),
    "sub": (lambda r: {"a": _grid(r), "b": _grid(r)}, lambda t: ad.sub(t["a"], t["b"])),
    "mul": (lambda r: {"a": _grid(r), "b": _grid(r)}, lambda t: ad.mul(t["a"], t["b"])),
    "div": (lambda r: {"a": _grid(r), "b": _positive(r, (2, 5, 6))}, lambda t: ad.div(t["a"], t["b"])),
    "scale": (lambda r: {"a": _grid(r)}, lambda t: ad.scale(t["a"], -1.7)),
    "add_scalar": (lambda r: {"a": _grid(r)}, lambda t: ad.add_scalar(t["a"], 0.3)),
    "square": (lambda r: {"a": _grid(r)}, lambda t: ad.square(t["a"])),
    "abs": (lambda r: {"a": _grid(r)}, lambda t: ad.abs_(t["a"])),
    "relu": (lambda r: {"a": _grid(r)}, lambda t: ad.relu(t["a"])),
    "sum": (lambda r: {"a": _grid(r)}, lambda t: ad.sum_(t["a"])),
    "mean": (lambda r: {"a": _grid(r)}, lambda t: ad.mean(t["a"])),
    "conv2d": (lambda r: {"x": _grid(r, 3, 5, 4), "w": r.standard_normal((2, 3, 3, 3)), "b": r.standard_normal(2)},
               lambda t: ad.conv2d(t["x"], t["w"], t["b"])),
    "conv2d_thin": (lambda r: {"x": _grid(r, 2, 1, 3), "w": r.standard_normal((2, 2, 3, 3)),
                               "b": r.standard_normal(2)},
                    lambda t: ad.conv2d(t["x"], t["w"], t["b"])),
    "maxpool2": (lambda r: {"a": _grid(r, 2, 6, 5)}, lambda t: ad.maxpool2(t["a"])),
    "upsample2": (lambda r: {"a": _grid(r, 2, 3, 2)}, lambda t: ad.upsample2(t["a"])),
    "blur": (lambda r: {"a": _grid(r, 2, 7, 9)}, lambda t: ad.blur(t["a"], ad.gaussian_window(5, 1.0))),
    "channel_mean": (lambda r: {"a": _grid(r)}, lambda t: ad.channel_stats(t["a"]).mean),
    "channel_std": (lambda r: {"a": _grid(r)}, lambda t: ad.channel_stats(t["a"]).std),
    "normalize": (lambda r: {"a": _grid(r)}, lambda t: ad.normalize(t["a"])),
    "affine_channel": (lambda r: {"a": _grid(r), "s": r.standard_normal(2), "m": r.standard_normal(2)},
                       lambda t: ad.affine_channel(t["a"], t["s"], t["m"])),
    "dense": (lambda r: {"a": _grid(r, 3), "w": r.standard_normal((4, 3)), "b": r.standard_normal(4)},
              lambda t: ad.dense(t["a"], t["w"], t["b"])),
    "mse": (lambda r: {"a": _grid(r), "b": _grid(r)}, lambda t: ad.mse(t["a"], t["b"])),
    "sq_dist": (lambda r: {"a": r.standard_normal(5), "b": r.standard_normal(5)},
                lambda t: ad.sq_dist(t["a"], t["b"])),
    "l1": (lambda r: {"a": _grid(r), "b": _grid(r)}, lambda t: ad.l1(t["a"], t["b"])),
    "ssim": (_ssim_pair, lambda t: ad.ssim(t["a"], t["b"])),
}


def check_op(name: str, seed: int, h: float = 1e-5) -> float:
    """Worst relative error over the op's inputs for one seed."""
    build, fn = OPS[name]
    rng = np.random.default_rng(seed)
    arrays = build(rng)
    probe = None

    def forward(track: bool):
        nonlocal probe
        ts = {k: Tensor(v, requires_grad=track) for k, v in arrays.items()}
        out = fn(ts)
        if probe is None:
            probe = np.random.default_rng(seed + 10_000).standard_normal(out.shape)
        return ts, out

    ts, out = forward(True)
    scalar = ad.sum_(ad.mul(out, Tensor(probe)))
    scalar.backward()
    worst = 0.0
    for k, arr in arrays.items():
        num = numeric_grad(lambda: float(np.sum(forward(False)[1].value * probe)), arr, h)
        worst = max(worst, rel_err(ts[k].grad, num))
    return worst


def check_rasterizer(seed: int, n: int = 5, size: int = 6, h: float = 1e-4) -> dict[str, float]:
    """Relative error per parameter group of the full rasterizer backward."""
    from conftest import random_scene
    from splatstyle.rasterizer import rasterize, rasterize_backward

    rng = np.random.default_rng(seed)
    g, cam = random_scene(rng, n=n, size=size, feature_dim=2)
    out = rasterize(g, cam)
    pc = rng.standard_normal(out.color.shape)
    pf = rng.standard_normal(out.feature.shape)
    grads = rasterize_backward(g, cam, pc, pf).as_dict()

    def f():
        o = rasterize(g, cam)
        return float(np.sum(o.color * pc) + np.sum(o.feature * pf))

    errs = {}
    for k in ("means", "quats", "log_scales", "opacity_logits", "sh", "features"):
        num = numeric_grad(f, getattr(g, k), h)
        errs[k] = rel_err(grads[k], num)
    return errs
