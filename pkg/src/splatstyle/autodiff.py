"""Small dense-array engine with reverse-mode gradients.

Only the operations the stylization pipeline needs are provided. Grids are
``(channels, height, width)`` arrays; values keep the dtype of their inputs
(float32 in the pipeline, float64 is accepted so finite-difference checks
can run at higher precision).

A tape is built implicitly while ops run: every :class:`Tensor` remembers
its parents and a closure that pushes its gradient back to them.
:meth:`Tensor.backward` walks the graph once in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

STD_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.value = np.asarray(value)
        if self.value.dtype.kind != "f":
            self.value = self.value.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        """Propagate gradients from this node to every reachable leaf."""
        if grad is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.value)
        grad = np.broadcast_to(np.asarray(grad, dtype=self.value.dtype), self.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        # intermediate gradients are rebuilt on every call; leaves accumulate
        for node in order:
            if node._parents:
                node.grad = None
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar for the handful of elementwise ops
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.full(like.shape, x, dtype=like.dtype))
    return Tensor(np.asarray(x, dtype=like.dtype))


def tensor(value, requires_grad: bool = False) -> Tensor:
    return Tensor(value, requires_grad=requires_grad)


def _node(value, op, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, op=op,
                  parents=parents if needs else (),
                  backward=backward if needs else None)


def _push(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t._accumulate(g)


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _check_grid(x: Tensor, what: str) -> None:
    if x.value.ndim != 3:
        raise ShapeError(f"{what}: expected a (C, H, W) grid, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")

    def backward(g):
        _push(a, g)
        _push(b, g)

    return _node(a.value + b.value, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")

    def backward(g):
        _push(a, g)
        _push(b, -g)

    return _node(a.value - b.value, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")

    def backward(g):
        _push(a, g * b.value)
        _push(b, g * a.value)

    return _node(a.value * b.value, "mul", (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    out = a.value / b.value

    def backward(g):
        _push(a, g / b.value)
        _push(b, -g * out / b.value)

    return _node(out, "div", (a, b), backward)


def scale(a: Tensor, k: float) -> Tensor:
    k_ = a.value.dtype.type(k)
    return _node(a.value * k_, "scale", (a,), lambda g: _push(a, g * k_))


def add_scalar(a: Tensor, k: float) -> Tensor:
    return _node(a.value + a.value.dtype.type(k), "add_scalar", (a,), lambda g: _push(a, g))


def square(a: Tensor) -> Tensor:
    return _node(a.value * a.value, "square", (a,), lambda g: _push(a, 2 * g * a.value))


def abs_(a: Tensor) -> Tensor:
    return _node(np.abs(a.value), "abs", (a,), lambda g: _push(a, g * np.sign(a.value)))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0).astype(x.dtype), "relu", (x,),
                 lambda g: _push(x, g * mask))


def sum_(a: Tensor) -> Tensor:
    out = np.asarray(a.value.sum(dtype=np.float64), dtype=a.dtype)
    return _node(out, "sum", (a,), lambda g: _push(a, np.broadcast_to(g, a.shape)))


def mean(a: Tensor) -> Tensor:
    n = a.value.size
    out = np.asarray(a.value.sum(dtype=np.float64) / n, dtype=a.dtype)
    return _node(out, "mean", (a,), lambda g: _push(a, np.broadcast_to(g / n, a.shape)))


# ---------------------------------------------------------------------------
# convolution and resampling


def _reflect_index(n: int) -> np.ndarray:
    # source index of each padded position; a length-1 axis repeats its only entry
    return np.concatenate([[1 if n > 1 else 0], np.arange(n), [n - 2 if n > 1 else 0]])


def _reflect_pad(x: np.ndarray) -> np.ndarray:
    _, h, w = x.shape
    return x[:, _reflect_index(h)][:, :, _reflect_index(w)]


def _unpad_reflect_grad(gp: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of 1-pixel reflection padding."""
    rows = np.zeros((gp.shape[0], h, gp.shape[2]), gp.dtype)
    np.add.at(rows, (slice(None), _reflect_index(h)), gp)
    g = np.zeros((gp.shape[0], h, w), gp.dtype)
    np.add.at(g, (slice(None), slice(None), _reflect_index(w)), rows)
    return g


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    c = xp.shape[0]
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # c, h, w, 3, 3
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * 9, h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, reflection padding of one pixel (edge repeat on a 1-wide axis)."""
    _check_grid(x, "conv2d")
    if weight.value.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernel must be (out, in, 3, 3), got {weight.shape}")
    cout, cin = weight.shape[:2]
    c, h, w = x.shape
    if cin != c:
        raise ShapeError(f"conv2d: kernel expects {cin} input channels, grid has {c}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    cols = _im2col(_reflect_pad(x.value), h, w)
    wmat = weight.value.reshape(cout, cin * 9)
    out = (wmat @ cols).reshape(cout, h, w)
    out += bias.value[:, None, None]

    def backward(g):
        gmat = g.reshape(cout, h * w)
        if weight.requires_grad:
            weight._accumulate((gmat @ cols.T).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(gmat.sum(axis=1, dtype=np.float64).astype(bias.dtype))
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(cin, 3, 3, h, w)
            gp = np.zeros((cin, h + 2, w + 2), dtype=x.dtype)
            for di in range(3):
                for dj in range(3):
                    gp[:, di:di + h, dj:dj + w] += gcols[:, di, dj]
            x._accumulate(_unpad_reflect_grad(gp, h, w))

    return _node(out, "conv2d", (x, weight, bias), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max reduction with stride 2; trailing odd rows/columns are dropped."""
    _check_grid(x, "maxpool2")
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x.value[:, :2 * h2, :2 * w2].reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4)
    flat = blocks.reshape(c, h2, w2, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros((c, h2, w2, 4), dtype=x.dtype)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[:, :2 * h2, :2 * w2] = (
            gflat.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2))
        x._accumulate(gx)

    return _node(out, "maxpool2", (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour doubling of both spatial axes."""
    _check_grid(x, "upsample2")
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.value, 2, axis=1), 2, axis=2)

    def backward(g):
        x._accumulate(g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    return _node(out, "upsample2", (x,), backward)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _sep_filter(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    # zero-padded 'same' correlation along rows then columns
    r = len(k) // 2
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (r, r), (0, 0)))
    y = np.zeros_like(x)
    for i, kv in enumerate(k):
        y += kv * xp[:, i:i + h, :]
    yp = np.pad(y, ((0, 0), (0, 0), (r, r)))
    z = np.zeros_like(x)
    for i, kv in enumerate(k):
        z += kv * yp[:, :, i:i + w]
    return z


def blur(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Separable symmetric blur with zero padding; the operator is self-adjoint."""
    _check_grid(x, "blur")
    k = np.asarray(kernel, dtype=x.dtype)
    if not np.array_equal(k, k[::-1]):
        raise ValueError("blur kernel must be symmetric")
    return _node(_sep_filter(x.value, k), "blur", (x,),
                 lambda g: _push(x, _sep_filter(g, k)))


# ---------------------------------------------------------------------------
# per-channel statistics and affine maps


class ChannelStats(NamedTuple):
    mean: Tensor
    std: Tensor


def channel_stats(x: Tensor, eps: float = STD_EPS) -> ChannelStats:
    """Population mean and standard deviation per channel, std clamped at ``eps``."""
    _check_grid(x, "channel_stats")
    c, h, w = x.shape
    n = h * w
    flat = x.value.reshape(c, n)
    mu64 = flat.mean(axis=1, dtype=np.float64)
    var64 = ((flat - mu64[:, None]) ** 2).mean(axis=1)
    std64 = np.sqrt(var64)
    clamped = std64 < eps
    mu = mu64.astype(x.dtype)
    std = np.where(clamped, eps, std64).astype(x.dtype)

    mean_t = _node(mu, "channel_mean", (x,),
                   lambda g: _push(x, np.broadcast_to((g / n)[:, None, None], x.shape)))

    def std_backward(g):
        coef = np.where(clamped, 0.0, g / (n * np.where(clamped, 1.0, std64)))
        centered = flat - mu64[:, None]
        _push(x, (coef[:, None] * centered).astype(x.dtype).reshape(x.shape))

    std_t = _node(std, "channel_std", (x,), std_backward)
    return ChannelStats(mean_t, std_t)


def normalize(x: Tensor, eps: float = STD_EPS) -> Tensor:
    """Per-channel ``(x - mean) / std`` with gradients through both statistics."""
    _check_grid(x, "normalize")
    c, h, w = x.shape
    n = h * w
    flat = x.value.reshape(c, n).astype(np.float64)
    mu = flat.mean(axis=1)
    std = np.sqrt(((flat - mu[:, None]) ** 2).mean(axis=1))
    clamped = std < eps
    std = np.where(clamped, eps, std)
    y = (flat - mu[:, None]) / std[:, None]

    def backward(g):
        gf = g.reshape(c, n).astype(np.float64)
        gm = gf.mean(axis=1, keepdims=True)
        gy = np.where(clamped[:, None], 0.0, (gf * y).mean(axis=1, keepdims=True))
        gx = (gf - gm - y * gy) / std[:, None]
        _push(x, gx.astype(x.dtype).reshape(x.shape))

    return _node(y.astype(x.dtype).reshape(x.shape), "normalize", (x,), backward)


def affine_channel(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """``out[c] = scale[c] * x[c] + shift[c]``."""
    _check_grid(x, "affine_channel")
    c = x.shape[0]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(
            f"affine_channel: scale {scale.shape} / shift {shift.shape} must be ({c},)")
    out = x.value * scale.value[:, None, None] + shift.value[:, None, None]

    def backward(g):
        _push(x, g * scale.value[:, None, None])
        if scale.requires_grad:
            scale._accumulate((g * x.value).sum(axis=(1, 2), dtype=np.float64).astype(scale.dtype))
        if shift.requires_grad:
            shift._accumulate(g.sum(axis=(1, 2), dtype=np.float64).astype(shift.dtype))

    return _node(out, "affine_channel", (x, scale, shift), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """The same affine map ``W @ v + b`` applied to every pixel's channel vector."""
    _check_grid(x, "dense")
    c, h, w = x.shape
    if weight.value.ndim != 2 or weight.shape[1] != c:
        raise ShapeError(f"dense: weight {weight.shape} incompatible with {c} input channels")
    cout = weight.shape[0]
    if bias.shape != (cout,):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({cout},)")
    xm = x.value.reshape(c, h * w)
    out = (weight.value @ xm + bias.value[:, None]).reshape(cout, h, w)

    def backward(g):
        gm = g.reshape(cout, h * w)
        if weight.requires_grad:
            weight._accumulate(gm @ xm.T)
        if bias.requires_grad:
            bias._accumulate(gm.sum(axis=1, dtype=np.float64).astype(bias.dtype))
        _push(x, (weight.value.T @ gm).reshape(x.shape))

    return _node(out, "dense", (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# losses


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences."""
    _check_same(a, b, "mse")
    diff = a.value.astype(np.float64) - b.value
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def backward(g):
        gd = (2.0 * float(g) / n) * diff
        _push(a, gd.astype(a.dtype))
        _push(b, (-gd).astype(b.dtype))

    return _node(out, "mse", (a, b), backward)


def sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences."""
    _check_same(a, b, "sq_dist")
    diff = a.value.astype(np.float64) - b.value
    out = np.asarray((diff * diff).sum(), dtype=a.dtype)

    def backward(g):
        gd = 2.0 * float(g) * diff
        _push(a, gd.astype(a.dtype))
        _push(b, (-gd).astype(b.dtype))

    return _node(out, "sq_dist", (a, b), backward)


def l1(a: Tensor, b: Tensor) -> Tensor:
    return mean(abs_(sub(a, b)))


def ssim(a: Tensor, b: Tensor, window: int = 11, sigma: float = 1.5) -> Tensor:
    """Mean structural similarity with a Gaussian window (zero-padded borders)."""
    _check_same(a, b, "ssim")
    k = gaussian_window(window, sigma)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = blur(a, k), blur(b, k)
    mu_a2, mu_b2, mu_ab = square(mu_a), square(mu_b), mul(mu_a, mu_b)
    var_a = sub(blur(square(a), k), mu_a2)
    var_b = sub(blur(square(b), k), mu_b2)
    cov = sub(blur(mul(a, b), k), mu_ab)
    num = mul(add_scalar(scale(mu_ab, 2.0), c1), add_scalar(scale(cov, 2.0), c2))
    den = mul(add_scalar(add(mu_a2, mu_b2), c1), add_scalar(add(var_a, var_b), c2))
    return mean(div(num, den))


def total(terms: Iterable[tuple[float, Tensor]]) -> Tensor:
    """Weighted sum of scalar tensors."""
    out = None
    for w, t in terms:
        term = scale(t, w)
        out = term if out is None else add(out, term)
    if out is None:
        raise ValueError("total() of no terms")
    return out
