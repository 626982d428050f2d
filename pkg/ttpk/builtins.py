# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view

from ttpk.types import Tensor, DimensionError, float64
from ttpk.context import add_builtin, launch


def _data(a):
    if isinstance(a, Tensor):
        return a.data
    return np.asarray(a, dtype=float64)


def _tracked(a):
    return isinstance(a, Tensor) and a.requires_grad


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting"""

    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)

    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)

    return grad


def _batched(x: np.ndarray, ndim: int):
    """Adds a leading batch axis when ``x`` has ``ndim`` dims, returns (array, was_single)"""
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise DimensionError(f"Expected {ndim} or {ndim+1} dimensions, got shape {x.shape}")


#----------------------
# elementwise

@add_builtin("add", group="Elementwise")
def add(a, b):
    """Elementwise a + b with numpy broadcasting"""

    x, y = _data(a), _data(b)
    out = x + y

    def adjoint(g):
        return (_unbroadcast(g, x.shape) if _tracked(a) else None,
                _unbroadcast(g, y.shape) if _tracked(b) else None)

    return launch(add, [a, b], out, adjoint)


@add_builtin("sub", group="Elementwise")
def sub(a, b):
    """Elementwise a - b with numpy broadcasting"""

    x, y = _data(a), _data(b)
    out = x - y

    def adjoint(g):
        return (_unbroadcast(g, x.shape) if _tracked(a) else None,
                _unbroadcast(-g, y.shape) if _tracked(b) else None)

    return launch(sub, [a, b], out, adjoint)


@add_builtin("mul", group="Elementwise")
def mul(a, b):
    """Elementwise a * b with numpy broadcasting"""

    x, y = _data(a), _data(b)
    out = x * y

    def adjoint(g):
        return (_unbroadcast(g * y, x.shape) if _tracked(a) else None,
                _unbroadcast(g * x, y.shape) if _tracked(b) else None)

    return launch(mul, [a, b], out, adjoint)


@add_builtin("relu", group="Elementwise")
def relu(a):

    x = _data(a)
    mask = x > 0.0
    out = np.where(mask, x, 0.0)

    def adjoint(g):
        return (g * mask,)

    return launch(relu, [a], out, adjoint)


@add_builtin("sigmoid", group="Elementwise")
def sigmoid(a):

    x = _data(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * x))

    def adjoint(g):
        return (g * out * (1.0 - out),)

    return launch(sigmoid, [a], out, adjoint)


@add_builtin("exp", group="Elementwise")
def exp(a):

    out = np.exp(_data(a))

    def adjoint(g):
        return (g * out,)

    return launch(exp, [a], out, adjoint)


#----------------------
# reductions

@add_builtin("sum", group="Reduction")
def sum(a, axis=None):

    x = _data(a)
    out = np.sum(x, axis=axis)

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return launch(sum, [a], out, adjoint)


@add_builtin("mean", group="Reduction")
def mean(a, axis=None):

    x = _data(a)
    out = np.mean(x, axis=axis)
    n = x.size / np.size(out)

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return launch(mean, [a], out, adjoint)


#----------------------
# shape manipulation

@add_builtin("reshape", group="Shape")
def reshape(a, shape):

    x = _data(a)
    out = x.reshape(shape)

    def adjoint(g):
        return (g.reshape(x.shape),)

    return launch(reshape, [a], out, adjoint)


@add_builtin("transpose", group="Shape")
def transpose(a, axes):

    x = _data(a)
    out = np.transpose(x, axes)
    inverse = np.argsort(axes)

    def adjoint(g):
        return (np.transpose(g, inverse),)

    return launch(transpose, [a], out, adjoint)


@add_builtin("concat", group="Shape")
def concat(tensors, axis=0):
    """Concatenate a list of tensors along ``axis``"""

    arrays = [_data(t) for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat() shape mismatch: {[a.shape for a in arrays]}") from e

    splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def adjoint(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if _tracked(t) else None for p, t in zip(parts, tensors))

    return launch(concat, list(tensors), out, adjoint)


@add_builtin("narrow", group="Shape")
def narrow(a, axis, start, length):
    """Slice ``length`` entries of ``axis`` beginning at ``start``"""

    x = _data(a)
    n = x.shape[axis]

    if start < 0 or length < 0 or start + length > n:
        raise DimensionError(f"narrow() range [{start}, {start + length}) out of bounds for axis of size {n}")

    index = [slice(None)]*x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    out = x[index].copy()

    def adjoint(g):
        adj = np.zeros_like(x)
        adj[index] = g
        return (adj, None, None, None)

    return launch(narrow, [a, axis, start, length], out, adjoint)


@add_builtin("subsample", group="Shape")
def subsample(a, factor):
    """Keep every ``factor``-th pixel along the last two axes"""

    if factor < 1:
        raise ValueError(f"subsample() factor must be >= 1, got {factor}")

    x = _data(a)
    out = x[..., ::factor, ::factor].copy()

    def adjoint(g):
        adj = np.zeros_like(x)
        adj[..., ::factor, ::factor] = g
        return (adj,)

    return launch(subsample, [a], out, adjoint)


@add_builtin("upsample_nearest", group="Image")
def upsample_nearest(a, factor):
    """Replicate every pixel of a (c, h, w) or (n, c, h, w) tensor ``factor`` x ``factor`` times"""

    if factor < 1:
        raise ValueError(f"upsample_nearest() factor must be >= 1, got {factor}")

    x = _data(a)
    if x.ndim < 2:
        raise DimensionError(f"upsample_nearest() expects an image tensor, got shape {x.shape}")

    out = np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)

    def adjoint(g):
        h, w = x.shape[-2:]
        blocks = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        return (blocks.sum(axis=(-3, -1)),)

    return launch(upsample_nearest, [a], out, adjoint)


#----------------------
# linear algebra

@add_builtin("matmul", group="Linear Algebra")
def matmul(a, b):
    """Matrix product of the last two axes, leading axes broadcast"""

    x, y = _data(a), _data(b)

    if x.ndim < 2 or y.ndim < 2:
        raise DimensionError(f"matmul() requires at least 2 dimensions, got {x.shape} and {y.shape}")

    if x.shape[-1] != y.shape[-2]:
        raise DimensionError(f"matmul() inner dimensions do not match, got {x.shape} and {y.shape}")

    out = np.matmul(x, y)

    def adjoint(g):
        adj_a = None
        adj_b = None
        if _tracked(a):
            adj_a = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape)
        if _tracked(b):
            adj_b = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape)
        return (adj_a, adj_b)

    return launch(matmul, [a, b], out, adjoint)


#----------------------
# convolution

@add_builtin("conv2d", group="Image")
def conv2d(a, kernel, bias=None, stride=1, pad=0):
    """2D cross-correlation

    Args:
        a: Input of shape (c_in, h, w) or (n, c_in, h, w)
        kernel: Weights of shape (c_out, c_in, kh, kw), kh and kw odd
        bias: Optional per-output channel offset of shape (c_out,)
        stride: Step between output samples
        pad: Zero padding added on every side, or a pair (before, after) applied to
            the top and left, and to the bottom and right

    Returns:
        Output of shape (c_out, h', w') or (n, c_out, h', w') with h' = (h + before + after - kh)/stride + 1

    Raises:
        DimensionError: When the padded input does not tile into a whole number of strides
    """

    x, single = _batched(_data(a), 3)
    k = _data(kernel)

    if k.ndim != 4:
        raise DimensionError(f"conv2d() kernel must have shape (c_out, c_in, kh, kw), got {k.shape}")

    c_out, c_in, kh, kw = k.shape
    n, c, h, w = x.shape

    if c != c_in:
        raise DimensionError(f"conv2d() input has {c} channels, kernel expects {c_in}")

    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d() kernel size must be odd, got {kh}x{kw}")

    if stride < 1:
        raise ValueError(f"conv2d() stride must be >= 1, got {stride}")

    lo, hi = (pad, pad) if np.isscalar(pad) else (int(pad[0]), int(pad[1]))
    if lo < 0 or hi < 0:
        raise ValueError(f"conv2d() padding must be >= 0, got {pad}")

    span_h = h + lo + hi - kh
    span_w = w + lo + hi - kw

    if span_h < 0 or span_w < 0 or span_h % stride != 0 or span_w % stride != 0:
        raise DimensionError(f"conv2d() non-integral output size for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}")

    h_out = span_h // stride + 1
    w_out = span_w // stride + 1

    xp = np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi))) if lo > 0 or hi > 0 else x

    # (n, c_in, h_out, w_out, kh, kw)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]

    out = np.tensordot(windows, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    b = None
    if bias is not None:
        b = _data(bias)
        out = out + b.reshape(1, -1, 1, 1)

    if single:
        out = out[0]

    def adjoint(g):

        g = g[None] if single else g

        adj_x = None
        adj_k = None
        adj_b = None

        if _tracked(kernel):
            adj_k = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))

        if _tracked(bias):
            adj_b = g.sum(axis=(0, 2, 3))

        if _tracked(a):
            # (n, h_out, w_out, c_in, kh, kw)
            cols = np.tensordot(g, k, axes=([1], [0]))
            adj_xp = np.zeros_like(xp)

            for i in range(kh):
                for j in range(kw):
                    adj_xp[:, :, i:i + stride*h_out:stride, j:j + stride*w_out:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)

            adj_x = adj_xp[:, :, lo:lo + h, lo:lo + w]

            if single:
                adj_x = adj_x[0]

        return (adj_x, adj_k, adj_b)

    return launch(conv2d, [a, kernel, bias], out, adjoint)


#----------------------
# normalization

@add_builtin("softmax", group="Normalization")
def softmax(a, axis=-1):
    """Numerically stable softmax, subtracts the slice maximum before exponentiation"""

    x = _data(a)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)

    def adjoint(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return launch(softmax, [a], out, adjoint)


@add_builtin("layer_norm", group="Normalization")
def layer_norm(a, gamma, beta, eps=1.e-5):
    """Normalize the last axis to zero mean / unit variance, then apply the affine gamma, beta"""

    x = _data(a)
    gm = _data(gamma)
    bt = _data(beta)

    if gm.shape != (x.shape[-1],) or bt.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm() affine shapes {gm.shape}, {bt.shape} do not match last dim of {x.shape}")

    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc*xc).mean(axis=-1, keepdims=True)
    inv = 1.0/np.sqrt(var + eps)
    xhat = xc*inv

    out = xhat*gm + bt

    def adjoint(g):

        adj_x = None
        adj_g = None
        adj_b = None

        if _tracked(gamma):
            adj_g = (g*xhat).reshape(-1, x.shape[-1]).sum(axis=0)

        if _tracked(beta):
            adj_b = g.reshape(-1, x.shape[-1]).sum(axis=0)

        if _tracked(a):
            gh = g*gm
            adj_x = inv*(gh - gh.mean(axis=-1, keepdims=True) - xhat*(gh*xhat).mean(axis=-1, keepdims=True))

        return (adj_x, adj_g, adj_b)

    return launch(layer_norm, [a, gamma, beta], out, adjoint)


@add_builtin("dropout", group="Normalization")
def dropout(a, rate, training, rng: np.random.Generator):
    """Zero elements with probability ``rate`` and scale survivors by 1/(1-rate) when training

    In inference mode, or with rate 0, the input tensor itself is returned.
    """

    if rate < 0.0 or rate >= 1.0:
        raise ValueError(f"dropout() rate must be in [0, 1), got {rate}")

    if not training or rate == 0.0:
        return a

    x = _data(a)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = x*mask

    def adjoint(g):
        return (g*mask,)

    return launch(dropout, [a], out, adjoint)


#----------------------
# losses / keypoints

@add_builtin("mse_loss", group="Loss")
def mse_loss(a, b):
    """Mean of squared differences"""

    x, y = _data(a), _data(b)

    if x.shape != y.shape:
        raise DimensionError(f"mse_loss() shape mismatch, got {x.shape} and {y.shape}")

    d = x - y
    out = np.array(np.mean(d*d))

    def adjoint(g):
        s = 2.0*g/d.size
        return (s*d if _tracked(a) else None,
                -s*d if _tracked(b) else None)

    return launch(mse_loss, [a, b], out, adjoint)


@add_builtin("gaussian_maps", group="Keypoint")
def gaussian_maps(points, sigma, h, w):
    """Render one isotropic Gaussian per keypoint

    Args:
        points: Keypoint coordinates (x, y) of shape (..., k, 2) in heatmap pixels
        sigma: Standard deviation in heatmap pixels
        h: Map height
        w: Map width

    Returns:
        Maps of shape (..., k, h, w), channel j = exp(-((x - x_j)^2 + (y - y_j)^2) / (2 sigma^2))
    """

    if sigma <= 0.0:
        raise ValueError(f"gaussian_maps() sigma must be positive, got {sigma}")

    p = _data(points)
    if p.shape[-1] != 2:
        raise DimensionError(f"gaussian_maps() expects points of shape (..., k, 2), got {p.shape}")

    xs = np.arange(w, dtype=float64)
    ys = np.arange(h, dtype=float64)

    dx = xs[None, :] - p[..., 0, None, None]      # (..., k, 1, w)
    dy = ys[:, None] - p[..., 1, None, None]      # (..., k, h, 1)

    s2 = sigma*sigma
    out = np.exp(-(dx*dx + dy*dy)/(2.0*s2))

    def adjoint(g):
        gg = g*out/s2
        adj = np.stack([(gg*dx).sum(axis=(-2, -1)), (gg*dy).sum(axis=(-2, -1))], axis=-1)
        return (adj, None, None, None)

    return launch(gaussian_maps, [points, sigma, h, w], out, adjoint)
