# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

"""A module for building the pose network parameters and evaluating its branches.

The network is split in parameter groups that live inside one :class:`ttpk.ParamStore`:

    enc.    shared encoder
    self.   self-supervised keypoint head
    app.    appearance extractor
    dec.    reconstruction decoder (including the keypoint encoder)
    supb.   supervised head of the feature-shared variant
    xf.     affinity transformer, see :mod:`ttpk.pose.transformer`
"""

import math
import dataclasses

import numpy as np

import ttpk

from ttpk.types import Tensor, DimensionError, ConfigError, float64
from ttpk.optimizer import ParamStore


GROUPS = ("enc.", "self.", "app.", "dec.", "supb.", "xf.")

# sub-pixel readout of decode_keypoints
REFINE_QUARTER = "quarter"
REFINE_GAUSSIAN = "gaussian"
REFINE_MODES = (REFINE_QUARTER, REFINE_GAUSSIAN)


@dataclasses.dataclass
class NetConfig:
    """Architecture of the pose network

    Heatmaps live on a grid of ``image_size // 4`` and appearance features on
    ``image_size // 8``.
    """

    image_size: int = 64
    channels: int = 16              # c, shared feature width
    k_self: int = 10
    k_sup: int = 6
    app_channels: int = 16
    kp_channels: int = 16
    decoder_channels: int = 8
    heads: int = 4
    layers: int = 1
    d_ff: int = 64
    dropout: float = 0.1
    sigma: float = 1.5              # Gaussian bandwidth in heatmap pixels, shared by rerender and ground truth
    temperature: float = 1.0        # spatial softmax temperature of the bottleneck
    scale_attention: bool = False   # multiply attention logits by 1/sqrt(c/heads)
    position_encoding: bool = True
    query_std: float = 0.02

    @property
    def heatmap_size(self):
        return self.image_size // 4

    @property
    def app_size(self):
        return self.image_size // 8

    def validate(self):

        if self.image_size % 8 != 0 or self.image_size < 16:
            raise ConfigError(f"image_size must be a multiple of 8 and at least 16, got {self.image_size}")

        if self.k_sup > self.k_self:
            raise ConfigError(f"k_sup ({self.k_sup}) must not exceed k_self ({self.k_self})")

        if self.channels % self.heads != 0:
            raise ConfigError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")

        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")

        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

        if self.sigma <= 0.0 or self.temperature <= 0.0:
            raise ConfigError("sigma and temperature must be positive")

        return self


class HeatmapStack:
    """Stack of k maps on the heatmap grid

    Attributes:
        maps (Tensor): Shape [k, h, w] or batched [n, k, h, w]
    """

    def __init__(self, maps: Tensor):
        self.maps = maps

    @property
    def k(self):
        return self.maps.shape[-3]

    @property
    def h(self):
        return self.maps.shape[-2]

    @property
    def w(self):
        return self.maps.shape[-1]

    def numpy(self):
        return self.maps.numpy()


class KeypointSet:
    """k keypoints as (x, y) = (column, row) coordinates plus a confidence in [0,1]

    Attributes:
        points (Tensor): Shape [k, 2] or batched [n, k, 2]
        confidence (np.ndarray): Shape [k] or [n, k]
    """

    def __init__(self, points, confidence=None):

        if not isinstance(points, Tensor):
            points = Tensor(points)

        if confidence is None:
            confidence = np.ones(points.shape[:-1])

        self.points = points
        self.confidence = np.asarray(confidence, dtype=float64)

    @property
    def k(self):
        return self.points.shape[-2]

    def numpy(self):
        return self.points.numpy()


#----------------------
# parameter construction

def _add_conv(store: ParamStore, name, c_out, c_in, size, rng, gain=2.0):

    fan_in = c_in*size*size
    store.add(name + ".weight", rng.standard_normal((c_out, c_in, size, size))*math.sqrt(gain/fan_in))
    store.add(name + ".bias", np.zeros(c_out))


def build_pose_net(config: NetConfig, seed: int=0) -> ParamStore:
    """Allocate and initialize every parameter group of the network

    Args:
        config: Network architecture, validated here
        seed: Initialization seed

    Returns:
        A ParamStore whose ``config`` attribute references ``config``
    """

    from ttpk.pose.transformer import build_transformer

    config.validate()

    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.config = config

    c = config.channels
    a = config.app_channels
    d = config.decoder_channels

    # shared encoder, strides (2, 2, 2, 1) followed by one upsample-conv
    _add_conv(store, "enc.conv0", c, 3, 3, rng)
    _add_conv(store, "enc.conv1", c, c, 3, rng)
    _add_conv(store, "enc.conv2", c, c, 3, rng)
    _add_conv(store, "enc.conv3", c, c, 3, rng)
    _add_conv(store, "enc.up", c, c, 3, rng)

    # self-supervised head
    _add_conv(store, "self.conv0", c, c, 3, rng)
    _add_conv(store, "self.out", config.k_self, c, 1, rng, gain=1.0)

    # appearance extractor
    _add_conv(store, "app.conv0", a, 3, 3, rng)
    _add_conv(store, "app.conv1", a, a, 3, rng)
    _add_conv(store, "app.conv2", a, a, 3, rng)

    # keypoint encoder + renderer
    _add_conv(store, "dec.kp", config.kp_channels, config.k_self, 3, rng)
    _add_conv(store, "dec.conv0", d, a + config.kp_channels, 3, rng)
    _add_conv(store, "dec.conv1", d, d, 3, rng)
    _add_conv(store, "dec.conv2", d, d, 3, rng)
    _add_conv(store, "dec.out", 3, d, 3, rng, gain=1.0)

    # supervised head of the feature-shared variant
    _add_conv(store, "supb.conv", config.k_sup, c, 1, rng, gain=1.0)

    build_transformer(store, config, rng)

    return store


#----------------------
# network branches

def conv_block(x, params: ParamStore, name, stride=1, activation=True):
    """3x3 (or 1x1) convolution with 'same' padding, optional stride and ReLU"""

    w = params[name + ".weight"]
    b = params[name + ".bias"]

    # strided blocks pad the leading edge only, the output equals a dense conv subsampled by the stride
    p = w.shape[-1]//2
    pad = p if stride == 1 else (p, p - stride + 1)

    y = ttpk.conv2d(x, w, b, stride=stride, pad=pad)

    if activation:
        y = ttpk.relu(y)

    return y


def encode(image: Tensor, params: ParamStore) -> Tensor:
    """Shared encoder, maps (3, H, W) images to (c, H/4, W/4) features"""

    size = params.config.image_size
    if image.shape[-3:] != (3, size, size):
        raise DimensionError(f"encode() expects images of shape (3, {size}, {size}), got {image.shape}")

    x = conv_block(image, params, "enc.conv0", stride=2)
    x = conv_block(x, params, "enc.conv1", stride=2)
    x = conv_block(x, params, "enc.conv2", stride=2)
    x = conv_block(x, params, "enc.conv3")
    x = ttpk.upsample_nearest(x, 2)
    x = conv_block(x, params, "enc.up")

    return x


def self_head(F: Tensor, params: ParamStore) -> HeatmapStack:
    """Raw (pre-normalization) self-supervised heatmap logits, k_self channels"""

    x = conv_block(F, params, "self.conv0")
    x = conv_block(x, params, "self.out", activation=False)

    return HeatmapStack(x)


def coordinate_grid(h, w) -> np.ndarray:
    """Pixel coordinates (x, y) in row-major order, shape [h*w, 2]"""

    ys, xs = np.meshgrid(np.arange(h, dtype=float64), np.arange(w, dtype=float64), indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)


def condense(H: HeatmapStack, temperature: float=1.0) -> KeypointSet:
    """Spatial softmax per channel followed by the expected pixel coordinate

    The confidence of each keypoint is its maximum softmax probability.
    """

    maps = H.maps
    lead = maps.shape[:-2]
    h, w = maps.shape[-2:]

    logits = ttpk.reshape(maps, lead + (h*w,))
    if temperature != 1.0:
        logits = ttpk.mul(logits, 1.0/temperature)

    prob = ttpk.softmax(logits, axis=-1)
    points = ttpk.matmul(prob, Tensor(coordinate_grid(h, w)))

    return KeypointSet(points, prob.data.max(axis=-1))


def gaussian_rerender(kps: KeypointSet, sigma: float, h: int, w: int) -> HeatmapStack:
    """Replace heatmaps by fixed Gaussians centered at the keypoints, differentiable w.r.t. the centers"""

    return HeatmapStack(ttpk.gaussian_maps(kps.points, sigma, h, w))


def appearance_extract(image: Tensor, params: ParamStore) -> Tensor:
    """Appearance feature of the source image, shape (app_channels, H/8, W/8)"""

    x = conv_block(image, params, "app.conv0", stride=2)
    x = conv_block(x, params, "app.conv1", stride=2)
    x = conv_block(x, params, "app.conv2", stride=2)

    return x


def render_decode(F_app: Tensor, F_kp: HeatmapStack, params: ParamStore) -> Tensor:
    """Reconstruct an image from source appearance and target keypoint maps

    The appearance feature is upsampled onto the keypoint grid before both are
    concatenated along channels, the result is upsampled twice to image size.
    """

    kp = conv_block(F_kp.maps, params, "dec.kp")

    h_kp, w_kp = kp.shape[-2:]
    h_app, w_app = F_app.shape[-2:]

    if h_kp % h_app != 0 or w_kp % w_app != 0 or h_kp//h_app != w_kp//w_app:
        raise DimensionError(f"render_decode() cannot align appearance grid {h_app}x{w_app} with keypoint grid {h_kp}x{w_kp}")

    if kp.ndim != F_app.ndim:
        raise DimensionError(f"render_decode() batch mismatch between {F_app.shape} and {kp.shape}")

    app = ttpk.upsample_nearest(F_app, h_kp//h_app)

    x = ttpk.concat([app, kp], axis=-3)
    x = conv_block(x, params, "dec.conv0")
    x = ttpk.upsample_nearest(x, 2)
    x = conv_block(x, params, "dec.conv1")
    x = ttpk.upsample_nearest(x, 2)
    x = conv_block(x, params, "dec.conv2")
    x = conv_block(x, params, "dec.out", activation=False)

    return ttpk.sigmoid(x)


def baseline_sup_head(F: Tensor, params: ParamStore) -> HeatmapStack:
    """Single 1x1 convolution producing k_sup heatmaps from the shared feature"""

    return HeatmapStack(conv_block(F, params, "supb.conv", activation=False))


def reconstruct(target: Tensor, source: Tensor, params: ParamStore):
    """Run the self-supervised branch

    Returns:
        (reconstruction, H_self, condensed keypoints, shared feature of the target)
    """

    config = params.config

    F = encode(target, params)
    H_self = self_head(F, params)
    kps = condense(H_self, config.temperature)
    F_kp = gaussian_rerender(kps, config.sigma, H_self.h, H_self.w)
    F_app = appearance_extract(source, params)

    return render_decode(F_app, F_kp, params), H_self, kps, F


def _gaussian_offset(lo, mid, hi):
    """Sub-pixel offset of the vertex of a parabola through the logs of three samples, None when undefined"""

    if min(lo, mid, hi) <= 0.0:
        return None

    a, b, c = math.log(lo), math.log(mid), math.log(hi)
    denom = a - 2.0*b + c
    if denom >= 0.0:
        return None

    return float(np.clip(0.5*(a - c)/denom, -0.5, 0.5))


def decode_keypoints(H: HeatmapStack, image_size: int=None, refine: str=REFINE_QUARTER) -> KeypointSet:
    """Read keypoints out of heatmaps

    Per channel argmax (ties resolve to the first index in row-major order),
    refined by a quarter pixel toward the higher horizontal and vertical
    neighbour, then scaled from heatmap to image pixels when ``image_size`` is given.

    The quarter-pixel readout is within 0.25 heatmap px per axis of the peak of a
    sampled Gaussian, i.e. 1 image px per axis at a heatmap stride of 4. With
    ``refine="gaussian"`` each axis instead takes the vertex of a parabola
    fitted to the log of the peak and its two neighbours, which is exact for
    Gaussian heatmaps; it falls back to the quarter step where the logs are
    undefined (non-positive samples) or not concave.
    """

    if refine not in REFINE_MODES:
        raise ValueError(f"decode_keypoints() refine must be one of {REFINE_MODES}, got '{refine}'")

    maps = H.numpy()
    lead = maps.shape[:-2]
    h, w = maps.shape[-2:]

    flat = maps.reshape(-1, h, w)
    points = np.zeros((flat.shape[0], 2))
    confidence = np.zeros(flat.shape[0])

    for i, m in enumerate(flat):

        idx = int(np.argmax(m))
        row, col = divmod(idx, w)

        x = float(col)
        y = float(row)

        if 0 < col < w - 1:
            dx = None
            if refine == REFINE_GAUSSIAN:
                dx = _gaussian_offset(m[row, col - 1], m[row, col], m[row, col + 1])
            if dx is None:
                dx = 0.25*np.sign(m[row, col + 1] - m[row, col - 1])
            x += dx

        if 0 < row < h - 1:
            dy = None
            if refine == REFINE_GAUSSIAN:
                dy = _gaussian_offset(m[row - 1, col], m[row, col], m[row + 1, col])
            if dy is None:
                dy = 0.25*np.sign(m[row + 1, col] - m[row - 1, col])
            y += dy

        points[i] = (x, y)
        confidence[i] = np.clip(m[row, col], 0.0, 1.0)

    if image_size is not None:
        points *= image_size/h

    return KeypointSet(points.reshape(lead + (2,)), confidence.reshape(lead))
