# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

"""Transformer decoder mapping self-supervised heatmaps onto supervised keypoints.

Learnable queries, one per supervised joint, cross-attend to the flattened shared
feature. The decoded affinity feature is projected and normalized into a
row-stochastic affinity matrix W of shape (k_sup, k_self), and supervised
heatmaps are obtained as a W-weighted combination of self-supervised heatmaps.

All parameters live under the "xf." prefix:

    xf.query                    (k_sup, c) learnable queries
    xf.l<i>.attn.h<m>.tq/tk/tv  (c/M, c/M) per-head projections
    xf.l<i>.attn.proj           (c, c) output projection
    xf.l<i>.ln1.gamma/beta      layer norm after attention
    xf.l<i>.ffn.w1/b1/w2/b2     feed-forward block
    xf.l<i>.ln2.gamma/beta      layer norm after the feed-forward block
    xf.proj                     (c, k_self) affinity projection
"""

import os
import math

import numpy as np

import ttpk

from ttpk.types import Tensor, DimensionError, ConfigError, float64
from ttpk.optimizer import ParamStore
from ttpk.pose.model import HeatmapStack


class AffinityMatrix:
    """Row-stochastic (k_sup, k_self) mapping from self-supervised to supervised keypoints"""

    def __init__(self, W: Tensor):
        self.W = W

    @property
    def k_sup(self):
        return self.W.shape[-2]

    @property
    def k_self(self):
        return self.W.shape[-1]

    def numpy(self):
        return self.W.numpy()


def build_transformer(store: ParamStore, config, rng: np.random.Generator):

    c = config.channels
    M = config.heads
    cp = c//M

    store.add("xf.query", rng.standard_normal((config.k_sup, c))*config.query_std)

    for l in range(config.layers):

        prefix = f"xf.l{l}."

        for m in range(M):
            for t in ("tq", "tk", "tv"):
                store.add(prefix + f"attn.h{m}.{t}", rng.standard_normal((cp, cp))/math.sqrt(cp))

        store.add(prefix + "attn.proj", rng.standard_normal((c, c))/math.sqrt(c))
        store.add(prefix + "ln1.gamma", np.ones(c))
        store.add(prefix + "ln1.beta", np.zeros(c))

        store.add(prefix + "ffn.w1", rng.standard_normal((c, config.d_ff))*math.sqrt(2.0/c))
        store.add(prefix + "ffn.b1", np.zeros(config.d_ff))
        store.add(prefix + "ffn.w2", rng.standard_normal((config.d_ff, c))/math.sqrt(config.d_ff))
        store.add(prefix + "ffn.b2", np.zeros(c))
        store.add(prefix + "ln2.gamma", np.ones(c))
        store.add(prefix + "ln2.beta", np.zeros(c))

    store.add("xf.proj", rng.standard_normal((c, config.k_self))/math.sqrt(c))


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ttpk.transpose(t, axes)


def sinusoid_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved sin/cos encoding with geometric frequencies, shape [len(positions), dim]"""

    pe = np.zeros((len(positions), dim))
    half = (dim + 1)//2
    freq = 1.0/(10000.0**(np.arange(half)/max(half, 1)))

    angles = positions[:, None]*freq[None, :]
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, :dim//2])

    return pe


def position_encoding(h: int, w: int, c: int) -> np.ndarray:
    """Fixed 2-D encoding, the first c//2 channels encode the column and the rest the row"""

    cx = c//2
    cy = c - cx

    ys, xs = np.meshgrid(np.arange(h, dtype=float64), np.arange(w, dtype=float64), indexing="ij")

    pe_x = sinusoid_1d(xs.reshape(-1), cx)
    pe_y = sinusoid_1d(ys.reshape(-1), cy)

    return np.concatenate([pe_x, pe_y], axis=-1)


def tokenize(F: Tensor, encode_position: bool=True) -> Tensor:
    """Flatten a (c, h, w) feature to (h*w, c) tokens in row-major spatial order"""

    c, h, w = F.shape[-3:]
    lead = F.shape[:-3]

    tokens = ttpk.reshape(F, lead + (c, h*w))
    tokens = _swap_last(tokens)

    if encode_position:
        tokens = ttpk.add(tokens, position_encoding(h, w, c))

    return tokens


def single_head_attention(Q_sup: Tensor, F_tok: Tensor, tq: Tensor, tk: Tensor, tv: Tensor, scale: bool=False):
    """attn(Q, F, F) = softmax(Q T^Q (F T^K)^T) F T^V

    The logits are left unscaled unless ``scale`` is set, in which case they are
    multiplied by 1/sqrt(c').

    Returns:
        Tuple (output of shape [..., k_sup, c'], attention weights of shape [..., k_sup, n])
    """

    cp = Q_sup.shape[-1]

    if F_tok.shape[-1] != cp or tq.shape != (cp, cp) or tk.shape != (cp, cp) or tv.shape != (cp, cp):
        raise DimensionError(f"single_head_attention() dimension mismatch: queries {Q_sup.shape}, tokens {F_tok.shape}, "
                             f"projections {tq.shape}, {tk.shape}, {tv.shape}")

    Q = ttpk.matmul(Q_sup, tq)
    K = ttpk.matmul(F_tok, tk)
    V = ttpk.matmul(F_tok, tv)

    logits = ttpk.matmul(Q, _swap_last(K))
    if scale:
        logits = ttpk.mul(logits, 1.0/math.sqrt(cp))

    A = ttpk.softmax(logits, axis=-1)

    return ttpk.matmul(A, V), A


def multi_head_attention(Q_sup: Tensor, F_tok: Tensor, params: ParamStore, layer: int=0, training: bool=False, rng=None) -> Tensor:
    """Split queries and tokens into M channel groups, attend per head, then
    LayerNorm(Q_sup + Dropout(concat(heads) L))
    """

    config = params.config
    c = Q_sup.shape[-1]
    M = config.heads

    if c % M != 0:
        raise ConfigError(f"Feature width {c} is not divisible by {M} heads")

    cp = c//M
    prefix = f"xf.l{layer}."

    heads = []
    for m in range(M):
        q = ttpk.narrow(Q_sup, -1, m*cp, cp)
        f = ttpk.narrow(F_tok, -1, m*cp, cp)

        out, _ = single_head_attention(q, f,
                                       params[prefix + f"attn.h{m}.tq"],
                                       params[prefix + f"attn.h{m}.tk"],
                                       params[prefix + f"attn.h{m}.tv"],
                                       config.scale_attention)
        heads.append(out)

    x = heads[0] if M == 1 else ttpk.concat(heads, axis=-1)
    x = ttpk.matmul(x, params[prefix + "attn.proj"])
    x = ttpk.dropout(x, config.dropout, training, rng)
    x = ttpk.add(Q_sup, x)

    return ttpk.layer_norm(x, params[prefix + "ln1.gamma"], params[prefix + "ln1.beta"])


def ffn_block(x: Tensor, params: ParamStore, layer: int=0, training: bool=False, rng=None) -> Tensor:
    """LayerNorm(x + Dropout(ReLU(x W1 + b1) W2 + b2))"""

    config = params.config
    prefix = f"xf.l{layer}."

    y = ttpk.relu(ttpk.add(ttpk.matmul(x, params[prefix + "ffn.w1"]), params[prefix + "ffn.b1"]))
    y = ttpk.add(ttpk.matmul(y, params[prefix + "ffn.w2"]), params[prefix + "ffn.b2"])
    y = ttpk.dropout(y, config.dropout, training, rng)

    return ttpk.layer_norm(ttpk.add(x, y), params[prefix + "ln2.gamma"], params[prefix + "ln2.beta"])


def decoder_forward(Q_sup: Tensor, F: Tensor, params: ParamStore, training: bool=False, rng=None) -> Tensor:
    """Tokenize F and run the stacked (attention, feed-forward) layers

    Args:
        Q_sup: Queries of shape (k_sup, c), None selects the stored ``xf.query``
        F: Shared feature of shape (c, h, w) or (n, c, h, w)
        params: Network parameters
        training: Enables dropout, requires ``rng``
        rng: Generator driving dropout masks

    Returns:
        The affinity feature F_aff of shape (..., k_sup, c)
    """

    config = params.config

    if Q_sup is None:
        Q_sup = params["xf.query"]

    if training and config.dropout > 0.0 and rng is None:
        raise ValueError("decoder_forward() requires an rng in training mode")

    tokens = tokenize(F, config.position_encoding)

    x = Q_sup
    for l in range(config.layers):
        x = multi_head_attention(x, tokens, params, l, training, rng)
        x = ffn_block(x, params, l, training, rng)

    return x


def affinity(F_aff: Tensor, P: Tensor) -> AffinityMatrix:
    """W = softmax(F_aff P) along the k_self axis"""

    return AffinityMatrix(ttpk.softmax(ttpk.matmul(F_aff, P), axis=-1))


def transform_heatmaps(H_self: HeatmapStack, W: AffinityMatrix) -> HeatmapStack:
    """H_sup channel i = sum_j W[i, j] H_self[j]"""

    maps = H_self.maps
    k, h, w = maps.shape[-3:]

    if k != W.k_self:
        raise DimensionError(f"transform_heatmaps() stack has {k} channels, affinity expects {W.k_self}")

    lead = maps.shape[:-3]
    flat = ttpk.reshape(maps, lead + (k, h*w))
    out = ttpk.matmul(W.W, flat)

    return HeatmapStack(ttpk.reshape(out, out.shape[:-1] + (h, w)))


def supervised_heatmaps(F: Tensor, H_self: HeatmapStack, params: ParamStore, training: bool=False, rng=None):
    """Full supervised branch of the transformer variant, returns (H_sup, W)"""

    F_aff = decoder_forward(None, F, params, training, rng)
    W = affinity(F_aff, params["xf.proj"])

    return transform_heatmaps(H_self, W), W


def contribution_scores(W) -> np.ndarray:
    """Column sums of W, how much each self-supervised keypoint feeds the final pose"""

    if isinstance(W, AffinityMatrix):
        W = W.numpy()

    return np.asarray(W).sum(axis=-2)


def export_affinity_csv(W, path, joint_names=None):
    """Write one row per supervised keypoint and one column per self-supervised keypoint"""

    if isinstance(W, AffinityMatrix):
        W = W.numpy()

    W = np.asarray(W)
    if W.ndim != 2:
        raise DimensionError(f"export_affinity_csv() expects a single (k_sup, k_self) matrix, got shape {W.shape}")

    if joint_names is None:
        joint_names = [f"sup{i}" for i in range(W.shape[0])]

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    with open(path, "w") as f:
        f.write("joint," + ",".join(f"self{j}" for j in range(W.shape[1])) + "\n")
        for name, row in zip(joint_names, W):
            f.write(name + "," + ",".join(f"{v:.4f}" for v in row) + "\n")
