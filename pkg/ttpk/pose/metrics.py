# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

import os
import warnings

import numpy as np
import scipy.signal

from typing import List

from ttpk.types import DimensionError, float64
from ttpk.pose import puppet


class EvalResult:
    """Per-joint correctness of a set of predictions

    Attributes:
        flags (np.ndarray): Boolean correctness, shape [n, k]
        valid (np.ndarray): Frames taking part in the score, shape [n]
    """

    def __init__(self, flags, valid=None):

        self.flags = np.atleast_2d(np.asarray(flags, dtype=bool))

        if valid is None:
            valid = np.ones(self.flags.shape[0], dtype=bool)

        self.valid = np.asarray(valid, dtype=bool).reshape(-1)

    @property
    def score(self) -> float:
        """Percentage of correct joints over valid frames, in [0, 100]"""
        f = self.flags[self.valid]
        if f.size == 0:
            return 0.0
        return float(100.0*f.mean())

    @property
    def per_joint(self) -> np.ndarray:
        f = self.flags[self.valid]
        if f.shape[0] == 0:
            return np.zeros(self.flags.shape[1])
        return 100.0*f.mean(axis=0)

    @property
    def per_frame(self) -> np.ndarray:
        return 100.0*self.flags.mean(axis=1)

    @staticmethod
    def concat(results):
        return EvalResult(np.concatenate([r.flags for r in results]), np.concatenate([r.valid for r in results]))


def _as_batch(points):
    pts = np.asarray(points.numpy() if hasattr(points, "numpy") else points, dtype=float64)
    if pts.ndim == 2:
        pts = pts[None]
    return pts


def pck(pred, gt, torso_pair=puppet.TORSO_PAIR, factor: float=0.5) -> EvalResult:
    """Joint j is correct iff ||pred_j - gt_j|| <= factor * ||gt[a] - gt[b]|| for the torso pair (a, b)

    Frames whose torso has zero length are excluded from the score with a warning.
    """

    p = _as_batch(pred)
    g = _as_batch(gt)

    if p.shape != g.shape:
        raise DimensionError(f"pck() shape mismatch, got {p.shape} and {g.shape}")

    a, b = torso_pair
    torso = np.linalg.norm(g[:, a] - g[:, b], axis=-1)
    dist = np.linalg.norm(p - g, axis=-1)

    valid = torso > 0.0
    if not np.all(valid):
        warnings.warn(f"{int(np.sum(~valid))} frame(s) with a degenerate torso excluded from PCK")

    flags = dist <= factor*torso[:, None]
    flags[~valid] = False

    return EvalResult(flags, valid)


def default_distance(image_size: int) -> float:
    """Accuracy radius for an image size, 6 px at 128 px scaled proportionally"""
    return 6.0*image_size/128.0


def acc_within_d(pred, gt, d: float) -> EvalResult:
    """Joint j is correct iff ||pred_j - gt_j|| <= d pixels"""

    p = _as_batch(pred)
    g = _as_batch(gt)

    if p.shape != g.shape:
        raise DimensionError(f"acc_within_d() shape mismatch, got {p.shape} and {g.shape}")

    return EvalResult(np.linalg.norm(p - g, axis=-1) <= d)


class Curve:
    """Metric as a function of frame id, video length or update iterations"""

    def __init__(self, x, y, label="y", window=None, xlabel="x"):

        self.x = np.asarray(x, dtype=float64)
        self.y = np.asarray(y, dtype=float64)
        self.label = label
        self.xlabel = xlabel
        self.window = window

        if self.x.shape != self.y.shape:
            raise DimensionError(f"Curve x and y differ in shape, {self.x.shape} vs {self.y.shape}")

        if np.any(np.diff(self.x) <= 0.0):
            raise ValueError("Curve x values must be strictly increasing")

    def __len__(self):
        return len(self.x)

    def to_csv(self, path):

        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

        with open(path, "w") as f:
            if self.window is not None:
                f.write(f"# smoothing window {self.window}\n")
            f.write(f"{self.xlabel},{self.label}\n")
            for x, y in zip(self.x, self.y):
                f.write(f"{x:g},{y:.4f}\n")


def moving_average(y, window: int=5) -> np.ndarray:
    """Centered moving average, windows are truncated at the series ends"""

    y = np.asarray(y, dtype=float64)
    if window < 1:
        raise ValueError(f"moving_average() window must be >= 1, got {window}")

    half = window//2
    out = np.empty_like(y)
    for i in range(len(y)):
        lo = max(0, i - half)
        hi = min(len(y), i + half + 1)
        out[i] = y[lo:hi].mean(axis=0)

    return out


def improvement_curve(traces_ttp, traces_base, window: int=5) -> Curve:
    """Per-frame PCK gap between personalized and plain predictions, averaged over subjects and smoothed

    Args:
        traces_ttp: A TTPTrace or a list of them, one per subject
        traces_base: Matching traces of the non-personalized model
        window: Moving-average window
    """

    if not isinstance(traces_ttp, (list, tuple)):
        traces_ttp = [traces_ttp]
    if not isinstance(traces_base, (list, tuple)):
        traces_base = [traces_base]

    if len(traces_ttp) != len(traces_base) or len(traces_ttp) == 0:
        raise ValueError("improvement_curve() requires one baseline trace per personalized trace")

    gaps = []
    for t, b in zip(traces_ttp, traces_base):
        if len(t) != len(b):
            raise ValueError(f"improvement_curve() trace length mismatch, {len(t)} vs {len(b)} frames")
        gaps.append(t.frame_scores() - b.frame_scores())

    n = len(gaps[0])
    if any(len(g) != n for g in gaps):
        raise ValueError("improvement_curve() requires subjects with equal frame counts")

    gap = np.mean(gaps, axis=0)

    return Curve(np.arange(n), moving_average(gap, window), label="pck_gap", window=window, xlabel="frame")


def savgol_smooth(series, window: int=7, poly: int=2) -> np.ndarray:
    """Savitzky-Golay smoothing along the frame axis, per coordinate channel

    Edges are fitted with a polynomial over the first and last full window. A
    window longer than the series leaves it unchanged with a warning.
    """

    series = np.asarray(series, dtype=float64)

    if window % 2 == 0 or window < 1:
        raise ValueError(f"savgol_smooth() window must be a positive odd integer, got {window}")
    if poly >= window:
        raise ValueError(f"savgol_smooth() poly ({poly}) must be smaller than window ({window})")

    if window > series.shape[0]:
        warnings.warn(f"Savitzky-Golay window {window} exceeds series length {series.shape[0]}, series left unsmoothed")
        return series.copy()

    return scipy.signal.savgol_filter(series, window, poly, axis=0, mode="interp")
