# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

"""Visualizations of keypoints and affinities, and the results report.

PNG output goes through matplotlib when it is installed (``pip install ttpk[vis]``),
otherwise a grayscale PGM of the image panels is written instead.
"""

import os
import warnings
import dataclasses

import numpy as np

from typing import Dict, List

from ttpk.pose import model
from ttpk.pose.metrics import Curve
from ttpk.pose.transformer import AffinityMatrix, contribution_scores


# row order of the report
VARIANT_ORDER = ["baseline", "feat_shared", "transformer"]
SCENARIO_ORDER = ["none", "online", "offline", "offline_unordered"]


def affinity_arrows(W, threshold: float=0.1):
    """Pairs (i, j, W[i, j]) with W[i, j] > threshold, i indexes supervised and j self-supervised keypoints"""

    if isinstance(W, AffinityMatrix):
        W = W.numpy()

    W = np.asarray(W)
    rows, cols = np.nonzero(W > threshold)

    return [(int(i), int(j), float(W[i, j])) for i, j in zip(rows, cols)]


def _to_hwc(image):
    img = image.numpy() if hasattr(image, "numpy") else np.asarray(image)
    return np.clip(img.transpose(1, 2, 0), 0.0, 1.0)


def _write_pgm(path, panels):

    strip = np.concatenate([p.mean(axis=-1) for p in panels], axis=1)
    data = np.round(strip*255.0).astype(np.uint8)

    with open(path, "wb") as f:
        f.write("P5\n{} {}\n255\n".format(data.shape[1], data.shape[0]).encode("ascii"))
        f.write(data.tobytes())


def render_visualization(frame, H_self, H_sup, W, path, threshold: float=0.1, source=None, reconstruction=None, temperature=1.0):
    """Panels: target, source, reconstruction, self-supervised keypoints, supervised keypoints, ground truth

    Self-supervised keypoints are colored by their contribution score, supervised
    keypoints by confidence, and an arrow joins self-supervised keypoint j to
    supervised keypoint i wherever W[i, j] > threshold.

    Returns:
        Tuple (written file path, number of arrows drawn)
    """

    size = frame.size
    W = W.numpy() if isinstance(W, AffinityMatrix) else np.asarray(W)
    W = W.reshape(W.shape[-2:])

    self_kps = model.condense(H_self, temperature)
    self_pts = self_kps.numpy().reshape(-1, 2)*(size/H_self.h)
    sup = model.decode_keypoints(H_sup, size)
    sup_pts = sup.numpy().reshape(-1, 2)
    sup_conf = sup.confidence.reshape(-1)
    gt_pts = frame.gt_joints.numpy()

    contrib = contribution_scores(W)
    arrows = affinity_arrows(W, threshold)

    target = _to_hwc(frame.image)

    panels = [("target", target)]
    if source is not None:
        panels.append(("source", _to_hwc(source)))
    if reconstruction is not None:
        panels.append(("reconstruction", _to_hwc(reconstruction)))

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        warnings.warn("matplotlib is not available, writing a PGM image instead of PNG")
        path = os.path.splitext(path)[0] + ".pgm"
        _write_pgm(path, [p for _, p in panels] + [target, target, target])
        return path, len(arrows)

    n = len(panels) + 3
    fig, axes = plt.subplots(1, n, figsize=(2.2*n, 2.4))

    for ax, (title, img) in zip(axes, panels):
        ax.imshow(img)
        ax.set_title(title, fontsize=8)

    ax = axes[len(panels)]
    ax.imshow(target)
    ax.scatter(self_pts[:, 0], self_pts[:, 1], c=contrib, cmap="viridis", s=14, vmin=0.0)
    ax.set_title("self-supervised", fontsize=8)

    ax = axes[len(panels) + 1]
    ax.imshow(target)
    for i, j, w in arrows:
        ax.annotate("", xy=sup_pts[i], xytext=self_pts[j],
                    arrowprops=dict(arrowstyle="->", color="white", alpha=min(1.0, w + 0.2), lw=0.6))
    ax.scatter(sup_pts[:, 0], sup_pts[:, 1], c=sup_conf, cmap="plasma", s=14, vmin=0.0, vmax=1.0)
    ax.set_title("supervised", fontsize=8)

    ax = axes[len(panels) + 2]
    ax.imshow(target)
    ax.scatter(gt_pts[:, 0], gt_pts[:, 1], c="red", s=14)
    ax.set_title("ground truth", fontsize=8)

    for ax in axes:
        ax.set_axis_off()

    plt.tight_layout()
    plt.savefig(path, dpi=100)
    plt.close(fig)

    return path, len(arrows)


#----------------------
# report

@dataclasses.dataclass
class ReportRow:
    variant: str
    scenario: str
    value: float
    smoothed: float = None


def _order(value, order):
    return (order.index(value), value) if value in order else (len(order), value)


def report_table(rows: List[ReportRow]):
    """Sorted rows with the delta against the same variant's "none" scenario"""

    rows = sorted(rows, key=lambda r: (_order(r.variant, VARIANT_ORDER), _order(r.scenario, SCENARIO_ORDER)))
    base = {r.variant: r.value for r in rows if r.scenario == "none"}

    table = []
    for r in rows:
        delta = r.value - base[r.variant] if r.variant in base else float("nan")
        table.append((r, delta))

    return table


def emit_report(rows: List[ReportRow], curves: Dict[str, Curve], out_dir):
    """Write report.csv and one curve_<name>.csv per curve, numbers at 4 decimals

    The report has one row per (variant, scenario) with the metric and its change
    against the non-personalized row of the same variant, plus a smoothed column
    when any row carries a smoothed value.
    """

    os.makedirs(out_dir, exist_ok=True)

    smooth = any(r.smoothed is not None for r in rows)

    with open(os.path.join(out_dir, "report.csv"), "w") as f:

        header = "variant,scenario,mpck,delta"
        if smooth:
            header += ",mpck_smoothed,delta_smoothed"
        f.write(header + "\n")

        base_smoothed = {r.variant: r.smoothed for r in rows if r.scenario == "none"}

        for r, delta in report_table(rows):
            line = "{},{},{:.4f},{:+.4f}".format(r.variant, r.scenario, r.value, delta)
            if smooth:
                s = r.smoothed if r.smoothed is not None else float("nan")
                b = base_smoothed.get(r.variant)
                ds = s - b if b is not None else float("nan")
                line += ",{:.4f},{:+.4f}".format(s, ds)
            f.write(line + "\n")

    for name, curve in sorted(curves.items()):
        curve.to_csv(os.path.join(out_dir, "curve_{}.csv".format(name)))
