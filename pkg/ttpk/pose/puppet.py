# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

"""A module describing the synthetic articulated figure (puppet) used as a stand-in for human subjects.
"""

import math
import colorsys

import numpy as np

from typing import List


# background styles
BACKGROUND_FLAT = "flat"
BACKGROUND_GRADIENT = "gradient"
BACKGROUND_NOISE = "noise"

BACKGROUND_STYLES = (BACKGROUND_FLAT, BACKGROUND_GRADIENT, BACKGROUND_NOISE)

# appearance domains, test subjects draw limb hues from a disjoint range
DOMAIN_TRAIN = "train"
DOMAIN_TEST = "test"

HUE_RANGES = {
    DOMAIN_TRAIN: (0.0, 0.5),
    DOMAIN_TEST: (0.5, 1.0),
}

# torso length as a fraction of image size
BASE_TORSO = 0.25

# limb widths are stated in pixels at this image size and scaled with the image
REFERENCE_SIZE = 64

# skeleton, one entry per joint:
#   name, parent, length (fraction of image size), relative angle limits (radians)
#
# angles are measured clockwise on screen from the parent segment direction, the
# root (pelvis) frame points up, i.e.: a segment with absolute angle a has
# direction (sin(a), -cos(a)) in (x, y) image coordinates
SKELETON = [
    ("pelvis",  -1, 0.0,  (0.0, 0.0)),
    ("neck",     0, None, (-0.35, 0.35)),
    ("head",     1, 0.09, (-0.5, 0.5)),
    ("l_elbow",  1, 0.13, (-2.8, -1.0)),
    ("l_hand",   3, 0.12, (-1.2, 1.2)),
    ("r_elbow",  1, 0.13, (1.0, 2.8)),
    ("r_hand",   5, 0.12, (-1.2, 1.2)),
    ("l_knee",   0, 0.15, (math.pi - 0.1, math.pi + 0.6)),
    ("l_foot",   7, 0.14, (-0.9, 0.2)),
    ("r_knee",   0, 0.15, (math.pi - 0.6, math.pi + 0.1)),
    ("r_foot",   9, 0.14, (-0.2, 0.9)),
]

JOINT_NAMES = [j[0] for j in SKELETON]
JOINT_COUNT = len(SKELETON)

# order in which joints are exposed as supervised keypoints, k_sup takes a prefix
SUPERVISED_ORDER = ["head", "neck", "pelvis", "l_hand", "r_hand", "l_foot",
                    "r_foot", "l_elbow", "r_elbow", "l_knee", "r_knee"]

MAX_K_SUP = len(SUPERVISED_ORDER)

# supervised indices of the torso pair used as the PCK reference length
TORSO_PAIR = (SUPERVISED_ORDER.index("neck"), SUPERVISED_ORDER.index("pelvis"))

# one limb per non-root joint, connecting it to its parent
LIMB_COUNT = JOINT_COUNT - 1

# painter's order, legs first, head last
DRAW_ORDER = [7, 8, 9, 10, 1, 3, 4, 5, 6, 2]


class SubjectSpec:
    """Appearance of one synthetic person

    Attributes:
        subject_id (int): Identifier, unique within a dataset
        appearance_seed (int): Seed every appearance attribute was drawn from
        domain (str): Either "train" or "test", selects the limb hue range
        limb_colors (np.ndarray): RGB in [0,1] per limb, shape [LIMB_COUNT, 3]
        limb_widths (np.ndarray): Limb widths in pixels at the reference size, shape [LIMB_COUNT]
        torso_scale (float): Torso length multiplier in [0.7, 1.3]
        background_style (str): One of "flat", "gradient", "noise"
        background_colors (np.ndarray): Two RGB colors, shape [2, 3]
    """

    def __init__(self, subject_id, appearance_seed, domain, limb_colors, limb_widths, torso_scale, background_style, background_colors):

        self.subject_id = subject_id
        self.appearance_seed = appearance_seed
        self.domain = domain
        self.limb_colors = limb_colors
        self.limb_widths = limb_widths
        self.torso_scale = torso_scale
        self.background_style = background_style
        self.background_colors = background_colors

    def __eq__(self, other):
        return (isinstance(other, SubjectSpec) and
                self.subject_id == other.subject_id and
                self.appearance_seed == other.appearance_seed and
                self.domain == other.domain and
                np.array_equal(self.limb_colors, other.limb_colors) and
                np.array_equal(self.limb_widths, other.limb_widths) and
                self.torso_scale == other.torso_scale and
                self.background_style == other.background_style and
                np.array_equal(self.background_colors, other.background_colors))

    def segment_lengths(self, size, global_scale=1.0):
        """Returns the length in pixels of the segment ending at each joint (0 for the root)"""

        lengths = np.zeros(JOINT_COUNT)
        for j, (name, parent, frac, limits) in enumerate(SKELETON):
            if parent < 0:
                continue
            if frac is None:
                frac = BASE_TORSO*self.torso_scale
            lengths[j] = frac*size*global_scale

        return lengths


class PoseSample:
    """Articulation of the puppet for a single frame

    Attributes:
        joint_angles (np.ndarray): Relative angle per joint in radians, shape [JOINT_COUNT], root entry unused
        root_position (np.ndarray): Pelvis position in normalized image coordinates (x, y)
        global_scale (float): Uniform size multiplier
    """

    def __init__(self, joint_angles, root_position, global_scale=1.0):

        self.joint_angles = np.asarray(joint_angles, dtype=np.float64)
        self.root_position = np.asarray(root_position, dtype=np.float64)
        self.global_scale = float(global_scale)

    def copy(self):
        return PoseSample(self.joint_angles.copy(), self.root_position.copy(), self.global_scale)

    def to_dict(self):
        return {"joint_angles": self.joint_angles.tolist(),
                "root_position": self.root_position.tolist(),
                "global_scale": self.global_scale}

    @staticmethod
    def from_dict(d):
        return PoseSample(d["joint_angles"], d["root_position"], d["global_scale"])


def joint_limits():
    """Returns (lower, upper) relative angle limits, shape [JOINT_COUNT] each"""
    lo = np.array([j[3][0] for j in SKELETON])
    hi = np.array([j[3][1] for j in SKELETON])
    return lo, hi


def joint_depths():
    """Number of relative angles influencing the absolute angle of the segment ending at each joint"""
    depth = np.zeros(JOINT_COUNT, dtype=int)
    for j, (name, parent, frac, limits) in enumerate(SKELETON):
        if parent > 0:
            depth[j] = depth[parent] + 1
        elif parent == 0:
            depth[j] = 1
    return depth


def sample_subject(seed: int, subject_id: int=0, domain: str=DOMAIN_TRAIN) -> SubjectSpec:
    """Draw the appearance of a subject, deterministic given ``seed``

    Args:
        seed: Appearance seed
        subject_id: Identifier stored on the subject
        domain: "train" or "test", test subjects use a disjoint hue range

    Returns:
        A new SubjectSpec
    """

    if domain not in HUE_RANGES:
        raise ValueError(f"Unknown appearance domain '{domain}'")

    rng = np.random.default_rng(seed)
    hue_lo, hue_hi = HUE_RANGES[domain]

    colors = np.zeros((LIMB_COUNT, 3))
    for i in range(LIMB_COUNT):
        hue = rng.uniform(hue_lo, hue_hi)
        sat = rng.uniform(0.5, 1.0)
        val = rng.uniform(0.55, 1.0)
        colors[i] = colorsys.hsv_to_rgb(hue, sat, val)

    widths = rng.uniform(2.5, 4.5, size=LIMB_COUNT)
    widths[0] *= 1.6    # torso

    torso_scale = float(rng.uniform(0.7, 1.3))
    style = BACKGROUND_STYLES[int(rng.integers(len(BACKGROUND_STYLES)))]

    # backgrounds stay dark and unsaturated so limbs remain visible
    background = rng.uniform(0.0, 0.35, size=(2, 3))

    return SubjectSpec(subject_id, seed, domain, colors, widths, torso_scale, style, background)


def forward_kinematics(subject: SubjectSpec, pose: PoseSample, size: int) -> np.ndarray:
    """Joint positions in image pixel coordinates (x, y), shape [JOINT_COUNT, 2]"""

    lengths = subject.segment_lengths(size, pose.global_scale)

    pos = np.zeros((JOINT_COUNT, 2))
    absolute = np.zeros(JOINT_COUNT)

    pos[0] = pose.root_position*size

    for j, (name, parent, frac, limits) in enumerate(SKELETON):
        if parent < 0:
            continue

        absolute[j] = absolute[parent] + pose.joint_angles[j]
        direction = np.array((math.sin(absolute[j]), -math.cos(absolute[j])))
        pos[j] = pos[parent] + lengths[j]*direction

    return pos


def supervised_joints(joints: np.ndarray, k_sup: int) -> np.ndarray:
    """Select the first ``k_sup`` supervised joints from a full skeleton array"""

    if k_sup < 1 or k_sup > MAX_K_SUP:
        raise ValueError(f"k_sup must be in [1, {MAX_K_SUP}], got {k_sup}")

    index = [JOINT_NAMES.index(n) for n in SUPERVISED_ORDER[:k_sup]]
    return joints[index]


def in_bounds(joints: np.ndarray, size: int, margin: float=2.0) -> bool:
    return bool(np.all(joints >= margin) and np.all(joints <= size - 1 - margin))


def sample_pose(subject: SubjectSpec, rng: np.random.Generator, size: int=64, prev: PoseSample=None, max_delta: float=0.1,
                jitter: float=0.04, scale_range=(0.9, 1.1), margin: float=2.0, max_tries: int=100) -> PoseSample:
    """Draw a pose obeying the joint limits with every joint inside the image

    In sequential mode (``prev`` given) each relative angle moves by at most
    ``max_delta`` from the previous pose while root and scale stay fixed, which
    keeps consecutive frames smooth. Otherwise all angles are drawn uniformly
    within limits and the root is jittered around the image center.
    """

    lo, hi = joint_limits()

    for i in range(max_tries):

        if prev is not None:
            delta = rng.uniform(-max_delta, max_delta, size=JOINT_COUNT)
            angles = np.clip(prev.joint_angles + delta, lo, hi)
            angles[0] = 0.0
            pose = PoseSample(angles, prev.root_position.copy(), prev.global_scale)
        else:
            angles = rng.uniform(lo, hi)
            angles[0] = 0.0
            root = np.array((0.5, 0.55)) + rng.uniform(-jitter, jitter, size=2)
            pose = PoseSample(angles, root, rng.uniform(*scale_range))

        if in_bounds(forward_kinematics(subject, pose, size), size, margin):
            return pose

    if prev is not None:
        # no admissible move found, hold the previous pose
        return prev.copy()

    raise RuntimeError(f"Could not sample an in-bounds pose for subject {subject.subject_id} after {max_tries} tries")


def displacement_bound(subject: SubjectSpec, pose: PoseSample, max_delta: float, size: int) -> np.ndarray:
    """Upper bound on per-frame joint displacement in pixels for sequential sampling

    A segment at depth d turns by at most d*max_delta, and its endpoint moves by at
    most its length times that angle, bounds accumulate along the chain to the root.
    """

    lengths = subject.segment_lengths(size, pose.global_scale)
    depth = joint_depths()

    bound = np.zeros(JOINT_COUNT)
    for j, (name, parent, frac, limits) in enumerate(SKELETON):
        if parent < 0:
            continue
        bound[j] = bound[parent] + lengths[j]*depth[j]*max_delta

    return bound
