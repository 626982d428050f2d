# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

"""Rendering of puppet frames and assembly of multi-subject datasets.

On disk a dataset is a directory holding::

    manifest.json               {version, image_size, k_sup, subjects: [{id, seed, n_frames, mode, domain}]}
    frames/<id>/<idx>.bin       image, raw little-endian f64 of shape (3, H, W)
    frames/<id>/<idx>.json      ground truth joints and the pose they were rendered from
"""

import os
import json
import dataclasses

import numpy as np

from typing import List

from ttpk.types import Tensor, ConfigError, DataError, float64
from ttpk.pose import puppet
from ttpk.pose.puppet import SubjectSpec, PoseSample
from ttpk.pose.model import KeypointSet


DATASET_VERSION = 1

MODE_SEQUENTIAL = "sequential"
MODE_UNORDERED = "unordered"

MODES = (MODE_SEQUENTIAL, MODE_UNORDERED)


class PoseOutOfBounds(ValueError):
    """Raised by render_frame when a joint leaves the image, the caller resamples the pose"""
    pass


@dataclasses.dataclass
class DataConfig:

    n_subjects: int = 12
    n_test: int = 4                 # the last n_test subjects use the test appearance domain
    frames_per_subject: int = 50
    image_size: int = 64
    k_sup: int = 6
    mode: str = MODE_SEQUENTIAL
    max_delta: float = 0.1          # per-frame relative angle change in sequential mode (radians)
    seed: int = 0

    def validate(self):

        if self.n_subjects < 1:
            raise ConfigError(f"n_subjects must be >= 1, got {self.n_subjects}")
        if not 0 <= self.n_test <= self.n_subjects:
            raise ConfigError(f"n_test must be in [0, n_subjects], got {self.n_test}")
        if self.frames_per_subject < 1:
            raise ConfigError(f"frames_per_subject must be >= 1, got {self.frames_per_subject}")
        if self.image_size < 32 or self.image_size > 128 or self.image_size % 8 != 0:
            raise ConfigError(f"image_size must be a multiple of 8 in [32, 128], got {self.image_size}")
        if not 1 <= self.k_sup <= puppet.MAX_K_SUP:
            raise ConfigError(f"k_sup must be in [1, {puppet.MAX_K_SUP}], got {self.k_sup}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.max_delta < 0.0:
            raise ConfigError(f"max_delta must be >= 0, got {self.max_delta}")

        return self


class Frame:
    """One rendered image of a subject

    Attributes:
        image (Tensor): Shape [3, H, W], values in [0,1]
        gt_joints (KeypointSet): Supervised joints in image pixel coordinates (x, y)
        subject_id (int): Owning subject
        frame_index (int): Position within the subject sequence
        pose (PoseSample): Articulation the frame was rendered from
    """

    def __init__(self, image: Tensor, gt_joints: KeypointSet, subject_id: int, frame_index: int, pose: PoseSample=None):

        self.image = image
        self.gt_joints = gt_joints
        self.subject_id = subject_id
        self.frame_index = frame_index
        self.pose = pose

    @property
    def size(self):
        return self.image.shape[-1]


class SubjectDataset:
    """Ordered frames of a single subject"""

    def __init__(self, subject: SubjectSpec, frames: List[Frame], mode: str=MODE_SEQUENTIAL):

        self.subject = subject
        self.frames = frames
        self.mode = mode

    @property
    def subject_id(self):
        return self.subject.subject_id

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def head(self, n):
        """Dataset restricted to the first ``n`` frames"""
        return SubjectDataset(self.subject, self.frames[:n], self.mode)

    def validate(self):

        last = -1
        for f in self.frames:
            if f.subject_id != self.subject_id:
                raise DataError(f"Frame {f.frame_index} belongs to subject {f.subject_id}, expected {self.subject_id}")
            if f.frame_index <= last:
                raise DataError(f"Frame indices of subject {self.subject_id} are not strictly increasing")
            last = f.frame_index

        return self


#----------------------
# rendering

def render_background(subject: SubjectSpec, size: int) -> np.ndarray:
    """Background of the subject in HWC layout, a pure function of the subject"""

    c0, c1 = subject.background_colors

    if subject.background_style == puppet.BACKGROUND_FLAT:
        return np.broadcast_to(c0, (size, size, 3)).copy()

    if subject.background_style == puppet.BACKGROUND_GRADIENT:
        t = np.linspace(0.0, 1.0, size)[:, None, None]
        return np.broadcast_to(c0 + (c1 - c0)*t, (size, size, 3)).copy()

    if subject.background_style == puppet.BACKGROUND_NOISE:
        rng = np.random.default_rng([subject.appearance_seed, size])
        t = rng.random((size, size, 1))
        return c0 + (c1 - c0)*t

    raise ValueError(f"Unknown background style '{subject.background_style}'")


def capsule_coverage(a, b, radius, size) -> np.ndarray:
    """Anti-aliased coverage in [0,1] of a capsule between points a and b, sampled at pixel centers"""

    ys, xs = np.mgrid[0:size, 0:size].astype(float64)
    p = np.stack([xs, ys], axis=-1)

    ab = b - a
    denom = float(np.dot(ab, ab))
    if denom > 0.0:
        t = np.clip(((p - a) @ ab)/denom, 0.0, 1.0)
    else:
        t = np.zeros((size, size))

    closest = a + t[..., None]*ab
    dist = np.linalg.norm(p - closest, axis=-1)

    return np.clip(radius - dist + 0.5, 0.0, 1.0)


def render_frame(subject: SubjectSpec, pose: PoseSample, size: int=64, k_sup: int=6, frame_index: int=0) -> Frame:
    """Draw the subject in the given pose

    Limbs are capsules between joints drawn in a fixed painter's order on top of
    the subject background, the head is an extra disk. Segment lengths and limb
    widths include ``pose.global_scale``, the neck-pelvis distance of the
    ground truth is ``BASE_TORSO*torso_scale*size*global_scale``.

    Raises:
        PoseOutOfBounds: When any joint lies within 2 px of the image border
    """

    if size < 32:
        raise ValueError(f"render_frame() requires size >= 32, got {size}")

    joints = puppet.forward_kinematics(subject, pose, size)

    if not puppet.in_bounds(joints, size):
        raise PoseOutOfBounds(f"Pose of subject {subject.subject_id} places a joint outside the image")

    image = render_background(subject, size)
    scale = size/puppet.REFERENCE_SIZE*pose.global_scale

    for j in puppet.DRAW_ORDER:
        parent = puppet.SKELETON[j][1]
        limb = j - 1

        cov = capsule_coverage(joints[parent], joints[j], 0.5*subject.limb_widths[limb]*scale, size)[..., None]
        image = image*(1.0 - cov) + subject.limb_colors[limb]*cov

    head = puppet.JOINT_NAMES.index("head")
    cov = capsule_coverage(joints[head], joints[head], 1.2*subject.limb_widths[head - 1]*scale, size)[..., None]
    image = image*(1.0 - cov) + subject.limb_colors[head - 1]*cov

    image = np.clip(image, 0.0, 1.0).transpose(2, 0, 1)
    gt = KeypointSet(puppet.supervised_joints(joints, k_sup))

    return Frame(Tensor(image), gt, subject.subject_id, frame_index, pose)


#----------------------
# dataset assembly

def subject_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def build_subject(subject: SubjectSpec, n_frames: int, size: int, mode: str, seed: int, k_sup: int=6, max_delta: float=0.1) -> SubjectDataset:

    rng = np.random.default_rng([seed, subject.subject_id, 1])

    frames = []
    pose = None

    for i in range(n_frames):

        prev = pose if mode == MODE_SEQUENTIAL else None
        pose = puppet.sample_pose(subject, rng, size, prev=prev, max_delta=max_delta)

        frames.append(render_frame(subject, pose, size, k_sup, i))

    return SubjectDataset(subject, frames, mode)


def build_dataset(n_subjects: int, frames_per_subject: int, size: int=64, mode: str=MODE_SEQUENTIAL, seed: int=0,
                  k_sup: int=6, n_test: int=None, max_delta: float=0.1) -> List[SubjectDataset]:
    """Generate one SubjectDataset per subject, a pure function of the arguments

    The last ``n_test`` subjects (default a third) draw their appearance from the
    test domain, see :func:`split_subjects`.
    """

    if n_subjects < 1:
        raise ValueError(f"build_dataset() requires n_subjects >= 1, got {n_subjects}")

    if mode not in MODES:
        raise ValueError(f"Unknown dataset mode '{mode}'")

    if n_test is None:
        n_test = n_subjects//3

    datasets = []
    for i in range(n_subjects):

        domain = puppet.DOMAIN_TEST if i >= n_subjects - n_test else puppet.DOMAIN_TRAIN
        subject = puppet.sample_subject(subject_seed(seed, i), i, domain)

        datasets.append(build_subject(subject, frames_per_subject, size, mode, seed, k_sup, max_delta))

    return datasets


def build_from_config(config: DataConfig) -> List[SubjectDataset]:
    config.validate()
    return build_dataset(config.n_subjects, config.frames_per_subject, config.image_size, config.mode,
                         config.seed, config.k_sup, config.n_test, config.max_delta)


def split_subjects(datasets: List[SubjectDataset]):
    """Returns (train, test) lists by appearance domain, the two never share a subject"""

    train = [d for d in datasets if d.subject.domain == puppet.DOMAIN_TRAIN]
    test = [d for d in datasets if d.subject.domain == puppet.DOMAIN_TEST]

    return train, test


def shuffled(dataset: SubjectDataset, rng: np.random.Generator) -> SubjectDataset:
    """Copy of the dataset with frames permuted, removes any temporal order

    Frames keep their original ``frame_index`` so predictions can be matched to
    ground truth, the result therefore does not pass :meth:`SubjectDataset.validate`.
    """

    order = rng.permutation(len(dataset))
    return SubjectDataset(dataset.subject, [dataset.frames[i] for i in order], MODE_UNORDERED)


def mean_displacement(dataset: SubjectDataset) -> float:
    """Mean per-joint ground truth displacement between consecutive frames in pixels"""

    if len(dataset) < 2:
        return 0.0

    pts = np.stack([f.gt_joints.numpy() for f in dataset.frames])
    return float(np.linalg.norm(pts[1:] - pts[:-1], axis=-1).mean())


#----------------------
# serialization

def _frame_paths(root, subject_id, index):
    base = os.path.join(root, "frames", str(subject_id), "{:05d}".format(index))
    return base + ".bin", base + ".json"


def save_dataset(datasets: List[SubjectDataset], path):

    if len(datasets) == 0:
        raise ValueError("save_dataset() requires at least one subject")

    size = datasets[0].frames[0].size
    k_sup = datasets[0].frames[0].gt_joints.k

    manifest = {
        "version": DATASET_VERSION,
        "image_size": size,
        "k_sup": k_sup,
        "subjects": [],
    }

    for ds in datasets:

        manifest["subjects"].append({
            "id": ds.subject_id,
            "seed": ds.subject.appearance_seed,
            "n_frames": len(ds),
            "mode": ds.mode,
            "domain": ds.subject.domain,
        })

        os.makedirs(os.path.join(path, "frames", str(ds.subject_id)), exist_ok=True)

        for f in ds.frames:
            bin_path, json_path = _frame_paths(path, ds.subject_id, f.frame_index)

            with open(bin_path, "wb") as fb:
                fb.write(np.ascontiguousarray(f.image.numpy(), dtype="<f8").tobytes())

            record = {
                "frame_index": f.frame_index,
                "gt_joints": f.gt_joints.numpy().tolist(),
                "confidence": f.gt_joints.confidence.tolist(),
                "pose": f.pose.to_dict() if f.pose is not None else None,
            }
            with open(json_path, "w") as fj:
                json.dump(record, fj)

    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def _read_json(path):

    if not os.path.exists(path):
        raise DataError(f"Missing file '{path}'")

    try:
        with open(path, "r") as f:
            return json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"Corrupt JSON file '{path}': {e}") from e


def load_dataset(path) -> List[SubjectDataset]:
    """Inverse of :func:`save_dataset`

    Raises:
        DataError: On a corrupt manifest, a missing or truncated frame file or a frame count mismatch
    """

    manifest_path = os.path.join(path, "manifest.json")
    manifest = _read_json(manifest_path)

    try:
        version = manifest["version"]
        size = int(manifest["image_size"])
        subjects = manifest["subjects"]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"Corrupt manifest '{manifest_path}': {e}") from e

    if version != DATASET_VERSION:
        raise DataError(f"Unsupported dataset version {version} in '{manifest_path}'")

    expected = 3*size*size*8
    datasets = []

    for entry in subjects:

        try:
            subject_id = int(entry["id"])
            seed = int(entry["seed"])
            n_frames = int(entry["n_frames"])
            mode = entry["mode"]
            domain = entry.get("domain", puppet.DOMAIN_TRAIN)
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Corrupt subject entry in '{manifest_path}': {e}") from e

        frame_dir = os.path.join(path, "frames", str(subject_id))
        found = [n for n in os.listdir(frame_dir) if n.endswith(".bin")] if os.path.isdir(frame_dir) else []

        if len(found) != n_frames:
            raise DataError(f"Manifest '{manifest_path}' lists {n_frames} frames for subject {subject_id}, "
                            f"found {len(found)} in '{frame_dir}'")

        subject = puppet.sample_subject(seed, subject_id, domain)
        frames = []

        for name in sorted(found):
            stem = os.path.splitext(name)[0]
            if not (stem.isascii() and stem.isdigit()) or "{:05d}.bin".format(int(stem)) != name:
                raise DataError(f"Unexpected frame file '{name}' in '{frame_dir}'")

            index = int(stem)
            bin_path, json_path = _frame_paths(path, subject_id, index)

            with open(bin_path, "rb") as fb:
                raw = fb.read()

            if len(raw) != expected:
                raise DataError(f"Frame file '{bin_path}' holds {len(raw)} bytes, expected {expected}")

            image = np.frombuffer(raw, dtype="<f8").reshape(3, size, size).astype(float64)

            record = _read_json(json_path)
            try:
                gt = KeypointSet(np.asarray(record["gt_joints"], dtype=float64), record["confidence"])
                pose = PoseSample.from_dict(record["pose"]) if record.get("pose") is not None else None
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"Corrupt frame record '{json_path}': {e}") from e

            frames.append(Frame(Tensor(image), gt, subject_id, index, pose))

        datasets.append(SubjectDataset(subject, frames, mode).validate())

    return datasets
