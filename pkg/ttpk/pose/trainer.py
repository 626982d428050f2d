# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

"""Joint supervised / self-supervised training of the pose network.

The total objective is ``L = L_sup + lambda * L_self``. L_self reconstructs a
target frame from its condensed keypoints and the appearance of another frame
of the same subject, L_sup regresses Gaussian ground truth heatmaps.
"""

import os
import json
import math
import warnings
import dataclasses

import numpy as np
import scipy.ndimage

from typing import List

import ttpk
import ttpk.config

from ttpk.types import Tensor, ConfigError, DataError, DimensionError, NumericError, float64
from ttpk.optimizer import ParamStore, Optimizer, load_checkpoint
from ttpk.utils import similarity_about, transform_points, ScopedTimer

from ttpk.pose import model
from ttpk.pose.model import NetConfig, HeatmapStack, KeypointSet
from ttpk.pose.transformer import supervised_heatmaps
from ttpk.pose.dataset import SubjectDataset, Frame


VARIANT_BASELINE = "baseline"
VARIANT_FEAT_SHARED = "feat_shared"
VARIANT_TRANSFORMER = "transformer"

VARIANTS = (VARIANT_BASELINE, VARIANT_FEAT_SHARED, VARIANT_TRANSFORMER)

VARIANT_ALIASES = {
    "feat_shared_keypoint": VARIANT_FEAT_SHARED,
    "transformer_keypoint": VARIANT_TRANSFORMER,
}

# parameter groups a variant never uses during joint training
UNUSED_GROUPS = {
    VARIANT_BASELINE: ("self.", "app.", "dec.", "xf."),
    VARIANT_FEAT_SHARED: ("xf.",),
    VARIANT_TRANSFORMER: ("supb.",),
}
# named schedules, the full-scale ones use batch 32 and lr 1e-3 divided by 10 at each milestone
# schedules at full scale: batch 32, lr 1e-3, lr divided by 10 at each milestone
PRESETS = {
    "desk": {"batch_size": 8, "lr": 1.e-3, "lam": 1.e-3, "lr_milestones": [1500, 2250, 2750], "steps": 3000},
    "bbc": {"batch_size": 32, "lr": 1.e-3, "lam": 1.e-3, "lr_milestones": [18000, 24000], "steps": 28000},
    "penn": {"batch_size": 32, "lr": 1.e-3, "lam": 1.e-3, "lr_milestones": [246000, 328000], "steps": 383000},
    "h36m": {"batch_size": 32, "lr": 1.e-3, "lam": 1.e-5, "lr_milestones": [90000, 120000], "steps": 140000},
}


def canonical_variant(name: str) -> str:

    name = VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ConfigError(f"Unknown variant '{name}', expected one of {VARIANTS}")

    return name


@dataclasses.dataclass
class TrainConfig:

    lam: float = 1.e-3                  # weight of the self-supervised loss
    lr: float = 1.e-3
    lr_milestones: List[int] = dataclasses.field(default_factory=lambda: [1500, 2250, 2750])
    batch_size: int = 8
    steps: int = 3000
    variant: str = VARIANT_TRANSFORMER
    seed: int = 0
    perceptual: bool = True
    augment: bool = True
    rotation_deg: float = 15.0
    scale_range: List[float] = dataclasses.field(default_factory=lambda: [0.9, 1.1])
    log_interval: int = 50
    preset: str = "desk"

    def validate(self):

        self.variant = canonical_variant(self.variant)

        if self.lam < 0.0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.lr <= 0.0:
            raise ConfigError(f"Training learning rate must be positive, got {self.lr}")
        if any(b <= a for a, b in zip(self.lr_milestones[:-1], self.lr_milestones[1:])):
            raise ConfigError(f"Learning rate milestones must be increasing, got {self.lr_milestones}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.preset not in PRESETS:
            raise ConfigError(f"Unknown preset '{self.preset}', expected one of {list(PRESETS)}")
        if len(self.scale_range) != 2 or not 0.0 < self.scale_range[0] <= self.scale_range[1]:
            raise ConfigError(f"scale_range must be [lo, hi] with 0 < lo <= hi, got {self.scale_range}")

        return self

    @property
    def effective_lambda(self):
        return 0.0 if self.variant == VARIANT_BASELINE else self.lam


def apply_preset(config: TrainConfig, name: str) -> TrainConfig:
    """Return a copy of ``config`` with the schedule of a named preset"""

    if name not in PRESETS:
        raise ConfigError(f"Unknown preset '{name}', expected one of {list(PRESETS)}")

    return dataclasses.replace(config, preset=name, **PRESETS[name])


#----------------------
# pair batches

class PairBatch:
    """Target/source frame pairs of one subject each, with the augmentation applied to both

    Attributes:
        targets (List[Frame]): Target frames
        sources (List[Frame]): Source frames, same subject as the target of each pair
        augmentations (List[tuple]): (rotation in radians, scale) per pair
        target_images (Tensor): Augmented targets, shape [n, 3, H, W]
        source_images (Tensor): Augmented sources, shape [n, 3, H, W]
        target_joints (np.ndarray): Augmented target joints in image pixels, shape [n, k_sup, 2]
    """

    def __init__(self, targets, sources, augmentations, target_images, source_images, target_joints):

        self.targets = targets
        self.sources = sources
        self.augmentations = augmentations
        self.target_images = target_images
        self.source_images = source_images
        self.target_joints = target_joints

    def __len__(self):
        return len(self.targets)


def augment_image(image: np.ndarray, angle: float, scale: float) -> np.ndarray:
    """Rotate and scale a (3, H, W) image about its center

    Points map as p' = A p + t with (A, t) from :func:`ttpk.similarity_about`,
    the same map must be applied to the joints with :func:`augment_points`.
    """

    if angle == 0.0 and scale == 1.0:
        return image

    h, w = image.shape[-2:]
    A, t = similarity_about(((w - 1)/2.0, (h - 1)/2.0), angle, scale)

    # affine_transform pulls output index o from input index M o + offset in (row, col) order
    Ainv = np.linalg.inv(A)
    swap = np.array(((0.0, 1.0), (1.0, 0.0)))
    M = swap @ Ainv @ swap
    offset = -(swap @ Ainv @ t)

    out = np.empty_like(image)
    for c in range(image.shape[0]):
        out[c] = scipy.ndimage.affine_transform(image[c], M, offset=offset, order=1, mode="nearest")

    return out


def augment_points(points: np.ndarray, angle: float, scale: float, size: int) -> np.ndarray:

    if angle == 0.0 and scale == 1.0:
        return np.array(points, dtype=float64)

    A, t = similarity_about(((size - 1)/2.0, (size - 1)/2.0), angle, scale)
    return transform_points(points, A, t)


def make_pair_batch(datasets: List[SubjectDataset], batch_size: int, rng: np.random.Generator, mode: str="joint",
                    target_index: int=None, augment: bool=True, rotation_deg: float=15.0, scale_range=(0.9, 1.1)) -> PairBatch:
    """Draw a batch of (target, source) pairs

    Modes:
        joint / offline: subject, target and source random, target != source
        online: ``datasets`` holds one subject, the target of every pair is frame
            ``target_index`` and the sources are distinct frames before it

    Every pair draws its own rotation in [-rotation_deg, rotation_deg] and scale in
    ``scale_range``, applied identically to its target and source.
    """

    if mode == "online":

        if len(datasets) != 1:
            raise ValueError("make_pair_batch() online mode expects a single subject")

        if target_index is None or target_index < 1:
            raise ValueError(f"make_pair_batch() online mode requires target_index >= 1, got {target_index}")

        ds = datasets[0]
        n = min(batch_size, target_index)
        src = rng.choice(target_index, size=n, replace=False)
        pairs = [(ds, target_index, int(s)) for s in src]

    elif mode in ("joint", "offline"):

        eligible = []
        for ds in datasets:
            if len(ds) < 2:
                warnings.warn(f"Subject {ds.subject_id} has {len(ds)} frame(s) and is skipped for pair sampling")
            else:
                eligible.append(ds)

        if len(eligible) == 0:
            raise ValueError("make_pair_batch() found no subject with at least two frames")

        pairs = []
        for i in range(batch_size):
            ds = eligible[int(rng.integers(len(eligible)))]
            t, s = rng.choice(len(ds), size=2, replace=False)
            pairs.append((ds, int(t), int(s)))

    else:
        raise ValueError(f"Unknown pair sampling mode '{mode}'")

    targets = []
    sources = []
    augmentations = []
    timg = []
    simg = []
    joints = []

    for ds, t, s in pairs:

        if augment:
            angle = math.radians(rng.uniform(-rotation_deg, rotation_deg))
            scale = float(rng.uniform(scale_range[0], scale_range[1]))
        else:
            angle, scale = 0.0, 1.0

        target = ds.frames[t]
        source = ds.frames[s]
        size = target.size

        targets.append(target)
        sources.append(source)
        augmentations.append((angle, scale))

        timg.append(augment_image(target.image.numpy(), angle, scale))
        simg.append(augment_image(source.image.numpy(), angle, scale))
        joints.append(augment_points(target.gt_joints.numpy(), angle, scale, size))

    return PairBatch(targets, sources, augmentations, Tensor(np.stack(timg)), Tensor(np.stack(simg)), np.stack(joints))


#----------------------
# losses

class PerceptualNet:
    """Fixed, randomly initialized 3-stage convolutional pyramid used as a feature space

    The weights are drawn once from ``seed`` and never trained, the network is
    not part of any ParamStore.
    """

    def __init__(self, channels=(8, 16, 32), seed=1234):

        rng = np.random.default_rng(seed)

        self.weights = []
        c_in = 3
        for c in channels:
            self.weights.append(Tensor(rng.standard_normal((c, c_in, 3, 3))*math.sqrt(2.0/(9*c_in))))
            c_in = c

    def features(self, image: Tensor) -> List[Tensor]:

        feats = []
        x = image
        for i, w in enumerate(self.weights):
            if i > 0:
                x = ttpk.subsample(x, 2)
            x = ttpk.relu(ttpk.conv2d(x, w, pad=1))
            feats.append(x)

        return feats


def reconstruction_loss(I_t: Tensor, I_hat: Tensor, feat_net: PerceptualNet=None) -> Tensor:
    """Perceptual distance plus mean squared pixel error between target and reconstruction"""

    if I_t.shape != I_hat.shape:
        raise DimensionError(f"reconstruction_loss() shape mismatch, got {I_t.shape} and {I_hat.shape}")

    loss = ttpk.mse_loss(I_hat, I_t)

    if feat_net is not None:
        for f_hat, f_t in zip(feat_net.features(I_hat), feat_net.features(I_t)):
            loss = ttpk.add(loss, ttpk.mse_loss(f_hat, f_t))

    return loss


# joints clamped into the heatmap by supervised_loss
clamp_counter = {"joints": 0}


def ground_truth_heatmaps(joints: np.ndarray, sigma: float, h: int, w: int, image_size: int=None) -> np.ndarray:
    """Gaussian ground truth maps, joints given in image pixels when ``image_size`` is set"""

    pts = np.array(joints, dtype=float64)
    if image_size is not None:
        pts = pts*(h/image_size)

    lo = np.zeros(2)
    hi = np.array((w - 1, h - 1), dtype=float64)
    clipped = np.clip(pts, lo, hi)

    outside = int(np.sum(np.any(clipped != pts, axis=-1)))
    if outside > 0:
        clamp_counter["joints"] += outside
        warnings.warn(f"{outside} ground truth joint(s) outside the heatmap were clamped")

    return ttpk.gaussian_maps(clipped, sigma, h, w).numpy()


def supervised_loss(H_sup: HeatmapStack, gt_joints, sigma: float, image_size: int=None) -> Tensor:
    """Mean squared error against Gaussian maps rendered at the ground truth joints"""

    joints = gt_joints.numpy() if isinstance(gt_joints, (KeypointSet, Tensor)) else gt_joints

    H_gt = ground_truth_heatmaps(joints, sigma, H_sup.h, H_sup.w, image_size)
    return ttpk.mse_loss(H_sup.maps, H_gt)


def supervised_branch(F: Tensor, params: ParamStore, variant: str, H_self: HeatmapStack=None, training=False, rng=None):
    """Supervised heatmaps of a variant, returns (H_sup, W) with W None unless transformer"""

    if variant == VARIANT_TRANSFORMER:
        if H_self is None:
            H_self = model.self_head(F, params)
        return supervised_heatmaps(F, H_self, params, training, rng)

    return model.baseline_sup_head(F, params), None


def joint_loss(batch: PairBatch, params: ParamStore, config: TrainConfig, rng=None, feat_net: PerceptualNet=None, training: bool=True):
    """Returns (total, L_sup, L_self), L_self is a constant zero for the baseline variant"""

    net = params.config
    variant = canonical_variant(config.variant)

    F = model.encode(batch.target_images, params)

    H_self = None
    L_self = Tensor(0.0)

    if variant != VARIANT_BASELINE:
        H_self = model.self_head(F, params)
        kps = model.condense(H_self, net.temperature)
        F_kp = model.gaussian_rerender(kps, net.sigma, H_self.h, H_self.w)
        F_app = model.appearance_extract(batch.source_images, params)
        I_hat = model.render_decode(F_app, F_kp, params)

        L_self = reconstruction_loss(batch.target_images, I_hat, feat_net)

    H_sup, W = supervised_branch(F, params, variant, H_self, training, rng)
    L_sup = supervised_loss(H_sup, batch.target_joints, net.sigma, net.image_size)

    if variant == VARIANT_BASELINE:
        return L_sup, L_sup, L_self

    total = ttpk.add(L_sup, ttpk.mul(L_self, config.lam))

    return total, L_sup, L_self


def collect_gradients(params: ParamStore, tape) -> dict:
    """Gradients for every unfrozen parameter, zeros for those the loss did not reach"""

    grads = {}
    for name, p in params.params.items():
        if name in params.frozen:
            continue
        g = tape.gradients.get(p)
        grads[p] = g if g is not None else Tensor(np.zeros(p.shape))

    return grads


def nonfinite_gradients(params: ParamStore, grads: dict) -> List[str]:
    """Names of the parameters whose gradient holds NaN or Inf"""

    return [name for name, p in params.params.items() if p in grads and not np.all(np.isfinite(grads[p].numpy()))]


#----------------------
# model files

def save_model(params: ParamStore, path, variant: str, step: int, with_state: bool=True):
    """Write the parameter container plus a JSON sidecar with variant, architecture and step"""

    params.save(path, with_state)

    meta = {
        "variant": variant,
        "step": step,
        "net": dataclasses.asdict(params.config),
    }
    with open(path + ".json", "w") as f:
        json.dump(meta, f, indent=2)


def load_model(path):
    """Returns (params, meta) as written by :func:`save_model`"""

    params = load_checkpoint(path)

    meta_path = path + ".json"
    if not os.path.exists(meta_path):
        raise DataError(f"Missing model description '{meta_path}'")

    try:
        with open(meta_path, "r") as f:
            meta = json.load(f)
        params.config = NetConfig(**meta["net"])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"Corrupt model description '{meta_path}': {e}") from e

    return params, meta


#----------------------
# inference

def forward_eval(params: ParamStore, images: Tensor, variant: str):
    """Inference pass, returns a dict with H_self (None for baseline), H_sup and W"""

    variant = canonical_variant(variant)

    F = model.encode(images, params)
    H_self = model.self_head(F, params) if variant != VARIANT_BASELINE else None
    H_sup, W = supervised_branch(F, params, variant, H_self)

    return {"H_self": H_self, "H_sup": H_sup, "W": W}


def predict(params: ParamStore, frames: List[Frame], variant: str, chunk: int=16) -> np.ndarray:
    """Predicted supervised joints in image pixels for every frame, shape [n, k_sup, 2]"""

    size = params.config.image_size
    out = []

    for i in range(0, len(frames), chunk):
        images = Tensor(np.stack([f.image.numpy() for f in frames[i:i + chunk]]))
        res = forward_eval(params, images, variant)
        out.append(model.decode_keypoints(res["H_sup"], size).numpy())

    if len(out) == 0:
        return np.zeros((0, params.config.k_sup, 2))

    return np.concatenate(out, axis=0)


#----------------------
# training loop

def write_metrics(path, rows, append=False):

    with open(path, "a" if append else "w") as f:
        if not append:
            f.write("step,lr,total,loss_sup,loss_self\n")
        for r in rows:
            f.write("{},{:.6e},{:.6e},{:.6e},{:.6e}\n".format(*r))


def train(datasets: List[SubjectDataset], config: TrainConfig, net_config: NetConfig=None, out_dir=None, resume=None):
    """Joint training over the given (training) subjects

    Args:
        datasets: Training subjects
        config: Schedule and objective
        net_config: Architecture, ignored when resuming
        out_dir: Receives ``model.ttpk``, milestone checkpoints and ``metrics.csv`` when set
        resume: Path of a checkpoint written by a previous run of the same config

    Returns:
        Tuple (params, rows) with one (step, lr, total, loss_sup, loss_self) row per step

    Raises:
        NumericError: On a non-finite loss, after writing the last good parameters to ``out_dir``
    """

    ttpk.init()
    config.validate()

    if resume is not None:
        params, meta = load_model(resume)
        start = int(meta["step"])
        if canonical_variant(meta["variant"]) != config.variant:
            raise ConfigError(f"Checkpoint '{resume}' was trained as '{meta['variant']}', config requests '{config.variant}'")
    else:
        if net_config is None:
            net_config = NetConfig()
        params = model.build_pose_net(net_config, config.seed)
        start = 0

    params.freeze(UNUSED_GROUPS[config.variant])

    optimizer = Optimizer(params, config.lr, config.lr_milestones)
    feat_net = PerceptualNet() if config.perceptual and config.variant != VARIANT_BASELINE else None

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    print("train: variant {} lambda {} steps {} batch {} ({} parameters)".format(
        config.variant, config.effective_lambda, config.steps, config.batch_size, params.num_elements()))

    rows = []

    with ScopedTimer("train", active=ttpk.config.verbose):

        for step in range(start, config.steps):

            rng = np.random.default_rng([config.seed, step])

            batch = make_pair_batch(datasets, config.batch_size, rng, "joint", augment=config.augment,
                                    rotation_deg=config.rotation_deg, scale_range=config.scale_range)

            def keep_last_good():
                if out_dir is not None:
                    save_model(params, os.path.join(out_dir, "last_good.ttpk"), config.variant, step)
                    write_metrics(os.path.join(out_dir, "metrics.csv"), rows, append=start > 0)

            try:
                with ttpk.Tape() as tape:
                    total, L_sup, L_self = joint_loss(batch, params, config, rng, feat_net, training=True)

            except NumericError as e:
                keep_last_good()
                raise NumericError(f"train: non-finite loss at step {step}, last good parameters kept") from e

            tape.backward(total)
            grads = collect_gradients(params, tape)

            # parameters are only updated from finite gradients
            bad = nonfinite_gradients(params, grads)
            if bad:
                keep_last_good()
                raise NumericError(f"train: non-finite gradient for {', '.join(bad)} at step {step}, last good parameters kept")

            lr = optimizer.step(grads, step)

            rows.append((step, lr, total.item(), L_sup.item(), L_self.item()))

            if config.log_interval > 0 and (step % config.log_interval == 0 or step == config.steps - 1):
                print("train: step {} lr {:.2e} total {:.6f} sup {:.6f} self {:.6f}".format(*rows[-1]))

            if out_dir is not None and (step + 1) in config.lr_milestones:
                save_model(params, os.path.join(out_dir, "ckpt_{}.ttpk".format(step + 1)), config.variant, step + 1)

    if out_dir is not None:
        save_model(params, os.path.join(out_dir, "model.ttpk"), config.variant, config.steps)
        write_metrics(os.path.join(out_dir, "metrics.csv"), rows, append=start > 0)

    params.unfreeze_all()

    return params, rows
