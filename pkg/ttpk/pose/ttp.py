# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

"""Test-time personalization.

A jointly trained model is fine-tuned on the unlabeled frames of one subject
using only the reconstruction objective. The supervised parts (``supb.`` and
``xf.`` by default) stay frozen, so the supervised prediction improves only
through the shared encoder and the self-supervised head.

Two scenarios are supported:

    online   frames arrive in order, frame T is predicted right after updating
             on (target T, source < T) pairs, no update happens on the first frame
    offline  all frames are available, the model is updated on random pairs of the
             shuffled pool for the same number of steps as the online scenario,
             then every frame is predicted with the final weights
"""

import os
import dataclasses

import numpy as np

from typing import List

import ttpk
import ttpk.config

from ttpk.types import Tensor, ConfigError, NumericError, float64
from ttpk.optimizer import ParamStore, adam_step
from ttpk.utils import ScopedTimer

from ttpk.pose import model
from ttpk.pose import metrics
from ttpk.pose.dataset import SubjectDataset
from ttpk.pose.trainer import (PerceptualNet, make_pair_batch, reconstruction_loss, collect_gradients, nonfinite_gradients,
                               predict, canonical_variant)


SCENARIO_NONE = "none"
SCENARIO_ONLINE = "online"
SCENARIO_OFFLINE = "offline"

SCENARIOS = (SCENARIO_ONLINE, SCENARIO_OFFLINE)

REINIT_NEVER = "never"
REINIT_PER_SUBJECT = "per_subject"

REINIT_MODES = (REINIT_NEVER, REINIT_PER_SUBJECT)


@dataclasses.dataclass
class TTPConfig:

    scenario: str = SCENARIO_ONLINE
    lr: float = 1.e-4
    update_iters: int = 1               # update steps per incoming frame
    reinit: str = REINIT_NEVER
    freeze: List[str] = dataclasses.field(default_factory=lambda: ["supb.", "xf."])
    batch_size: int = 1
    offline_steps: int = None           # None matches the online step count
    augment: bool = True
    perceptual: bool = True
    seed: int = 0

    def validate(self):

        if self.scenario not in SCENARIOS:
            raise ConfigError(f"Unknown TTP scenario '{self.scenario}', expected one of {SCENARIOS}")
        if self.lr < 0.0:
            raise ConfigError(f"TTP learning rate must be >= 0, got {self.lr}")
        if self.update_iters < 1:
            raise ConfigError(f"update_iters must be >= 1, got {self.update_iters}")
        if self.reinit not in REINIT_MODES:
            raise ConfigError(f"Unknown reinit mode '{self.reinit}', expected one of {REINIT_MODES}")
        if self.batch_size < 1:
            raise ConfigError(f"TTP batch_size must be >= 1, got {self.batch_size}")
        if self.offline_steps is not None and self.offline_steps < 0:
            raise ConfigError(f"offline_steps must be >= 0, got {self.offline_steps}")

        return self


class TTPTrace:
    """One record per test frame of a subject

    Each record holds ``frame_index``, ``loss_self`` (mean reconstruction loss of
    the updates preceding the prediction, 0 when none), ``prediction`` (k_sup, 2),
    ``prediction_before`` (online only, prediction of the same frame before its
    updates) and ``pck`` of the prediction in percent.
    """

    def __init__(self, subject_id, scenario):

        self.subject_id = subject_id
        self.scenario = scenario
        self.records = []
        self.step_losses = []

    def __len__(self):
        return len(self.records)

    def add(self, frame_index, loss_self, prediction, gt, prediction_before=None):

        self.records.append({
            "frame_index": frame_index,
            "loss_self": float(loss_self),
            "prediction": np.asarray(prediction, dtype=float64),
            "prediction_before": prediction_before,
            "pck": metrics.pck(prediction, gt).score,
        })

    def predictions(self) -> np.ndarray:
        return np.stack([r["prediction"] for r in self.records])

    def frame_scores(self) -> np.ndarray:
        return np.array([r["pck"] for r in self.records])

    def to_csv(self, path, baseline=None):
        """Columns frame_index, loss_self, pck_frame, pck_frame_no_ttp"""

        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

        base = baseline.frame_scores() if baseline is not None else [float("nan")]*len(self)

        with open(path, "w") as f:
            f.write("frame_index,loss_self,pck_frame,pck_frame_no_ttp\n")
            for r, b in zip(self.records, base):
                f.write("{},{:.4f},{:.4f},{:.4f}\n".format(r["frame_index"], r["loss_self"], r["pck"], b))


class PersonalizationState:
    """Weights carried across the test subjects together with the subject they were last adapted to"""

    def __init__(self, params: ParamStore, subject_id=None):
        self.params = params
        self.subject_id = subject_id


def reinit_if_needed(state: PersonalizationState, next_subject_id, checkpoint: ParamStore, config: TTPConfig) -> PersonalizationState:
    """Restore the jointly trained weights when switching subject with reinit=per_subject"""

    if state is None:
        return PersonalizationState(checkpoint.copy(), next_subject_id)

    if config.reinit == REINIT_PER_SUBJECT and state.subject_id != next_subject_id:
        state.params.assign(checkpoint)

    state.subject_id = next_subject_id
    return state


def _prepare(params: ParamStore, config: TTPConfig):

    config.validate()
    ttpk.init()

    params.unfreeze_all()
    params.freeze(config.freeze)

    # Adam moments start fresh for every subject and persist across its frames
    params.reset_state()

    return PerceptualNet() if config.perceptual else None


def personalize_step(params: ParamStore, batch, lr: float, feat_net: PerceptualNet=None) -> float:
    """One reconstruction-only Adam update on the unfrozen parameters, returns the loss before the update"""

    with ttpk.Tape() as tape:
        I_hat, H_self, kps, F = model.reconstruct(batch.target_images, batch.source_images, params)
        loss = reconstruction_loss(batch.target_images, I_hat, feat_net)

    tape.backward(loss)
    grads = collect_gradients(params, tape)

    bad = nonfinite_gradients(params, grads)
    if bad:
        raise NumericError(f"ttp: non-finite gradient for {', '.join(bad)}, parameters left unchanged")

    adam_step(params, grads, lr)

    return loss.item()


def predict_frame(params, frame, variant):
    return predict(params, [frame], variant)[0]


def ttp_online(dataset: SubjectDataset, params: ParamStore, config: TTPConfig, variant: str):
    """Causal personalization, adapts ``params`` in place

    Returns:
        Tuple (predictions of shape [n, k_sup, 2], TTPTrace)
    """

    if len(dataset) == 0:
        raise ValueError(f"ttp_online() received an empty dataset for subject {dataset.subject_id}")

    variant = canonical_variant(variant)
    feat_net = _prepare(params, config)
    trace = TTPTrace(dataset.subject_id, SCENARIO_ONLINE)

    for T, frame in enumerate(dataset.frames):

        loss = 0.0
        before = None

        if T >= 1:
            before = predict_frame(params, frame, variant)

            losses = []
            for it in range(config.update_iters):
                rng = np.random.default_rng([config.seed, dataset.subject_id, T, it])
                batch = make_pair_batch([dataset], config.batch_size, rng, "online", target_index=T, augment=config.augment)
                losses.append(personalize_step(params, batch, config.lr, feat_net))

            loss = float(np.mean(losses))
            trace.step_losses.extend(losses)

        trace.add(frame.frame_index, loss, predict_frame(params, frame, variant), frame.gt_joints.numpy(), before)

    params.unfreeze_all()

    return trace.predictions(), trace


def online_step_count(n_frames: int, config: TTPConfig) -> int:
    return max(n_frames - 1, 0)*config.update_iters


def ttp_offline(dataset: SubjectDataset, params: ParamStore, config: TTPConfig, variant: str):
    """Adapt ``params`` in place on the shuffled frame pool, then predict every frame

    Returns:
        Tuple (predictions of shape [n, k_sup, 2], TTPTrace)
    """

    if len(dataset) == 0:
        raise ValueError(f"ttp_offline() received an empty dataset for subject {dataset.subject_id}")

    variant = canonical_variant(variant)
    feat_net = _prepare(params, config)
    trace = TTPTrace(dataset.subject_id, SCENARIO_OFFLINE)

    steps = config.offline_steps
    if steps is None:
        steps = online_step_count(len(dataset), config)

    if len(dataset) < 2:
        steps = 0

    order = np.random.default_rng([config.seed, dataset.subject_id]).permutation(len(dataset))
    pool = SubjectDataset(dataset.subject, [dataset.frames[i] for i in order], dataset.mode)

    for step in range(steps):
        rng = np.random.default_rng([config.seed, dataset.subject_id, step])
        batch = make_pair_batch([pool], config.batch_size, rng, "offline", augment=config.augment)
        trace.step_losses.append(personalize_step(params, batch, config.lr, feat_net))

    predictions = predict(params, dataset.frames, variant)

    # frame T reports the updates online mode would have made before predicting it
    iters = config.update_iters
    for T, frame in enumerate(dataset.frames):
        block = trace.step_losses[(T - 1)*iters:T*iters] if T >= 1 else []
        trace.add(frame.frame_index, np.mean(block) if len(block) else 0.0, predictions[T], frame.gt_joints.numpy())

    params.unfreeze_all()

    return predictions, trace


def no_ttp(dataset: SubjectDataset, params: ParamStore, variant: str):
    """Plain inference with the jointly trained weights, the "none" scenario"""

    trace = TTPTrace(dataset.subject_id, SCENARIO_NONE)
    predictions = predict(params, dataset.frames, variant)

    for frame, p in zip(dataset.frames, predictions):
        trace.add(frame.frame_index, 0.0, p, frame.gt_joints.numpy())

    return predictions, trace


def personalize(dataset: SubjectDataset, params: ParamStore, config: TTPConfig, variant: str):
    """Dispatch on ``config.scenario``"""

    if config.scenario == SCENARIO_ONLINE:
        return ttp_online(dataset, params, config, variant)

    return ttp_offline(dataset, params, config, variant)


def run_ttp(datasets: List[SubjectDataset], checkpoint: ParamStore, config: TTPConfig, variant: str):
    """Personalize over a sequence of subjects

    Weights carry from one subject to the next unless ``config.reinit`` is
    per_subject. ``checkpoint`` itself is never modified.

    Returns:
        Dict with "none" and the configured scenario, each mapping subject id to a TTPTrace
    """

    config.validate()

    results = {SCENARIO_NONE: {}, config.scenario: {}}
    state = None

    with ScopedTimer("ttp", active=ttpk.config.verbose):

        for ds in datasets:

            _, base = no_ttp(ds, checkpoint, variant)
            results[SCENARIO_NONE][ds.subject_id] = base

            state = reinit_if_needed(state, ds.subject_id, checkpoint, config)
            _, trace = personalize(ds, state.params, config, variant)
            results[config.scenario][ds.subject_id] = trace

            print("ttp: subject {} {} frames, PCK {:.2f} -> {:.2f}".format(
                ds.subject_id, len(ds), np.mean(base.frame_scores()), np.mean(trace.frame_scores())))

    return results


def mean_pck(traces) -> float:
    """mPCK over all frames of all subjects"""

    if isinstance(traces, dict):
        traces = list(traces.values())

    scores = np.concatenate([t.frame_scores() for t in traces])
    return float(np.mean(scores)) if len(scores) else 0.0


def simulate_video_length(dataset: SubjectDataset, lengths: List[int], checkpoint: ParamStore, config: TTPConfig,
                          variant: str, eval_frames=None) -> metrics.Curve:
    """mPCK on a fixed evaluation set after personalizing on only the first ``length`` frames

    Every length starts from the checkpoint, the fine-tuning pool shrinks as if
    the video were shorter.
    """

    lengths = sorted(set(int(l) for l in lengths))

    if len(lengths) == 0 or lengths[0] < 1 or lengths[-1] > len(dataset):
        raise ValueError(f"simulate_video_length() lengths must be in [1, {len(dataset)}], got {lengths}")

    if eval_frames is None:
        eval_frames = dataset.frames

    gt = np.stack([f.gt_joints.numpy() for f in eval_frames])
    ys = []

    for length in lengths:

        params = checkpoint.copy()
        personalize(dataset.head(length), params, config, variant)

        ys.append(metrics.pck(predict(params, eval_frames, variant), gt).score)

        if ttpk.config.verbose:
            print("ttp: video length {} PCK {:.2f}".format(length, ys[-1]))

    return metrics.Curve(lengths, ys, label="pck", xlabel="length")


def ablate_iters(datasets: List[SubjectDataset], checkpoint: ParamStore, config: TTPConfig, variant: str, iters=(1, 2, 3, 4)) -> metrics.Curve:
    """mPCK of a full personalization run for each update iteration count"""

    ys = []
    for n in iters:
        run_config = dataclasses.replace(config, update_iters=int(n))
        results = run_ttp(datasets, checkpoint, run_config, variant)
        ys.append(mean_pck(results[config.scenario]))

    return metrics.Curve(list(iters), ys, label="pck", xlabel="iters")
