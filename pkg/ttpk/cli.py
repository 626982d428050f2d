# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

"""Command line entry point: ``ttpk <gen|train|ttp|eval|vis> [options]``

Every command reads one optional configuration file (JSON or TOML) holding the
sections ``data``, ``net``, ``train``, ``ttp`` plus top level keys, applies
command line overrides and validates the result before doing any work.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import os
import sys
import json
import glob
import shutil
import argparse
import dataclasses

import numpy as np

from typing import List

import ttpk
import ttpk.config

from ttpk.types import ConfigError, DataError, NumericError

from ttpk.pose import puppet
from ttpk.pose import dataset as data
from ttpk.pose import trainer
from ttpk.pose import ttp
from ttpk.pose import metrics
from ttpk.pose import render
from ttpk.pose import model
from ttpk.pose.model import NetConfig
from ttpk.pose.dataset import DataConfig
from ttpk.pose.trainer import TrainConfig
from ttpk.pose.ttp import TTPConfig
from ttpk.pose.transformer import export_affinity_csv


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@dataclasses.dataclass
class RunConfig:
    """Everything a pipeline run depends on

    ``net.k_sup`` and ``net.image_size`` follow the data section.
    """

    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    net: NetConfig = dataclasses.field(default_factory=NetConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    ttp: TTPConfig = dataclasses.field(default_factory=TTPConfig)

    data_dir: str = "runs/data"
    out_dir: str = "runs"
    seed: int = None                    # overrides every section seed when set

    metric: str = "pck"                 # "pck" or "acc"
    smooth_window: int = 7
    smooth_poly: int = 2
    curve_window: int = 5
    vis_threshold: float = 0.1

    def resolve(self):
        """Fill the seed from TTPK_SEED when unset and propagate it, sync shared sizes"""

        if self.seed is None and "TTPK_SEED" in os.environ:
            try:
                self.seed = int(os.environ["TTPK_SEED"])
            except ValueError:
                raise ConfigError(f"TTPK_SEED must be an integer, got '{os.environ['TTPK_SEED']}'")

        if self.seed is not None:
            self.data.seed = self.seed
            self.train.seed = self.seed
            self.ttp.seed = self.seed

        self.net.k_sup = self.data.k_sup
        self.net.image_size = self.data.image_size

        return self

    def validate(self):

        self.data.validate()
        self.net.validate()
        self.train.validate()
        self.ttp.validate()

        if self.metric not in ("pck", "acc"):
            raise ConfigError(f"metric must be 'pck' or 'acc', got '{self.metric}'")

        return self

    def to_dict(self):
        return dataclasses.asdict(self)


SECTIONS = {"data": DataConfig, "net": NetConfig, "train": TrainConfig, "ttp": TTPConfig}

# spellings accepted in files and --set
KEY_ALIASES = {("train", "lambda"): "lam"}


def _section_fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _set_key(config: RunConfig, section, key, value):

    if section is None:
        if key in SECTIONS or key not in _section_fields(RunConfig):
            raise ConfigError(f"Unknown configuration key '{key}'")
        setattr(config, key, value)
        return

    if section not in SECTIONS:
        raise ConfigError(f"Unknown configuration section '{section}'")

    key = KEY_ALIASES.get((section, key), key)
    if key not in _section_fields(SECTIONS[section]):
        raise ConfigError(f"Unknown configuration key '{section}.{key}'")

    setattr(getattr(config, section), key, value)


def config_from_dict(d: dict) -> RunConfig:

    config = RunConfig()

    for key, value in d.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"Configuration section '{key}' must be a table")

            if key == "net" and ("k_sup" in value or "image_size" in value):
                raise ConfigError("net.k_sup and net.image_size are taken from the data section")

            # a preset only sets defaults, explicit keys of the section win
            if key == "train" and "preset" in value:
                config.train = trainer.apply_preset(config.train, value["preset"])

            for k, v in value.items():
                _set_key(config, key, k, v)
        else:
            _set_key(config, None, key, value)

    return config


def load_run_config(path) -> RunConfig:
    """Read a JSON or TOML (by extension) configuration file, unknown keys are rejected"""

    if not os.path.exists(path):
        raise ConfigError(f"Configuration file '{path}' not found")

    if path.endswith(".toml"):
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib

        with open(path, "rb") as f:
            try:
                d = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"Invalid TOML in '{path}': {e}") from e
    else:
        with open(path, "r") as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Invalid JSON in '{path}': {e}") from e

    return config_from_dict(d)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: RunConfig, args) -> RunConfig:

    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got '{item}'")

        key, value = item.split("=", 1)
        section, _, name = key.rpartition(".")
        _set_key(config, section or None, name, _parse_value(value))

    if args.seed is not None:
        config.seed = args.seed
    if args.data_dir is not None:
        config.data_dir = args.data_dir
    if args.out_dir is not None:
        config.out_dir = args.out_dir

    command = args.command

    if getattr(args, "preset", None) is not None:
        config.train = trainer.apply_preset(config.train, args.preset)
    if getattr(args, "variant", None) is not None:
        config.train.variant = args.variant
    if getattr(args, "steps", None) is not None:
        config.train.steps = args.steps
    if getattr(args, "lam", None) is not None:
        config.train.lam = args.lam
    if getattr(args, "perceptual", None) is not None:
        config.train.perceptual = config.ttp.perceptual = args.perceptual == "on"

    if getattr(args, "lr", None) is not None:
        if command == "ttp":
            config.ttp.lr = args.lr
        else:
            config.train.lr = args.lr

    if getattr(args, "scenario", None) is not None:
        config.ttp.scenario = args.scenario
    if getattr(args, "reinit", None) is not None:
        config.ttp.reinit = args.reinit
    if getattr(args, "iters", None) is not None:
        config.ttp.update_iters = args.iters

    if getattr(args, "threshold", None) is not None:
        config.vis_threshold = args.threshold
    if getattr(args, "metric", None) is not None:
        config.metric = args.metric

    return config


#----------------------
# helpers

def _model_dir(config: RunConfig, variant):
    return os.path.join(config.out_dir, trainer.canonical_variant(variant))


def _load_test_subjects(config: RunConfig):

    datasets = data.load_dataset(config.data_dir)
    train, test = data.split_subjects(datasets)

    if len(test) == 0:
        raise DataError(f"Dataset '{config.data_dir}' holds no test subjects")

    return test


def _load_model(config: RunConfig, variant, k_sup):

    path = os.path.join(_model_dir(config, variant), "model.ttpk")
    params, meta = trainer.load_model(path)

    if params.config.k_sup != k_sup:
        raise ConfigError(f"Model '{path}' predicts {params.config.k_sup} joints, dataset has {k_sup}")

    return params, meta


def _write_predictions(path, variant, scenario, subject_id, trace):

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    record = {
        "variant": variant,
        "scenario": scenario,
        "subject_id": subject_id,
        "frames": [{"frame_index": r["frame_index"], "joints": r["prediction"].tolist()} for r in trace.records],
    }
    with open(path, "w") as f:
        json.dump(record, f)


def _read_predictions(path):

    try:
        with open(path, "r") as f:
            record = json.load(f)
        joints = np.array([fr["joints"] for fr in record["frames"]], dtype=np.float64)
        index = [int(fr["frame_index"]) for fr in record["frames"]]
        return record["variant"], record["scenario"], int(record["subject_id"]), index, joints
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"Corrupt predictions file '{path}': {e}") from e


#----------------------
# commands

def cmd_gen(config: RunConfig, args):

    path = config.data_dir

    if os.path.isdir(path) and len(os.listdir(path)) > 0:
        if not args.force:
            raise DataError(f"Output directory '{path}' is not empty, use --force to overwrite")
        shutil.rmtree(path)

    datasets = data.build_from_config(config.data)
    data.save_dataset(datasets, path)

    train, test = data.split_subjects(datasets)
    print("gen: wrote {} subjects ({} train, {} test), {} frames each at {}x{} px, k_sup {}, mode {} to '{}'".format(
        len(datasets), len(train), len(test), config.data.frames_per_subject, config.data.image_size,
        config.data.image_size, config.data.k_sup, config.data.mode, path))

    return EXIT_OK


def cmd_train(config: RunConfig, args):

    datasets = data.load_dataset(config.data_dir)
    train, test = data.split_subjects(datasets)

    if len(train) == 0:
        raise DataError(f"Dataset '{config.data_dir}' holds no training subjects")

    if train[0].frames[0].gt_joints.k != config.net.k_sup:
        raise ConfigError(f"Dataset '{config.data_dir}' has {train[0].frames[0].gt_joints.k} joints, config expects {config.net.k_sup}")

    out = _model_dir(config, config.train.variant)
    trainer.train(train, config.train, config.net, out_dir=out, resume=args.resume)

    print("train: wrote '{}'".format(os.path.join(out, "model.ttpk")))

    return EXIT_OK


def _save_results(config, variant, results):

    root = os.path.join(_model_dir(config, variant), "ttp")
    base = results[ttp.SCENARIO_NONE]

    for scenario, traces in results.items():
        for subject_id, trace in traces.items():
            d = os.path.join(root, scenario)
            _write_predictions(os.path.join(d, "predictions_{}.json".format(subject_id)), variant, scenario, subject_id, trace)
            trace.to_csv(os.path.join(d, "ttp_trace_{}.csv".format(subject_id)), base[subject_id])


def cmd_ttp(config: RunConfig, args):

    test = _load_test_subjects(config)
    variant = config.train.variant
    checkpoint, meta = _load_model(config, variant, test[0].frames[0].gt_joints.k)

    root = os.path.join(_model_dir(config, variant), "ttp")

    if args.ablate_iters:
        curve = ttp.ablate_iters(test, checkpoint, config.ttp, variant, iters=(1, 2, 3, 4))
        curve.to_csv(os.path.join(root, "curve_iters_{}.csv".format(config.ttp.scenario)))
        for x, y in zip(curve.x, curve.y):
            print("ttp: iters {:g} mPCK {:.4f}".format(x, y))
        return EXIT_OK

    if args.video_length:
        lengths = [int(v) for v in args.video_length.split(",")]
        curves = [ttp.simulate_video_length(ds, lengths, checkpoint, config.ttp, variant) for ds in test]
        curve = metrics.Curve(curves[0].x, np.mean([c.y for c in curves], axis=0), label="pck", xlabel="length")
        curve.to_csv(os.path.join(root, "curve_length_{}.csv".format(config.ttp.scenario)))
        for x, y in zip(curve.x, curve.y):
            print("ttp: video length {:g} mPCK {:.4f}".format(x, y))
        return EXIT_OK

    results = ttp.run_ttp(test, checkpoint, config.ttp, variant)

    if args.unordered and config.ttp.scenario == ttp.SCENARIO_OFFLINE:
        rng = np.random.default_rng(config.ttp.seed)
        shuffled = [data.shuffled(ds, rng) for ds in test]
        unordered = ttp.run_ttp(shuffled, checkpoint, config.ttp, variant)
        results["offline_unordered"] = unordered[ttp.SCENARIO_OFFLINE]

    _save_results(config, variant, results)

    for scenario, traces in results.items():
        print("ttp: {} {} mPCK {:.4f}".format(variant, scenario, ttp.mean_pck(traces)))

    return EXIT_OK


def _score(config: RunConfig, pred, gt):

    if config.metric == "acc":
        return metrics.acc_within_d(pred, gt, metrics.default_distance(config.data.image_size))

    return metrics.pck(pred, gt)


def cmd_eval(config: RunConfig, args):

    test = {ds.subject_id: ds for ds in _load_test_subjects(config)}

    files = sorted(glob.glob(os.path.join(config.out_dir, "*", "ttp", "*", "predictions_*.json")))
    if len(files) == 0:
        raise DataError(f"No predictions found under '{config.out_dir}', run 'ttpk ttp' first")

    # (variant, scenario) -> list of (subject_id, pred, gt)
    groups = {}
    for path in files:
        variant, scenario, subject_id, index, joints = _read_predictions(path)

        if subject_id not in test:
            raise DataError(f"Predictions '{path}' refer to unknown test subject {subject_id}")

        by_index = {f.frame_index: f for f in test[subject_id].frames}
        gt = np.stack([by_index[i].gt_joints.numpy() for i in index])

        order = np.argsort(index, kind="stable")
        index = [index[i] for i in order]

        groups.setdefault((variant, scenario), []).append((subject_id, index, joints[order], gt[order]))

    rows = []
    curves = {}

    for (variant, scenario), entries in sorted(groups.items()):

        result = metrics.EvalResult.concat([_score(config, p, g) for _, _, p, g in entries])

        smoothed = None
        if args.smooth:
            smoothed = metrics.EvalResult.concat([
                _score(config, metrics.savgol_smooth(p, config.smooth_window, config.smooth_poly), g)
                for _, _, p, g in entries]).score

        rows.append(render.ReportRow(variant, scenario, result.score, smoothed))

    # per-frame improvement of online personalization over plain inference
    for (variant, scenario), entries in sorted(groups.items()):
        if scenario != ttp.SCENARIO_ONLINE or (variant, ttp.SCENARIO_NONE) not in groups:
            continue

        base = {sid: (idx, p, g) for sid, idx, p, g in groups[(variant, ttp.SCENARIO_NONE)]}
        traces_ttp = []
        traces_base = []

        for sid, idx, p, g in sorted(entries, key=lambda e: e[0]):
            t = ttp.TTPTrace(sid, scenario)
            b = ttp.TTPTrace(sid, ttp.SCENARIO_NONE)
            for i, pi, bi, gi in zip(idx, p, base[sid][1], g):
                t.add(i, 0.0, pi, gi)
                b.add(i, 0.0, bi, gi)
            traces_ttp.append(t)
            traces_base.append(b)

        try:
            curves["improvement_{}".format(variant)] = metrics.improvement_curve(traces_ttp, traces_base, config.curve_window)
        except ValueError as e:
            print("eval: no improvement curve for {}: {}".format(variant, e))

    render.emit_report(rows, curves, config.out_dir)

    for r, delta in render.report_table(rows):
        print("eval: {:<12} {:<18} {:8.4f} ({:+.4f})".format(r.variant, r.scenario, r.value, delta))

    return EXIT_OK


def cmd_vis(config: RunConfig, args):

    test = _load_test_subjects(config)
    variant = trainer.canonical_variant(config.train.variant)

    if variant != trainer.VARIANT_TRANSFORMER:
        raise ConfigError("Visualization requires the transformer variant, it is the only one with an affinity matrix")

    params, meta = _load_model(config, variant, test[0].frames[0].gt_joints.k)
    out = os.path.join(_model_dir(config, variant), "vis")

    ds = test[0]
    count = min(args.frames, len(ds))
    source = ds.frames[0]

    for frame in ds.frames[:count]:

        res = trainer.forward_eval(params, frame.image, variant)
        I_hat, _, _, _ = model.reconstruct(frame.image, source.image, params)

        path, arrows = render.render_visualization(frame, res["H_self"], res["H_sup"], res["W"],
                                                   os.path.join(out, "vis_{}_{:05d}.png".format(ds.subject_id, frame.frame_index)),
                                                   config.vis_threshold, source=source.image, reconstruction=I_hat,
                                                   temperature=params.config.temperature)

        export_affinity_csv(res["W"], os.path.join(out, "affinity_{}_{:05d}.csv".format(ds.subject_id, frame.frame_index)),
                            puppet.SUPERVISED_ORDER[:params.config.k_sup])

        print("vis: wrote '{}' ({} arrows)".format(path, arrows))

    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "ttp": cmd_ttp,
    "eval": cmd_eval,
    "vis": cmd_vis,
}


def build_parser():

    parser = argparse.ArgumentParser(prog="ttpk", description="Test-time personalized keypoint estimation")
    parser.add_argument("--config", type=str, help="JSON or TOML configuration file")
    parser.add_argument("--seed", type=int, help="Global seed, falls back to TTPK_SEED")
    parser.add_argument("--data-dir", dest="data_dir", type=str, help="Dataset directory")
    parser.add_argument("--out-dir", dest="out_dir", type=str, help="Output directory for models and reports")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="Override any configuration key")
    parser.add_argument("--print-config", dest="print_config", action="store_true", help="Print the resolved configuration")
    parser.add_argument("--verbose", action="store_true", help="Extra progress output and timings")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="Generate the synthetic dataset")
    p.add_argument("--force", action="store_true", help="Overwrite a non-empty dataset directory")

    p = sub.add_parser("train", help="Joint training of one variant")
    p.add_argument("--variant", choices=list(trainer.VARIANTS) + list(trainer.VARIANT_ALIASES))
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--preset", choices=list(trainer.PRESETS))
    p.add_argument("--perceptual", choices=["on", "off"])
    p.add_argument("--resume", type=str, help="Checkpoint to continue from")

    p = sub.add_parser("ttp", help="Test-time personalization on the test subjects")
    p.add_argument("--variant", choices=list(trainer.VARIANTS) + list(trainer.VARIANT_ALIASES))
    p.add_argument("--scenario", choices=list(ttp.SCENARIOS))
    p.add_argument("--lr", type=float)
    p.add_argument("--reinit", choices=list(ttp.REINIT_MODES))
    p.add_argument("--iters", type=int, help="Update iterations per frame")
    p.add_argument("--perceptual", choices=["on", "off"])
    p.add_argument("--ablate-iters", dest="ablate_iters", action="store_true", help="Sweep 1 to 4 update iterations")
    p.add_argument("--video-length", dest="video_length", type=str, help="Comma separated video lengths to simulate")
    p.add_argument("--unordered", action="store_true", help="Also run offline personalization on shuffled frames")

    p = sub.add_parser("eval", help="Score saved predictions and write report.csv")
    p.add_argument("--smooth", action="store_true", help="Add a Savitzky-Golay smoothed column")
    p.add_argument("--metric", choices=["pck", "acc"])

    p = sub.add_parser("vis", help="Render keypoint and affinity visualizations")
    p.add_argument("--variant", choices=list(trainer.VARIANTS) + list(trainer.VARIANT_ALIASES))
    p.add_argument("--threshold", type=float, help="Minimum affinity drawn as an arrow")
    p.add_argument("--frames", type=int, default=4, help="Number of frames to render")

    return parser


def resolve_config(args) -> RunConfig:

    config = load_run_config(args.config) if args.config else RunConfig()
    config = apply_overrides(config, args)

    return config.resolve().validate()


def main(argv: List[str]=None) -> int:

    args = build_parser().parse_args(argv)

    if args.verbose:
        ttpk.config.verbose = True

    try:
        config = resolve_config(args)

        if args.print_config:
            print(json.dumps(config.to_dict(), indent=2))

        return COMMANDS[args.command](config, args)

    except ConfigError as e:
        print("ttpk: configuration error: {}".format(e), file=sys.stderr)
        return EXIT_CONFIG

    except (DataError, OSError) as e:
        print("ttpk: data error: {}".format(e), file=sys.stderr)
        return EXIT_DATA

    except NumericError as e:
        print("ttpk: numeric failure: {}".format(e), file=sys.stderr)
        return EXIT_NUMERIC

    except ValueError as e:
        print("ttpk: invalid input: {}".format(e), file=sys.stderr)
        return EXIT_CONFIG
