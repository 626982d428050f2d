# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

import tempfile

import numpy as np
import ttpk
from ttpk.tests.test_base import *

from ttpk.pose import model
from ttpk.pose import ttp
from ttpk.pose.ttp import TTPConfig

ttpk.init()


def checkpoint(seed=0):
    return model.build_pose_net(tiny_net_config(), seed)


def same_params(a, b, prefix=""):
    return all(np.array_equal(a[n].numpy(), b[n].numpy()) for n in a.names(prefix))


def test_ttp_config(test, seed):

    TTPConfig().validate()
    TTPConfig(lr=0.0).validate()

    for kwargs in [dict(scenario="batch"), dict(lr=-1.0), dict(update_iters=0), dict(reinit="always"),
                   dict(batch_size=0), dict(offline_steps=-1)]:
        with test.assertRaises(ttpk.ConfigError):
            TTPConfig(**kwargs).validate()


def test_lr_zero(test, seed):

    # a null update reproduces plain inference
    ckpt = checkpoint(seed)
    ds = tiny_datasets()[2]

    base, _ = ttp.no_ttp(ds, ckpt, "transformer")

    for scenario in ttp.SCENARIOS:

        params = ckpt.copy()
        pred, trace = ttp.personalize(ds, params, TTPConfig(scenario=scenario, lr=0.0), "transformer")

        test.assertTrue(np.array_equal(pred, base))
        test.assertTrue(same_params(params, ckpt))


def test_online_trace(test, seed):

    ckpt = checkpoint(seed)
    ds = tiny_datasets()[2]

    config = TTPConfig(lr=1.e-2, update_iters=2)
    params = ckpt.copy()
    pred, trace = ttp.ttp_online(ds, params, config, "transformer")

    test.assertEqual(pred.shape, (len(ds), 3, 2))
    test.assertEqual(len(trace), len(ds))
    test.assertEqual(len(trace.step_losses), ttp.online_step_count(len(ds), config))
    test.assertEqual(len(trace.step_losses), (len(ds) - 1)*2)

    # no update before the first frame
    first = trace.records[0]
    test.assertEqual(first["loss_self"], 0.0)
    test.assertIsNone(first["prediction_before"])
    test.assertIsNotNone(trace.records[1]["prediction_before"])
    test.assertGreater(trace.records[1]["loss_self"], 0.0)

    # supervised groups stay frozen, shared encoder and self head adapt
    test.assertTrue(same_params(params, ckpt, "xf."))
    test.assertTrue(same_params(params, ckpt, "supb."))
    test.assertFalse(same_params(params, ckpt, "enc."))
    test.assertFalse(same_params(params, ckpt, "self."))
    test.assertEqual(len(params.frozen), 0)


def test_online_causal(test, seed):

    # the prediction for frame t only depends on frames up to t
    ckpt = checkpoint(seed)
    ds = tiny_datasets()[2]
    config = TTPConfig(lr=1.e-2)

    full, _ = ttp.ttp_online(ds, ckpt.copy(), config, "transformer")

    for t in range(1, len(ds) + 1):
        part, _ = ttp.ttp_online(ds.head(t), ckpt.copy(), config, "transformer")
        test.assertTrue(np.array_equal(part, full[:t]))


def test_offline(test, seed):

    ckpt = checkpoint(seed)
    ds = tiny_datasets()[2]

    config = TTPConfig(scenario="offline", lr=1.e-2, update_iters=2)
    params = ckpt.copy()
    pred, trace = ttp.ttp_offline(ds, params, config, "transformer")

    # same number of updates as online
    test.assertEqual(len(trace.step_losses), (len(ds) - 1)*2)
    test.assertEqual(trace.records[0]["loss_self"], 0.0)
    test.assertAlmostEqual(trace.records[1]["loss_self"], np.mean(trace.step_losses[0:2]))

    test.assertTrue(same_params(params, ckpt, "xf."))
    test.assertFalse(same_params(params, ckpt, "enc."))

    # final weights predict every frame
    assert_np_equal(pred, ttpk.pose.predict(params, ds.frames, "transformer"))

    # zero steps is plain inference
    params = ckpt.copy()
    pred, trace = ttp.ttp_offline(ds, params, TTPConfig(scenario="offline", offline_steps=0), "transformer")
    base, _ = ttp.no_ttp(ds, ckpt, "transformer")

    test.assertTrue(np.array_equal(pred, base))
    test.assertEqual(len(trace.step_losses), 0)

    # deterministic
    a, _ = ttp.ttp_offline(ds, ckpt.copy(), config, "transformer")
    b, _ = ttp.ttp_offline(ds, ckpt.copy(), config, "transformer")
    test.assertTrue(np.array_equal(a, b))


def test_reinit(test, seed):

    ckpt = checkpoint(seed)
    first, second = tiny_datasets()[1], tiny_datasets()[2]

    config = TTPConfig(lr=1.e-2, reinit="per_subject")

    # per subject: the second subject starts from the checkpoint again
    state = ttp.reinit_if_needed(None, first.subject_id, ckpt, config)
    ttp.ttp_online(first, state.params, config, "transformer")

    state = ttp.reinit_if_needed(state, second.subject_id, ckpt, config)
    test.assertTrue(same_params(state.params, ckpt))

    # never: adapted weights carry over
    config = TTPConfig(lr=1.e-2, reinit="never")

    state = ttp.reinit_if_needed(None, first.subject_id, ckpt, config)
    ttp.ttp_online(first, state.params, config, "transformer")

    state = ttp.reinit_if_needed(state, second.subject_id, ckpt, config)
    test.assertFalse(same_params(state.params, ckpt))


def test_run_ttp(test, seed):

    ckpt = checkpoint(seed)
    reference = ckpt.copy()
    datasets = tiny_datasets()[1:]

    results = ttp.run_ttp(datasets, ckpt, TTPConfig(lr=1.e-2, reinit="per_subject"), "transformer")

    test.assertEqual(set(results), {"none", "online"})
    test.assertEqual(set(results["online"]), {1, 2})
    test.assertTrue(same_params(ckpt, reference))

    # with per-subject reinit every subject matches a run of its own
    alone, _ = ttp.ttp_online(datasets[1], ckpt.copy(), TTPConfig(lr=1.e-2), "transformer")
    test.assertTrue(np.array_equal(results["online"][2].predictions(), alone))

    score = ttp.mean_pck(results["none"])
    test.assertGreaterEqual(score, 0.0)
    test.assertLessEqual(score, 100.0)


def test_trace_csv(test, seed):

    ckpt = checkpoint(seed)
    ds = tiny_datasets()[2]

    _, base = ttp.no_ttp(ds, ckpt, "transformer")
    _, trace = ttp.ttp_online(ds, ckpt.copy(), TTPConfig(lr=1.e-2), "transformer")

    with tempfile.TemporaryDirectory() as tmp:

        path = os.path.join(tmp, "trace.csv")
        trace.to_csv(path, base)

        with open(path) as f:
            lines = f.read().splitlines()

    test.assertEqual(lines[0], "frame_index,loss_self,pck_frame,pck_frame_no_ttp")
    test.assertEqual(len(lines), len(ds) + 1)
    test.assertTrue(lines[1].startswith("0,0.0000,"))


def test_video_length(test, seed):

    ckpt = checkpoint(seed)
    ds = tiny_datasets()[2]
    config = TTPConfig(lr=1.e-2)

    curve = ttp.simulate_video_length(ds, [3, 1], ckpt, config, "transformer")

    test.assertEqual(list(curve.x), [1, 3])

    # a single frame allows no update
    base, _ = ttp.no_ttp(ds, ckpt, "transformer")
    gt = np.stack([f.gt_joints.numpy() for f in ds.frames])
    test.assertEqual(curve.y[0], ttpk.pose.pck(base, gt).score)

    with test.assertRaises(ValueError):
        ttp.simulate_video_length(ds, [len(ds) + 1], ckpt, config, "transformer")


def test_ablate_iters(test, seed):

    ckpt = checkpoint(seed)
    curve = ttp.ablate_iters(tiny_datasets()[2:], ckpt, TTPConfig(lr=1.e-2), "transformer", iters=(1, 2))

    test.assertEqual(list(curve.x), [1, 2])
    test.assertEqual(len(curve.y), 2)


def register(parent):

    class TestTTP(parent):
        pass

    add_function_test(TestTTP, "test_ttp_config", test_ttp_config)
    add_function_test(TestTTP, "test_lr_zero", test_lr_zero, seeds=[0, 1])
    add_function_test(TestTTP, "test_online_trace", test_online_trace)
    add_function_test(TestTTP, "test_online_causal", test_online_causal)
    add_function_test(TestTTP, "test_offline", test_offline)
    add_function_test(TestTTP, "test_reinit", test_reinit)
    add_function_test(TestTTP, "test_run_ttp", test_run_ttp)
    add_function_test(TestTTP, "test_trace_csv", test_trace_csv)
    add_function_test(TestTTP, "test_video_length", test_video_length)
    add_function_test(TestTTP, "test_ablate_iters", test_ablate_iters)

    return TestTTP

if __name__ == '__main__':
    c = register(unittest.TestCase)
    unittest.main(verbosity=2)
