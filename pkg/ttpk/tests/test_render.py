# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

import math
import tempfile

import numpy as np
import ttpk
from ttpk.tests.test_base import *

from ttpk.pose import model
from ttpk.pose import render
from ttpk.pose import trainer
from ttpk.pose.metrics import Curve
from ttpk.pose.render import ReportRow

ttpk.init()


def test_affinity_arrows(test, seed):

    W = np.array([[0.5, 0.05, 0.45],
                  [0.1, 0.9, 0.0]])

    arrows = render.affinity_arrows(W, threshold=0.1)

    # strictly above the threshold
    test.assertEqual([(i, j) for i, j, _ in arrows], [(0, 0), (0, 2), (1, 1)])
    test.assertAlmostEqual(arrows[2][2], 0.9)

    test.assertEqual(len(render.affinity_arrows(W, threshold=1.0)), 0)


def test_render_visualization(test, seed):

    params = model.build_pose_net(tiny_net_config(), seed)
    frame = tiny_datasets()[2].frames[0]

    res = trainer.forward_eval(params, frame.image, "transformer")
    W = res["W"].numpy().reshape(3, 4)

    with tempfile.TemporaryDirectory() as tmp:

        path, n_arrows = render.render_visualization(frame, res["H_self"], res["H_sup"], res["W"], os.path.join(tmp, "vis.png"),
                                                     threshold=0.2, source=frame.image)

        test.assertTrue(os.path.exists(path))
        test.assertGreater(os.path.getsize(path), 0)

    test.assertEqual(n_arrows, int(np.sum(W > 0.2)))


def test_report_table(test, seed):

    rows = [ReportRow("transformer", "online", 61.0),
            ReportRow("baseline", "none", 40.0),
            ReportRow("transformer", "none", 55.5),
            ReportRow("feat_shared", "offline", 47.0)]

    table = render.report_table(rows)

    test.assertEqual([(r.variant, r.scenario) for r, _ in table],
                     [("baseline", "none"), ("feat_shared", "offline"), ("transformer", "none"), ("transformer", "online")])

    test.assertEqual(table[0][1], 0.0)
    test.assertTrue(math.isnan(table[1][1]))
    test.assertAlmostEqual(table[3][1], 5.5)


def test_emit_report(test, seed):

    rows = [ReportRow("transformer", "none", 50.0),
            ReportRow("transformer", "online", 52.25)]

    curves = {"improvement": Curve([0, 1, 2], [0.0, 1.0, 2.5], label="pck_gap", window=5, xlabel="frame")}

    with tempfile.TemporaryDirectory() as tmp:

        render.emit_report(rows, curves, tmp)

        with open(os.path.join(tmp, "report.csv")) as f:
            first = f.read()

        with open(os.path.join(tmp, "curve_improvement.csv")) as f:
            curve_lines = f.read().splitlines()

        # rewriting gives the same bytes
        render.emit_report(list(reversed(rows)), curves, tmp)

        with open(os.path.join(tmp, "report.csv")) as f:
            second = f.read()

    test.assertEqual(first, second)
    test.assertEqual(first.splitlines(), ["variant,scenario,mpck,delta",
                                          "transformer,none,50.0000,+0.0000",
                                          "transformer,online,52.2500,+2.2500"])

    test.assertEqual(curve_lines[:2], ["# smoothing window 5", "frame,pck_gap"])
    test.assertEqual(curve_lines[-1], "2,2.5000")


def test_emit_report_smoothed(test, seed):

    rows = [ReportRow("baseline", "none", 40.0, smoothed=41.0),
            ReportRow("baseline", "offline", 42.0, smoothed=44.5)]

    with tempfile.TemporaryDirectory() as tmp:

        render.emit_report(rows, {}, tmp)

        with open(os.path.join(tmp, "report.csv")) as f:
            lines = f.read().splitlines()

    test.assertEqual(lines[0], "variant,scenario,mpck,delta,mpck_smoothed,delta_smoothed")
    test.assertEqual(lines[2], "baseline,offline,42.0000,+2.0000,44.5000,+3.5000")


def register(parent):

    class TestRender(parent):
        pass

    add_function_test(TestRender, "test_affinity_arrows", test_affinity_arrows)
    add_function_test(TestRender, "test_render_visualization", test_render_visualization)
    add_function_test(TestRender, "test_report_table", test_report_table)
    add_function_test(TestRender, "test_emit_report", test_emit_report)
    add_function_test(TestRender, "test_emit_report_smoothed", test_emit_report_smoothed)

    return TestRender

if __name__ == '__main__':
    c = register(unittest.TestCase)
    unittest.main(verbosity=2)
