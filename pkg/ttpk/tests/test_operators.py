# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

import numpy as np
import ttpk
from ttpk.tests.test_base import *

ttpk.init()


def conv2d_loops(x, k, b, stride, pad):

    c_out, c_in, kh, kw = k.shape
    _, h, w = x.shape

    lo, hi = (pad, pad) if np.isscalar(pad) else pad

    xp = np.pad(x, ((0, 0), (lo, hi), (lo, hi)))
    h_out = (h + lo + hi - kh)//stride + 1
    w_out = (w + lo + hi - kw)//stride + 1

    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                patch = xp[:, i*stride:i*stride + kh, j*stride:j*stride + kw]
                out[o, i, j] = np.sum(patch*k[o]) + (b[o] if b is not None else 0.0)

    return out


def test_matmul(test, seed):

    a = ttpk.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = ttpk.tensor([[5.0], [6.0]])

    assert_np_equal(ttpk.matmul(a, b), np.array([[17.0], [39.0]]))

    with test.assertRaises(ttpk.DimensionError):
        ttpk.matmul(b, b)


def test_matmul_batched(test, seed):

    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4, 5))
    b = rng.standard_normal((5, 2))

    out = ttpk.matmul(ttpk.tensor(a), ttpk.tensor(b))
    assert_np_equal(out, np.stack([a[i] @ b for i in range(3)]), tol=1.e-12)


def test_conv2d(test, seed):

    rng = np.random.default_rng(seed)

    for size, stride, pad in [(7, 1, 0), (7, 1, 1), (7, 2, 1), (6, 2, (1, 0)), (8, 3, (2, 2))]:

        x = rng.standard_normal((2, size, size))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)

        out = ttpk.conv2d(ttpk.tensor(x), ttpk.tensor(k), ttpk.tensor(b), stride=stride, pad=pad)
        assert_np_equal(out, conv2d_loops(x, k, b, stride, pad), tol=1.e-10)

    # leading-edge padding on an even size keeps every other output of the dense convolution
    x = ttpk.tensor(rng.standard_normal((2, 2, 8, 8)))
    k = ttpk.tensor(rng.standard_normal((3, 2, 3, 3)))

    strided = ttpk.conv2d(x, k, stride=2, pad=(1, 0))
    dense = ttpk.subsample(ttpk.conv2d(x, k, pad=1), 2)

    test.assertEqual(strided.shape, (2, 3, 4, 4))
    assert_np_equal(strided, dense.numpy(), tol=1.e-12)


def test_conv2d_batched(test, seed):

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 5, 5))
    k = rng.standard_normal((4, 3, 1, 1))

    out = ttpk.conv2d(ttpk.tensor(x), ttpk.tensor(k))

    test.assertEqual(out.shape, (2, 4, 5, 5))
    assert_np_equal(out.numpy()[1], conv2d_loops(x[1], k, None, 1, 0), tol=1.e-10)


def test_conv2d_errors(test, seed):

    x = ttpk.zeros((2, 6, 6))

    with test.assertRaises(ttpk.DimensionError):
        ttpk.conv2d(x, ttpk.zeros((3, 1, 3, 3)))

    with test.assertRaises(ttpk.DimensionError):
        ttpk.conv2d(x, ttpk.zeros((3, 2, 2, 2)))

    with test.assertRaises(ttpk.DimensionError):
        ttpk.conv2d(x, ttpk.zeros((3, 2, 3, 3)), stride=2, pad=0)

    with test.assertRaises(ttpk.DimensionError):
        ttpk.conv2d(x, ttpk.zeros((3, 2, 3, 3)), stride=2, pad=1)

    with test.assertRaises(ValueError):
        ttpk.conv2d(x, ttpk.zeros((3, 2, 3, 3)), pad=(1, -1))


def test_upsample_subsample(test, seed):

    x = ttpk.tensor(np.arange(4.0).reshape(1, 2, 2))
    up = ttpk.upsample_nearest(x, 2)

    expect = np.array([[[0, 0, 1, 1],
                        [0, 0, 1, 1],
                        [2, 2, 3, 3],
                        [2, 2, 3, 3]]], dtype=float)

    assert_np_equal(up, expect)
    assert_np_equal(ttpk.subsample(up, 2), x.numpy())


def test_softmax(test, seed):

    s = ttpk.softmax(ttpk.tensor([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]]))

    e = np.exp([1.0, 2.0, 3.0])
    assert_np_equal(s.numpy()[0], e/e.sum(), tol=1.e-12)
    assert_np_equal(s.numpy()[1], np.ones(3)/3.0, tol=1.e-12)


def test_layer_norm(test, seed):

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 8))*3.0 + 2.0

    out = ttpk.layer_norm(ttpk.tensor(x), ttpk.ones(8), ttpk.zeros(8)).numpy()

    assert_np_equal(out.mean(axis=-1), np.zeros(5), tol=1.e-10)
    assert_np_equal(out.std(axis=-1), np.ones(5), tol=1.e-3)

    with test.assertRaises(ttpk.DimensionError):
        ttpk.layer_norm(ttpk.tensor(x), ttpk.ones(4), ttpk.zeros(4))


def test_dropout(test, seed):

    rng = np.random.default_rng(seed)
    x = ttpk.ones((100, 100))

    # inference is the identity
    test.assertIs(ttpk.dropout(x, 0.5, False, rng), x)
    test.assertIs(ttpk.dropout(x, 0.0, True, rng), x)

    out = ttpk.dropout(x, 0.5, True, rng).numpy()
    kept = out > 0.0

    assert_np_equal(out[kept], np.ones(np.count_nonzero(kept))*2.0)
    test.assertLess(abs(kept.mean() - 0.5), 0.05)

    with test.assertRaises(ValueError):
        ttpk.dropout(x, 1.0, True, rng)


def test_mse_loss(test, seed):

    loss = ttpk.mse_loss(ttpk.tensor([1.0, 2.0, 3.0, 4.0]), ttpk.tensor([1.0, 0.0, 3.0, 0.0]))
    test.assertAlmostEqual(loss.item(), (4.0 + 16.0)/4.0)

    with test.assertRaises(ttpk.DimensionError):
        ttpk.mse_loss(ttpk.zeros(3), ttpk.zeros(4))


def test_narrow_concat(test, seed):

    x = ttpk.tensor(np.arange(12.0).reshape(3, 4))

    left = ttpk.narrow(x, -1, 0, 2)
    right = ttpk.narrow(x, -1, 2, 2)

    assert_np_equal(ttpk.concat([left, right], axis=-1), x.numpy())

    with test.assertRaises(ttpk.DimensionError):
        ttpk.narrow(x, 0, 2, 2)


def test_gaussian_maps(test, seed):

    maps = ttpk.gaussian_maps(ttpk.tensor([[2.0, 3.0], [0.0, 0.0]]), 1.5, 8, 6).numpy()

    test.assertEqual(maps.shape, (2, 8, 6))

    # peak 1 at (x=2, y=3), row index is y
    test.assertEqual(maps[0, 3, 2], 1.0)
    test.assertEqual(np.unravel_index(np.argmax(maps[0]), maps[0].shape), (3, 2))

    # one sigma away along x the value is exp(-1/2)
    test.assertAlmostEqual(maps[1, 0, 1], np.exp(-1.0/(2.0*1.5*1.5)))

    with test.assertRaises(ValueError):
        ttpk.gaussian_maps(ttpk.zeros((1, 2)), 0.0, 4, 4)


def test_broadcast(test, seed):

    a = ttpk.tensor(np.ones((2, 3)), requires_grad=True)
    b = ttpk.tensor(np.arange(3.0), requires_grad=True)

    with ttpk.Tape() as tape:
        loss = ttpk.sum(a*b + b)

    tape.backward(loss)

    assert_np_equal(tape.gradients[a], np.tile(np.arange(3.0), (2, 1)))
    assert_np_equal(tape.gradients[b], np.ones(3)*2.0 + 2.0)


def register(parent):

    class TestOperators(parent):
        pass

    add_function_test(TestOperators, "test_matmul", test_matmul)
    add_function_test(TestOperators, "test_matmul_batched", test_matmul_batched, seeds=[0, 1])
    add_function_test(TestOperators, "test_conv2d", test_conv2d, seeds=[0, 1, 2])
    add_function_test(TestOperators, "test_conv2d_batched", test_conv2d_batched)
    add_function_test(TestOperators, "test_conv2d_errors", test_conv2d_errors)
    add_function_test(TestOperators, "test_upsample_subsample", test_upsample_subsample)
    add_function_test(TestOperators, "test_softmax", test_softmax)
    add_function_test(TestOperators, "test_layer_norm", test_layer_norm)
    add_function_test(TestOperators, "test_dropout", test_dropout)
    add_function_test(TestOperators, "test_mse_loss", test_mse_loss)
    add_function_test(TestOperators, "test_narrow_concat", test_narrow_concat)
    add_function_test(TestOperators, "test_gaussian_maps", test_gaussian_maps)
    add_function_test(TestOperators, "test_broadcast", test_broadcast)

    return TestOperators

if __name__ == '__main__':
    c = register(unittest.TestCase)
    unittest.main(verbosity=2)
