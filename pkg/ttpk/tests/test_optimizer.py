# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

import struct
import tempfile

import numpy as np
import ttpk
from ttpk.tests.test_base import *

ttpk.init()


def adam_reference(x, grad_fn, lr, steps, beta1=0.9, beta2=0.999, eps=1.e-8):

    m = np.zeros_like(x)
    v = np.zeros_like(x)

    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1*m + (1.0 - beta1)*g
        v = beta2*v + (1.0 - beta2)*g*g
        x = x - lr*(m/(1.0 - beta1**t))/(np.sqrt(v/(1.0 - beta2**t)) + eps)

    return x


def make_store(seed):
    rng = np.random.default_rng(seed)
    store = ttpk.ParamStore()
    store.add("enc.w", rng.standard_normal((3, 2)))
    store.add("enc.b", rng.standard_normal(3))
    store.add("xf.q", rng.standard_normal((2, 2)))
    return store


def test_adam_zero_gradient(test, seed):

    store = make_store(seed)
    before = store["enc.w"].numpy().copy()

    grads = {p: np.zeros(p.shape) for p in store.params.values()}
    ttpk.adam_step(store, grads, lr=1.e-3)

    assert_np_equal(store["enc.w"], before)


def test_adam_first_step(test, seed):

    # the first bias-corrected step moves each coordinate by lr*sign(g)
    store = make_store(seed)
    before = {n: p.numpy().copy() for n, p in store.params.items()}

    rng = np.random.default_rng(seed + 1)
    grads = {p: rng.standard_normal(p.shape) for p in store.params.values()}

    ttpk.adam_step(store, grads, lr=1.e-3)

    for name, p in store.params.items():
        delta = before[name] - p.numpy()
        assert_np_equal(np.abs(delta), np.ones(p.shape)*1.e-3, tol=1.e-6)
        assert_np_equal(np.sign(delta), np.sign(grads[p]))


def test_adam_quadratic(test, seed):

    # f(x) = |x - c|^2, 10 steps against a closed-form reference
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(4)
    x0 = rng.standard_normal(4)

    store = ttpk.ParamStore()
    x = store.add("x", x0.copy())

    for i in range(10):
        with ttpk.Tape() as tape:
            d = ttpk.sub(x, c)
            loss = ttpk.sum(ttpk.mul(d, d))
        tape.backward(loss)
        ttpk.adam_step(store, tape.gradients, lr=0.01)

    expect = adam_reference(x0.copy(), lambda x: 2.0*(x - c), 0.01, 10)

    assert_np_equal(x, expect, tol=1.e-10)
    test.assertEqual(store.t["x"], 10)


def test_adam_lr_zero(test, seed):

    store = make_store(seed)
    before = {n: p.numpy().copy() for n, p in store.params.items()}

    rng = np.random.default_rng(seed)
    grads = {p: rng.standard_normal(p.shape) for p in store.params.values()}

    ttpk.adam_step(store, grads, lr=0.0)

    for name, p in store.params.items():
        test.assertTrue(np.array_equal(p.numpy(), before[name]))
        test.assertEqual(store.t[name], 1)


def test_adam_frozen(test, seed):

    store = make_store(seed)
    store.freeze(["xf."])

    test.assertEqual(store.frozen, {"xf.q"})

    before = store["xf.q"].numpy().copy()

    # frozen parameters need no gradient
    grads = {store["enc.w"]: np.ones((3, 2)), store["enc.b"]: np.ones(3)}
    ttpk.adam_step(store, grads, lr=0.1)

    test.assertTrue(np.array_equal(store["xf.q"].numpy(), before))
    test.assertEqual(store.t["xf.q"], 0)
    test.assertEqual(store.t["enc.w"], 1)

    store.unfreeze_all()
    with test.assertRaises(RuntimeError):
        ttpk.adam_step(store, grads, lr=0.1)


def test_optimizer_schedule(test, seed):

    store = make_store(seed)
    opt = ttpk.Optimizer(store, 1.e-3, milestones=[10, 20])

    test.assertEqual(opt.lr_at(0), 1.e-3)
    test.assertEqual(opt.lr_at(9), 1.e-3)
    test.assertAlmostEqual(opt.lr_at(10), 1.e-4)
    test.assertAlmostEqual(opt.lr_at(25), 1.e-5)

    with test.assertRaises(ValueError):
        ttpk.Optimizer(store, 1.e-3, milestones=[20, 10])


def test_store_copy(test, seed):

    store = make_store(seed)
    store.freeze("enc.")
    store.t["enc.w"] = 7

    dup = store.copy()
    dup["enc.w"].data += 1.0

    test.assertFalse(np.array_equal(dup["enc.w"].numpy(), store["enc.w"].numpy()))
    test.assertEqual(dup.frozen, store.frozen)
    test.assertEqual(dup.t["enc.w"], 7)

    store.assign(dup)
    test.assertTrue(np.array_equal(dup["enc.w"].numpy(), store["enc.w"].numpy()))

    store.reset_state()
    test.assertEqual(store.t["enc.w"], 0)
    test.assertEqual(store.num_elements("enc."), 9)


def test_checkpoint_round_trip(test, seed):

    store = make_store(seed)
    rng = np.random.default_rng(seed)
    ttpk.adam_step(store, {p: rng.standard_normal(p.shape) for p in store.params.values()}, lr=1.e-2)

    with tempfile.TemporaryDirectory() as tmp:

        path = os.path.join(tmp, "model.ttpk")
        store.save(path)

        loaded = ttpk.ParamStore.load(path)

    test.assertEqual(list(loaded.params), list(store.params))

    for name in store.params:
        test.assertTrue(np.array_equal(loaded[name].numpy(), store[name].numpy()))
        test.assertTrue(np.array_equal(loaded.m[name], store.m[name]))
        test.assertTrue(np.array_equal(loaded.v[name], store.v[name]))
        test.assertEqual(loaded.t[name], store.t[name])


def test_checkpoint_truncated(test, seed):

    store = make_store(seed)

    with tempfile.TemporaryDirectory() as tmp:

        path = os.path.join(tmp, "model.ttpk")
        store.save(path)

        with open(path, "rb") as f:
            raw = f.read()

        with open(path, "wb") as f:
            f.write(raw[:-5])

        with test.assertRaises(ttpk.DataError):
            ttpk.load_checkpoint(path)

        with open(path, "wb") as f:
            f.write(b"NOPE" + raw[4:])

        with test.assertRaises(ttpk.DataError):
            ttpk.load_checkpoint(path)

        with test.assertRaises(ttpk.DataError):
            ttpk.load_checkpoint(os.path.join(tmp, "missing.ttpk"))


def test_checkpoint_corrupt_records(test, seed):

    store = make_store(seed)
    ttpk.adam_step(store, {p: np.ones(p.shape) for p in store.params.values()}, lr=1.e-2)

    with tempfile.TemporaryDirectory() as tmp:

        # optimizer moments without the matching second moment
        records = {name: store[name].numpy() for name in store.params}
        for name in store.params:
            records["@m/" + name] = store.m[name]
            records["@t/" + name] = np.array([store.t[name]], dtype=float)

        path = os.path.join(tmp, "partial.ttpk")
        ttpk.write_tensors(path, records)

        with test.assertRaises(ttpk.DataError) as ctx:
            ttpk.load_checkpoint(path)

        test.assertIn("@v/", str(ctx.exception))

        # record name that is not utf-8
        path = os.path.join(tmp, "badname.ttpk")
        with open(path, "wb") as f:
            f.write(b"TTPK" + struct.pack("<I", 1))
            f.write(struct.pack("<I", 2) + b"\xff\xfe")
            f.write(struct.pack("<I", 1) + struct.pack("<I", 1) + struct.pack("<d", 0.0))

        with test.assertRaises(ttpk.DataError):
            ttpk.read_tensors(path)


def register(parent):

    class TestOptimizer(parent):
        pass

    add_function_test(TestOptimizer, "test_adam_zero_gradient", test_adam_zero_gradient)
    add_function_test(TestOptimizer, "test_adam_first_step", test_adam_first_step, seeds=[0, 1])
    add_function_test(TestOptimizer, "test_adam_quadratic", test_adam_quadratic, seeds=[0, 1, 2])
    add_function_test(TestOptimizer, "test_adam_lr_zero", test_adam_lr_zero)
    add_function_test(TestOptimizer, "test_adam_frozen", test_adam_frozen)
    add_function_test(TestOptimizer, "test_optimizer_schedule", test_optimizer_schedule)
    add_function_test(TestOptimizer, "test_store_copy", test_store_copy)
    add_function_test(TestOptimizer, "test_checkpoint_round_trip", test_checkpoint_round_trip)
    add_function_test(TestOptimizer, "test_checkpoint_truncated", test_checkpoint_truncated)
    add_function_test(TestOptimizer, "test_checkpoint_corrupt_records", test_checkpoint_corrupt_records)

    return TestOptimizer

if __name__ == '__main__':
    c = register(unittest.TestCase)
    unittest.main(verbosity=2)
