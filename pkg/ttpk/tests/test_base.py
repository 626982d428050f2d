# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

import unittest
import os
import sys

import numpy as np
import ttpk

from ttpk.utils import relative_error


# redirects and captures all stdout output
class StdOutCapture:

    def begin(self):

        # save original
        self.saved = sys.stdout
        self.target = os.dup(self.saved.fileno())

        # create temporary capture stream
        import io, tempfile
        self.tempfile = io.TextIOWrapper(
                            tempfile.TemporaryFile(buffering=0),
                            encoding="utf-8",
                            errors="replace",
                            newline="",
                            write_through=True)

        os.dup2(self.tempfile.fileno(), self.saved.fileno())

        sys.stdout = self.tempfile

    def end(self):

        sys.stdout.flush()

        os.dup2(self.target, self.saved.fileno())
        os.close(self.target)

        self.tempfile.seek(0)
        res = self.tempfile.buffer.read()
        self.tempfile.close()

        sys.stdout = self.saved

        return str(res.decode("utf-8"))


def assert_np_equal(result, expect, tol=0.0):

    a = np.asarray(result.numpy() if hasattr(result, "numpy") else result).flatten()
    b = np.asarray(expect.numpy() if hasattr(expect, "numpy") else expect).flatten()

    if a.shape != b.shape:
        raise AssertionError(f"Unexpected shape, got: {a.shape} expected: {b.shape}")

    if tol == 0.0:

        if ((a == b).all() == False):
            raise AssertionError(f"Unexpected result, got: {a} expected: {b}")

    else:

        delta = a-b
        err = np.max(np.abs(delta))
        if err > tol:
            raise AssertionError(f"Maximum expected error exceeds tolerance got: {a}, expected: {b}, with err: {err} > {tol}")


def assert_grad_close(test, analytic, numeric, tol=1.e-4):
    err = relative_error(analytic, numeric)
    test.assertLess(err, tol, f"gradient mismatch, relative error {err}")


def sampled_fd_grad(f, x, indices, h=1.e-5):
    """Central differences of scalar f() w.r.t. the given flat indices of tensor x"""

    flat = x.data.reshape(-1)
    out = np.zeros(len(indices))

    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        out[n] = (fp - fm)/(2.0*h)

    return out


def check_param_grad(test, loss_fn, param, rng, count=12, tol=1.e-4):
    """Compare tape gradients of loss_fn() against central differences on a random subset of entries"""

    with ttpk.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    grad = tape.gradients.get(param)
    test.assertIsNotNone(grad, "parameter received no gradient")

    indices = rng.choice(param.size, size=min(count, param.size), replace=False)
    numeric = sampled_fd_grad(loss_fn, param, indices)

    assert_grad_close(test, grad.numpy().reshape(-1)[indices], numeric, tol)


def tiny_net_config(**kwargs):
    """Smallest network that still exercises every branch"""

    from ttpk.pose.model import NetConfig

    args = dict(image_size=32, channels=8, k_self=4, k_sup=3, app_channels=4, kp_channels=4,
                decoder_channels=4, heads=2, layers=1, d_ff=8, dropout=0.0)
    args.update(kwargs)

    return NetConfig(**args)


def tiny_train_config(**kwargs):

    from ttpk.pose.trainer import TrainConfig

    args = dict(steps=3, batch_size=2, lr_milestones=[2], log_interval=0, perceptual=True)
    args.update(kwargs)

    return TrainConfig(**args)


_tiny_cache = {}

def tiny_datasets(mode="sequential", frames=4, seed=0):
    """Three subjects (two train, one test) of 32 px frames with three supervised joints, cached per arguments"""

    from ttpk.pose.dataset import build_dataset

    key = (mode, frames, seed)
    if key not in _tiny_cache:
        _tiny_cache[key] = build_dataset(3, frames, 32, mode, seed, k_sup=3, n_test=1)

    return _tiny_cache[key]


def create_test_func(func, seed, **kwargs):

    # pass args to func
    def test_func(self):
        func(self, seed, **kwargs)

    return test_func


def add_function_test(cls, name, func, seeds=[0], **kwargs):

    for seed in seeds:
        setattr(cls, name + "_seed" + str(seed), create_test_func(func, seed, **kwargs))
