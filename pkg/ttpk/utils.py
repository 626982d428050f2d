# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

import math
import timeit
import numpy as np

from ttpk.types import Tensor, float64


def rotation2d(angle):
    """Counter-clockwise rotation matrix in (x, y) image coordinates"""
    c = math.cos(angle)
    s = math.sin(angle)
    return np.array(((c, -s), (s, c)))


def similarity_about(center, angle, scale):
    """Returns (A, t) such that p' = A p + t rotates by ``angle`` and scales by ``scale`` about ``center``"""

    center = np.asarray(center, dtype=float64)
    A = scale*rotation2d(angle)
    t = center - A @ center

    return A, t


def transform_points(points, A, t):
    return np.asarray(points) @ A.T + t


def finite_diff_grad(f, x: Tensor, h: float=1.e-5) -> Tensor:
    """Central-difference gradient of a scalar function

    Each element of ``x`` is perturbed in place by +h and -h, ``f`` is evaluated
    with no tape active and the original value restored afterwards.

    Args:
        f: Callable taking no arguments and returning a scalar (Tensor or float)
        x: Tensor the gradient is taken with respect to
        h: Perturbation size

    Returns:
        Tensor of the same shape as ``x`` holding (f(x+h) - f(x-h))/2h
    """

    def evaluate():
        r = f()
        if isinstance(r, Tensor):
            return r.item()
        return float(r)

    grad = np.zeros(x.shape, dtype=float64)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)

    for i in range(flat.size):

        orig = flat[i]

        flat[i] = orig + h
        fp = evaluate()

        flat[i] = orig - h
        fm = evaluate()

        flat[i] = orig
        out[i] = (fp - fm)/(2.0*h)

    return Tensor(grad)


def relative_error(a, b, tiny=1.e-12):
    """Norm-relative discrepancy between two arrays"""

    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)

    return float(np.linalg.norm(a - b)/max(np.linalg.norm(a), np.linalg.norm(b), tiny))


# timer utils

class ScopedTimer:

    indent = -1

    enabled = True

    def __init__(self, name, active=True, print=True):
        self.name = name
        self.active = active and self.enabled
        self.print = print
        self.elapsed = 0.0

    def __enter__(self):

        if (self.active):

            self.start = timeit.default_timer()
            ScopedTimer.indent += 1

        return self

    def __exit__(self, exc_type, exc_value, traceback):

        if (self.active):

            self.elapsed = (timeit.default_timer() - self.start) * 1000.0

            indent = ""
            for i in range(ScopedTimer.indent):
                indent += "\t"

            if (self.print):
                print("{}{} took {:.2f} ms".format(indent, self.name, self.elapsed))

            ScopedTimer.indent -= 1
