# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

import numpy as np

from typing import Tuple, List, Callable

import ttpk
import ttpk.config

from ttpk.types import Tensor, NumericError, float64


class Function:
    """A differentiable operator

    Wraps the forward computation of an operator together with its adjoint. The
    adjoint receives the incoming gradient of the output and returns one gradient
    per input (None for inputs that are constants).
    """

    def __init__(self, key, forward, doc="", group="Other"):

        self.key = key
        self.forward = forward
        self.doc = doc
        self.group = group

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


builtin_functions = {}

def add_builtin(key, doc="", group="Other"):
    """Decorator registering a differentiable operator under ``key``"""

    def wrapper(f):
        func = Function(key, f, doc=doc or f.__doc__ or "", group=group)
        builtin_functions[key] = func
        return func

    return wrapper


class Runtime:

    def __init__(self):

        # print version and precision information
        print("TTPK initialized:")
        print("   Version: {}".format(ttpk.config.version))
        print("   Precision: float64, numpy {}".format(np.__version__))

        # global tape
        self.tape = None


# initialize global runtime
runtime = None

def init():
    """Initialize the TTPK runtime. This function must be called before recording onto a :class:`ttpk.Tape`.
    """
    global runtime

    if (runtime == None):
        runtime = Runtime()

    return runtime


def get_tape():
    """Returns the tape currently recording, or None"""
    if runtime is None:
        return None
    return runtime.tape


def launch(func: Function, inputs: List, data: np.ndarray, adjoint: Callable) -> Tensor:
    """Wrap the result of an operator and record it onto the active tape

    Args:
        func: The operator that produced ``data``
        inputs: Operator inputs, tensors or constants
        data: Forward result
        adjoint: Callable mapping the output gradient to a tuple of input gradients

    Returns:
        The output tensor, tracked for gradients if any input is
    """

    if ttpk.config.verify_fp:
        if not np.all(np.isfinite(data)):
            raise NumericError(f"TTPK: non-finite values produced by operator '{func.key}'")

    out = Tensor(data)

    tensors = [a for a in inputs if isinstance(a, Tensor)]
    tracked = any(a.requires_grad for a in tensors)

    tape = get_tape()
    if tracked and tape is not None:
        out.requires_grad = True
        tape.record(func, inputs, out, adjoint)

        if ttpk.config.print_ops:
            print("TTPK: recorded {} -> {} (node {})".format(func.key, out.shape, out.node_id))

    return out


def zeros(shape: Tuple=None, requires_grad: bool=False) -> Tensor:
    """Return a zero-initialized tensor

    Args:
        shape: Tensor dimensions
        requires_grad: Whether the tensor will be tracked for back propagation
    """
    return Tensor(np.zeros(shape, dtype=float64), requires_grad=requires_grad)


def zeros_like(src: Tensor, requires_grad: bool=False) -> Tensor:
    return zeros(src.shape, requires_grad=requires_grad)


def ones(shape: Tuple=None, requires_grad: bool=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=float64), requires_grad=requires_grad)


def from_numpy(arr, requires_grad=False) -> Tensor:
    return Tensor(np.asarray(arr, dtype=float64), requires_grad=requires_grad)


def randn(shape, rng: np.random.Generator, std=1.0, requires_grad=False) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=requires_grad)
