# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

import numpy as np

from typing import Tuple


float64 = np.float64

#----------------------
# error types

class DimensionError(ValueError):
    """Raised when operand shapes are incompatible"""
    pass

class ConfigError(ValueError):
    """Raised when a configuration is invalid or inconsistent"""
    pass

class DataError(IOError):
    """Raised when a dataset or checkpoint on disk is unreadable or inconsistent"""
    pass

class NumericError(RuntimeError):
    """Raised when a computation produces non-finite values"""
    pass


#----------------------
# tensor

class Tensor:
    """n-dimensional float64 array that may take part in reverse-mode differentiation

    Tensors are the currency of all network math. When a :class:`ttpk.Tape` is active
    every operator applied to a tensor that requires gradients is recorded, the output
    receives a ``node_id`` referencing its position on the tape.

    Attributes:
        data (np.ndarray): Row-major float64 storage
        requires_grad (bool): Whether the tensor is tracked for back propagation
        node_id (int): Tape handle, None when the tensor is detached
    """

    def __init__(self, data, requires_grad=False):

        if isinstance(data, Tensor):
            data = data.data

        self.data = np.array(data, dtype=float64)
        self.requires_grad = requires_grad
        self.node_id = None

    @property
    def shape(self) -> Tuple[int]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self):
        return self.data.shape[0]

    def __str__(self):
        return str(self.data)

    def __repr__(self):
        return "Tensor(shape={}, requires_grad={}, node_id={})".format(self.shape, self.requires_grad, self.node_id)

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() requires a single element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_(self):
        self.data.fill(0.0)

    def assign(self, src):
        src = src.data if isinstance(src, Tensor) else np.asarray(src, dtype=float64)
        if src.shape != self.shape:
            raise DimensionError(f"Cannot assign array of shape {src.shape} to tensor of shape {self.shape}")
        self.data[...] = src

    # operator sugar, forwards to ttpk.builtins so ops are recorded on the active tape
    def __add__(self, other):
        from ttpk.builtins import add
        return add(self, other)

    def __radd__(self, other):
        from ttpk.builtins import add
        return add(other, self)

    def __sub__(self, other):
        from ttpk.builtins import sub
        return sub(self, other)

    def __rsub__(self, other):
        from ttpk.builtins import sub
        return sub(other, self)

    def __mul__(self, other):
        from ttpk.builtins import mul
        return mul(self, other)

    def __rmul__(self, other):
        from ttpk.builtins import mul
        return mul(other, self)

    def __neg__(self):
        from ttpk.builtins import mul
        return mul(self, -1.0)

    def __matmul__(self, other):
        from ttpk.builtins import matmul
        return matmul(self, other)


def tensor(data, requires_grad=False) -> Tensor:
    """Construct a float64 tensor from any array-like"""
    return Tensor(data, requires_grad=requires_grad)
