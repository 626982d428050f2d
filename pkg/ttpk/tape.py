# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

import numpy as np
import ttpk

from ttpk.types import Tensor, float64


class Tape:

    def __init__(self):

        self.gradients = {}
        self.launches = []
        self.node_count = 0

    def __enter__(self):
        if (ttpk.context.runtime == None):
            raise RuntimeError("TTPK not initialized, call ttpk.init() before use")

        if (ttpk.context.runtime.tape != None):
            raise RuntimeError("TTPK: Error, entering a tape while one is already active")

        ttpk.context.runtime.tape = self
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        if (ttpk.context.runtime.tape == None):
            raise RuntimeError("TTPK: Error, ended tape capture, but tape not present")

        ttpk.context.runtime.tape = None

    # after running backward the gradients of tensors may be retrieved by:
    #
    #  adj_tensor = tape.gradients[tensor]
    #
    # repeated calls accumulate onto the stored gradients, call zero() in between
    def backward(self, loss: Tensor=None, grads: dict=None):

        adjoints = {}

        # if scalar loss is specified then seed it with a gradient of one
        if (loss is not None):

            if loss.size != 1:
                raise ValueError(f"Can only return gradients for scalar loss functions, got shape {loss.shape}")

            adjoints[loss] = np.ones(loss.shape, dtype=float64)

        # insert any user specified output gradients
        if (grads):
            for k, v in grads.items():
                adjoints[k] = np.array(v.data if isinstance(v, Tensor) else v, dtype=float64)

        # run launches backwards
        for launch in reversed(self.launches):

            func, inputs, output, adjoint = launch

            adj_output = adjoints.get(output)
            if adj_output is None:
                continue

            adj_inputs = adjoint(adj_output)

            for a, adj in zip(inputs, adj_inputs):

                if adj is None or not isinstance(a, Tensor) or not a.requires_grad:
                    continue

                if a.shape != adj.shape:
                    raise RuntimeError(f"TTPK: adjoint of '{func.key}' has shape {adj.shape}, expected {a.shape}")

                if a in adjoints:
                    adjoints[a] = adjoints[a] + adj
                else:
                    adjoints[a] = adj

        for a, adj in adjoints.items():
            if a in self.gradients:
                self.gradients[a].data += adj
            else:
                self.gradients[a] = Tensor(adj)

    # record an operator on the tape
    def record(self, func, inputs, output, adjoint):

        for a in inputs:
            if isinstance(a, Tensor) and a.requires_grad and a.node_id is None:
                a.node_id = self._next_id()

        output.node_id = self._next_id()
        self.launches.append([func, inputs, output, adjoint])

    def _next_id(self):
        self.node_count += 1
        return self.node_count - 1

    # returns the gradient of a tensor used in the computation, None if unreachable
    def get_adjoint(self, a):

        if isinstance(a, Tensor) == False:
            # if input is a simple type just return a value copy
            return a

        return self.gradients.get(a)

    def reset(self):

        self.launches = []
        self.gradients = {}

    def zero(self):

        for a in self.gradients.values():
            a.zero_()
