# Copyright (c) 2022 NVIDIA CORPORATION.  All rights reserved.
# NVIDIA CORPORATION and its licensors retain all intellectual property
# and proprietary rights in and to this software, related documentation
# and any modifications thereto.  Any use, reproduction, disclosure or
# distribution of this software and related documentation without an express
# license agreement from NVIDIA CORPORATION is strictly prohibited.

import os
import struct

import numpy as np

from typing import Dict, List

from ttpk.types import Tensor, DataError, float64


CHECKPOINT_MAGIC = b"TTPK"
CHECKPOINT_VERSION = 1

# optimizer state records share the container with parameters
_STATE_PREFIXES = ("@m/", "@v/", "@t/")


class ParamStore:
    """Named parameters plus their per-parameter Adam state

    Parameter names carry a group prefix, e.g.: ``"enc.conv0.weight"``. Freezing is
    expressed with prefixes, a frozen parameter is never touched by :func:`adam_step`.

    Attributes:
        params (Dict[str, Tensor]): Parameters by name, in insertion order
        frozen (set): Names of frozen parameters, always a subset of ``params``
        m (Dict[str, np.ndarray]): First moment estimates
        v (Dict[str, np.ndarray]): Second moment estimates
        t (Dict[str, int]): Update count per parameter
        config: Architecture the parameters were built for, None when unknown
    """

    def __init__(self):

        self.params = {}
        self.frozen = set()

        self.m = {}
        self.v = {}
        self.t = {}
        self.config = None

    def add(self, name: str, value) -> Tensor:

        if name in self.params:
            raise ValueError(f"Parameter '{name}' already exists")

        p = Tensor(value, requires_grad=True)
        self.params[name] = p
        self.m[name] = np.zeros(p.shape, dtype=float64)
        self.v[name] = np.zeros(p.shape, dtype=float64)
        self.t[name] = 0

        return p

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __len__(self):
        return len(self.params)

    def names(self, prefix="") -> List[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def freeze(self, prefixes):
        """Freeze every parameter whose name starts with one of ``prefixes``"""
        if isinstance(prefixes, str):
            prefixes = [prefixes]

        for name in self.params:
            if any(name.startswith(p) for p in prefixes):
                self.frozen.add(name)

    def unfreeze_all(self):
        self.frozen = set()

    def is_frozen(self, name) -> bool:
        return name in self.frozen

    def reset_state(self):
        """Zero the optimizer moments and step counts"""
        for name, p in self.params.items():
            self.m[name] = np.zeros(p.shape, dtype=float64)
            self.v[name] = np.zeros(p.shape, dtype=float64)
            self.t[name] = 0

    def copy(self):
        """Deep copy of parameters, optimizer state and frozen set"""
        store = ParamStore()
        for name, p in self.params.items():
            store.add(name, p.data.copy())
            store.m[name] = self.m[name].copy()
            store.v[name] = self.v[name].copy()
            store.t[name] = self.t[name]

        store.frozen = set(self.frozen)
        store.config = self.config
        return store

    def assign(self, other):
        """Overwrite parameter values and optimizer state in place from another store"""
        for name, p in self.params.items():
            p.assign(other.params[name])
            self.m[name] = other.m[name].copy()
            self.v[name] = other.v[name].copy()
            self.t[name] = other.t[name]

    def num_elements(self, prefix="") -> int:
        return int(np.sum([self.params[n].size for n in self.names(prefix)]))

    def save(self, path, with_state=True):
        save_checkpoint(self, path, with_state)

    @staticmethod
    def load(path):
        return load_checkpoint(path)


def adam_step(params: ParamStore, grads: Dict[Tensor, Tensor], lr: float, beta1: float=0.9, beta2: float=0.999, eps: float=1.e-8):
    """Apply one bias-corrected Adam update to every unfrozen parameter

    Args:
        params: Parameter store, moments are updated in place
        grads: Mapping from parameter tensor to gradient, e.g.: ``tape.gradients``
        lr: Learning rate, lr=0 leaves parameters bitwise unchanged
        beta1: First moment decay
        beta2: Second moment decay
        eps: Denominator offset
    """

    for name, p in params.params.items():

        if name in params.frozen:
            continue

        g = grads.get(p)
        if g is None:
            raise RuntimeError(f"Missing gradient for unfrozen parameter '{name}'")

        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=float64)

        t = params.t[name] + 1
        m = beta1*params.m[name] + (1.0 - beta1)*g
        v = beta2*params.v[name] + (1.0 - beta2)*g*g

        m_hat = m/(1.0 - beta1**t)
        v_hat = v/(1.0 - beta2**t)

        if lr != 0.0:
            p.data -= lr*m_hat/(np.sqrt(v_hat) + eps)

        params.m[name] = m
        params.v[name] = v
        params.t[name] = t


class Optimizer:
    """Adam with a piecewise-constant learning rate

    The learning rate is divided by ``decay`` each time the step count passes one of
    ``milestones``.
    """

    def __init__(self, params: ParamStore, lr: float, milestones: List[int]=[], decay: float=10.0, betas=(0.9, 0.999), eps=1.e-8):

        if any(b <= a for a, b in zip(milestones[:-1], milestones[1:])):
            raise ValueError(f"Learning rate milestones must be increasing, got {milestones}")

        self.params = params
        self.base_lr = lr
        self.milestones = list(milestones)
        self.decay = decay
        self.betas = betas
        self.eps = eps

    def lr_at(self, step: int) -> float:
        drops = len([m for m in self.milestones if step >= m])
        return self.base_lr/(self.decay**drops)

    def step(self, grads, step: int):
        lr = self.lr_at(step)
        adam_step(self.params, grads, lr, self.betas[0], self.betas[1], self.eps)
        return lr


#----------------------
# checkpoint container
#
# magic "TTPK", version u32, then records of
# (name length u32, utf-8 name, ndim u32, dims u32 x ndim, f64 data) until EOF, little-endian

def _write_record(f, name, arr):

    arr = np.ascontiguousarray(arr, dtype="<f8")
    raw = name.encode("utf-8")

    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack("<{}I".format(arr.ndim), *arr.shape))
    f.write(arr.tobytes())


def _read_exact(f, n, path):
    buf = f.read(n)
    if len(buf) != n:
        raise DataError(f"Truncated checkpoint file '{path}'")
    return buf


def write_tensors(path, records: Dict[str, np.ndarray]):

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))

        for name, arr in records.items():
            _write_record(f, name, arr)


def read_tensors(path) -> Dict[str, np.ndarray]:

    if not os.path.exists(path):
        raise DataError(f"Checkpoint file '{path}' not found")

    records = {}

    with open(path, "rb") as f:

        if f.read(4) != CHECKPOINT_MAGIC:
            raise DataError(f"File '{path}' is not a TTPK checkpoint")

        version, = struct.unpack("<I", _read_exact(f, 4, path))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"Unsupported checkpoint version {version} in '{path}'")

        while True:
            head = f.read(4)
            if len(head) == 0:
                break
            if len(head) != 4:
                raise DataError(f"Truncated checkpoint file '{path}'")

            n, = struct.unpack("<I", head)
            try:
                name = _read_exact(f, n, path).decode("utf-8")
            except UnicodeDecodeError:
                raise DataError(f"Record name in checkpoint '{path}' is not valid UTF-8")

            ndim, = struct.unpack("<I", _read_exact(f, 4, path))
            shape = struct.unpack("<{}I".format(ndim), _read_exact(f, 4*ndim, path))

            count = int(np.prod(shape)) if ndim > 0 else 1
            data = np.frombuffer(_read_exact(f, 8*count, path), dtype="<f8")

            records[name] = data.reshape(shape).astype(float64)

    return records


def save_checkpoint(params: ParamStore, path, with_state=True):

    records = {}
    for name, p in params.params.items():
        records[name] = p.data

    if with_state:
        for name in params.params:
            records["@m/" + name] = params.m[name]
            records["@v/" + name] = params.v[name]
            records["@t/" + name] = np.array([params.t[name]], dtype=float64)

    write_tensors(path, records)


def load_checkpoint(path) -> ParamStore:

    records = read_tensors(path)

    store = ParamStore()
    for name, arr in records.items():
        if not name.startswith(_STATE_PREFIXES):
            store.add(name, arr)

    for name in store.params:
        if "@m/" + name in records:
            missing = [p + name for p in ("@v/", "@t/") if p + name not in records]
            if missing:
                raise DataError(f"Checkpoint '{path}' holds optimizer state for '{name}' without {missing}")

            store.m[name] = records["@m/" + name]
            store.v[name] = records["@v/" + name]
            store.t[name] = int(records["@t/" + name][0])

    return store
