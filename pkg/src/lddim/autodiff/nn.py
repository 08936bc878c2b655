"""Layers and parameter containers built on the tape ops."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Base class: parameters are Tensor attributes, children are Module attributes
    (or lists of Modules). Names are dotted attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> "ParameterSet":
        return ParameterSet(OrderedDict(self.named_parameters()))


class ParameterSet:
    """Ordered name -> Tensor mapping; the tensors are shared with the owning module."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self.tensors.items())

    def load(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, t in self.tensors.items():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"checkpoint is missing parameter {key!r}")
            value = np.asarray(arrays[key], dtype=np.float64)
            if value.shape != t.shape:
                raise ValueError(f"parameter {key!r}: expected shape {t.shape}, got {value.shape}")
            t.data = value.copy()

    def freeze(self) -> None:
        """Stop recording gradients and clear any stale gradient buffers."""
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


def _he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.standard_normal(shape) * np.sqrt(1.0 / fan_in), requires_grad=True)


class Dense(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, zero: bool = False):
        self.weight = Tensor(np.zeros((fan_in, fan_out)), requires_grad=True) if zero else _he(rng, (fan_in, fan_out), fan_in)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, zero: bool = False):
        shape = (c_out, c_in, kernel, kernel)
        self.weight = Tensor(np.zeros(shape), requires_grad=True) if zero else _he(rng, shape, c_in * kernel * kernel)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, output_padding: int = 0):
        shape = (c_in, c_out, kernel, kernel)
        # each output pixel receives ~ c_in * (kernel / stride)^2 contributions
        fan = max(1, c_in * (kernel // stride) ** 2)
        self.weight = _he(rng, shape, fan)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)
