"""Parameter containers shared by the network modules."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import Tensor, conv2d, fully_connected


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


def zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor
    stride: int = 1

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1, zero: bool = False) -> "Conv":
        if zero:
            return cls(zeros((c_out, c_in, k, k)), zeros((c_out,)), stride)
        return cls(he_uniform(rng, (c_out, c_in, k, k), c_in * k * k), zeros((c_out,)), stride)

    @property
    def kernel(self) -> int:
        return self.weight.shape[-1]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, (self.kernel - 1) // 2)


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, d_in: int, d_out: int) -> "Linear":
        return cls(he_uniform(rng, (d_out, d_in), d_in), zeros((d_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclass fields (and lists of them) yielding dotted tensor names."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)


def count_layers(obj, kind: type) -> int:
    if isinstance(obj, kind):
        return 1
    if isinstance(obj, (list, tuple)):
        return sum(count_layers(o, kind) for o in obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return sum(count_layers(getattr(obj, f.name), kind) for f in dataclasses.fields(obj))
    return 0
