"""Named, ordered parameter storage with deterministic initialisation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor, conv2d

INIT_GAIN = float(np.sqrt(2.0))


@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor]
    stride: int = 1
    depthwise: bool = False

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, depthwise=self.depthwise)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


class ParamStore:
    """Insertion-ordered mapping of parameter name to leaf tensor.

    Weights are drawn from U(-g/sqrt(fan_in), g/sqrt(fan_in)) with the
    gain g = sqrt(2); biases start at zero.  ``init="zero"``
    zeroes everything (used by fixtures).
    """

    def __init__(self, seed: int = 0, init: str = "uniform"):
        if init not in ("uniform", "zero"):
            raise ValueError(f"unknown init scheme {init!r}")
        self.rng = np.random.default_rng(seed)
        self.init = init
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape: tuple, fan_in: int) -> Tensor:
        bound = INIT_GAIN / np.sqrt(fan_in)
        # draw even when zero-initialising so the rng stream is layout-stable
        value = self.rng.uniform(-bound, bound, size=shape)
        if self.init == "zero":
            value = np.zeros(shape)
        return self.add(name, value)

    def conv(
        self,
        name: str,
        c_out: int,
        c_in: int,
        k: int,
        stride: int = 1,
        depthwise: bool = False,
    ) -> ConvParams:
        per_out = 1 if depthwise else c_in
        w = self.uniform(f"{name}.weight", (c_out, per_out, k, k), fan_in=per_out * k * k)
        b = self.add(f"{name}.bias", np.zeros(c_out))
        return ConvParams(w, b, stride=stride, depthwise=depthwise)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}
