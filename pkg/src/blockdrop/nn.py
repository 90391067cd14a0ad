"""Layer building blocks shared by the backbone, the policy network and the gates."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .flops import flops_conv, flops_linear
from .tensor import Parameter, Tensor


class Module:
    """Parameter container; children are discovered from instance attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, list):
                        for j, sub in enumerate(item):
                            if isinstance(sub, Module):
                                yield from sub.named_parameters(f"{name}.{i}.{j}.")

    def name_parameters(self) -> None:
        """Stamp each parameter with its dotted path inside this module."""
        for name, p in self.named_parameters():
            p.name = name

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:3]} unexpected={extra[:3]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int, rng, dtype=np.float32):
        if k % 2 == 0 or stride not in (1, 2):
            raise ValueError("conv layers use odd kernels and stride 1 or 2")
        self.weight = Parameter(_he(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.pad)

    def out_hw(self, hw: tuple[int, int]) -> tuple[int, int]:
        k = self.weight.shape[2]
        return tuple(
            (n + 2 * self.pad - k) // self.stride + 1 for n in hw
        )  # type: ignore[return-value]

    def flops(self, hw: tuple[int, int]) -> int:
        o, c, kh, kw = self.weight.shape
        ho, wo = self.out_hw(hw)
        return flops_conv(c, o, kh, kw, ho, wo)


class Linear(Module):
    def __init__(self, m: int, n: int, rng, dtype=np.float32, bias: bool = True):
        self.weight = Parameter(_he(rng, (m, n), m, dtype))
        self.bias = Parameter(np.zeros(n, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def flops(self) -> int:
        m, n = self.weight.shape
        return flops_linear(m, n)


class Affine(Module):
    """Per-channel scale and shift, identity at initialisation."""

    def __init__(self, channels: int, dtype=np.float32):
        self.scale = Parameter(np.ones(channels, dtype=dtype))
        self.shift = Parameter(np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.channel_affine(x, self.scale, self.shift)
