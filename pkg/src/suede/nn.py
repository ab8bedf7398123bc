"""Parameter containers shared by the MoE layer and the encoders."""

from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from .rng import SplitMix64
from .tensor import Tensor, layer_norm, parameter

INIT_STD = 0.02


def init_weight(rng: SplitMix64, shape) -> Tensor:
    return parameter(rng.trunc_normal(shape, std=INIT_STD))


def zeros(shape) -> Tensor:
    return parameter(np.zeros(shape))


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def clone(self):
        """Deep copy with independent parameter storage and no gradients."""
        twin = copy.deepcopy(self)
        for p in twin.parameters():
            p.grad = None
        return twin


class Linear(Module):
    def __init__(self, rng: SplitMix64, d_in: int, d_out: int, bias: bool = True):
        self.weight = init_weight(rng, (d_in, d_out))
        self.bias = zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = zeros((dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)
