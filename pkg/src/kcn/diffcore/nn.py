"""Parameter containers, layers and the Adam optimizer."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterable, Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=get_default_dtype()), requires_grad=True, name=name)


class Module:
    """Owns trainable tensors and child modules, discovered by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            key = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{key}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in params:
                continue
            p = params[name]
            if tuple(value.shape) != p.shape:
                raise ValueError(f"{name}: checkpoint shape {tuple(value.shape)} != parameter shape {p.shape}")
            p.data = np.array(value, dtype=p.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def checksum(self) -> float:
        """Cheap fingerprint of all parameter values."""
        return float(sum(np.sum(p.data.astype(np.float64) * (i + 1)) for i, p in enumerate(self.parameters())))

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, std: Optional[float] = None):
        # He-style default keeps ReLU stacks alive
        std = np.sqrt(2.0 / in_features) if std is None else std
        self.weight = parameter(rng.normal(0.0, std, size=(in_features, out_features)))
        self.bias = parameter(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.affine(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, rng: Optional[np.random.Generator] = None, std: Optional[float] = None):
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        std = np.sqrt(2.0 / fan_in) if std is None else std
        self.stride, self.padding = stride, padding
        self.weight = parameter(rng.normal(0.0, std, size=(out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = parameter(np.zeros(out_channels))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Adam:
    """Adam with PyTorch's defaults (betas 0.9/0.999, eps 1e-8, no weight decay)."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        state = {"adam.t": np.array([self.t], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"adam.m.{i}"] = m
            state[f"adam.v.{i}"] = v
        return state

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["adam.t"][0])
        self.m = [np.array(state[f"adam.m.{i}"], dtype=p.dtype) for i, p in enumerate(self.params)]
        self.v = [np.array(state[f"adam.v.{i}"], dtype=p.dtype) for i, p in enumerate(self.params)]
