"""Capsule feature extractor: conv stem, primary capsules, squash and dynamic routing.

Also holds the margin loss used by the plain CapsNet baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .diffcore import Module, Tensor, ops, parameter
from .diffcore.ops import conv_output_size


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    """One ``C(in, out, kernel, stride, padding)`` layer."""

    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.out_channels) < 1 or self.kernel_size < 1 or self.stride < 1 \
                or self.padding < 0:
            raise ConfigError(f"invalid conv spec {self}")

    def output_size(self, size: int) -> int:
        out = conv_output_size(size, self.kernel_size, self.stride, self.padding)
        if out < 1:
            raise ConfigError(f"{self} maps spatial size {size} to {out}")
        return out


MNIST_STEM = (ConvSpec(1, 12, 4, 2, 3), ConvSpec(12, 16, 3, 2, 1))
MNIST_CAPS = ConvSpec(16, 32, 8, 2, 0)
COLOR_STEM = (ConvSpec(3, 64, 4, 2, 1), ConvSpec(64, 64, 3, 2, 1))
COLOR_CAPS = ConvSpec(64, 32, 8, 2, 0)


@dataclass
class CapsNetConfig:
    image_shape: Tuple[int, int, int] = (1, 28, 28)
    stem: Sequence[ConvSpec] = MNIST_STEM
    capsule_conv: ConvSpec = MNIST_CAPS
    num_primary_convs: int = 8  # becomes the primary capsule dimension
    num_classes: int = 10
    capsule_dim: int = 16
    routing_iterations: int = 3
    unrolled_routing: bool = False
    init_std: Optional[float] = 0.01  # None selects He-normal scaling

    @classmethod
    def for_dataset(cls, name: str, **overrides) -> "CapsNetConfig":
        if name == "mnist":
            base = cls()
        elif name in ("cifar10", "svhn"):
            base = cls(image_shape=(3, 32, 32), stem=COLOR_STEM, capsule_conv=COLOR_CAPS)
        else:
            raise ConfigError(f"no capsule architecture for dataset {name!r}")
        for key, value in overrides.items():
            setattr(base, key, value)
        return base

    def feature_shapes(self) -> List[Tuple[int, int, int]]:
        """Shapes after each stem layer, then after the capsule convolution."""
        c, h, w = self.image_shape
        shapes = []
        if self.stem and self.stem[0].in_channels != c:
            raise ConfigError(f"first conv expects {self.stem[0].in_channels} channels, image has {c}")
        for spec in list(self.stem) + [self.capsule_conv]:
            if spec.in_channels != c:
                raise ConfigError(f"{spec} follows a layer with {c} channels")
            c, h, w = spec.out_channels, spec.output_size(h), spec.output_size(w)
            shapes.append((c, h, w))
        return shapes

    @property
    def num_primary_capsules(self) -> int:
        c, h, w = self.feature_shapes()[-1]
        return c * h * w

    @property
    def feature_dim(self) -> int:
        return self.num_classes * self.capsule_dim


# -- squash and routing ------------------------------------------------------

SQUASH_EPS = 1e-9


def squash(s, axis: int = -1) -> Tensor:
    """Shrink ``s`` to norm ``|s|^2 / (1 + |s|^2)`` keeping its direction."""
    s = s if isinstance(s, Tensor) else Tensor(s)
    sq = ops.sum(ops.square(s), axis=axis, keepdims=True)
    norm = ops.sqrt(sq + SQUASH_EPS)
    return s * (sq / ((1.0 + sq) * norm))


def squash_np(s: np.ndarray, axis: int = -1) -> np.ndarray:
    sq = np.sum(s * s, axis=axis, keepdims=True)
    return s * sq / ((1.0 + sq) * np.sqrt(sq + SQUASH_EPS))


def _softmax_np(b: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(b - b.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class RoutingState:
    logits: np.ndarray       # (N, Np, Nc) b_ij after the last update
    couplings: List[np.ndarray] = field(default_factory=list)  # c_ij per iteration
    predictions: Optional[np.ndarray] = None  # (N, Np, Nc, k) u_hat


def dynamic_routing(u_hat: Tensor, iterations: int = 3, unrolled: bool = False,
                    state: Optional[RoutingState] = None) -> Tensor:
    """Routing by agreement over prediction vectors ``u_hat`` of shape (N, Np, Nc, k).

    With ``unrolled=False`` the logit updates run outside the tape and the
    output depends on ``u_hat`` through the final iteration only, with the
    final coupling coefficients held fixed.
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    n, n_primary, n_classes, _ = u_hat.shape
    if unrolled:
        b = Tensor(np.zeros((n, n_primary, n_classes), dtype=u_hat.dtype))
        for it in range(iterations):
            c = ops.softmax(b, axis=2)
            if state is not None:
                state.couplings.append(c.data)
            v = squash(ops.sum(ops.reshape(c, c.shape + (1,)) * u_hat, axis=1))  # (N, Nc, k)
            if it < iterations - 1:
                b = b + ops.einsum("npjk,njk->npj", u_hat, v)
        if state is not None:
            state.logits, state.predictions = b.data, u_hat.data
        return v

    u = u_hat.data
    b = np.zeros((n, n_primary, n_classes), dtype=u.dtype)
    for _ in range(iterations - 1):
        c = _softmax_np(b, axis=2)
        if state is not None:
            state.couplings.append(c)
        v = squash_np(np.einsum("npj,npjk->njk", c, u))
        b = b + np.einsum("npjk,njk->npj", u, v)
    c = _softmax_np(b, axis=2)
    if state is not None:
        state.couplings.append(c)
        state.logits, state.predictions = b, u
    return squash(ops.sum(Tensor(c[..., None]) * u_hat, axis=1))


# -- the network -------------------------------------------------------------

class CapsNet(Module):
    """Maps N×C×H×W images to N×Nc×k output capsules."""

    def __init__(self, config: CapsNetConfig, rng: np.random.Generator):
        config.feature_shapes()  # validates the layer chain
        self.config = _frozen(config)
        std = config.init_std

        def init(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in) if std is None else std, size=shape)

        self.stem_weights, self.stem_biases = [], []
        for spec in config.stem:
            fan_in = spec.in_channels * spec.kernel_size ** 2
            self.stem_weights.append(parameter(init((spec.out_channels, spec.in_channels, spec.kernel_size,
                                                     spec.kernel_size), fan_in)))
            self.stem_biases.append(parameter(np.zeros(spec.out_channels)))
        cap = config.capsule_conv
        # the primary capsule convolutions C_1..C_8 stacked along the output-channel axis,
        # block i occupying channels [i*out, (i+1)*out)
        fan_in = cap.in_channels * cap.kernel_size ** 2
        self.primary_weight = parameter(init((config.num_primary_convs * cap.out_channels, cap.in_channels,
                                              cap.kernel_size, cap.kernel_size), fan_in))
        self.primary_bias = parameter(np.zeros(config.num_primary_convs * cap.out_channels))
        self.routing_weight = parameter(init((config.num_primary_capsules, config.num_classes,
                                              config.num_primary_convs, config.capsule_dim),
                                             config.num_primary_convs))

    def conv_stem(self, images) -> Tensor:
        h = images if isinstance(images, Tensor) else Tensor(images)
        specs = self.config.stem
        for i, spec in enumerate(specs):
            h = ops.conv2d(h, self.stem_weights[i], self.stem_biases[i], stride=spec.stride, padding=spec.padding)
            if i < len(specs) - 1:
                h = ops.relu(h)
        return h

    def primary_capsules(self, features: Tensor) -> Tensor:
        """(N, Np, 8) squashed primary capsule vectors."""
        cap = self.config.capsule_conv
        out = ops.conv2d(features, self.primary_weight, self.primary_bias, stride=cap.stride, padding=cap.padding)
        n, _, h, w = out.shape
        d = self.config.num_primary_convs
        out = ops.reshape(out, (n, d, cap.out_channels * h * w))
        return squash(ops.transpose(out, (0, 2, 1)))

    def predictions(self, primaries: Tensor) -> Tensor:
        return ops.einsum("npd,pjdk->npjk", primaries, self.routing_weight)

    def __call__(self, images, state: Optional[RoutingState] = None) -> Tensor:
        primaries = self.primary_capsules(self.conv_stem(images))
        return dynamic_routing(self.predictions(primaries), self.config.routing_iterations,
                               unrolled=self.config.unrolled_routing, state=state)


def _frozen(config: CapsNetConfig) -> CapsNetConfig:
    return CapsNetConfig(**{k: getattr(config, k) for k in config.__dataclass_fields__})


LENGTH_EPS = 1e-30  # only keeps an exactly-zero capsule differentiable


def capsule_lengths(caps: Tensor) -> Tensor:
    return ops.l2_norm(caps, axis=-1, eps=LENGTH_EPS)


def margin_loss(caps: Tensor, labels, m_plus: float = 0.9, m_minus: float = 0.1,
                down_weight: float = 0.5) -> Tensor:
    """Per-example margin loss summed over classes; returns shape (N,)."""
    labels = np.asarray(labels)
    n_classes = caps.shape[-2]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    onehot = np.eye(n_classes, dtype=caps.dtype)[labels]
    lengths = capsule_lengths(caps)
    present = ops.square(ops.relu(m_plus - lengths))
    absent = ops.square(ops.relu(lengths - m_minus))
    return ops.sum(Tensor(onehot) * present + Tensor(down_weight * (1.0 - onehot)) * absent, axis=-1)
