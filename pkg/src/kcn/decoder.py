"""Reconstruction decoder driven by class-masked capsules."""
from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from .diffcore import Linear, Module, Tensor, ops


def mask_capsules(caps, classes) -> Tensor:
    """Keep capsule ``classes[n]`` of each example, zero the rest, flatten to (N, Nc*k).

    ``caps`` may be a single (Nc, k) capsule set with a scalar class.
    """
    caps = caps if isinstance(caps, Tensor) else Tensor(caps)
    single = caps.ndim == 2
    if single:
        caps = ops.reshape(caps, (1,) + caps.shape)
    classes = np.atleast_1d(np.asarray(classes))
    n, n_classes, k = caps.shape
    if classes.shape != (n,):
        raise ValueError(f"expected {n} class ids, got shape {classes.shape}")
    if classes.min() < 0 or classes.max() >= n_classes:
        raise ValueError(f"class ids must lie in [0, {n_classes}), got {classes.tolist()}")
    mask = np.eye(n_classes, dtype=caps.dtype)[classes][:, :, None]
    flat = ops.reshape(caps * Tensor(mask), (n, n_classes * k))
    return ops.reshape(flat, (n_classes * k,)) if single else flat


class Decoder(Module):
    """Linear(k*Nc, 512) - ReLU - Linear(512, 1024) - ReLU - Linear(1024, C*H*W)."""

    def __init__(self, in_features: int, image_shape: Tuple[int, int, int], rng: np.random.Generator,
                 hidden: Sequence[int] = (512, 1024)):
        self.image_shape = tuple(image_shape)
        sizes = [in_features, *hidden, int(np.prod(image_shape))]
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    @property
    def in_features(self) -> int:
        return self.layers[0].weight.shape[0]

    def __call__(self, masked) -> Tensor:
        h = masked if isinstance(masked, Tensor) else Tensor(masked)
        single = h.ndim == 1
        if single:
            h = ops.reshape(h, (1, h.shape[0]))
        if h.shape[-1] != self.in_features:
            raise ValueError(f"decoder expects {self.in_features} features, got {h.shape[-1]}")
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ops.relu(h)
        out = ops.reshape(h, (h.shape[0],) + self.image_shape)
        return ops.reshape(out, self.image_shape) if single else out


def recon_error(x, x_hat) -> Tensor:
    """Per-example mean squared pixel difference; shape (N,) for batches, scalar for single images."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"recon_error: shapes differ, {x.shape} vs {x_hat.shape}")
    sq = ops.square(x - x_hat)
    if x.ndim <= 3:
        return ops.mean(sq)
    return ops.mean(ops.reshape(sq, (sq.shape[0], -1)), axis=1)
