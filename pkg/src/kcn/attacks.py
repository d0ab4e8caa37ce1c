"""Fast gradient sign attacks, white box and black box, and accuracy-vs-epsilon sweeps.

Perturbations live in normalized input space and are never clipped to the
valid pixel range.  Because the FGSM direction depends only on ``(x, y)``,
a sweep computes one gradient sign per example and reuses it for every
epsilon.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .diffcore import Tensor
from .models import accuracy, model_dtype

WHITE = "white"
BLACK = "black"
MODES = (WHITE, BLACK)
SWEEP_COLUMNS = ("epsilon", "mode", "model", "accuracy", "n_examples")


class AttackError(ValueError):
    pass


def fgsm(grad_x, x, epsilon: float) -> np.ndarray:
    """``x + epsilon * sign(grad_x)`` with ``sign(0) = 0``.

    The result satisfies ``|x_adv - x| <= epsilon`` exactly in floating
    point: entries where rounding overshoots are pulled back by one ulp.
    """
    if not epsilon >= 0:
        raise AttackError(f"epsilon must be non-negative, got {epsilon}")
    x = np.asarray(x)
    grad_x = np.asarray(grad_x)
    if grad_x.shape != x.shape:
        raise AttackError(f"gradient shape {grad_x.shape} != input shape {x.shape}")
    x_adv = x + x.dtype.type(epsilon) * np.sign(grad_x).astype(x.dtype)
    over = np.abs(x_adv - x) > epsilon
    while np.any(over):
        x_adv[over] = np.nextafter(x_adv[over], x[over])
        over = np.abs(x_adv - x) > epsilon
    return x_adv


def input_gradient(model, x, y, loss_variant: Optional[str] = None, seed: int = 0,
                   batch_size: int = 250) -> np.ndarray:
    """Gradient of ``model.attack_loss`` with respect to the input batch.

    Parameter ``.grad`` buffers are cleared afterwards; parameter values are
    never touched.
    """
    x = np.asarray(x, dtype=model_dtype(model))
    y = np.asarray(y)
    grads = np.empty_like(x)
    for start in range(0, len(x), batch_size):
        xb = Tensor(x[start:start + batch_size], requires_grad=True, dtype=x.dtype)
        rng = np.random.default_rng([seed, start])
        kwargs = {} if loss_variant is None else {"variant": loss_variant}
        model.attack_loss(xb, y[start:start + batch_size], rng, **kwargs).backward()
        grads[start:start + batch_size] = xb.grad
        model.zero_grad()
    return grads


def white_box_attack(model, x, y, epsilon: float, loss_variant: Optional[str] = None, seed: int = 0) -> np.ndarray:
    return fgsm(input_gradient(model, x, y, loss_variant, seed), np.asarray(x, dtype=model_dtype(model)), epsilon)


def black_box_attack(surrogate, x, y, epsilon: float) -> np.ndarray:
    """Perturb with the surrogate's cross-entropy gradient; the result does not depend on the target."""
    return fgsm(input_gradient(surrogate, x, y), np.asarray(x, dtype=model_dtype(surrogate)), epsilon)


@dataclass
class SweepRow:
    epsilon: float
    mode: str
    model: str
    accuracy: float
    n_examples: int


@dataclass
class AttackBatch:
    """Everything needed to regenerate the perturbed sets of one attack mode."""

    mode: str
    x: np.ndarray          # clean, normalized inputs
    labels: np.ndarray
    direction: np.ndarray  # sign of the attack gradient, values in {-1, 0, 1}
    epsilons: Sequence[float]

    def perturbed(self, epsilon: float) -> np.ndarray:
        return fgsm(self.direction, self.x, epsilon)


def check_grid(grid: Sequence[float]) -> List[float]:
    grid = [float(e) for e in grid]
    if not grid or grid[0] != 0.0:
        raise AttackError(f"epsilon grid must start at 0, got {grid}")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise AttackError(f"epsilon grid must be strictly increasing, got {grid}")
    return grid


def attack_directions(model, x, y, mode: str, grid: Sequence[float], surrogate=None,
                      loss_variant: Optional[str] = None, seed: int = 0) -> AttackBatch:
    grid = check_grid(grid)
    if mode == WHITE:
        source, variant = model, loss_variant
    elif mode == BLACK:
        if surrogate is None:
            raise AttackError("black-box mode needs a trained surrogate")
        source, variant = surrogate, None
    else:
        raise AttackError(f"unknown attack mode {mode!r}")
    x = np.asarray(x, dtype=model_dtype(model))
    direction = np.sign(input_gradient(source, x, y, variant, seed)).astype(x.dtype)
    return AttackBatch(mode, x, np.asarray(y), direction, grid)


def epsilon_sweep(model, x, y, grid: Sequence[float], mode: str = WHITE, surrogate=None,
                  loss_variant: Optional[str] = None, seed: int = 0, name: Optional[str] = None,
                  batch: Optional[AttackBatch] = None) -> List[SweepRow]:
    """Accuracy of ``model`` on the whole set perturbed at each epsilon, in grid order."""
    if batch is None:
        batch = attack_directions(model, x, y, mode, grid, surrogate, loss_variant, seed)
    name = name or model.kind
    rows = []
    for eps in check_grid(grid):
        acc = accuracy(model, batch.perturbed(eps), batch.labels, seed=seed)
        rows.append(SweepRow(eps, batch.mode, name, acc, len(batch.labels)))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path, config_hash: str, seed: int) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS + ("config_hash", "seed"))
        for r in rows:
            writer.writerow([repr(r.epsilon), r.mode, r.model, repr(r.accuracy), r.n_examples, config_hash, seed])


def read_sweep_csv(path) -> List[SweepRow]:
    with open(Path(path), newline="") as fh:
        return [SweepRow(float(r["epsilon"]), r["mode"], r["model"], float(r["accuracy"]), int(r["n_examples"]))
                for r in csv.DictReader(fh)]
