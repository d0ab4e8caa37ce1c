"""Named-graph wrapper around the tape, and the finite-difference checker."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from .tensor import ShapeError, Tensor, backward as _backward, topological_order


@dataclass
class GraphNode:
    op: str
    inputs: tuple  # indices into ComputeGraph.nodes
    output: Tensor


class ComputeGraph:
    """A differentiable function of named inputs and named trainable parameters.

    ``fn(params, inputs)`` must return a dict of output tensors.  ``inputs``
    declares the expected leaf shapes (``None`` accepts any shape).  After
    :meth:`forward`, :attr:`nodes` lists the recorded ops in topological
    order.
    """

    def __init__(self, fn: Callable[[Dict[str, Tensor], Dict[str, Tensor]], Dict[str, Tensor]],
                 params: Mapping[str, Tensor], inputs: Optional[Mapping[str, Optional[tuple]]] = None):
        self.fn = fn
        self.params = dict(params)
        for name, p in self.params.items():
            p.requires_grad = True
            p.name = p.name or name
        self.input_spec = dict(inputs or {})
        self.nodes: list = []
        self._inputs: Optional[Dict[str, Tensor]] = None
        self._outputs: Optional[Dict[str, Tensor]] = None

    def forward(self, inputs: Mapping[str, object]) -> Dict[str, Tensor]:
        if self.input_spec:
            missing = set(self.input_spec) - set(inputs)
            extra = set(inputs) - set(self.input_spec)
            if missing or extra:
                raise KeyError(f"forward: missing inputs {sorted(missing)}, unexpected {sorted(extra)}")
        tensors = {}
        for name, value in inputs.items():
            t = value if isinstance(value, Tensor) else Tensor(value)
            want = self.input_spec.get(name)
            if want is not None and tuple(t.shape) != tuple(want):
                raise ShapeError(f"forward: input {name!r} has shape {t.shape}, expected {tuple(want)}")
            tensors[name] = t
        outputs = self.fn(self.params, tensors)
        self._inputs, self._outputs = tensors, outputs
        self.nodes = self._record(outputs)
        return outputs

    @staticmethod
    def _record(outputs: Mapping[str, Tensor]) -> list:
        order, seen = [], set()
        for out in outputs.values():
            for t in topological_order(out):
                if id(t) not in seen:
                    seen.add(id(t))
                    order.append(t)
        index = {id(t): i for i, t in enumerate(order)}
        return [GraphNode(t.op, tuple(index[id(p)] for p in t._parents if id(p) in index), t) for t in order]

    def backward(self, seed=None, output: Optional[str] = None) -> Dict[str, np.ndarray]:
        """Backpropagate from one output; returns gradients for every parameter and grad-requiring input."""
        if self._outputs is None:
            raise RuntimeError("backward called before forward")
        name = output or next(iter(self._outputs))
        root = self._outputs[name]
        targets = {**self.params, **{k: v for k, v in self._inputs.items() if v.requires_grad}}
        for t in targets.values():
            t.grad = None
        if root.requires_grad:
            _backward(root, seed)
        elif seed is not None and np.shape(seed) != root.shape:
            raise ShapeError(f"backward: seed shape {np.shape(seed)} does not match {root.shape}")
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in targets.items()}

    def scalar(self, output: Optional[str] = None) -> float:
        if self._outputs is None:
            raise RuntimeError("no forward pass has been run")
        return float(self._outputs[output or next(iter(self._outputs))].data)


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst_index: Optional[tuple] = None


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_diff_check(graph: ComputeGraph, param: str, tolerance: float = 1e-4, h: float = 1e-5,
                      output: Optional[str] = None, max_entries: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> GradCheckResult:
    """Compare the backward gradient of ``param`` against central differences.

    Uses the inputs of the most recent :meth:`ComputeGraph.forward`.  When
    ``max_entries`` is set, a random subset of entries is probed.  Never
    raises on mismatch; inspect ``passed``.
    """
    if graph._inputs is None:
        raise RuntimeError("finite_diff_check needs a prior forward pass")
    inputs = graph._inputs
    target = graph.params[param] if param in graph.params else inputs[param]
    if target.size == 0:
        return GradCheckResult(True, 0.0)
    graph.forward(inputs)
    analytic = graph.backward(output=output)[param]

    target.data = np.ascontiguousarray(target.data)
    flat = target.data.reshape(-1)
    indices = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        indices = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
    worst, worst_idx = 0.0, None
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = graph.forward(inputs)
        f_plus = float(f_plus[output or next(iter(f_plus))].data)
        flat[i] = orig - h
        f_minus = graph.forward(inputs)
        f_minus = float(f_minus[output or next(iter(f_minus))].data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2 * h)
        err = float(relative_error(np.asarray(analytic.reshape(-1)[i]), np.asarray(numeric)))
        if err > worst:
            worst, worst_idx = err, np.unravel_index(i, target.shape)
    graph.forward(inputs)
    return GradCheckResult(worst < tolerance, worst, worst_idx)
