"""Tape-based reverse-mode differentiation.

A Tape records every operation as a TapeNode holding the op kind, the ids
of its inputs, the forward value and whatever the backward rule needs.
Nodes are appended in execution order, so the tape is topologically sorted
by construction and backward() is a single reverse sweep with additive
gradient accumulation at fan-out points.

Op kinds live in a registry populated by reidlab.ops; backward() refuses
kinds it does not know.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, OracleError, UnsupportedOpError

__all__ = ["Tape", "TapeNode", "Var", "GradientMap", "backward", "finite_diff_check"]

# op kind -> forward(*arrays, **static) -> (out_array, ctx)
FORWARD: dict[str, Callable] = {}
# op kind -> vjp(grad_out, node, input_arrays) -> list of grads (None = no flow)
VJP: dict[str, Callable] = {}

_SOURCE_OPS = ("leaf", "const")


def register(kind: str, forward: Callable, vjp: Callable | None) -> None:
    FORWARD[kind] = forward
    if vjp is not None:
        VJP[kind] = vjp


@dataclass
class TapeNode:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    ctx: dict = field(default_factory=dict)


class Var:
    """Lightweight handle to a tape node."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return self.tape.apply("add", self, other)

    def __sub__(self, other):
        return self.tape.apply("sub", self, other)

    def __mul__(self, other):
        return self.tape.apply("mul", self, other)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, other)

    def __repr__(self):
        return f"Var(#{self.idx}, {self.tape.nodes[self.idx].op}, shape={self.shape})"


class Tape:
    def __init__(self):
        self.nodes: list[TapeNode] = []

    def _push(self, node: TapeNode) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, array) -> Var:
        """Differentiable input (parameter or data)."""
        arr = np.asarray(array, dtype=np.float64)
        return self._push(TapeNode("leaf", (), arr))

    def const(self, array) -> Var:
        """Non-learnable input; gradients are not reported for it."""
        arr = np.asarray(array, dtype=np.float64)
        return self._push(TapeNode("const", (), arr))

    def apply(self, kind: str, *inputs: Var, **static) -> Var:
        if kind not in FORWARD:
            raise UnsupportedOpError(kind)
        for v in inputs:
            if v.tape is not self:
                raise ContractError("mixing vars from different tapes")
        arrays = [v.value for v in inputs]
        out, ctx = FORWARD[kind](*arrays, **static)
        ctx.update(static)
        return self._push(TapeNode(kind, tuple(v.idx for v in inputs), np.asarray(out), ctx))

    def __len__(self):
        return len(self.nodes)


class GradientMap:
    """node id -> gradient array; ids absent from the map have zero gradient."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    @staticmethod
    def _key(node) -> int:
        return node.idx if isinstance(node, Var) else int(node)

    def __contains__(self, node) -> bool:
        return self._key(node) in self._grads

    def __getitem__(self, node) -> np.ndarray:
        return self._grads[self._key(node)]

    def get(self, node, default=None):
        return self._grads.get(self._key(node), default)

    def dense(self, node) -> np.ndarray:
        """Gradient of node, materializing zeros if it is off the loss path."""
        key = self._key(node)
        if key in self._grads:
            return self._grads[key]
        if isinstance(node, Var):
            return np.zeros_like(node.value)
        raise KeyError(key)

    def __len__(self):
        return len(self._grads)


def backward(tape: Tape, loss: Var | int) -> GradientMap:
    """Reverse accumulation of d(loss)/d(node) over the whole tape.

    The loss must be scalar. Running twice over the same tape gives
    identical results; the sweep is strictly serial and ordered.
    """
    loss_idx = loss.idx if isinstance(loss, Var) else int(loss)
    loss_node = tape.nodes[loss_idx]
    if loss_node.value.shape != ():
        raise ContractError(f"loss must be scalar, got shape {loss_node.value.shape}")

    grads: dict[int, np.ndarray] = {loss_idx: np.ones(())}
    for idx in range(loss_idx, -1, -1):
        if idx not in grads:
            continue
        node = tape.nodes[idx]
        if node.op in _SOURCE_OPS:
            continue
        if node.op not in VJP:
            raise UnsupportedOpError(node.op)
        g = grads[idx]
        arrays = [tape.nodes[i].value for i in node.inputs]
        input_grads = VJP[node.op](g, node, arrays)
        for in_idx, in_grad in zip(node.inputs, input_grads):
            if in_grad is None:
                continue
            if in_grad.shape != tape.nodes[in_idx].value.shape:
                raise ContractError(
                    f"vjp of {node.op} produced shape {in_grad.shape} for input "
                    f"of shape {tape.nodes[in_idx].value.shape}"
                )
            if in_idx in grads:
                grads[in_idx] = grads[in_idx] + in_grad
            else:
                grads[in_idx] = in_grad
    return GradientMap(grads)


def finite_diff_check(f, *xs, h: float = 1e-5, max_coords: int | None = None,
                      seed: int = 0) -> float:
    """Central-difference check of tape gradients for a scalar function.

    f(tape, v1, ..., vk) -> scalar Var, evaluated fresh per probe; xs are
    the input arrays. Returns the max relative error over all checked
    coordinates with denominator max(|analytic|, |numeric|, 1e-8). With
    max_coords set, a seeded random subset of coordinates per input is
    probed instead of all of them.
    """
    xs = [np.asarray(x, dtype=np.float64) for x in xs]

    tape = Tape()
    vars_ = [tape.leaf(x) for x in xs]
    out = f(tape, *vars_)
    if out.value.shape != ():
        raise ContractError("finite_diff_check needs a scalar-valued function")
    grads = backward(tape, out)
    analytic = [grads.dense(v) for v in vars_]

    def evaluate(arrays) -> float:
        t = Tape()
        val = f(t, *[t.leaf(a) for a in arrays]).value
        if not np.isfinite(val):
            raise OracleError("non-finite value during finite differencing")
        return float(val)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, x in enumerate(xs):
        flat_ana = analytic[i].reshape(-1)
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = rng.choice(x.size, size=max_coords, replace=False)
        for j in coords:
            probe = [a.copy() for a in xs]
            probe[i].reshape(-1)[j] += h
            up = evaluate(probe)
            probe[i].reshape(-1)[j] -= 2 * h
            down = evaluate(probe)
            numeric = (up - down) / (2 * h)
            err = abs(numeric - flat_ana[j]) / max(abs(numeric), abs(flat_ana[j]), 1e-8)
            worst = max(worst, err)
    return worst
