"""Tensor values, the operation tape and reverse-mode accumulation.

Every differentiable operator records one :class:`Node` on the active
:class:`Tape`.  Gradient rules live in a registry keyed by operator name so
a rule can be swapped out (fault injection in the verification harness).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

_MODES = {"verify": np.float64, "fast": np.float32}
_mode = "fast"


def set_mode(mode: str) -> None:
    """Select the global numeric mode: ``"verify"`` (f64) or ``"fast"`` (f32)."""
    global _mode
    if mode not in _MODES:
        raise ValueError(f"unknown numeric mode {mode!r}; expected one of {sorted(_MODES)}")
    _mode = mode


def get_mode() -> str:
    return _mode


def get_dtype() -> type:
    return _MODES[_mode]


@contextlib.contextmanager
def numeric_mode(mode: str) -> Iterator[None]:
    previous = _mode
    set_mode(mode)
    try:
        yield
    finally:
        set_mode(previous)


class Tensor:
    """A dense array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(get_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    # Operator sugar; the functional forms live in ``rehit.nn.ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


class Parameter(Tensor):
    """A trainable leaf tensor with a unique dotted name."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.asarray(data, dtype=get_dtype()), requires_grad=True, name=name)


class Node:
    __slots__ = ("op", "inputs", "out", "ctx")

    def __init__(self, op: str, inputs: Sequence[Tensor], out: Tensor, ctx):
        self.op = op
        self.inputs = tuple(inputs)
        self.out = out
        self.ctx = ctx


GradRule = Callable[[object, np.ndarray], Sequence[np.ndarray | None]]
_RULES: dict[str, GradRule] = {}


def register_rule(op: str) -> Callable[[GradRule], GradRule]:
    def deco(fn: GradRule) -> GradRule:
        _RULES[op] = fn
        return fn
    return deco


def grad_rule(op: str) -> GradRule:
    return _RULES[op]


@contextlib.contextmanager
def override_rule(op: str, fn: GradRule) -> Iterator[None]:
    """Temporarily replace the gradient rule of ``op``."""
    if op not in _RULES:
        raise KeyError(f"no gradient rule registered for {op!r}")
    original = _RULES[op]
    _RULES[op] = fn
    try:
        yield
    finally:
        _RULES[op] = original


class Tape:
    """Records operator applications in execution order.

    Use as a context manager; only operators executed while a tape is active
    and touching a tensor that requires grad are recorded.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, ctx) -> None:
        node = Node(op, inputs, out, ctx)
        out._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
        if grad is None:
            if loss.size != 1:
                raise ValueError("backward without an explicit grad needs a scalar loss")
            grad = np.ones_like(loss.data)
        pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
        if loss._node is None and loss.requires_grad:
            _accumulate_leaf(loss, pending.pop(id(loss)))
            return
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            grads = _RULES[node.op](node.ctx, g)
            if len(grads) != len(node.inputs):
                raise RuntimeError(f"gradient rule for {node.op!r} returned {len(grads)} grads "
                                   f"for {len(node.inputs)} inputs")
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise RuntimeError(f"gradient rule for {node.op!r} produced shape {gi.shape}, "
                                       f"expected {inp.shape}")
                if inp._node is None:
                    _accumulate_leaf(inp, gi)
                else:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording (e.g. for inference inside a training step)."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


@dataclass
class BranchLog:
    """Piecewise decisions recorded during one evaluation, replayed in call order afterwards."""

    entries: list = field(default_factory=list)
    replaying: bool = False
    cursor: int = 0

    def rewind(self) -> None:
        self.replaying, self.cursor = True, 0


_BRANCHES: list[BranchLog] = []


@contextlib.contextmanager
def frozen_branches() -> Iterator[BranchLog]:
    """Record every piecewise decision (masks, signs, sort orders); replay after ``rewind``.

    Finite-difference checks use this so each probe differentiates the same
    smooth piece as the analytic gradient, which treats those decisions as
    constants.
    """
    log = BranchLog()
    _BRANCHES.append(log)
    try:
        yield log
    finally:
        _BRANCHES.pop()


def branch_decision(compute: Callable[[], T]) -> T:
    """Evaluate ``compute`` or, while replaying a frozen log, return the recorded decision."""
    value = compute()
    if not _BRANCHES:
        return value
    log = _BRANCHES[-1]
    if not log.replaying:
        log.entries.append(value)
        return value
    if log.cursor >= len(log.entries) or getattr(log.entries[log.cursor], "shape", None) != getattr(value, "shape", None):
        raise RuntimeError("frozen branch replay diverged from the recorded evaluation")
    log.cursor += 1
    return log.entries[log.cursor - 1]


class FlopCounter:
    """Counts multiply-add work of convolutions and attention while active."""

    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def __enter__(self) -> "FlopCounter":
        _COUNTERS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _COUNTERS.remove(self)

    def add(self, op: str, flops: int) -> None:
        self.total += int(flops)
        self.by_op[op] = self.by_op.get(op, 0) + int(flops)


_COUNTERS: list[FlopCounter] = []


def count_flops(op: str, flops: int) -> None:
    for c in _COUNTERS:
        c.add(op, flops)
