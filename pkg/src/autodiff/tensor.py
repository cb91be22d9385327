"""Tensor and tape for reverse-mode differentiation.

Forward ops record themselves on the innermost active ``Tape`` when at least
one input requires a gradient; ``backward`` replays the tape in reverse.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import DoubleBackward, ShapeMismatch

logger = logging.getLogger(__name__)

_ACTIVE_TAPES: List["Tape"] = []


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        from src.autodiff import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from src.autodiff import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPES.remove(self)

    def record(self, op: str, output: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        self.nodes.append(TapeNode(op, output, tuple(inputs), backward_fn))

    def reset(self) -> None:
        """Allow another backward pass over the same recording."""
        for node in self.nodes:
            node.output.grad = None
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        """
        Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring a gradient.

        Args:
            loss (Tensor): Scalar output recorded on this tape

        Raises:
            DoubleBackward: The tape was already replayed without reset
            ShapeMismatch: The loss is not a scalar
        """
        if self.consumed:
            raise DoubleBackward("backward already called on this tape; call reset() first")
        if loss.size != 1:
            raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")

        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            upstream = node.output.grad
            if upstream is None:
                continue
            input_grads = node.backward_fn(upstream)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise ShapeMismatch(f"{node.op}: gradient shape {grad.shape} != input shape {tensor.shape}")
                tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            if node.output is not loss and not node.output.is_leaf:
                # Intermediate gradients are released once propagated
                node.output.grad = None

        self.consumed = True


def current_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)
