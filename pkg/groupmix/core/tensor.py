"""
Tensor and tape primitives for reverse-mode differentiation.

A :class:`Tape` records every differentiable operation executed while it is
active. Operations are appended in execution order, which is a topological
order of the graph by construction, so backward is a single reverse sweep.
Without an active tape nothing is recorded and results carry no gradient.
"""
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from .errors import ContractError, DimensionError
from .registry import registry

logger = logging.getLogger(__name__)

_active_tape: ContextVar[Optional["Tape"]] = ContextVar("gmx_active_tape", default=None)

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]


class Tensor:
    """
    n-dimensional float64 array with an optional gradient slot.

    Tensors are treated as immutable once created. The only sanctioned
    mutations are gradient accumulation during backward, optimizer updates of
    parameters, and the element perturbation done by the gradient checker.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Wrap an array produced by an op without copying it."""
        tensor = cls.__new__(cls)
        tensor.data = array if array.dtype == np.float64 else array.astype(np.float64)
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Return a copy of the data."""
        return self.data.copy()

    def zero_grad(self):
        """Drop the accumulated gradient."""
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other: Union["Tensor", float, int]) -> "Tensor":
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from . import ops
        return ops.matmul(self, other)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays (saving whatever backward
    needs on ``self``) and ``backward``, which maps the gradient of the output
    onto one gradient per input (``None`` for inputs without a gradient).
    """

    name = "function"

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"Forward pass not implemented for {self.name}")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"Backward pass not implemented for {self.name}")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        """
        Run the forward pass and record it on the active tape.

        Args:
            *inputs: Input tensors
            **kwargs: Non-differentiable arguments forwarded to ``forward``

        Returns:
            Output tensor
        """
        function = cls()
        out = function.forward(*(t.data for t in inputs), **kwargs)
        tape = _active_tape.get()
        tracked = tape is not None and any(t.requires_grad for t in inputs)
        result = Tensor.wrap(out, requires_grad=tracked)
        if tracked:
            tape.record(TapeNode(function=function, inputs=tuple(inputs), output=result))
        return result


@dataclass
class TapeNode:
    """One recorded operation: operands, output and the backward rule."""
    function: Function
    inputs: Tuple[Tensor, ...]
    output: Tensor


class Tape:
    """
    Ordered record of operations enabling reverse-mode differentiation.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded. Tapes are independent of each other and the active tape is
    held in a context variable, so separate threads may run separate tapes.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._tokens: List[Any] = []

    def record(self, node: TapeNode):
        self.nodes.append(node)

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._tokens.pop())
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor):
        """
        Populate ``grad`` on every leaf tensor that requires a gradient.

        Gradients accumulate across calls until zeroed.

        Args:
            loss: Scalar tensor produced on this tape

        Raises:
            ContractError: If the loss is not scalar or not reachable
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(node.output) for node in self.nodes}
        if id(loss) not in produced and not loss.requires_grad:
            raise ContractError("loss is not reachable from this tape")

        adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: Dict[int, Tensor] = {id(loss): loss}

        for node in reversed(self.nodes):
            grad = adjoints.pop(id(node.output), None)
            holders.pop(id(node.output), None)
            if grad is None:
                continue
            input_grads = node.function.backward(grad)
            if registry.is_faulted(node.function.name):
                input_grads = tuple(None if g is None else -g for g in input_grads)
            for tensor, g in zip(node.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                if g.shape != tensor.data.shape:
                    raise DimensionError(
                        f"{node.function.name} backward produced shape {g.shape} "
                        f"for an input of shape {tensor.shape}"
                    )
                key = id(tensor)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + g
                else:
                    adjoints[key] = g
                    holders[key] = tensor

        for key, grad in adjoints.items():
            tensor = holders[key]
            if not tensor.requires_grad:
                continue
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def backward(tape: Tape, loss: Tensor):
    """Reverse-mode sweep over ``tape`` starting from ``loss``."""
    tape.backward(loss)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them on any tape."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def active_tape() -> Optional[Tape]:
    """Return the tape currently recording, if any."""
    return _active_tape.get()
