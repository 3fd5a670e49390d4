# polarseg/core/tensor.py
"""
Reverse-mode differentiation on numpy arrays.

Every operation records its output node with a monotonically increasing sequence
number. backward() walks the reachable nodes in exact reverse of that recording
order, so a parent is always visited after all of its consumers.
"""
import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import InputValidationError, NumericalError

_sequence = itertools.count()
_state = threading.local()

# op name -> factor applied to the upstream gradient; test-only mutation hook
_BACKWARD_SCALE: Dict[str, float] = {}


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def is_anomaly_enabled() -> bool:
    return getattr(_state, "detect_anomaly", False)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording for the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def detect_anomaly() -> Iterator[None]:
    """Raise NumericalError as soon as any recorded op yields NaN/Inf."""
    previous = is_anomaly_enabled()
    _state.detect_anomaly = True
    try:
        yield
    finally:
        _state.detect_anomaly = previous


@contextmanager
def corrupt_backward(op: str, scale: float = 1.5) -> Iterator[None]:
    """Scale the gradient flowing back through every `op` node. Used by mutation tests only."""
    _BACKWARD_SCALE[op] = scale
    try:
        yield
    finally:
        _BACKWARD_SCALE.pop(op, None)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """N-dimensional array taking part in a reverse-mode graph."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        array = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad: bool = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.decay: bool = False
        self.op: str = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._seq: int = next(_sequence)

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls(data)
        if is_anomaly_enabled() and not np.all(np.isfinite(out.data)):
            raise NumericalError(f"Operation '{op}' produced non-finite values", details={"op": op})
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.op = op
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def has_nonfinite(self) -> bool:
        return not bool(np.all(np.isfinite(self.data)))

    def _graph(self) -> List["Tensor"]:
        seen = set()
        nodes: List[Tensor] = []
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq, reverse=True)
        return nodes

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise InputValidationError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise InputValidationError("backward() without an explicit gradient needs a scalar output",
                                           details={"shape": list(self.shape)})
            grad = np.ones_like(self.data)
        pending: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}

        for node in self._graph():
            upstream = pending.pop(id(node), None)
            if upstream is None:
                continue
            if node._backward is None:
                node.grad = upstream.copy() if node.grad is None else node.grad + upstream
                continue
            scale = _BACKWARD_SCALE.get(node.op)
            if scale is not None:
                upstream = upstream * scale
            for parent, parent_grad in zip(node._parents, node._backward(upstream)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    def __add__(self, other):
        from core import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from core import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"
