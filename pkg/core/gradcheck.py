# polarseg/core/gradcheck.py
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from config import logger
from core import functional as F
from core.tensor import Tensor, no_grad


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Union[np.ndarray, Tensor]],
               eps: float = 1e-5, seed: int = 0, max_elements: Optional[int] = None) -> float:
    """
    Compare reverse-mode gradients of fn(*inputs) against central differences.

    Arrays in `inputs` are wrapped as float64 leaves; Tensors are used as given
    (so model parameters can be checked in place). Non-scalar outputs are reduced
    by a fixed random projection. max_elements samples that many entries per input.

    Returns the max of |a - b| / max(1e-8, |a| + |b|) over all checked entries.
    """
    rng = np.random.default_rng(seed)
    leaves: List[Tensor] = []
    for item in inputs:
        if isinstance(item, Tensor):
            if not item.data.flags.c_contiguous:
                item.data = np.ascontiguousarray(item.data)
            item.requires_grad = True
            item.zero_grad()
            leaves.append(item)
        else:
            leaves.append(Tensor(np.array(item, dtype=np.float64), requires_grad=True))

    out = fn(*leaves)
    projection = None if out.size == 1 else rng.standard_normal(out.shape).astype(out.dtype)

    def reduce(tensor: Tensor) -> float:
        if projection is None:
            return float(tensor.data.reshape(()))
        return float(np.sum(tensor.data * projection))

    scalar = out if projection is None else F.sum(F.mul(out, Tensor(projection)))
    scalar.backward()
    analytic = [leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    worst = 0.0
    with no_grad():
        for position, (leaf, grad) in enumerate(zip(leaves, analytic)):
            indices = np.arange(leaf.size)
            if max_elements is not None and leaf.size > max_elements:
                indices = np.sort(rng.choice(leaf.size, size=max_elements, replace=False))
            flat = leaf.data.reshape(-1)
            for index in indices:
                original = flat[index]
                flat[index] = original + eps
                f_plus = reduce(fn(*leaves))
                flat[index] = original - eps
                f_minus = reduce(fn(*leaves))
                flat[index] = original
                numeric = (f_plus - f_minus) / (2.0 * eps)
                exact = float(grad.reshape(-1)[index])
                error = abs(numeric - exact) / max(1e-8, abs(numeric) + abs(exact))
                if error > worst:
                    worst = error
                    logger.debug(f"grad_check: input {position} index {index} numeric={numeric:.6e} analytic={exact:.6e}")
    return worst
