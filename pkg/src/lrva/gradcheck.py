"""Central-difference gradient checking against the tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .tensor import Tensor, backward


class NondeterministicFunctionError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_elements: int
    worst_index: tuple
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} over {self.n_elements} elems"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor).  The floor keeps near-zero gradients
    from turning rounding noise into huge relative errors."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def grad_check(
    f: Callable[[], Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-5,
    tol: float = 1e-4,
    name: str = "f",
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` w.r.t. ``x`` with central
    differences.  ``f`` closes over ``x`` and is re-evaluated with ``x.data``
    perturbed in place.  Several tensors may be passed; the report covers all.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    first = f()
    again = f()
    if first.item() != again.item():
        raise NondeterministicFunctionError(
            f"{name}: two evaluations disagree ({first.item()!r} vs {again.item()!r})"
        )
    for t in xs:
        t.grad = None
    backward(first)
    worst, worst_idx, n = 0.0, (), 0
    for k, t in enumerate(xs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numerical_gradient(f, t, eps)
        err = relative_error(analytic, numeric)
        n += err.size
        if err.size and err.max() >= worst:
            worst = float(err.max())
            worst_idx = (k,) + np.unravel_index(int(err.argmax()), err.shape)
    return GradCheckReport(name=name, max_rel_error=worst, n_elements=n, worst_index=worst_idx, tol=tol)
