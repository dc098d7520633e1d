"""
Finite-Difference Gradient Verification

Compares tape gradients with central differences, coordinate by coordinate.
Run inside ``precision(np.float64)`` for tight tolerances.
"""

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from vti.core.errors import ContractViolation
from vti.engine.tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    """max_rel_err = max |analytic - numeric| / max(1, |analytic|) over all checked coordinates"""
    max_rel_err: float
    tol: float
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ContractViolation(f"grad_check needs a scalar-valued program, got shape {value.shape}")
    return float(value.data.reshape(-1)[0])


def grad_check_many(f: Callable[[], Tensor], tensors: Sequence[Tensor],
                    eps: float = 1e-6, tol: float = 1e-6) -> GradCheckReport:
    """
    Check d f / d t for every tensor in tensors

    f is re-evaluated after each in-place perturbation of t.data, so it must read
    the tensors it closes over rather than copies of them.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    flags = [t.requires_grad for t in tensors]
    try:
        for t in tensors:
            t.data = np.ascontiguousarray(t.data)
            t.requires_grad = True
            t.zero_grad()
        with Tape() as tape:
            loss = f()
        _scalar(loss)
        backward(loss, tape)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    finally:
        for t, flag in zip(tensors, flags):
            t.requires_grad = flag

    worst, worst_at = 0.0, ""
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = _scalar(f())
            flat[i] = orig - eps
            down = _scalar(f())
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            if err > worst:
                worst, worst_at = err, f"{t.name or 'tensor'}[{i}]"
    return GradCheckReport(max_rel_err=float(worst), tol=tol, worst=worst_at)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               eps: float = 1e-6, tol: float = 1e-6) -> GradCheckReport:
    """
    Check the gradient of scalar program f at x

    Args:
        f: tensor program, called as f(x)
        x: point of evaluation (perturbed in place, restored afterwards)
        eps: central-difference step
        tol: pass threshold on max_rel_err
    """
    return grad_check_many(lambda: f(x), [x], eps=eps, tol=tol)
