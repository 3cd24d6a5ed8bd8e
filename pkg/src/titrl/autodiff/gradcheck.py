"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from titrl.autodiff.tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    tol: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self) -> str:
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        status = "pass" if self.passed else "FAIL"
        return f"{status}: max rel error {self.max_error:.3e} (worst {worst}) over {len(self.errors)} tensors, tol {self.tol:g}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute discrepancy, relative to the larger gradient's max magnitude.

    Scaling by the tensor-wide magnitude keeps entries whose true gradient is
    near zero from dominating through cancellation noise.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return float(diff / scale)


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, h: float) -> np.ndarray:
    grad = np.zeros(param.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = float(f().data.astype(np.float64).sum())
            flat[i] = original - h
            minus = float(f().data.astype(np.float64).sum())
            flat[i] = original
            out[i] = (plus - minus) / (2.0 * h)
    return grad


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    h: float = 1e-3,
    tol: float = 1e-2,
) -> GradCheckReport:
    """Compare backprop gradients of ``sum(f())`` with central differences.

    ``f`` must be deterministic (dropout off) and read ``params`` afresh on
    every call, since they are perturbed in place.
    """
    named = dict(params) if isinstance(params, dict) else {f"param{i}": p for i, p in enumerate(params)}
    for p in named.values():
        p.grad = None
    out = f()
    loss = out if out.size == 1 else out.sum()
    backward(loss)
    report = GradCheckReport(tol=tol)
    for name, p in named.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        report.errors[name] = relative_error(analytic, numeric_gradient(f, p, h))
    return report
