"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NumericInstabilityError, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: list[float] = field(default_factory=list)
    names: list[str] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def __str__(self) -> str:
        rows = [f"{n}: {e:.3e}" for n, e in zip(self.names, self.max_rel_error)]
        return f"gradcheck worst={self.worst:.3e} tol={self.tolerance:g}\n  " + "\n  ".join(rows)


def _loss_value(loss_fn: Callable[[], Tensor]) -> float:
    value = float(loss_fn().data)
    if not np.isfinite(value):
        raise NumericInstabilityError(f"loss is not finite: {value}")
    return value


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    names: Sequence[str] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backward() gradients with central differences.

    The relative error for one coordinate is |analytic - numeric| / max(1, |numeric|).
    ``max_coords`` limits the number of probed coordinates per parameter (sampled
    with ``rng``); by default every coordinate is probed.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("finite_diff_check needs float64 parameters")
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericInstabilityError(f"loss is not finite: {loss.data}")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport(tolerance=tolerance)
    for i, (p, grad) in enumerate(zip(params, analytic)):
        coords = list(np.ndindex(p.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[j] for j in sorted(picks)]
        worst = 0.0
        for idx in coords:
            orig = p.data[idx]
            p.data[idx] = orig + step
            up = _loss_value(loss_fn)
            p.data[idx] = orig - step
            down = _loss_value(loss_fn)
            p.data[idx] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(grad[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        report.max_rel_error.append(worst)
        report.names.append(names[i] if names else p.name or f"param{i}")
    return report
