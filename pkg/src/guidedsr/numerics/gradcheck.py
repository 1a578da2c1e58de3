"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    errors: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor).

    ``floor`` keeps gradients that are zero analytically (a conv bias feeding
    batch norm) from turning finite-difference noise into a relative error of 1.
    """
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Union[Tensor, Sequence[Tensor]],
    tolerance: float = 1e-3,
    h: float = 1e-3,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic and central-difference gradients of ``fn``.

    The output is reduced to a scalar by a fixed random projection so every
    output element contributes. Inputs are promoted to float64; ``fn`` must
    not capture float32 state it expects to differentiate through (cast
    parameters to float64 and pass them as inputs instead).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]

    out = fn(*inputs)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    out.backward(proj.astype(out.dtype))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    def objective() -> float:
        return float(np.sum(fn(*[Tensor(t.data) for t in inputs]).data.astype(np.float64) * proj))

    errors = []
    for t, a in zip(inputs, analytic):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = objective()
            flat[i] = orig - h
            minus = objective()
            flat[i] = orig
            nflat[i] = (plus - minus) / (2 * h)
        errors.append(relative_error(a, numeric))
    return GradCheckReport(max(errors), tolerance, errors)
