"""Multi-stage guided super-resolution with iterative back-projection.

A total magnification ``s`` is reached in ``r`` stages of factor ``s**(1/r)``.
Each stage interpolates the current estimate, brings the HR guide down to
the stage grid, and runs the network; back-projection then pulls the
estimate towards consistency with the observed LR image.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .degradation import DEFAULT_LAMBDA, DegradationSpec, blur, blur_adjoint, downsample, output_extent, \
    sigma_for_cascade_stage, upsample
from .errors import ConfigurationError, PlanningError
from .model import GrdNetwork
from .training import degrade_guide

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CascadePlan:
    total_scale: float
    num_stages: int
    input_extents: tuple[int, int]
    stage_shapes: tuple[tuple[int, int], ...]
    stage_sigma: tuple[float, ...]

    @property
    def stage_factor(self) -> float:
        return self.total_scale ** (1.0 / self.num_stages)

    def cumulative_scale(self, k: int) -> float:
        """Magnification from the LR grid to the grid of stage ``k`` (1-based)."""
        return self.total_scale if k == self.num_stages else self.total_scale ** (k / self.num_stages)

    def symbolic_sizes(self, symbol: str = "H") -> list[str]:
        """Stage sizes as ``s^(k/r)·H`` with reduced exponents, e.g. ``2^(1/3)H``."""
        out = []
        s = f"{self.total_scale:g}"
        for k in range(1, self.num_stages + 1):
            e = Fraction(k, self.num_stages)
            out.append(f"{s}{symbol}" if e == 1 else f"{s}^({e}){symbol}")
        return out


def plan_stages(s: float, r: int, input_extents: tuple[int, int], lam: float = DEFAULT_LAMBDA) -> CascadePlan:
    if not s > 1:
        raise PlanningError(f"total scale must exceed 1, got {s}")
    if r < 1:
        raise PlanningError(f"number of stages must be >= 1, got {r}")
    h, w = input_extents
    shapes = []
    for k in range(1, r + 1):
        f = s if k == r else s ** (k / r)
        shapes.append((output_extent(h, f), output_extent(w, f)))
    prev = (h, w)
    for shape in shapes:
        if shape[0] <= prev[0] or shape[1] <= prev[1]:
            raise PlanningError(f"stage extent {shape} is not larger than the previous {prev}")
        prev = shape
    sigma = sigma_for_cascade_stage(s ** (1.0 / r), lam)
    return CascadePlan(float(s), int(r), (h, w), tuple(shapes), tuple([sigma] * r))


@dataclass
class IbpConfig:
    max_iterations: int = 10
    residual_tolerance: float = 1e-4
    mode: str = "every_stage"  # or "end_only"
    divergence_patience: int = 3

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ConfigurationError("max_iterations must be >= 0")
        if self.mode not in ("every_stage", "end_only"):
            raise ConfigurationError(f"unknown IBP mode {self.mode!r}")


@dataclass
class IbpResult:
    image: np.ndarray
    residuals: list[float]
    best_iteration: int
    diverged: bool = False

    @property
    def trace(self) -> list[float]:
        """Running minimum of the residuals: the residual of the iterate that would be returned."""
        return list(np.minimum.accumulate(self.residuals))


def consistency_residual(x: np.ndarray, y: np.ndarray, spec: DegradationSpec) -> float:
    """||y - D B x|| / ||y|| (absolute norm when y is zero)."""
    r = y - downsample(blur(x, spec.kernel), spec.scale_factor, out_shape=y.shape)
    ny = np.linalg.norm(y)
    return float(np.linalg.norm(r) / ny) if ny > 0 else float(np.linalg.norm(r))


def ibp_refine(x0: np.ndarray, y: np.ndarray, spec: DegradationSpec, config: Optional[IbpConfig] = None) -> IbpResult:
    """Iterate ``x <- x + B^T D^T (y - D B x)`` and return the lowest-residual iterate."""
    config = config or IbpConfig()
    kernel = spec.kernel
    s = spec.scale_factor
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x0, dtype=np.float64).copy()
    ny = np.linalg.norm(y)

    def project(img):
        return y - downsample(blur(img, kernel), s, out_shape=y.shape)

    r = project(x)
    residuals = [float(np.linalg.norm(r) / ny) if ny > 0 else float(np.linalg.norm(r))]
    best_x, best_t = x.copy(), 0
    rising, diverged = 0, False
    for t in range(1, config.max_iterations + 1):
        if residuals[-1] < config.residual_tolerance:
            break
        x = x + blur_adjoint(upsample(r, s, out_shape=x.shape), kernel)
        r = project(x)
        res = float(np.linalg.norm(r) / ny) if ny > 0 else float(np.linalg.norm(r))
        rising = rising + 1 if res > residuals[-1] else 0
        residuals.append(res)
        if res < residuals[best_t]:
            best_x, best_t = x.copy(), t
        if rising >= config.divergence_patience:
            log.warning("IBP residual rose for %d consecutive iterations; returning iterate %d",
                        rising, best_t)
            diverged = True
            break
    return IbpResult(best_x, residuals, best_t, diverged)


def _check_stage_factor(net: Optional[GrdNetwork], plan: CascadePlan) -> None:
    if net is not None and net.stage_factor is not None:
        if not math.isclose(net.stage_factor, plan.stage_factor, rel_tol=1e-6):
            raise ConfigurationError(f"network was trained for factor {net.stage_factor:.6f}, "
                                     f"plan needs {plan.stage_factor:.6f}")


def stage_guide(guide_hr: np.ndarray, plan: CascadePlan, stage: int) -> np.ndarray:
    """The HR guide brought to the grid of ``stage`` (0-based)."""
    remaining = plan.total_scale / plan.cumulative_scale(stage + 1)
    return degrade_guide(np.asarray(guide_hr, dtype=np.float64), remaining, plan.stage_shapes[stage])


def super_resolve_stage(net: Optional[GrdNetwork], y_current: np.ndarray, guide_hr: Optional[np.ndarray],
                        stage: int, plan: CascadePlan) -> np.ndarray:
    """One cascade stage. ``net=None`` stands for the identity network (plain bicubic)."""
    if not 0 <= stage < plan.num_stages:
        raise ConfigurationError(f"stage {stage} outside plan with {plan.num_stages} stages")
    _check_stage_factor(net, plan)
    x_in = upsample(y_current, plan.stage_factor, out_shape=plan.stage_shapes[stage])
    if net is None:
        return x_in
    guide = None
    if net.config.guided:
        if guide_hr is None:
            raise ConfigurationError("guided network needs an HR guide image")
        guide = stage_guide(guide_hr, plan, stage)
    return net.predict(x_in, guide)


@dataclass
class CascadeResult:
    image: np.ndarray
    stages: list[np.ndarray] = field(default_factory=list)
    ibp: list[IbpResult] = field(default_factory=list)


def cascade_super_resolve(net, y_lr: np.ndarray, guide_hr: Optional[np.ndarray],
                          plan: CascadePlan, ibp: Optional[IbpConfig] = None) -> CascadeResult:
    """Fold ``super_resolve_stage`` over all stages, back-projecting against the
    original LR image after each stage (or only after the last, ``end_only``).

    ``net`` is one network shared by every stage, or a list with one per stage.
    """
    ibp = ibp or IbpConfig()
    nets = list(net) if isinstance(net, (list, tuple)) else [net] * plan.num_stages
    if len(nets) != plan.num_stages:
        raise ConfigurationError(f"got {len(nets)} per-stage networks for a {plan.num_stages}-stage plan")
    y_lr = np.asarray(y_lr, dtype=np.float64)
    if tuple(y_lr.shape) != tuple(plan.input_extents):
        raise ConfigurationError(f"LR input {y_lr.shape} does not match plan {plan.input_extents}")
    if guide_hr is not None and tuple(np.shape(guide_hr)) != plan.stage_shapes[-1]:
        raise ConfigurationError(f"guide extent {np.shape(guide_hr)} != target extent {plan.stage_shapes[-1]}")
    result = CascadeResult(y_lr)
    current = y_lr
    for k in range(plan.num_stages):
        current = super_resolve_stage(nets[k], current, guide_hr, k, plan)
        last = k == plan.num_stages - 1
        if ibp.max_iterations > 0 and (last or ibp.mode == "every_stage"):
            spec = DegradationSpec.for_test(plan.cumulative_scale(k + 1))
            refined = ibp_refine(current, y_lr, spec, ibp)
            current = refined.image
            result.ibp.append(refined)
        result.stages.append(current)
    result.image = current
    return result
