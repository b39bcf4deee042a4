"""Quasi-Newton minimization: numeric gradient, damped BFGS, backtracking search.

The cost oracle is treated as expensive and possibly returning +inf (the
filter's rejection sentinel), so the line search never requires extra
gradient evaluations and non-finite trial costs simply reject the step.
Gradients are central differences; the probe evaluations are independent
and can be dispatched through a caller-supplied map (``probe_map``) for
parallel execution without changing any result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GradientError(RuntimeError):
    """Cost not evaluable near the expansion point, naming the component."""


@dataclass(frozen=True, eq=False)
class OptimizerConfig:
    max_iterations: int = 100
    grad_step_relative: float = 1e-6
    armijo_c1: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 30
    cost_tolerance: float = 1e-8  # relative decrease per accepted iteration
    gradient_tolerance: float = 1e-4  # infinity norm

    def __post_init__(self):
        if not (0.0 < self.backtrack_factor < 1.0):
            raise ValueError("backtrack_factor must be in (0, 1)")
        for name in ("max_iterations", "grad_step_relative", "armijo_c1", "max_backtracks",
                     "cost_tolerance", "gradient_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(eq=False)
class OptTrace:
    """Per-accepted-iteration history of the minimization."""

    costs: list = field(default_factory=list)
    gradient_norms: list = field(default_factory=list)
    step_lengths: list = field(default_factory=list)
    damping_flags: list = field(default_factory=list)
    status: str = "running"

    @property
    def iterations(self) -> int:
        return len(self.costs)


def numerical_gradient(f, x: np.ndarray, config: OptimizerConfig | None = None, probe_map=None) -> np.ndarray:
    """Central-difference gradient with per-component relative steps.

    ``probe_map(points)`` must return the costs of an iterable of parameter
    vectors in order; the default evaluates serially.  A non-finite cost at
    a probe point is retried once with the step shrunk tenfold.
    """
    if config is None:
        config = OptimizerConfig()
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    steps = config.grad_step_relative * (1.0 + np.abs(x))

    def probes_for(h):
        pts = np.repeat(x[None, :], 2 * n, axis=0)
        idx = np.arange(n)
        pts[2 * idx, idx] += h
        pts[2 * idx + 1, idx] -= h
        return pts

    if probe_map is None:
        probe_map = lambda pts: [f(p) for p in pts]

    values = np.array(list(probe_map(probes_for(steps))), dtype=float)
    bad = ~np.isfinite(values.reshape(n, 2)).all(axis=1)
    if bad.any():
        # retry the failing components with a tenth of the step
        steps = steps.copy()
        steps[bad] /= 10.0
        retry_pts = []
        for i in np.flatnonzero(bad):
            for sign in (1.0, -1.0):
                p = x.copy()
                p[i] += sign * steps[i]
                retry_pts.append(p)
        retry_vals = np.array(list(probe_map(retry_pts)), dtype=float)
        for k, i in enumerate(np.flatnonzero(bad)):
            values[2 * i] = retry_vals[2 * k]
            values[2 * i + 1] = retry_vals[2 * k + 1]
        still_bad = ~np.isfinite(values.reshape(n, 2)).all(axis=1)
        if still_bad.any():
            i = int(np.flatnonzero(still_bad)[0])
            raise GradientError(f"cost not finite when probing component {i}")
    values = values.reshape(n, 2)
    return (values[:, 0] - values[:, 1]) / (2.0 * steps)


def bfgs_update_damped(B: np.ndarray, s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, bool]:
    """Powell-damped BFGS update of the Hessian approximation.

    Returns the updated matrix and whether damping was active.  The update
    is skipped (B returned unchanged) if s^T B s is not positive.
    """
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 0.0:
        return B, False
    sy = float(s @ y)
    if sy >= 0.2 * sBs:
        phi = 1.0
        damped = False
    else:
        phi = 0.8 * sBs / (sBs - sy)
        damped = True
    r = phi * y + (1.0 - phi) * Bs
    sr = float(s @ r)
    B_new = B - np.outer(Bs, Bs) / sBs + np.outer(r, r) / sr
    return 0.5 * (B_new + B_new.T), damped


def backtracking_line_search(f, x: np.ndarray, direction: np.ndarray, gradient: np.ndarray,
                             f0: float, config: OptimizerConfig | None = None) -> tuple[float, float]:
    """Largest step in {1, 1/2, 1/4, ...} satisfying the Armijo condition.

    Returns (alpha, cost at the accepted point); alpha == 0 signals a stall
    (no acceptable step within the backtrack budget).
    """
    if config is None:
        config = OptimizerConfig()
    slope = float(gradient @ direction)
    alpha = 1.0
    for _ in range(config.max_backtracks + 1):
        trial = f(x + alpha * direction)
        if math.isfinite(trial) and trial <= f0 + config.armijo_c1 * alpha * slope:
            return alpha, trial
        alpha *= config.backtrack_factor
    return 0.0, f0


def minimize(f, x0: np.ndarray, config: OptimizerConfig | None = None, probe_map=None) -> tuple[np.ndarray, OptTrace]:
    """Quasi-Newton descent from x0; returns the best-seen point and its trace.

    Accepted-iteration costs are non-increasing by construction.  The run
    stops on a small relative cost decrease, a small gradient, an exhausted
    iteration budget, or two consecutive line-search stalls.
    """
    if config is None:
        config = OptimizerConfig()
    x = np.array(x0, dtype=float)
    f_curr = f(x)
    if not math.isfinite(f_curr):
        raise ValueError("cost is not finite at the starting point")

    trace = OptTrace()
    n = x.shape[0]
    B = max(1.0, abs(f_curr)) * np.eye(n)
    best_x, best_f = x.copy(), f_curr
    grad = numerical_gradient(f, x, config, probe_map)
    stalls = 0

    for _ in range(config.max_iterations):
        gnorm = float(np.abs(grad).max())
        if gnorm < config.gradient_tolerance:
            trace.status = "gradient"
            break

        try:
            direction = -np.linalg.solve(B, grad)
        except np.linalg.LinAlgError:
            direction = -grad
        if float(grad @ direction) >= 0.0:
            direction = -grad

        alpha, f_new = backtracking_line_search(f, x, direction, grad, f_curr, config)
        if alpha == 0.0:
            stalls += 1
            if stalls >= 2:
                trace.status = "stalled"
                break
            # retry from steepest descent with a fresh curvature scale
            B = max(1.0, abs(f_curr)) * np.eye(n)
            continue
        stalls = 0

        step = alpha * direction
        x_new = x + step
        grad_new = numerical_gradient(f, x_new, config, probe_map)
        B, damped = bfgs_update_damped(B, step, grad_new - grad)

        decrease = f_curr - f_new
        x, f_curr, grad = x_new, f_new, grad_new
        if f_curr < best_f:
            best_x, best_f = x.copy(), f_curr

        trace.costs.append(f_curr)
        trace.gradient_norms.append(gnorm)
        trace.step_lengths.append(alpha)
        trace.damping_flags.append(damped)

        if decrease < config.cost_tolerance * max(1.0, abs(f_curr + decrease)):
            trace.status = "cost"
            break
    else:
        trace.status = "max_iterations"

    return best_x, trace
