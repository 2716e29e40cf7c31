"""Dense nonlinear root-finding and bound-constrained least squares.

All higher-level solves in this package (finger transmission stages, whole-hand
retargeting) go through this module.  Two families are provided:

* array-based Levenberg-Marquardt (`solve_root`, `solve_least_squares`) for
  general problems, with optional box bounds handled by step projection;
* scalar / 2x2 fast paths (`solve_scalar_root`, `solve_root2`) operating on
  plain floats, used on the per-finger hot path where per-call numpy overhead
  would dominate the microsecond budget.

The array and 2x2 solvers use multiplicative adjustment of an additive
diagonal damping term (x10 on a rejected step, /10 on an accepted one); the
scalar solver halves a plain Newton step until it descends.  Solvers are pure
functions of their inputs; warm starting is the caller's job and selects the
solution branch for problems with mirror roots.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_log = logging.getLogger(__name__)


class SolveStatus(enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    SINGULAR_JACOBIAN = "singular_jacobian"
    DIVERGED_NAN = "diverged_nan"


@dataclass(frozen=True)
class SolverSettings:
    """Termination and damping knobs shared by all solver entry points."""

    max_iterations: int = 100
    residual_tolerance: float = 1e-10
    step_tolerance: float = 1e-12
    initial_damping: float = 1e-8
    finite_difference_step: float = 1e-6
    cost_tolerance: float = 1e-12

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("residual_tolerance", "step_tolerance", "initial_damping",
                     "finite_difference_step", "cost_tolerance"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")


DEFAULT_SETTINGS = SolverSettings()


@dataclass
class SolveResult:
    x: np.ndarray
    residual_norm: float
    iterations: int
    status: SolveStatus

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED


@dataclass
class ResidualProblem:
    """A residual map r(x): R^n -> R^m with optional analytic Jacobian and box.

    ``m == n`` for root solving, ``m >= n`` for least squares.  Bounds, when
    given, must satisfy lower <= upper elementwise; units are the caller's.
    """

    dim_x: int
    dim_r: int
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.dim_r < self.dim_x:
            raise ValueError("dim_r must be >= dim_x")
        if (self.lower is None) != (self.upper is None):
            raise ValueError("bounds must be given as a pair or not at all")
        if self.lower is not None:
            self.lower = np.asarray(self.lower, dtype=float)
            self.upper = np.asarray(self.upper, dtype=float)
            if self.lower.shape != (self.dim_x,) or self.upper.shape != (self.dim_x,):
                raise ValueError("bounds must have shape (dim_x,)")
            if np.any(self.lower > self.upper):
                raise ValueError("lower bounds exceed upper bounds")

    def eval_jacobian(self, x: np.ndarray, h: float) -> np.ndarray:
        if self.jacobian is not None:
            return np.asarray(self.jacobian(x), dtype=float)
        return numeric_jacobian(self.residual, x, h)


def numeric_jacobian(evaluator: Callable[[np.ndarray], np.ndarray],
                     x: Sequence[float], h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``evaluator`` at ``x``.

    O(h^2) accurate for smooth maps.  Raises ValueError naming the offending
    coordinate if any probe evaluation is non-finite.
    """
    if h <= 0.0:
        raise ValueError("finite-difference step must be positive")
    x = np.asarray(x, dtype=float)
    r0 = np.atleast_1d(np.asarray(evaluator(x), dtype=float))
    jac = np.empty((r0.size, x.size))
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        rp = np.atleast_1d(np.asarray(evaluator(xp), dtype=float))
        xm = x.copy()
        xm[i] -= h
        rm = np.atleast_1d(np.asarray(evaluator(xm), dtype=float))
        if not (np.all(np.isfinite(rp)) and np.all(np.isfinite(rm))):
            raise ValueError(f"non-finite residual while perturbing coordinate {i}")
        jac[:, i] = (rp - rm) / (2.0 * h)
    return jac


def _project(x: np.ndarray, lower: Optional[np.ndarray],
             upper: Optional[np.ndarray]) -> np.ndarray:
    if lower is None:
        return x
    return np.clip(x, lower, upper)


def _lm_loop(problem: ResidualProblem, x0: np.ndarray, settings: SolverSettings,
             root_mode: bool) -> SolveResult:
    lo, hi = problem.lower, problem.upper
    x_start = np.asarray(x0, dtype=float).copy()
    x = _project(x_start, lo, hi)
    if lo is not None and np.max(np.abs(x - x_start)) > 0.0:
        _log.debug("start point projected onto bounds (max shift %.3g)",
                   float(np.max(np.abs(x - x_start))))
    r = np.atleast_1d(np.asarray(problem.residual(x), dtype=float))
    if not np.all(np.isfinite(r)):
        return SolveResult(x, float("nan"), 0, SolveStatus.DIVERGED_NAN)
    cost = float(r @ r)
    damping = settings.initial_damping

    def converged(x: np.ndarray, r: np.ndarray, jac: Optional[np.ndarray]) -> bool:
        if root_mode:
            return float(np.max(np.abs(r))) <= settings.residual_tolerance
        # First-order stationarity on the active set: projected gradient.
        # The tolerance carries a resolution term because the gradient is a
        # large-scale cancellation when the residual mixes very different
        # row scales; demanding more than float resolution would spin.
        g = jac.T @ r
        pg = x - _project(x - g, lo, hi)
        col_sq = float(np.max(np.einsum("ij,ij->j", jac, jac)))
        resolution = np.finfo(float).eps * (
            col_sq * (1.0 + float(np.max(np.abs(x))))
            + math.sqrt(col_sq) * float(np.linalg.norm(r)))
        return float(np.max(np.abs(pg))) <= settings.step_tolerance + 8.0 * resolution

    eye = np.eye(problem.dim_x)
    steps_taken = 0
    plateau = 0
    for _ in range(settings.max_iterations):
        jac = problem.eval_jacobian(x, settings.finite_difference_step)
        if not np.all(np.isfinite(jac)):
            return SolveResult(x, float(np.max(np.abs(r))), steps_taken,
                               SolveStatus.DIVERGED_NAN)
        if converged(x, r, jac):
            return SolveResult(x, float(np.max(np.abs(r))), steps_taken,
                               SolveStatus.CONVERGED)
        jtj = jac.T @ jac
        jtr = jac.T @ r
        if lo is None:
            free = None
        else:
            # Freeze coordinates pinned at a bound with the gradient pushing
            # outward; stepping the full set and projecting stalls on faces.
            active = (((x <= lo + 1e-14) & (jtr > 0.0))
                      | ((x >= hi - 1e-14) & (jtr < 0.0)))
            free = np.where(~active)[0]
        while True:
            try:
                if free is None:
                    step = np.linalg.solve(jtj + damping * eye, -jtr)
                elif free.size == 0:
                    step = np.zeros(problem.dim_x)
                else:
                    step = np.zeros(problem.dim_x)
                    sub = jtj[np.ix_(free, free)] + damping * np.eye(free.size)
                    step[free] = np.linalg.solve(sub, -jtr[free])
            except np.linalg.LinAlgError:
                step = None
            if step is None or not np.all(np.isfinite(step)):
                damping = max(damping * 10.0, 1e-10)
                if damping > 1e12:
                    return SolveResult(x, float(np.max(np.abs(r))), steps_taken,
                                       SolveStatus.SINGULAR_JACOBIAN)
                continue
            x_new = _project(x + step, lo, hi)
            r_new = np.atleast_1d(np.asarray(problem.residual(x_new), dtype=float))
            if not np.all(np.isfinite(r_new)):
                return SolveResult(x_new, float("nan"), steps_taken + 1,
                                   SolveStatus.DIVERGED_NAN)
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                moved = float(np.max(np.abs(x_new - x)))
                rel_drop = (cost - cost_new) / max(cost_new,
                                                   np.finfo(float).tiny)
                plateau = plateau + 1 if rel_drop <= settings.cost_tolerance else 0
                x, r, cost = x_new, r_new, cost_new
                damping = max(damping / 10.0, 1e-14)
                steps_taken += 1
                break
            damping = max(damping * 10.0, 1e-10)
            if damping > 1e12:
                # No descent survives heavy damping: report the best point.
                return SolveResult(x, float(np.max(np.abs(r))), steps_taken,
                                   SolveStatus.MAX_ITERATIONS)
        if root_mode and converged(x, r, None):
            return SolveResult(x, float(np.max(np.abs(r))), steps_taken,
                               SolveStatus.CONVERGED)
        # Two consecutive accepted steps with relative cost decrease below
        # resolution mean a numerical minimum even if the gradient test has
        # not fired (nonzero-residual minima in ill-scaled flat valleys).
        # Acceptance divides damping by ten, so a mid-flight crawl cannot
        # produce two such steps in a row.
        if not root_mode and plateau >= 2:
            return SolveResult(x, float(np.max(np.abs(r))), steps_taken,
                               SolveStatus.CONVERGED)
        stall_floor = settings.step_tolerance if root_mode else 1e-15
        if moved <= stall_floor:
            if not root_mode:
                jac = problem.eval_jacobian(x, settings.finite_difference_step)
                if converged(x, r, jac):
                    return SolveResult(x, float(np.max(np.abs(r))), steps_taken,
                                       SolveStatus.CONVERGED)
            return SolveResult(x, float(np.max(np.abs(r))), steps_taken,
                               SolveStatus.MAX_ITERATIONS)
    return SolveResult(x, float(np.max(np.abs(r))), steps_taken,
                       SolveStatus.MAX_ITERATIONS)


def solve_root(problem: ResidualProblem, x0: Sequence[float],
               settings: SolverSettings = DEFAULT_SETTINGS) -> SolveResult:
    """Solve the square system r(x) = 0 by damped Levenberg-Marquardt.

    Converges when ``max|r| <= residual_tolerance``.  With multiple roots the
    basin of ``x0`` is returned; warm start from the previous solution to keep
    a branch.
    """
    if problem.dim_r != problem.dim_x:
        raise ValueError("solve_root requires a square problem")
    return _lm_loop(problem, np.asarray(x0, dtype=float), settings, root_mode=True)


def solve_least_squares(problem: ResidualProblem, x0: Sequence[float],
                        settings: SolverSettings = DEFAULT_SETTINGS) -> SolveResult:
    """Minimize ||r(x)||^2 subject to optional box bounds (projected steps).

    Converged means the projected gradient inf-norm is <= step_tolerance, i.e.
    first-order stationarity on the active set.  An out-of-bounds x0 is
    projected onto the box before the first evaluation.
    """
    return _lm_loop(problem, np.asarray(x0, dtype=float), settings, root_mode=False)


# ---------------------------------------------------------------------------
# Scalar and 2x2 fast paths (plain floats, analytic derivatives only).
# ---------------------------------------------------------------------------

def solve_scalar_root(f_df: Callable[[float], tuple], x0: float,
                      settings: SolverSettings = DEFAULT_SETTINGS):
    """Damped Newton on a scalar equation f(x) = 0.

    ``f_df(x)`` returns ``(f, df/dx)`` as floats.  Returns
    ``(x, abs_residual, iterations, status)``.
    """
    x = float(x0)
    f, df = f_df(x)
    if not (math.isfinite(f) and math.isfinite(df)):
        return x, float("nan"), 0, SolveStatus.DIVERGED_NAN
    tol = settings.residual_tolerance
    if abs(f) <= tol:
        return x, abs(f), 0, SolveStatus.CONVERGED
    for iteration in range(1, settings.max_iterations + 1):
        if df == 0.0:
            return x, abs(f), iteration, SolveStatus.SINGULAR_JACOBIAN
        step = -f / df
        rejected = 0
        while True:
            x_new = x + step
            f_new, df_new = f_df(x_new)
            if not (math.isfinite(f_new) and math.isfinite(df_new)):
                return x_new, float("nan"), iteration, SolveStatus.DIVERGED_NAN
            if abs(f_new) < abs(f) or abs(f_new) <= tol:
                break
            step *= 0.5
            rejected += 1
            if rejected > 60:
                return x, abs(f), iteration, SolveStatus.MAX_ITERATIONS
        moved = abs(x_new - x)
        x, f, df = x_new, f_new, df_new
        if abs(f) <= tol:
            return x, abs(f), iteration, SolveStatus.CONVERGED
        if moved <= settings.step_tolerance:
            return x, abs(f), iteration, SolveStatus.MAX_ITERATIONS
    return x, abs(f), settings.max_iterations, SolveStatus.MAX_ITERATIONS


def solve_root2(f_j: Callable[[float, float], tuple], x0: float, y0: float,
                settings: SolverSettings = DEFAULT_SETTINGS):
    """Damped Newton on a 2x2 system, plain-float arithmetic.

    ``f_j(x, y)`` returns ``(f1, f2, j11, j12, j21, j22)``.  Returns
    ``(x, y, inf_residual, iterations, status)``.
    """
    x, y = float(x0), float(y0)
    f1, f2, j11, j12, j21, j22 = f_j(x, y)
    if not (math.isfinite(f1) and math.isfinite(f2)):
        return x, y, float("nan"), 0, SolveStatus.DIVERGED_NAN
    tol = settings.residual_tolerance
    res = max(abs(f1), abs(f2))
    if res <= tol:
        return x, y, res, 0, SolveStatus.CONVERGED
    damping = settings.initial_damping
    for iteration in range(1, settings.max_iterations + 1):
        # Damped normal equations of the 2x2 Jacobian.
        a11 = j11 * j11 + j21 * j21 + damping
        a12 = j11 * j12 + j21 * j22
        a22 = j12 * j12 + j22 * j22 + damping
        b1 = -(j11 * f1 + j21 * f2)
        b2 = -(j12 * f1 + j22 * f2)
        det = a11 * a22 - a12 * a12
        if det == 0.0 or not math.isfinite(det):
            damping = max(damping * 10.0, 1e-8)
            if damping > 1e12:
                return x, y, res, iteration, SolveStatus.SINGULAR_JACOBIAN
            continue
        sx = (b1 * a22 - b2 * a12) / det
        sy = (a11 * b2 - a12 * b1) / det
        xn, yn = x + sx, y + sy
        g1, g2, k11, k12, k21, k22 = f_j(xn, yn)
        if not (math.isfinite(g1) and math.isfinite(g2)):
            return xn, yn, float("nan"), iteration, SolveStatus.DIVERGED_NAN
        res_new = max(abs(g1), abs(g2))
        if res_new < res or res_new <= tol:
            moved = max(abs(sx), abs(sy))
            x, y = xn, yn
            f1, f2, j11, j12, j21, j22 = g1, g2, k11, k12, k21, k22
            res = res_new
            damping = max(damping / 10.0, 1e-14)
            if res <= tol:
                return x, y, res, iteration, SolveStatus.CONVERGED
            if moved <= settings.step_tolerance:
                return x, y, res, iteration, SolveStatus.MAX_ITERATIONS
        else:
            damping *= 10.0
            if damping > 1e12:
                return x, y, res, iteration, SolveStatus.MAX_ITERATIONS
    return x, y, res, settings.max_iterations, SolveStatus.MAX_ITERATIONS
