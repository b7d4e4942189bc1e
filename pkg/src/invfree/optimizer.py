"""Bounded scalar and box-constrained maximizers.

``maximize_scalar`` is a Brent-style search on an interval, combining golden
section steps with successive parabolic interpolation.  ``maximize_box`` is a
projected quasi-Newton ascent (limited-memory BFGS curvature, memory 10,
gradient projection at active box faces) driven by finite-difference
gradients.  Both are deterministic: identical inputs produce identical
outcomes, and ties at flat regions keep the first iterate that achieved the
best value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from invfree.objective import fd_gradient

__all__ = [
    "OptimizationError",
    "OptimizeOutcome",
    "OptimizerConfig",
    "maximize_box",
    "maximize_scalar",
]

SCALAR_REL_TOL = 1e-3
BOX_REL_TOL = 1e-5
LBFGS_MEMORY = 10
_GOLDEN = 0.5 * (3.0 - math.sqrt(5.0))


class OptimizationError(RuntimeError):
    """Raised when the objective returns a non-finite value."""


@dataclass
class OptimizerConfig:
    """Solver settings.

    rel_tol
        Stop when the relative change of the objective falls below this
        (1e-3 for the scalar solver, 1e-5 for the box solver when None).
        The scalar solver additionally requires the argument to have
        stalled, so flat plateaus far from the maximizer do not stop it.
    max_iter
        Iteration cap (default 100).
    fd_step
        Finite-difference step for gradients and for the boundary-hit test.
    initial_guess
        Start point of the box solver; defaults to (2, ..., 2) clipped into
        the box.
    multi_start
        Number of deterministic extra starts (spread along the box diagonal)
        for the box solver.  Single-start is the default: every stationary
        point is a consistent estimate, so restarts are optional insurance.
    """

    rel_tol: float | None = None
    max_iter: int = 100
    fd_step: float = 1e-3
    initial_guess: tuple[float, ...] | None = None
    multi_start: int = 1

    def __post_init__(self):
        if self.rel_tol is not None and self.rel_tol <= 0.0:
            raise ValueError("rel_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.fd_step <= 0.0:
            raise ValueError("fd_step must be positive")
        if self.multi_start < 1:
            raise ValueError("multi_start must be >= 1")


@dataclass
class OptimizeOutcome:
    """Result of one maximization."""

    argmax: np.ndarray
    value: float
    iterations: int
    converged: bool
    boundary_hit: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    n_evals: int = 0


def _checked(f, x, label: str):
    value = f(x)
    if not np.isfinite(value):
        raise OptimizationError(f"objective returned a non-finite value {value!r} at {label} = {x}")
    return float(value)


def _boundary_flags(x: np.ndarray, lo: np.ndarray, hi: np.ndarray, tol: float) -> np.ndarray:
    return (x - lo <= tol) | (hi - x <= tol)


def maximize_scalar(f, lo: float, hi: float, cfg: OptimizerConfig | None = None) -> OptimizeOutcome:
    """Maximize a univariate function on [lo, hi].

    For a unimodal objective the returned argmax is within about
    1e-4 * (hi - lo) of the true maximizer.
    """
    cfg = cfg or OptimizerConfig()
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    rel_tol = cfg.rel_tol if cfg.rel_tol is not None else SCALAR_REL_TOL
    span = hi - lo
    # Terminal resolution stays below the boundary-hit tolerance so that
    # face-running maximizers are reliably flagged.
    xatol = min(5e-5 * span, 0.125 * cfg.fd_step)
    x_stall_tol = 2.0 * xatol

    def g(x):
        return -_checked(f, x, "x")

    a, b = float(lo), float(hi)
    x = w = v = a + _GOLDEN * span
    fx = fw = fv = g(x)
    n_evals = 1
    step = prev_step = 0.0
    stall = 0
    converged = False
    iterations = 0

    for iterations in range(1, cfg.max_iter + 1):
        mid = 0.5 * (a + b)
        tol1 = xatol + 1e-11 * abs(x)
        tol2 = 2.0 * tol1
        if abs(x - mid) <= tol2 - 0.5 * (b - a):
            converged = True
            break

        # Try a parabolic step through (x, w, v); fall back to golden section.
        use_golden = True
        if abs(prev_step) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            if abs(p) < abs(0.5 * q * prev_step) and q * (a - x) < p < q * (b - x):
                prev_step = step
                step = p / q
                u = x + step
                if (u - a) < tol2 or (b - u) < tol2:
                    step = tol1 if x < mid else -tol1
                use_golden = False
        if use_golden:
            prev_step = (b - x) if x < mid else (a - x)
            step = _GOLDEN * prev_step

        u = x + (step if abs(step) >= tol1 else (tol1 if step > 0.0 else -tol1))
        fu = g(u)
        n_evals += 1

        old_fx = fx
        old_x = x
        improved = fu <= fx
        if improved:
            if u < x:
                b = x
            else:
                a = x
            v, fv = w, fw
            w, fw = x, fx
            x, fx = u, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, fv = w, fw
                w, fw = u, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu

        # Secondary stop: the objective has stalled in relative terms while
        # the iterate barely moves inside an already-collapsed bracket.  A
        # probe that merely failed to improve must not count as a stall.
        f_scale = max(abs(old_fx), 1e-300)
        if improved:
            if abs(fx - old_fx) <= rel_tol * f_scale and abs(x - old_x) <= x_stall_tol and (b - a) <= 8.0 * xatol:
                stall += 1
                if stall >= 2:
                    converged = True
                    break
            else:
                stall = 0
        elif abs(fu - fx) > rel_tol * f_scale:
            stall = 0

    argmax = np.array([x])
    flags = _boundary_flags(argmax, np.array([lo]), np.array([hi]), cfg.fd_step)
    return OptimizeOutcome(
        argmax=argmax,
        value=-fx,
        iterations=iterations,
        converged=converged,
        boundary_hit=flags,
        n_evals=n_evals,
    )


def _two_loop(memory: list[tuple[np.ndarray, np.ndarray, float]], grad: np.ndarray) -> np.ndarray:
    """Standard limited-memory BFGS two-loop recursion (for minimization)."""
    q = grad.copy()
    alphas = []
    for s, yv, rho in reversed(memory):
        alpha = rho * float(s @ q)
        q -= alpha * yv
        alphas.append(alpha)
    if memory:
        s, yv, _ = memory[-1]
        gamma = float(s @ yv) / float(yv @ yv)
        q *= gamma
    for (s, yv, rho), alpha in zip(memory, reversed(alphas)):
        beta = rho * float(yv @ q)
        q += (alpha - beta) * s
    return q


def _maximize_box_single(f, lo, hi, x0, cfg, rel_tol):
    """One projected quasi-Newton run from a single start point."""

    def g(x):
        return -_checked(f, x, "theta")

    def grad_g(x):
        return fd_gradient(g, x, step=cfg.fd_step, bounds=list(zip(lo, hi)))

    x = x0.copy()
    gx = g(x)
    n_evals = 1
    grad = grad_g(x)
    n_evals += 2 * x.size
    memory: list[tuple[np.ndarray, np.ndarray, float]] = []
    face_tol = 1e-12 * np.maximum(hi - lo, 1.0)
    converged = False
    iterations = 0
    small_changes = 0

    for iterations in range(1, cfg.max_iter + 1):
        # Project the gradient: drop components that push outside the box at
        # active faces, then take a quasi-Newton direction in the free space.
        proj = grad.copy()
        at_lo = x - lo <= face_tol
        at_hi = hi - x <= face_tol
        proj[at_lo & (proj > 0.0)] = 0.0
        proj[at_hi & (proj < 0.0)] = 0.0
        if np.max(np.abs(proj)) <= 1e-14:
            converged = True
            break
        direction = -_two_loop(memory, proj)
        direction[at_lo & (direction < 0.0)] = 0.0
        direction[at_hi & (direction > 0.0)] = 0.0
        if float(direction @ grad) >= 0.0 or not np.all(np.isfinite(direction)):
            direction = -proj

        # Backtracking Armijo search along the projected path.
        alpha = 1.0
        accepted = False
        for _ in range(40):
            trial = np.clip(x + alpha * direction, lo, hi)
            move = trial - x
            if np.max(np.abs(move)) <= 1e-15:
                break
            g_trial = g(trial)
            n_evals += 1
            if g_trial <= gx + 1e-4 * float(grad @ move):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = True  # no admissible improvement: treat as stationary
            break

        grad_new = grad_g(trial)
        n_evals += 2 * x.size
        s = trial - x
        yv = grad_new - grad
        sy = float(s @ yv)
        if sy > 1e-12 * float(np.linalg.norm(s)) * max(float(np.linalg.norm(yv)), 1e-300):
            memory.append((s, yv, 1.0 / sy))
            if len(memory) > LBFGS_MEMORY:
                memory.pop(0)

        rel_change = abs(g_trial - gx) / max(abs(gx), 1e-300)
        x, gx, grad = trial, g_trial, grad_new
        # Sustained small relative change: one heavily backtracked step must
        # not end the ascent while the gradient is still informative.
        small_changes = small_changes + 1 if rel_change <= rel_tol else 0
        if small_changes >= 2:
            converged = True
            break

    return x, -gx, iterations, converged, n_evals


def maximize_box(f, bounds, cfg: OptimizerConfig | None = None) -> OptimizeOutcome:
    """Maximize a function of an m-vector over a box.

    ``bounds`` is a sequence of (lo, hi) pairs.  The accepted objective value
    is monotone nondecreasing across iterations, and the stop rule is a
    relative objective change below ``rel_tol`` (default 1e-5) or the
    iteration cap.
    """
    cfg = cfg or OptimizerConfig()
    bounds = [(float(a), float(b)) for a, b in bounds]
    lo = np.array([a for a, _ in bounds])
    hi = np.array([b for _, b in bounds])
    if np.any(lo >= hi):
        raise ValueError("every box dimension needs lo < hi")
    m = lo.size
    rel_tol = cfg.rel_tol if cfg.rel_tol is not None else BOX_REL_TOL

    if cfg.initial_guess is not None:
        x0 = np.asarray(cfg.initial_guess, dtype=float)
        if x0.shape != (m,):
            raise ValueError(f"initial guess has shape {x0.shape}, expected ({m},)")
        if np.any(x0 < lo) or np.any(x0 > hi):
            raise ValueError("initial guess lies outside the box")
    else:
        x0 = np.clip(np.full(m, 2.0), lo, hi)

    starts = [x0]
    for k in range(1, cfg.multi_start):
        t = (k + 0.5) / cfg.multi_start
        starts.append(lo + t * (hi - lo))

    best = None
    total_evals = 0
    total_iters = 0
    for start in starts:
        x, value, iters, conv, evals = _maximize_box_single(f, lo, hi, start, cfg, rel_tol)
        total_evals += evals
        total_iters += iters
        if best is None or value > best[1]:
            best = (x, value, conv)

    x, value, conv = best
    flags = _boundary_flags(x, lo, hi, cfg.fd_step)
    return OptimizeOutcome(
        argmax=x,
        value=value,
        iterations=total_iters,
        converged=conv,
        boundary_hit=flags,
        n_evals=total_evals,
    )
