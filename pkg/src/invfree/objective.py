"""Matrix-free evaluation of the inversion-free objective.

For a sample Y on n sites and a correlation matrix K_n(theta), the loss and
its profile form are

    F_n(Y, phi, theta) = (1/n) * (phi * Y'K_n(theta)Y - phi^2/2 * ||K_n(theta)||_F^2)
    G_n(Y, theta)      = Y'K_n(theta)Y / ||K_n(theta)||_F
    phi_hat(theta)     = Y'K_n(theta)Y / ||K_n(theta)||_F^2

Everything reduces to two scalars per theta, Y'K_nY and ||K_n||_F^2, which are
accumulated over the n(n-1)/2 unordered site pairs without ever materializing
the n x n matrix.  Pairs are partitioned into fixed row blocks; block partial
sums are combined in ascending block order with compensated addition, so the
result is bit-identical for any worker count.  Sites are first put into a
canonical order (lexicographic by coordinates, then by y), which makes the
sums bit-identical under permutations of the input as well.

No pair is ever dropped: correlations are summed exactly even where they are
numerically negligible, since silent tapering would change the estimator.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from invfree.kernels import (
    Anisotropy,
    AnisotropyForm,
    KernelFamily,
    _profile_from_dist,
    _profile_from_sq,
)

__all__ = [
    "BLOCK_ROWS",
    "QuadraticEvaluator",
    "QuadraticSummary",
    "f_n",
    "fd_gradient",
    "g_n",
    "phi_hat",
    "quadratic_summary",
]

# Row-block size of the pair partition; fixed so that the reduction order
# (and hence the floating-point result) never depends on scheduling.
BLOCK_ROWS = 256

# Pair channels are precomputed and cached when the sample is small enough;
# beyond this many unordered pairs they are rebuilt per evaluation so that
# memory stays O(BLOCK_ROWS * n) even for n around 10^5 - 10^6.
CACHE_PAIR_LIMIT = 60_000_000


@dataclass(frozen=True)
class QuadraticSummary:
    """The two quadratic reductions at one theta: Y'K_nY and ||K_n||_F^2."""

    yky: float
    k_frob_sq: float
    n: int


def _kahan_sum(values) -> float:
    """Compensated sum of a short list of partials, in the given order."""
    total = 0.0
    carry = 0.0
    for v in values:
        v -= carry
        bumped = total + v
        carry = (bumped - total) - v
        total = bumped
    return total


def _site_coords(sites) -> np.ndarray:
    coords = getattr(sites, "sites", sites)
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2:
        raise ValueError("sites must be an (n, d) array")
    return coords


class QuadraticEvaluator:
    """Blocked pair sums for one sample, reusable across many theta.

    Building the evaluator precomputes, per row block, the pair channel
    needed by the anisotropy form (plain distances for isotropic forms,
    squared coordinate differences otherwise) together with the y_i * y_j
    products.  Each ``summary`` call then costs one kernel evaluation and two
    reductions per block.
    """

    def __init__(
        self,
        sites,
        y,
        family: KernelFamily,
        form: AnisotropyForm,
        workers: int = 1,
        cache: bool | None = None,
    ):
        coords = _site_coords(sites)
        y = np.asarray(y, dtype=float)
        n, d = coords.shape
        if y.shape != (n,):
            raise ValueError(f"y has shape {y.shape}, expected ({n},)")
        if form.dim != d:
            raise ValueError(f"anisotropy form is {form.dim}d but sites are {d}d")
        if n < 1:
            raise ValueError("need at least one site")

        # Canonical order: coordinates lexicographically, then y.  np.lexsort
        # uses its last key as the primary one.
        order = np.lexsort((y,) + tuple(coords[:, c] for c in reversed(range(d))))
        self._coords = coords[order]
        self._y = y[order]

        self.family = family
        self.form = form
        self.workers = max(1, int(workers))
        self.n = n
        self.d = d
        self._sum_y_sq = float(np.sum(self._y * self._y))
        self._ranges = [(i0, min(i0 + BLOCK_ROWS, n)) for i0 in range(0, n - 1, BLOCK_ROWS)]
        if cache is None:
            cache = n * (n - 1) // 2 <= CACHE_PAIR_LIMIT
        self._cache = [self._materialize_block(i0, i1) for i0, i1 in self._ranges] if cache else None

    def _materialize_block(self, i0: int, i1: int) -> dict:
        coords, y, d = self._coords, self._y, self.d
        cols = np.arange(self.n)[None, :]
        rows = np.arange(i0, i1)[:, None]
        mask = cols > rows
        diffs = coords[i0:i1, None, :] - coords[None, :, :]
        block: dict = {"yy": (y[i0:i1, None] * y[None, :])[mask]}
        if self.form.kind == "isotropic":
            block["dist"] = np.sqrt(np.einsum("ijc,ijc->ij", diffs, diffs))[mask]
        elif self.form.kind == "diagonal_ranges":
            block["sq"] = [np.square(diffs[:, :, c])[mask] for c in range(d)]
        else:
            # Channel per (a, b) entry of A = B^2, off-diagonals doubled.
            channels = []
            pairs = []
            for a in range(d):
                for b in range(a, d):
                    prod = (diffs[:, :, a] * diffs[:, :, b])[mask]
                    if a != b:
                        prod = 2.0 * prod
                    channels.append(prod)
                    pairs.append((a, b))
            block["sq"] = channels
            block["ab"] = pairs
        return block

    def _block(self, index: int) -> dict:
        if self._cache is not None:
            return self._cache[index]
        return self._materialize_block(*self._ranges[index])

    # -- kernel values per block -------------------------------------------------

    def _block_correlations(self, block: dict, aniso: Anisotropy) -> np.ndarray:
        if self.form.kind == "isotropic":
            u = block["dist"] * (1.0 / aniso.theta)
            return _profile_from_dist(self.family, u, out=u)
        if self.form.kind == "diagonal_ranges":
            inv = (1.0 / aniso.theta**2, 1.0 / aniso.rho**2)
            u2 = block["sq"][0] * inv[0]
            u2 += block["sq"][1] * inv[1]
            return _profile_from_sq(self.family, u2, out=u2)
        a_mat = aniso.b_matrix(self.d)
        a_mat = a_mat @ a_mat
        u2 = None
        for (a, b), channel in zip(block["ab"], block["sq"]):
            term = channel * a_mat[a, b]
            u2 = term if u2 is None else u2 + term
        return _profile_from_sq(self.family, u2, out=u2)

    def _block_partials(self, index: int, aniso: Anisotropy) -> tuple[float, float]:
        block = self._block(index)
        k = self._block_correlations(block, aniso)
        yky_part = float(np.sum(k * block["yy"]))
        frob_part = float(np.sum(k * k))
        return yky_part, frob_part

    # -- public evaluations --------------------------------------------------------

    def summary(self, theta) -> QuadraticSummary:
        """Y'K_n(theta)Y and ||K_n(theta)||_F^2 at one theta."""
        aniso = self.form.at(theta)
        indices = range(len(self._ranges))
        if self.workers > 1 and len(self._ranges) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                partials = list(pool.map(lambda i: self._block_partials(i, aniso), indices))
        else:
            partials = [self._block_partials(i, aniso) for i in indices]
        yky = _kahan_sum([self._sum_y_sq] + [2.0 * p for p, _ in partials])
        frob = _kahan_sum([float(self.n)] + [2.0 * q for _, q in partials])
        return QuadraticSummary(yky=yky, k_frob_sq=frob, n=self.n)

    def g(self, theta) -> float:
        s = self.summary(theta)
        return s.yky / np.sqrt(s.k_frob_sq)

    def f(self, phi: float, theta) -> float:
        s = self.summary(theta)
        return (phi * s.yky - 0.5 * phi * phi * s.k_frob_sq) / s.n

    def phi_ratio(self, theta) -> float:
        """The unconstrained variance maximizer Y'K_nY / ||K_n||_F^2."""
        s = self.summary(theta)
        return s.yky / s.k_frob_sq


def _params_of(aniso: Anisotropy) -> np.ndarray:
    if aniso.kind == "isotropic":
        return np.array([aniso.theta])
    if aniso.kind == "diagonal_ranges":
        return np.array([aniso.theta, aniso.rho])
    b = np.asarray(aniso.matrix)
    return np.array([b[i, j] for i in range(b.shape[0]) for j in range(i + 1)])


def quadratic_summary(y, sites, family: KernelFamily, aniso: Anisotropy, workers: int = 1) -> QuadraticSummary:
    """One-shot Y'K_nY and ||K_n||_F^2 at a concrete anisotropy."""
    coords = _site_coords(sites)
    form = AnisotropyForm(aniso.kind, coords.shape[1])
    ev = QuadraticEvaluator(coords, y, family, form, workers=workers)
    return ev.summary(_params_of(aniso))


def f_n(y, sites, family: KernelFamily, form: AnisotropyForm, phi: float, theta, workers: int = 1) -> float:
    """The inversion-free loss (1/n)(phi Y'K_nY - phi^2/2 ||K_n||_F^2)."""
    if phi <= 0.0:
        raise ValueError("phi must be positive")
    return QuadraticEvaluator(sites, y, family, form, workers=workers).f(phi, theta)


def g_n(y, sites, family: KernelFamily, form: AnisotropyForm, theta, workers: int = 1) -> float:
    """The profile objective Y'K_nY / ||K_n||_F."""
    return QuadraticEvaluator(sites, y, family, form, workers=workers).g(theta)


def phi_hat(
    y,
    sites,
    family: KernelFamily,
    form: AnisotropyForm,
    theta,
    phi_interval: tuple[float, float] = (1e-4, 1e4),
    workers: int = 1,
) -> tuple[float, bool]:
    """Closed-form variance estimate at theta, clamped to its interval.

    Returns ``(value, clamped)``; ``clamped`` is True when the unconstrained
    ratio fell outside the interval.
    """
    ratio = QuadraticEvaluator(sites, y, family, form, workers=workers).phi_ratio(theta)
    lo, hi = phi_interval
    if ratio < lo:
        return lo, True
    if ratio > hi:
        return hi, True
    return float(ratio), False


def fd_gradient(objective, theta, step: float = 1e-3, bounds=None) -> np.ndarray:
    """Finite-difference gradient of a scalar objective on an m-vector.

    Central differences wherever theta +- step stays inside ``bounds``
    (a sequence of (lo, hi) per coordinate, or None for unbounded); one-sided
    at box faces.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    m = theta.shape[0]
    if step <= 0.0:
        raise ValueError("step must be positive")
    if bounds is not None:
        bounds = [(float(a), float(b)) for a, b in bounds]
        if len(bounds) != m:
            raise ValueError(f"bounds have length {len(bounds)}, expected {m}")
        for j, (a, b) in enumerate(bounds):
            if b - a <= 0.0:
                raise ValueError(f"bounds coordinate {j} has zero width")

    grad = np.empty(m)
    f_center = None
    for j in range(m):
        lo, hi = bounds[j] if bounds is not None else (-np.inf, np.inf)
        up_ok = theta[j] + step <= hi
        down_ok = theta[j] - step >= lo
        if not up_ok and not down_ok:
            raise ValueError(f"box coordinate {j} is narrower than the step {step}")
        if up_ok:
            plus = theta.copy()
            plus[j] += step
            f_plus = objective(plus)
        if down_ok:
            minus = theta.copy()
            minus[j] -= step
            f_minus = objective(minus)
        if up_ok and down_ok:
            grad[j] = (f_plus - f_minus) / (2.0 * step)
        else:
            if f_center is None:
                f_center = objective(theta.copy())
            grad[j] = (f_plus - f_center) / step if up_ok else (f_center - f_minus) / step
    return grad
