"""Correlation-function families and geometric anisotropy.

Stationary correlation models used throughout the package:

* ``matern``                 K(r) = 2^(1-nu)/Gamma(nu) * r^nu * BesselK(nu, r)
* ``powered_exponential``    K(r) = exp(-r^nu),  0 < nu < 2
* ``rational_quadratic``     K(r) = (1 + r^2)^-(d/2 + nu)

All families are unit correlations: K(0) = 1, strictly decreasing, K -> 0 at
infinity.  The fractal index ``nu`` is treated as known and fixed; only the
variance and the range/anisotropy parameters are ever estimated.

Anisotropy enters through a symmetric positive definite matrix ``B`` of
inverse-range units: an observation lag ``h`` is evaluated at the scaled
distance ``||B h||_2``.  The isotropic convention is ``B = I / theta``, i.e.
scaled distance ``||h|| / theta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import kv as _scipy_kv

__all__ = [
    "DEFAULT_PHI_INTERVAL",
    "DEFAULT_THETA_BOX",
    "Anisotropy",
    "AnisotropyForm",
    "CovarianceParams",
    "KernelFamily",
    "ParameterSpace",
    "bessel_k",
    "correlation",
    "correlation_lags",
    "diagonal_ranges",
    "full_matrix",
    "isotropic",
    "matern",
    "matern_profile_generic",
    "powered_exponential",
    "radial_profile",
    "rational_quadratic",
    "scaled_distance",
]

# Default parameter boxes; each range coordinate lives in [0.1, 15] and the
# variance in [1e-4, 1e4] unless a caller overrides them.
DEFAULT_THETA_BOX = (0.1, 15.0)
DEFAULT_PHI_INTERVAL = (1e-4, 1e4)

# Below this scaled distance the Matern profile is evaluated by its series
# limit, i.e. exactly 1; avoids the 0^nu * inf indeterminacy at the origin.
MATERN_ZERO_LAG_CUTOFF = 1e-8

_FAMILY_KINDS = ("matern", "powered_exponential", "rational_quadratic")


@dataclass(frozen=True)
class KernelFamily:
    """A correlation family with a fixed fractal index.

    Parameters
    ----------
    kind : str
        One of ``"matern"``, ``"powered_exponential"``,
        ``"rational_quadratic"``.
    nu : float
        Fractal index.  Matern and rational quadratic require ``nu > 0``;
        powered exponential requires ``0 < nu < 2``.
    dim : int, optional
        Ambient dimension; required by the rational quadratic family, whose
        exponent is ``d/2 + nu``.
    """

    kind: str
    nu: float
    dim: int | None = None

    def __post_init__(self):
        if self.kind not in _FAMILY_KINDS:
            raise ValueError(f"unknown kernel family {self.kind!r}")
        if self.kind == "powered_exponential":
            if not 0.0 < self.nu < 2.0:
                raise ValueError(f"powered exponential requires 0 < nu < 2, got {self.nu}")
        elif self.nu <= 0.0:
            raise ValueError(f"{self.kind} requires nu > 0, got {self.nu}")
        if self.kind == "rational_quadratic":
            if self.dim is None or self.dim < 1:
                raise ValueError("rational quadratic requires a positive ambient dimension")

    def profile(self, u):
        """Correlation at scaled distance ``u`` (scalar or array)."""
        return radial_profile(self, u)


def matern(nu: float) -> KernelFamily:
    return KernelFamily("matern", float(nu))


def powered_exponential(nu: float) -> KernelFamily:
    return KernelFamily("powered_exponential", float(nu))


def rational_quadratic(nu: float, dim: int) -> KernelFamily:
    return KernelFamily("rational_quadratic", float(nu), int(dim))


def bessel_k(nu, x):
    """Modified Bessel function of the second kind, BesselK(nu, x).

    Accepts scalars or arrays.  Requires ``nu > 0`` and ``x > 0``; raises
    ``OverflowError`` when the value exceeds the double-precision range
    (which happens for x below roughly 1e-300 at moderate nu).
    """
    nu_arr = np.asarray(nu, dtype=float)
    x_arr = np.asarray(x, dtype=float)
    if np.any(nu_arr <= 0.0) or not np.all(np.isfinite(nu_arr)):
        raise ValueError("bessel_k requires nu > 0")
    if np.any(x_arr <= 0.0) or not np.all(np.isfinite(x_arr)):
        raise ValueError("bessel_k requires x > 0")
    out = _scipy_kv(nu_arr, x_arr)
    if np.any(np.isinf(out)):
        raise OverflowError("bessel_k value exceeds the representable double range")
    if np.isscalar(nu) and np.isscalar(x):
        return float(out)
    return out


def matern_profile_generic(nu: float, u):
    """Matern correlation via the Bessel route, for any nu > 0.

    The half-integer closed forms in ``radial_profile`` are fast paths of
    this same function; this route is kept exposed so the two can be checked
    against each other.
    """
    if nu <= 0.0:
        raise ValueError(f"matern requires nu > 0, got {nu}")
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0.0):
        raise ValueError("scaled distance must be nonnegative")
    out = np.ones_like(u_arr)
    live = u_arr >= MATERN_ZERO_LAG_CUTOFF
    if np.any(live):
        ul = u_arr[live]
        scale = 2.0 ** (1.0 - nu) / math.gamma(nu)
        vals = scale * ul**nu * _scipy_kv(nu, ul)
        # BesselK underflows to 0 for large arguments; the product is then a
        # true zero of the correlation, but guard against inf * 0 noise.
        out[live] = np.where(np.isfinite(vals), vals, 0.0)
    if np.isscalar(u):
        return float(out)
    return out


def _matern_half_integer(nu: float, u: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Closed forms for nu in {0.5, 1.5, 2.5}; ``out`` may alias ``u``."""
    if nu == 0.5:
        poly = None
    elif nu == 1.5:
        poly = 1.0 + u
    else:
        poly = u * u
        poly *= 1.0 / 3.0
        poly += u
        poly += 1.0
    if out is None:
        out = np.empty_like(u)
    np.negative(u, out=out)
    np.exp(out, out=out)
    if poly is not None:
        out *= poly
    return out


def radial_profile(family: KernelFamily, u):
    """Correlation K(u) at scaled distance u >= 0; K(0) = 1 exactly."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0.0):
        raise ValueError("scaled distance must be nonnegative")
    scalar = np.isscalar(u)
    if family.kind == "matern":
        if family.nu in (0.5, 1.5, 2.5):
            out = np.where(
                u_arr < MATERN_ZERO_LAG_CUTOFF,
                1.0,
                _matern_half_integer(family.nu, np.atleast_1d(u_arr)).reshape(u_arr.shape),
            )
        else:
            out = matern_profile_generic(family.nu, u_arr)
    elif family.kind == "powered_exponential":
        out = np.exp(-(u_arr**family.nu))
    else:
        out = (1.0 + u_arr * u_arr) ** -(family.dim / 2.0 + family.nu)
    return float(out) if scalar else out


def _profile_from_sq(family: KernelFamily, u2: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Correlation from squared scaled distance; hot path for pair sums.

    The rational quadratic family never needs the square root; Matern and
    powered exponential take it once here.
    """
    if family.kind == "rational_quadratic":
        if out is None:
            out = np.empty_like(u2)
        np.add(u2, 1.0, out=out)
        np.power(out, -(family.dim / 2.0 + family.nu), out=out)
        return out
    u = np.sqrt(u2)
    return _profile_from_dist(family, u, out=out)


def _profile_from_dist(family: KernelFamily, u: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Correlation from scaled distance, array-only; hot path for pair sums."""
    if family.kind == "matern":
        if family.nu in (0.5, 1.5, 2.5):
            return _matern_half_integer(family.nu, u, out=out)
        return np.asarray(matern_profile_generic(family.nu, u))
    if family.kind == "powered_exponential":
        if out is None:
            out = np.empty_like(u)
        np.power(u, family.nu, out=out)
        np.negative(out, out=out)
        np.exp(out, out=out)
        return out
    if out is None:
        out = np.empty_like(u)
    np.multiply(u, u, out=out)
    out += 1.0
    np.power(out, -(family.dim / 2.0 + family.nu), out=out)
    return out


_ANISO_KINDS = ("isotropic", "diagonal_ranges", "full_matrix")


@dataclass(frozen=True)
class Anisotropy:
    """Geometric anisotropy via the symmetric square root B of the lag metric.

    ``isotropic``        B = I / theta
    ``diagonal_ranges``  B = diag(1/theta, 1/rho)   (two dimensions)
    ``full_matrix``      B given explicitly; must be symmetric positive
                         definite, entries in inverse-range units.
    """

    kind: str
    theta: float | None = None
    rho: float | None = None
    matrix: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if self.kind not in _ANISO_KINDS:
            raise ValueError(f"unknown anisotropy kind {self.kind!r}")
        if self.kind == "isotropic":
            if self.theta is None or self.theta <= 0.0:
                raise ValueError("isotropic range theta must be positive")
        elif self.kind == "diagonal_ranges":
            if self.theta is None or self.theta <= 0.0 or self.rho is None or self.rho <= 0.0:
                raise ValueError("diagonal ranges theta, rho must be positive")
        else:
            if self.matrix is None:
                raise ValueError("full_matrix anisotropy requires a matrix")
            b = np.asarray(self.matrix, dtype=float)
            if b.ndim != 2 or b.shape[0] != b.shape[1]:
                raise ValueError("anisotropy matrix must be square")
            if not np.allclose(b, b.T, rtol=0.0, atol=1e-12):
                raise ValueError("anisotropy matrix must be symmetric")
            if np.linalg.eigvalsh(b).min() <= 0.0:
                raise ValueError("anisotropy matrix must be positive definite")

    @property
    def dim(self) -> int | None:
        """Spatial dimension when it is implied by the parametrization."""
        if self.kind == "diagonal_ranges":
            return 2
        if self.kind == "full_matrix":
            return len(self.matrix)
        return None

    def b_matrix(self, dim: int) -> np.ndarray:
        """The d x d inverse-range matrix B."""
        if self.kind == "isotropic":
            return np.eye(dim) / self.theta
        if self.kind == "diagonal_ranges":
            if dim != 2:
                raise ValueError("diagonal_ranges anisotropy is two dimensional")
            return np.diag([1.0 / self.theta, 1.0 / self.rho])
        b = np.asarray(self.matrix, dtype=float)
        if b.shape[0] != dim:
            raise ValueError(f"anisotropy matrix is {b.shape[0]}d, sites are {dim}d")
        return b

    def describe(self) -> dict:
        """JSON-ready description, used in provenance documents."""
        if self.kind == "isotropic":
            return {"kind": self.kind, "theta": self.theta}
        if self.kind == "diagonal_ranges":
            return {"kind": self.kind, "theta": self.theta, "rho": self.rho}
        return {"kind": self.kind, "matrix": [list(row) for row in self.matrix]}


def isotropic(theta: float) -> Anisotropy:
    return Anisotropy("isotropic", theta=float(theta))


def diagonal_ranges(theta: float, rho: float) -> Anisotropy:
    return Anisotropy("diagonal_ranges", theta=float(theta), rho=float(rho))


def full_matrix(b, eig_bounds: tuple[float, float] | None = None) -> Anisotropy:
    """Anisotropy from an explicit symmetric positive definite matrix.

    ``eig_bounds = (lo, hi)`` optionally asserts that every eigenvalue of B
    lies in the declared interval.
    """
    b = np.asarray(b, dtype=float)
    aniso = Anisotropy("full_matrix", matrix=tuple(tuple(float(v) for v in row) for row in b))
    if eig_bounds is not None:
        eigs = np.linalg.eigvalsh(b)
        lo, hi = eig_bounds
        if eigs.min() < lo or eigs.max() > hi:
            raise ValueError(
                f"anisotropy eigenvalues {eigs} fall outside the declared bounds [{lo}, {hi}]"
            )
    return aniso


def scaled_distance(h, aniso: Anisotropy) -> float:
    """||B h||_2 for a single lag vector h."""
    h = np.asarray(h, dtype=float)
    if h.ndim != 1:
        raise ValueError("lag must be a flat d-vector")
    d = h.shape[0]
    implied = aniso.dim
    if implied is not None and implied != d:
        raise ValueError(f"lag is {d}d but anisotropy is {implied}d")
    if aniso.kind == "isotropic":
        return float(np.linalg.norm(h) / aniso.theta)
    if aniso.kind == "diagonal_ranges":
        return float(math.hypot(h[0] / aniso.theta, h[1] / aniso.rho))
    return float(np.linalg.norm(aniso.b_matrix(d) @ h))


def correlation(h, family: KernelFamily, aniso: Anisotropy) -> float:
    """Correlation of the field at lag h."""
    return float(radial_profile(family, scaled_distance(h, aniso)))


def correlation_lags(lags, family: KernelFamily, aniso: Anisotropy) -> np.ndarray:
    """Vectorized correlation for an (k, d) array of lags."""
    lags = np.asarray(lags, dtype=float)
    if lags.ndim != 2:
        raise ValueError("lags must be a (k, d) array")
    d = lags.shape[1]
    implied = aniso.dim
    if implied is not None and implied != d:
        raise ValueError(f"lags are {d}d but anisotropy is {implied}d")
    scaled = np.linalg.norm(lags @ aniso.b_matrix(d).T, axis=1)
    return np.asarray(radial_profile(family, scaled))


@dataclass(frozen=True)
class AnisotropyForm:
    """A parametrization theta -> Anisotropy used during estimation.

    ``isotropic``        theta = (theta,)                       1 parameter
    ``diagonal_ranges``  theta = (theta, rho)                   2 parameters
    ``full_matrix``      theta = lower triangle of B, row-major d(d+1)/2
    """

    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in _ANISO_KINDS:
            raise ValueError(f"unknown anisotropy form {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        if self.kind == "diagonal_ranges" and self.dim != 2:
            raise ValueError("diagonal_ranges form is two dimensional")

    @property
    def n_params(self) -> int:
        if self.kind == "isotropic":
            return 1
        if self.kind == "diagonal_ranges":
            return 2
        return self.dim * (self.dim + 1) // 2

    def at(self, theta) -> Anisotropy:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.n_params,):
            raise ValueError(f"{self.kind} form expects {self.n_params} parameters, got {theta.shape}")
        if self.kind == "isotropic":
            return isotropic(theta[0])
        if self.kind == "diagonal_ranges":
            return diagonal_ranges(theta[0], theta[1])
        b = np.zeros((self.dim, self.dim))
        idx = 0
        for i in range(self.dim):
            for j in range(i + 1):
                b[i, j] = theta[idx]
                b[j, i] = theta[idx]
                idx += 1
        return full_matrix(b)

    def param_names(self) -> list[str]:
        """Coordinate labels used in reports and CSV headers."""
        if self.kind == "isotropic":
            return ["theta"]
        if self.kind == "diagonal_ranges":
            return ["theta", "rho"]
        return [f"b_{i}{j}" for i in range(self.dim) for j in range(i + 1)]


@dataclass(frozen=True)
class ParameterSpace:
    """Compact boxes for the variance phi and the correlation parameters."""

    theta_box: tuple[tuple[float, float], ...]
    phi_interval: tuple[float, float] = DEFAULT_PHI_INTERVAL

    def __post_init__(self):
        lo, hi = self.phi_interval
        if not 0.0 < lo < hi:
            raise ValueError("phi interval must satisfy 0 < lo < hi")
        for j, (a, b) in enumerate(self.theta_box):
            if not a < b:
                raise ValueError(f"theta box coordinate {j} is degenerate: [{a}, {b}]")

    @classmethod
    def default(cls, n_params: int) -> "ParameterSpace":
        return cls(theta_box=tuple(DEFAULT_THETA_BOX for _ in range(n_params)))

    def contains_theta(self, theta) -> bool:
        theta = np.atleast_1d(theta)
        return all(a <= t <= b for t, (a, b) in zip(theta, self.theta_box))

    def clamp_phi(self, phi: float) -> tuple[float, bool]:
        """Clamp phi into its interval; the flag reports whether it moved."""
        lo, hi = self.phi_interval
        if phi < lo:
            return lo, True
        if phi > hi:
            return hi, True
        return phi, False


@dataclass(frozen=True)
class CovarianceParams:
    """A full covariance parameter point eta = (phi, theta)."""

    phi: float
    theta: tuple[float, ...]

    def __post_init__(self):
        if self.phi <= 0.0:
            raise ValueError("variance phi must be positive")

    @property
    def eta(self) -> np.ndarray:
        return np.concatenate([[self.phi], np.asarray(self.theta, dtype=float)])
