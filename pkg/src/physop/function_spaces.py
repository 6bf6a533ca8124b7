"""Input-function samplers and Latin hypercube point generation.

Three function families on the fixed 101-point sensor grid in [0, 1]:
random sine series, Gaussian random fields with an RBF kernel, and
GRFs multiplied by an envelope a*(x - x^2) that pins the boundary to
zero.  All samplers are deterministic given their seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

N_SENSORS = 101
SENSOR_GRID = np.linspace(0.0, 1.0, N_SENSORS)


class NumericalError(RuntimeError):
    pass


@dataclass
class FunctionSample:
    """One input function discretized at the fixed sensor abscissae."""

    abscissae: np.ndarray
    values: np.ndarray
    family: str
    seed: int

    def __post_init__(self):
        self.abscissae = np.asarray(self.abscissae, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.abscissae.shape != self.values.shape:
            raise ValueError("abscissae/values length mismatch")
        if self.abscissae[0] != 0.0 or self.abscissae[-1] != 1.0:
            raise ValueError("sensor grid must span [0, 1]")
        if np.any(np.diff(self.abscissae) <= 0):
            raise ValueError("abscissae must be strictly increasing")
        if self.family in ("sine", "modified_grf"):
            if abs(self.values[0]) > 1e-12 or abs(self.values[-1]) > 1e-12:
                raise ValueError(f"{self.family} samples must vanish at the boundary")

    def __call__(self, x) -> np.ndarray:
        """Evaluate off-grid by cubic spline through the sensor values."""
        return CubicSpline(self.abscissae, self.values)(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class GrfSpec:
    """RBF kernel k(x1, x2) = exp(-|x1 - x2|^2 / (2 l^2))."""

    length_scale: float = 0.2
    jitter: float = 1e-10

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ValueError("length scale must be positive")
        if self.jitter <= 0:
            raise ValueError("jitter must be positive")

    def kernel(self, x1, x2) -> np.ndarray:
        d = np.subtract.outer(np.asarray(x1, float), np.asarray(x2, float))
        return np.exp(-(d ** 2) / (2.0 * self.length_scale ** 2))


def _grf_cholesky(spec: GrfSpec, grid: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of the jittered covariance.

    The RBF covariance on a dense grid is near-singular for large length
    scales; jitter escalates by 10x up to 1e-6 before giving up.
    """
    cov = spec.kernel(grid, grid)
    jitter = spec.jitter
    while jitter <= 1e-6:
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(grid.size))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError(
        f"covariance not positive definite up to jitter 1e-6 (l={spec.length_scale})")


def sample_sine(seed: int, n_terms: int = 5) -> FunctionSample:
    """f(x) = sum_k A_k sin(pi k x) with standard normal coefficients."""
    if n_terms < 1:
        raise ValueError("need at least one term")
    rng = np.random.default_rng(seed)
    coeff = rng.standard_normal(n_terms)
    k = np.arange(1, n_terms + 1)
    values = np.sin(np.pi * np.outer(SENSOR_GRID, k)) @ coeff
    values[0] = 0.0
    values[-1] = 0.0
    return FunctionSample(SENSOR_GRID.copy(), values, "sine", seed)


def sample_grf(seed: int, spec: GrfSpec) -> FunctionSample:
    """Zero-mean Gaussian process draw, discretized via Cholesky."""
    rng = np.random.default_rng(seed)
    chol = _grf_cholesky(spec, SENSOR_GRID)
    values = chol @ rng.standard_normal(N_SENSORS)
    return FunctionSample(SENSOR_GRID.copy(), values, "grf", seed)


def sample_modified_grf(seed: int, spec: GrfSpec, alpha: float = 8.0) -> FunctionSample:
    """GRF draw times alpha*(x - x^2); alpha = 8 keeps the sine-basis scale."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    base = sample_grf(seed, spec)
    envelope = alpha * (SENSOR_GRID - SENSOR_GRID ** 2)
    return FunctionSample(SENSOR_GRID.copy(), envelope * base.values, "modified_grf", seed)


def sample_family(family: str, seed: int, spec: GrfSpec | None = None,
                  n_terms: int = 5, alpha: float = 8.0) -> FunctionSample:
    if family == "sine":
        return sample_sine(seed, n_terms)
    if family == "grf":
        return sample_grf(seed, spec or GrfSpec())
    if family == "modified_grf":
        return sample_modified_grf(seed, spec or GrfSpec(), alpha)
    raise ValueError(f"unknown function family '{family}'")


@dataclass
class PointSet:
    """Collocation, initial-condition, and boundary points for one step."""

    coll: np.ndarray  # (n_coll, 2) interior (x, t)
    ic_x: np.ndarray  # (n_ic,) x values at t = 0
    bc_t: np.ndarray  # (n_bc,) t values shared by both boundaries

    def __post_init__(self):
        for arr in (self.coll, self.ic_x, self.bc_t):
            if np.any(arr < 0) or np.any(arr > 1):
                raise ValueError("points must lie in [0, 1]")


def _lhs_1d(rng: np.random.Generator, n: int) -> np.ndarray:
    """One point per stratum [i/n, (i+1)/n), shuffled."""
    return rng.permutation((np.arange(n) + rng.uniform(size=n)) / n)


def lhs_points(seed: int, n_coll: int, n_ic: int, n_bc: int) -> PointSet:
    """Fresh Latin hypercube draw (dimensions permuted independently)."""
    if min(n_coll, n_ic, n_bc) < 1:
        raise ValueError("point counts must be positive")
    rng = np.random.default_rng(seed)
    coll = np.column_stack([_lhs_1d(rng, n_coll), _lhs_1d(rng, n_coll)])
    return PointSet(coll, _lhs_1d(rng, n_ic), _lhs_1d(rng, n_bc))
