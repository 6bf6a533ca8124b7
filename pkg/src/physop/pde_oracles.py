"""Reference finite-difference solvers for the two benchmark systems.

Reaction-diffusion:  u_t = D u_xx + K u^2 + f(x),  zero IC, zero Dirichlet BC.
Viscous Burgers:     u_t = nu u_xx - u u_x,        IC u(x,0) = f(x), periodic BC.

Both march an internal step of 1e-3 with Crank-Nicolson diffusion and
second-order Adams-Bashforth for the explicit nonlinear term, then store
every 10th slice onto the 101 x 101 output grid over (x, t) in [0, 1]^2.
The implicit diffusion keeps the scheme stable across the whole
coefficient range used for parameter identification, and the pairing is
second order in time, which the Richardson study pins down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .function_spaces import FunctionSample

N_X = 101
N_T = 101
DX = 0.01
DT_OUTPUT = 0.01
DT_INTERNAL = 1e-3
DIVERGENCE_LIMIT = 1e6


class SolverDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SystemParams:
    """PDE coefficients; only the ones a system uses need to be set."""

    d: float | None = None   # diffusion (reaction-diffusion)
    k: float | None = None   # reaction (reaction-diffusion)
    nu: float | None = None  # viscosity (Burgers)

    def __post_init__(self):
        for name, val in (("d", self.d), ("k", self.k), ("nu", self.nu)):
            if val is not None and val <= 0:
                raise ValueError(f"{name} must be positive, got {val}")


@dataclass
class FieldGrid:
    """Solution u[i, j] on the 101 x 101 (x, t) grid."""

    values: np.ndarray
    params: SystemParams
    system: str  # "rd" | "burgers"
    input_sample: FunctionSample | None = None
    dx: float = DX
    dt: float = DT_OUTPUT

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (N_X, N_T):
            raise ValueError(f"expected {(N_X, N_T)} grid, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")
        if self.system == "rd":
            if np.any(self.values[0] != 0.0) or np.any(self.values[-1] != 0.0):
                raise ValueError("reaction-diffusion boundaries must be zero")
            if np.any(self.values[:, 0] != 0.0):
                raise ValueError("reaction-diffusion initial slice must be zero")
        elif self.system == "burgers":
            if np.any(self.values[0] != self.values[-1]):
                raise ValueError("periodic field must repeat its first row")
        elif self.system not in ("rd_rhs", "burgers_rhs"):
            # *_rhs grids hold a PDE right-hand side, where the solution's
            # boundary identities need not apply.
            raise ValueError(f"unknown system '{self.system}'")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, N_X)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, N_T)


def _check_bounded(u: np.ndarray) -> None:
    if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > DIVERGENCE_LIMIT:
        raise SolverDivergenceError("solution magnitude exceeded 1e6; solver diverged")


def solve_reaction_diffusion(f: FunctionSample, params: SystemParams,
                             dt_internal: float = DT_INTERNAL) -> FieldGrid:
    """March the reaction-diffusion system from a zero initial state."""
    if params.d is None or params.k is None:
        raise ValueError("reaction-diffusion needs both d and k")
    if f.values.size != N_X:
        raise ValueError("source term must live on the 101-point grid")
    substeps = max(1, round(DT_OUTPUT / dt_internal))
    dt = DT_OUTPUT / substeps
    r = params.d * dt / DX ** 2

    # Crank-Nicolson on the 99 interior nodes (Dirichlet ends are zero).
    n = N_X - 2
    upper = np.full(n, -0.5 * r)
    diag = np.full(n, 1.0 + r)
    ab = np.vstack([np.r_[0.0, upper[:-1]], diag])
    chol = cholesky_banded(ab)

    src = f.values[1:-1]
    u = np.zeros(n)
    prev_expl = None
    out = np.zeros((N_X, N_T))
    for j in range(1, N_T):
        for _ in range(substeps):
            lap = np.empty(n)
            lap[1:-1] = u[2:] - 2.0 * u[1:-1] + u[:-2]
            lap[0] = u[1] - 2.0 * u[0]
            lap[-1] = u[-2] - 2.0 * u[-1]
            expl = params.k * u * u + src
            if prev_expl is None:
                ab = expl  # Euler start-up step
            else:
                ab = 1.5 * expl - 0.5 * prev_expl
            prev_expl = expl
            rhs = u + 0.5 * r * lap + dt * ab
            u = cho_solve_banded((chol, False), rhs)
        _check_bounded(u)
        out[1:-1, j] = u
    return FieldGrid(out, params, "rd", f)


def solve_burgers(f: FunctionSample, params: SystemParams,
                  dt_internal: float = DT_INTERNAL) -> FieldGrid:
    """March viscous Burgers with a periodic domain of 100 unique nodes."""
    if params.nu is None:
        raise ValueError("Burgers needs nu")
    if f.values.size != N_X:
        raise ValueError("initial condition must live on the 101-point grid")
    substeps = max(1, round(DT_OUTPUT / dt_internal))
    dt = DT_OUTPUT / substeps
    r = params.nu * dt / DX ** 2

    n = N_X - 1  # unique nodes; node 100 mirrors node 0
    u = f.values[:n].copy()
    u[0] = 0.5 * (f.values[0] + f.values[-1])  # enforce periodic identification

    # (I - r/2 L) is circulant; solve through its Fourier symbol.
    col = np.zeros(n)
    col[0] = 1.0 + r
    col[1] = -0.5 * r
    col[-1] = -0.5 * r
    symbol = np.fft.rfft(col)

    out = np.zeros((N_X, N_T))
    out[:n, 0] = u
    out[-1, 0] = u[0]
    prev_adv = None
    for j in range(1, N_T):
        for _ in range(substeps):
            lap = np.roll(u, -1) - 2.0 * u + np.roll(u, 1)
            # conservative advection: d(u^2/2)/dx with central differences
            flux = 0.5 * u * u
            adv = (np.roll(flux, -1) - np.roll(flux, 1)) / (2.0 * DX)
            ab = adv if prev_adv is None else 1.5 * adv - 0.5 * prev_adv
            prev_adv = adv
            rhs = u + 0.5 * r * lap - dt * ab
            u = np.fft.irfft(np.fft.rfft(rhs) / symbol, n)
        _check_bounded(u)
        out[:n, j] = u
        out[-1, j] = u[0]
    return FieldGrid(out, params, "burgers", f)


def _d1_x(values: np.ndarray, periodic: bool) -> np.ndarray:
    out = np.empty_like(values)
    out[1:-1] = (values[2:] - values[:-2]) / (2.0 * DX)
    if periodic:
        # row 100 repeats row 0; neighbours of node 0 are 1 and 99
        out[0] = (values[1] - values[-2]) / (2.0 * DX)
        out[-1] = out[0]
    else:
        out[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * DX)
        out[-1] = (3.0 * values[-1] - 4.0 * values[-2] + values[-3]) / (2.0 * DX)
    return out


def _d2_x(values: np.ndarray, periodic: bool) -> np.ndarray:
    out = np.empty_like(values)
    out[1:-1] = (values[2:] - 2.0 * values[1:-1] + values[:-2]) / DX ** 2
    if periodic:
        out[0] = (values[1] - 2.0 * values[0] + values[-2]) / DX ** 2
        out[-1] = out[0]
    else:
        out[0] = (2.0 * values[0] - 5.0 * values[1] + 4.0 * values[2] - values[3]) / DX ** 2
        out[-1] = (2.0 * values[-1] - 5.0 * values[-2] + 4.0 * values[-3] - values[-4]) / DX ** 2
    return out


def true_hidden_term(grid: FieldGrid, params: SystemParams, system: str) -> FieldGrid:
    """Ground-truth right-hand side, evaluated by central differences.

    For reaction-diffusion this is D u_xx + K u^2; for Burgers it is
    nu u_xx - u u_x.  Used to judge how well a learned hidden-physics
    network matches the actual dynamics.
    """
    u = grid.values
    if system == "rd":
        n = params.d * _d2_x(u, periodic=False) + params.k * u * u
    elif system == "burgers":
        n = params.nu * _d2_x(u, periodic=True) - u * _d1_x(u, periodic=True)
    else:
        raise ValueError(f"unknown system '{system}'")
    return FieldGrid(n, params, f"{system}_rhs", grid.input_sample)
