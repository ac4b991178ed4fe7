"""Full-order reference solvers on uniform grids.

Two benchmark problems, both advanced by implicit Euler:

* 1D viscous Burgers, u_t = nu*u_xx - u*u_x on (x_min, x_max) with zero-flux
  boundaries and Gaussian initial bump; the nonlinear step is solved by
  Newton iteration on a tridiagonal Jacobian.
* 2D advection-diffusion-reaction on the unit square with a rotating
  advection field b(t) = [cos t, sin t], Gaussian source centered at
  (mu2, mu3), reaction coefficient c, zero-flux boundaries, zero initial
  data; each step is one nonsymmetric sparse linear solve.

Spatial discretization is second-order central finite differences; Neumann
conditions enter through ghost-node reflection.  All computation is 64-bit
and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

__all__ = [
    "Grid1D",
    "Grid2D",
    "BurgersConfig",
    "AdrConfig",
    "Trajectory",
    "burgers_initial",
    "solve_burgers",
    "solve_adr",
    "NewtonDivergence",
    "LinearSolveFailure",
]


class NewtonDivergence(RuntimeError):
    """Newton residual above tolerance after the iteration cap."""

    def __init__(self, step: int, residual: float):
        super().__init__(f"Newton failed to converge at time step {step} (residual {residual:.3e})")
        self.step = step
        self.residual = residual


class LinearSolveFailure(RuntimeError):
    """The per-step linear solve did not produce a finite solution."""


@dataclass(frozen=True)
class Grid1D:
    """Uniform 1D grid with nodes at x_min + i*spacing."""

    x_min: float = -10.0
    x_max: float = 10.0
    n_points: int = 1024

    def __post_init__(self):
        if self.n_points < 3:
            raise ValueError("n_points must be >= 3")
        if self.x_max <= self.x_min:
            raise ValueError("x_max must exceed x_min")

    @property
    def spacing(self) -> float:
        return (self.x_max - self.x_min) / (self.n_points - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_points)


@dataclass(frozen=True)
class Grid2D:
    """Uniform grid on the unit square, n_side nodes per side."""

    n_side: int = 32

    def __post_init__(self):
        if self.n_side < 3:
            raise ValueError("n_side must be >= 3")

    @property
    def spacing(self) -> float:
        return 1.0 / (self.n_side - 1)

    @property
    def n_dofs(self) -> int:
        return self.n_side**2

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        s = np.linspace(0.0, 1.0, self.n_side)
        return np.meshgrid(s, s, indexing="ij")


@dataclass(frozen=True)
class BurgersConfig:
    nu: float
    t_final: float = 30.0
    n_steps: int = 1000
    newton_tol: float = 1e-10
    newton_max_iter: int = 25

    def __post_init__(self):
        if self.nu <= 0 or self.t_final <= 0 or self.n_steps < 1:
            raise ValueError("require nu > 0, t_final > 0, n_steps >= 1")


@dataclass(frozen=True)
class AdrConfig:
    mu: tuple[float, float, float]
    c: float = 1.0
    t_final: float = 10.0 * np.pi
    n_steps: int = 1000
    source_amplitude: float = 10.0
    source_width: float = 0.07

    def __post_init__(self):
        mu1, mu2, mu3 = self.mu
        if mu1 <= 0:
            raise ValueError("diffusivity mu1 must be positive")
        if not (0.0 < mu2 < 1.0 and 0.0 < mu3 < 1.0):
            raise ValueError("source center (mu2, mu3) must lie inside the unit square")
        if self.t_final <= 0 or self.n_steps < 1:
            raise ValueError("require t_final > 0, n_steps >= 1")


@dataclass
class Trajectory:
    """One solution history: states (N_h, N_t+1), times, parameter vector."""

    states: np.ndarray
    times: np.ndarray
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        self.params = np.atleast_1d(np.asarray(self.params, dtype=np.float64))
        if self.states.shape[1] != self.times.shape[0]:
            raise ValueError("states column count must equal times length")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory contains non-finite entries")

    @property
    def n_dofs(self) -> int:
        return self.states.shape[0]

    @property
    def n_times(self) -> int:
        return self.states.shape[1]


def burgers_initial(grid: Grid1D) -> np.ndarray:
    """Gaussian bump exp(-x^2) sampled at the grid nodes."""
    x = grid.nodes
    return np.exp(-x * x)


def _burgers_operators(grid: Grid1D):
    """Tridiagonal bands of the second/first derivative with ghost reflection.

    Bands are (upper, main, lower) aligned for scipy.linalg.solve_banded.
    At boundaries the reflected ghost node doubles the inner neighbor in the
    second derivative and cancels the first derivative.
    """
    n, h = grid.n_points, grid.spacing
    d2_main = np.full(n, -2.0) / h**2
    d2_up = np.ones(n) / h**2
    d2_lo = np.ones(n) / h**2
    d2_up[1] = 2.0 / h**2  # row 0 upper neighbor counted twice
    d2_lo[-2] = 2.0 / h**2  # row n-1 lower neighbor counted twice
    d1_up = np.full(n, 0.5) / h
    d1_lo = np.full(n, -0.5) / h
    d1_up[1] = 0.0  # boundary rows: centered difference of reflected data is 0
    d1_lo[-2] = 0.0
    return d2_up, d2_main, d2_lo, d1_up, d1_lo


def _apply_tridiag(up, main, lo, v):
    out = main * v
    out[:-1] += up[1:] * v[1:]
    out[1:] += lo[:-1] * v[:-1]
    return out


def solve_burgers(cfg: BurgersConfig, grid: Grid1D) -> Trajectory:
    """Implicit-Euler Burgers solve; Newton with analytic Jacobian per step."""
    dt = cfg.t_final / cfg.n_steps
    n = grid.n_points
    d2_up, d2_main, d2_lo, d1_up, d1_lo = _burgers_operators(grid)

    states = np.empty((n, cfg.n_steps + 1))
    states[:, 0] = burgers_initial(grid)
    ab = np.empty((3, n))

    zeros = np.zeros(n)
    u = states[:, 0].copy()
    for step in range(1, cfg.n_steps + 1):
        v = u.copy()
        converged = False
        residual = np.inf
        for _ in range(cfg.newton_max_iter):
            d1v = _apply_tridiag(d1_up, zeros, d1_lo, v)
            d2v = _apply_tridiag(d2_up, d2_main, d2_lo, v)
            f = v - u - dt * (cfg.nu * d2v - v * d1v)
            residual = np.abs(f).max()
            if residual <= cfg.newton_tol:
                converged = True
                break
            # J = I - dt*(nu*D2 - diag(D1 v) - diag(v)*D1), tridiagonal.
            # Band row k of ab holds diagonal k of J in solve_banded layout:
            # ab[0, j] = J[j-1, j] (upper), ab[1, j] = J[j, j], ab[2, j] = J[j+1, j].
            ab[0, 1:] = -dt * (cfg.nu * d2_up[1:] - v[:-1] * d1_up[1:])
            ab[1] = 1.0 - dt * (cfg.nu * d2_main - d1v)
            ab[2, :-1] = -dt * (cfg.nu * d2_lo[:-1] - v[1:] * d1_lo[:-1])
            delta = scipy.linalg.solve_banded((1, 1), ab, f)
            v -= delta
        if not converged:
            raise NewtonDivergence(step, residual)
        u = v
        states[:, step] = u

    times = np.linspace(0.0, cfg.t_final, cfg.n_steps + 1)
    return Trajectory(states, times, np.array([cfg.nu]))


def _adr_operators(grid: Grid2D):
    """Sparse Laplacian and first-derivative operators with ghost reflection."""
    s = grid.n_side
    h = grid.spacing

    def second_1d():
        main = np.full(s, -2.0)
        off = np.ones(s - 1)
        m = scipy.sparse.diags([off, main, off], [-1, 0, 1], format="lil")
        m[0, 1] = 2.0
        m[-1, -2] = 2.0
        return (m / h**2).tocsr()

    def first_1d():
        off = np.full(s - 1, 0.5)
        m = scipy.sparse.diags([-off, off], [-1, 1], format="lil")
        m[0, 1] = 0.0
        m[-1, -2] = 0.0
        return (m / h).tocsr()

    eye = scipy.sparse.identity(s, format="csr")
    lap = scipy.sparse.kron(second_1d(), eye) + scipy.sparse.kron(eye, second_1d())
    dx = scipy.sparse.kron(first_1d(), eye)
    dy = scipy.sparse.kron(eye, first_1d())
    return lap.tocsr(), dx.tocsr(), dy.tocsr()


def adr_source(cfg: AdrConfig, grid: Grid2D) -> np.ndarray:
    """Gaussian forcing centered at (mu2, mu3), flattened x-major."""
    xx, yy = grid.meshgrid()
    _, mu2, mu3 = cfg.mu
    w2 = cfg.source_width**2
    f = cfg.source_amplitude * np.exp(-(((xx - mu2) ** 2) + (yy - mu3) ** 2) / w2)
    return f.ravel()


def solve_adr(cfg: AdrConfig, grid: Grid2D, source: np.ndarray | None = None) -> Trajectory:
    """Implicit-Euler ADR solve; one sparse direct solve per step.

    The advection matrix changes every step through b(t), so the operator is
    re-assembled and factored each time.  ``source`` overrides the standard
    Gaussian forcing (used by steady-state and linearity checks).
    """
    dt = cfg.t_final / cfg.n_steps
    n = grid.n_dofs
    lap, dx, dy = _adr_operators(grid)
    mu1 = cfg.mu[0]
    f = adr_source(cfg, grid) if source is None else np.asarray(source, dtype=np.float64)
    if f.shape != (n,):
        raise ValueError(f"source must have shape ({n},)")

    base = scipy.sparse.identity(n, format="csr") * (1.0 / dt + cfg.c) - mu1 * lap

    states = np.empty((n, cfg.n_steps + 1))
    states[:, 0] = 0.0
    u = states[:, 0].copy()
    times = np.linspace(0.0, cfg.t_final, cfg.n_steps + 1)
    for step in range(1, cfg.n_steps + 1):
        t_new = times[step]
        m = base + np.cos(t_new) * dx + np.sin(t_new) * dy
        u = scipy.sparse.linalg.spsolve(m.tocsc(), u / dt + f)
        if not np.all(np.isfinite(u)):
            raise LinearSolveFailure(f"non-finite solution at step {step}")
        states[:, step] = u

    return Trajectory(states, times, np.asarray(cfg.mu))


def refine_in_time(cfg, factor: int):
    """Same problem with factor-times more implicit-Euler steps."""
    if isinstance(cfg, BurgersConfig):
        return BurgersConfig(
            nu=cfg.nu,
            t_final=cfg.t_final,
            n_steps=cfg.n_steps * factor,
            newton_tol=cfg.newton_tol,
            newton_max_iter=cfg.newton_max_iter,
        )
    if isinstance(cfg, AdrConfig):
        return AdrConfig(
            mu=cfg.mu,
            c=cfg.c,
            t_final=cfg.t_final,
            n_steps=cfg.n_steps * factor,
            source_amplitude=cfg.source_amplitude,
            source_width=cfg.source_width,
        )
    raise TypeError(f"unsupported config type {type(cfg)!r}")
