"""Numerical-analysis harness on analytic latent models.

Instances with exact linear lift/restriction maps and a linear latent field
(closed-form solution through the matrix exponential) exercise the
framework's numerical claims directly: Runge-Kutta convergence order and
its preservation under a Lipschitz lifting, perturbation stability with an
epsilon-independent constant against the closed-form bound, Gronwall-type
continuous stability, and the plateau-plus-power-law split of the rollout
error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from .model import ButcherTableau

__all__ = [
    "AnalyticLdm",
    "OrderFit",
    "DecompositionFit",
    "scaled_orthogonal_ldm",
    "rk_integrate",
    "lip_increment",
    "measure_convergence_order",
    "measure_zero_stability",
    "zero_stability_bound",
    "measure_continuous_stability",
    "continuous_stability_bound",
    "fit_error_decomposition",
    "error_decomposition_fit",
    "coarse_slope",
    "UnstableField",
    "PoorFit",
]


class UnstableField(ValueError):
    """Latent operator with eigenvalues in the right half plane."""


class PoorFit(RuntimeError):
    """The plateau + power-law model does not explain the measured errors."""


@dataclass
class AnalyticLdm:
    """Exact linear latent model: lift (N_h x n), restrict (n x N_h), field A."""

    lift: np.ndarray
    restrict: np.ndarray
    field: np.ndarray

    def __post_init__(self):
        self.lift = np.asarray(self.lift, dtype=np.float64)
        self.restrict = np.asarray(self.restrict, dtype=np.float64)
        self.field = np.asarray(self.field, dtype=np.float64)
        n = self.field.shape[0]
        if self.lift.shape[1] != n or self.restrict.shape[0] != n:
            raise ValueError("lift/restrict dimensions must match the field")
        resid = self.restrict @ self.lift - np.eye(n)
        if np.abs(resid).max() > 1e-10:
            raise ValueError("restrict o lift must be the identity on the latent space")

    @property
    def n_latent(self) -> int:
        return self.field.shape[0]

    def rhs(self, t: float, z: np.ndarray) -> np.ndarray:
        return self.field @ z

    def exact(self, t: float, z0: np.ndarray) -> np.ndarray:
        return scipy.linalg.expm(self.field * t) @ z0

    def lip_lift(self) -> float:
        return float(np.linalg.norm(self.lift, 2))

    def lip_restrict(self) -> float:
        return float(np.linalg.norm(self.restrict, 2))

    def lip_field(self) -> float:
        return float(np.linalg.norm(self.field, 2))


def scaled_orthogonal_ldm(
    n_high: int, n_latent: int, field: np.ndarray, scale: float = 1.0, seed: int = 0
) -> AnalyticLdm:
    """Lift with prescribed spectral norm `scale`; restriction is its inverse
    on the latent space, so restrict o lift = I holds exactly."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n_high, n_latent)))
    return AnalyticLdm(lift=scale * q, restrict=q.T / scale, field=field)


def rk_integrate(f, z0: np.ndarray, t0: float, dt: float, n_steps: int, tableau: ButcherTableau):
    """Explicit RK trajectory (n_steps+1, n) of dz/dt = f(t, z)."""
    z = np.atleast_1d(np.asarray(z0, dtype=np.float64)).copy()
    out = np.empty((n_steps + 1, z.size))
    out[0] = z
    s = tableau.stages
    ks = [None] * s
    for k in range(n_steps):
        t = t0 + k * dt
        for i in range(s):
            zi = z.copy()
            for j in range(i):
                if tableau.a[i][j]:
                    zi += dt * tableau.a[i][j] * ks[j]
            ks[i] = np.asarray(f(t + tableau.c[i] * dt, zi))
        for i in range(s):
            if tableau.b[i]:
                z = z + dt * tableau.b[i] * ks[i]
        out[k + 1] = z
    return out


def lip_increment(tableau: ButcherTableau, lip_f: float, dt: float) -> float:
    """Lipschitz bound for the RK increment function on an L-Lipschitz field.

    Stage-wise recursion: Lip(k_i) <= L (1 + dt sum_j |a_ij| Lip(k_j)),
    then Lip(Phi) <= sum_i |b_i| Lip(k_i).
    """
    lips = []
    for i in range(tableau.stages):
        inner = sum(abs(tableau.a[i][j]) * lips[j] for j in range(i))
        lips.append(lip_f * (1.0 + dt * inner))
    return float(sum(abs(b) * l for b, l in zip(tableau.b, lips)))


@dataclass
class OrderFit:
    """Log-log slope fit of errors against step sizes."""

    dts: np.ndarray
    errors: np.ndarray
    slope: float
    intercept: float
    residual: float

    def __post_init__(self):
        if len(self.dts) < 4:
            raise ValueError("an order fit needs at least 4 step sizes")
        if np.any(np.diff(self.dts) >= 0):
            raise ValueError("step sizes must decrease strictly")


def _fit_loglog(dts, errors):
    logd = np.log(np.asarray(dts, dtype=np.float64))
    loge = np.log(np.asarray(errors, dtype=np.float64))
    coeffs, res, *_ = np.polyfit(logd, loge, 1, full=True)
    residual = float(np.sqrt(res[0] / logd.size)) if res.size else 0.0
    return float(coeffs[0]), float(coeffs[1]), residual


def measure_convergence_order(
    ldm: AnalyticLdm,
    tableau: ButcherTableau,
    dt_list,
    t_final: float,
    z0: np.ndarray,
) -> OrderFit:
    """Slope of the lifted sup-over-grid error against the exact solution."""
    eigs = np.linalg.eigvals(ldm.field)
    if np.any(eigs.real > 1e-12):
        raise UnstableField(f"field spectrum reaches Re = {eigs.real.max():.3e}")
    errors = []
    for dt in dt_list:
        n_steps = int(round(t_final / dt))
        if abs(n_steps * dt - t_final) > 1e-9 * t_final:
            raise ValueError(f"dt = {dt} does not divide the horizon {t_final}")
        numeric = rk_integrate(ldm.rhs, z0, 0.0, dt, n_steps, tableau)
        sup = 0.0
        for k in range(n_steps + 1):
            exact_k = ldm.exact(k * dt, z0)
            err = np.linalg.norm(ldm.lift @ (numeric[k] - exact_k))
            sup = max(sup, err)
        errors.append(sup)
    slope, intercept, residual = _fit_loglog(dt_list, errors)
    return OrderFit(np.asarray(dt_list, float), np.asarray(errors), slope, intercept, residual)


def measure_zero_stability(
    ldm: AnalyticLdm,
    tableau: ButcherTableau,
    dt: float,
    t_final: float,
    u_high0: np.ndarray,
    eps_list,
    seed: int = 0,
) -> dict[float, float]:
    """Measured constants max_k ||lifted deviation|| / eps per perturbation size.

    The same seeded unit directions (one for the initial state, one per
    step for the increments) are scaled by every eps, so the measured
    constant is eps-independent up to rounding for the linear model.
    """
    n_steps = int(round(t_final / dt))
    rng = np.random.default_rng(seed)
    d_high = rng.standard_normal(u_high0.size)
    d_high /= np.linalg.norm(d_high)
    d_steps = rng.standard_normal((n_steps, ldm.n_latent))
    d_steps /= np.linalg.norm(d_steps, axis=1, keepdims=True)

    def phi(t, z):
        # RK increment of the latent field at (t, z)
        s = tableau.stages
        ks = []
        for i in range(s):
            zi = z.copy()
            for j in range(i):
                if tableau.a[i][j]:
                    zi += dt * tableau.a[i][j] * ks[j]
            ks.append(ldm.rhs(t + tableau.c[i] * dt, zi))
        return sum(b * k for b, k in zip(tableau.b, ks))

    base = np.empty((n_steps + 1, ldm.n_latent))
    base[0] = ldm.restrict @ u_high0
    for k in range(n_steps):
        base[k + 1] = base[k] + dt * phi(k * dt, base[k])

    out = {}
    for eps in eps_list:
        z = ldm.restrict @ (u_high0 + eps * d_high)
        worst = np.linalg.norm(ldm.lift @ (z - base[0]))
        for k in range(n_steps):
            z = z + dt * (phi(k * dt, z) + eps * d_steps[k])
            worst = max(worst, np.linalg.norm(ldm.lift @ (z - base[k + 1])))
        out[eps] = worst / eps if eps > 0 else 0.0
    return out


def zero_stability_bound(ldm: AnalyticLdm, tableau: ButcherTableau, dt: float, t_final: float):
    """Closed-form constant Lip(P') Lip(P) (1 + T) exp(Lip(Phi) T)."""
    lphi = lip_increment(tableau, ldm.lip_field(), dt)
    return ldm.lip_lift() * ldm.lip_restrict() * (1.0 + t_final) * np.exp(lphi * t_final)


def measure_continuous_stability(
    ldm: AnalyticLdm,
    dt: float,
    t_final: float,
    u_high0: np.ndarray,
    eps: float,
    seed: int = 0,
    tableau: ButcherTableau | None = None,
) -> float:
    """Deviation ratio of the continuously perturbed flow, via a fine grid.

    Both systems are integrated with RK4 at dt/64 so the discretization
    error is negligible against the eps-driven deviation; the perturbation
    is a constant unit-direction drift plus an initial-state offset.
    """
    from .model import TABLEAUS

    tb = tableau or TABLEAUS["rk4"]
    if eps == 0.0:
        return 0.0
    fine = dt / 64.0
    n_steps = int(round(t_final / fine))
    rng = np.random.default_rng(seed)
    d_high = rng.standard_normal(u_high0.size)
    d_high /= np.linalg.norm(d_high)
    d_lat = rng.standard_normal(ldm.n_latent)
    d_lat /= np.linalg.norm(d_lat)

    z0 = ldm.restrict @ u_high0
    base = rk_integrate(ldm.rhs, z0, 0.0, fine, n_steps, tb)
    zp0 = ldm.restrict @ (u_high0 + eps * d_high)
    pert = rk_integrate(
        lambda t, z: ldm.rhs(t, z) + eps * d_lat, zp0, 0.0, fine, n_steps, tb
    )
    dev = np.linalg.norm((base - pert) @ ldm.lift.T, axis=1)
    return float(dev.max() / eps)


def continuous_stability_bound(ldm: AnalyticLdm, t_final: float) -> float:
    """Closed-form constant Lip(P') (Lip(P) + T) exp(Lip(f) T)."""
    return ldm.lip_lift() * (ldm.lip_restrict() + t_final) * np.exp(ldm.lip_field() * t_final)


@dataclass
class DecompositionFit:
    """Least-squares fit of err(dt) = c1 + c2 dt^p."""

    dts: np.ndarray
    errors: np.ndarray
    p: int
    c1: float
    c2: float
    residual: float


def fit_error_decomposition(dts, errors, p: int, residual_tol: float = 0.2) -> DecompositionFit:
    """Fit the plateau + power-law split with the order fixed by the tableau.

    Both coefficients are constrained nonnegative (the plateau is an error
    magnitude), so on plateau-free analytic data c1 comes out exactly zero
    instead of absorbing higher-order leakage.  Raises PoorFit when the
    relative fit residual exceeds residual_tol, which is how a wrongly
    assumed order is rejected.
    """
    dts = np.asarray(dts, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    design = np.stack([np.ones_like(dts), dts**p], axis=1)
    coeffs, _ = scipy.optimize.nnls(design, errors)
    fit = design @ coeffs
    residual = float(np.linalg.norm(errors - fit) / np.linalg.norm(errors))
    if residual > residual_tol:
        raise PoorFit(f"relative residual {residual:.3f} exceeds {residual_tol}")
    return DecompositionFit(dts, errors, p, float(coeffs[0]), float(coeffs[1]), residual)


def error_decomposition_fit(error_fn, dt_list, p: int, residual_tol: float = 0.2):
    """Evaluate err(dt) over dt_list and fit the decomposition."""
    errors = [error_fn(dt) for dt in dt_list]
    return fit_error_decomposition(dt_list, errors, p, residual_tol)


def coarse_slope(dts, errors, c1: float) -> float:
    """Log-log slope of (err - c1) over the coarse-side step sizes.

    Points too close to the plateau (err < 2 c1) are excluded; on analytic
    instances c1 is ~0 and every point participates.
    """
    dts = np.asarray(dts, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    floor = 2.0 * max(c1, 0.0)
    mask = errors > max(floor, 1e-300)
    if mask.sum() < 2:
        raise PoorFit("not enough points above the plateau for a slope")
    excess = errors[mask] - max(c1, 0.0)
    slope, _ = np.polyfit(np.log(dts[mask]), np.log(excess), 1)
    return float(slope)
