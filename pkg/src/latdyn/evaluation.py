"""Rollout testing, relative-error indicators, and experiment sweeps.

Testing follows the IVP structure: normalize the initial snapshot,
optionally add a Gaussian perturbation, encode, integrate the latent
dynamics over the requested time grid, decode, and map back to original
units.  Error indicators are relative L2 quantities; snapshots with zero
norm (e.g. a zero initial condition) are excluded by starting the sums at
the first nonzero-norm index, and reports record that offset.

Three sweeps probe the trained model: time-grid refinement (accuracy under
finer-than-training resolution plus the plateau/power-law error split),
initial-value perturbations of growing magnitude, and the error across
train/interpolation/extrapolation parameter sets.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dataset import Normalizer
from .model import LdmModel

__all__ = [
    "ErrorReport",
    "SweepConfig",
    "test",
    "eps_rel_avg",
    "eps_rel_mu",
    "eps_rel_t",
    "eps_rel_vec",
    "eps_rel_sup",
    "time_continuity_sweep",
    "parameter_sweep",
    "zero_stability_sweep",
    "ZeroNormSnapshot",
    "NonFiniteOutput",
]


class ZeroNormSnapshot(ValueError):
    """A truth snapshot with zero norm makes the relative error undefined."""


class NonFiniteOutput(RuntimeError):
    """A rollout produced NaN or infinity."""


@dataclass
class ErrorReport:
    """Rows of (param_id, split, indicator, time_or_window, value)."""

    rows: list[tuple] = field(default_factory=list)

    def add(self, param_id, split: str, indicator: str, key, value: float) -> None:
        v = float(value)
        if not (np.isfinite(v) and v >= 0.0):
            raise ValueError(f"indicator values must be finite and nonnegative, got {v}")
        self.rows.append((param_id, split, indicator, key, v))

    def values(self, indicator: str | None = None, split: str | None = None) -> np.ndarray:
        out = [
            r[4]
            for r in self.rows
            if (indicator is None or r[2] == indicator) and (split is None or r[1] == split)
        ]
        return np.array(out)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param_id", "split", "indicator", "time_or_window", "value"])
            w.writerows(self.rows)


@dataclass(frozen=True)
class SweepConfig:
    dt_factors: tuple[float, ...] = (1, 2, 4, 8)
    noise_levels: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2)
    rk_orders: tuple[int, ...] = (2,)

    def __post_init__(self):
        if any(f < 1 for f in self.dt_factors):
            raise ValueError("dt refinement factors must be >= 1")
        if any(not (0.0 <= s <= 0.2) for s in self.noise_levels):
            raise ValueError("noise levels are fractions of the data range in [0, 0.2]")


def test(
    model: LdmModel,
    norm: Normalizer,
    params_matrix: np.ndarray,
    initial_states: np.ndarray,
    times: np.ndarray,
    perturbation_sigma: float = 0.0,
    seed: int = 0,
) -> np.ndarray:
    """Rollout predictions for a batch of parameter instances.

    params_matrix is (n_mu, n_inst); initial_states (N_h, n_inst) in
    original units.  perturbation_sigma is a fraction of the normalized
    data range: noise N(0, (2 sigma)^2 I) is added to the normalized
    initial state.  Returns (N_h, n_times, n_inst) in original units.
    """
    if perturbation_sigma < 0:
        raise ValueError("perturbation_sigma must be nonnegative")
    params_matrix = np.atleast_2d(np.asarray(params_matrix, dtype=np.float64))
    n_inst = params_matrix.shape[1]
    rng = np.random.default_rng(seed)
    out = np.empty((initial_states.shape[0], len(times), n_inst))
    for j in range(n_inst):
        u0n = norm.normalize(initial_states[:, j : j + 1])[:, 0]
        if perturbation_sigma > 0.0:
            u0n = u0n + rng.normal(
                0.0, norm.normalized_sigma(perturbation_sigma), size=u0n.shape
            )
        pred_n = model.forward(u0n, times, params_matrix[:, j])
        out[:, :, j] = norm.denormalize(pred_n)
    if not np.all(np.isfinite(out)):
        raise NonFiniteOutput("prediction contains non-finite entries")
    return out


# ---------------------------------------------------------------------------
# relative-error indicators
# ---------------------------------------------------------------------------


def _column_norms(truth: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(truth, axis=0)
    if np.any(norms == 0.0):
        raise ZeroNormSnapshot("truth snapshot with zero norm")
    return norms


def eps_rel_mu(truth: np.ndarray, pred: np.ndarray) -> float:
    """Relative error averaged over the time steps of one trajectory."""
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    norms = _column_norms(truth)
    return float((np.linalg.norm(truth - pred, axis=0) / norms).mean())


def eps_rel_avg(truths: list[np.ndarray], preds: list[np.ndarray]) -> float:
    """Relative error averaged over parameter instances and time steps."""
    total = 0.0
    count = 0
    for truth, pred in zip(truths, preds):
        if truth.shape != pred.shape:
            raise ValueError(f"shape mismatch: {truth.shape} vs {pred.shape}")
        norms = _column_norms(truth)
        total += float((np.linalg.norm(truth - pred, axis=0) / norms).sum())
        count += norms.size
    return total / count


def eps_rel_t(truth: np.ndarray, pred: np.ndarray, t_index: int) -> float:
    """Pointwise-in-time relative error at one grid index."""
    u = truth[:, t_index]
    norm_u = np.linalg.norm(u)
    if norm_u == 0.0:
        raise ZeroNormSnapshot(f"zero-norm snapshot at index {t_index}")
    return float(np.linalg.norm(u - pred[:, t_index]) / norm_u)


def eps_rel_vec(truth: np.ndarray, pred: np.ndarray, t_index: int) -> np.ndarray:
    """Entrywise absolute residual over the snapshot norm at one index."""
    u = truth[:, t_index]
    norm_u = np.linalg.norm(u)
    if norm_u == 0.0:
        raise ZeroNormSnapshot(f"zero-norm snapshot at index {t_index}")
    return np.abs(u - pred[:, t_index]) / norm_u

def eps_rel_sup(truth: np.ndarray, pred: np.ndarray, start: int = 0) -> float:
    """Supremum of the pointwise relative error over the time grid."""
    norms = _column_norms(truth[:, start:])
    errs = np.linalg.norm(truth[:, start:] - pred[:, start:], axis=0) / norms
    return float(errs.max())


def first_nonzero_index(truth: np.ndarray) -> int:
    """First column with nonzero norm; relative sums start here."""
    norms = np.linalg.norm(truth, axis=0)
    nz = np.flatnonzero(norms > 0.0)
    if nz.size == 0:
        raise ZeroNormSnapshot("every snapshot has zero norm")
    return int(nz[0])


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def time_continuity_sweep(
    model: LdmModel,
    norm: Normalizer,
    fom_solver,
    mu: np.ndarray,
    dt_factors,
    base_times: np.ndarray,
) -> ErrorReport:
    """Error under time-grid refinement against freshly computed references.

    For each factor r the model rolls out on the grid with step dt*/r over
    the same horizon and is compared (eps_rel_sup) with a reference computed
    by `fom_solver(mu, n_steps)` on exactly that grid, so the comparison
    never interpolates reference data.
    """
    report = ErrorReport()
    n_base = len(base_times) - 1
    t_final = base_times[-1] - base_times[0]
    for r in dt_factors:
        n_steps = int(round(n_base * r))
        truth = fom_solver(mu, n_steps)
        times = np.linspace(base_times[0], base_times[-1], n_steps + 1)
        start = first_nonzero_index(truth)
        pred = test(model, norm, np.asarray(mu)[:, None], truth[:, :1], times)[:, :, 0]
        value = eps_rel_sup(truth, pred, start=start)
        report.add(tuple(np.atleast_1d(mu)), "test", "eps_rel_sup", f"dt_factor={r}", value)
        report.add(
            tuple(np.atleast_1d(mu)),
            "test",
            "dt",
            f"dt_factor={r}",
            t_final / n_steps,
        )
    return report


def parameter_sweep(
    model: LdmModel,
    norm: Normalizer,
    fom_solver,
    param_lists: dict[str, np.ndarray],
    times: np.ndarray,
    n_steps: int,
) -> ErrorReport:
    """eps_rel_mu across labeled parameter sets (train/interp/extrap)."""
    report = ErrorReport()
    for split, params in param_lists.items():
        for row in np.atleast_2d(params):
            truth_full = fom_solver(row, n_steps)
            truth = truth_full[:, : len(times)]
            start = first_nonzero_index(truth)
            pred = test(model, norm, row[:, None], truth[:, :1], times)[:, :, 0]
            value = eps_rel_mu(truth[:, start:], pred[:, start:])
            report.add(tuple(row), split, "eps_rel_mu", "all", value)
    return report


def zero_stability_sweep(
    model: LdmModel,
    norm: Normalizer,
    mu: np.ndarray,
    initial_state: np.ndarray,
    truth: np.ndarray,
    times: np.ndarray,
    noise_levels,
    seed: int = 0,
) -> tuple[ErrorReport, dict[float, float]]:
    """Perturbed rollouts vs the unperturbed one and vs the reference.

    Returns the report of eps_rel_t curves per noise level plus the
    deviation ratios max_t ||pred_sigma - pred_0|| / E||delta||, whose
    stability across noise levels is the empirical zero-stability constant.
    """
    base = test(model, norm, np.asarray(mu)[:, None], initial_state[:, None], times)[:, :, 0]
    start = first_nonzero_index(truth)
    report = ErrorReport()
    ratios: dict[float, float] = {}
    n_h = initial_state.shape[0]
    for sigma in noise_levels:
        pred = test(
            model,
            norm,
            np.asarray(mu)[:, None],
            initial_state[:, None],
            times,
            perturbation_sigma=sigma,
            seed=seed,
        )[:, :, 0]
        for idx in range(start, truth.shape[1]):
            report.add(
                tuple(np.atleast_1d(mu)),
                "test",
                "eps_rel_t",
                f"sigma={sigma};t={times[idx]:.6g}",
                eps_rel_t(truth, pred, idx),
            )
        if sigma > 0.0:
            # expected L2 size of the injected noise, in original units
            half_range = 0.5 * float((norm.maximum - norm.minimum).max())
            delta_norm = norm.normalized_sigma(sigma) * np.sqrt(n_h) * half_range
            deviation = np.linalg.norm(pred - base, axis=0).max()
            ratios[sigma] = float(deviation / delta_norm)
    return report, ratios
