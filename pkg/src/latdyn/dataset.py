"""Snapshot assembly, splitting, normalization, and sub-trajectory windows.

Snapshots are stored column-wise in a matrix ``s_h`` (N_h x N_s), parameter-
major and time-minor, with the matching time/parameter labels stacked in
``m`` ((n_mu + 1) x N_s, parameter rows on top, time row at the bottom).
Training windows are enumerated lazily: a ``WindowSource`` materializes
batches of sliding windows on demand so production-sized datasets never
expand into a dense window tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fom import Trajectory

__all__ = [
    "SnapshotSet",
    "SplitSpec",
    "Normalizer",
    "SubTrajectoryBatch",
    "WindowSource",
    "assemble",
    "split",
    "parameter_design",
    "make_subtrajectories",
    "ShapeMismatchError",
    "DegenerateRange",
    "EmptySplit",
    "WindowTooLong",
]


class ShapeMismatchError(ValueError):
    """Trajectories disagree in size, grid, or parameter dimension."""


class DegenerateRange(ValueError):
    """Normalization statistics with max == min."""


class EmptySplit(ValueError):
    """A requested split contains no snapshots."""


class WindowTooLong(ValueError):
    """Sub-trajectory length exceeds the trajectory length."""


@dataclass
class SnapshotSet:
    """Assembled snapshot matrix with its time/parameter labels."""

    s_h: np.ndarray  # (N_h, N_s)
    m: np.ndarray  # (n_mu + 1, N_s); last row is time
    n_t: int
    n_mu: int

    def __post_init__(self):
        if self.s_h.shape[1] != self.n_t * self.n_mu:
            raise ShapeMismatchError(
                f"N_s = {self.s_h.shape[1]} but n_t*n_mu = {self.n_t * self.n_mu}"
            )
        if self.m.shape != (self.m.shape[0], self.s_h.shape[1]):
            raise ShapeMismatchError("label matrix must have one column per snapshot")

    @property
    def n_dofs(self) -> int:
        return self.s_h.shape[0]

    @property
    def n_params(self) -> int:
        return self.m.shape[0] - 1

    def trajectory_states(self, j: int) -> np.ndarray:
        """States of the j-th parameter instance, (N_h, n_t)."""
        return self.s_h[:, j * self.n_t : (j + 1) * self.n_t]

    def trajectory_times(self, j: int) -> np.ndarray:
        return self.m[-1, j * self.n_t : (j + 1) * self.n_t]

    def trajectory_params(self, j: int) -> np.ndarray:
        return self.m[:-1, j * self.n_t]


@dataclass(frozen=True)
class SplitSpec:
    """Temporal windows [0,t1], (t1,t2], (t2,T] plus the parameter share."""

    alpha: float
    beta: float
    t1: float
    t2: float

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0 and 0.0 < self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in (0, 1]")
        if not (0.0 < self.t1 <= self.t2):
            raise ValueError("require 0 < t1 <= t2")


def assemble(trajectories: list[Trajectory]) -> SnapshotSet:
    """Stack trajectories parameter-major, time-minor."""
    if not trajectories:
        raise ShapeMismatchError("no trajectories")
    first = trajectories[0]
    for tr in trajectories[1:]:
        if tr.states.shape != first.states.shape:
            raise ShapeMismatchError("trajectories differ in state shape")
        if not np.array_equal(tr.times, first.times):
            raise ShapeMismatchError("trajectories differ in time grid")
        if tr.params.shape != first.params.shape:
            raise ShapeMismatchError("trajectories differ in parameter dimension")
    n_t = first.n_times
    n_mu = len(trajectories)
    s_h = np.concatenate([tr.states for tr in trajectories], axis=1)
    labels = np.empty((first.params.size + 1, n_t * n_mu))
    for j, tr in enumerate(trajectories):
        cols = slice(j * n_t, (j + 1) * n_t)
        labels[:-1, cols] = tr.params[:, None]
        labels[-1, cols] = tr.times
    return SnapshotSet(s_h, labels, n_t=n_t, n_mu=n_mu)


@dataclass
class Normalizer:
    """Per-component min-max statistics mapping training data onto [-1, 1].

    Statistics are fit on the training split only; other splits reuse them
    and may land outside [-1, 1].
    """

    minimum: np.ndarray  # (n_components,)
    maximum: np.ndarray

    @classmethod
    def fit(cls, s_h: np.ndarray, n_components: int = 1) -> "Normalizer":
        if s_h.shape[0] % n_components:
            raise ShapeMismatchError("row count must divide evenly into components")
        rows = s_h.reshape(n_components, -1)
        lo = rows.min(axis=1)
        hi = rows.max(axis=1)
        if np.any(hi <= lo):
            raise DegenerateRange("max must exceed min in every component")
        return cls(lo, hi)

    @property
    def n_components(self) -> int:
        return self.minimum.size

    def _expand(self, arr: np.ndarray, n_rows: int) -> np.ndarray:
        per = n_rows // self.n_components
        return np.repeat(arr, per)

    def normalize(self, data: np.ndarray) -> np.ndarray:
        """y = 2 (x - min) / (max - min) - 1, applied per component block."""
        lo = self._expand(self.minimum, data.shape[0])
        hi = self._expand(self.maximum, data.shape[0])
        shape = (-1,) + (1,) * (data.ndim - 1)
        return 2.0 * (data - lo.reshape(shape)) / (hi - lo).reshape(shape) - 1.0

    def denormalize(self, data: np.ndarray) -> np.ndarray:
        lo = self._expand(self.minimum, data.shape[0])
        hi = self._expand(self.maximum, data.shape[0])
        shape = (-1,) + (1,) * (data.ndim - 1)
        return (data + 1.0) / 2.0 * (hi - lo).reshape(shape) + lo.reshape(shape)

    def normalized_sigma(self, fraction_of_range: float) -> float:
        """Noise std in normalized units for a given fraction of the range."""
        return fraction_of_range * 2.0


def _select_columns(snap: SnapshotSet, param_idx: np.ndarray, time_mask: np.ndarray) -> SnapshotSet:
    n_t_new = int(time_mask.sum())
    cols = np.concatenate(
        [np.flatnonzero(time_mask) + j * snap.n_t for j in param_idx]
    ) if param_idx.size else np.zeros(0, dtype=int)
    return SnapshotSet(
        snap.s_h[:, cols], snap.m[:, cols], n_t=n_t_new, n_mu=int(param_idx.size)
    )


def validation_param_indices(n_mu: int, beta: float) -> np.ndarray:
    """Deterministic strided hold-out: every round(1/(1-beta))-th instance.

    Falls back to the last instance when the stride exceeds the instance
    count, so any beta < 1 yields a nonempty validation set.
    """
    if beta >= 1.0:
        return np.zeros(0, dtype=int)
    stride = max(2, round(1.0 / (1.0 - beta)))
    idx = np.arange(n_mu)[stride - 1 :: stride]
    if idx.size == 0 and n_mu >= 2:
        idx = np.array([n_mu - 1])
    return idx


def split(snap: SnapshotSet, spec: SplitSpec) -> tuple[SnapshotSet, SnapshotSet, SnapshotSet]:
    """Partition into (train, validation, time_extrapolation) sets.

    Train holds the training parameters over [0, t1]; validation the held-out
    parameters over (t1, t2]; time-extrapolation all parameters over (t2, T].
    Raises EmptySplit when the train or validation part comes out empty.
    """
    times = snap.trajectory_times(0)
    eps = 1e-12 * max(1.0, abs(times[-1]))
    train_mask = times <= spec.t1 + eps
    val_mask = (times > spec.t1 + eps) & (times <= spec.t2 + eps)
    extrap_mask = times > spec.t2 + eps

    val_idx = validation_param_indices(snap.n_mu, spec.beta)
    train_idx = np.setdiff1d(np.arange(snap.n_mu), val_idx)

    if train_idx.size == 0 or not train_mask.any():
        raise EmptySplit("training split is empty")
    if val_idx.size == 0 or not val_mask.any():
        raise EmptySplit("validation split is empty")

    train = _select_columns(snap, train_idx, train_mask)
    validation = _select_columns(snap, val_idx, val_mask)
    extrap = _select_columns(snap, np.arange(snap.n_mu), extrap_mask)
    return train, validation, extrap


def _midpoints(values: np.ndarray) -> np.ndarray:
    return 0.5 * (values[:-1] + values[1:])


def parameter_design(
    problem: str, desk_divisor: int = 1, seed: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Train/interpolation/extrapolation parameter sets for a benchmark.

    Burgers: uniform viscosities on [5e-3, 5e-2] for training, their midpoints
    for interpolation, and uniform points on (5e-2, 1] for extrapolation.
    ADR: a uniform grid on [2e-2, 5e-2] x [0.4, 0.6]^2, its per-axis midpoint
    grid, and uniform samples from the full box minus the training box.
    ``desk_divisor`` scales every count down proportionally.

    Returns arrays of shape (count, n_mu).
    """
    if desk_divisor < 1:
        raise ValueError("desk_divisor must be >= 1")
    if problem == "burgers":
        n_train = max(2, round(100 / desk_divisor))
        n_extrap = max(1, round(50 / desk_divisor))
        train = np.linspace(5e-3, 5e-2, n_train)
        interp = _midpoints(train)
        # equally spaced over (5e-2, 1], right endpoint included
        extrap = 5e-2 + (1.0 - 5e-2) * np.arange(1, n_extrap + 1) / n_extrap
        return train[:, None], interp[:, None], extrap[:, None]
    if problem == "adr":
        per_axis = max(2, round(10 / desk_divisor ** (1.0 / 3.0)))
        n_extrap = max(1, round(200 / desk_divisor))
        axes = [
            np.linspace(2e-2, 5e-2, per_axis),
            np.linspace(0.4, 0.6, per_axis),
            np.linspace(0.4, 0.6, per_axis),
        ]
        train = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        mid_axes = [_midpoints(a) for a in axes]
        interp = np.stack(np.meshgrid(*mid_axes, indexing="ij"), axis=-1).reshape(-1, 3)
        rng = np.random.default_rng(seed)
        lo = np.array([1e-2, 0.3, 0.3])
        hi = np.array([6e-2, 0.7, 0.7])
        box_lo = np.array([2e-2, 0.4, 0.4])
        box_hi = np.array([5e-2, 0.6, 0.6])
        samples = []
        while len(samples) < n_extrap:
            cand = rng.uniform(lo, hi)
            if np.all(cand >= box_lo) and np.all(cand <= box_hi):
                continue
            samples.append(cand)
        return train, interp, np.array(samples)
    raise ValueError(f"unknown problem {problem!r}")


@dataclass
class SubTrajectoryBatch:
    """A materialized batch of sliding windows."""

    states: np.ndarray  # (N_h, ell, N_b)
    times: np.ndarray  # (ell, N_b)
    params: np.ndarray  # (n_mu, N_b)

    def __post_init__(self):
        if self.states.shape[1] < 2:
            raise WindowTooLong("windows must hold at least two time points")
        if np.any(np.diff(self.times, axis=0) <= 0):
            raise ValueError("window times must be strictly increasing")


class WindowSource:
    """Lazy enumeration of all length-ell sliding windows of a snapshot set.

    Window w = (j, s) starts at time index s of trajectory j; enumeration is
    exhaustive and duplicate-free with n_mu * (n_t - ell + 1) windows.
    """

    def __init__(self, snap: SnapshotSet, ell: int):
        if ell < 2:
            raise ValueError("ell must be >= 2")
        if ell > snap.n_t:
            raise WindowTooLong(f"ell = {ell} exceeds trajectory length {snap.n_t}")
        self.snap = snap
        self.ell = ell
        self.starts_per_traj = snap.n_t - ell + 1
        self.n_windows = snap.n_mu * self.starts_per_traj

    def gather(self, window_ids: np.ndarray, ell: int | None = None) -> SubTrajectoryBatch:
        """Materialize selected windows, optionally truncated to ell points."""
        ell_out = self.ell if ell is None else ell
        if not (2 <= ell_out <= self.ell):
            raise WindowTooLong(f"requested ell = {ell_out} outside [2, {self.ell}]")
        traj = window_ids // self.starts_per_traj
        start = window_ids % self.starts_per_traj
        nb = window_ids.size
        states = np.empty((self.snap.n_dofs, ell_out, nb))
        times = np.empty((ell_out, nb))
        params = np.empty((self.snap.n_params, nb))
        for b, (j, s) in enumerate(zip(traj, start)):
            cols = slice(j * self.snap.n_t + s, j * self.snap.n_t + s + ell_out)
            states[:, :, b] = self.snap.s_h[:, cols]
            times[:, b] = self.snap.m[-1, cols]
            params[:, b] = self.snap.m[:-1, j * self.snap.n_t + s]
        return SubTrajectoryBatch(states, times, params)

    def all_windows(self) -> SubTrajectoryBatch:
        return self.gather(np.arange(self.n_windows))

    def iter_epoch(self, batch_size: int, rng: np.random.Generator):
        """Shuffled batches without replacement covering every window once."""
        order = rng.permutation(self.n_windows)
        for lo in range(0, self.n_windows, batch_size):
            yield order[lo : lo + batch_size]


def make_subtrajectories(snap: SnapshotSet, ell: int) -> WindowSource:
    """All sliding windows of length ell from every trajectory of the set."""
    return WindowSource(snap, ell)
