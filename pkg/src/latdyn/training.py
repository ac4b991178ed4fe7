"""Sub-trajectory mini-batch training of the latent dynamics model.

Each batch takes the first snapshot of every window, encodes it, integrates
the latent dynamics across the window's time stamps, decodes every evolved
latent state, and scores the squared-error objective against the remaining
snapshots (the windows are teacher-free: intermediate snapshots appear only
in the loss).  Validation runs the same rollout loss without gradients on
fixed-length windows; the returned model is the best-validation checkpoint.

With temporal regularization enabled the window length is redrawn uniformly
from [2, ell_max] for every batch, decoupling training from a fixed rollout
horizon.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import SnapshotSet, WindowSource, make_subtrajectories
from .model import LdmModel

__all__ = [
    "TrainConfig",
    "TrainLog",
    "EpochRecord",
    "loss_value",
    "rollout_loss",
    "sample_window_length",
    "train",
    "pretrain_autoencoder",
    "DivergedLoss",
]


class DivergedLoss(RuntimeError):
    """Non-finite loss; training aborts with the last good checkpoint."""


@dataclass(frozen=True)
class TrainConfig:
    ell_max: int = 40
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 1e-5
    max_epochs: int = 2000
    patience: int = 50
    lr_decay: float = 0.5
    seed: int = 0
    temporal_reg: bool = True
    min_lr: float = 1e-6
    min_rel_improvement: float = 1e-6
    ae_pretrain_epochs: int = 0
    ae_pretrain_lr: float = 3e-3
    ae_ic_oversample: int = 1
    checkpoint_metric: str = "window_loss"  # or "rollout" with a RolloutProbe

    def __post_init__(self):
        if self.ell_max < 2:
            raise ValueError("ell_max must be >= 2")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    ell_mean: float
    seconds: float
    probe_metric: float = float("nan")


@dataclass
class RolloutProbe:
    """Held-out full-window rollouts scored each epoch (normalized units).

    u0: (n_inst, N_h) initial states; targets: (n_inst, N_h, n_times);
    mus: (n_inst, n_mu); times: shared grid.  Scoring a handful of long
    rollouts per epoch tracks accumulated integration drift, which short
    validation windows cannot see.
    """

    u0: np.ndarray
    times: np.ndarray
    mus: np.ndarray
    targets: np.ndarray

    def score(self, model: LdmModel) -> float:
        total = 0.0
        for j in range(self.u0.shape[0]):
            pred = model.forward(self.u0[j], self.times, self.mus[j])
            num = np.linalg.norm(self.targets[j] - pred, axis=0)
            den = np.linalg.norm(self.targets[j], axis=0)
            total += float((num / den).mean())
        return total / self.u0.shape[0]


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = np.inf
    stopped_early: bool = False

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def rows(self) -> list[tuple]:
        return [
            (r.epoch, r.train_loss, r.val_loss, r.lr, r.ell_mean, r.seconds, r.probe_metric)
            for r in self.records
        ]


def loss_value(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over trajectories and steps of the squared L2 snapshot distance.

    pred rows are decoded states (one row per (time, trajectory) pair with
    the full state flattened); the mean divides by rows only, so each term
    is the complete squared norm of one snapshot residual.
    """
    if pred.data.shape != target.shape:
        raise ad.ShapeMismatch(f"loss: pred {pred.data.shape} vs target {target.shape}")
    n_pairs = pred.data.shape[0]
    diff = ad.sub(pred, Tensor(target))
    return ad.smul(ad.sum_squares(diff), 1.0 / n_pairs)


def sample_window_length(cfg: TrainConfig, rng: np.random.Generator) -> int:
    """Integer uniform on [2, ell_max] inclusive."""
    return int(rng.integers(2, cfg.ell_max + 1))


def rollout_loss(model: LdmModel, states, times, params) -> Tensor:
    """Taped objective of one window batch.

    states (N_h, ell, B), times (ell, B), params (n_mu, B).  Only the k >= 1
    columns enter the loss; column 0 is the rollout's initial value.
    """
    n_h, ell, nb = states.shape
    u0 = Tensor(np.ascontiguousarray(states[:, 0, :].T).reshape(nb, 1, *model.ae.input_extent))
    z0 = model.encode(u0)
    latents = model.rollout_latents(z0, times, params.T)
    stacked = ad.concat(latents[1:], axis=0)
    decoded = model.decode(stacked)
    # target rows ordered time-major to match concat([latents at t1, t2, ...])
    target = np.ascontiguousarray(states[:, 1:, :].transpose(1, 2, 0)).reshape(
        decoded.data.shape[0], 1, *model.ae.input_extent
    )
    return loss_value(decoded, target)


def _reconstruction_loss(model: LdmModel, columns: np.ndarray) -> Tensor:
    nb = columns.shape[1]
    u = Tensor(np.ascontiguousarray(columns.T).reshape(nb, 1, *model.ae.input_extent))
    recon = model.decode(model.encode(u))
    return loss_value(recon, u.data)


def pretrain_autoencoder(
    model: LdmModel,
    train: SnapshotSet,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    ic_oversample: int = 1,
) -> list[float]:
    """Reconstruction-only warm start for encoder and decoder.

    The learning rate steps down by half twice over the run (thirds of the
    epoch budget); weight decay stays off so the untouched dynamics
    parameters keep their initialization.  Every rollout starts from an
    encoded initial snapshot, so `ic_oversample` repeats each trajectory's
    first column that many times per epoch: initial states are otherwise a
    1/n_t minority and reconstruct worst exactly where it hurts most.
    """
    history = []
    n_cols = train.s_h.shape[1]
    base = np.arange(n_cols)
    if ic_oversample > 1:
        ic_cols = np.arange(train.n_mu) * train.n_t
        base = np.concatenate([base, np.tile(ic_cols, ic_oversample - 1)])
    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7919, epoch]))
        order = rng.permutation(base)
        lr_epoch = lr * 0.5 ** (3 * epoch // max(1, epochs))
        total = 0.0
        for lo in range(0, order.size, batch_size):
            idx = order[lo : lo + batch_size]
            model.params.zero_grad()
            loss = _reconstruction_loss(model, train.s_h[:, idx])
            ad.backward(loss)
            ad.adam_step(model.params, lr=lr_epoch, weight_decay=0.0)
            total += float(loss.data) * idx.size
        history.append(total / order.size)
    return history


def _validation_loss(model: LdmModel, source: WindowSource, batch_size: int) -> float:
    """Rollout loss over all validation windows, no gradients."""
    total = 0.0
    count = 0
    with ad.no_grad():
        for idx in source.iter_epoch(batch_size, np.random.default_rng(0)):
            batch = source.gather(idx)
            loss = rollout_loss(model, batch.states, batch.times, batch.params)
            n = batch.states.shape[1] - 1
            total += float(loss.data) * idx.size * n
            count += idx.size * n
    return total / count


def train(
    model: LdmModel,
    train_set: SnapshotSet,
    val_set: SnapshotSet,
    cfg: TrainConfig,
    on_epoch=None,
    rollout_probe: RolloutProbe | None = None,
) -> tuple[LdmModel, TrainLog]:
    """Optimize the model on sub-trajectory windows with early stopping.

    Per epoch: shuffled window batches (optionally with resampled window
    lengths), Adam updates, then a full validation pass; the learning rate
    halves on a validation plateau of patience/2 epochs and training stops
    after `patience` epochs without relative improvement beyond
    min_rel_improvement.  Returns the model restored to the best-validation
    parameters together with the per-epoch log.

    With checkpoint_metric="rollout" and a RolloutProbe, checkpoint
    selection, plateau decay, and early stopping follow the probe's
    long-rollout error instead of the window loss (both are logged).
    """
    if cfg.checkpoint_metric not in ("window_loss", "rollout"):
        raise ValueError(f"unknown checkpoint metric {cfg.checkpoint_metric!r}")
    if cfg.checkpoint_metric == "rollout" and rollout_probe is None:
        raise ValueError("checkpoint_metric='rollout' needs a rollout_probe")
    if cfg.ae_pretrain_epochs:
        pretrain_autoencoder(
            model,
            train_set,
            cfg.ae_pretrain_epochs,
            cfg.batch_size,
            cfg.ae_pretrain_lr,
            cfg.seed,
            ic_oversample=cfg.ae_ic_oversample,
        )

    ell_train = min(cfg.ell_max, train_set.n_t)
    ell_val = min(cfg.ell_max, val_set.n_t)
    train_src = make_subtrajectories(train_set, ell_train)
    val_src = make_subtrajectories(val_set, ell_val)

    log = TrainLog()
    best_values = model.params.copy_values()
    lr = cfg.lr
    epochs_since_best = 0
    epochs_since_decay = 0

    for epoch in range(cfg.max_epochs):
        t_start = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        ells = []
        total = 0.0
        n_windows = 0
        for idx in train_src.iter_epoch(cfg.batch_size, rng):
            ell = sample_window_length(cfg, rng) if cfg.temporal_reg else ell_train
            ell = min(ell, ell_train)
            ells.append(ell)
            batch = train_src.gather(idx, ell=ell)
            model.params.zero_grad()
            loss = rollout_loss(model, batch.states, batch.times, batch.params)
            value = float(loss.data)
            if not np.isfinite(value):
                model.params.load_values(best_values)
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}")
            ad.backward(loss)
            ad.adam_step(model.params, lr=lr, weight_decay=cfg.weight_decay)
            total += value * idx.size
            n_windows += idx.size

        val_loss = _validation_loss(model, val_src, cfg.batch_size)
        if not np.isfinite(val_loss):
            model.params.load_values(best_values)
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")

        probe_metric = float("nan")
        selection = val_loss
        if rollout_probe is not None:
            probe_metric = rollout_probe.score(model)
            if cfg.checkpoint_metric == "rollout":
                selection = probe_metric

        rec = EpochRecord(
            epoch=epoch,
            train_loss=total / n_windows,
            val_loss=val_loss,
            lr=lr,
            ell_mean=float(np.mean(ells)),
            seconds=time.perf_counter() - t_start,
            probe_metric=probe_metric,
        )
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec, model)

        if selection < log.best_val_loss * (1.0 - cfg.min_rel_improvement) or log.best_epoch < 0:
            log.best_val_loss = selection
            log.best_epoch = epoch
            best_values = model.params.copy_values()
            epochs_since_best = 0
            epochs_since_decay = 0
        else:
            epochs_since_best += 1
            epochs_since_decay += 1
            if epochs_since_best >= cfg.patience:
                log.stopped_early = True
                break
            if epochs_since_decay >= max(1, cfg.patience // 2):
                lr = max(cfg.min_lr, lr * cfg.lr_decay)
                epochs_since_decay = 0

    model.params.load_values(best_values)
    return model, log
