"""Versioned binary containers and CSV emitters.

Trajectory container (magic b"LDTR"): header with version and record
count, then per record the sizes (N_h, n_times, n_mu) followed by the
column-major state matrix, the time grid, and the parameter vector, all
little-endian float64.  Model checkpoints (magic b"LDMC") hold a
human-readable key=value config block followed by the parameter store:
name table, shapes, payloads, Adam moments, and the step counter.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .fom import Trajectory
from .model import LdmModel

__all__ = [
    "save_trajectories",
    "load_trajectories",
    "save_checkpoint",
    "load_checkpoint",
    "save_normalizer_csv",
    "load_normalizer_csv",
    "write_manifest_csv",
    "write_trainlog_csv",
    "trajectories_to_csv",
    "FormatError",
]

_TRAJ_MAGIC = b"LDTR"
_CKPT_MAGIC = b"LDMC"
_VERSION = 1


class FormatError(ValueError):
    """Corrupt or unsupported container."""


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(fh, count: int, shape=None) -> np.ndarray:
    buf = fh.read(8 * count)
    if len(buf) != 8 * count:
        raise FormatError("truncated container")
    arr = np.frombuffer(buf, dtype="<f8").astype(np.float64)
    return arr.reshape(shape) if shape is not None else arr


def save_trajectories(path, trajectories: list[Trajectory]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_TRAJ_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(trajectories)))
        for tr in trajectories:
            n_h, n_times = tr.states.shape
            fh.write(struct.pack("<QQQ", n_h, n_times, tr.params.size))
            _write_array(fh, tr.states.T)  # column-major states
            _write_array(fh, tr.times)
            _write_array(fh, tr.params)


def load_trajectories(path) -> list[Trajectory]:
    path = Path(path)
    out = []
    with open(path, "rb") as fh:
        if fh.read(4) != _TRAJ_MAGIC:
            raise FormatError(f"{path} is not a trajectory container")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise FormatError(f"unsupported container version {version}")
        for _ in range(count):
            n_h, n_times, n_mu = struct.unpack("<QQQ", fh.read(24))
            states = _read_array(fh, n_h * n_times, (n_times, n_h)).T
            times = _read_array(fh, n_times)
            params = _read_array(fh, n_mu)
            out.append(Trajectory(states, times, params))
    return out


def _write_store(fh, store: ParamStore) -> None:
    names = store.names()
    fh.write(struct.pack("<IQ", len(names), store.step_count))
    for name in names:
        raw = name.encode()
        value = store[name].data
        m, v = store.adam_state(name)
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", value.ndim))
        fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        _write_array(fh, value)
        _write_array(fh, m)
        _write_array(fh, v)


def _read_store(fh) -> ParamStore:
    n_names, step_count = struct.unpack("<IQ", fh.read(12))
    store = ParamStore()
    store.step_count = step_count
    for _ in range(n_names):
        (name_len,) = struct.unpack("<H", fh.read(2))
        name = fh.read(name_len).decode()
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        count = int(np.prod(shape)) if shape else 1
        value = _read_array(fh, count, shape)
        store.add(name, value)
        m, v = store.adam_state(name)
        m[...] = _read_array(fh, count, shape)
        v[...] = _read_array(fh, count, shape)
    return store


def save_checkpoint(path, model: LdmModel, extra: dict | None = None) -> None:
    """Model checkpoint: config text block plus the full parameter store."""
    cfg = dict(model.config_dict())
    if extra:
        cfg.update(extra)
    block = "".join(f"{k} = {v}\n" for k, v in sorted(cfg.items())).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(block)))
        fh.write(block)
        _write_store(fh, model.params)


def load_checkpoint(path) -> tuple[LdmModel, dict[str, str]]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise FormatError(f"{path} is not a model checkpoint")
        version, block_len = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        cfg: dict[str, str] = {}
        for line in fh.read(block_len).decode().splitlines():
            key, _, value = line.partition(" = ")
            cfg[key] = value
        store = _read_store(fh)
    model = LdmModel.from_config_dict(cfg)
    model.params.load_values({n: store[n].data for n in store.names()})
    model.params.step_count = store.step_count
    for name in store.names():
        m_src, v_src = store.adam_state(name)
        m_dst, v_dst = model.params.adam_state(name)
        m_dst[...] = m_src
        v_dst[...] = v_src
    return model, cfg


def save_normalizer_csv(path, norm) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "min", "max"])
        for i, (lo, hi) in enumerate(zip(norm.minimum, norm.maximum)):
            w.writerow([i, repr(float(lo)), repr(float(hi))])


def load_normalizer_csv(path):
    from .dataset import Normalizer

    lo, hi = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            lo.append(float(row["min"]))
            hi.append(float(row["max"]))
    return Normalizer(np.array(lo), np.array(hi))


def write_manifest_csv(path, entries: list[tuple[str, int, np.ndarray]]) -> None:
    """Split manifest rows: (split, instance index, parameter values...)."""
    n_mu = len(entries[0][2]) if entries else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "instance", *[f"mu{i + 1}" for i in range(n_mu)]])
        for split, idx, params in entries:
            w.writerow([split, idx, *[repr(float(p)) for p in params]])


def write_trainlog_csv(path, log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["epoch", "train_loss", "val_loss", "lr", "ell_mean", "seconds", "probe_metric"]
        )
        w.writerows(log.rows())


def trajectories_to_csv(path, trajectory: Trajectory) -> None:
    """Single trajectory as CSV for inspection: one column per time."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *[f"u{i}" for i in range(trajectory.n_dofs)]])
        for k, t in enumerate(trajectory.times):
            w.writerow([repr(float(t)), *[repr(float(v)) for v in trajectory.states[:, k]]])
