"""The learnable latent dynamics model.

Three trainable components over a shared parameter store:

* encoder: L stages of (preactivation residual conv block, pair-averaging
  down-sample), then a final linear convolution; the latent keeps a single
  channel on a coarsened grid, so a 1D state of extent 1024 with L=6 ends at
  a 16-entry latent.
* decoder: the mirror composition with midpoint-interpolation up-sampling.
* latent right-hand side: time and parameters enter through sinusoidal
  encodings and an ELU MLP embedding; the embedding drives channel-wise
  affine modulation of a small convolutional stack with tanh activations
  (input conv, n_mod modulated convs, linear output conv).

Rollouts advance the latent state with an explicit Runge-Kutta scheme given
by a Butcher tableau and are fully tape-recorded, so training
backpropagates through the unrolled steps.  Because the modulation
parameters depend only on (t, mu), rollouts batch the embedding pass over
all stage times up front.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

__all__ = [
    "AutoencoderConfig",
    "DynamicsConfig",
    "ButcherTableau",
    "TABLEAUS",
    "LdmModel",
    "sinusoidal_encoding",
    "NonExplicitTableau",
    "NonMonotoneTimes",
]


class NonExplicitTableau(ValueError):
    """Tableau with entries on or above the diagonal."""


class NonMonotoneTimes(ValueError):
    """Rollout times must increase strictly."""


@dataclass(frozen=True)
class ButcherTableau:
    """Explicit Runge-Kutta coefficients (a, b, c) and nominal order."""

    name: str
    a: tuple[tuple[float, ...], ...]
    b: tuple[float, ...]
    c: tuple[float, ...]
    order: int

    def __post_init__(self):
        s = len(self.b)
        if len(self.c) != s or len(self.a) != s:
            raise ValueError("tableau arrays must share the stage count")
        for i, row in enumerate(self.a):
            if len(row) != s:
                raise ValueError("a must be square")
            if any(row[j] != 0.0 for j in range(i, s)):
                raise NonExplicitTableau(f"{self.name}: a[{i}] has entries at or above the diagonal")
        if abs(sum(self.b) - 1.0) > 1e-12:
            raise ValueError("weights b must sum to 1")
        for i in range(s):
            if abs(self.c[i] - sum(self.a[i])) > 1e-12:
                raise ValueError(f"node c[{i}] must equal row sum of a")

    @property
    def stages(self) -> int:
        return len(self.b)


TABLEAUS: dict[str, ButcherTableau] = {
    "euler": ButcherTableau("euler", ((0.0,),), (1.0,), (0.0,), order=1),
    "ralston2": ButcherTableau(
        "ralston2",
        ((0.0, 0.0), (2.0 / 3.0, 0.0)),
        (0.25, 0.75),
        (0.0, 2.0 / 3.0),
        order=2,
    ),
    "rk4": ButcherTableau(
        "rk4",
        (
            (0.0, 0.0, 0.0, 0.0),
            (0.5, 0.0, 0.0, 0.0),
            (0.0, 0.5, 0.0, 0.0),
            (0.0, 0.0, 1.0, 0.0),
        ),
        (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0),
        (0.0, 0.5, 0.5, 1.0),
        order=4,
    ),
}
TABLEAUS["rk2"] = TABLEAUS["ralston2"]


@dataclass(frozen=True)
class AutoencoderConfig:
    """Geometry of the convolutional autoencoder."""

    n_levels: int
    channels_per_level: tuple[int, ...]
    spatial_dims: int
    input_extent: tuple[int, ...]

    def __post_init__(self):
        if self.spatial_dims not in (1, 2):
            raise ValueError("spatial_dims must be 1 or 2")
        if len(self.input_extent) != self.spatial_dims:
            raise ValueError("input_extent must list one size per spatial dimension")
        if len(self.channels_per_level) != self.n_levels:
            raise ValueError("channels_per_level must list one width per level")
        for ext in self.input_extent:
            if ext % (2**self.n_levels):
                raise ValueError(
                    f"extent {ext} not divisible by 2^{self.n_levels}; "
                    "every level halves each spatial dimension"
                )

    @property
    def latent_extent(self) -> tuple[int, ...]:
        return tuple(e // 2**self.n_levels for e in self.input_extent)

    @property
    def latent_size(self) -> int:
        return int(np.prod(self.latent_extent))

    @property
    def state_size(self) -> int:
        return int(np.prod(self.input_extent))


@dataclass(frozen=True)
class DynamicsConfig:
    """Sinusoidal encoding, embedding MLP, and modulated conv stack sizes.

    t_max should exceed the test-time horizon so the slowest encoding
    frequency never wraps within a rollout.
    """

    k: int = 16
    t_max: float = 100.0
    d_e: int = 64
    n_c: int = 16
    n_mod_layers: int = 2

    def __post_init__(self):
        if self.k % 2 or self.k < 2:
            raise ValueError("k must be a positive even count")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if self.n_c < 1 or self.n_mod_layers < 1:
            raise ValueError("need at least one channel and one modulated layer")


def sinusoidal_encoding(v, k: int, t_max: float) -> np.ndarray:
    """Map scalars to [sin(w_1 v)..sin(w_{k/2} v), cos(w_1 v)..cos(w_{k/2} v)].

    Frequencies are w_j = t_max^-(j-1), so w_1 = 1 regardless of t_max and the
    encoded signal has period 2*pi*t_max^(k/2-1).  Accepts a scalar or a 1D
    array; returns (k,) or (n, k).
    """
    if k % 2 or k < 2:
        raise ValueError("k must be a positive even count")
    arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
    omega = t_max ** (-np.arange(k // 2, dtype=np.float64))
    phase = arr[:, None] * omega[None, :]
    enc = np.concatenate([np.sin(phase), np.cos(phase)], axis=1)
    return enc[0] if np.isscalar(v) or np.ndim(v) == 0 else enc


class LdmModel:
    """Encoder, decoder, and affinely-modulated latent dynamics."""

    def __init__(
        self,
        ae: AutoencoderConfig,
        dyn: DynamicsConfig,
        tableau: ButcherTableau,
        n_mu: int,
        seed: int = 0,
    ):
        self.ae = ae
        self.dyn = dyn
        self.tableau = tableau
        self.n_mu = n_mu
        self.seed = seed
        self.params = ParamStore()
        self._build(np.random.default_rng(seed))

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    def _conv_param(self, rng, name, c_out, c_in, bias=True):
        taps = 3**self.ae.spatial_dims
        shape = (c_out, c_in) + (3,) * self.ae.spatial_dims
        self.params.add(name + ".k", ad.uniform_fan_in(rng, shape, c_in * taps))
        if bias:
            self.params.add(name + ".b", np.zeros(c_out))

    def _linear_param(self, rng, name, n_out, n_in):
        self.params.add(name + ".w", ad.uniform_fan_in(rng, (n_out, n_in), n_in))
        self.params.add(name + ".b", np.zeros(n_out))

    def _build(self, rng):
        for l, width in enumerate(self.ae.channels_per_level):
            self._conv_param(rng, f"enc.block{l}.in", width, 1)
            self._conv_param(rng, f"enc.block{l}.out", 1, width)
            self._conv_param(rng, f"dec.block{l}.in", width, 1)
            self._conv_param(rng, f"dec.block{l}.out", 1, width)
        self._conv_param(rng, "enc.final", 1, 1)
        self._conv_param(rng, "dec.final", 1, 1)

        d = self.dyn
        n_in = d.k * (self.n_mu + 1)
        self._linear_param(rng, "dyn.mlp0", d.d_e, n_in)
        self._linear_param(rng, "dyn.mlp1", d.d_e, d.d_e)
        self._linear_param(rng, "dyn.mlp2", d.d_e, d.d_e)
        for i in range(d.n_mod_layers):
            self._linear_param(rng, f"dyn.head{i}", 2 * d.n_c, d.d_e)
            self._conv_param(rng, f"dyn.conv{i}", d.n_c, d.n_c, bias=False)
        self._conv_param(rng, "dyn.in", d.n_c, 1)
        # no bias on the output conv: keeps the sup bound sum|kernel| exact
        self._conv_param(rng, "dyn.out", 1, d.n_c, bias=False)

    # ------------------------------------------------------------------
    # autoencoder
    # ------------------------------------------------------------------

    def _res_block(self, h: Tensor, prefix: str) -> Tensor:
        p = self.params
        z = ad.elu(h)
        z = ad.conv(z, p[prefix + ".in.k"], p[prefix + ".in.b"])
        z = ad.elu(z)
        z = ad.conv(z, p[prefix + ".out.k"], p[prefix + ".out.b"])
        return ad.add(h, z)

    def encode(self, u: Tensor) -> Tensor:
        """(B, 1, *input_extent) -> (B, 1, *latent_extent)."""
        if u.data.shape[1:] != (1, *self.ae.input_extent):
            raise ad.ShapeMismatch(f"encode expects (B, 1, {self.ae.input_extent}), got {u.shape}")
        h = u
        for l in range(self.ae.n_levels):
            h = self._res_block(h, f"enc.block{l}")
            h = ad.resample_down(h)
        return ad.conv(h, self.params["enc.final.k"], self.params["enc.final.b"])

    def decode(self, z: Tensor) -> Tensor:
        """(B, 1, *latent_extent) -> (B, 1, *input_extent)."""
        if z.data.shape[1:] != (1, *self.ae.latent_extent):
            raise ad.ShapeMismatch(f"decode expects (B, 1, {self.ae.latent_extent}), got {z.shape}")
        h = z
        for l in reversed(range(self.ae.n_levels)):
            h = self._res_block(h, f"dec.block{l}")
            h = ad.resample_up(h)
        return ad.conv(h, self.params["dec.final.k"], self.params["dec.final.b"])

    # ------------------------------------------------------------------
    # dynamics
    # ------------------------------------------------------------------

    def _encode_inputs(self, t, mu) -> np.ndarray:
        """Sinusoidal features of t and every parameter component, (B, k*(n_mu+1))."""
        d = self.dyn
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        mu_arr = np.asarray(mu, dtype=np.float64)
        if mu_arr.ndim == 1:
            mu_arr = np.broadcast_to(mu_arr, (t_arr.size, mu_arr.size))
        parts = [sinusoidal_encoding(t_arr, d.k, d.t_max)]
        for j in range(self.n_mu):
            parts.append(sinusoidal_encoding(mu_arr[:, j], d.k, d.t_max))
        return np.concatenate(parts, axis=1)

    def embed(self, t, mu) -> Tensor:
        """Time-parameter embedding xi, (B, d_e)."""
        p = self.params
        x = Tensor(self._encode_inputs(t, mu))
        h = ad.elu(ad.linear(x, p["dyn.mlp0.w"], p["dyn.mlp0.b"]))
        h = ad.elu(ad.linear(h, p["dyn.mlp1.w"], p["dyn.mlp1.b"]))
        return ad.linear(h, p["dyn.mlp2.w"], p["dyn.mlp2.b"])

    def _modulations(self, xi: Tensor) -> list[Tensor]:
        """Per-layer (B, 2 n_c) scale/shift inputs for `modulate`."""
        p = self.params
        pre = ad.elu(xi)
        return [
            ad.linear(pre, p[f"dyn.head{i}.w"], p[f"dyn.head{i}.b"])
            for i in range(self.dyn.n_mod_layers)
        ]

    def _rhs_stack(self, u: Tensor, gbs: list[Tensor]) -> Tensor:
        """Convolutional core of the latent field given modulation inputs."""
        p = self.params
        h = ad.tanh(ad.conv(u, p["dyn.in.k"], p["dyn.in.b"]))
        for i, gb in enumerate(gbs):
            h = ad.tanh(ad.modulate(ad.conv(h, p[f"dyn.conv{i}.k"]), gb))
        return ad.conv(h, p["dyn.out.k"])

    def latent_rhs(self, t, u: Tensor, mu) -> Tensor:
        """Latent vector field f(t, u; mu); u is (B, 1, *latent_extent)."""
        if u.data.shape[1:] != (1, *self.ae.latent_extent):
            raise ad.ShapeMismatch(f"latent_rhs expects latent shape, got {u.shape}")
        xi = self.embed(t, mu)
        return self._rhs_stack(u, self._modulations(xi))

    def rhs_sup_bound(self) -> float:
        """Analytic bound on ||f||_inf: tanh range times the output kernel mass."""
        return float(np.abs(self.params["dyn.out.k"].data).sum())

    # ------------------------------------------------------------------
    # integration
    # ------------------------------------------------------------------

    def rk_step(self, t, u: Tensor, mu, dt: float, tableau: ButcherTableau | None = None) -> Tensor:
        """One explicit RK step of the latent state (tape-recorded)."""
        tb = tableau or self.tableau
        if dt <= 0:
            raise ValueError("dt must be positive")
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        ks: list[Tensor] = []
        for i in range(tb.stages):
            ui = u
            for j in range(i):
                if tb.a[i][j]:
                    ui = ad.add(ui, ad.smul(ks[j], dt * tb.a[i][j]))
            ks.append(self.latent_rhs(t_arr + tb.c[i] * dt, ui, mu))
        out = u
        for i in range(tb.stages):
            if tb.b[i]:
                out = ad.add(out, ad.smul(ks[i], dt * tb.b[i]))
        return out

    @staticmethod
    def _step_sizes(times: np.ndarray) -> np.ndarray:
        dts = np.diff(times, axis=0)
        if np.any(dts <= 0):
            raise NonMonotoneTimes("times must increase strictly")
        return dts

    def rollout_latents(self, u0: Tensor, times: np.ndarray, mus: np.ndarray) -> list[Tensor]:
        """Latent trajectory from u0 over `times`, one tensor per time point.

        times is (ell,) shared by the batch or (ell, B) with per-element
        starts; step sizes must agree across the batch (dt may vary along the
        trajectory).  The embedding MLP runs once over all stage times.
        """
        tb = self.tableau
        b = u0.data.shape[0]
        times = np.asarray(times, dtype=np.float64)
        if times.ndim == 1:
            times = np.broadcast_to(times[:, None], (times.size, b))
        dts = self._step_sizes(times)
        if np.any(np.abs(dts - dts[:, :1]) > 1e-12 * np.abs(dts[:, :1])):
            raise ValueError("step sizes must agree across the batch")
        n_steps = dts.shape[0]
        if n_steps == 0:
            return [u0]

        # one embedding pass over every (step, stage) time
        stage_t = np.empty((n_steps, tb.stages, b))
        for i in range(tb.stages):
            stage_t[:, i, :] = times[:-1] + tb.c[i] * dts
        mu_rows = np.tile(np.atleast_2d(mus), (n_steps * tb.stages, 1))
        xi = self.embed(stage_t.reshape(-1), mu_rows)
        gb_all = self._modulations(xi)

        latents = [u0]
        u = u0
        for k in range(n_steps):
            dt = float(dts[k, 0])
            ks: list[Tensor] = []
            for i in range(tb.stages):
                ui = u
                for j in range(i):
                    if tb.a[i][j]:
                        ui = ad.add(ui, ad.smul(ks[j], dt * tb.a[i][j]))
                lo = (k * tb.stages + i) * b
                gbs = [ad.rows(g, lo, lo + b) for g in gb_all]
                ks.append(self._rhs_stack(ui, gbs))
            for i in range(tb.stages):
                if tb.b[i]:
                    u = ad.add(u, ad.smul(ks[i], dt * tb.b[i]))
            latents.append(u)
        return latents

    def forward(
        self, u0h: np.ndarray, times: np.ndarray, mu, use_fastpath: bool = True
    ) -> np.ndarray:
        """IVP rollout for one instance: encode, integrate, decode every state.

        u0h is the normalized initial state (flat or shaped); returns the
        normalized predicted trajectory (state_size, len(times)).  With a
        single time the output is the plain autoencoder reconstruction.
        1D models dispatch to the compiled kernels when available.
        """
        times = np.asarray(times, dtype=np.float64)
        if times.ndim != 1 or times.size < 1:
            raise NonMonotoneTimes("times must be a non-empty 1D array")
        if np.any(np.diff(times) <= 0):
            raise NonMonotoneTimes("times must increase strictly")
        if use_fastpath:
            from . import fastpath

            out = fastpath.fast_forward(self, u0h, times, mu)
            if out is not None:
                return out
        u0 = np.asarray(u0h, dtype=np.float64).reshape(1, 1, *self.ae.input_extent)
        mu_arr = np.atleast_1d(np.asarray(mu, dtype=np.float64))
        with ad.no_grad():
            z0 = self.encode(Tensor(u0))
            latents = self.rollout_latents(z0, times, mu_arr[None, :])
            stacked = ad.concat(latents, axis=0)
            decoded = self.decode(stacked)
        out = decoded.data.reshape(times.size, -1).T
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("rollout produced non-finite values")
        return out

    # ------------------------------------------------------------------
    # bookkeeping
    # ------------------------------------------------------------------

    def n_parameters(self) -> int:
        return self.params.n_parameters()

    def config_dict(self) -> dict[str, object]:
        """Flat description used by checkpoint headers."""
        return {
            "n_levels": self.ae.n_levels,
            "channels_per_level": ",".join(str(c) for c in self.ae.channels_per_level),
            "spatial_dims": self.ae.spatial_dims,
            "input_extent": ",".join(str(e) for e in self.ae.input_extent),
            "k": self.dyn.k,
            "t_max": self.dyn.t_max,
            "d_e": self.dyn.d_e,
            "n_c": self.dyn.n_c,
            "n_mod_layers": self.dyn.n_mod_layers,
            "tableau": self.tableau.name,
            "n_mu": self.n_mu,
            "seed": self.seed,
        }

    @classmethod
    def from_config_dict(cls, cfg: dict[str, str]) -> "LdmModel":
        ae = AutoencoderConfig(
            n_levels=int(cfg["n_levels"]),
            channels_per_level=tuple(int(c) for c in str(cfg["channels_per_level"]).split(",")),
            spatial_dims=int(cfg["spatial_dims"]),
            input_extent=tuple(int(e) for e in str(cfg["input_extent"]).split(",")),
        )
        dyn = DynamicsConfig(
            k=int(cfg["k"]),
            t_max=float(cfg["t_max"]),
            d_e=int(cfg["d_e"]),
            n_c=int(cfg["n_c"]),
            n_mod_layers=int(cfg["n_mod_layers"]),
        )
        return cls(
            ae, dyn, TABLEAUS[str(cfg["tableau"])], n_mu=int(cfg["n_mu"]), seed=int(cfg["seed"])
        )
