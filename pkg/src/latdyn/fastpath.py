"""Compiled inference kernels for 1D rollouts.

Rollout inference is sequential in time, so the tensor-op path pays Python
dispatch per latent step.  These numba kernels run the identical math
(modulated conv stack, explicit RK stepping, decoder) over packed weight
arrays; the embedding MLP is evaluated once for all stage times with plain
matmuls.  2D models and environments without numba fall back to the
tensor-op path transparently.

fastmath reassociates sums, so outputs may differ from the tensor path by a
few ulps; consistency is asserted in the test suite at 1e-10.
"""

from __future__ import annotations

import warnings

import numpy as np

try:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

__all__ = ["available", "fast_forward", "HAVE_NUMBA"]


def available(model) -> bool:
    return HAVE_NUMBA and model.ae.spatial_dims == 1


def _embed_rows(model, stage_t: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Modulation inputs (rows, n_mod, 2 n_c) for all stage times."""
    p = model.params
    rows = model._encode_inputs(stage_t, np.broadcast_to(mu, (stage_t.size, mu.size)))
    heads_w = np.stack(
        [p[f"dyn.head{i}.w"].data.T.copy() for i in range(model.dyn.n_mod_layers)]
    )
    heads_b = np.stack([p[f"dyn.head{i}.b"].data for i in range(model.dyn.n_mod_layers)])
    return _embed_kernel(
        rows,
        p["dyn.mlp0.w"].data.T.copy(),
        p["dyn.mlp0.b"].data,
        p["dyn.mlp1.w"].data.T.copy(),
        p["dyn.mlp1.b"].data,
        p["dyn.mlp2.w"].data.T.copy(),
        p["dyn.mlp2.b"].data,
        heads_w,
        heads_b,
    )


if HAVE_NUMBA:

    @njit(cache=True, fastmath=True)
    def _embed_kernel(rows, w0t, b0, w1t, b1, w2t, b2, heads_w, heads_b):
        h = np.dot(rows, w0t)
        for i in range(h.shape[0]):
            for j in range(h.shape[1]):
                v = h[i, j] + b0[j]
                h[i, j] = v if v > 0 else np.expm1(v)
        h = np.dot(h, w1t)
        for i in range(h.shape[0]):
            for j in range(h.shape[1]):
                v = h[i, j] + b1[j]
                h[i, j] = v if v > 0 else np.expm1(v)
        xi = np.dot(h, w2t)
        for i in range(xi.shape[0]):
            for j in range(xi.shape[1]):
                v = xi[i, j] + b2[j]
                xi[i, j] = v if v > 0 else np.expm1(v)
        n_mod = heads_w.shape[0]
        out = np.empty((rows.shape[0], n_mod, heads_w.shape[2]))
        for l in range(n_mod):
            gb = np.dot(xi, heads_w[l])
            for i in range(gb.shape[0]):
                for j in range(gb.shape[1]):
                    out[i, l, j] = gb[i, j] + heads_b[l, j]
        return out

    @njit(cache=True, fastmath=True)
    def _rhs_1d(up, w_in, b_in, wmod, gb, w_out, h1, h2, acc, out):
        # up is the zero-padded latent (n+2,); h1/h2 are padded workspaces.
        # MAC loops stay free of transcendentals so they vectorize; tanh runs
        # in separate passes.
        cdim = h1.shape[0]
        nn = up.size - 2
        for ch in range(cdim):
            w0, w1, w2 = w_in[ch, 0], w_in[ch, 1], w_in[ch, 2]
            bb = b_in[ch]
            for x in range(nn):
                h1[ch, x + 1] = bb + w0 * up[x] + w1 * up[x + 1] + w2 * up[x + 2]
        for ch in range(cdim):
            for x in range(nn):
                h1[ch, x + 1] = np.tanh(h1[ch, x + 1])
        src, dst = h1, h2
        for layer in range(wmod.shape[0]):
            for co in range(cdim):
                for x in range(nn):
                    acc[x] = 0.0
                for ci in range(cdim):
                    w0 = wmod[layer, co, ci, 0]
                    w1 = wmod[layer, co, ci, 1]
                    w2 = wmod[layer, co, ci, 2]
                    row = src[ci]
                    for x in range(nn):
                        acc[x] += w0 * row[x] + w1 * row[x + 1] + w2 * row[x + 2]
                g = 1.0 + gb[layer, co]
                bsh = gb[layer, cdim + co]
                for x in range(nn):
                    dst[co, x + 1] = g * acc[x] + bsh
            for co in range(cdim):
                for x in range(nn):
                    dst[co, x + 1] = np.tanh(dst[co, x + 1])
            src, dst = dst, src
        for x in range(nn):
            out[x] = 0.0
        for ci in range(cdim):
            w0, w1, w2 = w_out[ci, 0], w_out[ci, 1], w_out[ci, 2]
            row = src[ci]
            for x in range(nn):
                out[x] += w0 * row[x] + w1 * row[x + 1] + w2 * row[x + 2]

    @njit(cache=True, fastmath=True)
    def _rollout_1d(u0, dts, stage_gb, ta, tb, w_in, b_in, wmod, w_out):
        n_steps = dts.size
        s = tb.size
        nn = u0.size
        cdim = w_in.shape[0]
        lat = np.empty((n_steps + 1, nn))
        lat[0] = u0
        h1 = np.zeros((cdim, nn + 2))
        h2 = np.zeros((cdim, nn + 2))
        acc = np.empty(nn)
        up = np.zeros(nn + 2)
        ks = np.empty((s, nn))
        u = u0.copy()
        for k in range(n_steps):
            dt = dts[k]
            for i in range(s):
                for x in range(nn):
                    up[x + 1] = u[x]
                for j in range(i):
                    aij = ta[i, j]
                    if aij != 0.0:
                        for x in range(nn):
                            up[x + 1] += dt * aij * ks[j, x]
                _rhs_1d(up, w_in, b_in, wmod, stage_gb[k, i], w_out, h1, h2, acc, ks[i])
            for i in range(s):
                bi = tb[i]
                if bi != 0.0:
                    for x in range(nn):
                        u[x] += dt * bi * ks[i, x]
            lat[k + 1] = u
        return lat

    @njit(cache=True, fastmath=True)
    def _decode_1d(lat, widths, wi, bi, wo, bo, wf, bf, levels):
        # serial over states: on small hosts spinning worker threads from a
        # parallel region would contend with the sequential rollout kernel
        n_states, n0 = lat.shape
        out_size = n0 * 2**levels
        res = np.empty((n_states, out_size))
        cur = np.empty(out_size)
        zp = np.zeros(out_size + 2)
        h = np.zeros((wi.shape[1], out_size + 2))
        add = np.empty(out_size)
        nxt = np.empty(out_size)
        for kk in range(n_states):
            for x in range(n0):
                cur[x] = lat[kk, x]
            m = n0
            for l in range(levels - 1, -1, -1):
                cdim = widths[l]
                for x in range(m):
                    v = cur[x]
                    zp[x + 1] = v if v > 0 else np.expm1(v)
                zp[0] = 0.0
                zp[m + 1] = 0.0
                # accumulate first, activate second: keeps the MAC loops
                # free of transcendental calls so they vectorize
                for ch in range(cdim):
                    w0, w1, w2 = wi[l, ch, 0], wi[l, ch, 1], wi[l, ch, 2]
                    bb = bi[l, ch]
                    for x in range(m):
                        h[ch, x + 1] = bb + w0 * zp[x] + w1 * zp[x + 1] + w2 * zp[x + 2]
                for ch in range(cdim):
                    h[ch, 0] = 0.0
                    h[ch, m + 1] = 0.0
                    for x in range(m):
                        v = h[ch, x + 1]
                        if v <= 0:
                            h[ch, x + 1] = np.expm1(v)
                for x in range(m):
                    add[x] = bo[l]
                for ch in range(cdim):
                    w0, w1, w2 = wo[l, ch, 0], wo[l, ch, 1], wo[l, ch, 2]
                    row = h[ch]
                    for x in range(m):
                        add[x] += w0 * row[x] + w1 * row[x + 1] + w2 * row[x + 2]
                for x in range(m):
                    cur[x] += add[x]
                nxt[0] = cur[0]
                nxt[2 * m - 1] = cur[m - 1]
                for i in range(1, m):
                    nxt[2 * i] = 0.25 * cur[i - 1] + 0.75 * cur[i]
                for i in range(m - 1):
                    nxt[2 * i + 1] = 0.75 * cur[i] + 0.25 * cur[i + 1]
                m *= 2
                for x in range(m):
                    cur[x] = nxt[x]
            for x in range(m):
                zp[x + 1] = cur[x]
            zp[0] = 0.0
            zp[m + 1] = 0.0
            for x in range(m):
                res[kk, x] = bf + wf[0] * zp[x] + wf[1] * zp[x + 1] + wf[2] * zp[x + 2]
        return res


    @njit(cache=True, fastmath=True)
    def _encode_1d(u, widths, wi, bi, wo, bo, wf, bf, levels):
        n0 = u.size
        cur = np.empty(n0)
        for x in range(n0):
            cur[x] = u[x]
        zp = np.zeros(n0 + 2)
        h = np.zeros((wi.shape[1], n0 + 2))
        add = np.empty(n0)
        m = n0
        for l in range(levels):
            cdim = widths[l]
            for x in range(m):
                v = cur[x]
                zp[x + 1] = v if v > 0 else np.expm1(v)
            zp[0] = 0.0
            zp[m + 1] = 0.0
            for ch in range(cdim):
                w0, w1, w2 = wi[l, ch, 0], wi[l, ch, 1], wi[l, ch, 2]
                bb = bi[l, ch]
                for x in range(m):
                    h[ch, x + 1] = bb + w0 * zp[x] + w1 * zp[x + 1] + w2 * zp[x + 2]
            for ch in range(cdim):
                h[ch, 0] = 0.0
                h[ch, m + 1] = 0.0
                for x in range(m):
                    v = h[ch, x + 1]
                    if v <= 0:
                        h[ch, x + 1] = np.expm1(v)
            for x in range(m):
                add[x] = bo[l]
            for ch in range(cdim):
                w0, w1, w2 = wo[l, ch, 0], wo[l, ch, 1], wo[l, ch, 2]
                row = h[ch]
                for x in range(m):
                    add[x] += w0 * row[x] + w1 * row[x + 1] + w2 * row[x + 2]
            for x in range(m):
                cur[x] += add[x]
            m //= 2
            for i in range(m):
                cur[i] = 0.5 * (cur[2 * i] + cur[2 * i + 1])
        out = np.empty(m)
        for x in range(m):
            zp[x + 1] = cur[x]
        zp[0] = 0.0
        zp[m + 1] = 0.0
        for x in range(m):
            out[x] = bf + wf[0] * zp[x] + wf[1] * zp[x + 1] + wf[2] * zp[x + 2]
        return out


def _pack_dynamics(model):
    p = model.params
    d = model.dyn
    w_in = p["dyn.in.k"].data[:, 0, :]  # (n_c, 3)
    b_in = p["dyn.in.b"].data
    wmod = np.stack([p[f"dyn.conv{i}.k"].data for i in range(d.n_mod_layers)])
    w_out = p["dyn.out.k"].data[0]  # (n_c, 3)
    return w_in, b_in, wmod, w_out


def _pack_stages(model, prefix: str):
    """Per-level block weights padded to the widest level."""
    p = model.params
    levels = model.ae.n_levels
    widths = np.asarray(model.ae.channels_per_level, dtype=np.int64)
    c_max = int(widths.max())
    wi = np.zeros((levels, c_max, 3))
    bi = np.zeros((levels, c_max))
    wo = np.zeros((levels, c_max, 3))
    for l, c in enumerate(widths):
        wi[l, :c] = p[f"{prefix}.block{l}.in.k"].data[:, 0, :]
        bi[l, :c] = p[f"{prefix}.block{l}.in.b"].data
        wo[l, :c] = p[f"{prefix}.block{l}.out.k"].data[0]
    bo = np.array([p[f"{prefix}.block{l}.out.b"].data[0] for l in range(levels)])
    wf = p[f"{prefix}.final.k"].data[0, 0]
    bf = float(p[f"{prefix}.final.b"].data[0])
    return widths, wi, bi, wo, bo, wf, bf


def fast_forward(model, u0h: np.ndarray, times: np.ndarray, mu) -> np.ndarray | None:
    """Compiled equivalent of LdmModel.forward; None when not applicable."""
    if not available(model):
        return None
    packed_dec = _pack_stages(model, "dec")
    packed_enc = _pack_stages(model, "enc")

    times = np.asarray(times, dtype=np.float64)
    dts = np.diff(times)
    if np.any(dts <= 0):
        from .model import NonMonotoneTimes

        raise NonMonotoneTimes("times must increase strictly")
    mu_arr = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    u0 = np.ascontiguousarray(np.asarray(u0h, dtype=np.float64).ravel())
    z0 = _encode_1d(u0, *packed_enc, model.ae.n_levels)

    tb = model.tableau
    n_steps = dts.size
    if n_steps:
        stage_t = np.empty((n_steps, tb.stages))
        for i in range(tb.stages):
            stage_t[:, i] = times[:-1] + tb.c[i] * dts
        # (n_steps, stages, n_mod, 2 n_c)
        stage_gb = _embed_rows(model, stage_t.reshape(-1), mu_arr).reshape(
            n_steps, tb.stages, model.dyn.n_mod_layers, -1
        )
        w_in, b_in, wmod, w_out = _pack_dynamics(model)
        lat = _rollout_1d(
            z0,
            dts,
            stage_gb,
            np.asarray(tb.a, dtype=np.float64),
            np.asarray(tb.b, dtype=np.float64),
            w_in,
            b_in,
            wmod,
            w_out,
        )
    else:
        lat = z0[None, :]

    decoded = _decode_1d(lat, *packed_dec, model.ae.n_levels)
    out = decoded.T
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("rollout produced non-finite values")
    return out
