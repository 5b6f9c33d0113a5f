"""Fused relaxation kernels for the layered dense architectures.

The reference solver in :mod:`holoep.fixedpoint` drives ``Network.step`` from
Python, which is flexible (any model kind, any duck-typed toy) but pays a
per-iteration interpreter toll.  For the three layered dense
architectures -- reciprocal, hopfield and direct-feedback -- the update is an
affine sweep (times the sigmoid slope for hopfield's gradient dynamics) plus
the readout nudge, and this module compiles the whole relaxation loop with
numba.
Predictive-coding dynamics stay on the reference path; their error-neuron
bookkeeping is cheap at the sizes we run.

Two specializations exist, one real and one complex, because numba cannot
branch on dtype inside a compiled function (the complex one is used whenever
the nudge value or the initial state carries an imaginary part).  Both mirror
the reference loop exactly: evaluate the update map, measure the per-sample
relative residual, stop *without* applying the final defect once the residual
clears the tolerance or the step budget runs out, so the reported residual is
the residual of the returned state.
"""

from __future__ import annotations

import numpy as np

from .backend import HAS_NUMBA
from .models import ModelKind, Network

if HAS_NUMBA:
    from numba import njit, types
    from numba.typed import List

    _F1 = types.float64[::1]
    _F2 = types.float64[:, ::1]
    _C1 = types.complex128[::1]
    _C2 = types.complex128[:, ::1]
else:  # pragma: no cover - exercised only in numba-free installs
    njit = None


def _typed_list(arrays, sig):
    lst = List.empty_list(sig)
    for a in arrays:
        lst.append(a)
    return lst


if HAS_NUMBA:

    @njit(cache=True)
    def _sig_r(x):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                w = -4.0 * x[i, j] + 2.0
                if w > 40.0:
                    w = 40.0
                elif w < -40.0:
                    w = -40.0
                out[i, j] = 1.0 / (1.0 + np.exp(w))
        return out

    @njit(cache=True)
    def _sig_c(x):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                w = -4.0 * x[i, j] + 2.0
                wr = w.real
                if wr > 40.0:
                    wr = 40.0
                elif wr < -40.0:
                    wr = -40.0
                out[i, j] = 1.0 / (1.0 + np.exp(complex(wr, w.imag)))
        return out

    @njit(cache=True)
    def _softmax_r(z):
        out = np.empty_like(z)
        for i in range(z.shape[0]):
            m = z[i, 0]
            for j in range(1, z.shape[1]):
                if z[i, j] > m:
                    m = z[i, j]
            tot = 0.0
            for j in range(z.shape[1]):
                w = z[i, j] - m
                if w < -40.0:
                    w = -40.0
                e = np.exp(w)
                out[i, j] = e
                tot += e
            for j in range(z.shape[1]):
                out[i, j] /= tot
        return out

    @njit(cache=True)
    def _softmax_c(z):
        out = np.empty_like(z)
        for i in range(z.shape[0]):
            m = z[i, 0].real
            for j in range(1, z.shape[1]):
                if z[i, j].real > m:
                    m = z[i, j].real
            tot = 0.0 + 0.0j
            for j in range(z.shape[1]):
                w = z[i, j] - m
                wr = w.real
                if wr < -40.0:
                    wr = -40.0
                e = np.exp(complex(wr, w.imag))
                out[i, j] = e
                tot += e
            for j in range(z.shape[1]):
                out[i, j] /= tot
        return out

    @njit(cache=True)
    def _relax_r(us, xin, fwd_t, bwd_t, b, fb_t, ro, ro_t, b_ro, y, beta,
                 use_nudge, df, hop, tol, max_steps, damping, resid_out):
        L = len(us)
        B = us[0].shape[0]
        keep = 1.0 - damping
        updates = 0
        status = 0
        for it in range(max_steps + 1):
            s = [_sig_r(us[l]) for l in range(L)]
            news = []
            for l in range(L):
                if l == 0:
                    acc = xin + b[0]
                    if df:
                        acc = acc + np.dot(s[L - 1], fb_t)
                    elif L > 1:
                        acc = acc + np.dot(s[1], bwd_t[0])
                else:
                    acc = np.dot(s[l - 1], fwd_t[l - 1]) + b[l]
                    if l < L - 1 and not df:
                        acc = acc + np.dot(s[l + 1], bwd_t[l])
                if hop:
                    acc = (4.0 * s[l] * (1.0 - s[l])) * acc
                if l == L - 1 and use_nudge:
                    st = s[L - 1]
                    p = _softmax_r(np.dot(st, ro_t) + b_ro)
                    force = (4.0 * st * (1.0 - st)) * np.dot(p - y, ro)
                    acc = acc + beta * force
                news.append(acc)
            dsq = np.zeros(B)
            usq = np.zeros(B)
            for l in range(L):
                d = news[l] - us[l]
                u = us[l]
                for i in range(B):
                    accd = 0.0
                    accu = 0.0
                    for j in range(d.shape[1]):
                        accd += d[i, j] * d[i, j]
                        accu += u[i, j] * u[i, j]
                    dsq[i] += accd
                    usq[i] += accu
            rmax = 0.0
            finite = True
            for i in range(B):
                r = np.sqrt(dsq[i]) / (1.0 + np.sqrt(usq[i]))
                resid_out[i] = r
                if not np.isfinite(r):
                    finite = False
                if r > rmax:
                    rmax = r
            if not finite:
                status = 1
                break
            if rmax <= tol or it == max_steps:
                break
            for l in range(L):
                us[l] += keep * (news[l] - us[l])
            updates += 1
        return updates, status

    @njit(cache=True)
    def _relax_c(us, xin, fwd_t, bwd_t, b, fb_t, ro, ro_t, b_ro, y, beta,
                 use_nudge, df, hop, tol, max_steps, damping, resid_out):
        L = len(us)
        B = us[0].shape[0]
        keep = 1.0 - damping
        updates = 0
        status = 0
        for it in range(max_steps + 1):
            s = [_sig_c(us[l]) for l in range(L)]
            news = []
            for l in range(L):
                if l == 0:
                    acc = xin + b[0]
                    if df:
                        acc = acc + np.dot(s[L - 1], fb_t)
                    elif L > 1:
                        acc = acc + np.dot(s[1], bwd_t[0])
                else:
                    acc = np.dot(s[l - 1], fwd_t[l - 1]) + b[l]
                    if l < L - 1 and not df:
                        acc = acc + np.dot(s[l + 1], bwd_t[l])
                if hop:
                    acc = (4.0 * s[l] * (1.0 - s[l])) * acc
                if l == L - 1 and use_nudge:
                    st = s[L - 1]
                    p = _softmax_c(np.dot(st, ro_t) + b_ro)
                    force = (4.0 * st * (1.0 - st)) * np.dot(p - y, ro)
                    acc = acc + beta * force
                news.append(acc)
            dsq = np.zeros(B)
            usq = np.zeros(B)
            for l in range(L):
                d = news[l] - us[l]
                u = us[l]
                for i in range(B):
                    accd = 0.0
                    accu = 0.0
                    for j in range(d.shape[1]):
                        dv = d[i, j]
                        uv = u[i, j]
                        accd += dv.real * dv.real + dv.imag * dv.imag
                        accu += uv.real * uv.real + uv.imag * uv.imag
                    dsq[i] += accd
                    usq[i] += accu
            rmax = 0.0
            finite = True
            for i in range(B):
                r = np.sqrt(dsq[i]) / (1.0 + np.sqrt(usq[i]))
                resid_out[i] = r
                if not np.isfinite(r):
                    finite = False
                if r > rmax:
                    rmax = r
            if not finite:
                status = 1
                break
            if rmax <= tol or it == max_steps:
                break
            for l in range(L):
                us[l] += keep * (news[l] - us[l])
            updates += 1
        return updates, status


def supports(net) -> bool:
    """Whether the fused kernels cover this model."""
    return (HAS_NUMBA and isinstance(net, Network)
            and net.kind in (ModelKind.RECIPROCAL, ModelKind.HOPFIELD,
                             ModelKind.DIRECT_FEEDBACK))


def relax_mlp(net, params, x, beta, target, init_layers, tol, max_steps,
              damping):
    """Run the fused relaxation loop.

    Returns (layers, updates, per_sample_residuals, status) where status 0
    means the loop stopped on tolerance or budget and 1 means a non-finite
    residual was encountered.  The input layers are never mutated.
    """
    if not supports(net):
        raise RuntimeError("fused kernel does not support this model")
    complex_mode = bool(np.iscomplexobj(np.asarray(beta))) or any(
        np.iscomplexobj(u) for u in init_layers)
    dt = np.complex128 if complex_mode else np.float64
    m2 = _C2 if complex_mode else _F2
    v1 = _C1 if complex_mode else _F1

    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xin = np.ascontiguousarray((x @ params.w_in.T).astype(dt, copy=False))
    us = _typed_list(
        [np.array(np.atleast_2d(u), dtype=dt, order="C") for u in init_layers],
        m2)
    fwd_t = _typed_list(
        [np.ascontiguousarray(w.T, dtype=dt) for w in params.w_fwd], m2)
    bwd = net.bwd_matrices(params) or []
    bwd_t = _typed_list([np.ascontiguousarray(w.T, dtype=dt) for w in bwd], m2)
    b = _typed_list([np.ascontiguousarray(v, dtype=dt) for v in params.b], v1)
    df = net.kind == ModelKind.DIRECT_FEEDBACK
    if df:
        fb_t = np.ascontiguousarray(params.w_fb.T, dtype=dt)
    else:
        fb_t = np.zeros((1, 1), dtype=dt)

    use_nudge = target is not None and beta != 0
    if use_nudge:
        ro = np.ascontiguousarray(params.w_ro, dtype=dt)
        ro_t = np.ascontiguousarray(params.w_ro.T, dtype=dt)
        b_ro = np.ascontiguousarray(params.b_ro, dtype=dt)
        y = np.ascontiguousarray(np.atleast_2d(target), dtype=dt)
    else:
        ro = np.zeros((1, 1), dtype=dt)
        ro_t = np.zeros((1, 1), dtype=dt)
        b_ro = np.zeros(1, dtype=dt)
        y = np.zeros((1, 1), dtype=dt)

    resid = np.zeros(us[0].shape[0])
    kern = _relax_c if complex_mode else _relax_r
    hop = net.kind == ModelKind.HOPFIELD
    updates, status = kern(us, xin, fwd_t, bwd_t, b, fb_t, ro, ro_t, b_ro, y,
                           dt(beta), use_nudge, df, hop, float(tol),
                           int(max_steps), float(damping), resid)
    return [np.asarray(u) for u in us], updates, resid, status
