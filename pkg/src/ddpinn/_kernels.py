"""Fused single-pass loops for the activation jet (numba), used when numba imports.

Layout matches ``autodiff.activation_jet``: arrays are (C, N, W) with channel 0
the value, channels 1..D first derivatives, channels D+1.. second derivatives
of the first-derivative channels listed in ``sidx``.
"""

import math

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba ships with the supported environments
    numba = None

TANH, SIN, COS = 0, 1, 2
KIND_CODES = {"tanh": TANH, "sin": SIN, "cos": COS}

if numba is not None:
    jit = numba.njit(cache=True, nogil=True)

    @jit
    def act_forward(h, c, kind, ndims, sidx, order, out, f0, f1):
        # f0, f1 (activation value and slope at c*h[0]) are filled by the caller with
        # vectorised numpy transcendentals, which beat libm calls from a loop.
        n_pts, width = h.shape[1], h.shape[2]
        ns = sidx.shape[0]
        for i in range(n_pts):
            for k in range(width):
                t = f0[i, k]
                d1 = f1[i, k]
                d2 = -2.0 * t * d1 if kind == TANH else -t
                out[0, i, k] = t
                if order >= 1:
                    for d in range(ndims):
                        out[1 + d, i, k] = d1 * (c * h[1 + d, i, k])
                if order >= 2:
                    for s in range(ns):
                        p1 = c * h[1 + sidx[s], i, k]
                        out[1 + ndims + s, i, k] = d1 * (c * h[1 + ndims + s, i, k]) + d2 * (p1 * p1)

    @jit
    def act_backward(g, h, c, kind, ndims, sidx, order, f0, f1, gh):
        n_pts, width = h.shape[1], h.shape[2]
        ns = sidx.shape[0]
        gc = 0.0
        for i in range(n_pts):
            for k in range(width):
                t = f0[i, k]
                d1 = f1[i, k]
                if kind == TANH:
                    d2 = -2.0 * t * d1
                    d3 = d1 * (4.0 * t * t - 2.0 * d1)
                else:
                    d2 = -t
                    d3 = -d1
                gv = g[0, i, k] * d1
                if order >= 1:
                    for d in range(ndims):
                        g1 = g[1 + d, i, k]
                        gv += d2 * g1 * (c * h[1 + d, i, k])
                        gh[1 + d, i, k] = g1 * d1
                if order >= 2:
                    for s in range(ns):
                        g2 = g[1 + ndims + s, i, k]
                        p1 = c * h[1 + sidx[s], i, k]
                        p2 = c * h[1 + ndims + s, i, k]
                        gv += g2 * (d2 * p2 + d3 * (p1 * p1))
                        gh[1 + sidx[s], i, k] += 2.0 * d2 * g2 * p1
                        gh[1 + ndims + s, i, k] = g2 * d1
                gh[0, i, k] = gv
                # gh holds d/dz so far; fold in dz/dh = c and accumulate d/dc = sum(gz * h)
                for ch in range(gh.shape[0]):
                    gc += gh[ch, i, k] * h[ch, i, k]
                    gh[ch, i, k] *= c
        return gc

    AVAILABLE = True
else:
    AVAILABLE = False


def phi01(kind, v):
    """Activation value and first derivative, vectorised."""
    if kind == "tanh":
        t = np.tanh(v)
        return t, 1.0 - t * t
    if kind == "sin":
        return np.sin(v), np.cos(v)
    return np.cos(v), -np.sin(v)


def sidx_array(second, ndims):
    if isinstance(second, slice):
        return np.arange(ndims, dtype=np.int64)
    return np.asarray(second, dtype=np.int64)
