"""Hot loops of the reference solver and the surrogate's training step.

The face-flux accumulation dominates the solver runtime on fine meshes; the
smooth-rectifier activations, neighbor scatter-sums, and Adam updates dominate
a training step (the latent width is small, so GEMM time is negligible next to
elementwise work).  When numba is available the loops are JIT-compiled;
otherwise vectorized numpy fallbacks with matching arithmetic are used.  Both
paths are serial and deterministic; they agree to float rounding but not
bitwise, so reproducibility claims hold per installed path.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco(args[0]) if args and callable(args[0]) else deco


def _flux_accumulate_py(h, u, v, z, fi, fj, fnx, fny, flen, g, n):
    zi, zj = z[fi], z[fj]
    zstar = np.maximum(zi, zj)
    hi, hj = h[fi], h[fj]
    hl = np.maximum(hi + zi - zstar, 0.0)
    hr = np.maximum(hj + zj - zstar, 0.0)
    ul, vl = u[fi], v[fi]
    ur, vr = u[fj], v[fj]
    unl = ul * fnx + vl * fny
    unr = ur * fnx + vr * fny
    cl = np.sqrt(g * hl)
    cr = np.sqrt(g * hr)
    lam = np.maximum(np.abs(unl) + cl, np.abs(unr) + cr)

    fm = 0.5 * (hl * unl + hr * unr) - 0.5 * lam * (hr - hl)
    pl = 0.5 * g * hl * hl
    pr = 0.5 * g * hr * hr
    fx = 0.5 * (hl * ul * unl + pl * fnx + hr * ur * unr + pr * fnx) \
        - 0.5 * lam * (hr * ur - hl * ul)
    fy = 0.5 * (hl * vl * unl + pl * fny + hr * vr * unr + pr * fny) \
        - 0.5 * lam * (hr * vr - hl * vl)

    pxi = 0.5 * g * (hi * hi - hl * hl)
    pxj = 0.5 * g * (hj * hj - hr * hr)

    dh = (np.bincount(fj, weights=flen * fm, minlength=n)
          - np.bincount(fi, weights=flen * fm, minlength=n))
    dmx = (np.bincount(fj, weights=flen * (fx + pxj * fnx), minlength=n)
           - np.bincount(fi, weights=flen * (fx + pxi * fnx), minlength=n))
    dmy = (np.bincount(fj, weights=flen * (fy + pxj * fny), minlength=n)
           - np.bincount(fi, weights=flen * (fy + pxi * fny), minlength=n))
    return dh, dmx, dmy


@njit(cache=True)
def _flux_accumulate_nb(h, u, v, z, fi, fj, fnx, fny, flen, g, n):  # pragma: no cover
    dh = np.zeros(n)
    dmx = np.zeros(n)
    dmy = np.zeros(n)
    for k in range(fi.shape[0]):
        i = fi[k]
        j = fj[k]
        nx = fnx[k]
        ny = fny[k]
        zstar = max(z[i], z[j])
        hl = max(h[i] + z[i] - zstar, 0.0)
        hr = max(h[j] + z[j] - zstar, 0.0)
        unl = u[i] * nx + v[i] * ny
        unr = u[j] * nx + v[j] * ny
        cl = np.sqrt(g * hl)
        cr = np.sqrt(g * hr)
        lam = max(abs(unl) + cl, abs(unr) + cr)

        fm = 0.5 * (hl * unl + hr * unr) - 0.5 * lam * (hr - hl)
        pl = 0.5 * g * hl * hl
        pr = 0.5 * g * hr * hr
        fx = 0.5 * (hl * u[i] * unl + pl * nx + hr * u[j] * unr + pr * nx) \
            - 0.5 * lam * (hr * u[j] - hl * u[i])
        fy = 0.5 * (hl * v[i] * unl + pl * ny + hr * v[j] * unr + pr * ny) \
            - 0.5 * lam * (hr * v[j] - hl * v[i])

        pxi = 0.5 * g * (h[i] * h[i] - hl * hl)
        pxj = 0.5 * g * (h[j] * h[j] - hr * hr)

        ln = flen[k]
        dh[i] -= ln * fm
        dh[j] += ln * fm
        dmx[i] -= ln * (fx + pxi * nx)
        dmx[j] += ln * (fx + pxj * nx)
        dmy[i] -= ln * (fy + pxi * ny)
        dmy[j] += ln * (fy + pxj * ny)
    return dh, dmx, dmy


def flux_accumulate(h, u, v, z, fi, fj, fnx, fny, flen, g, n):
    """Per-node accumulated mass and momentum tendencies from all interior faces."""
    if HAVE_NUMBA:
        return _flux_accumulate_nb(h, u, v, z, fi, fj, fnx, fny, flen, g, n)
    return _flux_accumulate_py(h, u, v, z, fi, fj, fnx, fny, flen, g, n)


@njit(cache=True)
def _silu_forward_nb(pre):  # pragma: no cover
    rows, cols = pre.shape
    s = np.empty((rows, cols))
    a = np.empty((rows, cols))
    for i in range(rows):
        for j in range(cols):
            x = pre[i, j]
            if x >= 0.0:
                sv = 1.0 / (1.0 + np.exp(-x))
            else:
                e = np.exp(x)
                sv = e / (1.0 + e)
            s[i, j] = sv
            a[i, j] = x * sv
    return s, a


@njit(cache=True)
def _silu_backward_nb(dy, pre, s):  # pragma: no cover
    rows, cols = pre.shape
    dpre = np.empty((rows, cols))
    for i in range(rows):
        for j in range(cols):
            sv = s[i, j]
            dpre[i, j] = dy[i, j] * (sv * (1.0 + pre[i, j] * (1.0 - sv)))
    return dpre


def silu_forward(pre):
    """Smooth-rectifier activation; returns (sigmoid(pre), pre * sigmoid(pre)).

    The sigmoid is cached so the backward pass never re-exponentiates."""
    if HAVE_NUMBA:
        return _silu_forward_nb(pre)
    s = expit(pre)
    return s, pre * s


def silu_backward(dy, pre, s):
    """Upstream gradient times the activation derivative, using the cached
    sigmoid from the forward pass."""
    if HAVE_NUMBA:
        return _silu_backward_nb(dy, pre, s)
    return dy * (s * (1.0 + pre * (1.0 - s)))


@njit(cache=True)
def _mlp3_forward_nb(x, w0, b0, w1, b1, w2, b2):  # pragma: no cover
    p0 = np.dot(x, w0)
    rows, c0 = p0.shape
    s0 = np.empty((rows, c0))
    a0 = np.empty((rows, c0))
    for i in range(rows):
        for j in range(c0):
            t = p0[i, j] + b0[j]
            p0[i, j] = t
            if t >= 0.0:
                sv = 1.0 / (1.0 + np.exp(-t))
            else:
                e = np.exp(t)
                sv = e / (1.0 + e)
            s0[i, j] = sv
            a0[i, j] = t * sv
    p1 = np.dot(a0, w1)
    c1 = p1.shape[1]
    s1 = np.empty((rows, c1))
    a1 = np.empty((rows, c1))
    for i in range(rows):
        for j in range(c1):
            t = p1[i, j] + b1[j]
            p1[i, j] = t
            if t >= 0.0:
                sv = 1.0 / (1.0 + np.exp(-t))
            else:
                e = np.exp(t)
                sv = e / (1.0 + e)
            s1[i, j] = sv
            a1[i, j] = t * sv
    out = np.dot(a1, w2)
    c2 = out.shape[1]
    for i in range(rows):
        for j in range(c2):
            out[i, j] += b2[j]
    return out, p0, s0, a0, p1, s1, a1


@njit(cache=True)
def _col_sum_nb(a):  # pragma: no cover
    rows, cols = a.shape
    out = np.zeros(cols)
    for i in range(rows):
        for j in range(cols):
            out[j] += a[i, j]
    return out


@njit(cache=True)
def _mlp3_backward_nb(dy, x, p0, s0, a0, p1, s1, a1, w0, w1, w2):  # pragma: no cover
    dw2 = np.dot(a1.T, dy)
    db2 = _col_sum_nb(dy)
    da1 = np.dot(dy, w2.T)
    rows, c1 = p1.shape
    for i in range(rows):
        for j in range(c1):
            sv = s1[i, j]
            da1[i, j] *= sv * (1.0 + p1[i, j] * (1.0 - sv))
    dw1 = np.dot(a0.T, da1)
    db1 = _col_sum_nb(da1)
    da0 = np.dot(da1, w1.T)
    c0 = p0.shape[1]
    for i in range(rows):
        for j in range(c0):
            sv = s0[i, j]
            da0[i, j] *= sv * (1.0 + p0[i, j] * (1.0 - sv))
    dw0 = np.dot(x.T, da0)
    db0 = _col_sum_nb(da0)
    dx = np.dot(da0, w0.T)
    return dx, dw0, db0, dw1, db1, dw2, db2


@njit(cache=True)
def _scatter_sum_nb(values, index, n):  # pragma: no cover
    cols = values.shape[1]
    out = np.zeros((n, cols))
    for k in range(index.shape[0]):
        i = index[k]
        for j in range(cols):
            out[i, j] += values[k, j]
    return out


def scatter_sum(values, index, n):
    """Row-wise sum of `values` into `n` output rows, index-ordered."""
    if HAVE_NUMBA:
        return _scatter_sum_nb(values, index, n)
    out = np.zeros((n, values.shape[1]))
    np.add.at(out, index, values)
    return out


@njit(cache=True)
def _adam_apply_nb(p, g, m, v, lr, beta1, beta2, c1, c2, eps):  # pragma: no cover
    for i in range(p.shape[0]):
        gi = g[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


def adam_apply(p, g, m, v, lr, beta1, beta2, c1, c2, eps):
    """In-place bias-corrected Adam update of one parameter array."""
    if HAVE_NUMBA:
        _adam_apply_nb(p.ravel(), np.ascontiguousarray(g).ravel(),
                       m.ravel(), v.ravel(), lr, beta1, beta2, c1, c2, eps)
        return
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
