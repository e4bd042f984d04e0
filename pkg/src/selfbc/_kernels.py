"""Fused elementwise kernels for the MLP forward/backward passes.

Matrix products stay in numpy/BLAS; everything between them (bias, layer
norm, ReLU, tanh and their derivatives) runs here in one pass per row.
No fastmath: results are plain IEEE float64 and bit-reproducible.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def bias_relu_fwd(z, b):
    n, k = z.shape
    y = np.empty((n, k))
    h = np.empty((n, k))
    for i in range(n):
        for j in range(k):
            v = z[i, j] + b[j]
            y[i, j] = v
            h[i, j] = v if v > 0.0 else 0.0
    return y, h


@njit(cache=True)
def bias_ln_relu_fwd(z, b, g, beta, eps):
    n, k = z.shape
    xhat = np.empty((n, k))
    inv = np.empty(n)
    y = np.empty((n, k))
    h = np.empty((n, k))
    for i in range(n):
        s = 0.0
        for j in range(k):
            s += z[i, j] + b[j]
        mu = s / k
        var = 0.0
        for j in range(k):
            d = z[i, j] + b[j] - mu
            var += d * d
        iv = 1.0 / np.sqrt(var / k + eps)
        inv[i] = iv
        for j in range(k):
            xh = (z[i, j] + b[j] - mu) * iv
            xhat[i, j] = xh
            v = xh * g[j] + beta[j]
            y[i, j] = v
            h[i, j] = v if v > 0.0 else 0.0
    return xhat, inv, y, h


@njit(cache=True)
def bias_out_fwd(z, b, use_tanh, scale):
    n, k = z.shape
    out = np.empty((n, k))
    t = np.empty((n, k))
    for i in range(n):
        for j in range(k):
            v = z[i, j] + b[j]
            if use_tanh:
                tv = np.tanh(v)
                t[i, j] = tv
                out[i, j] = scale * tv
            else:
                out[i, j] = v
    return out, t


@njit(cache=True)
def out_bwd(grad_out, t, use_tanh, scale):
    """dL/dz of the output layer and the bias gradient."""
    n, k = grad_out.shape
    dz = np.empty((n, k))
    db = np.zeros(k)
    for i in range(n):
        for j in range(k):
            if use_tanh:
                v = grad_out[i, j] * (scale * (1.0 - t[i, j] * t[i, j]))
            else:
                v = grad_out[i, j]
            dz[i, j] = v
            db[j] += v
    return dz, db


@njit(cache=True)
def relu_bwd(dh, y):
    n, k = dh.shape
    dz = np.empty((n, k))
    db = np.zeros(k)
    for i in range(n):
        for j in range(k):
            v = dh[i, j] if y[i, j] > 0.0 else 0.0
            dz[i, j] = v
            db[j] += v
    return dz, db


@njit(cache=True)
def ln_relu_bwd(dh, y, xhat, inv, g):
    """Backprop through ReLU then the layer-norm affine and normalization.

    Returns dL/dz (pre-normalization, bias included), and the gradients of
    the bias, gain and shift.
    """
    n, k = dh.shape
    dz = np.empty((n, k))
    db = np.zeros(k)
    dg = np.zeros(k)
    dbeta = np.zeros(k)
    dxhat = np.empty(k)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(k):
            dy = dh[i, j] if y[i, j] > 0.0 else 0.0
            dg[j] += dy * xhat[i, j]
            dbeta[j] += dy
            dx = dy * g[j]
            dxhat[j] = dx
            s1 += dx
            s2 += dx * xhat[i, j]
        s1 /= k
        s2 /= k
        iv = inv[i]
        for j in range(k):
            v = iv * (dxhat[j] - s1 - xhat[i, j] * s2)
            dz[i, j] = v
            db[j] += v
    return dz, db, dg, dbeta


@njit(cache=True)
def adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """Bias-corrected Adam; returns new (params, first moment, second moment)."""
    n = p.shape[0]
    p_new = np.empty(n)
    m_new = np.empty(n)
    v_new = np.empty(n)
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
        m_new[i] = mi
        v_new[i] = vi
        p_new[i] = p[i] - lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)
    return p_new, m_new, v_new
