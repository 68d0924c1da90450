"""Fused hot-loop kernels: GRU recurrence and Adam parameter updates.

Each kernel exists twice, as a numba ``@njit`` build and as a pure-numpy build
computing the same arithmetic in the same order.  The numpy path is selected
with ``ARENATRAJ_NUMBA=0`` (and automatically when numba is not importable).
``python -m arenatraj.bench`` times one backend against the other.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f

        return deco if not args else deco(*args)


_backend = "numba" if (HAS_NUMBA and os.environ.get("ARENATRAJ_NUMBA", "1") != "0") else "numpy"


def active_backend() -> str:
    return _backend


def use(name: str) -> None:
    """Switch kernel backend at runtime ('numba' or 'numpy')."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    _backend = name


def _sigmoid(a: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-a))


# --- GRU sequence forward -------------------------------------------------
#
# Gate layout along the stacked axis is [reset, update, candidate].
# Weights: w_ih (3H, Din), w_hh (3H, H), biases (3H,).
#   r_t = sigmoid(x_t W_ir^T + b_ir + h_{t-1} W_hr^T + b_hr)
#   u_t = sigmoid(x_t W_iu^T + b_iu + h_{t-1} W_hu^T + b_hu)
#   n_t = tanh(x_t W_in^T + b_in + r_t * (h_{t-1} W_hn^T + b_hn))
#   h_t = (1 - u_t) * n_t + u_t * h_{t-1}
# The input projection x @ w_ih.T + b_ih is hoisted out of the time loop.


def _gru_fwd_numpy(xp, w_hh_t, b_hh):
    B, T, H3 = xp.shape
    H = H3 // 3
    h_seq = np.empty((B, T, H))
    gates = np.empty((B, T, H3))
    ghn = np.empty((B, T, H))
    h = np.zeros((B, H))
    for t in range(T):
        gh = np.dot(h, w_hh_t) + b_hh
        r = _sigmoid(xp[:, t, :H] + gh[:, :H])
        u = _sigmoid(xp[:, t, H : 2 * H] + gh[:, H : 2 * H])
        gn = gh[:, 2 * H :]
        n = np.tanh(xp[:, t, 2 * H :] + r * gn)
        h = (1.0 - u) * n + u * h
        gates[:, t, :H] = r
        gates[:, t, H : 2 * H] = u
        gates[:, t, 2 * H :] = n
        ghn[:, t] = gn
        h_seq[:, t] = h
    return h_seq, gates, ghn


@njit(cache=True)
def _gru_fwd_numba(xp, w_hh_t, b_hh):  # pragma: no cover - numba path
    B, T, H3 = xp.shape
    H = H3 // 3
    h_seq = np.empty((B, T, H))
    gates = np.empty((B, T, H3))
    ghn = np.empty((B, T, H))
    h = np.zeros((B, H))
    for t in range(T):
        gh = np.dot(h, w_hh_t)
        for b in range(B):
            for j in range(H):
                pr = gh[b, j] + b_hh[j]
                pu = gh[b, H + j] + b_hh[H + j]
                gn = gh[b, 2 * H + j] + b_hh[2 * H + j]
                r = 1.0 / (1.0 + np.exp(-(xp[b, t, j] + pr)))
                u = 1.0 / (1.0 + np.exp(-(xp[b, t, H + j] + pu)))
                n = np.tanh(xp[b, t, 2 * H + j] + r * gn)
                hn = (1.0 - u) * n + u * h[b, j]
                gates[b, t, j] = r
                gates[b, t, H + j] = u
                gates[b, t, 2 * H + j] = n
                ghn[b, t, j] = gn
                h_seq[b, t, j] = hn
                h[b, j] = hn
    return h_seq, gates, ghn


def gru_forward(x, w_ih, w_hh, b_ih, b_hh):
    """x (B,T,Din) -> h_seq (B,T,H) plus the cache backward needs."""
    B, T, Din = x.shape
    H3 = w_ih.shape[0]
    xp = x.reshape(B * T, Din) @ w_ih.T + b_ih
    xp = np.ascontiguousarray(xp.reshape(B, T, H3))
    w_hh_t = np.ascontiguousarray(w_hh.T)
    if _backend == "numba":
        h_seq, gates, ghn = _gru_fwd_numba(xp, w_hh_t, b_hh)
    else:
        h_seq, gates, ghn = _gru_fwd_numpy(xp, w_hh_t, b_hh)
    return h_seq, (gates, ghn, h_seq)


def _gru_bwd_numpy(dh_seq, h_seq, gates, ghn, w_hh):
    B, T, H3 = gates.shape
    H = H3 // 3
    dxp = np.empty((B, T, H3))
    dgh = np.empty((B, T, H3))
    carry = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dh_seq[:, t] + carry
        h_prev = h_seq[:, t - 1] if t > 0 else np.zeros((B, H))
        r = gates[:, t, :H]
        u = gates[:, t, H : 2 * H]
        n = gates[:, t, 2 * H :]
        dug = dh * (h_prev - n)
        dn = dh * (1.0 - u)
        carry = dh * u
        dnp = dn * (1.0 - n * n)
        dgn = dnp * r
        dr = dnp * ghn[:, t]
        drp = dr * r * (1.0 - r)
        dup = dug * u * (1.0 - u)
        dxp[:, t, :H] = drp
        dxp[:, t, H : 2 * H] = dup
        dxp[:, t, 2 * H :] = dnp
        dgh[:, t, :H] = drp
        dgh[:, t, H : 2 * H] = dup
        dgh[:, t, 2 * H :] = dgn
        carry = carry + np.dot(dgh[:, t], w_hh)
    return dxp, dgh


@njit(cache=True)
def _gru_bwd_numba(dh_seq, h_seq, gates, ghn, w_hh):  # pragma: no cover
    B, T, H3 = gates.shape
    H = H3 // 3
    dxp = np.empty((B, T, H3))
    dgh = np.empty((B, T, H3))
    carry = np.zeros((B, H))
    dgh_t = np.empty((B, H3))
    for t in range(T - 1, -1, -1):
        for b in range(B):
            for j in range(H):
                dh = dh_seq[b, t, j] + carry[b, j]
                hp = h_seq[b, t - 1, j] if t > 0 else 0.0
                r = gates[b, t, j]
                u = gates[b, t, H + j]
                n = gates[b, t, 2 * H + j]
                dug = dh * (hp - n)
                dn = dh * (1.0 - u)
                carry[b, j] = dh * u
                dnp = dn * (1.0 - n * n)
                dgn = dnp * r
                dr = dnp * ghn[b, t, j]
                drp = dr * r * (1.0 - r)
                dup = dug * u * (1.0 - u)
                dxp[b, t, j] = drp
                dxp[b, t, H + j] = dup
                dxp[b, t, 2 * H + j] = dnp
                dgh_t[b, j] = drp
                dgh_t[b, H + j] = dup
                dgh_t[b, 2 * H + j] = dgn
        carry += np.dot(dgh_t, w_hh)
        dgh[:, t] = dgh_t
    return dxp, dgh


def gru_backward(dh_seq, x, cache, w_ih, w_hh):
    """Adjoint of gru_forward; returns (dx, dw_ih, dw_hh, db_ih, db_hh)."""
    gates, ghn, h_seq = cache
    B, T, H = h_seq.shape
    dh_seq = np.ascontiguousarray(dh_seq)
    if _backend == "numba":
        dxp, dgh = _gru_bwd_numba(dh_seq, h_seq, gates, ghn, np.ascontiguousarray(w_hh))
    else:
        dxp, dgh = _gru_bwd_numpy(dh_seq, h_seq, gates, ghn, w_hh)
    Din = x.shape[2]
    xp_flat = dxp.reshape(B * T, 3 * H)
    dx = (xp_flat @ w_ih).reshape(B, T, Din)
    dw_ih = xp_flat.T @ x.reshape(B * T, Din)
    db_ih = dxp.sum(axis=(0, 1))
    h_prev_seq = np.concatenate([np.zeros((B, 1, H)), h_seq[:, :-1]], axis=1)
    dgh_flat = dgh.reshape(B * T, 3 * H)
    dw_hh = dgh_flat.T @ h_prev_seq.reshape(B * T, H)
    db_hh = dgh.sum(axis=(0, 1))
    return dx, dw_ih, dw_hh, db_ih, db_hh


# --- Adam update ----------------------------------------------------------


def _adam_numpy(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@njit(cache=True)
def _adam_numba(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):  # pragma: no cover
    for i in range(p.size):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)


def adam_update(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam step; `step` counts from 1."""
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    g = np.ascontiguousarray(grad, dtype=np.float64)
    if _backend == "numba":
        _adam_numba(param.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                    lr, beta1, beta2, eps, bc1, bc2)
    else:
        _adam_numpy(param.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                    lr, beta1, beta2, eps, bc1, bc2)
