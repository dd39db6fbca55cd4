"""Layer primitives built on the tape: dense, affine norm, LSTM scan, attention."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, record_op

NEG_INF = -1e9


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, W), b)


def affine_norm(x: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
    """Per-feature learned scale and shift (no batch statistics)."""
    return ad.add(ad.mul(x, gain), shift)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lstm_core(X, m, Wd, bd, h0):
    """K independent LSTMs stepped together.

    X[K, B, T, I], m[B, T, 1], Wd[K, I + H, 4H], bd[K, 4H], h0[K, B, H] or None.
    Returns (out[K, B, T, H], backward) where ``backward(G)`` gives
    (dX, dW, db, dh0) for an output gradient G[K, B, T, H].
    """
    K, B, T, I = X.shape
    Hn = Wd.shape[2] // 4
    Wx, Wh = Wd[:, :I], Wd[:, I:]
    pre = X @ Wx[:, None] + bd[:, None, None]         # [K, B, T, 4H]
    full = m[:, :, 0].min(axis=0) > 0                  # steps where no row is padded
    h = np.zeros((K, B, Hn)) if h0 is None else h0.copy()
    c = np.zeros((K, B, Hn))
    out = np.zeros((K, B, T, Hn))
    gates = np.empty((K, B, T, 4 * Hn))
    h_prev = np.empty((K, B, T, Hn))
    c_prev = np.empty((K, B, T, Hn))
    tcs = np.empty((K, B, T, Hn))
    for t in range(T):
        h_prev[:, :, t], c_prev[:, :, t] = h, c
        z = gates[:, :, t]
        a = pre[:, :, t] + h @ Wh
        z[...] = _sigmoid(a)
        z[..., 2 * Hn:3 * Hn] = np.tanh(a[..., 2 * Hn:3 * Hn])
        c_new = z[..., Hn:2 * Hn] * c + z[..., :Hn] * z[..., 2 * Hn:3 * Hn]
        tc = tcs[:, :, t] = np.tanh(c_new)
        h_new = z[..., 3 * Hn:] * tc
        if full[t]:
            c, h = c_new, h_new
            out[:, :, t] = h_new
        else:
            mt = m[:, t]
            c = c + mt * (c_new - c)
            h = h + mt * (h_new - h)
            out[:, :, t] = mt * h_new

    def backward(G):
        # gate-local derivative factors, vectorised over time
        i, f, g, o = (gates[..., k * Hn:(k + 1) * Hn] for k in range(4))
        Fc = np.stack([g * i * (1.0 - i), c_prev * f * (1.0 - f), i * (1.0 - g * g)], axis=3)  # [K,B,T,3,H]
        Fo = tcs * o * (1.0 - o)
        Oc = o * (1.0 - tcs * tcs)
        DA = np.empty((K, B, T, 4, Hn))
        dh_next = np.zeros((K, B, Hn))
        dc_next = np.zeros((K, B, Hn))
        WhT = np.swapaxes(Wh, 1, 2)
        for t in range(T - 1, -1, -1):
            if full[t]:
                dh_new = G[:, :, t] + dh_next
                dc = dc_next + dh_new * Oc[:, :, t]
            else:
                mt = m[:, t]
                dh_new = mt * (G[:, :, t] + dh_next)
                dc = mt * dc_next + dh_new * Oc[:, :, t]
            DA[:, :, t, :3] = dc[:, :, None] * Fc[:, :, t]
            DA[:, :, t, 3] = dh_new * Fo[:, :, t]
            dh = DA[:, :, t].reshape(K, B, 4 * Hn) @ WhT
            dcf = dc * f[:, :, t]
            if full[t]:
                dh_next, dc_next = dh, dcf
            else:
                dh_next = dh + (1.0 - mt) * dh_next
                dc_next = dcf + (1.0 - mt) * dc_next
        DA = DA.reshape(K, B, T, 4 * Hn)
        flat = DA.reshape(K, B * T, 4 * Hn)
        dX = DA @ np.swapaxes(Wx, 1, 2)[:, None]
        dW = np.concatenate([np.swapaxes(X.reshape(K, B * T, I), 1, 2) @ flat,
                             np.swapaxes(h_prev.reshape(K, B * T, Hn), 1, 2) @ flat], axis=1)
        return dX, dW, flat.sum(axis=1), dh_next

    return out, backward


def _check_lstm_shapes(I, W):
    Hn = W.data.shape[1] // 4
    if W.data.shape[0] != I + Hn:
        raise ValueError(f"LSTM weight shape {W.data.shape} does not match input width {I}")


def lstm_scan(x: Tensor, mask: np.ndarray, W: Tensor, b: Tensor, h0: Tensor | None = None) -> Tensor:
    """Run one LSTM direction over x[B, T, I] with a {0,1} mask[B, T].

    W is [(I + H), 4H] with gate blocks ordered (input, forget, cell, output).
    Masked steps carry the state unchanged and emit zeros. Returns H[B, T, H].
    """
    _check_lstm_shapes(x.data.shape[2], W)
    m = np.asarray(mask, dtype=np.float64)[:, :, None]
    out, back = _lstm_core(x.data[None], m, W.data[None], b.data[None],
                           None if h0 is None else h0.data[None])
    inputs = (x, W, b) if h0 is None else (x, W, b, h0)

    def bw(g, needs):
        dX, dW, db, dh0 = back(g[None])
        grads = (dX[0], dW[0], db[0])
        return grads if h0 is None else grads + (dh0[0],)

    return record_op("lstm_scan", out[0], inputs, bw)


def reverse_index(lengths, T: int) -> np.ndarray:
    """Per-row time indices reversing each sequence within its own length."""
    idx = np.tile(np.arange(T), (len(lengths), 1))
    for r, n in enumerate(lengths):
        idx[r, :n] = np.arange(n - 1, -1, -1)
    return idx


def bilstm(x: Tensor, mask: np.ndarray, lengths, fwd: tuple, bwd: tuple,
           h0: tuple | None = None) -> Tensor:
    """Bidirectional layer: [forward scan | within-length reversed scan] -> [B, T, 2H].

    Both directions are stepped together as one fused op.
    """
    (Wf, bf), (Wb, bb) = fwd, bwd
    B, T, I = x.data.shape
    _check_lstm_shapes(I, Wf)
    _check_lstm_shapes(I, Wb)
    rows = np.arange(B)[:, None]
    rev = reverse_index(lengths, T)
    m = np.asarray(mask, dtype=np.float64)[:, :, None]
    X = np.stack([x.data, x.data[rows, rev]])
    H0 = None if h0 is None else np.stack([h0[0].data, h0[1].data])
    out, back = _lstm_core(X, m, np.stack([Wf.data, Wb.data]), np.stack([bf.data, bb.data]), H0)
    Hn = out.shape[-1]
    y = np.concatenate([out[0], out[1][rows, rev]], axis=-1)
    inputs = (x, Wf, bf, Wb, bb) + (() if h0 is None else tuple(h0))

    def bw(g, needs):
        G = np.stack([g[..., :Hn], np.zeros_like(out[1])])
        G[1][rows, rev] = g[..., Hn:]
        dX, dW, db, dh0 = back(G)
        dx_b = np.empty_like(dX[1])
        dx_b[rows, rev] = dX[1]  # rev is a per-row permutation
        grads = (dX[0] + dx_b, dW[0], db[0], dW[1], db[1])
        return grads if h0 is None else grads + (dh0[0], dh0[1])

    return record_op("bilstm", y, inputs, bw)


def key_mask_bias(mask: np.ndarray, n_queries: int) -> np.ndarray:
    """Additive bias [B, n_queries, T] that blocks padded keys."""
    bias = np.where(mask > 0, 0.0, NEG_INF)[:, None, :]
    return np.broadcast_to(bias, (mask.shape[0], n_queries, mask.shape[1])).copy()


def self_attention(x: Tensor, bias: np.ndarray, p: dict, prefix: str) -> Tensor:
    """Single-head attention block with residual and a ReLU feed-forward."""
    d = x.data.shape[-1]
    q = dense(x, p[prefix + "q.W"], p[prefix + "q.b"])
    k = dense(x, p[prefix + "k.W"], p[prefix + "k.b"])
    v = dense(x, p[prefix + "v.W"], p[prefix + "v.b"])
    scores = ad.add(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d)), bias)
    attn = ad.softmax(scores)
    h = ad.add(x, dense(ad.matmul(attn, v), p[prefix + "o.W"], p[prefix + "o.b"]))
    ff = dense(ad.relu(dense(h, p[prefix + "ff1.W"], p[prefix + "ff1.b"])),
               p[prefix + "ff2.W"], p[prefix + "ff2.b"])
    return ad.add(h, ff)


def positional_encoding(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
