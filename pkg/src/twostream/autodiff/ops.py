"""Differentiable ops over [B, F, C, H, W] video tensors.

Every op loops over batch items and never reduces across them inside a
single numpy call, so an item's values (and its parameter-gradient
contribution) are bitwise identical whatever batch it travels in.
Per-item parameter gradients are summed in item order.

Saved-tensor contract (drives retained-byte accounting):

=================  ===========================================
convs, linear      input
attention          input, post-softmax matrix
group_norm         input, per-group mean, per-group inverse std
silu               input
reduce_mean_sq     input
add/concat/...     nothing
=================  ===========================================
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import NonFiniteError, Parameter, ShapeError, Tensor, active_tape, record

# scores block kept near this many elements per chunk of sequences
_ATTN_CHUNK = 1 << 20


def _acc(acc: Optional[np.ndarray], val: np.ndarray) -> np.ndarray:
    return val if acc is None else acc + val


def _video(x: Tensor, what: str) -> None:
    if x.data.ndim != 5:
        raise ShapeError(f"{what} expects [B,F,C,H,W], got {x.shape}")


# ---------------------------------------------------------------- convolution

def _im2col(xb: np.ndarray, k: int) -> np.ndarray:
    F, C, H, W = xb.shape
    if k == 1:
        return xb.transpose(0, 2, 3, 1).reshape(F * H * W, C)
    xp = np.pad(xb, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(F * H * W, C * 9)


def _col2im(dcols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    F, C, H, W = shape
    if k == 1:
        return dcols.reshape(F, H, W, C).transpose(0, 3, 1, 2)
    d = dcols.reshape(F, H, W, C, 3, 3)
    dxp = np.zeros((F, C, H + 2, W + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + H, j:j + W] += d[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


def conv2d(x: Tensor, weight: Parameter, bias: Parameter, kind: str = "conv_spatial") -> Tensor:
    """Per-frame 2-D convolution, stride 1, zero padding ``k // 2``.

    ``weight`` is [C_out, C_in, k, k] with k in {1, 3}.  ``kind`` selects the
    recorded op kind: ``conv_spatial`` for spatial layers, ``conv_io`` for the
    stem/head/fusion convolutions that must not carry a spatial tag.
    """
    _video(x, kind)
    w = weight.data
    O, C, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"unsupported kernel {w.shape}")
    B, F, Cx, H, W = x.shape
    if Cx != C:
        raise ShapeError(f"channel mismatch: input {x.shape} vs weight {w.shape}")
    wm = w.reshape(O, C * k * k)
    bvec = bias.data
    out = np.empty((B, F, O, H, W))
    for b in range(B):
        y = _im2col(x.data[b], k) @ wm.T + bvec
        out[b] = y.reshape(F, H, W, O).transpose(0, 3, 1, 2)
    xd = x.data

    def vjp(g, need_in, need_p):
        dw = db = None
        dx = np.empty_like(xd) if need_in[0] else None
        wm_ = weight.data.reshape(O, C * k * k)
        for b in range(B):
            gm = g[b].transpose(0, 2, 3, 1).reshape(F * H * W, O)
            if need_p[0]:
                dw = _acc(dw, gm.T @ _im2col(xd[b], k))
            if need_p[1]:
                db = _acc(db, gm.sum(axis=0))
            if dx is not None:
                dx[b] = _col2im(gm @ wm_, (F, C, H, W), k)
        return [dx], [None if dw is None else dw.reshape(w.shape), db]

    return record(kind, [x], [weight, bias], [xd], out, vjp)


def conv_spatial(x: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    return conv2d(x, weight, bias, "conv_spatial")


def conv_temporal(x: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    """Depthwise kernel-3 convolution along frames, zero padding 1.

    ``weight`` is [C, 3]; tap 0 reads frame f-1, tap 1 frame f, tap 2 frame f+1.
    """
    _video(x, "conv_temporal")
    B, F, C, H, W = x.shape
    w = weight.data
    if w.shape != (C, 3):
        raise ShapeError(f"channel mismatch: input {x.shape} vs temporal weight {w.shape}")
    xd = x.data
    taps = [w[:, j].reshape(1, C, 1, 1) for j in range(3)]
    bv = bias.data.reshape(1, C, 1, 1)
    out = np.empty_like(xd)
    for b in range(B):
        xp = np.pad(xd[b], ((1, 1), (0, 0), (0, 0), (0, 0)))
        out[b] = taps[0] * xp[0:F] + taps[1] * xp[1:F + 1] + taps[2] * xp[2:F + 2] + bv

    def vjp(g, need_in, need_p):
        dw = db = None
        dx = np.empty_like(xd) if need_in[0] else None
        wt = [weight.data[:, j].reshape(1, C, 1, 1) for j in range(3)]
        for b in range(B):
            gb = g[b]
            if need_p[0]:
                xp = np.pad(xd[b], ((1, 1), (0, 0), (0, 0), (0, 0)))
                dw = _acc(dw, np.stack(
                    [(gb * xp[j:j + F]).sum(axis=(0, 2, 3)) for j in range(3)], axis=1))
            if need_p[1]:
                db = _acc(db, gb.sum(axis=(0, 2, 3)))
            if dx is not None:
                dxp = np.zeros((F + 2, C, H, W))
                for j in range(3):
                    dxp[j:j + F] += wt[j] * gb
                dx[b] = dxp[1:F + 1]
        return [dx], [dw, db]

    return record("conv_temporal", [x], [weight, bias], [xd], out, vjp)


# ------------------------------------------------------------------ attention

def _tokens(xb: np.ndarray, temporal: bool) -> np.ndarray:
    # -> [S, L, C]: spatial = per frame over H*W pixels, temporal = per pixel over F frames
    F, C, H, W = xb.shape
    if temporal:
        return xb.transpose(2, 3, 0, 1).reshape(H * W, F, C)
    return xb.reshape(F, C, H * W).transpose(0, 2, 1)


def _untokens(t: np.ndarray, shape: tuple, temporal: bool) -> np.ndarray:
    F, C, H, W = shape
    if temporal:
        return t.reshape(H, W, F, C).transpose(2, 3, 0, 1)
    return t.transpose(0, 2, 1).reshape(F, C, H, W)


def _softmax_inplace(s: np.ndarray) -> np.ndarray:
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def attention(x: Tensor, params: Sequence[Parameter], temporal: bool) -> Tensor:
    """Single-head self-attention with q/k/v/out projections (C -> C).

    ``params`` = (q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b).  Softmax over
    tokens, logits scaled by 1/sqrt(C).
    """
    kind = "attn_temporal" if temporal else "attn_spatial"
    _video(x, kind)
    if len(params) != 8:
        raise ValueError(f"{kind} needs 8 projection parameters, got {len(params)}")
    B, F, C, H, W = x.shape
    for p in params[0::2]:
        if p.shape != (C, C):
            raise ShapeError(f"channel mismatch: input {x.shape} vs projection {p.shape}")
    qw, qb, kw, kb, vw, vb, ow, ob = (p.data for p in params)
    scale = 1.0 / np.sqrt(C)
    xd = x.data
    S, L = (H * W, F) if temporal else (F, H * W)
    chunk = max(1, _ATTN_CHUNK // (L * L))
    P = np.empty((B, S, L, L))
    out = np.empty_like(xd)
    tape = active_tape()
    pending_id = len(tape.nodes) if tape is not None and tape.recording else None

    for b in range(B):
        X2 = _tokens(xd[b], temporal).reshape(S * L, C)
        Q = (X2 @ qw.T + qb).reshape(S, L, C)
        K = (X2 @ kw.T + kb).reshape(S, L, C)
        V = (X2 @ vw.T + vb).reshape(S, L, C)
        O = np.empty((S, L, C))
        for s0 in range(0, S, chunk):
            sl = slice(s0, s0 + chunk)
            sc = np.matmul(Q[sl], K[sl].transpose(0, 2, 1), out=P[b, sl])
            sc *= scale
            if not np.isfinite(sc).all():
                raise NonFiniteError(f"non-finite softmax input in {kind} at node {pending_id}",
                                     node_id=pending_id, op_kind=kind)
            _softmax_inplace(sc)
            O[sl] = sc @ V[sl]
        Y = O.reshape(S * L, C) @ ow.T + ob
        out[b] = _untokens(Y.reshape(S, L, C), (F, C, H, W), temporal)

    def vjp(g, need_in, need_p):
        qw_, qb_, kw_, kb_, vw_, vb_, ow_, ob_ = (p.data for p in params)
        grads = [None] * 8
        dx = np.empty_like(xd) if need_in[0] else None
        deep = dx is not None or any(need_p[:6])
        for b in range(B):
            X2 = _tokens(xd[b], temporal).reshape(S * L, C)
            V = (X2 @ vw_.T + vb_).reshape(S, L, C)
            Pb = P[b]
            O = np.empty((S, L, C))
            for s0 in range(0, S, chunk):
                sl = slice(s0, s0 + chunk)
                O[sl] = Pb[sl] @ V[sl]
            G2 = _tokens(g[b], temporal).reshape(S * L, C)
            if need_p[6]:
                grads[6] = _acc(grads[6], G2.T @ O.reshape(S * L, C))
            if need_p[7]:
                grads[7] = _acc(grads[7], G2.sum(axis=0))
            if not deep:
                continue
            Q = (X2 @ qw_.T + qb_).reshape(S, L, C)
            K = (X2 @ kw_.T + kb_).reshape(S, L, C)
            dO = (G2 @ ow_).reshape(S, L, C)
            dQ = np.empty((S, L, C))
            dK = np.empty((S, L, C))
            dV = np.empty((S, L, C))
            for s0 in range(0, S, chunk):
                sl = slice(s0, s0 + chunk)
                Pc = Pb[sl]
                dP = dO[sl] @ V[sl].transpose(0, 2, 1)
                dV[sl] = Pc.transpose(0, 2, 1) @ dO[sl]
                dP -= (dP * Pc).sum(axis=-1, keepdims=True)
                dP *= Pc
                dP *= scale
                dQ[sl] = dP @ K[sl]
                dK[sl] = dP.transpose(0, 2, 1) @ Q[sl]
            dQ2, dK2, dV2 = (d.reshape(S * L, C) for d in (dQ, dK, dV))
            for i, d in ((0, dQ2), (2, dK2), (4, dV2)):
                if need_p[i]:
                    grads[i] = _acc(grads[i], d.T @ X2)
                if need_p[i + 1]:
                    grads[i + 1] = _acc(grads[i + 1], d.sum(axis=0))
            if dx is not None:
                dX2 = dQ2 @ qw_ + dK2 @ kw_ + dV2 @ vw_
                dx[b] = _untokens(dX2.reshape(S, L, C), (F, C, H, W), temporal)
        return [dx], grads

    return record(kind, [x], list(params), [xd, P], out, vjp)


def attn_spatial(x: Tensor, params: Sequence[Parameter]) -> Tensor:
    return attention(x, params, temporal=False)


def attn_temporal(x: Tensor, params: Sequence[Parameter]) -> Tensor:
    return attention(x, params, temporal=True)


# ------------------------------------------------------------ pointwise layers

def linear(x: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    """Affine map over the feature axis: last axis of [B, D] or channels of a video."""
    w = weight.data
    O, I = w.shape
    xd = x.data
    video = xd.ndim == 5
    feat = xd.shape[2] if video else xd.shape[-1]
    if xd.ndim not in (2, 5) or feat != I:
        raise ShapeError(f"channel mismatch: input {x.shape} vs weight {w.shape}")
    B = xd.shape[0]
    if video:
        _, F, _, H, W = xd.shape
        out = np.empty((B, F, O, H, W))
    else:
        out = np.empty((B, O))

    def rows(a: np.ndarray) -> np.ndarray:
        return a.transpose(0, 2, 3, 1).reshape(-1, a.shape[1]) if video else a.reshape(1, -1)

    for b in range(B):
        y = rows(xd[b]) @ w.T + bias.data
        out[b] = y.reshape(F, H, W, O).transpose(0, 3, 1, 2) if video else y[0]

    def vjp(g, need_in, need_p):
        dw = db = None
        dx = np.empty_like(xd) if need_in[0] else None
        w_ = weight.data
        for b in range(B):
            G = rows(g[b])
            if need_p[0]:
                dw = _acc(dw, G.T @ rows(xd[b]))
            if need_p[1]:
                db = _acc(db, G.sum(axis=0))
            if dx is not None:
                d = G @ w_
                dx[b] = d.reshape(F, H, W, I).transpose(0, 3, 1, 2) if video else d[0]
        return [dx], [dw, db]

    return record("linear", [x], [weight, bias], [xd], out, vjp)


def group_norm(x: Tensor, gamma: Parameter, beta: Parameter, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-frame group normalization over (C/groups, H, W)."""
    _video(x, "group_norm")
    B, F, C, H, W = x.shape
    if C % groups:
        raise ShapeError(f"{C} channels not divisible into {groups} groups")
    if gamma.shape != (C,):
        raise ShapeError(f"channel mismatch: input {x.shape} vs norm weight {gamma.shape}")
    xd = x.data
    mean = np.empty((B, F, groups))
    inv = np.empty((B, F, groups))
    out = np.empty_like(xd)
    gcol = gamma.data.reshape(1, C, 1, 1)
    bcol = beta.data.reshape(1, C, 1, 1)
    for b in range(B):
        xr = xd[b].reshape(F, groups, -1)
        mu = xr.mean(axis=-1)
        xc = xr - mu[..., None]
        var = (xc * xc).mean(axis=-1)
        iv = 1.0 / np.sqrt(var + eps)
        mean[b], inv[b] = mu, iv
        out[b] = (xc * iv[..., None]).reshape(F, C, H, W) * gcol + bcol

    def vjp(g, need_in, need_p):
        dgam = dbet = None
        dx = np.empty_like(xd) if need_in[0] else None
        gc = gamma.data.reshape(1, C, 1, 1)
        for b in range(B):
            xhat = (xd[b].reshape(F, groups, -1) - mean[b][..., None]) * inv[b][..., None]
            gb = g[b]
            if need_p[0]:
                dgam = _acc(dgam, (gb * xhat.reshape(F, C, H, W)).sum(axis=(0, 2, 3)))
            if need_p[1]:
                dbet = _acc(dbet, gb.sum(axis=(0, 2, 3)))
            if dx is not None:
                dxh = (gb * gc).reshape(F, groups, -1)
                d = dxh - dxh.mean(axis=-1, keepdims=True) \
                    - xhat * (dxh * xhat).mean(axis=-1, keepdims=True)
                dx[b] = (d * inv[b][..., None]).reshape(F, C, H, W)
        return [dx], [dgam, dbet]

    return record("group_norm", [x], [gamma, beta], [xd, mean, inv], out, vjp)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    with np.errstate(over="ignore"):
        for b in range(xd.shape[0]):
            out[b] = xd[b] / (1.0 + np.exp(-xd[b]))

    def vjp(g, need_in, need_p):
        dx = np.empty_like(xd)
        with np.errstate(over="ignore"):
            for b in range(xd.shape[0]):
                s = 1.0 / (1.0 + np.exp(-xd[b]))
                dx[b] = g[b] * (s * (1.0 + xd[b] * (1.0 - s)))
        return [dx], []

    return record("silu", [x], [], [xd], out, vjp)


# ------------------------------------------------------------ shape plumbing

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum.  ``b`` may also be [B, C] against a video ``a``,
    broadcast over frames and pixels (timestep injection)."""
    ad, bd = a.data, b.data
    inject = ad.ndim == 5 and bd.ndim == 2
    if inject:
        if bd.shape != (ad.shape[0], ad.shape[2]):
            raise ShapeError(f"cannot inject {b.shape} into {a.shape}")
        out = ad + bd[:, None, :, None, None]
    else:
        if ad.shape != bd.shape:
            raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
        out = ad + bd

    def vjp(g, need_in, need_p):
        gb = None
        if need_in[1]:
            if inject:
                gb = np.stack([g[i].sum(axis=(0, 2, 3)) for i in range(g.shape[0])])
            else:
                gb = g
        return [g if need_in[0] else None, gb], []

    return record("add", [a, b], [], [], out, vjp)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Channel-axis concatenation of two videos."""
    _video(a, "concat")
    _video(b, "concat")
    sa, sb = a.shape, b.shape
    if sa[:2] != sb[:2] or sa[3:] != sb[3:]:
        raise ShapeError(f"concat operands disagree outside channels: {sa} vs {sb}")
    out = np.concatenate([a.data, b.data], axis=2)
    ca = sa[2]

    def vjp(g, need_in, need_p):
        return [g[:, :, :ca] if need_in[0] else None,
                g[:, :, ca:] if need_in[1] else None], []

    return record("concat", [a, b], [], [], out, vjp)


def resample(x: Tensor, mode: str) -> Tensor:
    """``down``: 2x2 average pool, stride 2.  ``up``: 2x nearest neighbour."""
    _video(x, "resample")
    xd = x.data
    if mode == "down":
        if xd.shape[3] % 2 or xd.shape[4] % 2:
            raise ShapeError(f"cannot halve odd resolution {x.shape}")
        out = (xd[..., 0::2, 0::2] + xd[..., 1::2, 0::2] + xd[..., 0::2, 1::2] + xd[..., 1::2, 1::2]) * 0.25
    elif mode == "up":
        out = xd.repeat(2, axis=3).repeat(2, axis=4)
    else:
        raise ValueError(f"unknown resample mode {mode!r}")

    def vjp(g, need_in, need_p):
        if mode == "down":
            q = g * 0.25
            return [q.repeat(2, axis=3).repeat(2, axis=4)], []
        return [g[..., 0::2, 0::2] + g[..., 1::2, 0::2] + g[..., 0::2, 1::2] + g[..., 1::2, 1::2]], []

    return record("resample", [x], [], [], out, vjp)


def embed(table: Parameter, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    n = table.shape[0]
    if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
        raise IndexError(f"embedding ids {idx.tolist()} outside [0, {n})")
    out = table.data[idx]

    def vjp(g, need_in, need_p):
        d = np.zeros(table.shape)
        for b, i in enumerate(idx):
            d[i] += g[b]
        return [], [d]

    return record("embed", [], [table], [], out, vjp)


def reduce_mean_sq(x: Tensor) -> Tensor:
    """Scalar mean of squares, shape (1,)."""
    xd = x.data
    n = xd.size
    total = 0.0
    for b in range(xd.shape[0]):
        total += float(np.sum(xd[b] * xd[b]))
    out = np.array([total / n])

    def vjp(g, need_in, need_p):
        # coefficient formed first so a seed of 1/a on n/a elements matches seed 1 on n exactly
        coef = float(g.reshape(-1)[0]) * 2.0 / n
        return [coef * xd], []

    return record("reduce_mean_sq", [x], [], [xd], out, vjp)


def constant(data) -> Tensor:
    return Tensor(data)
