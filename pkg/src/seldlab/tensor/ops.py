"""Neural-network primitives built on :mod:`seldlab.tensor.core`.

Each function computes its forward pass in numpy and registers a hand
derived backward rule. Batched inputs carry a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import DimensionError, Tensor, _sigmoid, as_tensor, make_result

BN_EPS = 1e-5
LN_EPS = 1e-5
BN_MOMENTUM = 0.1


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return make_result(y, "softmax", (x,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = x @ w
    return out if b is None else out + b


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1.

    ``x`` is ``C_in x H x W`` or ``B x C_in x H x W``; output keeps H and W.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    w = kernels.data
    if xd.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects (B,C,H,W) input and (O,C,3,3) kernels, "
                             f"got {x.shape} and {kernels.shape}")
    if xd.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if bias.shape != (w.shape[0],):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({w.shape[0]},)")
    B, C, H, W = xd.shape
    O = w.shape[0]
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # B,C,H,W,3,3
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)
    wmat = w.reshape(O, C * 9)
    out = (cols @ wmat.T + bias.data).reshape(B, H, W, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def bwd(g):
        g4 = g[None] if squeeze else g
        gflat = g4.transpose(0, 2, 3, 1).reshape(B * H * W, O)
        gx = gw = gb = None
        if kernels.requires_grad:
            gw = (gflat.T @ cols).reshape(w.shape)
        if bias.requires_grad:
            gb = gflat.sum(axis=0)
        if x.requires_grad:
            dcols = (gflat @ wmat).reshape(B, H, W, C, 3, 3)
            gxp = np.zeros((B, H + 2, W + 2, C))
            for i in range(3):
                for j in range(3):
                    gxp[:, i:i + H, j:j + W] += dcols[..., i, j]
            gx = gxp[:, 1:-1, 1:-1].transpose(0, 3, 1, 2)
            if squeeze:
                gx = gx[0]
        return gx, gw, gb
    return make_result(out, "conv2d", (x, kernels, bias), bwd)


def maxpool2d(x: Tensor, pool: tuple[int, int]) -> Tensor:
    """Non-overlapping max pool over the last two axes.

    Backward routes each window's gradient to its first maximum.
    """
    pt, pf = pool
    *lead, H, W = x.shape
    if H % pt or W % pf:
        raise DimensionError(f"maxpool2d: spatial dims {(H, W)} not divisible by pool {pool}")
    Ho, Wo = H // pt, W // pf
    blocks = x.data.reshape(*lead, Ho, pt, Wo, pf)
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    flat = blocks.transpose(perm).reshape(*lead, Ho, Wo, pt * pf)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        inv = np.argsort(perm)
        gx = gflat.reshape(*lead, Ho, Wo, pt, pf).transpose(inv).reshape(x.shape)
        return (gx,)
    return make_result(np.ascontiguousarray(out), "maxpool2d", (x,), bwd)


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def init(cls, channels: int) -> "BatchNormState":
        return cls(Tensor(np.ones(channels), requires_grad=True),
                   Tensor(np.zeros(channels), requires_grad=True),
                   np.zeros(channels), np.ones(channels))


def batchnorm2d(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Batch normalization over (B, H, W) for each channel of a B x C x H x W input."""
    if x.ndim != 4 or x.shape[1] != state.gamma.shape[0]:
        raise DimensionError(f"batchnorm2d: input {x.shape} vs {state.gamma.shape[0]} channels")
    gamma, beta = state.gamma, state.beta
    cshape = (1, -1, 1, 1)
    xd = x.data
    if train:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu.reshape(cshape)) * inv_std.reshape(cshape)
    out = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)

    def bwd(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(cshape)
            if train:
                nn = xd.shape[0] * xd.shape[2] * xd.shape[3]
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv_std.reshape(cshape) / nn * (nn * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std.reshape(cshape)
        return gx, gg, gb
    return make_result(out, "batchnorm2d", (x, gamma, beta), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize each vector along the last axis, then scale and shift."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layer_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def bwd(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gb = g.sum(axis=lead)
        if x.requires_grad:
            dxhat = g * gamma.data
            s1 = dxhat.sum(axis=-1, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
            gx = inv_std / D * (D * dxhat - s1 - xhat * s2)
        return gx, gg, gb
    return make_result(out, "layer_norm", (x, gamma, beta), bwd)


@dataclass
class GruWeights:
    """One GRU direction: input maps ``w*`` (D x H), recurrent maps ``u*`` (H x H), biases ``b*``."""

    wz: Tensor
    wr: Tensor
    wh: Tensor
    uz: Tensor
    ur: Tensor
    uh: Tensor
    bz: Tensor
    br: Tensor
    bh: Tensor

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self)]

    @property
    def hidden(self) -> int:
        return self.uz.shape[0]


def gru(x: Tensor, w: GruWeights, reverse: bool = False) -> Tensor:
    """Single-direction GRU over ``B x T x D`` (or ``T x D``) with zero initial state.

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    c = tanh(x Wh + (r * h) Uh + bh), h' = (1 - z) * h + z * c.
    """
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    B, T, D = xd.shape
    Hd = w.hidden
    for name, t, shp in (("wz", w.wz, (D, Hd)), ("wr", w.wr, (D, Hd)), ("wh", w.wh, (D, Hd)),
                         ("uz", w.uz, (Hd, Hd)), ("ur", w.ur, (Hd, Hd)), ("uh", w.uh, (Hd, Hd)),
                         ("bz", w.bz, (Hd,)), ("br", w.br, (Hd,)), ("bh", w.bh, (Hd,))):
        if t.shape != shp:
            raise DimensionError(f"gru weight {name} has shape {t.shape}, expected {shp}")
    steps = range(T - 1, -1, -1) if reverse else range(T)
    xproj = xd @ np.concatenate([w.wz.data, w.wr.data, w.wh.data], axis=1) \
        + np.concatenate([w.bz.data, w.br.data, w.bh.data])
    xz, xr, xh = xproj[..., :Hd], xproj[..., Hd:2 * Hd], xproj[..., 2 * Hd:]
    uz, ur, uh = w.uz.data, w.ur.data, w.uh.data
    uzr = np.concatenate([uz, ur], axis=1)
    out = np.empty((B, T, Hd))
    zs = np.empty((B, T, Hd))
    rs = np.empty((B, T, Hd))
    cs = np.empty((B, T, Hd))
    hprev = np.empty((B, T, Hd))
    h = np.zeros((B, Hd))
    for t in steps:
        hzr = h @ uzr
        z = _sigmoid(xz[:, t] + hzr[:, :Hd])
        r = _sigmoid(xr[:, t] + hzr[:, Hd:])
        c = np.tanh(xh[:, t] + (r * h) @ uh)
        hprev[:, t] = h
        h = (1.0 - z) * h + z * c
        zs[:, t], rs[:, t], cs[:, t], out[:, t] = z, r, c, h
    result = out[0] if squeeze else out

    def bwd(g):
        g3 = g[None] if squeeze else g
        dxz = np.empty_like(zs)
        dxr = np.empty_like(zs)
        dxh = np.empty_like(zs)
        duz = np.zeros_like(uz)
        dur = np.zeros_like(ur)
        duh = np.zeros_like(uh)
        dh_next = np.zeros((B, Hd))
        for t in reversed(list(steps)):
            z, r, c, hp = zs[:, t], rs[:, t], cs[:, t], hprev[:, t]
            dh = g3[:, t] + dh_next
            dz = dh * (c - hp)
            da = dh * z * (1.0 - c * c)
            drh = da @ uh.T
            duh += (r * hp).T @ da
            dr = drh * hp
            dzp = dz * z * (1.0 - z)
            drp = dr * r * (1.0 - r)
            duz += hp.T @ dzp
            dur += hp.T @ drp
            dh_next = dh * (1.0 - z) + drh * r + dzp @ uz.T + drp @ ur.T
            dxz[:, t], dxr[:, t], dxh[:, t] = dzp, drp, da
        flat_x = xd.reshape(B * T, D)
        fz, fr, fh = (a.reshape(B * T, Hd) for a in (dxz, dxr, dxh))
        gx = fz @ w.wz.data.T + fr @ w.wr.data.T + fh @ w.wh.data.T
        gx = gx.reshape(T, D) if squeeze else gx.reshape(B, T, D)
        return (gx, flat_x.T @ fz, flat_x.T @ fr, flat_x.T @ fh, duz, dur, duh,
                fz.sum(axis=0), fr.sum(axis=0), fh.sum(axis=0))
    return make_result(result, "gru_reverse" if reverse else "gru", (x, *w.tensors()), bwd)


def gru_bidirectional(x: Tensor, fwd: GruWeights, bwd: GruWeights) -> Tensor:
    """Forward and time-reversed GRU passes merged by summation."""
    if fwd.hidden != bwd.hidden:
        raise DimensionError(f"gru directions differ in width: {fwd.hidden} vs {bwd.hidden}")
    return gru(x, fwd) + gru(x, bwd, reverse=True)
