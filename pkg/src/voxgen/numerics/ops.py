"""Layer primitives on top of the autodiff engine.

Every op here has a hand-derived backward pass; reduction order is a fixed
loop over kernel offsets or a fixed numpy reduction, so repeated calls are
bit-identical.
"""

from __future__ import annotations

import math
from typing import Optional, Union

import numpy as np

from .engine import (
    Array,
    NumericsError,
    Tensor,
    _make,
    as_tensor,
    matmul,
    mul,
    softmax,
    swap_last,
)


def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    num = n + 2 * pad - k
    if num < 0 or num % stride != 0:
        raise NumericsError(
            f"conv3d size mismatch: input {n}, kernel {k}, stride {stride}, pad {pad} "
            f"(output extent {(num / stride) + 1} is not a positive integer)"
        )
    return num // stride + 1


def conv3d(x: Union[Tensor, Array], kernel: Union[Tensor, Array], stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a (B,)C,D,H,W volume with an O,C,k,k,k kernel.

    Zero padding; accumulation loops over the k^3 kernel offsets in a fixed
    order, each offset contributing one batched matmul.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel, like=x)
    squeeze = x.data.ndim == 4
    xd = x.data[None] if squeeze else x.data
    kd = kernel.data
    if xd.ndim != 5 or kd.ndim != 5:
        raise NumericsError(f"conv3d expects C,D,H,W or B,C,D,H,W input and O,C,k,k,k kernel; got {x.data.shape} and {kd.shape}")
    B, C, D, H, W = xd.shape
    O, Ck, k1, k2, k3 = kd.shape
    if Ck != C:
        raise NumericsError(f"conv3d channel mismatch: input has {C} channels, kernel expects {Ck}")
    if not (k1 == k2 == k3) or k1 % 2 == 0:
        raise NumericsError(f"conv3d kernel must be cubic with odd size; got {(k1, k2, k3)}")
    if stride < 1 or pad < 0:
        raise NumericsError(f"conv3d requires stride >= 1 and pad >= 0; got stride={stride}, pad={pad}")
    k = k1
    Do = _conv_out_size(D, k, stride, pad)
    Ho = _conv_out_size(H, k, stride, pad)
    Wo = _conv_out_size(W, k, stride, pad)

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else xd
    M = Do * Ho * Wo
    out = np.zeros((B, O, M), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                xs = xp[
                    :, :,
                    i : i + stride * (Do - 1) + 1 : stride,
                    j : j + stride * (Ho - 1) + 1 : stride,
                    l : l + stride * (Wo - 1) + 1 : stride,
                ].reshape(B, C, M)
                out += kd[:, :, i, j, l] @ xs
    out_data = out.reshape(B, O, Do, Ho, Wo)
    if squeeze:
        out_data = out_data[0]

    def vjp(g: Array):
        gb = g[None] if squeeze else g
        gf = gb.reshape(B, O, M)
        if kernel.requires_grad:
            gk = np.zeros_like(kd)
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        xs = xp[
                            :, :,
                            i : i + stride * (Do - 1) + 1 : stride,
                            j : j + stride * (Ho - 1) + 1 : stride,
                            l : l + stride * (Wo - 1) + 1 : stride,
                        ].reshape(B, C, M)
                        gk[:, :, i, j, l] = np.einsum("bom,bcm->oc", gf, xs, optimize=True)
            kernel.accumulate_grad(gk)
        if x.requires_grad:
            gxp = np.zeros((B, C, D + 2 * pad, H + 2 * pad, W + 2 * pad), dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        contrib = (kd[:, :, i, j, l].T @ gf).reshape(B, C, Do, Ho, Wo)
                        gxp[
                            :, :,
                            i : i + stride * (Do - 1) + 1 : stride,
                            j : j + stride * (Ho - 1) + 1 : stride,
                            l : l + stride * (Wo - 1) + 1 : stride,
                        ] += contrib
            gx = gxp[:, :, pad : pad + D, pad : pad + H, pad : pad + W] if pad else gxp
            x.accumulate_grad(gx[0] if squeeze else gx)

    return _make(out_data, (x, kernel), vjp)


def upsample_nearest3d(x: Union[Tensor, Array], factor: int) -> Tensor:
    """Repeat each voxel factor^3 times; backward sum-pools the blocks."""
    x = as_tensor(x)
    squeeze = x.data.ndim == 4
    xd = x.data[None] if squeeze else x.data
    B, C, D, H, W = xd.shape
    f = int(factor)
    out_data = (
        xd.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4)
    )
    if squeeze:
        out_data = out_data[0]

    def vjp(g: Array):
        if x.requires_grad:
            gb = g[None] if squeeze else g
            gx = gb.reshape(B, C, D, f, H, f, W, f).sum(axis=(3, 5, 7))
            x.accumulate_grad(gx[0] if squeeze else gx)

    return _make(out_data, (x,), vjp)


def layernorm_affine(
    x: Union[Tensor, Array],
    gain: Union[Tensor, Array],
    bias: Union[Tensor, Array],
    eps: float = 1e-5,
) -> Tensor:
    """gain * (x - mean) / sqrt(var + eps) + bias over the last axis."""
    x = as_tensor(x)
    gain = as_tensor(gain, like=x)
    bias = as_tensor(bias, like=x)
    d = x.data.shape[-1]
    if gain.data.shape[-1] != d or bias.data.shape[-1] != d:
        raise NumericsError(
            f"layernorm_affine parameter dim mismatch: x last axis {d}, "
            f"gain {gain.data.shape}, bias {bias.data.shape}"
        )
    if eps <= 0:
        raise NumericsError(f"layernorm_affine requires eps > 0; got {eps}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = centered * inv_std
    out_data = gain.data * xhat + bias.data

    def vjp(g: Array):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv_std * (gy - m1 - xhat * m2))

    return _make(out_data, (x, gain, bias), vjp)


def layernorm(x: Union[Tensor, Array], eps: float = 1e-5) -> Tensor:
    """Plain normalization over the last axis (no learned affine)."""
    x = as_tensor(x)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = centered * inv_std
    out_data = xhat

    def vjp(g: Array):
        if x.requires_grad:
            m1 = g.mean(axis=-1, keepdims=True)
            m2 = (g * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv_std * (g - m1 - xhat * m2))

    return _make(out_data, (x,), vjp)


def attention(
    queries: Union[Tensor, Array],
    keys: Union[Tensor, Array],
    values: Union[Tensor, Array],
) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V over the last two axes.

    Accepts leading batch axes; self-attention is the keys==queries case.
    """
    q = as_tensor(queries)
    k = as_tensor(keys, like=q)
    v = as_tensor(values, like=q)
    d = q.data.shape[-1]
    if k.data.shape[-1] != d:
        raise NumericsError(
            f"attention dim mismatch: queries have d={d}, keys have d={k.data.shape[-1]}"
        )
    if v.data.shape[-2] != k.data.shape[-2]:
        raise NumericsError(
            f"attention length mismatch: keys m={k.data.shape[-2]}, values m={v.data.shape[-2]}"
        )
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(d))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v)


def softmax_xent(logits: Array, target: int) -> tuple[float, Array]:
    """Negative log-likelihood of `target` under softmax(logits).

    Returns (loss, gradient w.r.t. logits). Max-subtracted for stability.
    """
    logits = np.asarray(logits)
    K = logits.shape[0]
    if not (0 <= target < K):
        raise IndexError(f"softmax_xent target {target} out of range [0, {K})")
    shifted = logits - logits.max()
    ex = np.exp(shifted)
    probs = ex / ex.sum()
    loss = float(np.log(ex.sum()) - shifted[target])
    grad = probs.copy()
    grad[target] -= 1.0
    return loss, grad.astype(logits.dtype)


def cross_entropy_mean(logits: Tensor, targets: Array) -> Tensor:
    """Mean NLL of integer `targets` over rows of (M,K) logits."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    M, K = logits.data.shape
    if targets.shape != (M,):
        raise NumericsError(f"cross_entropy_mean targets shape {targets.shape} != ({M},)")
    if M == 0:
        raise NumericsError("cross_entropy_mean requires at least one row")
    if targets.min() < 0 or targets.max() >= K:
        raise IndexError(f"cross_entropy_mean target out of range [0, {K})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    denom = ex.sum(axis=-1, keepdims=True)
    probs = ex / denom
    rows = np.arange(M)
    losses = np.log(denom[:, 0]) - shifted[rows, targets]
    out_data = np.asarray(losses.mean(), dtype=logits.data.dtype)

    def vjp(g: Array):
        if logits.requires_grad:
            gl = probs.copy()
            gl[rows, targets] -= 1.0
            logits.accumulate_grad(gl * (g / M))

    return _make(out_data, (logits,), vjp)
