"""Differentiable operators used by the FUN architectures (NCHW layout)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from funnet.errors import DimensionError
from funnet.nn.tensor import Tensor, add, as_tensor, make_result, mul


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# convolution


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    return x if p == 0 else x[:, :, p:-p, p:-p]


def _conv_pointwise(x, w, s):
    n, c = x.shape[:2]
    xs = x[:, :, ::s, ::s] if s > 1 else x
    ho, wo = xs.shape[2:]
    wm = w.reshape(w.shape[0], c)
    xs = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
    out = np.matmul(wm, xs).reshape(n, -1, ho, wo)

    def grads(g, need_x, need_w):
        gm = g.reshape(n, -1, ho * wo)
        gx = gw = None
        if need_w:
            gw = np.tensordot(gm, xs, axes=([0, 2], [0, 2])).reshape(w.shape)
        if need_x:
            gxs = np.matmul(wm.T, gm).reshape(n, c, ho, wo)
            if s > 1:
                gx = np.zeros_like(x)
                gx[:, :, ::s, ::s] = gxs
            else:
                gx = gxs
        return gx, gw

    return out, grads


def _conv_depthwise(x, w, s, p):
    # channels-last so every shifted tap is a contiguous run over C
    n, c, h, wd = x.shape
    k, kw = w.shape[2], w.shape[3]
    ho, wo = conv_output_size(h, k, s, p), conv_output_size(wd, kw, s, p)
    xp = np.ascontiguousarray(_pad(x, p).transpose(0, 2, 3, 1))
    wt = np.ascontiguousarray(w[:, 0].transpose(1, 2, 0))  # (k, kw, c)
    span_h, span_w = s * (ho - 1) + 1, s * (wo - 1) + 1
    taps = [(i, j) for i in range(k) for j in range(kw)]
    acc = np.zeros((n, ho, wo, c), dtype=np.result_type(x, w))
    tmp = np.empty_like(acc)
    for i, j in taps:
        np.multiply(xp[:, i : i + span_h : s, j : j + span_w : s], wt[i, j], out=tmp)
        acc += tmp
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))

    def grads(g, need_x, need_w):
        gx = gw = None
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        buf = np.empty_like(gt)
        if need_w:
            gwt = np.empty_like(wt)
            for i, j in taps:
                np.multiply(gt, xp[:, i : i + span_h : s, j : j + span_w : s], out=buf)
                gwt[i, j] = buf.sum(axis=(0, 1, 2))
            gw = np.ascontiguousarray(gwt.transpose(2, 0, 1))[:, None]
        if need_x:
            gxp = np.zeros_like(xp)
            for i, j in taps:
                np.multiply(gt, wt[i, j], out=buf)
                gxp[:, i : i + span_h : s, j : j + span_w : s] += buf
            gx = np.ascontiguousarray(gxp[:, p : p + h, p : p + wd].transpose(0, 3, 1, 2))
        return gx, gw

    return out, grads


def _conv_general(x, w, s, p, groups):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    og = o // groups
    ho, wo = conv_output_size(h, kh, s, p), conv_output_size(wd, kw, s, p)
    xp = _pad(x, p)
    # (n, c, ho, wo, kh, kw) view of every receptive field
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    out = np.empty((n, o, ho, wo), dtype=x.dtype)
    for gi in range(groups):
        wg = w[gi * og : (gi + 1) * og]
        xg = win[:, gi * cg : (gi + 1) * cg]
        res = np.tensordot(xg, wg, axes=([1, 4, 5], [1, 2, 3]))  # n, ho, wo, og
        out[:, gi * og : (gi + 1) * og] = res.transpose(0, 3, 1, 2)

    def grads(g, need_x, need_w):
        gx = gw = None
        if need_w:
            gw = np.empty_like(w)
            for gi in range(groups):
                gg = g[:, gi * og : (gi + 1) * og]
                xg = win[:, gi * cg : (gi + 1) * cg]
                gw[gi * og : (gi + 1) * og] = np.tensordot(gg, xg, axes=([0, 2, 3], [0, 2, 3]))
        if need_x:
            gxp = np.zeros_like(xp)
            span_h, span_w = s * (ho - 1) + 1, s * (wo - 1) + 1
            for gi in range(groups):
                gg = g[:, gi * og : (gi + 1) * og]
                wg = w[gi * og : (gi + 1) * og]
                cols = np.tensordot(gg, wg, axes=([1], [0]))  # n, ho, wo, cg, kh, kw
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, gi * cg : (gi + 1) * cg, i : i + span_h : s, j : j + span_w : s] += (
                            cols[..., i, j].transpose(0, 3, 1, 2)
                        )
            gx = _unpad(gxp, p)
        return gx, gw

    return out, grads


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation with zero padding; weights are (O, C/groups, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIHW weights, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if groups < 1 or c % groups or o % groups:
        raise DimensionError(f"channels {c}->{o} not divisible by groups={groups}")
    if cg != c // groups:
        raise DimensionError(f"weight expects {cg} channels per group, input gives {c // groups}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{wd}")

    xd, wd_ = x.data, w.data
    if kh == kw == 1 and padding == 0 and groups == 1:
        out, grads = _conv_pointwise(xd, wd_, stride)
    elif groups == c and cg == 1 and o == c and kh == kw:
        out, grads = _conv_depthwise(xd, wd_, stride, padding)
    else:
        out, grads = _conv_general(xd, wd_, stride, padding, groups)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx, gw = grads(g, x.requires_grad, w.requires_grad)
        if gx is not None:
            x.accumulate(gx)
        if gw is not None:
            w.accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if bias is None else (x, w, bias)
    return make_result(out, parents, backward)


# ---------------------------------------------------------------------------
# normalization


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.01,
                eps: float = 1e-3) -> Tensor:
    """Batch norm over (N, H, W); in training mode updates the running stats in place."""
    x = as_tensor(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm parameters sized {gamma.shape}, input has {c} channels")
    xd = x.data
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * (m / max(m - 1, 1))
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(1, c, 1, 1).astype(xd.dtype)) * invstd.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(1, c, 1, 1)
            if training:
                m = g.shape[0] * g.shape[2] * g.shape[3]
                s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (invstd.reshape(1, c, 1, 1) / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * invstd.reshape(1, c, 1, 1)
            x.accumulate(gx)

    return make_result(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# activations


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows and is a single vectorized pass
    out = np.tanh(z * 0.5)
    out += 1.0
    out *= 0.5
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def backward(g):
        x.accumulate(g * s * (1.0 - s))

    return make_result(s, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def backward(g):
        x.accumulate(g * pos)

    return make_result(np.where(pos, x.data, 0).astype(x.dtype), (x,), backward)


def swish(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s

    def backward(g):
        x.accumulate(g * (s * (1.0 + x.data * (1.0 - s))))

    return make_result(out, (x,), backward)


ACTIVATIONS = {"swish": swish, "relu": relu, "sigmoid": sigmoid}


# ---------------------------------------------------------------------------
# pooling, heads, losses


def global_avg_pool(x: Tensor, keepdims: bool = False) -> Tensor:
    """Mean over H and W: (N, C, H, W) -> (N, C) or (N, C, 1, 1)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=keepdims)

    def backward(g):
        g = g.reshape(n, c, 1, 1) / (h * w)
        x.accumulate(np.broadcast_to(g, x.shape))

    return make_result(out, (x,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully connected layer: (N, in) @ (out, in).T + b."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weights {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise DimensionError(f"linear bias {b.shape} does not match {w.shape[0]} outputs")
        out = out + b.data

    def backward(g):
        if x.requires_grad:
            x.accumulate(g @ w.data)
        if w.requires_grad:
            w.accumulate(g.T @ x.data)
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward)


def log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DimensionError(f"labels outside [0, {k})")
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits.accumulate(p * (g / n))

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# composite blocks


def squeeze_excite(x: Tensor, w_reduce: Tensor, b_reduce: Tensor, w_expand: Tensor,
                   b_expand: Tensor) -> Tensor:
    """Channel gate: pool -> 1x1 reduce -> swish -> 1x1 expand -> sigmoid -> scale."""
    c = x.shape[1]
    if w_reduce.shape[1] != c or w_expand.shape[0] != c:
        raise DimensionError(
            f"SE weights {w_reduce.shape}/{w_expand.shape} do not fit {c} channels"
        )
    s = global_avg_pool(x, keepdims=True)
    s = swish(conv2d(s, w_reduce, b_reduce))
    s = sigmoid(conv2d(s, w_expand, b_expand))
    return mul(x, s)


def stochastic_depth(x: Tensor, residual: Tensor, survive_p: float, training: bool,
                     rng: np.random.Generator | None = None) -> Tensor:
    """``x + residual`` where, in training, each sample's residual survives with
    probability ``survive_p`` and is scaled by ``1 / survive_p`` when kept."""
    if x.shape != residual.shape:
        raise DimensionError(f"stochastic_depth: {x.shape} vs {residual.shape}")
    if not 0.0 < survive_p <= 1.0:
        raise ValueError(f"survive_p must be in (0, 1], got {survive_p}")
    if not training or survive_p >= 1.0:
        return add(x, residual)
    if rng is None:
        raise ValueError("training-mode stochastic depth needs an rng")
    n = x.shape[0]
    keep = rng.random(n) < survive_p
    scale = (keep / survive_p).astype(residual.dtype).reshape((n,) + (1,) * (x.ndim - 1))
    return add(x, mul(residual, scale))
