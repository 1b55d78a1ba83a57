"""Differentiable layer primitives used by the point network."""
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, InputError, StateError
from .tensor import Tensor, as_tensor, make_op, relu, elu  # noqa: F401  (re-export)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def dense(x, weights, bias=None):
    """``x[..., C_in] @ weights[C_in, C_out] + bias[C_out]``."""
    x, weights = as_tensor(x), as_tensor(weights)
    bias = None if bias is None else as_tensor(bias)
    if weights.ndim != 2:
        raise DimensionError(f"dense weights must be 2-D, got shape {weights.shape}")
    if x.shape[-1] != weights.shape[0]:
        raise DimensionError(
            f"dense: input axis -1 has {x.shape[-1]} features but weights axis 0 has {weights.shape[0]}"
        )
    if bias is not None and bias.shape != (weights.shape[1],):
        raise DimensionError(
            f"dense: bias axis 0 has {bias.shape} but weights axis 1 has {weights.shape[1]}"
        )
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weights.data
    if bias is not None:
        out += bias.data
    parents = (x, weights) if bias is None else (x, weights, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weights.data.T).reshape(x.shape) if x.requires_grad else None
        grads = [gx, x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_op(out.reshape(lead + (weights.shape[1],)), parents, bw)


@lru_cache(maxsize=32)
def _conv_plan(spatial, ksize, pad, c_in, c_out):
    """Index plan that lays a 3-D kernel out as a dense Toeplitz matrix.

    Returns (rows, cols, taps, out_spatial): for each nonzero of the
    ``[c_in * P_in, c_out * P_out]`` matrix, its row, column and the flat
    position in the ``[c_out, c_in, k, k, k]`` kernel that fills it.
    """
    out_sp = tuple(n + 2 * pad - ksize + 1 for n in spatial)
    p_in, p_out = int(np.prod(spatial)), int(np.prod(out_sp))
    o = np.stack(np.meshgrid(*[np.arange(n) for n in out_sp], indexing="ij"), -1).reshape(-1, 3)
    t = np.stack(np.meshgrid(*[np.arange(ksize)] * 3, indexing="ij"), -1).reshape(-1, 3)
    src = o[:, None, :] + t[None, :, :] - pad  # [P_out, k^3, 3]
    ok = np.all((src >= 0) & (src < np.array(spatial)), axis=-1)
    oi, ti = np.nonzero(ok)
    s = src[oi, ti]
    in_flat = np.ravel_multi_index(s.T, spatial)
    kk = ksize ** 3
    co, ci = np.meshgrid(np.arange(c_out), np.arange(c_in), indexing="ij")
    co, ci = co.reshape(-1, 1), ci.reshape(-1, 1)
    rows = (ci * p_in + in_flat[None, :]).ravel()
    cols = (co * p_out + oi[None, :]).ravel()
    taps = ((co * c_in + ci) * kk + ti[None, :]).ravel()
    return rows, cols, taps, out_sp, p_in, p_out


def conv3d(x, kernel, bias, pad=0):
    """Stride-1 3-D cross-correlation, ``[B, C_in, X, Y, Z] -> [B, C_out, X', Y', Z']``.

    ``pad`` zero-pads every spatial side; ``pad=0`` is a valid convolution.
    The kernel is expanded into a dense Toeplitz matrix, which suits the
    small patch volumes this library convolves.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 5:
        raise DimensionError(f"conv3d input must be [B, C, X, Y, Z], got shape {x.shape}")
    c_out, c_in, k = kernel.shape[:3]
    if kernel.shape != (c_out, c_in, k, k, k):
        raise DimensionError(f"conv3d kernel must be cubic [C_out, C_in, k, k, k], got {kernel.shape}")
    if x.shape[1] != c_in:
        raise DimensionError(f"conv3d: input axis 1 has {x.shape[1]} channels, kernel axis 1 has {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv3d: bias shape {bias.shape} does not match {c_out} output channels")
    spatial = x.shape[2:]
    for ax, n in enumerate(spatial):
        if n + 2 * pad < k:
            raise DimensionError(f"conv3d: spatial axis {ax + 2} has extent {n} < kernel {k}")
    rows, cols, taps, out_sp, p_in, p_out = _conv_plan(spatial, k, pad, c_in, c_out)
    wflat = kernel.data.reshape(-1)
    T = np.zeros((c_in * p_in, c_out * p_out))
    T[rows, cols] = wflat[taps]
    B = x.shape[0]
    xf = x.data.reshape(B, -1)
    out = (xf @ T).reshape(B, c_out, p_out) + bias.data[None, :, None]

    def bw(g):
        gf = g.reshape(B, -1)
        gx = (gf @ T.T).reshape(x.shape) if x.requires_grad else None
        dT = xf.T @ gf
        gk = np.bincount(taps, weights=dT[rows, cols], minlength=wflat.size)
        gb = g.reshape(B, c_out, -1).sum(axis=(0, 2))
        return gx, gk.reshape(kernel.shape), gb

    return make_op(out.reshape((B, c_out) + out_sp), (x, kernel, bias), bw)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""
    channels: int
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    last_mean: np.ndarray = field(default=None, repr=False)
    last_var: np.ndarray = field(default=None, repr=False)

    @property
    def populated(self):
        return self.running_mean is not None

    def freeze_to_last_batch(self):
        self.running_mean = self.last_mean.copy()
        self.running_var = self.last_var.copy()


def batch_norm(x, gamma, beta, state, train, axis=-1, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Normalize per channel (``axis``) over all other axes.

    Train mode uses batch statistics (biased variance) and updates the
    running averages as ``momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axis = axis % x.ndim
    C = x.shape[axis]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm: gamma/beta must have shape ({C},)")
    # work on a [pre, C, post] view so reductions run over contiguous blocks
    pre = int(np.prod(x.shape[:axis]))
    x3 = x.data.reshape(pre, C, -1)
    n = x3.shape[0] * x3.shape[2]
    if train:
        mu = x3.sum(axis=(0, 2)) / n
        xc = x3 - mu[:, None]
        var = np.einsum("icj,icj->c", xc, xc) / n
        state.last_mean, state.last_var = mu, var
        if state.populated:
            state.running_mean = momentum * state.running_mean + (1 - momentum) * mu
            state.running_var = momentum * state.running_var + (1 - momentum) * var
        else:
            state.running_mean, state.running_var = mu.copy(), var.copy()
    else:
        if not state.populated:
            raise StateError("batch_norm in eval mode before running statistics were populated")
        mu, var = state.running_mean, state.running_var
        xc = x3 - mu[:, None]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[:, None]
    out = xhat * gamma.data[:, None] + beta.data[:, None]

    def bw(g):
        g3 = g.reshape(pre, C, -1)
        gg = np.einsum("icj,icj->c", g3, xhat)
        gb = g3.sum(axis=(0, 2))
        if train:
            scale = (gamma.data * inv)[:, None]
            gx = scale * (g3 - (gb / n)[:, None] - xhat * (gg / n)[:, None])
        else:
            gx = g3 * (gamma.data * inv)[:, None]
        return gx.reshape(x.shape), gg, gb

    return make_op(out.reshape(x.shape), (x, gamma, beta), bw)


def max_pool3d(x, window=2, stride=2):
    """Non-overlapping 3-D max pooling; trailing odd extents are dropped.

    Gradient goes to the first maximum in window scan order (x, then y,
    then z, z fastest).
    """
    x = as_tensor(x)
    if window != stride:
        raise DimensionError("max_pool3d supports window == stride only")
    if x.ndim != 5:
        raise DimensionError(f"max_pool3d input must be [B, C, X, Y, Z], got shape {x.shape}")
    B, C = x.shape[:2]
    sp_in = x.shape[2:]
    for ax, n in enumerate(sp_in):
        if n < window:
            raise DimensionError(f"max_pool3d: spatial axis {ax + 2} has extent {n} < window {window}")
    ox, oy, oz = (n // window for n in sp_in)
    w = window
    crop = x.data[:, :, : ox * w, : oy * w, : oz * w]
    blocks = crop.reshape(B, C, ox, w, oy, w, oz, w).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(B, C, ox, oy, oz, w ** 3)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, ox, oy, oz, w, w, w).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        gx = np.zeros(x.shape)
        gx[:, :, : ox * w, : oy * w, : oz * w] = gb.reshape(crop.shape)
        return (gx,)

    return make_op(out, (x,), bw)


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op(s, (x,), bw)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [B, classes], got shape {logits.shape}")
    B, ncls = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= ncls or not np.issubdtype(labels.dtype, np.integer)):
        raise InputError(f"labels must be integers in [0, {ncls - 1}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(B), labels] - lse
    loss = -logp.mean()

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(B), labels] -= 1.0
        return (g * p / B,)

    return make_op(np.asarray(loss), (logits,), bw)


def dropout(x, rate, rng, train):
    if not train or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,))


def gather_rows(features, idx):
    """``features[b, idx[b, ...]]`` for ``features`` of shape [B, N, C].

    Backward is a sparse scatter-add, which beats ``np.add.at`` for the
    heavily repeated neighbor indices of a point network.
    """
    features = as_tensor(features)
    B, N, C = features.shape
    idx = np.asarray(idx)
    if idx.shape[0] != B:
        raise DimensionError(f"gather_rows: index batch {idx.shape[0]} != feature batch {B}")
    flat = (idx.reshape(B, -1) + (np.arange(B) * N)[:, None]).ravel()
    out = features.data.reshape(B * N, C)[flat].reshape(idx.shape + (C,))

    def bw(g):
        S = sp.csr_matrix(
            (np.ones(flat.size), (flat, np.arange(flat.size))), shape=(B * N, flat.size)
        )
        return ((S @ g.reshape(-1, C)).reshape(B, N, C),)

    return make_op(out, (features,), bw)
