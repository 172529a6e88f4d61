"""Structured differentiable kernels: convolution, batch norm, GRU,
Lp pooling, linear upsampling, and pairwise squared distances.

All kernels are written against the autograd Tensor and verified against
brute-force scalar oracles in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatchError
from .tensor import Tensor, _as_tensor, _make, concat, getitem, matmul, mul, sigmoid, stack, tanh


# ---------------------------------------------------------------------- #
# 2-D convolution, "same" padding
# ---------------------------------------------------------------------- #


def conv2d_same(x, w, bias) -> Tensor:
    """Convolve (b, c_in, t, f) with (c_out, c_in, kh, kw), preserving t and f.

    Kernel extents must be odd; the input is zero-padded by (kh-1)/2 and
    (kw-1)/2.  Implemented as im2col + one matrix product.
    """
    x, w, bias = _as_tensor(x), _as_tensor(w), _as_tensor(bias)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatchError(f"conv2d_same expects 4-D input/kernel, got {x.shape} and {w.shape}")
    n, c_in, t, f = x.shape
    c_out, c_in_w, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError(f"conv2d_same requires odd kernel extents, got {kh}x{kw}")
    if c_in_w != c_in:
        raise ShapeMismatchError(f"channel mismatch: input has {c_in} channels, kernel expects {c_in_w}")
    if bias.shape != (c_out,):
        raise ShapeMismatchError(f"bias shape {bias.shape} does not match {c_out} output channels")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))       # (n, c_in, t, f, kh, kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * t * f, c_in * kh * kw)
    w_flat = w.data.reshape(c_out, -1)
    out = (cols @ w_flat.T).reshape(n, t, f, c_out).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def _bw(g):
        g_flat = g.transpose(0, 2, 3, 1).reshape(n * t * f, c_out)
        if bias.requires_grad:
            bias.grad += g_flat.sum(axis=0)
        if w.requires_grad:
            w.grad += (g_flat.T @ cols).reshape(w.shape)
        if x.requires_grad:
            d_cols = (g_flat @ w_flat).reshape(n, t, f, c_in, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + t, j:j + f] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x.grad += dxp[:, :, ph:ph + t, pw:pw + f]

    return _make(out, (x, w, bias), _bw, "conv2d_same")


# ---------------------------------------------------------------------- #
# batch normalization
# ---------------------------------------------------------------------- #


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (not learned)."""

    mean: np.ndarray
    var: np.ndarray

    @staticmethod
    def initial(channels: int, dtype=np.float64) -> "BatchNormState":
        return BatchNormState(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x, gamma, beta, state: BatchNormState, train: bool,
                eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel normalization of (b, c, t, f).

    Train mode normalizes with batch statistics over the (b, t, f) axes and
    updates the running stats in-place; eval mode uses the running stats.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ShapeMismatchError(f"batchnorm2d expects 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError(
            f"batchnorm2d parameter shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]

    if train:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.mean = (1.0 - momentum) * state.mean + momentum * mean
        state.var = (1.0 - momentum) * state.var + momentum * var
    else:
        mean = state.mean.astype(x.dtype, copy=False)
        var = state.var.astype(x.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def _bw(g):
        if beta.requires_grad:
            beta.grad += g.sum(axis=axes)
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=axes)
        if x.requires_grad:
            gh = g * gamma.data[None, :, None, None]
            if train:
                sum_gh = gh.sum(axis=axes, keepdims=True)
                sum_gh_xhat = (gh * xhat).sum(axis=axes, keepdims=True)
                x.grad += (inv_std[None, :, None, None] / count) * (
                    count * gh - sum_gh - xhat * sum_gh_xhat)
            else:
                x.grad += gh * inv_std[None, :, None, None]

    return _make(out, (x, gamma, beta), _bw, "batchnorm2d")


# ---------------------------------------------------------------------- #
# Lp pooling
# ---------------------------------------------------------------------- #


def lp_pool_time(x, p: float, factor_t: int, factor_f: int) -> Tensor:
    """Window pooling of (b, c, t, f): each cell is (mean |window|^p)^(1/p).

    Time and frequency extents must divide by their factors.  Interpolates
    between mean pooling (p = 1) and max pooling (p large) on nonnegative
    inputs.
    """
    x = _as_tensor(x)
    if p < 1:
        raise ValueError(f"lp_pool_time requires p >= 1, got {p}")
    if x.ndim != 4:
        raise ShapeMismatchError(f"lp_pool_time expects 4-D input, got {x.shape}")
    n, c, t, f = x.shape
    if t % factor_t != 0 or f % factor_f != 0:
        raise ShapeMismatchError(
            f"extents ({t}, {f}) not divisible by pooling factors ({factor_t}, {factor_f})")
    to, fo = t // factor_t, f // factor_f

    absx = np.abs(x.data)
    u = absx ** p
    r = u.reshape(n, c, to, factor_t, fo, factor_f).mean(axis=(3, 5))
    out = r ** (1.0 / p)

    def _bw(g):
        if not x.requires_grad:
            return
        # dy/dx = y^(1-p) * |x|^(p-1) * sign(x) / window_size, 0 for all-zero windows
        y_term = np.where(out > 0, out ** (1.0 - p), 0.0)
        coeff = (g * y_term) / (factor_t * factor_f)
        coeff = np.repeat(np.repeat(coeff, factor_t, axis=2), factor_f, axis=3)
        x.grad += coeff * absx ** (p - 1.0) * np.sign(x.data)

    return _make(out, (x,), _bw, "lp_pool_time")


# ---------------------------------------------------------------------- #
# linear upsampling along time
# ---------------------------------------------------------------------- #


def upsample_matrix(source_t: int, target_t: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix (target_t x source_t) with endpoint alignment."""
    m = np.zeros((target_t, source_t), dtype=dtype)
    if target_t == 1:
        m[0, 0] = 1.0
        return m
    scale = (source_t - 1) / (target_t - 1)
    for i in range(target_t):
        pos = i * scale
        lo = int(np.floor(pos))
        hi = min(lo + 1, source_t - 1)
        w = pos - lo
        m[i, lo] += 1.0 - w
        m[i, hi] += w
    return m


def linear_upsample_time(x, target_t: int) -> Tensor:
    """Linearly interpolate (..., t', c) to (..., target_t, c) along time.

    First and last frames are preserved exactly; target_t == t' is the
    identity.
    """
    x = _as_tensor(x)
    t_src = x.shape[-2]
    if t_src < 2:
        raise ShapeMismatchError(f"linear_upsample_time needs at least 2 source frames, got {t_src}")
    if target_t < t_src:
        raise ShapeMismatchError(f"target length {target_t} is smaller than source length {t_src}")
    m = upsample_matrix(t_src, target_t, dtype=x.dtype)
    out = np.matmul(m, x.data)

    def _bw(g):
        if x.requires_grad:
            x.grad += np.matmul(m.T, g)

    return _make(out, (x,), _bw, "linear_upsample_time")


# ---------------------------------------------------------------------- #
# pairwise squared distances
# ---------------------------------------------------------------------- #


def pairwise_sqdist(x) -> Tensor:
    """Squared Euclidean distances between frames of (..., t, f).

    Returns (..., t, t) with out[..., i, j] = sum_f (x[..., i, f] - x[..., j, f])^2,
    exactly symmetric with an exactly zero diagonal.
    """
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeMismatchError(f"pairwise_sqdist expects at least 2-D input, got {x.shape}")
    sq = (x.data * x.data).sum(axis=-1)
    gram = np.matmul(x.data, np.swapaxes(x.data, -1, -2))
    d = sq[..., :, None] + sq[..., None, :] - 2.0 * gram
    np.maximum(d, 0.0, out=d)
    d = 0.5 * (d + np.swapaxes(d, -1, -2))
    t = x.shape[-2]
    d[..., np.arange(t), np.arange(t)] = 0.0

    def _bw(g):
        if x.requires_grad:
            s = g + np.swapaxes(g, -1, -2)
            x.grad += 2.0 * (s.sum(axis=-1)[..., None] * x.data - np.matmul(s, x.data))

    return _make(d, (x,), _bw, "pairwise_sqdist")


# ---------------------------------------------------------------------- #
# bidirectional GRU
# ---------------------------------------------------------------------- #


@dataclass
class GruDirection:
    """Parameters of one GRU direction with packed [reset | update | candidate] gates."""

    w: Tensor  # (d_in, 3h) input projection
    u: Tensor  # (h, 3h) recurrent projection
    b: Tensor  # (3h,) bias


@dataclass
class BiGruParams:
    forward: GruDirection
    backward: GruDirection

    @property
    def hidden(self) -> int:
        return self.forward.u.shape[0]


def _gru_direction(x: Tensor, direction: GruDirection, reverse: bool,
                   mask: np.ndarray | None) -> Tensor:
    """Run one direction over (n, t, d); padded steps carry the state through.

    Gate update per step (r = reset, z = update, m = candidate):
        r_t = sigmoid(x_t W_r + h_{t-1} U_r + b_r)
        z_t = sigmoid(x_t W_z + h_{t-1} U_z + b_z)
        m_t = tanh(x_t W_m + (r_t * h_{t-1}) U_m + b_m)
        h_t = z_t * h_{t-1} + (1 - z_t) * m_t
    """
    n, t, _ = x.shape
    h = direction.u.shape[0]
    gates_x = matmul(x, direction.w) + direction.b           # (n, t, 3h)
    u_rz = getitem(direction.u, (slice(None), slice(0, 2 * h)))
    u_m = getitem(direction.u, (slice(None), slice(2 * h, 3 * h)))

    state = Tensor(np.zeros((n, h), dtype=x.dtype))
    steps: list[Tensor] = [None] * t
    order = range(t - 1, -1, -1) if reverse else range(t)
    for step in order:
        gx = getitem(gates_x, (slice(None), step, slice(None)))      # (n, 3h)
        hu = matmul(state, u_rz)                                     # (n, 2h)
        r = sigmoid(getitem(gx, (slice(None), slice(0, h))) + getitem(hu, (slice(None), slice(0, h))))
        z = sigmoid(getitem(gx, (slice(None), slice(h, 2 * h))) + getitem(hu, (slice(None), slice(h, 2 * h))))
        cand = tanh(getitem(gx, (slice(None), slice(2 * h, 3 * h))) + matmul(mul(r, state), u_m))
        new_state = z * state + (1.0 - z) * cand
        if mask is not None:
            m_step = mask[:, step:step + 1]
            new_state = m_step * new_state + (1.0 - m_step) * state
        state = new_state
        steps[step] = state
    return stack(steps, axis=1)                                      # (n, t, h)


def bigru_forward(x, params: BiGruParams, valid_lengths=None) -> Tensor:
    """Bidirectional GRU over (t, d_in) or (n, t, d_in).

    Returns per-frame forward and backward states concatenated to width 2h.
    ``valid_lengths`` freezes the hidden state across zero-padded tail
    frames so padding cannot leak into valid frames.
    """
    x = _as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3:
        raise ShapeMismatchError(f"bigru_forward expects (t, d) or (n, t, d), got {x.shape}")
    n, t, d = x.shape
    for name, direction in (("forward", params.forward), ("backward", params.backward)):
        h = direction.u.shape[0]
        if direction.w.shape != (d, 3 * h) or direction.u.shape != (h, 3 * h) or direction.b.shape != (3 * h,):
            raise ShapeMismatchError(
                f"gru {name} parameter shapes {direction.w.shape}/{direction.u.shape}/{direction.b.shape} "
                f"inconsistent with input width {d} and hidden size {h}")

    mask = None
    if valid_lengths is not None:
        lengths = np.asarray(valid_lengths, dtype=np.int64)
        if not np.all(lengths == t):
            mask = (np.arange(t)[None, :] < lengths[:, None]).astype(x.dtype)

    out_f = _gru_direction(x, params.forward, reverse=False, mask=mask)
    out_b = _gru_direction(x, params.backward, reverse=True, mask=mask)
    out = concat([out_f, out_b], axis=2)
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out
