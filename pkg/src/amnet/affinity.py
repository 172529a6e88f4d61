"""Affinity mixup: frame-similarity matrices used to blend features.

For a class-projected feature X~ (c, t, f), the affinity is a per-class,
row-stochastic t x t matrix

    A = softmax(-sqdist(X~, X~) / (tau * sqrt(f)))

where sqdist holds squared Euclidean distances between frames and the
softmax normalizes each row (over source frames).  Similar frames receive
large mutual weights, so multiplying a same-resolution feature by A
averages each frame with its lookalikes.

Decoder features (t, c) are mixed class-by-class with A directly.  Encoder
features (b', t, f') first need A collapsed over classes and replicated
across channels; the literal exp-mean form and a row-renormalized variant
are both provided (see ``adapt_for_encoder``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from . import tensor as T
from .nn import pairwise_sqdist
from .tensor import Tensor

PLACEMENTS = ("enc@1/2", "enc@1/4", "dec@1/2", "dec@1/4")
GRAD_MODES = ("full", "enc_only", "dec_only", "none")
FULL_PLACEMENT = PLACEMENTS
ENCODER_ADAPT_MODES = ("mean", "exp_normalized", "exp_literal")

# Mask value added to distances of padded frames before the row softmax.
_MASK_VALUE = 1e30


@dataclass(frozen=True)
class AmConfig:
    """Where and how affinity mixing is applied.

    placement: subset of {enc@1/2, enc@1/4, dec@1/2, dec@1/4}; empty
        disables affinity mixing entirely (the plain CRNN baseline).
    grad_mode: which usage paths propagate gradients back into the
        affinity (and through it into the projection weights).
    encoder_adapt: how the per-class affinity collapses to one matrix for
        encoder channels.  "mean" (default) is the plain class average and
        stays row-stochastic; the exp variants exponentiate entries first,
        which bounds the weight ratio between any two source frames by e
        and makes the mixing nearly uniform at realistic frame counts --
        they are kept for comparison experiments.
    init_scale: half-width of the projection initializer in units of
        1/sqrt(channels).  At 1 the initial frame distances are so small
        that every affinity row is uniform to within a few percent and the
        mixing erases temporal structure; wider draws keep it selective.
    """

    tau: float = 1.0
    placement: tuple[str, ...] = FULL_PLACEMENT
    grad_mode: str = "full"
    encoder_adapt: str = "mean"
    init_scale: float = 16.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.init_scale <= 0:
            raise ConfigError(f"init_scale must be positive, got {self.init_scale}")
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError(f"grad_mode {self.grad_mode!r} not in {GRAD_MODES}")
        if self.encoder_adapt not in ENCODER_ADAPT_MODES:
            raise ConfigError(
                f"encoder_adapt {self.encoder_adapt!r} not in {ENCODER_ADAPT_MODES}")
        unknown = [p for p in self.placement if p not in PLACEMENTS]
        if unknown:
            raise ConfigError(f"unknown placements {unknown}; valid: {PLACEMENTS}")

    @property
    def enabled(self) -> bool:
        return len(self.placement) > 0

    def resolutions(self) -> tuple[int, ...]:
        """Time-reduction factors (2 for 1/2, 4 for 1/4) needing an affinity."""
        factors = sorted({2 if p.endswith("1/2") else 4 for p in self.placement})
        return tuple(factors)


@dataclass
class AffinityMatrix:
    """Per-class frame-to-frame mixing weights at one time resolution.

    ``enc_weights`` and ``dec_weights`` are the tensors the two usage
    paths should multiply with; ``apply_grad_mode`` swaps in detached
    copies to sever gradient flow selectively.
    """

    weights: Tensor  # (c, t, t) or (n, c, t, t)
    tau: float
    source_resolution: int
    enc_weights: Tensor = field(init=False)
    dec_weights: Tensor = field(init=False)

    def __post_init__(self):
        self.enc_weights = self.weights
        self.dec_weights = self.weights


def project_to_classes(x, w) -> Tensor:
    """Collapse channels to classes: (b, t, f) x (c, b) -> (c, t, f).

    Also accepts a batched (n, b, t, f) input, giving (n, c, t, f).
    """
    x, w = T._as_tensor(x), T._as_tensor(w)
    if x.ndim not in (3, 4):
        raise ShapeMismatchError(f"project_to_classes expects (b, t, f) or (n, b, t, f), got {x.shape}")
    channel_axis = x.ndim - 3
    if w.ndim != 2 or w.shape[1] != x.shape[channel_axis]:
        raise ShapeMismatchError(
            f"projection weight {w.shape} does not match {x.shape[channel_axis]} input channels")
    b, t, f = x.shape[-3:]
    flat = T.reshape(x, x.shape[:channel_axis] + (b, t * f))
    if x.ndim == 3:
        out = T.matmul(w, flat)                                   # (c, t*f)
    else:
        out = T.matmul(T.broadcast_to(w, (x.shape[0],) + w.shape), flat)
    return T.reshape(out, x.shape[:channel_axis] + (w.shape[0], t, f))


def compute_affinity(x_tilde, tau: float, valid_frames=None) -> AffinityMatrix:
    """Row-stochastic affinity from class-projected features (.., c, t, f).

    Each row i is softmax(-d^2(i, j) / (tau * sqrt(f))) over source frames
    j; identical frames produce identical rows and the diagonal is always
    the row maximum.  ``valid_frames`` (an int, or one per batch entry)
    excludes zero-padded tail frames from the source side.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    x_tilde = T._as_tensor(x_tilde)
    if x_tilde.ndim not in (3, 4):
        raise ShapeMismatchError(f"compute_affinity expects (c, t, f) or (n, c, t, f), got {x_tilde.shape}")
    t = x_tilde.shape[-2]
    f = x_tilde.shape[-1]
    d = pairwise_sqdist(x_tilde)                                   # (.., c, t, t)
    logits = d * (-1.0 / (tau * float(np.sqrt(f))))
    if valid_frames is not None:
        mask = _source_mask(valid_frames, t, x_tilde.ndim == 4, x_tilde.dtype)
        if mask is not None:
            logits = logits + mask
    weights = T.softmax_lastdim(logits)
    return AffinityMatrix(weights=weights, tau=tau, source_resolution=t)


def _source_mask(valid_frames, t: int, batched: bool, dtype):
    """Additive -inf-style mask over padded source frames, or None if full."""
    lengths = np.atleast_1d(np.asarray(valid_frames, dtype=np.int64))
    if np.all(lengths >= t):
        return None
    mask = np.where(np.arange(t)[None, :] < lengths[:, None], 0.0, -_MASK_VALUE).astype(dtype)
    if batched:
        return mask[:, None, None, :]          # (n, 1, 1, t)
    return mask[0][None, None, :]              # (1, 1, t)


def adapt_for_encoder(affinity: AffinityMatrix, b_prime: int, mode: str = "mean",
                      *, normalize: bool | None = None) -> Tensor:
    """Collapse the class axis and replicate for b' encoder channels.

    "mean" averages the row-stochastic class matrices directly, so the
    result is row-stochastic and as selective as its inputs.  The exp
    variants exponentiate entries into [1, e] before averaging:
    "exp_literal" returns that raw average, "exp_normalized" re-divides
    each row by its sum.  Because exp compresses the entry ratio to at
    most e, both exp forms approach uniform mixing as the frame count
    grows; they exist for side-by-side comparisons.  The boolean
    ``normalize`` keyword selects between the two exp modes.
    """
    if b_prime < 1:
        raise ConfigError(f"b_prime must be >= 1, got {b_prime}")
    if normalize is not None:
        mode = "exp_normalized" if normalize else "exp_literal"
    if mode not in ENCODER_ADAPT_MODES:
        raise ConfigError(f"encoder_adapt {mode!r} not in {ENCODER_ADAPT_MODES}")
    a = affinity.enc_weights
    class_axis = a.ndim - 3
    if mode == "mean":
        mixed = T.tmean(a, axis=class_axis)                       # (.., t, t)
    else:
        mixed = T.tmean(T.exp(a), axis=class_axis)
        if mode == "exp_normalized":
            mixed = mixed / T.tsum(mixed, axis=-1, keepdims=True)
    target = mixed.shape[:class_axis] + (b_prime,) + mixed.shape[class_axis:]
    expanded = T.reshape(mixed, mixed.shape[:class_axis] + (1,) + mixed.shape[class_axis:])
    return T.broadcast_to(expanded, target)


def mixup_encoder(x_prime, a_tilde) -> Tensor:
    """Blend frames of an encoder feature: (b', t, f') per-channel product
    with the adapted affinity (b', t, t).  Batched inputs get a leading n."""
    x_prime, a_tilde = T._as_tensor(x_prime), T._as_tensor(a_tilde)
    if x_prime.shape[:-1] != a_tilde.shape[:-1] or a_tilde.shape[-1] != x_prime.shape[-2]:
        raise ShapeMismatchError(
            f"encoder mixup resolution mismatch: affinity {a_tilde.shape} vs feature {x_prime.shape}")
    return T.matmul(a_tilde, x_prime)


def mixup_decoder(z_prime, affinity: AffinityMatrix) -> Tensor:
    """Blend per-class probability tracks (t, c) with the class-matched
    affinity rows; a batched (n, t, c) input uses (n, c, t, t) weights.

    Rows are stochastic, so each output frame is a convex combination of
    input frames and [0, 1] inputs stay in [0, 1].
    """
    z_prime = T._as_tensor(z_prime)
    a = affinity.dec_weights
    if z_prime.ndim == 2:
        t, c = z_prime.shape
        if a.shape != (c, t, t):
            raise ShapeMismatchError(
                f"decoder mixup resolution mismatch: affinity {a.shape} vs feature {z_prime.shape}")
        columns = T.transpose(z_prime, (1, 0))                    # (c, t)
        mixed = T.matmul(a, T.reshape(columns, (c, t, 1)))        # (c, t, 1)
        return T.transpose(T.reshape(mixed, (c, t)), (1, 0))
    if z_prime.ndim == 3:
        n, t, c = z_prime.shape
        if a.shape != (n, c, t, t):
            raise ShapeMismatchError(
                f"decoder mixup resolution mismatch: affinity {a.shape} vs feature {z_prime.shape}")
        columns = T.transpose(z_prime, (0, 2, 1))                 # (n, c, t)
        mixed = T.matmul(a, T.reshape(columns, (n, c, t, 1)))
        return T.transpose(T.reshape(mixed, (n, c, t)), (0, 2, 1))
    raise ShapeMismatchError(f"mixup_decoder expects (t, c) or (n, t, c), got {z_prime.shape}")


def apply_grad_mode(affinity: AffinityMatrix, mode: str) -> AffinityMatrix:
    """Detach the affinity on the encoder path, decoder path, both, or
    neither, controlling which mixing sites feed gradients back into the
    projection weights."""
    if mode not in GRAD_MODES:
        raise ConfigError(f"grad_mode {mode!r} not in {GRAD_MODES}")
    scoped = AffinityMatrix(weights=affinity.weights, tau=affinity.tau,
                            source_resolution=affinity.source_resolution)
    if mode in ("none", "dec_only"):
        scoped.enc_weights = affinity.weights.detach()
    if mode in ("none", "enc_only"):
        scoped.dec_weights = affinity.weights.detach()
    return scoped
