"""The detection network: a convolutional-recurrent encoder whose frame
probabilities are decoded back to full time resolution, with optional
affinity mixing at the half and quarter time resolutions.

Encoder: three blocks of (batch norm, same-size 3x3 convolution, leaky
ReLU), each followed by Lp pooling that halves time (twice) and quarters
frequency (three times, collapsing 64 mel bands to one cell); then a
bidirectional GRU and a sigmoid linear head giving per-frame class
probabilities at one quarter of the input resolution.

Decoder: two linear upsampling steps restore full resolution.  When
enabled, affinity matrices built from the first feature at each reduced
resolution blend the same-resolution block outputs (encoder side) and
probability tracks (decoder side).

Zero-padded tail frames of batched inputs are excluded from affinity
sources, from the recurrence, from upsampling, and from pooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .affinity import (AffinityMatrix, AmConfig, adapt_for_encoder, apply_grad_mode,
                       compute_affinity, mixup_decoder, mixup_encoder, project_to_classes)
from .audio import MelSpectrogram
from .errors import ConfigError, ShapeMismatchError
from .nn import (BatchNormState, BiGruParams, GruDirection, batchnorm2d, bigru_forward,
                 conv2d_same, linear_upsample_time, lp_pool_time)
from .tensor import Tensor, leaky_relu

POOLING_KINDS = ("linear_softmax", "max")
LEAKY_SLOPE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    The defaults are the full-size network; ``desk_preset()`` shrinks the
    widths for CPU-minute training runs.
    """

    classes: int = 10
    class_names: tuple[str, ...] | None = None
    conv_channels: tuple[int, ...] = (32, 64, 128)
    kernel: tuple[int, int] = (3, 3)
    time_down_factors: tuple[int, ...] = (2, 2, 1)
    freq_down_factors: tuple[int, ...] = (4, 4, 4)
    lp_pool_p: float = 4.0
    gru_hidden: int = 128
    pooling: str = "linear_softmax"
    am: AmConfig = field(default_factory=AmConfig)
    dtype: str = "float32"
    n_mels: int = 64

    @staticmethod
    def desk_preset(**overrides) -> "ModelConfig":
        base = dict(conv_channels=(8, 16, 32), gru_hidden=32)
        base.update(overrides)
        return ModelConfig(**base)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def block_input_factors(self) -> tuple[int, ...]:
        """Cumulative time reduction at each block's input (1 = full rate)."""
        factors = [1]
        for ts in self.time_down_factors[:-1]:
            factors.append(factors[-1] * ts)
        return tuple(factors)

    @property
    def total_time_down(self) -> int:
        return int(np.prod(self.time_down_factors))

    def validate(self) -> None:
        if self.classes < 1:
            raise ConfigError(f"classes must be >= 1, got {self.classes}")
        if self.class_names is not None and len(self.class_names) != self.classes:
            raise ConfigError(
                f"{len(self.class_names)} class names for {self.classes} classes")
        if len(self.conv_channels) != 3:
            raise ConfigError(f"expected 3 conv blocks, got channels {self.conv_channels}")
        if len(self.time_down_factors) != 3 or len(self.freq_down_factors) != 3:
            raise ConfigError("need one time and one frequency pooling factor per block")
        if self.total_time_down != 4:
            raise ConfigError(
                f"time pooling factors {self.time_down_factors} must multiply to 4 "
                "(two doubling upsample steps restore full resolution)")
        freq_total = int(np.prod(self.freq_down_factors))
        if freq_total > self.n_mels or self.n_mels % freq_total != 0:
            raise ConfigError(
                f"frequency pooling factors {self.freq_down_factors} do not divide {self.n_mels} bands")
        if self.kernel[0] % 2 == 0 or self.kernel[1] % 2 == 0:
            raise ConfigError(f"kernel extents must be odd, got {self.kernel}")
        if self.pooling not in POOLING_KINDS:
            raise ConfigError(f"pooling {self.pooling!r} not in {POOLING_KINDS}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.lp_pool_p < 1:
            raise ConfigError(f"lp_pool_p must be >= 1, got {self.lp_pool_p}")
        available = set(self.block_input_factors())
        missing = [r for r in self.am.resolutions() if r not in available]
        if self.am.enabled and missing:
            raise ConfigError(
                f"affinity placements need block inputs at time factors {missing}, "
                f"but blocks sit at {sorted(available)}")

    def names(self) -> tuple[str, ...]:
        if self.class_names is not None:
            return self.class_names
        return tuple(f"class_{k}" for k in range(self.classes))


@dataclass
class FramePrediction:
    """Frame- and clip-level class probabilities for one clip."""

    probs: Tensor        # (t, c) in [0, 1]
    clip_probs: Tensor   # (c,) in [0, 1]
    valid_frames: int


@dataclass
class ModelParams:
    """Named learnable tensors plus batch-norm running statistics."""

    tensors: dict[str, Tensor]
    bn_states: dict[str, BatchNormState]

    def detached(self) -> "ModelParams":
        return ModelParams({k: v.detach() for k, v in self.tensors.items()}, self.bn_states)

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
            {k: BatchNormState(s.mean.copy(), s.var.copy()) for k, s in self.bn_states.items()})


def _orthogonalish(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """QR-orthogonalized Gaussian block (square per gate)."""
    q, r = np.linalg.qr(rng.normal(size=(rows, cols)))
    return q * np.sign(np.diag(r))[None, :]


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Deterministic initialization: uniform +-1/sqrt(fan_in) for conv and
    linear weights, QR-orthogonalized recurrent blocks, zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype
    tensors: dict[str, Tensor] = {}
    bn_states: dict[str, BatchNormState] = {}

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def param(name, arr):
        tensors[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    kh, kw = config.kernel
    in_ch = 1
    for i, out_ch in enumerate(config.conv_channels):
        param(f"block{i}.bn.gamma", np.ones(in_ch))
        param(f"block{i}.bn.beta", np.zeros(in_ch))
        bn_states[f"block{i}.bn"] = BatchNormState.initial(in_ch, dtype=dtype)
        param(f"block{i}.conv.weight", uniform((out_ch, in_ch, kh, kw), in_ch * kh * kw))
        param(f"block{i}.conv.bias", np.zeros(out_ch))
        in_ch = out_ch

    gru_in = config.conv_channels[-1] * (config.n_mels // int(np.prod(config.freq_down_factors)))
    h = config.gru_hidden
    for direction in ("fwd", "bwd"):
        param(f"gru.{direction}.w", uniform((gru_in, 3 * h), gru_in))
        blocks = [_orthogonalish(rng, h, h) for _ in range(3)]
        param(f"gru.{direction}.u", np.concatenate(blocks, axis=1))
        param(f"gru.{direction}.b", np.zeros(3 * h))

    param("head.weight", uniform((2 * h, config.classes), 2 * h))
    param("head.bias", np.zeros(config.classes))

    factor_channels = {}
    block_inputs = config.block_input_factors()
    channels_at = [1] + list(config.conv_channels[:-1])
    for factor, ch in zip(block_inputs, channels_at):
        factor_channels[factor] = ch
    # A +-1/sqrt(b) projection leaves the frame distances so small that the
    # affinity is indistinguishable from uniform and its gradient (which
    # scales with W) vanishes; am.init_scale widens the draw so the mixing
    # is selective from the first step.
    for factor in config.am.resolutions():
        b = factor_channels[factor]
        param(f"am.r{factor}.w", config.am.init_scale * uniform((config.classes, b), b))

    return ModelParams(tensors, bn_states)


# ---------------------------------------------------------------------- #
# pooling
# ---------------------------------------------------------------------- #


def pool_linear_softmax(q: Tensor, valid: int | None = None) -> Tensor:
    """Clip probability per class: sum(q^2) / sum(q) over the first
    ``valid`` frames, 0 where the denominator is 0."""
    q = T._as_tensor(q)
    if valid is not None:
        q = q[:valid]
    num = T.tsum(q * q, axis=0)
    den = T.tsum(q, axis=0)
    guard = Tensor((den.data == 0).astype(q.dtype))
    return num / (den + guard)


def pool_max(q: Tensor, valid: int | None = None) -> Tensor:
    """Per-class maximum over the first ``valid`` frames."""
    q = T._as_tensor(q)
    if valid is not None:
        q = q[:valid]
    return T.tmax(q, axis=0)


def _pool_batched(q: Tensor, mask: np.ndarray, kind: str) -> Tensor:
    """(n, t, c) frame probabilities -> (n, c) clip probabilities."""
    masked = q * Tensor(mask)
    if kind == "max":
        return T.tmax(masked, axis=1)
    num = T.tsum(masked * masked, axis=1)
    den = T.tsum(masked, axis=1)
    guard = Tensor((den.data == 0).astype(q.dtype))
    return num / (den + guard)


# ---------------------------------------------------------------------- #
# forward pass
# ---------------------------------------------------------------------- #


def _valid_at(valid: np.ndarray, factor: int) -> np.ndarray:
    return np.ceil(valid / factor).astype(np.int64)


def _frame_mask(valid: np.ndarray, t: int, dtype) -> np.ndarray:
    return (np.arange(t)[None, :] < valid[:, None]).astype(dtype)


def _upsample_ragged(z: Tensor, src_valid: np.ndarray, dst_valid: np.ndarray,
                     dst_t: int, dtype) -> Tensor:
    """Upsample each clip's valid region independently; padding stays zero."""
    n, src_t, c = z.shape
    if np.all(src_valid == src_t) and np.all(dst_valid == dst_t):
        return linear_upsample_time(z, dst_t)
    rows = []
    for i in range(n):
        zi = z[i, :int(src_valid[i]), :]
        up = linear_upsample_time(zi, int(dst_valid[i]))
        pad = dst_t - int(dst_valid[i])
        if pad > 0:
            up = T.concat([up, Tensor(np.zeros((pad, c), dtype=dtype))], axis=0)
        rows.append(up)
    return T.stack(rows, axis=0)


class AmnModel:
    """Bundles a configuration with its parameters; see the module
    docstring for the data path."""

    def __init__(self, config: ModelConfig, params: ModelParams | None = None, seed: int = 0):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        needed = [f"am.r{r}.w" for r in config.am.resolutions()] + ["head.weight", "gru.fwd.w"]
        missing = [name for name in needed if name not in self.params.tensors]
        if missing:
            raise ShapeMismatchError(f"parameters missing for this configuration: {missing}")

    # -------------------------------------------------------------- #

    def forward_batch(self, features, valid_lengths=None, train: bool = False):
        """Run (n, t, n_mels) features through the network.

        Returns (frame_probs (n, t, c), clip_probs (n, c)).  Gradients are
        tracked only in train mode; eval mode uses running batch-norm
        statistics and detached parameters.
        """
        cfg = self.config
        dtype = cfg.np_dtype
        feats = features.data if isinstance(features, Tensor) else np.asarray(features)
        if feats.ndim != 3 or feats.shape[2] != cfg.n_mels:
            raise ShapeMismatchError(
                f"expected features (n, t, {cfg.n_mels}), got {feats.shape}")
        feats = feats.astype(dtype, copy=False)
        n, t_in, _ = feats.shape
        if valid_lengths is None:
            valid = np.full(n, t_in, dtype=np.int64)
        else:
            valid = np.asarray(valid_lengths, dtype=np.int64)
            if valid.shape != (n,) or valid.min() < 1 or valid.max() > t_in:
                raise ShapeMismatchError(f"valid_lengths {valid_lengths} inconsistent with {n} clips of {t_in} frames")

        multiple = cfg.total_time_down
        t = int(math.ceil(t_in / multiple) * multiple)
        if t != t_in:
            feats = np.pad(feats, ((0, 0), (0, t - t_in), (0, 0)))
        params = self.params if train else self.params.detached()
        p = params.tensors

        x = Tensor(feats[:, None, :, :])                       # (n, 1, t, n_mels)
        affinities: dict[int, AffinityMatrix] = {}
        needed = set(cfg.am.resolutions()) if cfg.am.enabled else set()
        placement = set(cfg.am.placement)

        block_factors = cfg.block_input_factors()
        for i in range(3):
            factor = block_factors[i]
            t_here = t // factor
            v_here = _valid_at(valid, factor)
            if factor in needed and factor not in affinities:
                x_tilde = project_to_classes(x, p[f"am.r{factor}.w"])
                raw = compute_affinity(x_tilde, cfg.am.tau,
                                       valid_frames=None if np.all(v_here == t_here) else v_here)
                affinities[factor] = apply_grad_mode(raw, cfg.am.grad_mode)

            normed = batchnorm2d(x, p[f"block{i}.bn.gamma"], p[f"block{i}.bn.beta"],
                                 params.bn_states[f"block{i}.bn"], train=train)
            if not np.all(v_here == t_here):
                normed = normed * Tensor(_frame_mask(v_here, t_here, dtype)[:, None, :, None])
            x = leaky_relu(conv2d_same(normed, p[f"block{i}.conv.weight"],
                                       p[f"block{i}.conv.bias"]), LEAKY_SLOPE)
            if f"enc@1/{factor}" in placement:
                adapted = adapt_for_encoder(affinities[factor], x.shape[1],
                                            mode=cfg.am.encoder_adapt)
                x = mixup_encoder(x, adapted)
            x = lp_pool_time(x, cfg.lp_pool_p, cfg.time_down_factors[i], cfg.freq_down_factors[i])

        # (n, ch, t/4, f_last) -> (n, t/4, ch * f_last)
        n_, ch, t4, f_last = x.shape
        x = T.reshape(T.transpose(x, (0, 2, 1, 3)), (n_, t4, ch * f_last))

        gru = BiGruParams(
            GruDirection(p["gru.fwd.w"], p["gru.fwd.u"], p["gru.fwd.b"]),
            GruDirection(p["gru.bwd.w"], p["gru.bwd.u"], p["gru.bwd.b"]))
        v4 = _valid_at(valid, cfg.total_time_down)
        x = bigru_forward(x, gru, valid_lengths=v4)
        z = T.sigmoid(T.matmul(x, p["head.weight"]) + p["head.bias"])   # (n, t/4, c)

        # decoder: quarter -> half -> full resolution
        v2 = _valid_at(valid, 2)
        if "dec@1/4" in placement:
            z = mixup_decoder(z, affinities[4])
        z = _upsample_ragged(z, v4, v2, t // 2, dtype)
        if "dec@1/2" in placement:
            z = mixup_decoder(z, affinities[2])
        z = _upsample_ragged(z, v2, valid, t, dtype)

        if t != t_in:
            z = z[:, :t_in, :]
        clip_probs = _pool_batched(z, _frame_mask(valid, t_in, dtype)[:, :, None], cfg.pooling)
        return z, clip_probs

    def predict(self, features: MelSpectrogram | np.ndarray) -> FramePrediction:
        """Eval-mode inference for a single clip (no padding, batch of 1)."""
        frames = features.frames.data if isinstance(features, MelSpectrogram) else np.asarray(features)
        probs, clip_probs = self.forward_batch(frames[None], train=False)
        return FramePrediction(probs=probs[0], clip_probs=clip_probs[0],
                               valid_frames=frames.shape[0])


def forward(features: MelSpectrogram, config: ModelConfig, params: ModelParams,
            mode: str = "eval") -> FramePrediction:
    """Single-clip forward pass; ``mode`` selects batch-norm behavior."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    model = AmnModel(config, params)
    frames = features.frames.data if isinstance(features, MelSpectrogram) else np.asarray(features)
    probs, clip_probs = model.forward_batch(frames[None], train=(mode == "train"))
    return FramePrediction(probs=probs[0], clip_probs=clip_probs[0], valid_frames=frames.shape[0])
