"""Clip-level training: BCE on pooled probabilities, AdamW with decoupled
weight decay, plateau learning-rate reduction, zero-padded batching, and
binary checkpointing.

Training is a pure function of (dataset, seed, configs): initialization,
shuffling, and every numeric step are driven by seeded generators, so a
repeated run reproduces the epoch-loss sequence bit for bit.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .affinity import AmConfig
from .errors import CheckpointError, ConfigError, DivergenceError, ShapeMismatchError
from .model import AmnModel, ModelConfig, ModelParams
from .nn import BatchNormState
from .tensor import Tensor, clamp, log, tmean

_CKPT_MAGIC = b"AMN1"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyper-parameters; the desk preset shrinks the batch."""

    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 64
    max_epochs: int = 40
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    plateau_threshold: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.plateau_patience < 1:
            raise ConfigError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")

    @staticmethod
    def desk_preset(**overrides) -> "TrainConfig":
        base = dict(batch_size=8)
        base.update(overrides)
        return TrainConfig(**base)


@dataclass
class Batch:
    """Features zero-padded to the longest clip in the batch."""

    features: np.ndarray      # (n, t_max, n_mels)
    valid_lengths: list[int]
    labels: np.ndarray        # (n, c) in {0, 1}


def collate(examples) -> Batch:
    """Pack (features (t, f), labels (c,)) pairs, padding time with zeros.

    Order is preserved; t_max is the longest clip in the batch.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("collate requires a non-empty batch")
    lengths = [feats.shape[0] for feats, _ in examples]
    t_max = max(lengths)
    n_mels = examples[0][0].shape[1]
    n_classes = len(examples[0][1])
    features = np.zeros((len(examples), t_max, n_mels), dtype=np.float64)
    labels = np.zeros((len(examples), n_classes), dtype=np.float64)
    for i, (feats, y) in enumerate(examples):
        if feats.shape[1] != n_mels or len(y) != n_classes:
            raise ShapeMismatchError(
                f"clip {i} has shape {feats.shape}/{len(y)} labels, expected (*, {n_mels})/{n_classes}")
        features[i, :lengths[i]] = feats
        labels[i] = y
    return Batch(features=features, valid_lengths=lengths, labels=labels)


# ---------------------------------------------------------------------- #
# loss and optimizer
# ---------------------------------------------------------------------- #


def bce_loss(clip_probs, labels) -> Tensor:
    """Mean binary cross-entropy over all (clip, class) cells.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    probs = clip_probs if isinstance(clip_probs, Tensor) else Tensor(clip_probs)
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if probs.shape != y.shape:
        raise ShapeMismatchError(f"probabilities {probs.shape} vs labels {y.shape}")
    y = y.astype(probs.dtype, copy=False)
    p = clamp(probs, 1e-7, 1.0 - 1e-7)
    per_cell = Tensor(y) * log(p) + Tensor(1.0 - y) * log(1.0 - p)
    return -tmean(per_cell)


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @staticmethod
    def initial(params: dict[str, Tensor]) -> "AdamWState":
        return AdamWState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()})


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float,
               weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8
               ) -> dict[str, Tensor]:
    """One AdamW update; weight decay is applied as a separate
    multiplicative shrink, decoupled from the adaptive step.

    Parameters are replaced functionally: the returned dict holds fresh
    leaf tensors so earlier graphs and gradients stay untouched.
    """
    b1, b2 = betas
    state.step += 1
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    updated: dict[str, Tensor] = {}
    for name in params:
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / corr1
        v_hat = state.v[name] / corr2
        new_data = p.data * (1.0 - lr * weight_decay)
        new_data = new_data - lr * m_hat / (np.sqrt(v_hat) + eps)
        updated[name] = Tensor(new_data.astype(p.dtype, copy=False), requires_grad=True)
    return updated


@dataclass
class PlateauState:
    """Reduce-on-plateau bookkeeping over epoch validation losses."""

    lr: float
    patience: int = 3
    factor: float = 0.1
    threshold: float = 1e-6
    best: float = field(default=np.inf)
    stall: int = 0

    def update(self, epoch_loss: float) -> float:
        """Feed one epoch loss; returns the (possibly reduced) rate."""
        if epoch_loss < self.best - self.threshold:
            self.best = epoch_loss
            self.stall = 0
        else:
            self.stall += 1
            if self.stall >= self.patience:
                self.lr *= self.factor
                self.stall = 0
        return self.lr


def plateau_update(state: PlateauState, epoch_loss: float) -> float:
    return state.update(epoch_loss)


# ---------------------------------------------------------------------- #
# training loop
# ---------------------------------------------------------------------- #


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    model: AmnModel
    best_params: ModelParams
    best_val_loss: float
    history: list[EpochRecord]


def _dataset_loss(model: AmnModel, examples) -> float:
    """Mean BCE at batch size 1 (no padding), eval mode."""
    total, count = 0.0, 0
    for feats, y in examples:
        _, clip_probs = model.forward_batch(feats[None], train=False)
        total += bce_loss(clip_probs, y[None]).item() * len(y)
        count += len(y)
    return total / count


def train(train_examples, val_examples, model_config: ModelConfig,
          train_config: TrainConfig, epoch_hook=None) -> TrainResult:
    """Fit the model on featurized weakly labeled clips.

    ``train_examples`` / ``val_examples`` are sequences of
    (features (t, n_mels) array, labels (c,) 0/1 array).  The best
    validation checkpoint is retained; the returned model holds the final
    parameters.  ``epoch_hook(epoch, model)``, when given, may return True
    to stop early.
    """
    train_examples = list(train_examples)
    val_examples = list(val_examples)
    if not train_examples:
        raise ValueError("training requires at least one example")

    model = AmnModel(model_config, seed=train_config.seed)
    opt_state = AdamWState.initial(model.params.tensors)
    sched = PlateauState(lr=train_config.lr, patience=train_config.plateau_patience,
                         factor=train_config.plateau_factor,
                         threshold=train_config.plateau_threshold)
    shuffle_rng = np.random.default_rng(train_config.seed)

    history: list[EpochRecord] = []
    best_val = np.inf
    best_params = model.params.copy()
    n = len(train_examples)

    for epoch in range(1, train_config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        total_loss, total_cells = 0.0, 0
        for start in range(0, n, train_config.batch_size):
            chunk = [train_examples[i] for i in order[start:start + train_config.batch_size]]
            batch = collate(chunk)
            _, clip_probs = model.forward_batch(batch.features, batch.valid_lengths, train=True)
            loss = bce_loss(clip_probs, batch.labels)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            model.params.tensors = adamw_step(model.params.tensors, opt_state,
                                              lr=sched.lr, weight_decay=train_config.weight_decay)
            total_loss += loss_value * batch.labels.size
            total_cells += batch.labels.size

        train_loss = total_loss / total_cells
        val_loss = _dataset_loss(model, val_examples) if val_examples else train_loss
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        if val_loss < best_val:
            best_val = val_loss
            best_params = model.params.copy()
        record = EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss, lr=sched.lr)
        history.append(record)
        sched.update(val_loss)
        if epoch_hook is not None and epoch_hook(epoch, model):
            break

    return TrainResult(model=model, best_params=best_params,
                       best_val_loss=float(best_val), history=history)


def write_history_csv(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_loss), repr(rec.lr)])


# ---------------------------------------------------------------------- #
# checkpoints
# ---------------------------------------------------------------------- #


def _config_to_json(config: ModelConfig) -> bytes:
    payload = asdict(config)
    payload["am"] = asdict(config.am)
    return json.dumps(payload, sort_keys=True).encode("utf-8")


def _config_from_json(blob: bytes) -> ModelConfig:
    payload = json.loads(blob.decode("utf-8"))
    am = payload.pop("am")
    am["placement"] = tuple(am["placement"])
    payload["am"] = AmConfig(**am)
    for key in ("conv_channels", "kernel", "time_down_factors", "freq_down_factors"):
        payload[key] = tuple(payload[key])
    if payload.get("class_names") is not None:
        payload["class_names"] = tuple(payload["class_names"])
    return ModelConfig(**payload)


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    """Binary checkpoint: magic, version, config JSON, then named float32
    records for every parameter and batch-norm statistic."""
    records: list[tuple[str, np.ndarray]] = []
    for name in sorted(params.tensors):
        records.append((name, params.tensors[name].data))
    for name in sorted(params.bn_states):
        records.append((name + ".running_mean", params.bn_states[name].mean))
        records.append((name + ".running_var", params.bn_states[name].var))

    blob = _config_to_json(config)
    out = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(blob)), blob,
           struct.pack("<I", len(records))]
    for name, arr in records:
        encoded = name.encode("utf-8")
        out.append(struct.pack("<I", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    version, blob_len = struct.unpack("<II", raw[4:12])
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    try:
        config = _config_from_json(raw[pos:pos + blob_len])
        pos += blob_len
        (n_records,) = struct.unpack("<I", raw[pos:pos + 4])
        pos += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_records):
            (name_len,) = struct.unpack("<I", raw[pos:pos + 4])
            pos += 4
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack("<I", raw[pos:pos + 4])
            pos += 4
            shape = struct.unpack(f"<{rank}Q", raw[pos:pos + 8 * rank])
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(raw[pos:pos + 4 * count], dtype="<f4")
            if data.size != count:
                raise CheckpointError(f"{path}: truncated record {name!r}")
            pos += 4 * count
            arrays[name] = data.reshape(shape).astype(config.np_dtype)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc

    tensors: dict[str, Tensor] = {}
    bn_states: dict[str, BatchNormState] = {}
    for name, arr in arrays.items():
        if name.endswith(".running_mean"):
            bn_states.setdefault(name[:-13], BatchNormState(arr, np.ones_like(arr))).mean = arr
        elif name.endswith(".running_var"):
            bn_states.setdefault(name[:-12], BatchNormState(np.zeros_like(arr), arr)).var = arr
        else:
            tensors[name] = Tensor(arr, requires_grad=True)
    return ModelParams(tensors, bn_states), config
