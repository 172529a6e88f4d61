"""Scikit-learn style wrappers so the detector composes with pipelines,
grid search, and cloning.

``LogMelExtractor`` is a stateless transformer from clips to (t, 64)
log-mel arrays; ``AffinityMixupDetector`` is the trainable estimator:
``fit`` on featurized clips with weak label sets, ``predict`` multi-label
tags, ``predict_proba`` clip probabilities, and ``predict_events``
decoded (label, onset, offset) lists.
"""

from __future__ import annotations

import numbers
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .affinity import AmConfig, FULL_PLACEMENT
from .audio import Clip, MelSpectrogram, featurize, load_wav, N_MELS, HOP_SECONDS
from .data import split as manifest_split
from .metrics import binarize, decode_events
from .model import AmnModel, ModelConfig
from .training import TrainConfig, train


# ---------------------------------------------------------------------- #
# input validation helpers
# ---------------------------------------------------------------------- #


def as_clip(item) -> Clip:
    """Accept a Clip, a WAV path, or a (samples, sample_rate) pair."""
    if isinstance(item, Clip):
        return item
    if isinstance(item, (str, Path)):
        return load_wav(item)
    if isinstance(item, tuple) and len(item) == 2:
        samples, sr = item
        return Clip(id="clip", samples=np.asarray(samples, dtype=np.float64), sample_rate=int(sr))
    raise TypeError(f"cannot interpret {type(item).__name__} as an audio clip")


def check_features(X, n_mels: int = N_MELS) -> list[np.ndarray]:
    """Validate a list of (t, n_mels) feature arrays: 2-D, finite, t >= 4."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    out = []
    for i, item in enumerate(X):
        arr = item.frames.data if isinstance(item, MelSpectrogram) else np.asarray(item, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != n_mels:
            raise ValueError(f"X[{i}]: expected a (t, {n_mels}) feature array, got shape {arr.shape}")
        if arr.shape[0] < 4:
            raise ValueError(f"X[{i}]: need at least 4 frames, got {arr.shape[0]}")
        if not np.isfinite(arr).all():
            raise ValueError(f"X[{i}]: features contain NaN or Inf")
        out.append(arr)
    return out


def check_label_sets(y, n: int):
    """Normalize weak labels: iterables of labels, or a binary (n, c) matrix."""
    if isinstance(y, np.ndarray) and y.ndim == 2:
        if y.shape[0] != n:
            raise ValueError(f"y has {y.shape[0]} rows for {n} clips")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("binary label matrix must contain only 0 and 1")
        return [tuple(np.flatnonzero(row)) for row in y], tuple(range(y.shape[1]))
    sets = []
    for i, labels in enumerate(y):
        if isinstance(labels, (str, numbers.Number)):
            labels = (labels,)
        sets.append(tuple(labels))
    if len(sets) != n:
        raise ValueError(f"y has {len(sets)} entries for {n} clips")
    classes = tuple(sorted({label for labels in sets for label in labels}, key=str))
    if not classes:
        raise ValueError("y contains no labels at all")
    return sets, classes


class LogMelExtractor(TransformerMixin, BaseEstimator):
    """Stateless front end: clips (or WAV paths) to (t, 64) log-mel arrays."""

    def __init__(self, sample_rate: int = 44100):
        self.sample_rate = sample_rate

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [featurize(as_clip(item), expected_rate=self.sample_rate).frames.data
                for item in X]


class AffinityMixupDetector(BaseEstimator):
    """Weakly supervised sound event detector.

    Fit on (t, 64) log-mel arrays with per-clip label sets; the network
    learns frame-level activity from clip-level tags alone.  Defaults use
    the CPU-friendly desk widths.
    """

    def __init__(self, conv_channels=(8, 16, 32), gru_hidden=32, lp_pool_p=4.0,
                 pooling="linear_softmax", tau=1.0, placement=FULL_PLACEMENT,
                 grad_mode="full", encoder_adapt="mean", init_scale=16.0, lr=1e-4,
                 weight_decay=0.01, batch_size=8, max_epochs=40,
                 plateau_patience=3, plateau_factor=0.1, val_fraction=0.2,
                 threshold=0.5, median_window=1, random_state=0):
        self.conv_channels = conv_channels
        self.gru_hidden = gru_hidden
        self.lp_pool_p = lp_pool_p
        self.pooling = pooling
        self.tau = tau
        self.placement = placement
        self.grad_mode = grad_mode
        self.encoder_adapt = encoder_adapt
        self.init_scale = init_scale
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.val_fraction = val_fraction
        self.threshold = threshold
        self.median_window = median_window
        self.random_state = random_state

    # ------------------------------------------------------------------ #

    def _model_config(self, classes) -> ModelConfig:
        am = AmConfig(tau=self.tau, placement=tuple(self.placement),
                      grad_mode=self.grad_mode, encoder_adapt=self.encoder_adapt,
                      init_scale=self.init_scale)
        return ModelConfig(classes=len(classes),
                           class_names=tuple(str(c) for c in classes),
                           conv_channels=tuple(self.conv_channels),
                           gru_hidden=self.gru_hidden, lp_pool_p=self.lp_pool_p,
                           pooling=self.pooling, am=am)

    def fit(self, X, y):
        feats = check_features(X)
        label_sets, classes = check_label_sets(y, len(feats))
        self.classes_ = list(classes)
        index = {label: k for k, label in enumerate(classes)}
        examples = []
        for arr, labels in zip(feats, label_sets):
            row = np.zeros(len(classes))
            for label in labels:
                if label not in index:
                    raise ValueError(f"label {label!r} missing from the class set")
                row[index[label]] = 1.0
            examples.append((arr, row))

        rng = np.random.default_rng(self.random_state)
        n_val = int(round(self.val_fraction * len(examples)))
        order = rng.permutation(len(examples))
        val_idx = set(order[:n_val].tolist())
        train_examples = [examples[i] for i in range(len(examples)) if i not in val_idx]
        val_examples = [examples[i] for i in sorted(val_idx)]
        if not train_examples:
            raise ValueError("val_fraction leaves no training clips")

        config = self._model_config(classes)
        tcfg = TrainConfig(lr=self.lr, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, max_epochs=self.max_epochs,
                           plateau_patience=self.plateau_patience,
                           plateau_factor=self.plateau_factor, seed=self.random_state)
        result = train(train_examples, val_examples, config, tcfg)
        self.model_ = AmnModel(config, result.best_params)
        self.history_ = result.history
        self.n_features_in_ = N_MELS
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this AffinityMixupDetector instance is not fitted yet; "
                                 "call fit before predicting")

    def predict_proba(self, X) -> np.ndarray:
        """Clip-level class probabilities, shape (n_clips, n_classes)."""
        self._check_fitted()
        out = []
        for arr in check_features(X):
            out.append(self.model_.predict(arr).clip_probs.data)
        return np.stack(out, axis=0)

    def predict(self, X) -> np.ndarray:
        """Binary multi-label tag matrix (n_clips, n_classes)."""
        return (self.predict_proba(X) > self.threshold).astype(int)

    def predict_frames(self, X) -> list[np.ndarray]:
        """Per-clip frame probabilities, one (t, n_classes) array per clip."""
        self._check_fitted()
        return [self.model_.predict(arr).probs.data for arr in check_features(X)]

    def predict_events(self, X) -> list[list]:
        """Decoded events per clip, using the configured threshold and
        median smoothing."""
        self._check_fitted()
        out = []
        for frames in self.predict_frames(X):
            active = binarize(frames, threshold=self.threshold,
                              median_window=self.median_window)
            out.append(decode_events(active, HOP_SECONDS, class_names=self.classes_))
        return out

    def score(self, X, y) -> float:
        """Macro tagging F1 against weak label sets."""
        from .metrics import tagging_score
        self._check_fitted()
        label_sets, _ = check_label_sets(y, len(list(X)))
        tags = self.predict(X)
        pred = {i: {self.classes_[k] for k in np.flatnonzero(row)} for i, row in enumerate(tags)}
        true = {i: set(labels) for i, labels in enumerate(label_sets)}
        return tagging_score(pred, true).macro_f1
