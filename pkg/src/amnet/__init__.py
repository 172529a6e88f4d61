"""Weakly supervised sound event detection with affinity-mixup
regularization: a self-contained numpy implementation of the feature
front end, the differentiable network, training, decoding, and scoring.

The sklearn-style entry points are ``LogMelExtractor`` and
``AffinityMixupDetector``; the lower-level pieces (autograd tensors,
kernels, the model, training loop, metrics, and the soundscape
generator) are importable from their submodules.
"""

from .affinity import (AffinityMatrix, AmConfig, adapt_for_encoder, apply_grad_mode,
                       compute_affinity, mixup_decoder, mixup_encoder, project_to_classes)
from .audio import Clip, MelSpectrogram, featurize, load_wav, save_wav
from .data import DatasetManifest, ScapeSpec, generate, load_manifest, split
from .errors import AmnetError
from .estimator import AffinityMixupDetector, LogMelExtractor
from .gradcheck import finite_diff_check
from .metrics import (Event, ScoreReport, binarize, decode_events, event_score,
                      load_strong, segment_score, tagging_score)
from .model import (AmnModel, FramePrediction, ModelConfig, forward, init_params,
                    pool_linear_softmax, pool_max)
from .tensor import Tensor, detach
from .training import (Batch, TrainConfig, adamw_step, bce_loss, collate,
                       load_checkpoint, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "AffinityMatrix", "AffinityMixupDetector", "AmConfig", "AmnModel", "AmnetError",
    "Batch", "Clip", "DatasetManifest", "Event", "FramePrediction", "LogMelExtractor",
    "MelSpectrogram", "ModelConfig", "ScapeSpec", "ScoreReport", "Tensor", "TrainConfig",
    "adamw_step", "adapt_for_encoder", "apply_grad_mode", "bce_loss", "binarize",
    "collate", "compute_affinity", "decode_events", "detach", "event_score",
    "featurize", "finite_diff_check", "forward", "generate", "init_params",
    "load_checkpoint", "load_manifest", "load_strong", "load_wav", "mixup_decoder",
    "mixup_encoder", "pool_linear_softmax", "pool_max", "project_to_classes",
    "save_checkpoint", "save_wav", "segment_score", "split", "tagging_score", "train",
]
