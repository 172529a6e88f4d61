"""Key=value run configuration shared by the CLI commands.

Precedence: built-in defaults < config file (``--config PATH``) < explicit
command-line flags.  Unknown keys are rejected.  The effective
configuration is echoed into each command's output directory for
provenance.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .affinity import AmConfig, FULL_PLACEMENT, GRAD_MODES, PLACEMENTS
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def parse_placement(text: str) -> tuple[str, ...]:
    """'none', 'full', or a comma list like 'enc@1/2,dec@1/4'."""
    cleaned = text.strip().lower()
    if cleaned in ("none", ""):
        return ()
    if cleaned in ("full", "all"):
        return FULL_PLACEMENT
    items = tuple(part.strip() for part in cleaned.split(",") if part.strip())
    bad = [p for p in items if p not in PLACEMENTS]
    if bad:
        raise ConfigError(f"unknown placements {bad}; valid: {list(PLACEMENTS)} or none/full")
    return items


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value) if value else "none"
    return str(value)


@dataclass(frozen=True)
class Field:
    default: Any
    parse: Callable[[str], Any]
    help: str


FIELDS: dict[str, Field] = {
    # model
    "model.preset": Field("desk", str, "desk (CPU widths) or full"),
    "model.conv_channels": Field(None, _parse_ints, "override conv widths, e.g. 8,16,32"),
    "model.gru_hidden": Field(None, int, "override recurrent width"),
    "model.lp_pool_p": Field(4.0, float, "Lp pooling exponent"),
    "model.pooling": Field("linear_softmax", str, "clip pooling: linear_softmax or max"),
    "model.dtype": Field("float32", str, "numeric precision: float32 or float64"),
    # affinity mixing
    "am.tau": Field(1.0, float, "affinity temperature"),
    "am.placement": Field(FULL_PLACEMENT, parse_placement,
                          "none, full, or comma list of enc@1/2,enc@1/4,dec@1/2,dec@1/4"),
    "am.grad_mode": Field("full", str, "full, enc_only, dec_only, or none"),
    "am.encoder_adapt": Field("mean", str,
                               "encoder affinity collapse: mean, exp_normalized, exp_literal"),
    "am.init_scale": Field(16.0, float, "projection init half-width in 1/sqrt(channels) units"),
    # training
    "train.lr": Field(1e-4, float, "starting learning rate"),
    "train.weight_decay": Field(0.01, float, "decoupled weight decay"),
    "train.batch_size": Field(8, int, "training batch size"),
    "train.max_epochs": Field(40, int, "epoch budget"),
    "train.plateau_patience": Field(3, int, "epochs without improvement before lr cut"),
    "train.plateau_factor": Field(0.1, float, "lr multiplier on plateau"),
    "train.val_fraction": Field(0.2, float, "fraction of clips held out for validation"),
    # decoding / evaluation
    "eval.threshold": Field(0.5, float, "probability threshold"),
    "eval.median_window": Field(1, int, "odd median smoothing window (1 = off)"),
    "eval.segment_seconds": Field(1.0, float, "segment-score segment length"),
    "eval.onset_collar": Field(0.200, float, "event-score onset collar (s)"),
    "eval.offset_collar": Field(0.200, float, "event-score minimum offset collar (s)"),
    "eval.offset_pct": Field(0.20, float, "event-score offset collar as a duration fraction"),
    # ablation studies
    "ablate.seeds": Field(5, int, "seeds per study row"),
    "ablate.train_fraction": Field(0.7, float, "ablation train split"),
    "ablate.val_fraction": Field(0.15, float, "ablation validation split"),
}


class RunConfig:
    """Resolved configuration: defaults, file overrides, flag overrides."""

    def __init__(self, values: dict[str, Any]):
        self.values = values

    def __getitem__(self, key: str):
        return self.values[key]

    def model_config(self, classes, seed_dtype_override=None) -> ModelConfig:
        preset = self.values["model.preset"]
        if preset not in ("desk", "full"):
            raise ConfigError(f"model.preset must be desk or full, got {preset!r}")
        channels = self.values["model.conv_channels"]
        if channels is None:
            channels = (8, 16, 32) if preset == "desk" else (32, 64, 128)
        hidden = self.values["model.gru_hidden"]
        if hidden is None:
            hidden = 32 if preset == "desk" else 128
        am = AmConfig(tau=self.values["am.tau"],
                      placement=tuple(self.values["am.placement"]),
                      grad_mode=self.values["am.grad_mode"],
                      encoder_adapt=self.values["am.encoder_adapt"],
                      init_scale=self.values["am.init_scale"])
        return ModelConfig(classes=len(classes), class_names=tuple(classes),
                           conv_channels=tuple(channels), gru_hidden=hidden,
                           lp_pool_p=self.values["model.lp_pool_p"],
                           pooling=self.values["model.pooling"], am=am,
                           dtype=self.values["model.dtype"])

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.values["train.lr"],
                           weight_decay=self.values["train.weight_decay"],
                           batch_size=self.values["train.batch_size"],
                           max_epochs=self.values["train.max_epochs"],
                           plateau_patience=self.values["train.plateau_patience"],
                           plateau_factor=self.values["train.plateau_factor"],
                           seed=seed)

    def echo(self, out_dir) -> None:
        lines = [f"{key} = {_fmt(self.values[key])}" for key in sorted(self.values)]
        Path(out_dir, "effective_config.txt").write_text("\n".join(lines) + "\n")


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    raw: dict[str, str] = {}
    path = Path(path)
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def resolve(config_path=None, flag_values: dict[str, str] | None = None) -> RunConfig:
    """Merge defaults, an optional config file, and flag overrides."""
    values = {key: spec.default for key, spec in FIELDS.items()}

    def apply(source: dict[str, str], origin: str):
        for key, text in source.items():
            if key not in FIELDS:
                raise ConfigError(f"{origin}: unknown configuration key {key!r}")
            try:
                values[key] = FIELDS[key].parse(text) if isinstance(text, str) else text
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"{origin}: bad value for {key}: {exc}") from exc

    if config_path is not None:
        apply(read_config_file(config_path), str(config_path))
    if flag_values:
        apply(flag_values, "command line")
    return RunConfig(values)
