"""Deterministic desk-scale soundscape synthesis and dataset manifests.

Each clip is low-level background noise plus a handful of events drawn
from per-class harmonic templates with well-separated fundamentals, so a
small model can learn the classes in CPU minutes.  Weak labels are the
set of event classes per clip; strong annotations (per-clip TSVs) carry
onsets and offsets.  Everything is a pure function of (spec, seed).

The manifest is JSON-lines, one object per clip:
    {"id": ..., "audio": ..., "labels": [...], "strong": ...}
with paths relative to the manifest's directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import save_wav
from .errors import ConfigError, ManifestError
from .metrics import Event

DEFAULT_CLASS_NAMES = ("pulse", "hum", "chime", "buzz", "whine",
                       "drone", "beep", "ring", "hiss", "whirr")
BACKGROUND_RMS = 0.01
FADE_SECONDS = 0.010


@dataclass(frozen=True)
class ScapeSpec:
    """What to synthesize: clip count and length, class count, event
    count/duration/SNR ranges, polyphony cap, master seed.

    ``distractor_bursts`` adds label-free broadband noise bursts on top of
    the background.  They make clips acoustically heterogeneous without
    touching the annotations, which is what makes frame-mixing quality
    matter on a desk-scale set.
    """

    n_clips: int = 32
    clip_seconds: float = 10.0
    classes: int = 10
    events_per_clip: tuple[int, int] = (1, 5)
    event_seconds: tuple[float, float] = (0.5, 3.0)
    snr_db: tuple[float, float] = (6.0, 20.0)
    max_polyphony: int = 3
    distractor_bursts: tuple[int, int] = (0, 0)
    distractor_seconds: tuple[float, float] = (0.2, 0.5)
    distractor_snr_db: tuple[float, float] = (8.0, 14.0)
    distractor_band_hz: tuple[float, float] | None = None
    sample_rate: int = 44100
    seed: int = 0

    def __post_init__(self):
        if self.n_clips < 1 or self.classes < 1:
            raise ConfigError("n_clips and classes must be positive")
        if self.classes > len(DEFAULT_CLASS_NAMES):
            raise ConfigError(f"at most {len(DEFAULT_CLASS_NAMES)} synthetic classes are defined")
        if not (0 < self.events_per_clip[0] <= self.events_per_clip[1]):
            raise ConfigError(f"bad events_per_clip range {self.events_per_clip}")
        if not (0 < self.event_seconds[0] <= self.event_seconds[1]):
            raise ConfigError(f"bad event_seconds range {self.event_seconds}")
        if self.snr_db[0] > self.snr_db[1]:
            raise ConfigError(f"bad snr_db range {self.snr_db}")
        if self.clip_seconds < self.event_seconds[1]:
            raise ConfigError("clip_seconds must cover the longest event")
        if not (0 <= self.distractor_bursts[0] <= self.distractor_bursts[1]):
            raise ConfigError(f"bad distractor_bursts range {self.distractor_bursts}")

    @property
    def class_names(self) -> tuple[str, ...]:
        return DEFAULT_CLASS_NAMES[:self.classes]


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    audio: str
    labels: tuple[str, ...]
    strong: str | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path
    split: str | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def audio_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.audio

    def strong_path(self, entry: ManifestEntry) -> Path | None:
        return self.root / entry.strong if entry.strong else None

    def label_union(self) -> tuple[str, ...]:
        seen = set()
        for entry in self.entries:
            seen.update(entry.labels)
        return tuple(sorted(seen))


# ---------------------------------------------------------------------- #
# class templates
# ---------------------------------------------------------------------- #

_FUNDAMENTAL_LO = 180.0
_FUNDAMENTAL_HI = 6000.0
# Log-spaced fundamentals, permuted so that the first few class ids are
# already spread across the whole range (small desk runs use 2-4 classes).
_FUNDAMENTAL_ORDER = (0, 9, 5, 2, 7, 4, 1, 8, 3, 6)


def class_fundamental(class_id: int) -> float:
    """A distinct fundamental per class id, spanning 180 Hz to 6 kHz."""
    n = len(DEFAULT_CLASS_NAMES)
    rank = _FUNDAMENTAL_ORDER[class_id % n]
    ratio = (_FUNDAMENTAL_HI / _FUNDAMENTAL_LO) ** (rank / (n - 1))
    return _FUNDAMENTAL_LO * ratio


def synth_class_template(class_id: int, duration: float, sr: int, seed: int) -> np.ndarray:
    """A harmonic stack at the class fundamental with 10 ms fades.

    Deterministic in (class_id, duration, sr, seed); peak-normalized to
    0.9 before any event-level gain.
    """
    if duration <= 0:
        raise ConfigError(f"template duration must be positive, got {duration}")
    rng = np.random.default_rng([seed, class_id, int(round(duration * 1e6))])
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    f0 = class_fundamental(class_id)
    signal = np.zeros(n)
    for harmonic, amp in enumerate((1.0, 0.5, 0.25), start=1):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        signal += amp * np.sin(2.0 * np.pi * f0 * harmonic * t + phase)
    # slow amplitude wobble keeps clips from being pure steady tones
    wobble_rate = rng.uniform(1.0, 4.0)
    signal *= 1.0 + 0.2 * np.sin(2.0 * np.pi * wobble_rate * t + rng.uniform(0, 2 * np.pi))

    fade = min(int(round(FADE_SECONDS * sr)), n // 2)
    if fade > 0:
        ramp = np.linspace(0.0, 1.0, fade)
        signal[:fade] *= ramp
        signal[-fade:] *= ramp[::-1]
    peak = np.abs(signal).max()
    return 0.9 * signal / peak if peak > 0 else signal


def _max_polyphony(events: list[Event]) -> int:
    times = sorted([(e.onset, 1) for e in events] + [(e.offset, -1) for e in events])
    depth = best = 0
    for _, step in times:
        depth += step
        best = max(best, depth)
    return best


def _draw_events(spec: ScapeSpec, rng: np.random.Generator) -> list[Event]:
    n_events = int(rng.integers(spec.events_per_clip[0], spec.events_per_clip[1] + 1))
    for _ in range(50):
        events = []
        for _ in range(n_events):
            label = spec.class_names[int(rng.integers(spec.classes))]
            duration = float(rng.uniform(*spec.event_seconds))
            onset = float(rng.uniform(0.0, spec.clip_seconds - duration))
            events.append(Event(label=label, onset=onset, offset=onset + duration))
        if _max_polyphony(events) <= spec.max_polyphony:
            return sorted(events)
        n_events = max(1, n_events - 1)
    return sorted(events[:1])


def synth_clip(spec: ScapeSpec, clip_index: int) -> tuple[np.ndarray, list[Event]]:
    """One soundscape: background noise, label-free distractor bursts,
    and the annotated events."""
    rng = np.random.default_rng([spec.seed, clip_index])
    n = int(round(spec.clip_seconds * spec.sample_rate))
    samples = rng.normal(0.0, BACKGROUND_RMS, size=n)
    events = _draw_events(spec, rng)

    n_bursts = int(rng.integers(spec.distractor_bursts[0], spec.distractor_bursts[1] + 1)) \
        if spec.distractor_bursts[1] > 0 else 0
    for _ in range(n_bursts):
        duration = float(rng.uniform(*spec.distractor_seconds))
        onset = float(rng.uniform(0.0, spec.clip_seconds - duration))
        length = int(round(duration * spec.sample_rate))
        burst = rng.normal(0.0, 1.0, size=length)
        if spec.distractor_band_hz is not None:
            spectrum = np.fft.rfft(burst)
            freqs = np.fft.rfftfreq(length, d=1.0 / spec.sample_rate)
            lo, hi = spec.distractor_band_hz
            spectrum[(freqs < lo) | (freqs > hi)] = 0.0
            burst = np.fft.irfft(spectrum, n=length)
        fade = min(int(round(FADE_SECONDS * spec.sample_rate)), length // 2)
        if fade > 0:
            ramp = np.linspace(0.0, 1.0, fade)
            burst[:fade] *= ramp
            burst[-fade:] *= ramp[::-1]
        snr = float(rng.uniform(*spec.distractor_snr_db))
        gain = BACKGROUND_RMS * 10.0 ** (snr / 20.0) / np.sqrt(np.mean(burst ** 2))
        start = int(round(onset * spec.sample_rate))
        stop = min(start + length, n)
        samples[start:stop] += gain * burst[:stop - start]

    for event in events:
        class_id = spec.class_names.index(event.label)
        template = synth_class_template(class_id, event.duration, spec.sample_rate,
                                        seed=spec.seed)
        snr = float(rng.uniform(*spec.snr_db))
        rms = np.sqrt(np.mean(template ** 2))
        gain = BACKGROUND_RMS * 10.0 ** (snr / 20.0) / rms
        start = int(round(event.onset * spec.sample_rate))
        stop = min(start + template.size, n)
        samples[start:stop] += gain * template[:stop - start]
    peak = np.abs(samples).max()
    if peak > 0.999:
        samples *= 0.999 / peak
    return samples, events


def generate(spec: ScapeSpec, out_dir) -> DatasetManifest:
    """Write WAVs, per-clip strong TSVs, and the JSONL manifest."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    (out_dir / "strong").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(spec.n_clips):
        clip_id = f"clip_{i:05d}"
        samples, events = synth_clip(spec, i)
        save_wav(out_dir / "audio" / f"{clip_id}.wav", samples, spec.sample_rate)
        strong_rel = f"strong/{clip_id}.tsv"
        with open(out_dir / strong_rel, "w", encoding="utf-8") as fh:
            for event in events:
                fh.write(f"{clip_id}.wav\t{event.onset:.6f}\t{event.offset:.6f}\t{event.label}\n")
        labels = tuple(sorted({e.label for e in events}))
        entries.append(ManifestEntry(id=clip_id, audio=f"audio/{clip_id}.wav",
                                     labels=labels, strong=strong_rel))
    manifest = DatasetManifest(entries=entries, root=out_dir)
    save_manifest(out_dir / "manifest.jsonl", manifest)
    return manifest


# ---------------------------------------------------------------------- #
# manifest I/O
# ---------------------------------------------------------------------- #


def save_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in manifest.entries:
            record = {"id": entry.id, "audio": entry.audio, "labels": list(entry.labels)}
            if entry.strong:
                record["strong"] = entry.strong
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_manifest(path, known_labels=None) -> DatasetManifest:
    """Parse and validate a JSONL manifest; ids must be unique."""
    path = Path(path)
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("id", "audio", "labels"):
                if key not in record:
                    raise ManifestError(f"{path}:{lineno}: missing field {key!r}")
            if record["id"] in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate clip id {record['id']!r}")
            seen.add(record["id"])
            labels = tuple(record["labels"])
            if known_labels is not None:
                unknown = [lb for lb in labels if lb not in known_labels]
                if unknown:
                    raise ManifestError(f"{path}:{lineno}: unknown labels {unknown}")
            entries.append(ManifestEntry(id=record["id"], audio=record["audio"],
                                         labels=labels, strong=record.get("strong")))
    return DatasetManifest(entries=entries, root=path.parent)


def split(manifest: DatasetManifest, fractions, seed: int = 0) -> list[DatasetManifest]:
    """Deterministic disjoint split; fractions must sum to 1."""
    fractions = list(fractions)
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ConfigError(f"split fractions {fractions} must be nonnegative and sum to 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(manifest.entries))
    counts = [int(math.floor(f * len(order))) for f in fractions]
    while sum(counts) < len(order):
        counts[int(np.argmax(fractions))] += 1
    out = []
    names = ["train", "val", "eval"]
    pos = 0
    for i, count in enumerate(counts):
        chosen = sorted(order[pos:pos + count])
        pos += count
        out.append(DatasetManifest(
            entries=[manifest.entries[j] for j in chosen],
            root=manifest.root,
            split=names[i] if i < len(names) else f"split{i}"))
    return out
