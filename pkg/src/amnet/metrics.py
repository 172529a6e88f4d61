"""Scoring for sound event detection: tagging, fixed-segment, and
onset/offset (collar-based) precision/recall/F1, plus the frame-to-event
decoding that bridges frame probabilities to event lists.

Counting conventions
--------------------
* tagging: per-class presence over clips.
* segment: a class is active in a fixed-length segment if any of its
  events overlaps the segment by more than zero.
* event: greedy one-to-one matching in onset order; a match needs the
  onset within a 200 ms collar and the offset within
  max(200 ms, 20% of the reference duration).

Per-class F1 is 2PR/(P+R) with 0 whenever P+R is 0; reports carry both a
macro average over the class union and micro scores over summed counts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError

DEFAULT_SEGMENT_SECONDS = 1.0
DEFAULT_ONSET_COLLAR = 0.200
DEFAULT_OFFSET_COLLAR = 0.200
DEFAULT_OFFSET_PCT = 0.20


@dataclass(frozen=True, order=True)
class Event:
    """A labeled (onset, offset) interval in seconds."""

    label: str | int
    onset: float
    offset: float

    def __post_init__(self):
        if self.onset < 0:
            raise ManifestError(f"event onset must be >= 0, got {self.onset}")
        if self.offset <= self.onset:
            raise ManifestError(
                f"event offset {self.offset} must exceed onset {self.onset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass
class ClassScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if p + r else 0.0


@dataclass
class ScoreReport:
    """Per-class counts plus micro and macro aggregates."""

    per_class: dict = field(default_factory=dict)

    @property
    def micro(self) -> ClassScore:
        total = ClassScore()
        for score in self.per_class.values():
            total.tp += score.tp
            total.fp += score.fp
            total.fn += score.fn
        return total

    @property
    def macro_precision(self) -> float:
        return self._macro("precision")

    @property
    def macro_recall(self) -> float:
        return self._macro("recall")

    @property
    def macro_f1(self) -> float:
        return self._macro("f1")

    def _macro(self, attr: str) -> float:
        if not self.per_class:
            return 0.0
        return sum(getattr(s, attr) for s in self.per_class.values()) / len(self.per_class)

    def merge(self, other: "ScoreReport") -> "ScoreReport":
        """Sum counts class-wise (used to aggregate per-clip reports)."""
        for label, score in other.per_class.items():
            mine = self.per_class.setdefault(label, ClassScore())
            mine.tp += score.tp
            mine.fp += score.fp
            mine.fn += score.fn
        return self


def _report_from_counts(counts: dict) -> ScoreReport:
    return ScoreReport(per_class={label: ClassScore(*tpfpfn) for label, tpfpfn in sorted(
        counts.items(), key=lambda kv: str(kv[0]))})


# ---------------------------------------------------------------------- #
# frame post-processing
# ---------------------------------------------------------------------- #


def binarize(probs: np.ndarray, threshold: float = 0.5, median_window: int = 1) -> np.ndarray:
    """Optional per-class median smoothing, then thresholding of (t, c)."""
    if median_window % 2 == 0:
        raise ValueError(f"median window must be odd, got {median_window}")
    probs = np.asarray(probs)
    if median_window > 1:
        half = median_window // 2
        padded = np.pad(probs, ((half, half), (0, 0)), mode="edge")
        windows = np.lib.stride_tricks.sliding_window_view(padded, median_window, axis=0)
        probs = np.median(windows, axis=-1)
    return probs > threshold


def decode_events(binary: np.ndarray, hop_seconds: float,
                  class_names=None) -> list[Event]:
    """Maximal runs of active frames per class become events.

    Onset is the first frame's start time; offset is (last frame + 1) hops.
    """
    binary = np.asarray(binary, dtype=bool)
    t, c = binary.shape
    events = []
    for k in range(c):
        label = class_names[k] if class_names is not None else k
        column = binary[:, k]
        edges = np.flatnonzero(np.diff(np.concatenate(([False], column, [False]))))
        for start, stop in zip(edges[::2], edges[1::2]):
            events.append(Event(label=label, onset=start * hop_seconds,
                                offset=stop * hop_seconds))
    return events


# ---------------------------------------------------------------------- #
# tagging
# ---------------------------------------------------------------------- #


def tagging_score(pred_tags: dict, true_tags: dict) -> ScoreReport:
    """Clip-level presence counts over matching clip ids."""
    if set(pred_tags) != set(true_tags):
        missing = set(true_tags) ^ set(pred_tags)
        raise ManifestError(f"clip ids differ between prediction and truth: {sorted(missing)[:5]}")
    counts: dict = {}
    for clip_id in true_tags:
        pred = set(pred_tags[clip_id])
        true = set(true_tags[clip_id])
        for label in pred | true:
            tp, fp, fn = counts.setdefault(label, [0, 0, 0])
            if label in pred and label in true:
                counts[label][0] += 1
            elif label in pred:
                counts[label][1] += 1
            else:
                counts[label][2] += 1
    return _report_from_counts(counts)


# ---------------------------------------------------------------------- #
# segment score
# ---------------------------------------------------------------------- #


def _active_segments(events, n_segments: int, seg: float) -> dict:
    """Per label, the set of segment indices overlapped by > 0."""
    active: dict = {}
    for event in events:
        first = int(math.floor(event.onset / seg))
        # last segment whose start lies strictly before the offset
        last = int(math.ceil(event.offset / seg)) - 1
        first = max(first, 0)
        last = min(last, n_segments - 1)
        if last >= first:
            active.setdefault(event.label, set()).update(range(first, last + 1))
    return active


def segment_score(pred, truth, clip_dur: float,
                  segment_seconds: float = DEFAULT_SEGMENT_SECONDS) -> ScoreReport:
    """Class-activity agreement within fixed-length segments of one clip."""
    for event in list(pred) + list(truth):
        if event.offset > clip_dur + 1e-9:
            raise ManifestError(
                f"event ({event.onset}, {event.offset}) exceeds clip duration {clip_dur}")
    n_segments = max(1, int(math.ceil(clip_dur / segment_seconds - 1e-12)))
    pred_active = _active_segments(pred, n_segments, segment_seconds)
    true_active = _active_segments(truth, n_segments, segment_seconds)
    counts: dict = {}
    for label in set(pred_active) | set(true_active):
        p = pred_active.get(label, set())
        t = true_active.get(label, set())
        counts[label] = [len(p & t), len(p - t), len(t - p)]
    return _report_from_counts(counts)


# ---------------------------------------------------------------------- #
# event score
# ---------------------------------------------------------------------- #


def event_score(pred, truth, onset_collar: float = DEFAULT_ONSET_COLLAR,
                offset_collar: float = DEFAULT_OFFSET_COLLAR,
                offset_pct: float = DEFAULT_OFFSET_PCT) -> ScoreReport:
    """Onset/offset matching for one clip.

    Predictions are taken in onset order and matched greedily to the
    earliest unmatched reference of the same class satisfying both the
    onset collar and the offset rule max(offset_collar, offset_pct * ref
    duration).
    """
    counts: dict = {}
    labels = {e.label for e in pred} | {e.label for e in truth}
    for label in labels:
        p_events = sorted([e for e in pred if e.label == label], key=lambda e: (e.onset, e.offset))
        t_events = sorted([e for e in truth if e.label == label], key=lambda e: (e.onset, e.offset))
        matched = [False] * len(t_events)
        tp = 0
        for p_event in p_events:
            for j, t_event in enumerate(t_events):
                if matched[j]:
                    continue
                if abs(p_event.onset - t_event.onset) > onset_collar:
                    continue
                rule = max(offset_collar, offset_pct * t_event.duration)
                if abs(p_event.offset - t_event.offset) > rule:
                    continue
                matched[j] = True
                tp += 1
                break
        counts[label] = [tp, len(p_events) - tp, len(t_events) - tp]
    return _report_from_counts(counts)


# ---------------------------------------------------------------------- #
# corpus-level aggregation
# ---------------------------------------------------------------------- #


def segment_score_corpus(pred_by_clip: dict, truth_by_clip: dict, durations: dict,
                         segment_seconds: float = DEFAULT_SEGMENT_SECONDS) -> ScoreReport:
    if set(pred_by_clip) != set(truth_by_clip):
        raise ManifestError("clip ids differ between prediction and truth")
    report = ScoreReport()
    for clip_id in sorted(truth_by_clip, key=str):
        report.merge(segment_score(pred_by_clip[clip_id], truth_by_clip[clip_id],
                                   durations[clip_id], segment_seconds))
    return report


def event_score_corpus(pred_by_clip: dict, truth_by_clip: dict,
                       onset_collar: float = DEFAULT_ONSET_COLLAR,
                       offset_collar: float = DEFAULT_OFFSET_COLLAR,
                       offset_pct: float = DEFAULT_OFFSET_PCT) -> ScoreReport:
    if set(pred_by_clip) != set(truth_by_clip):
        raise ManifestError("clip ids differ between prediction and truth")
    report = ScoreReport()
    for clip_id in sorted(truth_by_clip, key=str):
        report.merge(event_score(pred_by_clip[clip_id], truth_by_clip[clip_id],
                                 onset_collar, offset_collar, offset_pct))
    return report


# ---------------------------------------------------------------------- #
# annotation TSV and report output
# ---------------------------------------------------------------------- #


def write_events_tsv(path, events_by_clip: dict) -> None:
    """``filename<TAB>onset<TAB>offset<TAB>label`` rows, UTF-8."""
    with open(path, "w", encoding="utf-8") as fh:
        for clip_id in sorted(events_by_clip, key=str):
            for event in sorted(events_by_clip[clip_id]):
                fh.write(f"{clip_id}\t{event.onset:.6f}\t{event.offset:.6f}\t{event.label}\n")


def read_events_tsv(path, known_labels=None) -> dict:
    """Parse an annotation TSV into {filename: [Event, ...]}."""
    events: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            filename, onset_s, offset_s, label = parts
            try:
                onset, offset = float(onset_s), float(offset_s)
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: bad number ({exc})") from exc
            if offset <= onset:
                raise ManifestError(
                    f"{path}:{lineno}: offset {offset} must exceed onset {onset}")
            if known_labels is not None and label not in known_labels:
                raise ManifestError(f"{path}:{lineno}: unknown label {label!r}")
            events.setdefault(filename, []).append(Event(label=label, onset=onset, offset=offset))
    return events


def load_strong(path, known_labels=None) -> list[Event]:
    """All events of a single-clip annotation file, onset-ordered."""
    by_clip = read_events_tsv(path, known_labels)
    merged: list[Event] = []
    for events in by_clip.values():
        merged.extend(events)
    return sorted(merged)


def report_to_csv(path, report: ScoreReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "tp", "fp", "fn", "f1", "precision", "recall"])
        for label, s in report.per_class.items():
            writer.writerow([label, s.tp, s.fp, s.fn,
                             f"{s.f1:.6f}", f"{s.precision:.6f}", f"{s.recall:.6f}"])
        micro = report.micro
        writer.writerow(["micro", micro.tp, micro.fp, micro.fn,
                         f"{micro.f1:.6f}", f"{micro.precision:.6f}", f"{micro.recall:.6f}"])
        writer.writerow(["macro", "", "", "", f"{report.macro_f1:.6f}",
                         f"{report.macro_precision:.6f}", f"{report.macro_recall:.6f}"])


def format_report(report: ScoreReport, title: str = "") -> str:
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'class':<16}{'F1':>8}{'Precision':>11}{'Recall':>8}{'TP':>6}{'FP':>6}{'FN':>6}")
    for label, s in report.per_class.items():
        lines.append(f"{str(label):<16}{s.f1:>8.3f}{s.precision:>11.3f}{s.recall:>8.3f}"
                     f"{s.tp:>6}{s.fp:>6}{s.fn:>6}")
    micro = report.micro
    lines.append(f"{'micro':<16}{micro.f1:>8.3f}{micro.precision:>11.3f}{micro.recall:>8.3f}"
                 f"{micro.tp:>6}{micro.fp:>6}{micro.fn:>6}")
    lines.append(f"{'macro':<16}{report.macro_f1:>8.3f}{report.macro_precision:>11.3f}"
                 f"{report.macro_recall:>8.3f}")
    return "\n".join(lines)
