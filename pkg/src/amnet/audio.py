"""Waveform loading and 64-band log-mel spectrogram extraction.

The recipe: power spectra from a 2048-point FFT taken every 20 ms over
40 ms Hann windows with centered (reflect-padded) framing, folded through
64 triangular mel filters and log-compressed with a 1e-10 floor.

All functions here are pure; featurizing the same clip twice is
bit-identical, so results may be cached (see save_features/load_features).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AudioFormatError, SampleRateError
from .tensor import Tensor

DEFAULT_SAMPLE_RATE = 44100
HOP_SECONDS = 0.020
WINDOW_SECONDS = 0.040
N_FFT = 2048
N_MELS = 64
LOG_FLOOR = 1e-10

_CACHE_MAGIC = b"LMS1"


@dataclass(frozen=True)
class Clip:
    """A mono waveform with identity and sample rate."""

    id: str
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioFormatError(f"clip {self.id!r} must hold a non-empty mono signal")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-power mel features, one row per 20 ms hop."""

    frames: Tensor  # (t, 64)
    hop_seconds: float = HOP_SECONDS
    window_seconds: float = WINDOW_SECONDS

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------- #
# WAV I/O (RIFF, PCM16 or float32, mono/stereo)
# ---------------------------------------------------------------------- #


def load_wav(path) -> Clip:
    """Read a RIFF WAV file into a normalized mono clip.

    PCM 16-bit and IEEE float32 encodings with one or two channels are
    supported; stereo is mixed down by averaging.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (chunk_size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise AudioFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise AudioFormatError(
                    f"{path}: truncated data chunk ({len(body)} of {chunk_size} bytes)")
            data = body
        pos += 8 + chunk_size + (chunk_size & 1)

    if fmt is None or data is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels not in (1, 2):
        raise AudioFormatError(f"{path}: unsupported channel count {channels}")

    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise AudioFormatError(
            f"{path}: unsupported encoding (format tag {audio_format}, {bits}-bit); "
            "expected PCM16 or float32")

    if channels == 2:
        if samples.size % 2 != 0:
            raise AudioFormatError(f"{path}: stereo data chunk has an odd sample count")
        samples = samples.reshape(-1, 2).mean(axis=1)
    if samples.size == 0:
        raise AudioFormatError(f"{path}: empty data chunk")

    peak = np.abs(samples).max()
    if peak > 1.0:
        samples = samples / peak
    return Clip(id=path.stem, samples=samples, sample_rate=sample_rate)


def save_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono float samples in [-1, 1] as PCM16."""
    path = Path(path)
    quantized = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    data = quantized.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(data), b"WAVE",
        b"fmt ", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16,
        b"data", len(data))
    path.write_bytes(header + data)


def wav_duration(path) -> float:
    """Clip duration in seconds."""
    return load_wav(path).duration


# ---------------------------------------------------------------------- #
# STFT and mel filterbank
# ---------------------------------------------------------------------- #


def _hann(length: int) -> np.ndarray:
    # periodic Hann
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(length) / length))


def frame_count(n_samples: int, sample_rate: int) -> int:
    hop = int(round(HOP_SECONDS * sample_rate))
    return int(round(n_samples / hop))


def stft_power(clip: Clip) -> Tensor:
    """Magnitude-squared spectra, (round(s / hop), 1025).

    Frames are centered on multiples of the hop; the signal is
    reflect-padded by half a window at both ends and each 40 ms window is
    zero-padded to 2048 points.
    """
    sr = clip.sample_rate
    hop = int(round(HOP_SECONDS * sr))
    win = int(round(WINDOW_SECONDS * sr))
    if clip.samples.size < hop:
        raise AudioFormatError(
            f"clip {clip.id!r} is shorter than one hop ({clip.samples.size} < {hop} samples)")
    if win > N_FFT:
        raise AudioFormatError(f"window of {win} samples exceeds the {N_FFT}-point transform")
    t = frame_count(clip.samples.size, sr)

    pad = win // 2
    padded = np.pad(clip.samples, pad, mode="reflect")
    starts = np.arange(t) * hop
    idx = starts[:, None] + np.arange(win)[None, :]
    frames = padded[idx] * _hann(win)[None, :]
    spec = np.fft.rfft(frames, n=N_FFT, axis=1)
    power = (spec.real ** 2 + spec.imag ** 2)
    return Tensor(power)


def mel_filterbank(sr: int, n_fft: int = N_FFT, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular filters (n_mels, n_fft // 2 + 1), each row summing to 1.

    Centers are equally spaced on the 2595 * log10(1 + f / 700) scale from
    0 Hz to sr / 2.
    """
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    n_bins = n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * sr / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2.0), n_mels + 2))
    bank = np.zeros((n_mels, n_bins))
    for k in range(n_mels):
        lo, center, hi = edges[k], edges[k + 1], edges[k + 2]
        up = (bin_hz - lo) / (center - lo)
        down = (hi - bin_hz) / (hi - center)
        bank[k] = np.clip(np.minimum(up, down), 0.0, None)
        total = bank[k].sum()
        if total <= 0:
            raise AudioFormatError(
                f"mel filter {k} covers no FFT bin; sample rate {sr} too low for {n_mels} bands")
        bank[k] /= total
    return bank


def mel_apply(power: Tensor, sr: int) -> Tensor:
    """Fold (t, 1025) power spectra into (t, 64) mel energies."""
    bank = mel_filterbank(sr)
    return Tensor(power.data @ bank.T)


def log_compress(mel: Tensor) -> MelSpectrogram:
    """log(max(x, 1e-10)) elementwise."""
    return MelSpectrogram(frames=Tensor(np.log(np.maximum(mel.data, LOG_FLOOR))))


def featurize(clip: Clip, expected_rate: int | None = DEFAULT_SAMPLE_RATE) -> MelSpectrogram:
    """Full front end: waveform to (t, 64) log-mel features.

    Clips at a different sample rate are rejected rather than resampled.
    """
    if expected_rate is not None and clip.sample_rate != expected_rate:
        raise SampleRateError(
            f"clip {clip.id!r} has sample rate {clip.sample_rate}, expected {expected_rate}")
    return log_compress(mel_apply(stft_power(clip), clip.sample_rate))


# ---------------------------------------------------------------------- #
# feature cache
# ---------------------------------------------------------------------- #


def save_features(path, mel: MelSpectrogram) -> None:
    """One file per clip: magic 'LMS1', t, f, then float32 rows."""
    path = Path(path)
    t, f = mel.frames.shape
    payload = mel.frames.data.astype("<f4").tobytes()
    path.write_bytes(_CACHE_MAGIC + struct.pack("<II", t, f) + payload)


def load_features(path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != _CACHE_MAGIC:
        raise AudioFormatError(f"{path}: not a feature cache file")
    t, f = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * t * f
    if len(raw) < expected:
        raise AudioFormatError(f"{path}: truncated feature cache ({len(raw)} < {expected} bytes)")
    frames = np.frombuffer(raw[12:expected], dtype="<f4").reshape(t, f)
    return MelSpectrogram(frames=Tensor(frames.astype(np.float64)))
