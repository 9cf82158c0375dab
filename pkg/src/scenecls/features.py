"""Log-mel spectrogram extraction and segmentation.

Two fixed feature variants are supported:

* V1: audio downsampled to 16 kHz, 25 ms window / 10 ms hop, 999 frames
  split into 9 segments of 111 frames.
* V2: audio kept at 44.1 kHz, 46 ms window / 23 ms hop, 431 frames split
  into 10 segments of 43 frames (the odd trailing frame is dropped).

Both use 64 mel bands and natural-log energies floored at 1e-10. The natural
framing arithmetic yields 998 (V1) / 433 (V2) frames; spectrograms are
padded by repeating the last frame or truncated so the advertised frame
counts hold exactly and segment shapes are stable downstream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio import AudioClip

LOG_FLOOR = 1e-10
N_MELS = 64


@dataclass(frozen=True)
class FeatureVariant:
    id: str
    sample_rate: int
    window_s: float
    hop_s: float
    total_frames: int
    segment_frames: int
    n_segments: int
    n_mels: int = N_MELS

    @property
    def window_length(self) -> int:
        return round(self.window_s * self.sample_rate)

    @property
    def hop_length(self) -> int:
        return round(self.hop_s * self.sample_rate)

    @property
    def n_fft(self) -> int:
        return 1 << (self.window_length - 1).bit_length()


V1 = FeatureVariant("v1", 16000, 0.025, 0.010, total_frames=999, segment_frames=111, n_segments=9)
V2 = FeatureVariant("v2", 44100, 0.046, 0.023, total_frames=431, segment_frames=43, n_segments=10)

VARIANTS = {"v1": V1, "v2": V2}
# Numeric ids used in the on-disk cache header.
_VARIANT_CODES = {"v1": 1, "v2": 2}
_CODE_VARIANTS = {c: VARIANTS[k] for k, c in _VARIANT_CODES.items()}


@dataclass(frozen=True)
class LogMelSpectrogram:
    """total_frames x n_mels matrix of log energies plus its variant tag."""

    data: np.ndarray
    variant: FeatureVariant

    def __post_init__(self):
        if self.data.shape != (self.variant.total_frames, self.variant.n_mels):
            raise ValueError(
                f"expected {self.variant.total_frames}x{self.variant.n_mels} "
                f"matrix, got {self.data.shape}"
            )


@dataclass(frozen=True)
class SegmentSet:
    """Contiguous non-overlapping segments of one clip, in temporal order."""

    segments: np.ndarray  # (n_segments, segment_frames, n_mels)
    variant: FeatureVariant
    clip_id: str = ""


def power_spectrogram(clip: AudioClip, window_s: float, hop_s: float) -> np.ndarray:
    """Squared-magnitude STFT with a periodic Hann window.

    Frames are left-aligned (no centering), length round(window_s * rate),
    hop round(hop_s * rate), zero-padded to the next power of two. Returns a
    frames x (n_fft/2 + 1) float64 matrix.
    """
    x = clip.mono()
    win = round(window_s * clip.sample_rate)
    hop = round(hop_s * clip.sample_rate)
    if len(x) < win:
        raise ValueError(f"clip of {len(x)} samples is shorter than one {win}-sample window")
    n_fft = 1 << (win - 1).bit_length()
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    spec = np.fft.rfft(frames * window, n=n_fft, axis=1)
    return np.abs(spec) ** 2


def mel_scale(freq_hz):
    """Hz to mel, 2595 * log10(1 + f/700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mels):
    return 700.0 * (10.0 ** (np.asarray(mels, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, n_fft_bins: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank, n_mels x n_fft_bins.

    Peaks sit at n_mels + 2 points equally spaced on the mel scale between
    0 Hz and Nyquist. Each row is scaled to sum to 1 over FFT bins (no
    bandwidth normalization). Cached: the matrix is immutable and shared.
    """
    if n_fft_bins < n_mels + 2:
        raise ValueError("need at least n_mels + 2 FFT bins")
    peak_hz = mel_to_hz(np.linspace(0.0, mel_scale(sample_rate / 2.0), n_mels + 2))
    # FFT bin k of an n-point transform sits at k * rate / n; here
    # n = 2 * (n_fft_bins - 1) because the spectrum is one-sided.
    bin_hz = np.arange(n_fft_bins) * sample_rate / (2.0 * (n_fft_bins - 1))

    lower, center, upper = peak_hz[:-2, None], peak_hz[1:-1, None], peak_hz[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    sums = fb.sum(axis=1, keepdims=True)
    fb /= np.where(sums > 0.0, sums, 1.0)
    fb.flags.writeable = False
    return fb


def log_mel(clip: AudioClip, variant: FeatureVariant) -> LogMelSpectrogram:
    """Log mel-spectrogram of a preprocessed (mono, variant-rate) clip.

    Power spectrogram frames are pooled through the mel filterbank and
    log-compressed with floor 1e-10, then the frame count is forced to
    variant.total_frames (truncate, or pad by repeating the last frame).
    """
    if clip.sample_rate != variant.sample_rate:
        raise ValueError(
            f"clip at {clip.sample_rate} Hz does not match variant "
            f"{variant.id} ({variant.sample_rate} Hz); resample first"
        )
    power = power_spectrogram(clip, variant.window_s, variant.hop_s)
    fb = mel_filterbank(variant.n_mels, power.shape[1], variant.sample_rate)
    mel_energy = power @ fb.T
    data = np.log(np.maximum(mel_energy, LOG_FLOOR))

    n = variant.total_frames
    if data.shape[0] > n:
        data = data[:n]
    elif data.shape[0] < n:
        pad = np.repeat(data[-1:], n - data.shape[0], axis=0)
        data = np.vstack([data, pad])
    return LogMelSpectrogram(data, variant)


def segment(spec: LogMelSpectrogram, clip_id: str = "") -> SegmentSet:
    """Split a spectrogram into its variant's non-overlapping segments.

    Frames beyond n_segments * segment_frames are discarded (one trailing
    frame for V2, none for V1).
    """
    v = spec.variant
    if spec.data.shape[0] != v.total_frames:
        raise ValueError(f"spectrogram has {spec.data.shape[0]} frames, expected {v.total_frames}")
    used = v.n_segments * v.segment_frames
    segs = spec.data[:used].reshape(v.n_segments, v.segment_frames, v.n_mels)
    return SegmentSet(segs, v, clip_id)


def extract_segments(clip: AudioClip, variant: FeatureVariant, clip_id: str = "") -> SegmentSet:
    """Full front end for one mono normalized clip: resample, log-mel, split."""
    from .audio import resample

    return segment(log_mel(resample(clip, variant.sample_rate), variant), clip_id)


_LMSF_MAGIC = b"LMSF"
_LMSF_VERSION = 1


def save_features(path, spec: LogMelSpectrogram) -> None:
    """Write a spectrogram cache file (32-bit float payload, little-endian)."""
    rows, cols = spec.data.shape
    header = _LMSF_MAGIC + struct.pack(
        "<BBII", _LMSF_VERSION, _VARIANT_CODES[spec.variant.id], rows, cols
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(spec.data, dtype="<f4").tobytes())


def load_features(path) -> LogMelSpectrogram:
    """Read a cache file back; values carry 32-bit precision."""
    with open(path, "rb") as fh:
        header = fh.read(14)
        if len(header) != 14 or header[:4] != _LMSF_MAGIC:
            raise ValueError(f"{path}: not a feature cache file")
        version, code, rows, cols = struct.unpack("<BBII", header[4:])
        if version != _LMSF_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        if code not in _CODE_VARIANTS:
            raise ValueError(f"{path}: unknown variant code {code}")
        payload = fh.read(rows * cols * 4)
    if len(payload) != rows * cols * 4:
        raise ValueError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return LogMelSpectrogram(data, _CODE_VARIANTS[code])
