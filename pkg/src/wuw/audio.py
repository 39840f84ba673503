"""Audio ingestion, fixed-window extraction, and noise/reverb augmentation.

All operations are pure functions of their inputs plus an explicit
``numpy.random.Generator``, so they are safe to call from many threads.
Samples are float64 in nominal range [-1, 1]; the canonical rate is 16 kHz.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .errors import DataError, WavChannelError, WavEncodingError, WavFormatError

CANONICAL_RATE_HZ = 16000

# Detection/training analysis window, in seconds.
WINDOW_S = 1.5

# Mixing SNR range used for augmentation, in dB.
SNR_RANGE_DB = (-10.0, 50.0)

_WAV_FMT_PCM = 1
_WAV_FMT_FLOAT = 3


@dataclass(eq=False)
class AudioClip:
    """Mono sample buffer plus its sample rate. Treat as immutable."""

    samples: np.ndarray
    sample_rate_hz: int = CANONICAL_RATE_HZ

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"clip must be mono 1-D, got shape {self.samples.shape}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise DataError("clip contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class AlignmentSpan:
    """Keyword interval inside a clip, in seconds."""

    start_s: float
    end_s: float

    def __post_init__(self):
        if self.start_s < 0 or self.end_s <= self.start_s:
            raise DataError(f"invalid span [{self.start_s}, {self.end_s}]")


def read_wav(path) -> AudioClip:
    """Read a mono RIFF/WAVE file (PCM16 or IEEE float32).

    PCM16 samples are scaled by 1/32768 into [-1, 1). Any sample rate is
    accepted here; downstream feature extraction enforces its own rate.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: truncated '{chunk_id!r}' chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None or payload is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")

    format_code, channels, rate, _byte_rate, _block_align, bits = fmt
    if channels != 1:
        raise WavChannelError(f"{path}: expected mono, got {channels} channels")

    if format_code == _WAV_FMT_PCM and bits == 16:
        if len(payload) % 2:
            raise WavFormatError(f"{path}: PCM16 data chunk has odd byte length")
        samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    elif format_code == _WAV_FMT_FLOAT and bits == 32:
        if len(payload) % 4:
            raise WavFormatError(f"{path}: float32 data chunk length not a multiple of 4")
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise WavEncodingError(
            f"{path}: unsupported encoding (format {format_code}, {bits} bits)"
        )
    return AudioClip(samples, rate)


def write_wav(clip: AudioClip, path, encoding: str = "float32") -> None:
    """Write a mono WAV file, as PCM16 or IEEE float32."""
    if encoding == "pcm16":
        format_code, bits = _WAV_FMT_PCM, 16
        scaled = np.clip(np.round(clip.samples * 32768.0), -32768, 32767)
        payload = scaled.astype("<i2").tobytes()
    elif encoding == "float32":
        format_code, bits = _WAV_FMT_FLOAT, 32
        payload = clip.samples.astype("<f4").tobytes()
    else:
        raise ValueError(f"unknown encoding {encoding!r}")

    block_align = bits // 8
    fmt = struct.pack(
        "<HHIIHH",
        format_code,
        1,
        clip.sample_rate_hz,
        clip.sample_rate_hz * block_align,
        block_align,
        bits,
    )
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def peak_normalize(clip: AudioClip) -> AudioClip:
    """Scale so the largest absolute sample is 1.0; silence passes through."""
    if len(clip) == 0:
        return clip
    peak = float(np.max(np.abs(clip.samples)))
    if peak == 0.0:
        return clip
    return AudioClip(clip.samples / peak, clip.sample_rate_hz)


def measure_power(clip: AudioClip) -> float:
    """Mean-square power of the clip."""
    if len(clip) == 0:
        raise DataError("cannot measure power of an empty clip")
    return float(np.mean(np.square(clip.samples)))


def extract_window(
    clip: AudioClip,
    duration_s: float,
    span: AlignmentSpan | None = None,
    rng: np.random.Generator | None = None,
) -> AudioClip:
    """Cut a fixed-length window out of a clip.

    With a span, the window is placed uniformly at random among positions
    that fully contain the span; a span longer than the window centers the
    window on the span midpoint. Without a span, placement is uniform.
    Clips shorter than the window are zero-padded symmetrically.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    if len(clip) == 0:
        raise DataError("cannot extract a window from an empty clip")

    rate = clip.sample_rate_hz
    target = int(round(duration_s * rate))
    n = len(clip)

    s0 = s1 = None
    if span is not None:
        s0 = int(round(span.start_s * rate))
        s1 = int(round(span.end_s * rate))
        if s0 < 0 or s1 > n or s1 <= s0:
            raise DataError(f"span [{span.start_s}, {span.end_s}] s outside clip")
        if s1 - s0 > target:
            # Keyword longer than the window: center on the span midpoint.
            start = (s0 + s1 - target) // 2
            start = min(max(start, 0), n - target)
            return AudioClip(clip.samples[start : start + target], rate)

    if n == target:
        return clip
    if n < target:
        pad = target - n
        left = pad // 2
        out = np.zeros(target, dtype=np.float64)
        out[left : left + n] = clip.samples
        return AudioClip(out, rate)

    if span is not None:
        lo = max(0, s1 - target)
        hi = min(s0, n - target)
    else:
        lo, hi = 0, n - target
    if hi > lo:
        if rng is None:
            rng = np.random.default_rng()
        start = int(rng.integers(lo, hi + 1))
    else:
        start = lo
    return AudioClip(clip.samples[start : start + target], rate)


def mix_at_snr(signal: AudioClip, noise: AudioClip, snr_db: float) -> AudioClip:
    """Add noise to the signal at an exact signal-to-noise ratio.

    The noise is tiled (wrapped) or cropped to the signal length first, so
    the realized SNR of the two addends equals ``snr_db``.
    """
    if signal.sample_rate_hz != noise.sample_rate_hz:
        raise DataError("signal and noise sample rates differ")
    if len(signal) == 0 or len(noise) == 0:
        raise DataError("signal and noise must be non-empty")

    reps = -(-len(signal) // len(noise))
    tiled = np.tile(noise.samples, reps)[: len(signal)]

    p_signal = float(np.mean(np.square(signal.samples)))
    p_noise = float(np.mean(np.square(tiled)))
    if p_signal == 0.0 or p_noise == 0.0:
        raise DataError("SNR undefined for zero-power signal or noise")

    gain = np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    return AudioClip(signal.samples + gain * tiled, signal.sample_rate_hz)


def convolve_rir(clip: AudioClip, rir: AudioClip) -> AudioClip:
    """Convolve with a room impulse response, keep the original length, renormalize."""
    if clip.sample_rate_hz != rir.sample_rate_hz:
        raise DataError("clip and RIR sample rates differ")
    if len(clip) == 0 or len(rir) == 0:
        raise DataError("clip and RIR must be non-empty")
    wet = fftconvolve(clip.samples, rir.samples)[: len(clip)]
    return peak_normalize(AudioClip(wet, clip.sample_rate_hz))


def draw_snr(rng: np.random.Generator) -> float:
    """Draw a mixing SNR uniformly from the augmentation range."""
    return float(rng.uniform(*SNR_RANGE_DB))
