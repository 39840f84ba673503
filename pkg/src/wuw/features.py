"""Lightweight parametric MFCC extraction.

Per frame: rectangular window, zero-padded FFT power spectrum, triangular
mel filterbank, log with a small floor, orthonormal DCT-II, keep the first
``n_mfcc`` coefficients, then overwrite coefficient 0 with the frame's raw
log energy. No pre-emphasis and no feature normalization happen here;
standardization is the classifier's concern.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .audio import CANONICAL_RATE_HZ, AudioClip
from .errors import DataError, FeatureFormatError

FEATURE_MAGIC = b"WUWF"
FEATURE_VERSION = 1

# Floor added before every log so zero-energy frames stay finite.
LOG_FLOOR = 1e-10

_MEL_SCALE = 1127.0
_MEL_BREAK_HZ = 700.0


def hz_to_mel(f):
    return _MEL_SCALE * np.log1p(np.asarray(f, dtype=np.float64) / _MEL_BREAK_HZ)


def mel_to_hz(m):
    return _MEL_BREAK_HZ * np.expm1(np.asarray(m, dtype=np.float64) / _MEL_SCALE)


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


@dataclass(frozen=True)
class FeatureConfig:
    """A parametric MFCC recipe; ``config_id`` tags its outputs."""

    config_id: int
    n_mfcc: int
    window_ms: int
    hop_ms: int
    n_filters: int = 40
    fft_len: int | None = None
    sample_rate_hz: int = CANONICAL_RATE_HZ

    def __post_init__(self):
        if not (1 <= self.n_mfcc <= self.n_filters):
            raise ValueError("need n_filters >= n_mfcc >= 1")
        if self.hop_ms > self.window_ms or self.hop_ms <= 0:
            raise ValueError("need 0 < hop_ms <= window_ms")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        if self.fft_len is None:
            object.__setattr__(self, "fft_len", _next_pow2(self.window_samples))
        if self.fft_len < self.window_samples or self.fft_len & (self.fft_len - 1):
            raise ValueError("fft_len must be a power of two >= window length")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.sample_rate_hz / 1000))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate_hz / 1000))


# On-device detection preset and server-side verification preset, plus the
# alternative resolutions kept for benchmarking.
DEVICE = FeatureConfig(config_id=1, n_mfcc=13, window_ms=100, hop_ms=50)
CLOUD = FeatureConfig(config_id=2, n_mfcc=40, window_ms=30, hop_ms=10)

PRESETS: dict[int, FeatureConfig] = {
    cfg.config_id: cfg
    for cfg in (
        DEVICE,
        CLOUD,
        FeatureConfig(config_id=3, n_mfcc=13, window_ms=100, hop_ms=20),
        FeatureConfig(config_id=4, n_mfcc=13, window_ms=30, hop_ms=10),
        FeatureConfig(config_id=5, n_mfcc=13, window_ms=20, hop_ms=10),
    )
}


def preset(config_id: int) -> FeatureConfig:
    try:
        return PRESETS[config_id]
    except KeyError:
        raise DataError(f"unknown feature config id {config_id}") from None


@dataclass(eq=False)
class FeatureMatrix:
    """frames x coeffs float32 grid, tagged with the producing config."""

    values: np.ndarray
    config_id: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DataError(f"feature matrix must be 2-D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("feature matrix contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_coeffs(self) -> int:
        return self.values.shape[1]


def frame_count(n_samples: int, window: int, hop: int) -> int:
    """Number of full analysis frames: floor((n - window) / hop) + 1."""
    if hop < 1:
        raise ValueError("hop must be >= 1")
    if n_samples < window:
        raise DataError(f"clip too short: {n_samples} samples < window {window}")
    return (n_samples - window) // hop + 1


def power_spectrum(frame: np.ndarray, fft_len: int) -> np.ndarray:
    """Magnitude-squared of the first fft_len/2 + 1 FFT bins (rectangular window)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 1 or frame.size > fft_len:
        raise ValueError("frame must be 1-D and no longer than fft_len")
    return np.square(np.abs(np.fft.rfft(frame, n=fft_len)))


@lru_cache(maxsize=None)
def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Triangular filters with peaks equally mel-spaced between 0 Hz and Nyquist.

    Peak positions are converted to FFT bins with floor(f / rate * fft_len);
    every row's maximum is exactly 1.0. The matrix is cached per config and
    safe to share read-only.
    """
    nyquist = config.sample_rate_hz / 2.0
    points_mel = np.linspace(0.0, float(hz_to_mel(nyquist)), config.n_filters + 2)
    points_hz = mel_to_hz(points_mel)
    bins = np.floor(points_hz / config.sample_rate_hz * config.fft_len).astype(int)

    fb = np.zeros((config.n_filters, config.fft_len // 2 + 1))
    for i in range(config.n_filters):
        left, mid, right = bins[i], bins[i + 1], bins[i + 2]
        if mid > left:
            fb[i, left:mid] = np.arange(mid - left) / (mid - left)
        if right > mid:
            fb[i, mid:right] = (right - np.arange(mid, right)) / (right - mid)
        else:
            fb[i, mid] = 1.0
    fb.flags.writeable = False
    return fb


def dct2_ortho(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Orthonormal DCT-II, the decorrelating transform used by mfcc()."""
    return dct(x, type=2, norm="ortho", axis=axis)


def mfcc(clip: AudioClip, config: FeatureConfig) -> FeatureMatrix:
    """Extract an MFCC matrix of shape (frame_count, n_mfcc)."""
    if clip.sample_rate_hz != config.sample_rate_hz:
        raise DataError(
            f"clip rate {clip.sample_rate_hz} != config rate {config.sample_rate_hz}"
        )
    window, hop = config.window_samples, config.hop_samples
    n_frames = frame_count(len(clip), window, hop)

    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, window)[::hop]
    frames = frames[:n_frames]

    spectra = np.square(np.abs(np.fft.rfft(frames, n=config.fft_len, axis=1)))
    energies = spectra @ mel_filterbank(config).T
    cepstra = dct2_ortho(np.log(energies + LOG_FLOOR), axis=1)[:, : config.n_mfcc]
    cepstra[:, 0] = np.log(np.sum(np.square(frames), axis=1) + LOG_FLOOR)
    return FeatureMatrix(cepstra.astype(np.float32), config.config_id)


# -- Binary dump format ----------------------------------------------------
# magic "WUWF", u8 version, u8 config_id, u16 n_frames, u16 n_coeffs,
# then n_frames * n_coeffs little-endian float32, row-major.

def encode_features(fm: FeatureMatrix) -> bytes:
    if fm.n_frames > 0xFFFF or fm.n_coeffs > 0xFFFF:
        raise DataError("feature matrix too large for the dump format")
    header = FEATURE_MAGIC + struct.pack(
        "<BBHH", FEATURE_VERSION, fm.config_id, fm.n_frames, fm.n_coeffs
    )
    return header + fm.values.astype("<f4").tobytes()


def decode_features(data: bytes) -> FeatureMatrix:
    if len(data) < 10:
        raise FeatureFormatError("feature dump truncated before header")
    if data[:4] != FEATURE_MAGIC:
        raise FeatureFormatError("bad feature dump magic")
    version, config_id, n_frames, n_coeffs = struct.unpack_from("<BBHH", data, 4)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"unsupported feature dump version {version}")
    expected = 10 + 4 * n_frames * n_coeffs
    if len(data) != expected:
        raise FeatureFormatError(
            f"feature dump length {len(data)} != expected {expected}"
        )
    values = np.frombuffer(data, dtype="<f4", offset=10).reshape(n_frames, n_coeffs)
    return FeatureMatrix(values.copy(), config_id)


def save_features(fm: FeatureMatrix, path) -> None:
    Path(path).write_bytes(encode_features(fm))


def load_features(path) -> FeatureMatrix:
    return decode_features(Path(path).read_bytes())
