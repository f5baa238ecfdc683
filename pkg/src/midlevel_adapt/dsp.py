"""Log-filtered spectrogram extraction.

Raw PCM is converted to a magnitude STFT, mapped through a bank of
triangular filters spaced logarithmically in frequency, and compressed
elementwise with log(x + floor).  The frame rule is pinned so that a
15 s clip at 22050 Hz with window 2048 / hop 704 yields exactly 469
frames: the signal is reflection-padded by half a window on both ends
and the frame count is floor(n_samples / hop).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

DEFAULT_SAMPLE_RATE = 22050

# 4-byte tags reinterpreted as little-endian float32 for the cache header.
_CACHE_MAGIC = float(np.frombuffer(b"MLSC", dtype="<f4")[0])
_CACHE_VERSION = 1.0


class AudioError(ValueError):
    """Unusable audio input (too short, non-finite, unsupported encoding)."""


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate: int = DEFAULT_SAMPLE_RATE
    window_size: int = 2048
    hop: int = 704
    bands: int = 149
    fmin: float = 30.0
    fmax: float = 11025.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.hop <= 0 or self.hop >= self.window_size:
            raise ValueError(f"hop must satisfy 0 < hop < window_size, got {self.hop}")
        if self.bands < 1:
            raise ValueError("bands must be >= 1")
        if not (0 < self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError(
                f"need 0 < fmin < fmax <= nyquist, got fmin={self.fmin}, "
                f"fmax={self.fmax}, nyquist={self.sample_rate / 2}")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def frame_count(self, n_samples: int) -> int:
        return n_samples // self.hop


@dataclass
class Spectrogram:
    data: np.ndarray              # (bands, frames) float32
    config: SpectrogramConfig

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]


def band_center_frequencies(config: SpectrogramConfig) -> np.ndarray:
    """Center frequency of each triangular filter (Hz)."""
    edges = np.geomspace(config.fmin, config.fmax, config.bands + 2)
    return edges[1:-1]


def log_filterbank(config: SpectrogramConfig, n_fft: int | None = None) -> np.ndarray:
    """Triangular filters on geometrically spaced edges, peak weight 1.

    Returns a (bands, n_fft//2 + 1) weight matrix.  A filter narrower than
    the FFT bin spacing would otherwise be empty; such rows fall back to
    weight 1 on the bin nearest their center frequency, so every band
    responds to some input.
    """
    n_fft = n_fft or config.window_size
    n_bins = n_fft // 2 + 1
    bin_freqs = np.arange(n_bins) * (config.sample_rate / n_fft)
    edges = np.geomspace(config.fmin, config.fmax, config.bands + 2)
    weights = np.zeros((config.bands, n_bins))
    for i in range(config.bands):
        lo, center, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        weights[i] = np.clip(np.minimum(rising, falling), 0.0, None)
        if not weights[i].any():
            weights[i, int(np.argmin(np.abs(bin_freqs - center)))] = 1.0
    return weights


def _stft_magnitude(pcm: np.ndarray, config: SpectrogramConfig) -> np.ndarray:
    """Magnitude STFT, shape (n_fft//2 + 1, floor(len(pcm) / hop))."""
    win = config.window_size
    n_frames = config.frame_count(len(pcm))
    padded = np.pad(pcm, win // 2, mode="reflect")
    frames = sliding_window_view(padded, win)[::config.hop][:n_frames]
    window = get_window("hann", win, fftbins=True)
    return np.abs(np.fft.rfft(frames * window, axis=1)).T


def compute_spectrogram(pcm: np.ndarray, config: SpectrogramConfig | None = None) -> Spectrogram:
    """PCM -> magnitude STFT -> log-spaced filterbank -> log(x + floor)."""
    config = config or SpectrogramConfig()
    pcm = np.asarray(pcm, dtype=np.float64)
    if pcm.ndim != 1:
        raise AudioError(f"expected mono PCM, got shape {pcm.shape}")
    if len(pcm) < config.window_size:
        raise AudioError(
            f"input of {len(pcm)} samples is shorter than one window "
            f"({config.window_size} samples)")
    if not np.all(np.isfinite(pcm)):
        raise AudioError("PCM contains non-finite samples")
    magnitude = _stft_magnitude(pcm, config)
    filtered = log_filterbank(config) @ magnitude
    data = np.log(filtered + config.log_floor).astype(np.float32)
    return Spectrogram(data=data, config=config)


def resample(pcm: np.ndarray, from_rate: int, to_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Band-limited rational resampling; output length round(n * to / from)."""
    if from_rate <= 0 or to_rate <= 0:
        raise AudioError("sample rates must be positive")
    pcm = np.asarray(pcm, dtype=np.float64)
    if from_rate == to_rate:
        return pcm.copy()
    g = math.gcd(to_rate, from_rate)
    up, down = to_rate // g, from_rate // g
    out = resample_poly(pcm, up, down)
    target_len = int(math.floor(len(pcm) * to_rate / from_rate + 0.5))
    return out[:target_len]


def read_wav(path: str | Path, target_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Read a PCM WAV as mono float64 in [-1, 1]; channels are averaged.

    Supports 16/24/32-bit integer and 32/64-bit float encodings.  If
    ``target_rate`` is given, the audio is resampled to it.
    """
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        pcm = data / 32768.0
    elif data.dtype == np.int32:
        pcm = data / 2147483648.0
    elif data.dtype == np.uint8:
        pcm = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        pcm = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported WAV sample format {data.dtype}")
    if pcm.ndim == 2:
        pcm = pcm.mean(axis=1)
    if target_rate is not None and rate != target_rate:
        pcm = resample(pcm, rate, target_rate)
        rate = target_rate
    return pcm, rate


def save_spectrogram_cache(spec: Spectrogram, path: str | Path) -> None:
    """Write one spectrogram as an 8-float32 header plus flat row-major data."""
    cfg = spec.config
    header = np.array([_CACHE_MAGIC, _CACHE_VERSION, spec.bands, spec.frames,
                       cfg.sample_rate, cfg.window_size, cfg.hop, cfg.log_floor],
                      dtype="<f4")
    with Path(path).open("wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(spec.data, dtype="<f4").tobytes())


def load_spectrogram_cache(path: str | Path,
                           fmin: float = 30.0, fmax: float = 11025.0) -> Spectrogram:
    """Read a cached spectrogram; fmin/fmax are not stored and must be supplied."""
    raw = Path(path).read_bytes()
    header = np.frombuffer(raw[:32], dtype="<f4")
    if len(header) != 8 or header[0] != np.float32(_CACHE_MAGIC):
        raise AudioError(f"{path}: not a spectrogram cache file")
    if header[1] != np.float32(_CACHE_VERSION):
        raise AudioError(f"{path}: unsupported cache version {header[1]}")
    bands, frames = int(header[2]), int(header[3])
    config = SpectrogramConfig(sample_rate=int(header[4]), window_size=int(header[5]),
                               hop=int(header[6]), bands=bands,
                               fmin=fmin, fmax=fmax, log_floor=float(header[7]))
    data = np.frombuffer(raw[32:], dtype="<f4").reshape(bands, frames).copy()
    return Spectrogram(data=data, config=config)


def slice_windows(pcm: np.ndarray, sample_rate: int, window_s: int = 15) -> list[np.ndarray]:
    """Consecutive complete windows of ``window_s`` seconds; partials dropped."""
    win = window_s * sample_rate
    if len(pcm) < win:
        raise AudioError(f"audio of {len(pcm)} samples is shorter than one "
                         f"{window_s}s window")
    n = len(pcm) // win
    return [pcm[i * win:(i + 1) * win] for i in range(n)]
