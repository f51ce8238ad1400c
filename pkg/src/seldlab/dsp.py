"""FOA audio to model features: per-channel log-mel plus mel-banded intensity vectors."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

SAMPLE_RATE = 24000
WIN_LENGTH = 960
HOP_LENGTH = 480
N_FFT = 1024
N_BINS = N_FFT // 2 + 1
N_MELS = 64
LOG_FLOOR = 1e-10
INTENSITY_EPS = 1e-10
N_FEATURE_CHANNELS = 7

# ACN channel indices
W, Y, Z, X = 0, 1, 2, 3


class AudioError(ValueError):
    pass


@dataclass
class FoaClip:
    """Four-channel first-order ambisonics audio, ACN order (W, Y, Z, X), SN3D."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] != 4:
            raise AudioError(f"FOA clip needs 4 x L samples, got {self.samples.shape}")
        if self.samples.shape[1] == 0:
            raise AudioError("FOA clip is empty")
        if not np.isfinite(self.samples).all():
            raise AudioError("FOA clip contains non-finite samples")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(f"expected {SAMPLE_RATE} Hz audio, got {self.sample_rate} Hz")

    @property
    def length(self) -> int:
        return self.samples.shape[1]


def n_frames(length: int) -> int:
    return (length - WIN_LENGTH) // HOP_LENGTH + 1


def hann_window(n: int = WIN_LENGTH) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft(clip: FoaClip) -> np.ndarray:
    """Complex spectra of shape ``4 x T x 513``; frames start at sample 0, no centering."""
    if clip.length < WIN_LENGTH:
        raise AudioError(f"clip of {clip.length} samples is shorter than one {WIN_LENGTH}-sample window")
    frames = sliding_window_view(clip.samples, WIN_LENGTH, axis=-1)[:, ::HOP_LENGTH]
    return np.fft.rfft(frames * hann_window(), n=N_FFT, axis=-1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, sr: int = SAMPLE_RATE, n_fft: int = N_FFT,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """HTK-scale triangular filters, each normalized to unit sum. Shape ``n_mels x (n_fft/2+1)``."""
    fmax = sr / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    for i in np.flatnonzero(fb.sum(axis=1) == 0):
        # filter narrower than one bin: take the bin nearest its centre
        fb[i, np.argmin(np.abs(freqs - edges[i + 1]))] = 1.0
    return fb / fb.sum(axis=1, keepdims=True)


def logmel(spectra: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """``log(fb . |S|^2 + floor)`` per channel, shape ``C x T x n_mels``."""
    power = np.abs(spectra) ** 2
    return np.log(power @ fb.T + LOG_FLOOR)


def foa_intensity(spectra: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Mel-banded active intensity direction, shape ``3 x T x n_mels`` ordered (x, y, z).

    Per bin the intensity is Re{conj(W) * [X, Y, Z]}; it is summed into mel
    bands and then scaled to unit length (``norm + eps``).
    """
    w = np.conj(spectra[W])
    dipoles = spectra[[X, Y, Z]]
    raw = np.real(w[None] * dipoles)
    banded = raw @ fb.T
    norm = np.sqrt((banded ** 2).sum(axis=0, keepdims=True))
    return banded / (norm + INTENSITY_EPS)


@dataclass
class FeatureStats:
    """Per-channel standardization applied to the 7-channel features."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls) -> "FeatureStats":
        return cls(np.zeros(N_FEATURE_CHANNELS), np.ones(N_FEATURE_CHANNELS))

    @classmethod
    def fit(cls, features) -> "FeatureStats":
        """Zero mean and unit variance per channel over all frames and bands of ``features``."""
        feats = list(features)
        if not feats:
            raise ValueError("cannot fit feature statistics on an empty set")
        stacked = np.concatenate([f.reshape(N_FEATURE_CHANNELS, -1) for f in feats], axis=1)
        mean = stacked.mean(axis=1)
        std = np.maximum(stacked.std(axis=1), 1e-8)
        return cls(mean, std)

    def apply(self, feat: np.ndarray) -> np.ndarray:
        return (feat - self.mean[:, None, None]) / self.std[:, None, None]


_FB_CACHE: dict = {}


def default_filterbank() -> np.ndarray:
    if "fb" not in _FB_CACHE:
        _FB_CACHE["fb"] = mel_filterbank()
    return _FB_CACHE["fb"]


def extract_features(clip: FoaClip, stats: FeatureStats | None = None) -> np.ndarray:
    """7 x T x 64 model input: log-mel of (W, Y, Z, X) then intensity (x, y, z)."""
    spec = stft(clip)
    fb = default_filterbank()
    feat = np.concatenate([logmel(spec, fb), foa_intensity(spec, fb)], axis=0)
    return feat if stats is None else stats.apply(feat)


def read_wav(path: str | os.PathLike) -> FoaClip:
    sr, data = wavfile.read(path)
    if data.ndim != 2 or data.shape[1] != 4:
        raise AudioError(f"{path}: expected 4-channel audio, got shape {data.shape}")
    if data.dtype != np.float32:
        raise AudioError(f"{path}: expected 32-bit float samples, got {data.dtype}")
    return FoaClip(data.T.astype(np.float64), sample_rate=sr)


def write_wav(path: str | os.PathLike, clip: FoaClip) -> None:
    wavfile.write(path, clip.sample_rate, clip.samples.T.astype(np.float32))
