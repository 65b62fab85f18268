"""Tandem feature extraction.

Each clip becomes a fixed number of frames, and each frame a 73-dim vector:
12 MFCCs, log energy, 13 first-order and 13 second-order regression deltas of
[MFCC | logE], and 34 log Mel filterbank energies.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .audio import AudioClip

LOG_FLOOR = 1e-10
DELTA_N = 2
LAYOUT = (("mfcc", 12), ("logE", 1), ("delta", 13), ("delta_delta", 13), ("pre_fbank", 34))


class FeatureConfigError(ValueError):
    pass


class TooShortError(ValueError):
    """Signal shorter than one analysis frame."""


@dataclass(frozen=True)
class FrameSpec:
    frame_len: int = 1024
    fft_size: int = 1024
    window: str = "hamming"
    n_mel: int = 34
    n_mfcc: int = 12
    pre_emphasis_alpha: float = 0.97
    target_frames: int = 128

    def validate(self) -> "FrameSpec":
        if self.frame_len < 1 or self.target_frames < 1:
            raise FeatureConfigError("frame_len and target_frames must be positive")
        if self.fft_size < self.frame_len or self.fft_size & (self.fft_size - 1):
            raise FeatureConfigError(f"fft_size {self.fft_size} must be a power of two >= frame_len {self.frame_len}")
        if not 0 <= self.pre_emphasis_alpha < 1:
            raise FeatureConfigError("pre_emphasis_alpha must lie in [0, 1)")
        if self.window not in WINDOWS:
            raise FeatureConfigError(f"unknown window {self.window!r}; choose from {sorted(WINDOWS)}")
        if not 1 <= self.n_mfcc < self.n_mel:
            raise FeatureConfigError("need 1 <= n_mfcc < n_mel")
        return self

    @property
    def n_dims(self) -> int:
        return 3 * (self.n_mfcc + 1) + self.n_mel

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "FrameSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise FeatureConfigError(f"unknown feature config keys: {sorted(unknown)}")
        return cls(**d).validate()


WINDOWS = {
    "hamming": np.hamming,
    "hann": np.hanning,
    "rectangular": np.ones,
}


@dataclass
class TandemFeature:
    matrix: np.ndarray
    label: int | None = None
    layout: tuple = field(default=LAYOUT)

    def block(self, name: str) -> np.ndarray:
        start = 0
        for key, width in self.layout:
            if key == name:
                return self.matrix[:, start:start + width]
            start += width
        raise KeyError(name)


def pre_emphasis(x, alpha: float = 0.97) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= alpha < 1:
        raise FeatureConfigError("pre-emphasis alpha must lie in [0, 1)")
    y = x.copy()
    y[1:] -= alpha * x[:-1]
    return y


def frame_hop(length: int, spec: FrameSpec) -> int:
    if length < spec.frame_len:
        raise TooShortError(f"signal of {length} samples is shorter than one {spec.frame_len}-sample frame")
    if spec.target_frames == 1:
        return 0
    return (length - spec.frame_len) // (spec.target_frames - 1)


def frame_and_window(y, spec: FrameSpec) -> np.ndarray:
    """``target_frames`` windowed frames starting at multiples of the per-clip hop."""
    y = np.asarray(y, dtype=np.float64)
    hop = frame_hop(len(y), spec)
    starts = np.arange(spec.target_frames) * hop
    frames = y[starts[:, None] + np.arange(spec.frame_len)[None, :]]
    return frames * WINDOWS[spec.window](spec.frame_len)[None, :]


def power_spectrum(frame, fft_size: int) -> np.ndarray:
    """|DFT|^2 for bins 0..fft_size/2 (zero-padded, unscaled); frames may be stacked."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] > fft_size:
        raise FeatureConfigError(f"frame of {frame.shape[-1]} samples exceeds fft_size {fft_size}")
    spec = np.fft.rfft(frame, n=fft_size, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def log_energy(frame) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    return np.log(np.maximum(np.sum(frame * frame, axis=-1), LOG_FLOOR))


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=32)
def _filterbank(n_mel: int, fft_size: int, sample_rate: int) -> np.ndarray:
    edges_mel = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mel + 2)
    bins = np.floor((fft_size + 1) * mel_to_hz(edges_mel) / sample_rate).astype(int)
    n_bins = fft_size // 2 + 1
    bins = np.minimum(bins, n_bins - 1)
    fb = np.zeros((n_mel, n_bins))
    for j in range(n_mel):
        lo, mid, hi = bins[j], bins[j + 1], bins[j + 2]
        if not lo < mid < hi:
            raise FeatureConfigError(
                f"{n_mel} Mel filters are too many for a {fft_size}-point FFT at {sample_rate} Hz "
                f"(filter {j} has edges {lo}, {mid}, {hi})")
        k = np.arange(lo, mid)
        fb[j, k] = (k - lo) / (mid - lo)
        k = np.arange(mid, hi)
        fb[j, k] = (hi - k) / (hi - mid)
    fb.setflags(write=False)
    return fb


def mel_filterbank_matrix(spec: FrameSpec, sample_rate: int) -> np.ndarray:
    """(n_mel, fft_size/2+1) triangular weights, uniform on the Mel scale over
    0..sample_rate/2, each peaking at 1 on its centre bin."""
    return _filterbank(spec.n_mel, spec.fft_size, int(sample_rate))


def mel_filterbank(power, spec: FrameSpec, sample_rate: int) -> np.ndarray:
    power = np.asarray(power, dtype=np.float64)
    fb = mel_filterbank_matrix(spec, sample_rate)
    if power.shape[-1] != fb.shape[1]:
        raise FeatureConfigError(f"spectrum has {power.shape[-1]} bins, expected {fb.shape[1]}")
    return power @ fb.T


@lru_cache(maxsize=8)
def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * i + 1) / (2 * n))
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def mfcc_dct(log_fbank, n_mfcc: int = 12) -> np.ndarray:
    """Orthonormal DCT-II, keeping coefficients 1..n_mfcc."""
    x = np.asarray(log_fbank, dtype=np.float64)
    return x @ _dct_matrix(x.shape[-1])[1:n_mfcc + 1].T


def delta(seq, order: int = 1, n: int = DELTA_N) -> np.ndarray:
    """Regression delta over time (axis 0) with edge frames replicated."""
    if order not in (1, 2):
        raise ValueError("delta order must be 1 or 2")
    out = np.asarray(seq, dtype=np.float64)
    if out.ndim != 2 or out.shape[0] < 1:
        raise ValueError(f"delta needs a (frames, dims) matrix with frames >= 1, got {out.shape}")
    denom = 2.0 * sum(k * k for k in range(1, n + 1))
    frames = out.shape[0]
    for _ in range(order):
        padded = np.pad(out, ((n, n), (0, 0)), mode="edge")
        acc = np.zeros_like(out)
        for k in range(1, n + 1):
            acc += k * (padded[n + k:n + k + frames] - padded[n - k:n - k + frames])
        out = acc / denom
    return out


def extract_matrix(samples, sample_rate: int, spec: FrameSpec = FrameSpec()) -> np.ndarray:
    """(target_frames, 73) float32 tandem feature for a mono signal."""
    frames = frame_and_window(pre_emphasis(samples, spec.pre_emphasis_alpha), spec)
    power = power_spectrum(frames, spec.fft_size)
    log_mel = np.log(np.maximum(mel_filterbank(power, spec, sample_rate), LOG_FLOOR))
    base = np.concatenate([mfcc_dct(log_mel, spec.n_mfcc), log_energy(frames)[:, None]], axis=1)
    out = np.concatenate([base, delta(base, 1), delta(base, 2), log_mel], axis=1)
    return out.astype(np.float32)


def extract_tandem(clip: AudioClip, spec: FrameSpec = FrameSpec()) -> TandemFeature:
    spec.validate()
    return TandemFeature(extract_matrix(clip.samples, clip.sample_rate, spec), clip.label)
