"""Synthetic multi-device corpus: shared speech-like sources rendered through
per-device FIR coloration plus noise."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioClip, write_wav

SEPARATION_DB = 3.0
PEAK = 0.9
RESPONSE_POINTS = 1024


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    fir: np.ndarray
    noise_level: float
    gain: float
    id: int

    def __post_init__(self):
        if not np.any(self.fir):
            raise ValueError("FIR needs at least one nonzero tap")
        if self.noise_level < 0:
            raise ValueError("noise level must be >= 0")


@dataclass(frozen=True)
class SynthCorpusSpec:
    n_devices: int = 8
    clips_per_device: int = 60
    clip_duration_s: float = 2.0
    sample_rate: int = 16000
    seed: int = 0
    profile_seed: int | None = None  # defaults to ``seed``

    def validate(self) -> "SynthCorpusSpec":
        if self.n_devices < 2:
            raise ValueError(f"need at least 2 devices, got {self.n_devices}")
        if self.clips_per_device < 10:
            raise ValueError(f"need at least 10 clips per device, got {self.clips_per_device}")
        if self.sample_rate <= 0 or self.clip_duration_s <= 0:
            raise ValueError("sample rate and clip duration must be positive")
        return self

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def response_db(fir, points: int = RESPONSE_POINTS) -> np.ndarray:
    """Magnitude response in dB, normalised to 0 dB RMS over the band."""
    mag = np.abs(np.fft.rfft(np.asarray(fir, dtype=np.float64), n=points))
    mag = mag / np.sqrt(np.mean(mag * mag))
    return 20.0 * np.log10(np.maximum(mag, 1e-12))


def separation_db(fir_a, fir_b) -> float:
    """Largest in-band difference between two level-normalised responses."""
    return float(np.max(np.abs(response_db(fir_a) - response_db(fir_b))))


def _candidate(rng: np.random.Generator) -> np.ndarray:
    length = int(rng.integers(32, 129))
    decay = rng.uniform(2.0, 12.0)
    taps = rng.normal(size=length) * np.exp(-np.arange(length) / decay) * rng.uniform(0.2, 0.6)
    taps[0] += 1.0
    return taps / np.sqrt(np.sum(taps * taps))


def make_profiles(n: int, seed: int, max_tries: int = 1000) -> list[DeviceProfile]:
    """``n`` profiles, each at least 3 dB away from every earlier one somewhere
    in band (candidates violating that are redrawn)."""
    if n < 2:
        raise ValueError(f"need at least 2 device profiles, got {n}")
    rng = np.random.default_rng(seed)
    profiles: list[DeviceProfile] = []
    for k in range(n):
        for _ in range(max_tries):
            fir = _candidate(rng)
            if all(separation_db(fir, p.fir) >= SEPARATION_DB for p in profiles):
                break
        else:
            raise GenerationError(f"could not separate profile {k} by {SEPARATION_DB} dB in {max_tries} tries")
        profiles.append(DeviceProfile(fir, float(rng.uniform(0.005, 0.03)), float(rng.uniform(0.5, 1.5)), k))
    return profiles


def make_source(n_samples: int, sample_rate: int, seed: int) -> np.ndarray:
    """Harmonic-plus-noise signal with a jittered 80-300 Hz fundamental,
    5-12 harmonics and a syllabic amplitude envelope."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_samples) / sample_rate
    f0 = rng.uniform(80.0, 300.0)
    drift = np.cumsum(rng.normal(scale=1.0, size=n_samples)) / np.sqrt(sample_rate)
    vibrato = 0.02 * np.sin(2 * np.pi * rng.uniform(3.0, 7.0) * t + rng.uniform(0, 2 * np.pi))
    inst = f0 * (1.0 + vibrato + 0.01 * drift / (1.0 + np.abs(drift).max()))
    phase = 2 * np.pi * np.cumsum(inst) / sample_rate
    x = np.zeros(n_samples)
    for h in range(1, int(rng.integers(5, 13)) + 1):
        if h * f0 >= sample_rate / 2:
            break
        x += rng.uniform(0.3, 1.0) / h * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    x += rng.uniform(0.05, 0.2) * rng.normal(size=n_samples)
    rate = rng.uniform(2.0, 6.0)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    return x * env


def render(source: AudioClip, profile: DeviceProfile, seed: int) -> AudioClip:
    """Filter, scale, add noise at ``noise_level`` x signal RMS, peak-normalise to 0.9."""
    x = np.asarray(source.samples, dtype=np.float64)
    y = profile.gain * np.convolve(x, profile.fir)[: len(x)]
    if profile.noise_level > 0:
        rms = np.sqrt(np.mean(y * y))
        y = y + np.random.default_rng(seed).normal(scale=profile.noise_level * rms, size=len(y))
    peak = np.max(np.abs(y)) if len(y) else 0.0
    if peak > 0:
        y = y * (PEAK / peak)
    return AudioClip(y, source.sample_rate, profile.id, source.source_id)


@dataclass
class Corpus:
    spec: SynthCorpusSpec
    profiles: list
    clips: list = field(default_factory=list)
    rows: list = field(default_factory=list)  # clip_id, device_id, source_id, seed

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clips], dtype=np.int64)

    def manifest_csv(self, paths=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["clip_path", "device_id", "source_id", "seed"])
        for i, (clip_id, dev, src, seed) in enumerate(self.rows):
            w.writerow([paths[i] if paths else clip_id, dev, src, seed])
        return buf.getvalue()


def build_corpus(spec: SynthCorpusSpec) -> Corpus:
    """Every device renders the same pool of ``clips_per_device`` sources."""
    spec.validate()
    profiles = make_profiles(spec.n_devices, spec.seed if spec.profile_seed is None else spec.profile_seed)
    n = int(round(spec.clip_duration_s * spec.sample_rate))
    sources = []
    for s in range(spec.clips_per_device):
        src_seed = int(np.random.SeedSequence([spec.seed, 1, s]).generate_state(1)[0])
        sources.append(AudioClip(make_source(n, spec.sample_rate, src_seed), spec.sample_rate, None, f"src{s:03d}"))
    corpus = Corpus(spec, profiles)
    for p in profiles:
        for s, src in enumerate(sources):
            seed = int(np.random.SeedSequence([spec.seed, 2, p.id, s]).generate_state(1)[0])
            clip = render(src, p, seed)
            clip_id = f"dev{p.id:02d}_{src.source_id}"
            corpus.clips.append(AudioClip(clip.samples, clip.sample_rate, p.id, clip_id))
            corpus.rows.append((clip_id, p.id, src.source_id, seed))
    return corpus


def write_corpus(corpus: Corpus, out_dir, bits: int = 16) -> Path:
    """WAV per clip under ``out_dir/wav`` and ``manifest.csv`` with relative paths."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    paths = []
    for clip, (clip_id, *_rest) in zip(corpus.clips, corpus.rows):
        rel = f"wav/{clip_id}.wav"
        write_wav(out / rel, clip.samples, clip.sample_rate, bits)
        paths.append(rel)
    manifest = out / "manifest.csv"
    manifest.write_text(corpus.manifest_csv(paths), encoding="utf-8")
    return manifest
