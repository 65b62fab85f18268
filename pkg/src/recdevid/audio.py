"""WAV loading, validation, normalisation and fixed-length segmentation."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

FORMAT_PCM = 0x0001
FORMAT_FLOAT = 0x0003
FORMAT_EXTENSIBLE = 0xFFFE
MIN_SEGMENT = 1024  # one analysis frame


class AudioError(ValueError):
    pass


class WavFormatError(AudioError):
    """Malformed or truncated RIFF/WAVE container."""


class UnsupportedCodecError(AudioError):
    """Valid container holding a codec other than PCM / IEEE float."""


class EmptyAudioError(AudioError):
    """The data chunk holds no samples."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: int | None = None
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        yield cid, body, len(body) == size
        pos += 8 + size + (size & 1)


def parse_wav(data: bytes, source_id: str = "") -> AudioClip:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{source_id or 'input'}: not a RIFF/WAVE file")
    fmt = None
    pcm = None
    for cid, body, complete in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{source_id}: fmt chunk too short ({len(body)} bytes)")
            fmt = body
        elif cid == b"data":
            if fmt is None:
                raise WavFormatError(f"{source_id}: data chunk before fmt chunk")
            pcm = body
            if not complete:
                raise WavFormatError(f"{source_id}: data chunk truncated")
            break
    if fmt is None:
        raise WavFormatError(f"{source_id}: missing fmt chunk")
    if pcm is None:
        raise WavFormatError(f"{source_id}: missing data chunk")
    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == FORMAT_EXTENSIBLE:
        if len(fmt) < 40:
            raise WavFormatError(f"{source_id}: extensible fmt chunk too short")
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if tag not in (FORMAT_PCM, FORMAT_FLOAT):
        raise UnsupportedCodecError(f"{source_id}: unsupported codec tag 0x{tag:04x}")
    if channels not in (1, 2):
        raise UnsupportedCodecError(f"{source_id}: {channels} channels (only mono/stereo supported)")
    if rate == 0:
        raise WavFormatError(f"{source_id}: zero sample rate")
    width = bits // 8
    if bits % 8 or block_align != width * channels:
        raise WavFormatError(f"{source_id}: inconsistent block alignment {block_align} for {bits}-bit x{channels}")
    if tag == FORMAT_FLOAT and bits != 32:
        raise UnsupportedCodecError(f"{source_id}: {bits}-bit float samples")
    if tag == FORMAT_PCM and bits not in (8, 16, 24, 32):
        raise UnsupportedCodecError(f"{source_id}: {bits}-bit PCM")
    n_frames = len(pcm) // block_align
    if n_frames == 0:
        raise EmptyAudioError(f"{source_id}: no audio samples")
    raw = pcm[:n_frames * block_align]
    if tag == FORMAT_FLOAT:
        x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(x)):
            raise WavFormatError(f"{source_id}: non-finite float samples")
        x = np.clip(x, -1.0, 1.0)
    elif bits == 8:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    else:
        x = np.frombuffer(raw, dtype=f"<i{width}").astype(np.float64) / float(1 << (bits - 1))
    if channels == 2:
        x = x.reshape(-1, 2).mean(axis=1)
    return AudioClip(x, int(rate), None, source_id)


def load_wav(path, label: int | None = None) -> AudioClip:
    path = Path(path)
    clip = parse_wav(path.read_bytes(), str(path))
    return replace(clip, label=label) if label is not None else clip


def wav_bytes(samples, sample_rate: int, bits: int = 16) -> bytes:
    """Encode mono samples in [-1, 1] as PCM (16/24-bit) or 32-bit float WAV."""
    x = np.asarray(samples, dtype=np.float64)
    if bits == 32:
        tag, payload = FORMAT_FLOAT, np.clip(x, -1, 1).astype("<f4").tobytes()
    elif bits in (16, 24):
        tag = FORMAT_PCM
        full = 1 << (bits - 1)
        q = np.clip(np.round(x * full), -full, full - 1).astype(np.int64)
        if bits == 16:
            payload = q.astype("<i2").tobytes()
        else:
            u = (q & 0xFFFFFF).astype(np.uint32)
            payload = np.stack([u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
    else:
        raise UnsupportedCodecError(f"cannot write {bits}-bit WAV")
    width = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, sample_rate, sample_rate * width, width, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\0"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, samples, sample_rate: int, bits: int = 16) -> None:
    Path(path).write_bytes(wav_bytes(samples, sample_rate, bits))


def segment(clip: AudioClip, duration_s: float, min_samples: int = MIN_SEGMENT) -> list[AudioClip]:
    """Consecutive non-overlapping pieces of exactly ``duration_s``; the
    shorter remainder is dropped."""
    n = int(round(duration_s * clip.sample_rate))
    if n < min_samples:
        raise AudioError(f"segment of {n} samples is shorter than one {min_samples}-sample frame")
    count = len(clip.samples) // n
    return [AudioClip(clip.samples[k * n:(k + 1) * n], clip.sample_rate, clip.label, f"{clip.source_id}#{k}")
            for k in range(count)]
