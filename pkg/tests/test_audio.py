import struct

import numpy as np
import pytest

from recdevid.audio import (AudioClip, AudioError, EmptyAudioError, UnsupportedCodecError, WavFormatError,
                            load_wav, parse_wav, segment, wav_bytes, write_wav)


def riff(fmt_tag, channels, rate, bits, payload, extensible=False):
    """Hand-assembled WAV file, independent of the package's writer."""
    align = channels * bits // 8
    if extensible:
        fmt = struct.pack("<HHIIHHHHI", 0xFFFE, channels, rate, rate * align, align, bits, 22, bits, 0)
        fmt += struct.pack("<H", fmt_tag) + b"\x00\x00\x00\x00\x10\x00\x80\x00\x00\xaa\x00\x38\x9b\x71"
    else:
        fmt = struct.pack("<HHIIHH", fmt_tag, channels, rate, rate * align, align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"LIST" + struct.pack("<I", 4) + b"INFO"  # unrelated chunk to skip
    body += b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_full_scale_16bit():
    clip = parse_wav(riff(1, 1, 16000, 16, struct.pack("<3h", 32767, -32768, 0)))
    assert clip.samples[0] == 32767 / 32768
    assert clip.samples[1] == -1.0 and clip.samples[2] == 0.0
    assert clip.sample_rate == 16000


def test_all_zero_file():
    clip = parse_wav(riff(1, 1, 8000, 16, bytes(2000)))
    assert len(clip.samples) == 1000 and not clip.samples.any()


def test_stereo_is_averaged():
    payload = struct.pack("<4h", 16384, -16384, 32767, 32767)
    clip = parse_wav(riff(1, 2, 16000, 16, payload))
    assert clip.samples[0] == 0.0
    assert clip.samples[1] == 32767 / 32768


def test_other_sample_formats():
    clip8 = parse_wav(riff(1, 1, 8000, 8, bytes([0, 128, 255])))
    np.testing.assert_array_equal(clip8.samples, [-1.0, 0.0, 127 / 128])
    v24 = [-(1 << 23), (1 << 23) - 1, 1]
    payload = b"".join((v & 0xFFFFFF).to_bytes(3, "little") for v in v24)
    np.testing.assert_array_equal(parse_wav(riff(1, 1, 8000, 24, payload)).samples,
                                  [-1.0, ((1 << 23) - 1) / (1 << 23), 1 / (1 << 23)])
    clip32 = parse_wav(riff(1, 1, 8000, 32, struct.pack("<2i", -(1 << 31), 1 << 30)))
    np.testing.assert_array_equal(clip32.samples, [-1.0, 0.5])
    f = parse_wav(riff(3, 1, 8000, 32, struct.pack("<3f", 0.25, -2.0, 1.5)))
    np.testing.assert_array_equal(f.samples, [0.25, -1.0, 1.0])
    ext = parse_wav(riff(1, 1, 8000, 16, struct.pack("<h", 16384), extensible=True))
    assert ext.samples.tolist() == [0.5]


def test_format_errors():
    with pytest.raises(WavFormatError):
        parse_wav(b"RIFX" + bytes(40))
    with pytest.raises(UnsupportedCodecError):
        parse_wav(riff(0x55, 1, 8000, 16, bytes(4)))  # MP3
    with pytest.raises(UnsupportedCodecError):
        parse_wav(riff(1, 6, 8000, 16, bytes(24)))
    with pytest.raises(EmptyAudioError):
        parse_wav(riff(1, 1, 8000, 16, b""))
    truncated = riff(1, 1, 8000, 16, bytes(100))[:-10]
    with pytest.raises(WavFormatError):
        parse_wav(truncated)
    assert issubclass(WavFormatError, AudioError)


@pytest.mark.parametrize("bits", [16, 24, 32])
def test_writer_roundtrip(bits, rng, tmp_path):
    x = rng.uniform(-1, 1, size=257)
    path = tmp_path / "a.wav"
    write_wav(path, x, 22050, bits)
    clip = load_wav(path, label=3)
    assert clip.label == 3 and clip.sample_rate == 22050
    tol = 0.5 / (1 << (bits - 1)) if bits < 32 else 6e-8
    np.testing.assert_allclose(clip.samples, x, rtol=0, atol=tol)
    # stored values survive a second pass unchanged
    assert wav_bytes(clip.samples, 22050, bits) == path.read_bytes()


def _clip(seconds, rate, rng):
    return AudioClip(rng.normal(size=int(seconds * rate)), rate, 2, "c")


def test_segment_examples(rng):
    assert [len(s.samples) for s in segment(_clip(10.0, 32000, rng), 10.0)] == [320000]
    long = _clip(25.0, 16000, rng)
    parts = segment(long, 10.0)
    assert len(parts) == 2 and all(len(p.samples) == 160000 for p in parts)
    assert all(p.label == 2 for p in parts)
    np.testing.assert_array_equal(np.concatenate([p.samples for p in parts]), long.samples[:320000])
    assert segment(_clip(3.0, 16000, rng), 10.0) == []


def test_segment_shorter_than_a_frame(rng):
    with pytest.raises(AudioError):
        segment(_clip(1.0, 8000, rng), 0.01)


def test_load_is_deterministic(rng, tmp_path):
    path = tmp_path / "b.wav"
    write_wav(path, rng.uniform(-1, 1, 1000), 16000)
    a, b = load_wav(path), load_wav(path)
    assert np.array_equal(a.samples, b.samples)
