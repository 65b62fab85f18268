import csv
import math

import numpy as np
import pytest

from recdevid import synth as S
from recdevid.audio import AudioClip, load_wav
from recdevid.synth import DeviceProfile, GenerationError, SynthCorpusSpec, build_corpus, make_profiles, render


def naive_response_db(fir, points=1024):
    """Magnitude response by direct DFT sums, RMS-normalised, in dB."""
    mags = []
    for k in range(points // 2 + 1):
        re = sum(h * math.cos(2 * math.pi * k * n / points) for n, h in enumerate(fir))
        im = sum(h * math.sin(2 * math.pi * k * n / points) for n, h in enumerate(fir))
        mags.append(math.hypot(re, im))
    mags = np.array(mags)
    mags /= math.sqrt(np.mean(mags ** 2))
    return 20 * np.log10(np.maximum(mags, 1e-12))


@pytest.fixture(scope="module")
def profiles():
    return make_profiles(8, seed=0)


def test_same_seed_same_profiles(profiles):
    again = make_profiles(8, seed=0)
    for a, b in zip(profiles, again):
        assert np.array_equal(a.fir, b.fir) and a.noise_level == b.noise_level and a.gain == b.gain


def test_profiles_pairwise_separated(profiles):
    resp = [naive_response_db(p.fir) for p in profiles]
    for i in range(8):
        for j in range(i):
            assert np.max(np.abs(resp[i] - resp[j])) >= 3.0, (i, j)
    for p in profiles:
        assert 32 <= len(p.fir) <= 128 and 0.005 <= p.noise_level <= 0.03 and 0.5 <= p.gain <= 1.5


def test_single_profile_rejected():
    with pytest.raises(ValueError):
        make_profiles(1, seed=0)


def test_unreachable_separation(monkeypatch):
    monkeypatch.setattr(S, "SEPARATION_DB", 1e6)
    with pytest.raises(GenerationError):
        make_profiles(2, seed=0, max_tries=5)


def _source(rng, n=4000):
    return AudioClip(rng.normal(size=n), 16000, None, "s")


def test_identity_render(rng):
    src = _source(rng)
    out = render(src, DeviceProfile(np.array([1.0]), 0.0, 1.0, 0), seed=0)
    np.testing.assert_allclose(out.samples, 0.9 * src.samples / np.abs(src.samples).max(), rtol=1e-14)


def test_delay_render(rng):
    src = _source(rng)
    fir = np.zeros(6)
    fir[5] = 1.0
    out = render(src, DeviceProfile(fir, 0.0, 1.3, 2), seed=0).samples
    shifted = np.concatenate([np.zeros(5), src.samples[:-5]])
    np.testing.assert_allclose(out, 0.9 * shifted / np.abs(shifted).max(), rtol=1e-14, atol=1e-15)


def test_rendered_spectrum_follows_fir(profiles):
    """Band-averaged output power over input power tracks |H|^2 up to one scale."""
    rng = np.random.default_rng(8)
    n, band = 1 << 16, 256
    src = AudioClip(rng.normal(size=n), 16000, None, "w")
    p = profiles[3]
    out = render(src, p, seed=1).samples
    px = np.abs(np.fft.rfft(src.samples)[:-1]) ** 2
    py = np.abs(np.fft.rfft(out)[:-1]) ** 2
    h2 = np.abs(np.fft.rfft(p.fir, n)[:-1]) ** 2
    ratio = py.reshape(-1, band).sum(1) / px.reshape(-1, band).sum(1)
    target = (h2 * px).reshape(-1, band).sum(1) / px.reshape(-1, band).sum(1)
    scale = np.median(ratio / target)
    rel = np.abs(ratio / (scale * target) - 1)
    # where the filter is not far below the added noise, the match is tight
    strong = target > 20 * p.noise_level ** 2 * target.mean()
    assert strong.mean() > 0.5
    assert rel[strong].max() < 0.1


def test_corpus_size_balance_and_determinism():
    spec = SynthCorpusSpec(n_devices=8, clips_per_device=60, clip_duration_s=2.0, sample_rate=16000, seed=7)
    a = build_corpus(spec)
    assert len(a.clips) == 480
    assert np.bincount(a.labels).tolist() == [60] * 8
    assert all(len(c.samples) == 32000 for c in a.clips)
    b = build_corpus(spec)
    assert all(np.array_equal(x.samples, y.samples) for x, y in zip(a.clips, b.clips))
    assert a.rows == b.rows


def test_shared_sources_and_profile_seed():
    base = SynthCorpusSpec(n_devices=2, clips_per_device=10, clip_duration_s=0.25, seed=1)
    other = SynthCorpusSpec(n_devices=2, clips_per_device=10, clip_duration_s=0.25, seed=1, profile_seed=99)
    a, b = build_corpus(base), build_corpus(other)
    assert not np.array_equal(a.profiles[0].fir, b.profiles[0].fir)
    assert [r[2] for r in a.rows] == [r[2] for r in b.rows]
    # every device renders the same source pool
    assert [r[2] for r in a.rows[:10]] == [r[2] for r in a.rows[10:]]


def test_spec_validation():
    for bad in (dict(n_devices=1), dict(clips_per_device=5), dict(sample_rate=0)):
        with pytest.raises(ValueError):
            SynthCorpusSpec(**bad).validate()


def test_write_corpus(tmp_path):
    corpus = build_corpus(SynthCorpusSpec(n_devices=2, clips_per_device=10, clip_duration_s=0.1, seed=3))
    manifest = S.write_corpus(corpus, tmp_path)
    with manifest.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20 and list(rows[0]) == ["clip_path", "device_id", "source_id", "seed"]
    clip = load_wav(tmp_path / rows[3]["clip_path"])
    np.testing.assert_allclose(clip.samples, corpus.clips[3].samples, atol=1 / 32768)
    assert np.abs(clip.samples).max() <= 0.9 + 1 / 32768
