import math

import numpy as np
import pytest

from recdevid import features as F
from recdevid.audio import AudioClip
from recdevid.features import FeatureConfigError, FrameSpec, TooShortError

from oracles import naive_dct2_ortho, naive_delta, naive_dft_power, naive_pre_emphasis

SR = 16000


def test_pre_emphasis_examples(rng):
    np.testing.assert_allclose(F.pre_emphasis([1, 1, 1, 1], 0.97), [1.0, 0.03, 0.03, 0.03], rtol=1e-12)
    x = rng.normal(size=16)
    assert np.array_equal(F.pre_emphasis(x, 0.0), x)
    for _ in range(20):
        x, a = rng.normal(size=16), rng.uniform(0, 0.99)
        np.testing.assert_allclose(F.pre_emphasis(x, a), naive_pre_emphasis(x, a), rtol=1e-12, atol=1e-15)


def test_hop_for_ten_seconds_at_32k():
    spec = FrameSpec()
    assert F.frame_hop(320000, spec) == 2511
    assert F.frame_and_window(np.zeros(320000), spec).shape == (128, 1024)


def test_rectangular_frames_are_raw_slices(rng):
    spec = FrameSpec(window="rectangular", frame_len=8, fft_size=8, target_frames=4)
    y = rng.normal(size=40)
    frames = F.frame_and_window(y, spec)
    hop = (40 - 8) // 3
    for t in range(4):
        assert np.array_equal(frames[t], y[t * hop:t * hop + 8])


def test_hamming_on_ones_is_the_window():
    spec = FrameSpec(frame_len=16, fft_size=16, target_frames=2)
    frames = F.frame_and_window(np.ones(40), spec)
    n = np.arange(16)
    np.testing.assert_allclose(frames[0], 0.54 - 0.46 * np.cos(2 * np.pi * n / 15), rtol=1e-12, atol=1e-15)


def test_too_short_signal():
    with pytest.raises(TooShortError):
        F.frame_and_window(np.zeros(1000), FrameSpec())


def test_power_spectrum_examples(rng):
    assert not F.power_spectrum(np.zeros(32), 32).any()
    np.testing.assert_array_equal(F.power_spectrum([1, 0, 0, 0, 0, 0, 0, 0], 8), np.ones(5))
    cos = np.cos(2 * np.pi * 4 * np.arange(64) / 64)
    p = F.power_spectrum(cos, 64)
    assert p.argmax() == 4 and p[4] > 0.999 * p.sum()
    np.testing.assert_allclose(p, naive_dft_power(cos, 64), rtol=1e-9, atol=1e-9)
    for _ in range(5):
        frame = rng.normal(size=48)
        np.testing.assert_allclose(F.power_spectrum(frame, 64), naive_dft_power(frame, 64), rtol=1e-9, atol=1e-9)


def test_log_energy_examples(rng):
    assert F.log_energy(np.zeros(10)) == math.log(1e-10)
    assert F.log_energy(np.ones(400)) == pytest.approx(math.log(400), rel=1e-14)
    x = rng.normal(size=100)
    assert F.log_energy(2 * x) - F.log_energy(x) == pytest.approx(math.log(4), rel=1e-12)


def test_filterbank_properties(rng):
    spec = FrameSpec()
    fb = F.mel_filterbank_matrix(spec, SR)
    assert fb.shape == (34, 513)
    assert np.all(fb.max(axis=1) == 1.0)
    np.testing.assert_allclose(F.mel_filterbank(np.ones(513), spec, SR), fb.sum(axis=1), rtol=1e-12)
    # weight-sum oracle: plain loops over one random spectrum
    power = rng.uniform(0, 1, size=513)
    ref = [sum(fb[m, k] * power[k] for k in range(513)) for m in range(34)]
    np.testing.assert_allclose(F.mel_filterbank(power, spec, SR), ref, rtol=1e-12)


def test_too_many_filters_rejected():
    with pytest.raises(FeatureConfigError):
        F.mel_filterbank_matrix(FrameSpec(n_mel=200, fft_size=256, frame_len=256), 8000)


def test_dct_examples(rng):
    assert F.mfcc_dct(np.full(34, 3.7), 12).shape == (12,)
    np.testing.assert_allclose(F.mfcc_dct(np.full(34, 3.7), 12), 0.0, atol=1e-12)
    for _ in range(20):
        x = rng.normal(size=34)
        np.testing.assert_allclose(F.mfcc_dct(x, 12), naive_dct2_ortho(x)[1:13], rtol=1e-10, atol=1e-6)


def test_delta_examples(rng):
    assert not F.delta(np.full((10, 3), 2.5)).any()
    ramp = 0.7 * np.arange(12)[:, None] * np.ones((1, 2))
    np.testing.assert_allclose(F.delta(ramp)[2:-2], 0.7, rtol=1e-12)
    assert not F.delta(rng.normal(size=(1, 4))).any()
    x = rng.normal(size=(9, 5))
    np.testing.assert_allclose(F.delta(x), naive_delta(x), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(F.delta(x, 2), naive_delta(naive_delta(x)), rtol=1e-12, atol=1e-14)


def _speechy(rng, seconds=2.0):
    t = np.arange(int(seconds * SR)) / SR
    return 0.4 * np.sin(2 * np.pi * 220 * t) + 0.2 * np.sin(2 * np.pi * 1330 * t) + 0.05 * rng.normal(size=len(t))


def test_shape_and_layout(rng):
    feat = F.extract_tandem(AudioClip(rng.normal(size=10 * 32000) * 0.1, 32000, 4, "x"))
    assert feat.matrix.shape == (128, 73) and feat.matrix.dtype == np.float32
    assert feat.label == 4
    assert [feat.block(n).shape[1] for n, _ in F.LAYOUT] == [12, 1, 13, 13, 34]


def test_silent_clip():
    m = F.extract_matrix(np.zeros(SR), SR)
    floor = np.float32(math.log(1e-10))
    # cosine sums over a constant cancel up to round-off
    np.testing.assert_allclose(m[:, :12], 0.0, atol=1e-12)
    np.testing.assert_allclose(m[:, 13:39], 0.0, atol=1e-12)
    assert np.all(m[:, 12] == floor) and np.all(m[:, 39:] == floor)


def test_blocks_match_independent_composition(rng):
    spec = FrameSpec()
    x = _speechy(rng)
    m = F.extract_matrix(x, SR, spec)
    y = naive_pre_emphasis(x, 0.97)
    hop = (len(y) - 1024) // 127
    n = np.arange(1024)
    win = 0.54 - 0.46 * np.cos(2 * np.pi * n / 1023)
    frames = np.stack([y[t * hop:t * hop + 1024] * win for t in range(128)])
    fb = F.mel_filterbank_matrix(spec, SR)
    power = np.abs(np.fft.fft(frames, axis=1)[:, :513]) ** 2
    log_mel = np.log(np.maximum(power @ fb.T, 1e-10))
    mfcc = np.stack([naive_dct2_ortho(row)[1:13] for row in log_mel[:4]])
    loge = np.log(np.maximum((frames ** 2).sum(axis=1), 1e-10))
    np.testing.assert_allclose(m[:4, :12], mfcc, rtol=1e-5, atol=1e-4)
    np.testing.assert_allclose(m[:, 12], loge, rtol=1e-6)
    base = np.concatenate([F.mfcc_dct(log_mel), loge[:, None]], axis=1)
    np.testing.assert_allclose(m[:, 13:26], naive_delta(base), rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(m[:, 26:39], naive_delta(naive_delta(base)), rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(m[:, 39:], log_mel, rtol=1e-6, atol=1e-5)


def test_gain_covariance(rng):
    x = _speechy(rng)
    a = F.extract_matrix(x, SR).astype(np.float64)
    for g in (0.25, 3.0):
        b = F.extract_matrix(g * x, SR).astype(np.float64)
        shift = math.log(g * g)
        np.testing.assert_allclose(b[:, 12] - a[:, 12], shift, atol=1e-4)
        np.testing.assert_allclose(b[:, 39:] - a[:, 39:], shift, atol=1e-4)
        # MFCC 1..12 and every delta column ignore a constant log offset
        np.testing.assert_allclose(b[:, :12], a[:, :12], atol=1e-4)
        np.testing.assert_allclose(b[:, 13:39], a[:, 13:39], atol=1e-4)


def test_determinism(rng):
    x = _speechy(rng)
    assert np.array_equal(F.extract_matrix(x, SR), F.extract_matrix(x.copy(), SR))


def test_spec_validation():
    assert FrameSpec().n_dims == 73
    for bad in ({"fft_size": 1000}, {"window": "kaiser"}, {"pre_emphasis_alpha": 1.0}, {"n_mfcc": 34}):
        with pytest.raises(FeatureConfigError):
            FrameSpec(**bad).validate()
    with pytest.raises(FeatureConfigError):
        FrameSpec.from_dict({"frame_length": 512})
    assert FrameSpec.from_dict(FrameSpec().to_dict()) == FrameSpec()
