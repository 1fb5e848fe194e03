import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parsep import dsp
from parsep.errors import ConfigError, EmptyCorpus, InputTooShort, ShapeError


def _direct_frame_dft(x, t):
    # textbook DFT of one windowed frame, no FFT
    frame = x[t * dsp.HOP:t * dsp.HOP + dsp.FRAME_LEN] * dsp.sqrt_hann()
    n = np.arange(dsp.FRAME_LEN)
    k = np.arange(dsp.N_BINS)[:, None]
    return (frame * np.exp(-2j * np.pi * k * n / dsp.FRAME_LEN)).sum(axis=1)


def test_frame_count_formula():
    for n in (256, 257, 319, 320, 8000, 12345):
        assert dsp.n_frames_for(n) == (n - 256) // 64 + 1


def test_zero_waveform_gives_zero_spectrogram():
    s = dsp.stft(np.zeros(8000))
    # floor((8000 - 256) / 64) + 1 = 122 frames
    assert s.bins.shape == (122, 129)
    assert not np.any(s.bins)


def test_short_signal_rejected():
    with pytest.raises(InputTooShort):
        dsp.stft(np.zeros(255))


def test_sine_peaks_at_bin_32_and_matches_direct_dft():
    x = np.sin(2 * np.pi * 1000 * np.arange(8000) / 8000)
    s = dsp.stft(x)
    assert np.all(np.argmax(np.abs(s.bins), axis=1) == 32)
    for t in (0, 17, 121):
        np.testing.assert_allclose(s.bins[t], _direct_frame_dft(x, t), atol=1e-9)


def test_cola_envelope_constant_on_interior():
    w2 = dsp.sqrt_hann() ** 2
    env = np.zeros(64 * 40 + 256)
    for t in range(41):
        env[t * 64:t * 64 + 256] += w2
    interior = env[256:-256]
    np.testing.assert_allclose(interior, interior[0], rtol=1e-12)


def test_roundtrip_interior():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(8000)
    y = dsp.istft(dsp.stft(x), 8000).samples
    sl = slice(256, 8000 - 256)
    assert np.linalg.norm(y[sl] - x[sl]) / np.linalg.norm(x[sl]) < 1e-6


def test_analysis_pad_gives_full_reconstruction():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(5001)
    padded, left = dsp.analysis_pad(x)
    y = dsp.istft(dsp.stft(padded), len(padded)).samples[left:left + len(x)]
    np.testing.assert_allclose(y, x, atol=1e-10)


def test_istft_zero_and_linearity():
    assert not np.any(dsp.istft(dsp.Spectrogram(np.zeros((10, 129), complex)), 832).samples)
    rng = np.random.default_rng(2)
    s = dsp.stft(rng.standard_normal(3000))
    a = dsp.istft(s, 2944).samples
    b = dsp.istft(dsp.Spectrogram(2 * s.bins), 2944).samples
    np.testing.assert_allclose(b, 2 * a, atol=1e-12)


def test_istft_rejects_long_output_and_bad_width():
    s = dsp.Spectrogram(np.zeros((4, 129), complex))
    with pytest.raises(ShapeError):
        dsp.istft(s, 3 * 64 + 257)
    with pytest.raises(ShapeError):
        dsp.istft(dsp.Spectrogram(np.zeros((4, 100), complex)), 100)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_stft_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 700))
    np.testing.assert_allclose(dsp.stft(a * x + b * y).bins,
                               a * dsp.stft(x).bins + b * dsp.stft(y).bins, atol=1e-9)


def _const_spec(c, t=5):
    return dsp.Spectrogram(np.full((t, 129), c, dtype=complex))


def test_log_features_identity_normalizer():
    n = dsp.Normalizer(np.zeros(129), np.ones(129))
    assert np.allclose(dsp.log_features(_const_spec(1.0), n), 0.0, atol=1e-9)
    np.testing.assert_allclose(dsp.log_features(_const_spec(10.0), n), 1.0, atol=1e-9)


def test_fit_normalizer_constant_corpus_floors_std():
    n = dsp.fit_normalizer([_const_spec(3.0), _const_spec(3.0, 7)])
    np.testing.assert_allclose(n.mean, np.log10(3.0 + 1e-10))
    assert np.all(n.std == 1e-8)


def test_fit_normalizer_two_point_statistics():
    n = dsp.fit_normalizer([_const_spec(1.0, 4), _const_spec(100.0, 4)])
    np.testing.assert_allclose(n.mean, 1.0, atol=1e-9)
    np.testing.assert_allclose(n.std, 1.0, atol=1e-9)


def test_fit_normalizer_matches_two_pass_oracle():
    rng = np.random.default_rng(3)
    corpus = [dsp.Spectrogram(rng.standard_normal((t, 129)) + 1j * rng.standard_normal((t, 129)))
              for t in (3, 8, 5)]
    logs = np.concatenate([np.log10(np.abs(s.bins) + 1e-10) for s in corpus])
    mean = logs.sum(axis=0) / len(logs)
    std = np.sqrt(((logs - mean) ** 2).sum(axis=0) / len(logs))
    n = dsp.fit_normalizer(corpus)
    np.testing.assert_allclose(n.mean, mean, rtol=0, atol=1e-10)
    np.testing.assert_allclose(n.std, std, rtol=0, atol=1e-10)
    feats = np.concatenate([dsp.log_features(s, n) for s in corpus])
    assert np.abs(feats.mean(axis=0)).max() < 1e-9
    assert np.abs(feats.std(axis=0) - 1).max() < 1e-6


def test_fit_normalizer_empty():
    with pytest.raises(EmptyCorpus):
        dsp.fit_normalizer([])


def test_normalizer_dict_roundtrip():
    n = dsp.Normalizer(np.linspace(0, 1, 129), np.linspace(1, 2, 129))
    m = dsp.Normalizer.from_dict(n.to_dict())
    np.testing.assert_array_equal(m.mean, n.mean)
    np.testing.assert_array_equal(m.std, n.std)


def test_wav_roundtrip(tmp_path):
    x = np.round(np.linspace(-0.9, 0.9, 801) * 32768) / 32768
    dsp.write_wav(tmp_path / "a.wav", x)
    np.testing.assert_array_equal(dsp.read_wav(tmp_path / "a.wav").samples, x)


def test_synth_deterministic_and_exact_sum():
    cfg = dsp.SynthConfig(n_mixtures=4)
    a, b = dsp.synth_corpus(cfg, 7), dsp.synth_corpus(cfg, 7)
    for m, n in zip(a, b):
        assert np.array_equal(m.mixture.samples, n.mixture.samples)
        assert all(np.array_equal(s.samples, t.samples) for s, t in zip(m.sources, n.sources))
        assert np.array_equal(m.mixture.samples, m.sources[0].samples + m.sources[1].samples)
    assert not np.array_equal(a[0].mixture.samples, dsp.synth_corpus(cfg, 8)[0].mixture.samples)


def test_synth_families_separated_by_centroid():
    corpus = dsp.synth_corpus(dsp.SynthConfig(n_mixtures=20), 11)
    low = np.array([dsp.spectral_centroid(m.sources[0]) for m in corpus])
    high = np.array([dsp.spectral_centroid(m.sources[1]) for m in corpus])
    gap = high.mean() - low.mean()
    assert gap > 2 * low.std() and gap > 2 * high.std()


def test_synth_rejects_bad_durations():
    with pytest.raises(ConfigError):
        dsp.synth_corpus(dsp.SynthConfig(min_duration=2.0, max_duration=1.0), 0)


def test_synth_from_wav_pool(tmp_path):
    rng = np.random.default_rng(0)
    for spk in ("a", "b", "c"):
        (tmp_path / spk).mkdir()
        dsp.write_wav(tmp_path / spk / "u.wav", 0.3 * rng.uniform(-1, 1, 12000))
    corpus = dsp.synth_corpus(dsp.SynthConfig(n_mixtures=3, source_dir=str(tmp_path)), 0)
    for m in corpus:
        assert np.array_equal(m.mixture.samples, m.sources[0].samples + m.sources[1].samples)
        assert np.max(np.abs(m.mixture.samples)) <= 0.9 + 1e-12
