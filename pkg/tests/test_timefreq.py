import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dualcycon.errors import LengthMismatch
from dualcycon.timefreq import (LOG_EPS, hann_window, log_spectrogram,
                                normalize_symmetric, normalize_unit, stft_frame)


def naive_dft(x, n_bins=None):
    """O(n^2) DFT by direct summation."""
    n = len(x)
    n_bins = n if n_bins is None else n_bins
    m = np.arange(n)
    return np.array([np.sum(x * np.exp(-2j * np.pi * k * m / n)) for k in range(n_bins)])


class TestHann:
    def test_n4(self):
        np.testing.assert_allclose(hann_window(4), [0, 0.5, 1, 0.5], atol=1e-15)

    def test_n2(self):
        np.testing.assert_allclose(hann_window(2), [0, 1], atol=1e-15)

    @pytest.mark.parametrize("n", [2, 4, 64, 512])
    def test_sum(self, n):
        assert hann_window(n).sum() == pytest.approx(n / 2, rel=1e-12)

    def test_too_short(self):
        with pytest.raises(ValueError):
            hann_window(1)


class TestStftFrame:
    def test_zero(self):
        assert not np.any(stft_frame(np.zeros(64), hann_window(64)))

    def test_tone_bin8_matches_oracle(self):
        n = 512
        w = hann_window(n)
        m = np.arange(n)
        tone = np.cos(2 * np.pi * 8 * m / n)
        seg = np.divide(tone, w, out=np.zeros(n), where=w > 1e-3)
        got = stft_frame(seg, w)
        assert np.argmax(np.abs(got)) == 8
        ref = naive_dft(seg * w, n // 2 + 1)
        assert np.max(np.abs(got - ref)) <= 1e-9 * np.max(np.abs(ref))

    def test_real_edges(self):
        x = np.random.default_rng(0).normal(size=128)
        X = stft_frame(x, hann_window(128))
        assert X.shape == (65,)
        assert abs(X[0].imag) < 1e-12 and abs(X[-1].imag) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            stft_frame(np.zeros(10), hann_window(12))

    def test_random_vs_oracle(self):
        rng = np.random.default_rng(1)
        w = hann_window(256)
        for _ in range(10):
            x = rng.normal(size=256)
            ref = naive_dft(x * w, 129)
            assert np.max(np.abs(stft_frame(x, w) - ref)) <= 1e-9 * np.max(np.abs(ref))

    @pytest.mark.parametrize("n", [8, 64, 512])
    def test_parseval(self, n):
        rng = np.random.default_rng(n)
        w = hann_window(n)
        x = rng.normal(size=n)
        X = stft_frame(x, w)
        # one-sided spectrum: interior bins stand for two conjugate bins
        energy = (abs(X[0]) ** 2 + 2 * np.sum(abs(X[1:-1]) ** 2) + abs(X[-1]) ** 2) / n
        assert energy == pytest.approx(np.sum((x * w) ** 2), rel=1e-9)


class TestLogSpectrogram:
    def test_shape_full_scale(self):
        assert log_spectrogram(np.zeros((257, 512))).shape == (257, 257)

    def test_zero_row(self):
        out = log_spectrogram(np.zeros((2, 64)))
        np.testing.assert_allclose(out, np.log(LOG_EPS))

    def test_scaling_shift(self):
        x = np.random.default_rng(2).normal(size=(1, 64))
        a, b = log_spectrogram(x), log_spectrogram(10 * x)
        np.testing.assert_allclose(b - a, 2 * np.log(10), atol=1e-6)

    def test_matches_oracle(self):
        x = np.random.default_rng(3).normal(size=(3, 32))
        w = hann_window(32)
        ref = np.array([np.log(np.abs(naive_dft(r * w, 17)) ** 2 + LOG_EPS) for r in x])
        np.testing.assert_allclose(log_spectrogram(x), ref, atol=1e-9)


class TestNormalize:
    def test_symmetric_example(self):
        np.testing.assert_allclose(normalize_symmetric([0, 5, 10]), [-1, 0, 1])

    def test_constant(self):
        assert not normalize_symmetric(np.full((3, 3), 4.0)).any()
        assert not normalize_unit(np.full((3, 3), 4.0)).any()

    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 6)),
                  elements=st.floats(-1e6, 1e6)))
    def test_ranges_and_idempotence(self, m):
        if m.max() == m.min():
            return
        s, u = normalize_symmetric(m), normalize_unit(m)
        assert s.min() == -1 and s.max() == 1
        assert u.min() == 0 and u.max() == 1
        np.testing.assert_allclose(normalize_symmetric(s), s, atol=1e-12)
        np.testing.assert_allclose(normalize_unit(u), u, atol=1e-12)
