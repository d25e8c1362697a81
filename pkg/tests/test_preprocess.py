import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dualcycon.errors import NoZeroCrossing, WindowTooLarge
from dualcycon.preprocess import (NEGATIVE, POSITIVE, Peak, PhaseAnchors,
                                  PreprocessConfig, aggregate_three_phase,
                                  detect_peaks, extract_pulse_sets,
                                  extract_windows, find_phase_anchors,
                                  flatten_highpass, knee_filter, moving_average,
                                  phase_align, preprocess_measurement)
from dualcycon.signal_io import RawMeasurement


# -- oracles ----------------------------------------------------------------

def moving_average_oracle(x, w):
    n = len(x)
    out = []
    for i in range(n):
        lo, hi = max(0, i - w // 2), min(n, i + w - w // 2)
        out.append(sum(x[lo:hi]) / (hi - lo))
    return np.array(out)


def flatten_oracle(x, alpha, beta):
    z = [x[0]]
    for v in x[1:]:
        z.append(z[-1] * (alpha - beta) / alpha + beta * v / alpha)
    return np.asarray(x) - np.asarray(z)


def peaks_oracle(x, hw):
    """Window scan: max of the window, positive, and no equal value to the left."""
    out = []
    n = len(x)
    for i in range(n):
        lo, hi = max(0, i - hw), min(n, i + hw + 1)
        if x[i] > 0 and x[i] == max(x[lo:hi]) and all(x[j] < x[i] for j in range(lo, i)):
            out.append(i)
    return out


def knee_oracle(heights, L, tau):
    """Hand-rolled 'same' convolution with v_j = j/L normalized by its sum."""
    g = [heights[i + 1] - heights[i] for i in range(len(heights) - 1)]
    v = [j / L for j in range(1, L + 1)]
    s = sum(v)
    v = [x / s for x in v]
    n, c = len(g), (L - 1) // 2
    sm = []
    for i in range(n):
        acc = 0.0
        for j in range(L):
            k = i + c - j
            if 0 <= k < n:
                acc += g[k] * v[j]
        sm.append(abs(acc))
    m = max(sm)
    for i, val in enumerate(sm):
        if val <= tau * m:
            return i
    return len(heights)


# -- moving average ---------------------------------------------------------

class TestMovingAverage:
    def test_example(self):
        np.testing.assert_allclose(moving_average([0, 0, 4, 0, 0], 3),
                                   [0, 4 / 3, 4 / 3, 4 / 3, 0], atol=1e-15)

    @pytest.mark.parametrize("w", [1, 2, 5, 10])
    def test_constant(self, w):
        np.testing.assert_allclose(moving_average(np.full(20, 3.5), w), 3.5)

    def test_too_large(self):
        with pytest.raises(WindowTooLarge):
            moving_average(np.zeros(4), 5)

    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e3, 1e3)),
           st.integers(1, 40))
    def test_matches_oracle(self, x, w):
        if w > x.size:
            return
        np.testing.assert_allclose(moving_average(x, w), moving_average_oracle(list(x), w),
                                   atol=1e-9)


# -- phase anchors / alignment ---------------------------------------------

def _circ_dist(a, b, n):
    d = abs(a - b) % n
    return min(d, n - d)


class TestPhaseAnchors:
    def test_sine(self):
        n = 1000
        a = find_phase_anchors(np.sin(2 * np.pi * np.arange(n) / n))
        assert _circ_dist(a.idx0, 0, n) <= 1
        assert _circ_dist(a.idx180, 500, n) <= 1

    def test_negated_sine(self):
        n = 1000
        a = find_phase_anchors(-np.sin(2 * np.pi * np.arange(n) / n))
        assert _circ_dist(a.idx0, 500, n) <= 1
        assert _circ_dist(a.idx180, 0, n) <= 1

    def test_all_positive(self):
        with pytest.raises(NoZeroCrossing):
            find_phase_anchors(np.full(100, 2.0))

    def test_steepest_crossing_wins(self):
        s = np.array([-1.0, 1.0, -0.1, 0.1, -3.0, 0.5, -0.2])
        a = find_phase_anchors(s)
        assert a.idx0 == 5
        assert a.idx180 == 4

    @pytest.mark.parametrize("shift", [0, 17, 250, 731])
    def test_alignment_roundtrip(self, shift):
        n = 1000
        s = np.sin(2 * np.pi * (np.arange(n) + shift) / n)
        aligned = phase_align(s, find_phase_anchors(s))
        again = find_phase_anchors(aligned)
        assert _circ_dist(again.idx0, 0, n) <= 1
        np.testing.assert_array_equal(np.sort(aligned), np.sort(s))


class TestPhaseAlign:
    def test_identity(self):
        x = np.arange(5.0)
        np.testing.assert_array_equal(phase_align(x, PhaseAnchors(0, 2)), x)

    def test_rotation(self):
        np.testing.assert_array_equal(
            phase_align(np.array(list("abcd")), PhaseAnchors(2, 0)), list("cdab"))


# -- flattening -------------------------------------------------------------

class TestFlatten:
    def test_constant_is_zero(self):
        assert not np.any(flatten_highpass(np.full(500, -7.25), 100, 1))

    def test_step_response(self):
        x = np.r_[np.zeros(10), np.ones(20)]
        y = flatten_highpass(x, 100, 1)
        assert np.all(y[:10] == 0)
        assert abs(y[10] - 0.99) < 1e-12
        np.testing.assert_allclose(y[11:14] / y[10:13], 0.99, rtol=0, atol=1e-12)
        np.testing.assert_allclose(y[10:], 0.99 ** np.arange(1, 21), atol=1e-12)

    @given(arrays(np.float64, st.integers(1, 200), elements=st.floats(-1e3, 1e3)),
           st.floats(-5, 5))
    def test_linear(self, x, a):
        np.testing.assert_allclose(flatten_highpass(a * x), a * flatten_highpass(x), atol=1e-8)

    def test_matches_loop(self):
        x = np.random.default_rng(0).normal(size=300)
        np.testing.assert_allclose(flatten_highpass(x, 100, 1), flatten_oracle(list(x), 100, 1),
                                   atol=1e-12)
        np.testing.assert_allclose(flatten_highpass(x, 7, 3), flatten_oracle(list(x), 7, 3),
                                   atol=1e-12)


# -- peaks ------------------------------------------------------------------

class TestDetectPeaks:
    def test_impulse(self):
        x = np.zeros(100)
        x[50] = 3.0
        assert [p.t for p in detect_peaks(x, 5)] == [50]

    def test_plateau_left(self):
        x = np.zeros(40)
        x[20:22] = 1.0
        assert [p.t for p in detect_peaks(x, 5)] == [20]

    def test_abs_sine_two_peaks(self):
        n = 200
        x = np.abs(np.sin(2 * np.pi * np.arange(n) / n))
        got = [p.t for p in detect_peaks(x, 5)]
        assert got == peaks_oracle(list(x), 5)
        assert len(got) == 2

    def test_half_tag(self):
        x = np.zeros(10)
        x[2], x[7] = 1, 1
        assert [p.half for p in detect_peaks(x, 1)] == [POSITIVE, NEGATIVE]

    def test_random_vs_oracle(self):
        rng = np.random.default_rng(123)
        for _ in range(50):
            n = int(rng.integers(1, 300))
            hw = int(rng.integers(0, 12))
            # coarse quantization produces plenty of ties and plateaus
            x = np.round(np.abs(rng.normal(size=n)) * 3) / 3
            assert [p.t for p in detect_peaks(x, hw)] == peaks_oracle(list(x), hw)


class TestKneeFilter:
    def test_example(self):
        heights = [100, 50, 25] + [10] * 9
        peaks = [Peak(i, h) for i, h in enumerate(heights)]
        kept = knee_filter(peaks, 9, 0.01)
        assert kept == peaks[:len(kept)]
        assert 3 <= len(kept) < len(peaks)
        assert len(kept) == knee_oracle(heights, 9, 0.01)

    def test_few_peaks(self):
        assert knee_filter([], 9, 1e-3) == []
        one = [Peak(3, 1.0)]
        assert knee_filter(one, 9, 1e-3) == one

    def test_geometric_fallback(self):
        peaks = [Peak(i, 0.5 ** i) for i in range(12)]
        assert knee_filter(peaks, 9, 1e-9) == peaks

    def test_random_vs_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 60))
            h = np.sort(rng.exponential(size=n))[::-1]
            if rng.random() < 0.5:
                h[n // 2:] = h[n // 2]
            peaks = [Peak(i, float(v)) for i, v in enumerate(h)]
            tau = float(rng.choice([1e-3, 1e-2, 0.1]))
            assert len(knee_filter(peaks, 9, tau)) == knee_oracle(list(h), 9, tau)


class TestAggregate:
    def test_counts(self):
        rng = np.random.default_rng(0)
        groups = [[Peak(int(t), float(rng.random()), ph, POSITIVE) for t in range(100)]
                  for ph in "ABC"]
        pos, neg = aggregate_three_phase(groups, 257)
        assert len(pos) == 257 and neg == []
        chosen = set(pos)
        dropped = [p for g in groups for p in g if p not in chosen]
        assert len(dropped) == 43
        assert min(p.height for p in pos) >= max(p.height for p in dropped)

    def test_empty(self):
        assert aggregate_three_phase([[], [], []], 257) == ([], [])

    def test_exact_and_order(self):
        groups = [[Peak(5, 2.0, "B", NEGATIVE), Peak(1, 2.0, "C", NEGATIVE)],
                  [Peak(1, 2.0, "A", NEGATIVE), Peak(9, 3.0, "A", NEGATIVE)]]
        _, neg = aggregate_three_phase(groups, 4)
        assert [(p.t, p.phase_id) for p in neg] == [(9, "A"), (1, "A"), (1, "C"), (5, "B")]

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.integers(0, 99), st.integers(0, 20), st.sampled_from("ABC"),
                              st.sampled_from([POSITIVE, NEGATIVE])), max_size=80),
           st.integers(1, 30))
    def test_top_n_vs_sort_oracle(self, rows, n_p):
        peaks = [Peak(t, h / 4, ph, half) for t, h, ph, half in rows]
        pos, neg = aggregate_three_phase([peaks], n_p)
        for half, got in ((POSITIVE, pos), (NEGATIVE, neg)):
            pool = [p for p in peaks if p.half == half]
            want = sorted(pool, key=lambda p: (-p.height, p.t, "ABC".index(p.phase_id)))[:n_p]
            assert got == want


class TestExtractWindows:
    def test_left_edge(self):
        x = np.arange(1.0, 11.0)
        row = extract_windows(x, [Peak(0, 1.0)], 4, 1)[0]
        np.testing.assert_array_equal(row, [0, 0, 1, 2])

    def test_no_peaks(self):
        out = extract_windows(np.ones(10), [], 4, 3)
        assert out.shape == (3, 4) and not out.any()

    def test_mid_slice_and_phase(self):
        rng = np.random.default_rng(2)
        sig = {ph: rng.normal(size=100) for ph in "ABC"}
        peaks = [Peak(50, 1.0, "B"), Peak(98, 0.5, "C")]
        out = extract_windows(sig, peaks, 8, 4)
        np.testing.assert_array_equal(out[0], sig["B"][46:54])
        np.testing.assert_array_equal(out[1], np.r_[sig["C"][94:100], 0, 0])
        assert not out[2:].any()


# -- whole chain ------------------------------------------------------------

N = 80_000
CFG = PreprocessConfig(ma_window=1000, n_peaks=16, w_t=32, w_f=64)


def three_phase(theta0=0.3):
    t = np.arange(N) / N
    return np.stack([np.sin(2 * np.pi * t + theta0 - 2 * np.pi * k / 3) for k in range(3)])


class TestPipeline:
    def test_pure_sine_has_no_peaks(self):
        feats = preprocess_measurement(RawMeasurement("s", three_phase(), 0), CFG)
        assert feats.n_real_pos == 0 and feats.n_real_neg == 0
        for name in ("td_pos", "td_neg", "fd_pos", "fd_neg"):
            assert not getattr(feats, name).any()

    def test_pure_sine_full_scale(self):
        t = np.arange(800_000) / 800_000
        x = np.stack([np.sin(2 * np.pi * t - 2 * np.pi * k / 3) for k in range(3)])
        pos, neg, _ = extract_pulse_sets(RawMeasurement("s", x, 0), PreprocessConfig())
        assert pos.n_real_peaks == 0 and neg.n_real_peaks == 0
        assert pos.pulses_t.shape == (257, 128) and pos.pulses_f.shape == (257, 512)

    def test_single_impulse_at_90_degrees(self):
        theta0 = 0.3
        x = three_phase(theta0)
        i90 = int(round(((np.pi / 2 - theta0) % (2 * np.pi)) / (2 * np.pi) * N))
        x[0, i90] += 1.0
        pos, neg, traces = extract_pulse_sets(RawMeasurement("s", x, 1), CFG)
        assert pos.n_real_peaks == 1 and neg.n_real_peaks == 0
        t = traces["A"].peaks[0].t
        assert abs(t - N // 4) <= 2  # 90 deg in the aligned frame
        assert pos.pulses_t[0, CFG.w_t // 2] == pytest.approx(0.99, abs=1e-3)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        x = three_phase() + rng.normal(0, 0.01, (3, N))
        m = RawMeasurement("s", x, 1)
        a = preprocess_measurement(m, CFG)
        b = preprocess_measurement(m, CFG)
        for name in ("td_pos", "td_neg", "fd_pos", "fd_neg"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_rows_sorted_and_zero_padded(self):
        rng = np.random.default_rng(5)
        x = three_phase()
        for t in rng.choice(N, 6, replace=False):
            x[int(rng.integers(3)), t] += rng.uniform(0.2, 1.0)
        pos, neg, _ = extract_pulse_sets(RawMeasurement("s", x, 1), CFG)
        for s in (pos, neg):
            centers = np.abs(s.pulses_t[:s.n_real_peaks, CFG.w_t // 2])
            assert np.all(np.diff(centers) <= 1e-12)
            assert not s.pulses_t[s.n_real_peaks:].any()
            assert not s.pulses_f[s.n_real_peaks:].any()

    def test_dc_input_raises(self):
        with pytest.raises(NoZeroCrossing):
            preprocess_measurement(RawMeasurement("s", np.ones((3, N)), 0), CFG)

    def test_too_short(self):
        with pytest.raises(WindowTooLarge):
            preprocess_measurement(RawMeasurement("s", three_phase()[:, :1500], 0), CFG)


class TestConfig:
    def test_defaults(self):
        c = PreprocessConfig()
        assert (c.ma_window, c.alpha, c.beta, c.L) == (10_000, 100, 1, 9)
        assert (c.n_peaks, c.w_t, c.w_f, c.f_bins) == (257, 128, 512, 257)

    def test_odd_window_rejected(self):
        with pytest.raises(ValueError):
            PreprocessConfig(w_t=31)
