"""Pulse extraction from one three-phase measurement.

Per phase the signal is smoothed, anchored on its 0 deg zero crossing,
rotated so that it starts at 0 deg, flattened with a first-order tracking
filter, rectified and scanned for local maxima.  Weak peaks below the knee of
the sorted height curve are dropped.  The surviving peaks of all three phases
are pooled per half-cycle and the strongest ``n_peaks`` are windowed out of
the flattened (signed) signal.
"""

from dataclasses import dataclass, asdict, fields
from typing import List, NamedTuple, Sequence

import numpy as np
from scipy.ndimage import maximum_filter1d
from scipy.signal import lfilter

from .errors import NoZeroCrossing, WindowTooLarge
from .signal_io import MeasurementFeatures, RawMeasurement

PHASES = ("A", "B", "C")
POSITIVE, NEGATIVE = "positive", "negative"


@dataclass
class PreprocessConfig:
    ma_window: int = 10_000
    alpha: float = 100.0
    beta: float = 1.0
    L: int = 9
    n_peaks: int = 257
    w_t: int = 128
    w_f: int = 512
    peak_half_width: int = 25
    knee_tau: float = 1e-3
    # peaks must exceed this fraction of the smoothed fundamental's amplitude
    min_height_rel: float = 0.02

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.alpha <= self.beta:
            raise ValueError("alpha must exceed beta")
        if self.w_t % 2 or self.w_f % 2:
            raise ValueError("w_t and w_f must be even")
        if self.L < 2:
            raise ValueError("L must be at least 2")

    @property
    def f_bins(self) -> int:
        return self.w_f // 2 + 1

    def to_dict(self):
        return asdict(self)


class PhaseAnchors(NamedTuple):
    idx0: int
    idx180: int


class Peak(NamedTuple):
    t: int
    height: float
    phase_id: str = "A"
    half: str = POSITIVE


@dataclass
class HalfCyclePulseSet:
    pulses_t: np.ndarray
    pulses_f: np.ndarray
    n_real_peaks: int


def moving_average(x, window: int) -> np.ndarray:
    """Centered moving average that shrinks its window at the edges.

    Sample ``i`` averages ``x[i - window//2 : i + window - window//2]``
    clipped to the array bounds, so the output keeps the input length.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if window < 1:
        raise ValueError("window must be >= 1")
    if window > n:
        raise WindowTooLarge(f"window {window} exceeds signal length {n}")
    csum = np.concatenate(([0.0], np.cumsum(x)))
    idx = np.arange(n)
    lo = np.clip(idx - window // 2, 0, n)
    hi = np.clip(idx + window - window // 2, 0, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def find_phase_anchors(smoothed) -> PhaseAnchors:
    """Locate the 0 deg and 180 deg samples of one smoothed period.

    Crossings are searched circularly (the record is one full period).
    Index ``i`` is an up-crossing when ``s[i-1] < 0 <= s[i]`` and a
    down-crossing when ``s[i-1] >= 0 > s[i]``; among several candidates the
    one with the steepest first difference wins.
    """
    s = np.asarray(smoothed, dtype=np.float64)
    prev = np.roll(s, 1)
    grad = s - prev
    up = np.flatnonzero((prev < 0) & (s >= 0))
    down = np.flatnonzero((prev >= 0) & (s < 0))
    if up.size == 0 or down.size == 0:
        raise NoZeroCrossing("signal never changes sign; not a periodic AC record")
    idx0 = int(up[np.argmax(np.abs(grad[up]))])
    idx180 = int(down[np.argmax(np.abs(grad[down]))])
    return PhaseAnchors(idx0, idx180)


def phase_align(x, anchors: PhaseAnchors) -> np.ndarray:
    """Rotate ``x`` so that index 0 carries phase 0 deg."""
    return np.roll(np.asarray(x), -anchors.idx0)


def flatten_highpass(x_p, alpha=100.0, beta=1.0) -> np.ndarray:
    """Subtract a first-order tracker from ``x_p``.

    z[0] = x[0];  z[i] = z[i-1] (alpha - beta)/alpha + beta x[i]/alpha
    returns x - z.
    """
    x = np.asarray(x_p, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    a = (alpha - beta) / alpha
    b = beta / alpha
    z = np.empty_like(x)
    z[0] = x[0]
    if x.size > 1:
        z[1:], _ = lfilter([b], [1.0, -a], x[1:], zi=[a * x[0]])
    return x - z


def peak_mask(x_d, half_width: int) -> np.ndarray:
    """Boolean mask of local maxima over ``[i - half_width, i + half_width]``.

    A sample qualifies when it is positive, equals the window maximum and is
    strictly greater than every earlier sample in its window (so a plateau
    keeps only its leftmost index).
    """
    x = np.asarray(x_d, dtype=np.float64)
    if x.size == 0:
        return np.zeros(0, dtype=bool)
    win_max = maximum_filter1d(x, size=2 * half_width + 1, mode="constant", cval=0.0)
    left = _left_window_max(x, half_width) if half_width > 0 else np.zeros_like(x)
    return (x > 0) & (x == win_max) & (x > left)


def _left_window_max(x, k):
    """max(x[i-k : i]) with zeros outside the array."""
    padded = np.concatenate((np.zeros(k), x))
    centered = maximum_filter1d(padded, size=k, mode="constant", cval=0.0)
    # centered[c] spans padded[c - k//2 : c - k//2 + k]
    return centered[k // 2:k // 2 + x.size]


def detect_peaks(x_d, half_width: int, phase_id: str = "A", min_height: float = 0.0) -> List[Peak]:
    """Return peaks of the rectified signal in time order."""
    x = np.asarray(x_d, dtype=np.float64)
    mask = peak_mask(x, half_width)
    if min_height > 0:
        mask &= x > min_height
    n = x.size
    return [Peak(int(t), float(x[t]), phase_id, POSITIVE if t < n / 2 else NEGATIVE)
            for t in np.flatnonzero(mask)]


def sort_peaks(peaks: Sequence[Peak]) -> List[Peak]:
    """Descending |height|; ties by earlier t, then phase A < B < C."""
    return sorted(peaks, key=lambda p: (-abs(p.height), p.t, PHASES.index(p.phase_id)))


def smoothed_height_gradient(heights, L: int) -> np.ndarray:
    h = np.asarray(heights, dtype=np.float64)
    g = np.diff(h)
    v = np.arange(1, L + 1) / L
    return np.convolve(g, v / v.sum(), mode="same")


def knee_filter(peaks: Sequence[Peak], L: int = 9, knee_tau: float = 1e-3) -> List[Peak]:
    """Keep the peaks ranked before the knee of the sorted height curve.

    ``peaks`` must already be sorted by descending height.  The knee is the
    first rank whose smoothed height gradient magnitude is at most
    ``knee_tau`` times the largest one; if no rank qualifies every peak is
    kept.
    """
    peaks = list(peaks)
    if len(peaks) < 2:
        return peaks
    g = np.abs(smoothed_height_gradient([p.height for p in peaks], L))
    flat = np.flatnonzero(g <= knee_tau * g.max())
    if flat.size == 0:
        return peaks
    return peaks[:int(flat[0])]


def aggregate_three_phase(per_phase, n_peaks: int):
    """Pool per-phase peaks into the top ``n_peaks`` of each half-cycle.

    ``per_phase`` is an iterable of peak lists (any grouping works; each peak
    carries its own ``phase_id`` and ``half``).  Returns ``(pos, neg)``.
    """
    pos, neg = [], []
    for group in per_phase:
        for p in group:
            (pos if p.half == POSITIVE else neg).append(p)
    return sort_peaks(pos)[:n_peaks], sort_peaks(neg)[:n_peaks]


def extract_windows(x_hp, peaks: Sequence[Peak], w: int, n_peaks: int) -> np.ndarray:
    """Stack ``x_hp[phase][t - w/2 : t + w/2]`` per peak into an n_peaks x w matrix.

    ``x_hp`` maps phase id to signal (a bare array is used for every phase).
    Samples outside the signal and rows without a peak are zero.
    """
    out = np.zeros((n_peaks, w))
    half = w // 2
    for r, p in enumerate(peaks[:n_peaks]):
        sig = x_hp if isinstance(x_hp, np.ndarray) else x_hp[p.phase_id]
        lo, hi = p.t - half, p.t + half
        src_lo, src_hi = max(lo, 0), min(hi, sig.size)
        if src_hi > src_lo:
            out[r, src_lo - lo:src_hi - lo] = sig[src_lo:src_hi]
    return out


@dataclass
class PhaseTrace:
    """Intermediate signals of one phase, kept for inspection and tests."""

    anchors: PhaseAnchors
    x_hp: np.ndarray
    peaks: List[Peak]


def process_phase(x, cfg: PreprocessConfig, phase_id: str = "A") -> PhaseTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2 * cfg.ma_window:
        raise WindowTooLarge(
            f"signal of {x.size} samples is shorter than twice ma_window={cfg.ma_window}")
    smoothed = moving_average(x, cfg.ma_window)
    anchors = find_phase_anchors(smoothed)
    x_p = phase_align(x, anchors)
    x_hp = flatten_highpass(x_p, cfg.alpha, cfg.beta)
    x_d = np.abs(x_hp)
    min_height = cfg.min_height_rel * np.max(np.abs(smoothed))
    peaks = sort_peaks(detect_peaks(x_d, cfg.peak_half_width, phase_id, min_height))
    peaks = knee_filter(peaks, cfg.L, cfg.knee_tau)
    return PhaseTrace(anchors, x_hp, peaks)


def extract_pulse_sets(m: RawMeasurement, cfg: PreprocessConfig):
    """Run the per-phase chain and pool peaks; returns ``(pos_set, neg_set, traces)``."""
    traces = {ph: process_phase(m.samples[i], cfg, ph) for i, ph in enumerate(PHASES)}
    pos, neg = aggregate_three_phase([t.peaks for t in traces.values()], cfg.n_peaks)
    x_hp = {ph: t.x_hp for ph, t in traces.items()}
    sets = []
    for chosen in (pos, neg):
        sets.append(HalfCyclePulseSet(
            extract_windows(x_hp, chosen, cfg.w_t, cfg.n_peaks),
            extract_windows(x_hp, chosen, cfg.w_f, cfg.n_peaks),
            len(chosen)))
    return sets[0], sets[1], traces


def preprocess_measurement(m: RawMeasurement, cfg: PreprocessConfig = None) -> MeasurementFeatures:
    """Full chain from raw record to normalized network inputs."""
    from .timefreq import log_spectrogram, normalize_symmetric, normalize_unit

    cfg = cfg or PreprocessConfig()
    pos, neg, _ = extract_pulse_sets(m, cfg)
    return MeasurementFeatures(
        td_pos=normalize_symmetric(pos.pulses_t),
        td_neg=normalize_symmetric(neg.pulses_t),
        fd_pos=normalize_unit(log_spectrogram(pos.pulses_f)),
        fd_neg=normalize_unit(log_spectrogram(neg.pulses_f)),
        label=m.label, id=m.id,
        n_real_pos=pos.n_real_peaks, n_real_neg=neg.n_real_peaks)
