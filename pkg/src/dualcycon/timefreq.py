"""Log-spectrograms of pulse windows and input scaling.

Every pulse window is its own STFT frame (no hop, no overlap), so the
spectrogram of an N_p x w_f pulse matrix is simply a row-wise windowed real
DFT.
"""

import numpy as np

from .errors import LengthMismatch

LOG_EPS = 1e-12


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window, ``0.5 - 0.5 cos(2 pi m / n)``."""
    if n < 2:
        raise ValueError("window length must be >= 2")
    m = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * m / n)


def stft_frame(segment, window) -> np.ndarray:
    """Windowed DFT of one frame, bins ``0 .. n/2``."""
    segment = np.asarray(segment)
    window = np.asarray(window, dtype=np.float64)
    if segment.shape[-1] != window.shape[0]:
        raise LengthMismatch(
            f"segment length {segment.shape[-1]} != window length {window.shape[0]}")
    return np.fft.rfft(segment * window, axis=-1)


def log_spectrogram(pulses_f) -> np.ndarray:
    """Row-wise ``log(|STFT|^2 + eps)`` of an N_p x w_f matrix."""
    pulses_f = np.asarray(pulses_f, dtype=np.float64)
    spectrum = stft_frame(pulses_f, hann_window(pulses_f.shape[-1]))
    return np.log(spectrum.real ** 2 + spectrum.imag ** 2 + LOG_EPS)


def normalize_symmetric(m) -> np.ndarray:
    """Min-max scale the whole matrix onto [-1, 1]; a constant matrix maps to 0."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return np.clip(2.0 * (m - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def normalize_unit(m) -> np.ndarray:
    """Min-max scale the whole matrix onto [0, 1]; a constant matrix maps to 0."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return np.clip((m - lo) / (hi - lo), 0.0, 1.0)
