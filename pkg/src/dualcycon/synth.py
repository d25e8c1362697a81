"""Synthetic three-phase records with optional partial-discharge bursts.

A label-1 record carries clusters of exponentially damped oscillations near
a random phase angle in the positive half-cycle and, mirrored, 180 deg later
in the negative half-cycle of the same conductor.
"""

import os
from dataclasses import asdict, dataclass

import numpy as np

from .signal_io import (Manifest, ManifestEntry, RawMeasurement, write_manifest,
                        write_measurement)


@dataclass
class SynthConfig:
    n_samples: int = 80_000
    grid_freq: float = 50.0
    sample_rate: float = 0.0      # 0 -> n_samples * grid_freq (one period per record)
    amplitude: float = 1.0
    noise_std: float = 0.005
    pd_pulse_count: int = 4       # bursts per half-cycle per affected phase
    pd_amplitude: float = 0.3
    pd_phase_jitter_deg: float = 10.0
    damping: float = 2e-6         # burst e-folding time in seconds
    carrier_freq: float = 4e5
    seed: int = 0

    def __post_init__(self):
        if not self.sample_rate:
            self.sample_rate = self.n_samples * self.grid_freq
        if not 0 <= self.pd_phase_jitter_deg < 180:
            raise ValueError("pd_phase_jitter_deg must lie in [0, 180)")
        for name in ("n_samples", "grid_freq", "sample_rate", "amplitude",
                     "pd_pulse_count", "pd_amplitude", "damping", "carrier_freq"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.carrier_freq < 100 * self.grid_freq:
            raise ValueError("carrier_freq must be at least 100x the grid frequency")

    def to_dict(self):
        return asdict(self)


def _burst(cfg, rng_amp):
    dt = 1.0 / cfg.sample_rate
    length = max(4, int(np.ceil(8 * cfg.damping / dt)))
    t = np.arange(length) * dt
    return rng_amp * np.exp(-t / cfg.damping) * np.sin(2 * np.pi * cfg.carrier_freq * t)


def _angle_to_index(angle_deg, phase_offset, n):
    frac = ((np.deg2rad(angle_deg) - phase_offset) / (2 * np.pi)) % 1.0
    return int(round(frac * n)) % n


def gen_signal(label, cfg: SynthConfig = None, seed=None, id_=None) -> RawMeasurement:
    """One record; identical ``seed`` gives identical samples."""
    cfg = cfg or SynthConfig()
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    n = cfg.n_samples
    t = np.arange(n) / cfg.sample_rate
    theta0 = rng.uniform(0, 2 * np.pi)
    offsets = [theta0 - 2 * np.pi * k / 3 for k in range(3)]
    samples = np.stack([cfg.amplitude * np.sin(2 * np.pi * cfg.grid_freq * t + off)
                        for off in offsets])
    if cfg.noise_std > 0:
        samples += rng.normal(0.0, cfg.noise_std, samples.shape)
    if label == 1:
        affected = np.flatnonzero(rng.random(3) < 0.5)
        if affected.size == 0:
            affected = np.array([rng.integers(3)])
        jit = cfg.pd_phase_jitter_deg
        margin = jit + 5.0
        for ph in affected:
            phi = rng.uniform(margin, 180.0 - margin)
            # the first burst of each cluster is the strongest
            scales = np.concatenate(([1.0], rng.uniform(0.4, 0.8, cfg.pd_pulse_count - 1)))
            for s in scales:
                a = phi + rng.uniform(-jit, jit)
                b = a + 180.0 + rng.uniform(-jit, jit)
                burst = _burst(cfg, cfg.pd_amplitude * s)
                for angle, sign in ((a, 1.0), (b, -1.0)):
                    i0 = _angle_to_index(angle, offsets[ph], n)
                    idx = (i0 + np.arange(burst.size)) % n
                    samples[ph, idx] += sign * burst
    return RawMeasurement(id_ or f"synth{seed}", samples, int(label),
                          cfg.sample_rate, cfg.grid_freq)


def class_counts(n, pd_fraction):
    n_pos = int(np.floor(n * pd_fraction + 0.5))
    return n - n_pos, n_pos


def gen_dataset(n, pd_fraction, cfg: SynthConfig = None, out_dir=".", seed=None) -> Manifest:
    """Write ``n`` PDMS records and ``manifest.csv`` into ``out_dir``."""
    cfg = cfg or SynthConfig()
    if n < 2:
        raise ValueError("n must be at least 2")
    if not 0 < pd_fraction < 1:
        raise ValueError("pd_fraction must lie strictly between 0 and 1")
    seed = cfg.seed if seed is None else seed
    _, n_pos = class_counts(n, pd_fraction)
    labels = np.zeros(n, dtype=int)
    labels[np.random.default_rng(seed).permutation(n)[:n_pos]] = 1
    child_seeds = np.random.SeedSequence(seed).generate_state(n)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, (lab, s) in enumerate(zip(labels, child_seeds)):
        id_ = f"m{i:05d}"
        m = gen_signal(int(lab), cfg, int(s), id_)
        path = os.path.join(out_dir, id_ + ".pdms")
        write_measurement(path, m)
        entries.append(ManifestEntry(id_, path, int(lab)))
    manifest = Manifest(entries)
    write_manifest(os.path.join(out_dir, "manifest.csv"), manifest)
    return manifest
