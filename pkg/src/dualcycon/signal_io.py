"""Readers and writers for raw measurements, manifests and cached features.

Three little-endian on-disk formats are handled here:

``PDMS`` raw measurement
    ``b"PDMS"``, ``u32 n_samples``, then ``3 * n_samples`` float32 values,
    phase-major (all of phase A, then B, then C).

``PDCF`` feature file
    ``b"PDCF"``, ``u16 version``, ``u32 n_peaks``, ``u32 w_t``, ``u32 f_bins``,
    then the float32 matrices ``td_pos``, ``td_neg`` (n_peaks x w_t),
    ``fd_pos``, ``fd_neg`` (n_peaks x f_bins) in C order, then ``u8 label``.

Manifest CSV
    Header ``id,path,label``; relative paths resolve against the manifest's
    directory.

Values are stored as float32 and promoted to float64 when read.
"""

import csv
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import (BadMagic, DimMismatch, DuplicateId, MalformedRow,
                     MissingFile, NonFiniteSample, TruncatedPayload)

RAW_MAGIC = b"PDMS"
FEATURE_MAGIC = b"PDCF"
FEATURE_VERSION = 1

_RAW_HEADER = struct.Struct("<4sI")
_FEATURE_HEADER = struct.Struct("<4sHIII")

DEFAULT_N_SAMPLES = 800_000
DEFAULT_SAMPLE_RATE_HZ = 4.0e7
DEFAULT_GRID_FREQ_HZ = 50.0


@dataclass
class RawMeasurement:
    """One grid period of a three-phase recording."""

    id: str
    samples: np.ndarray  # (3, n_samples) float64
    label: int
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ
    grid_freq_hz: float = DEFAULT_GRID_FREQ_HZ

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] != 3:
            raise DimMismatch(
                f"expected samples of shape (3, n), got {self.samples.shape}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class ManifestEntry:
    id: str
    path: str
    label: int


@dataclass
class Manifest:
    entries: List[ManifestEntry] = field(default_factory=list)

    @property
    def counts(self) -> Dict[int, int]:
        c = Counter(e.label for e in self.entries)
        return {0: c.get(0, 0), 1: c.get(1, 0)}

    @property
    def labels(self) -> List[int]:
        return [e.label for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass
class MeasurementFeatures:
    """Network inputs for one measurement.

    ``td_*`` are N_p x w_t pulse matrices scaled to [-1, 1], ``fd_*`` are
    N_p x (w_f/2 + 1) log-spectrograms scaled to [0, 1].
    """

    td_pos: np.ndarray
    td_neg: np.ndarray
    fd_pos: np.ndarray
    fd_neg: np.ndarray
    label: int
    id: str = ""
    n_real_pos: Optional[int] = None
    n_real_neg: Optional[int] = None

    @property
    def n_peaks(self) -> int:
        return self.td_pos.shape[0]

    @property
    def w_t(self) -> int:
        return self.td_pos.shape[1]

    @property
    def f_bins(self) -> int:
        return self.fd_pos.shape[1]

    def swapped(self) -> "MeasurementFeatures":
        """Same measurement with positive and negative half-cycles exchanged."""
        return MeasurementFeatures(self.td_neg, self.td_pos, self.fd_neg,
                                   self.fd_pos, self.label, self.id,
                                   self.n_real_neg, self.n_real_pos)


# -- manifest ---------------------------------------------------------------

def load_manifest(path) -> Manifest:
    """Parse an ``id,path,label`` CSV into a :class:`Manifest`."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingFile(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "path", "label"]:
            raise MalformedRow(1, "header must be 'id,path,label'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise MalformedRow(lineno, f"expected 3 fields, got {len(row)}")
            id_, rel, lab = (c.strip() for c in row)
            if not id_ or not rel:
                raise MalformedRow(lineno, "empty id or path")
            if lab not in ("0", "1"):
                raise MalformedRow(lineno, f"label must be 0 or 1, got {lab!r}")
            if id_ in seen:
                raise DuplicateId(id_)
            seen.add(id_)
            full = rel if os.path.isabs(rel) else os.path.join(base, rel)
            entries.append(ManifestEntry(id_, full, int(lab)))
    return Manifest(entries)


def write_manifest(path, manifest: Manifest):
    """Write ``manifest``; paths are stored relative to the manifest directory."""
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "path", "label"])
        for e in manifest.entries:
            rel = os.path.relpath(os.path.abspath(e.path), base)
            w.writerow([e.id, rel, e.label])


# -- raw measurements -------------------------------------------------------

def _check_finite(arr):
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise NonFiniteSample(int(bad[0]))


def read_measurement(path, meta: Optional[ManifestEntry] = None,
                     sample_rate_hz=DEFAULT_SAMPLE_RATE_HZ,
                     grid_freq_hz=DEFAULT_GRID_FREQ_HZ) -> RawMeasurement:
    """Load a PDMS binary or a 3-column CSV file.

    The format is sniffed from the first four bytes; anything that is not
    PDMS must carry a ``.csv`` suffix.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingFile(f"measurement not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == RAW_MAGIC:
        samples = _read_pdms(path)
    elif path.lower().endswith(".csv"):
        samples = _read_csv(path)
    else:
        raise BadMagic(f"{path}: expected magic {RAW_MAGIC!r}, got {head!r}")
    _check_finite(samples)
    id_ = meta.id if meta is not None else os.path.splitext(os.path.basename(path))[0]
    label = meta.label if meta is not None else 0
    return RawMeasurement(id_, samples, label, sample_rate_hz, grid_freq_hz)


def _read_pdms(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _RAW_HEADER.size:
        raise TruncatedPayload(f"{path}: header truncated")
    _, n = _RAW_HEADER.unpack_from(buf)
    expected = 3 * n * 4
    payload = len(buf) - _RAW_HEADER.size
    if payload < expected:
        raise TruncatedPayload(
            f"{path}: header declares {expected} payload bytes, found {payload}")
    if payload > expected:
        raise DimMismatch(
            f"{path}: {payload - expected} trailing bytes after declared payload")
    data = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=_RAW_HEADER.size)
    return data.reshape(3, n).astype(np.float64)


def _read_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 3:
                raise MalformedRow(lineno, f"expected 3 columns, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise MalformedRow(lineno, str(exc)) from None
    # float32 round-trip so CSV and PDMS give identical arrays for identical content
    arr = np.asarray(rows, dtype=np.float32).reshape(-1, 3)
    return arr.T.astype(np.float64)


def write_measurement(path, m: RawMeasurement):
    """Write ``m`` in PDMS format."""
    data = np.ascontiguousarray(m.samples, dtype="<f4")
    _check_finite(data)
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(RAW_MAGIC, m.n_samples))
        fh.write(data.tobytes())


def write_measurement_csv(path, m: RawMeasurement):
    np.savetxt(path, m.samples.T.astype(np.float32), delimiter=",", fmt="%.9g")


# -- feature files ----------------------------------------------------------

def feature_file_size(n_peaks, w_t, f_bins) -> int:
    return _FEATURE_HEADER.size + 2 * (n_peaks * w_t + n_peaks * f_bins) * 4 + 1


def write_features(path, features: MeasurementFeatures):
    n_p, w_t = features.td_pos.shape
    f_bins = features.fd_pos.shape[1]
    mats = [features.td_pos, features.td_neg, features.fd_pos, features.fd_neg]
    shapes = [(n_p, w_t), (n_p, w_t), (n_p, f_bins), (n_p, f_bins)]
    for name, mat, shape in zip(("td_pos", "td_neg", "fd_pos", "fd_neg"), mats, shapes):
        if np.shape(mat) != shape:
            raise DimMismatch(f"{name} has shape {np.shape(mat)}, header says {shape}")
        _check_finite(np.asarray(mat))
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n_p, w_t, f_bins))
        for mat in mats:
            fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())
        fh.write(struct.pack("<B", int(features.label)))


def read_features(path) -> MeasurementFeatures:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingFile(f"feature file not found: {path}")
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _FEATURE_HEADER.size:
        raise TruncatedPayload(f"{path}: header truncated")
    magic, version, n_p, w_t, f_bins = _FEATURE_HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise BadMagic(f"{path}: expected magic {FEATURE_MAGIC!r}, got {magic!r}")
    if version != FEATURE_VERSION:
        raise BadMagic(f"{path}: unsupported feature version {version}")
    if len(buf) != feature_file_size(n_p, w_t, f_bins):
        raise DimMismatch(
            f"{path}: header ({n_p}, {w_t}, {f_bins}) implies "
            f"{feature_file_size(n_p, w_t, f_bins)} bytes, file has {len(buf)}")
    off = _FEATURE_HEADER.size
    mats = []
    for cols in (w_t, w_t, f_bins, f_bins):
        count = n_p * cols
        mats.append(np.frombuffer(buf, "<f4", count, off).reshape(n_p, cols).astype(np.float64))
        off += 4 * count
    label = buf[off]
    id_ = os.path.splitext(os.path.basename(path))[0]
    return MeasurementFeatures(*mats, label=int(label), id=id_)
