"""Partial-discharge detection from three-phase conductor voltage records.

Raw records are turned into per-half-cycle pulse matrices in time and
frequency domain (:mod:`preprocess`, :mod:`timefreq`) and classified by a
dual-branch network trained with a cycle-consistency loss (:mod:`model`,
:mod:`training`) on a small numpy autograd engine (:mod:`engine`).
"""

__version__ = "0.1.0"
