"""Compression gain and throughput bookkeeping.

Compression gain is the squared-norm ratio of a compressed gradient to the
error-feedback-adjusted gradient it came from: close to 1 when the kept
entries carry nearly all the energy, small when compression trimmed too
much. Combined with system throughput (samples/second) it yields the single
scalar the controller maximizes: compression throughput.
"""

from __future__ import annotations

import math

from .compressors import SparseGradient
from .gradcore import EwmaTracker, GradientVector, squared_l2_norm


def compression_gain_raw(g_c: SparseGradient, g_ef: GradientVector | None,
                         ef_norm_sq: float | None = None) -> float:
    """Unclamped norm ratio ||g_c||^2 / ||g_ef||^2.

    The denominator may be passed precomputed. A zero-norm reference signals
    a vanished gradient and is an error; callers treat that iteration as a
    dense no-op.
    """
    if ef_norm_sq is None:
        if g_ef is None:
            raise ValueError("need either g_ef or its precomputed squared norm")
        ef_norm_sq = squared_l2_norm(g_ef)
    if ef_norm_sq <= 0.0:
        raise ValueError("zero-norm reference gradient: compression gain undefined")
    return squared_l2_norm(g_c.vals) / ef_norm_sq


def compression_gain(g_c: SparseGradient, g_ef: GradientVector | None,
                     ef_norm_sq: float | None = None) -> float:
    """Gain clamped into (0, 1]; identity compression gives exactly 1.0."""
    return min(1.0, compression_gain_raw(g_c, g_ef, ef_norm_sq))


class GainTracker:
    """Per-CF EWMA of compression gains.

    Each compression factor keeps its own tracker so the minimum and
    candidate CFs can be compared concurrently. CF 1 (dense) is pinned to a
    constant gain of 1.0.
    """

    def __init__(self, lam: float):
        self.lam = float(lam)
        self._trackers: dict[float, EwmaTracker] = {}

    def observe(self, cf: float, raw_gain: float) -> float:
        cf = float(cf)
        if cf == 1.0:
            return 1.0
        gain = min(1.0, float(raw_gain))
        tracker = self._trackers.get(cf)
        if tracker is None:
            tracker = self._trackers[cf] = EwmaTracker(self.lam)
        return tracker.update(gain)

    def value(self, cf: float) -> float:
        cf = float(cf)
        if cf == 1.0:
            return 1.0
        return self._trackers[cf].value

    def has(self, cf: float) -> bool:
        cf = float(cf)
        return cf == 1.0 or (cf in self._trackers and self._trackers[cf].initialized)


class ThroughputTable:
    """Latest system and compression throughput per CF (overwrite on update)."""

    def __init__(self):
        self.t_sys: dict[float, float] = {}
        self.t_compress: dict[float, float] = {}

    def top_two(self):
        """The two largest compression-throughput entries as ((cf, v), (cf, v)).

        Sorted by value descending; equal values order by CF descending so
        the second (the one the saturation rule picks) is the lower CF.
        Returns None with fewer than two entries.
        """
        if len(self.t_compress) < 2:
            return None
        ranked = sorted(self.t_compress.items(), key=lambda kv: (-kv[1], -kv[0]))
        return ranked[0], ranked[1]


def update_step(table: ThroughputTable, cf: float, gain: float, t_iter: float,
                workers: int, batch_size: int) -> ThroughputTable:
    """Record system throughput N*b/t_iter and compression throughput for cf."""
    if t_iter <= 0.0 or not math.isfinite(t_iter):
        raise ValueError(f"iteration time must be positive, got {t_iter}")
    if not (0.0 < gain <= 1.0):
        raise ValueError(f"gain must be in (0, 1], got {gain}")
    if cf < 1.0:
        raise ValueError(f"compression factor must be >= 1, got {cf}")
    t_sys = workers * batch_size / t_iter
    cf = float(cf)
    table.t_sys[cf] = t_sys
    table.t_compress[cf] = t_sys * gain
    return table


def scaling_efficiency(throughput_n: float, throughput_1: float, workers: int) -> float:
    """Measured-over-ideal throughput: T_N / (N * T_1)."""
    if throughput_1 <= 0.0:
        raise ValueError(f"single-worker throughput must be positive, got {throughput_1}")
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    return throughput_n / (workers * throughput_1)
