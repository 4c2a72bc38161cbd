"""Rule-modulating block: heart-rhythm voting over a feature map.

From the peak channel of a feature map we pick prominent R-peak candidates,
estimate the mean R-R interval (HR, in seconds) and its spread (SDNN), then
score every time point by the evidence found at integer multiples of HR on
either side. All distances and widths are in samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import PreconditionError, UsageError

RR_MIN_S = 0.3
RR_MAX_S = 1.5
Z_CUTOFF = 3.0
MAX_ORDER = 3  # per side, six regions in total
MIN_WIDTH = 3
CANDIDATE_THRESHOLD = 0.5
CANDIDATE_MIN_SEP_S = 0.3

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class Rhythm:
    hr_s: float = float("nan")
    sdnn_s: float = float("nan")
    valid: bool = False


@dataclass(frozen=True)
class SupportRegion:
    center: float
    width: float
    order: int

    def window(self, length: int) -> tuple[int, int] | None:
        """Inclusive sample bounds of the region clipped to [0, length), or None if empty."""
        lo = max(math.ceil(self.center - self.width / 2), 0)
        hi = min(math.floor(self.center + self.width / 2), length - 1)
        return (lo, hi) if lo <= hi else None


def pick_candidates(f_pos, threshold=CANDIDATE_THRESHOLD, min_sep_s=CANDIDATE_MIN_SEP_S,
                    fs=125.0) -> np.ndarray:
    """Local maxima above ``threshold``, thinned greedily from the highest down.

    A candidate is dropped when it lies closer than ``min_sep_s`` to a kept,
    higher-valued one. Returns sorted sample indices.
    """
    if not 0 < threshold < 1:
        raise PreconditionError("threshold must lie in (0, 1)")
    if min_sep_s <= 0:
        raise PreconditionError("min_sep_s must be positive")
    f = np.asarray(f_pos, dtype=np.float64)
    if f.size == 0:
        return np.zeros(0, dtype=np.int64)
    padded = np.concatenate([[-np.inf], f, [-np.inf]])
    # rising into i, not rising out of it: a plateau yields its first sample
    is_peak = (padded[1:-1] > padded[:-2]) & (padded[1:-1] >= padded[2:]) & (f > threshold)
    cand = np.flatnonzero(is_peak)
    order = cand[np.lexsort((cand, -f[cand]))]
    min_sep = min_sep_s * fs
    kept: list[int] = []
    for i in order:
        if all(abs(i - k) >= min_sep for k in kept):
            kept.append(int(i))
    return np.array(sorted(kept), dtype=np.int64)


def estimate_rhythm(peaks, fs=125.0) -> Rhythm:
    """Mean and SDNN of R-R intervals after range limits and a 3-sigma trim."""
    peaks = np.asarray(peaks, dtype=np.float64)
    if peaks.size < 3:
        return Rhythm()
    z = np.diff(peaks) / fs
    z = z[(z >= RR_MIN_S) & (z <= RR_MAX_S)]
    if z.size < 2:
        return Rhythm()
    mu, sd = _mean_std(z)
    if sd > 0:
        z = z[np.abs(z - mu) <= Z_CUTOFF * sd]
        if z.size < 2:
            return Rhythm()
        mu, sd = _mean_std(z)
    return Rhythm(mu, sd, True)


def _mean_std(z):
    # exactly rounded sums: the result must not depend on interval order
    mu = math.fsum(z) / z.size
    sd = math.sqrt(math.fsum((z - mu) ** 2) / (z.size - 1))
    return mu, sd


def region_widths(rhythm: Rhythm, fs=125.0) -> list[float]:
    """Widths for orders 1..3, rounded half-up with a floor of MIN_WIDTH samples."""
    return [max(MIN_WIDTH, math.floor(6.0 * math.sqrt(k) * rhythm.sdnn_s * fs + 0.5))
            for k in range(1, MAX_ORDER + 1)]


def usable_orders(rhythm: Rhythm, fs=125.0) -> int:
    """Number of orders per side before neighbouring regions would overlap."""
    widths = region_widths(rhythm, fs)
    spacing = rhythm.hr_s * fs
    n = 1
    while n < MAX_ORDER and widths[n] / 2 + widths[n - 1] / 2 <= spacing:
        n += 1
    return n


def support_regions(t: int, rhythm: Rhythm, length: int, fs=125.0) -> list[SupportRegion]:
    if not rhythm.valid:
        raise UsageError("support regions need a valid rhythm; use R_t = 0 instead")
    widths = region_widths(rhythm, fs)
    spacing = rhythm.hr_s * fs
    regions = []
    for sign in (-1, 1):
        for k in range(1, usable_orders(rhythm, fs) + 1):
            r = SupportRegion(t + sign * k * spacing, widths[k - 1], k)
            if r.window(length) is not None:
                regions.append(r)
    return regions


def vote(f_pos, regions) -> float:
    """Confidence-weighted mean of the region maxima, weighted by 1/width."""
    if not regions:
        return 0.0
    f = np.asarray(f_pos, dtype=np.float64)
    num = den = 0.0
    for r in regions:
        if r.width <= 0:
            raise PreconditionError("region widths must be positive")
        lo, hi = r.window(f.size)
        seg = f[lo:hi + 1]
        a = lo + int(np.argmax(seg))
        w = math.exp(-((a - r.center) ** 2) / (2.0 * r.width ** 2)) / (_SQRT_2PI * r.width)
        num += w * seg[a - lo] / r.width
        den += 1.0 / r.width
    return num / den


def rule_map(f_pos, rhythm: Rhythm, fs=125.0) -> np.ndarray:
    """Vectorized R_t for every t under a fixed rhythm."""
    f = np.asarray(f_pos, dtype=np.float64)
    length = f.size
    if not rhythm.valid or length == 0:
        return np.zeros(length)
    widths = region_widths(rhythm, fs)
    spacing = rhythm.hr_s * fs
    t = np.arange(length)
    num = np.zeros(length)
    den = np.zeros(length)
    for sign in (-1, 1):
        for k in range(1, usable_orders(rhythm, fs) + 1):
            width = widths[k - 1]
            offset = sign * k * spacing
            # window start/end relative to t; ceil/floor commute with integer shifts
            a_lo = math.ceil(offset - width / 2)
            a_hi = math.floor(offset + width / 2)
            if a_hi < a_lo:
                continue
            span = a_hi - a_lo + 1
            lo = t + a_lo
            hi = t + a_hi
            present = (hi >= 0) & (lo <= length - 1)
            if not present.any():
                continue
            # -inf padding keeps out-of-range samples from winning the max
            pad_left = max(0, -a_lo)
            pad_right = max(0, a_hi)
            padded = np.concatenate([np.full(pad_left, -np.inf), f, np.full(pad_right, -np.inf)])
            windows = sliding_window_view(padded, span)
            start = t + a_lo + pad_left
            win = windows[start]
            rel = np.argmax(win, axis=1)
            m = np.where(present, win[np.arange(length), rel], 0.0)
            pos = t + a_lo + rel
            center = t + offset
            w = np.exp(-((pos - center) ** 2) / (2.0 * width ** 2)) / (_SQRT_2PI * width)
            num += np.where(present, w * m / width, 0.0)
            den += np.where(present, 1.0 / width, 0.0)
    out = np.zeros(length)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def rule_modulate(feature_map, fs=125.0, threshold=CANDIDATE_THRESHOLD,
                  min_sep_s=CANDIDATE_MIN_SEP_S) -> np.ndarray:
    """Rule-modulated map R from a 2-channel (background, peak) feature map."""
    fm = np.asarray(feature_map, dtype=np.float64)
    f_pos = fm[1] if fm.ndim == 2 else fm
    rhythm = estimate_rhythm(pick_candidates(f_pos, threshold, min_sep_s, fs), fs)
    return rule_map(f_pos, rhythm, fs)
