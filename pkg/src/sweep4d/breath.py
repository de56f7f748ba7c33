"""Self-supervision signal: smoothed reference, NCC series, peaks, pseudo labels.

The respiratory "phase" used throughout the package is a normalized
respiratory level in [0, 1): 0 at the exhale extreme, approaching 1 at the
inhale extreme.  The discrete state is ``floor(phase * K)``, so states are
K equal-width amplitude bins.  NCC peaks against the time-averaged
reference mark the mid-level (average-state) crossings; consecutive peaks
delimit half breathing cycles, alternately passing through the inhale and
the exhale extreme.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

from .errors import DataError
from .volume import SliceStack

#: phase is kept strictly below 1 so floor(phase*K) stays within [0, K)
_PHASE_EPS = 1e-9


@dataclass(frozen=True)
class NccSeries:
    """Per-slice NCC against the smoothed reference."""

    values: np.ndarray  # (T,), in [-1, 1]
    smoothing_sigma_slices: float
    degenerate: np.ndarray = None  # (T,) bool; True where a slice had zero variance

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(np.abs(v) > 1 + 1e-9):
            raise DataError("NCC values must lie in [-1, 1]")
        if self.smoothing_sigma_slices <= 0:
            raise DataError("smoothing sigma must be positive")
        if self.degenerate is None:
            object.__setattr__(self, "degenerate", np.zeros(len(v), dtype=bool))

    @property
    def T(self) -> int:
        return len(self.values)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "value"])
            for t, v in enumerate(self.values):
                w.writerow([t, float(v)])


@dataclass(frozen=True)
class PeakSet:
    """Sorted NCC local-maximum indices respecting a minimum separation."""

    peak_indices: np.ndarray
    min_separation_slices: int
    # sub-sample peak positions from parabolic refinement; defaults to the
    # integer indices when no refinement was done
    refined_positions: np.ndarray | None = None

    def __post_init__(self):
        idx = np.asarray(self.peak_indices, dtype=int)
        if len(idx) and np.any(np.diff(idx) < self.min_separation_slices):
            raise DataError("peaks violate the minimum separation")
        if len(idx) and np.any(np.diff(idx) <= 0):
            raise DataError("peak indices must be strictly increasing")
        if self.min_separation_slices < 1:
            raise DataError("min_separation must be >= 1")
        if self.refined_positions is None:
            object.__setattr__(self, "refined_positions", idx.astype(float))
        elif len(self.refined_positions) != len(idx):
            raise DataError("refined positions must match peak count")


@dataclass(frozen=True)
class RespiratoryLabeling:
    """Per-slice respiratory state with its continuous phase and provenance."""

    states: np.ndarray  # (T,) ints in [0, K)
    num_states: int
    phase: np.ndarray  # (T,) floats in [0, 1)
    source: str  # "pseudo" | "srnn" | "ground_truth"

    def __post_init__(self):
        s = np.asarray(self.states, dtype=int)
        p = np.asarray(self.phase, dtype=float)
        if self.num_states < 2 and self.source != "ground_truth":
            raise DataError("num_states must be >= 2")
        if np.any(s < 0) or np.any(s >= max(self.num_states, 1)):
            raise DataError("states out of range")
        if np.any(p < 0) or np.any(p >= 1):
            raise DataError("phase must lie in [0, 1)")
        if not np.array_equal(np.floor(p * self.num_states).astype(int), s):
            raise DataError("states inconsistent with phase binning")

    @property
    def T(self) -> int:
        return len(self.states)

    @classmethod
    def from_states(cls, states, num_states, source):
        states = np.asarray(states, dtype=int)
        phase = (states + 0.5) / num_states
        return cls(states=states, num_states=num_states, phase=phase, source=source)


def write_labels(labeling: RespiratoryLabeling, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(
            {
                "states": [int(s) for s in labeling.states],
                "num_states": int(labeling.num_states),
                "source": labeling.source,
            },
            fh,
        )


def read_labels(path) -> RespiratoryLabeling:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing labels file {path}")
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt labels file {path}: {exc}") from exc
    return RespiratoryLabeling.from_states(
        obj["states"], int(obj["num_states"]), obj.get("source", "pseudo")
    )


# ---------------------------------------------------------------------------
# reference volume and NCC


def gaussian_reference(stack: SliceStack, sigma_slices: float) -> SliceStack:
    """Smooth the stack along the acquisition axis with a truncated Gaussian.

    The kernel is truncated at 4 sigma and renormalized at the boundaries, so
    every output slice is a convex combination of input slices.  In-plane
    content is untouched.  The result approximates the average respiratory
    state when sigma covers at least half a breathing cycle.
    """
    if sigma_slices <= 0:
        raise DataError("sigma must be positive")
    if stack.T < 3:
        raise DataError("need at least 3 slices to build a reference")
    radius = int(np.floor(4.0 * sigma_slices))
    if radius == 0:
        return stack
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma_slices) ** 2)
    data = stack.data.astype(np.float64)
    num = ndimage.convolve1d(data, kernel[::-1], axis=0, mode="constant", cval=0.0)
    den = ndimage.convolve1d(
        np.ones(stack.T), kernel[::-1], mode="constant", cval=0.0
    )
    smoothed = num / den[:, None, None]
    return SliceStack(
        data=smoothed.astype(np.float32),
        dx=stack.dx,
        dy=stack.dy,
        z_positions=stack.z_positions,
        acq_times=stack.acq_times,
        slice_thickness=stack.slice_thickness,
    )


def ncc(a, b) -> float:
    """Pearson correlation of two equally shaped images (0 if degenerate)."""
    value, _ = ncc_flagged(a, b)
    return value


def ncc_flagged(a, b):
    """NCC plus a flag marking zero-variance (degenerate) inputs."""
    x = np.asarray(getattr(a, "data", a), dtype=np.float64).ravel()
    y = np.asarray(getattr(b, "data", b), dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DataError(f"NCC shape mismatch: {x.shape} vs {y.shape}")
    x = x - x.mean()
    y = y - y.mean()
    nx = np.sqrt(np.dot(x, x))
    ny = np.sqrt(np.dot(y, y))
    if nx == 0.0 or ny == 0.0:
        return 0.0, True
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0)), False


def ncc_series(stack: SliceStack, reference: SliceStack, sigma_slices=None) -> NccSeries:
    """NCC of every slice against the matching reference slice."""
    if stack.T != reference.T or stack.data.shape != reference.data.shape:
        raise DataError("stack/reference dims mismatch")
    a = stack.data.reshape(stack.T, -1).astype(np.float64)
    b = reference.data.reshape(stack.T, -1).astype(np.float64)
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    degenerate = (na == 0) | (nb == 0)
    denom = np.where(degenerate, 1.0, na * nb)
    values = np.clip(np.einsum("ti,ti->t", a, b) / denom, -1.0, 1.0)
    values[degenerate] = 0.0
    if sigma_slices is None:
        sigma_slices = 1.0
    return NccSeries(values=values, smoothing_sigma_slices=float(sigma_slices),
                     degenerate=degenerate)


def estimate_reference_sigma(stack: SliceStack, candidates=None) -> float:
    """Default smoothing sigma: roughly half the breathing period in slices.

    Rather than estimate the period directly (autocorrelation is unreliable
    for irregular breathing), each candidate sigma is scored by running the
    full reference/series/peak chain and measuring the regularity of the
    peak spacing.  A reference that still tracks the breathing produces
    shallow, erratic dips; one smoothed over at least half a cycle yields
    evenly spaced peaks.  The peak count is the anchor: it is stable over
    the range of workable sigmas (one peak per half-cycle regardless of
    smoothing) but collapses once the separation constraint starts merging
    peaks, so candidates are restricted to count-stable neighbour pairs and
    the one with the most regular spacing wins.
    """
    if candidates is None:
        candidates, c = [], 3.0
        while c <= stack.T / 8.0:
            candidates.append(c)
            c *= 2.0
    scored: list[tuple[float, int, float]] = []  # (sigma, n_peaks, cv)
    for sigma in candidates:
        ref = gaussian_reference(stack, sigma)
        series = ncc_series(stack, ref, sigma)
        try:
            peaks = detect_peaks(series, max(2, int(round(0.6 * sigma))))
        except DataError:
            continue
        p = peaks.peak_indices
        if len(p) < 5:
            continue
        spacing = np.diff(p)
        cv = float(spacing.std() / spacing.mean())
        scored.append((float(sigma), len(p), cv))
    if not scored:
        return max(stack.T / 10.0, 1.0)
    stable: set[float] = set()
    for (s1, n1, _), (s2, n2, _) in zip(scored[:-1], scored[1:]):
        if abs(n1 - n2) <= 0.25 * max(n1, n2):
            stable.update((s1, s2))
    pool = [(cv, sigma) for sigma, _, cv in scored if sigma in stable]
    if not pool:
        pool = [(cv, sigma) for sigma, _, cv in scored]
    sigma = min(pool)[1]
    # refine: with peaks at every half-cycle crossing, their median spacing
    # *is* the half period, which is a finer estimate than the coarse grid
    ref = gaussian_reference(stack, sigma)
    series = ncc_series(stack, ref, sigma)
    try:
        peaks = detect_peaks(series, max(2, int(round(0.6 * sigma))))
    except DataError:
        return sigma
    if len(peaks.peak_indices) < 5:
        return sigma
    refined = float(np.median(np.diff(peaks.peak_indices)))
    if 0.5 * sigma <= refined <= 2.0 * sigma:
        return refined
    return sigma


# ---------------------------------------------------------------------------
# peak analysis


def detect_peaks(series: NccSeries, min_separation: int, min_prominence=None) -> PeakSet:
    """Local maxima of the (lightly smoothed) NCC series.

    Candidates are strict local maxima (plateaus count once, at their left
    edge), kept greedily in descending prominence order subject to the
    separation constraint; equal prominences keep the lower index.
    """
    if min_separation < 1:
        raise DataError("min_separation must be >= 1")
    values = np.asarray(series.values, dtype=float)
    T = len(values)
    if T < 2 * min_separation:
        raise DataError("series too short for the requested separation")
    # 3-tap moving average suppresses single-slice noise before peak picking
    smooth = np.convolve(values, np.ones(3) / 3.0, mode="same")
    smooth[0] = values[0]
    smooth[-1] = values[-1]
    if min_prominence is None:
        # robust amplitude scale: a single deep trough (slice near a strong
        # z-boundary) would inflate max-min and mask every genuine peak
        p10, p90 = np.percentile(smooth, [10, 90])
        min_prominence = 0.10 * (p90 - p10)

    candidates = _plateau_maxima(smooth)
    if len(candidates) == 0:
        raise DataError("no respiratory signal detected")
    prominences = signal.peak_prominences(smooth, candidates)[0]
    keep_mask = prominences >= min_prominence
    candidates = candidates[keep_mask]
    prominences = prominences[keep_mask]
    if len(candidates) == 0:
        raise DataError("no respiratory signal detected")

    order = np.lexsort((candidates, -prominences))
    kept: list[int] = []
    for i in order:
        c = int(candidates[i])
        if all(abs(c - k) >= min_separation for k in kept):
            kept.append(c)
    kept.sort()
    kept_arr = np.asarray(kept, dtype=int)
    # parabolic sub-sample refinement: fit a quadratic through the peak and
    # its neighbours to undo the half-slice quantization of the maximum
    refined = kept_arr.astype(float)
    for n, c in enumerate(kept_arr):
        if 0 < c < T - 1:
            denom = smooth[c - 1] - 2.0 * smooth[c] + smooth[c + 1]
            if denom < 0:
                delta = 0.5 * (smooth[c - 1] - smooth[c + 1]) / denom
                refined[n] = c + float(np.clip(delta, -0.5, 0.5))
    return PeakSet(peak_indices=kept_arr,
                   min_separation_slices=min_separation,
                   refined_positions=refined)


def _plateau_maxima(x: np.ndarray) -> np.ndarray:
    """Indices of strict local maxima; a maximal plateau yields its left edge."""
    out = []
    T = len(x)
    i = 1
    while i < T - 1:
        if x[i] > x[i - 1]:
            j = i
            while j + 1 < T and x[j + 1] == x[i]:
                j += 1
            if j + 1 < T and x[j + 1] < x[i]:
                out.append(i)
            i = j + 1
        else:
            i += 1
    return np.asarray(out, dtype=int)


# ---------------------------------------------------------------------------
# pseudo labels


def pseudo_labels(series: NccSeries, peaks: PeakSet, K: int) -> RespiratoryLabeling:
    """Phase assignment by half-sinusoid interpolation between NCC peaks.

    Peaks sit at the average-state crossings (phase 0.5).  Between two
    consecutive peaks the phase follows a half sinusoid to the extreme at
    the gap midpoint (1 on inhale-side gaps, 0 on exhale-side gaps): for a
    sinusoidal breathing trace sampled uniformly in time this reproduces
    the true respiratory level exactly, whereas a linear ramp would
    misclassify the slow turnaround near the extremes.  Gap
    parity decides which extreme: the parity class with the deeper mean NCC
    trough is the inhale side, since the reference sits closer to exhale.
    Slices before the first and after the last peak reuse the adjacent gap's
    geometry, clamped to [0, 1).
    """
    if K < 2:
        raise DataError("K must be >= 2")
    p = np.asarray(peaks.refined_positions, dtype=float)
    if len(p) < 2:
        raise DataError("need at least 2 NCC peaks to assign phases")
    values = np.asarray(series.values, dtype=float)
    T = len(values)

    p = _repair_missed_peaks(p)
    inhale_even = _inhale_parity_is_even(values, np.round(p).astype(int))

    # virtual peaks outside the series keep the extrapolation on the
    # adjacent half-cycle's rate
    first_gap = p[1] - p[0]
    last_gap = p[-1] - p[-2]
    p_ext = np.concatenate(([p[0] - first_gap], p, [p[-1] + last_gap]))
    # gap i of p_ext spans [p_ext[i], p_ext[i+1]); its parity equals
    # (i - 1) relative to the original gap numbering
    phase = np.empty(T, dtype=float)
    t = np.arange(T)
    n_gaps = len(p_ext) - 1
    for i in range(n_gaps):
        lo, hi = p_ext[i], p_ext[i + 1]
        if i == 0:
            sel = t < hi  # everything before the first real peak
        elif i == n_gaps - 1:
            sel = t >= lo  # everything from the last real peak on
        else:
            sel = (t >= lo) & (t < hi)
        if not np.any(sel):
            continue
        u = np.clip((t[sel] - lo) / float(hi - lo), 0.0, 1.0 - 1e-12)
        arc = np.sin(np.pi * u)  # 0 at peaks, 1 at gap midpoint
        gap_parity_even = ((i - 1) % 2) == 0
        inhale = gap_parity_even == inhale_even
        if inhale:
            phase[sel] = 0.5 + 0.5 * arc
        else:
            phase[sel] = 0.5 - 0.5 * arc
    phase = np.clip(phase, 0.0, 1.0 - _PHASE_EPS)
    states = np.floor(phase * K).astype(int)
    return RespiratoryLabeling(states=states, num_states=K, phase=phase, source="pseudo")


def _repair_missed_peaks(p: np.ndarray) -> np.ndarray:
    """Insert synthetic peaks into gaps much longer than the median spacing.

    A missed detection merges two half-cycles into one gap, which both
    corrupts the interpolation there and flips the inhale/exhale parity of
    every later gap.  Since breathing spacing is roughly regular, a gap
    close to m times the median almost certainly contains m - 1 missed
    peaks; placing them uniformly restores the alternation.
    """
    if len(p) < 4:
        return p
    med = float(np.median(np.diff(p)))
    if med <= 0:
        return p
    out = [p[0]]
    for lo, hi in zip(p[:-1], p[1:]):
        m = max(1, int(round((hi - lo) / med)))
        for j in range(1, m):
            out.append(lo + (hi - lo) * j / m)
        out.append(hi)
    return np.asarray(out)


def _inhale_parity_is_even(values: np.ndarray, p: np.ndarray) -> bool:
    """Vote over gaps: the parity with deeper NCC troughs is the inhale side."""
    depths = {0: [], 1: []}
    for i in range(len(p) - 1):
        segment = values[p[i]: p[i + 1] + 1]
        depths[i % 2].append(segment.min())
    mean_even = np.mean(depths[0]) if depths[0] else np.inf
    mean_odd = np.mean(depths[1]) if depths[1] else np.inf
    return bool(mean_even <= mean_odd)


def select_slices(stack: SliceStack, labeling: RespiratoryLabeling, state: int) -> SliceStack:
    """Sub-stack of all slices labeled ``state``, order preserved."""
    if state < 0 or state >= labeling.num_states:
        raise DataError(f"state {state} out of range [0, {labeling.num_states})")
    if labeling.T != stack.T:
        raise DataError("labeling length does not match stack")
    idx = np.nonzero(np.asarray(labeling.states) == state)[0]
    if idx.size == 0:
        raise DataError(f"no slices labeled state {state}")
    return stack.subset(idx)
