"""Sinusoidal-model phase machinery.

A source modeled as a sum of sinusoids has an STFT phase that advances
linearly over frames: phi(f, t) = phi(f, t-1) + 2*pi*hop*nu(f), where nu(f)
is the normalized frequency driving channel f.  Frequencies are estimated
per source by quadratic interpolation of the spectral template around its
peaks, and each channel is unwrapped with the frequency of the nearest peak
(its region of influence).

At onset frames the recursion does not apply; there the phase of a repeated
event is a reference phase plus an offset linear in frequency,
phi(f, t) = ref(f) + slope(t)*f, reflecting that repeats are time-shifted
copies of one another.

Both constraints come with spectrogram-weighted costs: every squared phase
mismatch is weighted by |X(f, t)|^2 so loud bins dominate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

LOG_FLOOR = 1e-12
PEAK_REL_THRESHOLD = 1e-2  # keep local maxima >= max(w)/100


@dataclass(frozen=True)
class OnsetDomain:
    """Frame indexes where a source (re)starts an event."""

    frames: tuple
    n_frames: int

    def __post_init__(self):
        frames = tuple(sorted(int(t) for t in set(self.frames)))
        if frames and (frames[0] < 0 or frames[-1] >= self.n_frames):
            raise ValidationError(
                f"onset frames {frames} outside [0, {self.n_frames - 1}]")
        object.__setattr__(self, "frames", frames)

    def indicator(self) -> np.ndarray:
        """1 x T row: 1.0 on onset frames, 0.0 elsewhere."""
        row = np.zeros(self.n_frames)
        if self.frames:
            row[list(self.frames)] = 1.0
        return row

    def complement(self) -> np.ndarray:
        return 1.0 - self.indicator()

    def mask(self) -> np.ndarray:
        return self.indicator().astype(bool)


@dataclass(frozen=True)
class FrequencyMap:
    """Per-channel unwrapping frequencies for one source.

    nu is piecewise constant: every channel carries the refined frequency
    of the peak owning its region of influence.  Region boundaries sit at
    midpoints between consecutive rounded peak bins.
    """

    nu: np.ndarray          # (F,) normalized frequencies in [0, 0.5]
    peak_bins: np.ndarray   # refined (real-valued) peak positions
    boundaries: np.ndarray  # (P-1,) region edges; channel f belongs right iff f >= edge

    def frame_rotation(self, hop: int) -> np.ndarray:
        """Per-frame phase rotation e^{2i*pi*hop*nu(f)} for each channel."""
        return np.exp(2j * np.pi * hop * self.nu)


def qifft_peaks(w) -> list[tuple[float, float]]:
    """Locate spectral peaks with sub-bin resolution.

    Local maxima of `w` at or above max(w)/100 are refined by fitting a
    parabola to the log magnitudes at (m-1, m, m+1); the vertex offset
    p = 0.5*(a - c)/(a - 2b + c) is clipped to [-0.5, 0.5].  Returns a list
    of (refined_bin, refined_amplitude) sorted by bin; the global maximum
    is always included (with p = 0 when no curvature is available, e.g. a
    flat spectrum or a boundary bin).
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size < 3:
        raise ValidationError("need at least 3 bins to locate peaks")
    if (w < 0).any():
        raise ValidationError("spectral magnitudes must be nonnegative")

    threshold = w.max() * PEAK_REL_THRESHOLD
    logw = np.log(np.maximum(w, LOG_FLOOR))

    candidates = []
    for m in range(w.size):
        left_ok = m == 0 or w[m] > w[m - 1]
        right_ok = m == w.size - 1 or w[m] > w[m + 1]
        if left_ok and right_ok and w[m] >= threshold:
            candidates.append(m)
    if not candidates:
        candidates = [int(np.argmax(w))]

    peaks = []
    for m in candidates:
        if 0 < m < w.size - 1:
            a, b, c = logw[m - 1], logw[m], logw[m + 1]
            denom = a - 2.0 * b + c
            p = 0.0 if denom == 0 else float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))
            amp = float(np.exp(b - 0.25 * (a - c) * p))
        else:
            p, amp = 0.0, float(w[m])
        peaks.append((m + p, amp))
    return peaks


def regions_of_influence(peak_bins, n_bins: int) -> FrequencyMap:
    """Assign every channel the frequency of its nearest peak.

    Boundaries fall at midpoints between consecutive rounded peak bins;
    a channel exactly on a boundary belongs to the upper region.  The
    normalized frequency of a refined bin b is b/N with N = 2*(F-1).
    """
    bins = np.sort(np.atleast_1d(np.asarray(peak_bins, dtype=np.float64)))
    if bins.size == 0:
        raise ValidationError("need at least one peak")
    fft_size = 2 * (n_bins - 1)
    rounded = np.round(bins)
    boundaries = (rounded[:-1] + rounded[1:]) / 2.0
    owner = np.searchsorted(boundaries, np.arange(n_bins), side="right")
    nu = bins[owner] / fft_size
    return FrequencyMap(nu=nu, peak_bins=bins, boundaries=boundaries)


def unwrap_phase(initial_phase, nu, hop: int, n_frames: int,
                 onset_reset: dict[int, np.ndarray] | None = None) -> np.ndarray:
    """Build an F x T phase field from the linear-in-time recursion.

    phi(f, t) = phi(f, t-1) + 2*pi*hop*nu(f) except at frames listed in
    `onset_reset`, whose columns are set to the supplied vectors.  Column 0
    starts from `initial_phase` unless frame 0 is itself reset.
    """
    phi0 = np.asarray(initial_phase, dtype=np.float64).ravel()
    nu = np.asarray(nu, dtype=np.float64).ravel()
    if phi0.shape != nu.shape:
        raise ValidationError("initial phase and frequency vectors must match")
    if n_frames < 1:
        raise ValidationError("need at least one frame")
    resets = {int(t): np.asarray(v, dtype=np.float64).ravel()
              for t, v in (onset_reset or {}).items()}

    increment = 2.0 * np.pi * hop * nu
    phi = np.empty((phi0.size, n_frames))
    phi[:, 0] = resets.get(0, phi0)
    for t in range(1, n_frames):
        phi[:, t] = resets.get(t, phi[:, t - 1] + increment)
    return phi


def _as_fields(fields):
    return [np.asarray(p, dtype=np.complex128) for p in fields]


def unwrapping_cost(x_mag, phase_fields, frame_rotations, onsets) -> float:
    """Spectrogram-weighted violation of the unwrapping recursion.

    sum over sources k, channels f and non-onset frames t >= 1 of
    |X(f,t)|^2 * |P_k(f,t)*conj(P_k(f,t-1)) - rot_k(f)|^2, with P_k the
    unit-modulus phase field.  Frame 0 has no predecessor and contributes
    nothing.
    """
    x2 = np.asarray(x_mag, dtype=np.float64) ** 2
    total = 0.0
    for P, rot, om in zip(_as_fields(phase_fields), frame_rotations, onsets):
        rot = np.asarray(rot, dtype=np.complex128).ravel()
        step = P[:, 1:] * np.conj(P[:, :-1]) - rot[:, None]
        weight = x2[:, 1:] * om.complement()[1:]
        total += float(np.sum(weight * np.abs(step) ** 2))
    return total


def repetition_cost(x_mag, phase_fields, ref_phases, offset_slopes, onsets) -> float:
    """Spectrogram-weighted violation of the repeated-event phase model.

    sum over sources k, channels f and onset frames t of
    |X(f,t)|^2 * |P_k(f,t) - ref_k(f)*e^{i*f*slope_k(t)}|^2.
    """
    x2 = np.asarray(x_mag, dtype=np.float64) ** 2
    F = x2.shape[0]
    f_idx = np.arange(F)
    total = 0.0
    for P, ref, slope, om in zip(_as_fields(phase_fields), ref_phases,
                                 offset_slopes, onsets):
        if not om.frames:
            continue
        cols = list(om.frames)
        ref = np.asarray(ref, dtype=np.complex128).ravel()
        slope = np.asarray(slope, dtype=np.float64).ravel()
        target = ref[:, None] * np.exp(1j * np.outer(f_idx, slope[cols]))
        diff = P[:, cols] - target
        total += float(np.sum(x2[:, cols] * np.abs(diff) ** 2))
    return total
