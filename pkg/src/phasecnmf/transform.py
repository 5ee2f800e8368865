"""Forward/inverse STFT with the modified Hann analysis window.

The window is sqrt(2/3) * sin^2(pi*(n+0.5)/N).  At 75% overlap (hop = N/4)
the squared window summed over the four overlapping shifts equals 1 at every
sample, so analysis followed by synthesis with the *same* window reconstructs
the signal exactly on the fully-overlapped interior.

Conventions (documented, not configurable):

* frame t covers samples [t*hop, t*hop + window_length); no centering or
  pre-padding, so frame 0 starts at sample 0;
* the tail is zero-padded so the last frame is complete and every input
  sample is covered;
* spectra are one-sided (F = N/2 + 1 bins); normalized frequency nu = f/N
  ranges over [0, 0.5].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ValidationError


@dataclass(frozen=True)
class StftConfig:
    """Analysis grid: window length N, hop S and sample rate.

    The FFT size equals the window length.  The hop must be N/4: the
    modified Hann window's exact-reconstruction property is specific to
    75% overlap.
    """

    window_length: int = 512
    hop: int = 128
    sample_rate: float = 11025.0

    def __post_init__(self):
        if self.window_length <= 0 or self.hop <= 0 or self.sample_rate <= 0:
            raise ConfigurationError(
                "window_length, hop and sample_rate must be positive")
        if self.window_length % 4 != 0:
            raise ConfigurationError(
                f"window_length must be divisible by 4, got {self.window_length}")
        if self.window_length != 4 * self.hop:
            raise ConfigurationError(
                f"hop must be window_length/4 (75% overlap), got hop={self.hop} "
                f"for window_length={self.window_length}")

    @property
    def fft_size(self) -> int:
        return self.window_length

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class ComplexSpectrogram:
    """F x T matrix of complex TF coefficients plus the grid that produced it.

    Values are frozen after construction; copy before modifying.
    """

    values: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValidationError(f"expected a 2-D F x T matrix, got shape {v.shape}")
        if v.shape[0] != self.config.n_bins:
            raise ValidationError(
                f"spectrogram has {v.shape[0]} bins but the config implies "
                f"{self.config.n_bins}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


def modified_hann(length: int) -> np.ndarray:
    """w(n) = sqrt(2/3) * sin^2(pi*(n+0.5)/N) for n = 0..N-1.

    sum over the four hop-shifted copies of w^2 is exactly 1, which makes
    identical-window analysis/synthesis an identity on the interior.
    """
    if length <= 0 or length % 4 != 0:
        raise ConfigurationError(
            f"window length must be positive and divisible by 4, got {length}")
    n = np.arange(length)
    return np.sqrt(2.0 / 3.0) * np.sin(np.pi * (n + 0.5) / length) ** 2


def frame_count(n_samples: int, config: StftConfig) -> int:
    """Frames needed to cover n_samples: ceil((len - N)/S) + 1, at least 1."""
    return max(1, -(-(n_samples - config.window_length) // config.hop) + 1)


def stft(signal, config: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """One-sided STFT on the frame grid described in the module docstring."""
    x = np.asarray(signal, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValidationError("cannot transform an empty signal")
    N, S = config.window_length, config.hop
    n_frames = frame_count(x.size, config)
    padded_len = (n_frames - 1) * S + N
    if padded_len > x.size:
        x = np.concatenate([x, np.zeros(padded_len - x.size)])
    window = modified_hann(N)
    frames = np.lib.stride_tricks.sliding_window_view(x, N)[::S][:n_frames]
    values = np.fft.rfft(frames * window, axis=1).T
    return ComplexSpectrogram(values=values, config=config)


def istft(spec: ComplexSpectrogram, config: StftConfig | None = None,
          length: int | None = None) -> np.ndarray:
    """Weighted overlap-add synthesis with the same modified Hann window.

    Returns (T-1)*hop + window_length samples unless `length` trims the
    result.  stft -> istft reproduces the input on the fully-overlapped
    interior, i.e. samples [window_length - hop, T*hop).
    """
    if config is None:
        config = spec.config
    N, S = config.window_length, config.hop
    if spec.n_bins != N // 2 + 1:
        raise ValidationError(
            f"spectrogram has {spec.n_bins} bins, config implies {N // 2 + 1}")
    window = modified_hann(N)
    frames = np.fft.irfft(spec.values.T, n=N, axis=1) * window
    T = spec.n_frames
    out = np.zeros((T - 1) * S + N)
    for t in range(T):
        out[t * S:t * S + N] += frames[t]
    if length is not None:
        out = out[:length]
    return out


def interior_slice(config: StftConfig, n_frames: int) -> slice:
    """Sample range where all four window shifts overlap (exact COLA)."""
    return slice(config.window_length - config.hop, n_frames * config.hop)
