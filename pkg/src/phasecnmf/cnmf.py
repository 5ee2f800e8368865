"""Complex NMF with phase constraints: the joint magnitude/phase separator.

The mixture spectrogram is modeled as
``Xhat(f,t) = sum_k W_k(f) H_k(t) P_k(f,t)`` with nonnegative rank-1
magnitudes and a unit-modulus phase field P_k per source.  The fit
minimizes the squared Euclidean error plus three penalties:

* an unwrapping penalty pulling each P_k toward the linear-in-time phase
  recursion of a sinusoid outside onset frames (weight ``sigma_u``);
* a repeated-event penalty pulling onset-frame phases toward a reference
  phase plus a frequency-linear offset (weight ``sigma_r``);
* a sparsity penalty ``2*sum H^p`` on the activations (weight ``sigma_s``).

Estimation is coordinate descent, sweeping sources in order and updating,
per source: unwrapping frequencies (peak interpolation on the template),
reference phase, onset offset slopes, phase field, template, activation,
and a norm gauge fix.  With ``sigma_u = sigma_r = 0`` the sweep degenerates
to unconstrained sparse complex NMF (the phase update reduces to the phase
of the residual), which is how :func:`cnmf_sparse` is implemented.

Descent of the total cost is not guaranteed (the frequency refresh and the
slope estimation are not exact coordinate minimizers) but holds in practice;
the trace returned by :func:`separate` lets callers check.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError, ValidationError
from .nmf import kl_nmf, wiener_filter, FactorModel
from .phase import (FrequencyMap, OnsetDomain, qifft_peaks,
                    regions_of_influence, repetition_cost, unwrapping_cost)
from .transform import ComplexSpectrogram

EPS = 1e-12


@dataclass(frozen=True)
class SeparationConfig:
    """Knobs for one separation run.

    ``sigma_s = None`` means the magnitude-dependent default
    ``||X||^2 * K^-(1-p/2) * 1e-5`` is filled in when the mixture is known.
    ``stop_tol`` optionally stops early once the relative cost decrease per
    iteration falls below it; off by default to match the fixed-count
    protocol.
    """

    n_sources: int = 2
    sigma_u: float = 0.2
    sigma_r: float = 0.2
    sigma_s: float | None = None
    p: float = 1.0
    outer_iterations: int = 10
    init_nmf_iterations: int = 30
    eps: float = EPS
    seed: int = 0
    stop_tol: float | None = None

    def __post_init__(self):
        if self.n_sources < 1:
            raise ConfigurationError("need at least one source")
        if min(self.sigma_u, self.sigma_r) < 0 or (
                self.sigma_s is not None and self.sigma_s < 0):
            raise ConfigurationError("penalty weights must be nonnegative")
        if not 0 < self.p < 2:
            raise ConfigurationError(f"sparsity exponent must be in (0, 2), got {self.p}")
        if self.outer_iterations < 1 or self.init_nmf_iterations < 1:
            raise ConfigurationError("iteration counts must be >= 1")
        if self.eps <= 0:
            raise ConfigurationError("eps must be positive")


@dataclass
class SourceModel:
    """State of one source during/after the descent."""

    template: np.ndarray        # (F,) nonnegative spectral column
    activation: np.ndarray      # (T,) nonnegative gains
    phases: np.ndarray          # (F, T) unit-modulus phase field
    ref_phase: np.ndarray       # (F,) unit-modulus onset reference
    offset_slopes: np.ndarray   # (T,) radians/bin, nonzero only on onsets
    frame_rotation: np.ndarray  # (F,) unit-modulus per-frame rotation
    onsets: OnsetDomain
    freq_map: FrequencyMap | None = None

    def estimate(self) -> np.ndarray:
        return np.outer(self.template, self.activation) * self.phases


@dataclass
class ComplexModel:
    """Factorization plus one phase field per component (K, F, T)."""

    factors: FactorModel
    phases: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.phases, dtype=np.complex128)
        K = self.factors.n_components
        F, T = self.factors.templates.shape[0], self.factors.activations.shape[1]
        if P.shape != (K, F, T):
            raise ValidationError(
                f"phases shape {P.shape} does not match factors ({K}, {F}, {T})")
        if np.max(np.abs(np.abs(P) - 1.0)) > 1e-9:
            raise ValidationError("phase fields must be unit modulus")
        self.phases = P

    def reconstruction(self) -> np.ndarray:
        W, H = self.factors.templates, self.factors.activations
        return np.einsum("fk,kt,kft->ft", W, H, self.phases)


def _values(X) -> np.ndarray:
    return X.values if isinstance(X, ComplexSpectrogram) else np.asarray(X)


def euclidean_cost(X, model: ComplexModel) -> float:
    """Squared Euclidean distance sum |X - Xhat|^2."""
    vals = _values(X)
    if vals.shape != model.reconstruction().shape:
        raise ValidationError("model and spectrogram shapes differ")
    return float(np.sum(np.abs(vals - model.reconstruction()) ** 2))


def sparsity_penalty(activations, p: float) -> float:
    """2 * sum H^p over all components and frames (factor 2 included)."""
    if not 0 < p < 2:
        raise ConfigurationError(f"sparsity exponent must be in (0, 2), got {p}")
    H = np.asarray(activations, dtype=np.float64)
    if (H < 0).any():
        raise ValidationError("activations must be nonnegative")
    return float(2.0 * np.sum(H ** p))


def default_sparsity_weight(X, n_sources: int, p: float) -> float:
    """Magnitude-scaled default: ||X||^2 * K^-(1-p/2) * 1e-5."""
    energy = float(np.sum(np.abs(_values(X)) ** 2))
    return energy * n_sources ** -(1.0 - p / 2.0) * 1e-5


def resolve_sigma_s(config: SeparationConfig, X) -> float:
    if config.sigma_s is not None:
        return config.sigma_s
    return default_sparsity_weight(X, config.n_sources, config.p)


def residual(X, sources: list[SourceModel], k: int) -> np.ndarray:
    """Mixture minus the current estimates of every source but k."""
    out = _values(X).astype(np.complex128).copy()
    for l, s in enumerate(sources):
        if l != k:
            out -= s.estimate()
    return out


def total_cost(X, sources: list[SourceModel], config: SeparationConfig) -> float:
    """Euclidean error plus the three weighted penalties."""
    vals = _values(X)
    x_mag = np.abs(vals)
    est = np.zeros_like(vals)
    for s in sources:
        est += s.estimate()
    d = float(np.sum(np.abs(vals - est) ** 2))
    cu = unwrapping_cost(x_mag, [s.phases for s in sources],
                         [s.frame_rotation for s in sources],
                         [s.onsets for s in sources])
    cr = repetition_cost(x_mag, [s.phases for s in sources],
                         [s.ref_phase for s in sources],
                         [s.offset_slopes for s in sources],
                         [s.onsets for s in sources])
    cs = sparsity_penalty(np.stack([s.activation for s in sources]), config.p)
    sigma_s = resolve_sigma_s(config, X)
    return d + config.sigma_u * cu + config.sigma_r * cr + sigma_s * cs


def update_ref_phase(phases, x_mag, onsets: OnsetDomain, offset_slopes,
                     previous) -> np.ndarray:
    """Re-estimate the onset reference phase of one source.

    Circular average of the onset-frame phases after removing the
    frequency-linear offsets, weighted by |X|^2.  Channels whose
    accumulator is zero (and sources with no onsets) keep their previous
    value.
    """
    if not onsets.frames:
        return np.asarray(previous, dtype=np.complex128).copy()
    cols = list(onsets.frames)
    x2 = np.asarray(x_mag, dtype=np.float64)[:, cols] ** 2
    f_idx = np.arange(x2.shape[0])
    shift = np.exp(-1j * np.outer(f_idx, np.asarray(offset_slopes)[cols]))
    acc = np.sum(x2 * np.asarray(phases)[:, cols] * shift, axis=1)
    mag = np.abs(acc)
    dead = mag == 0
    return np.where(dead, previous, acc / np.where(dead, 1.0, mag))


def update_offset_slopes(phases, ref_phase, x_mag, onsets: OnsetDomain) -> np.ndarray:
    """Re-estimate the per-onset frequency-linear phase offsets.

    Rotational-invariance estimate: correlate the phase advance between
    adjacent channels with the advance predicted by the reference phase,
    weighted by the magnitudes of both channels, and take the angle.
    Frames with a zero accumulator get slope 0; the result is zeroed off
    the onset frames.
    """
    P = np.asarray(phases, dtype=np.complex128)
    ref = np.asarray(ref_phase, dtype=np.complex128)
    xm = np.asarray(x_mag, dtype=np.float64)
    if P.shape[0] < 2:
        raise ValidationError("need at least two channels to estimate slopes")
    ref_step = ref[:-1] * np.conj(ref[1:])              # conj of adjacent advance
    cross = xm[:-1] * xm[1:] * np.conj(P[:-1]) * P[1:]  # (F-1, T)
    z = ref_step @ cross
    slopes = np.where(np.abs(z) > 0, np.angle(np.where(np.abs(z) > 0, z, 1.0)), 0.0)
    return slopes * onsets.indicator()


def update_phase_field(residual_k, template, activation, ref_phase,
                       offset_slopes, frame_rotation, onsets: OnsetDomain,
                       sigma_u: float, sigma_r: float, previous) -> np.ndarray:
    """One simultaneous phase-field update for one source.

    The new phase at each bin is the direction of
    ``residual*W*H + (W*H)^2 * (constraint pull)`` where the pull is the
    repetition target on onset frames and the rotated previous-frame phase
    elsewhere (frame 0 feels no pull).  Bins with a zero numerator keep
    their previous phase.
    """
    prev = np.asarray(previous, dtype=np.complex128)
    wh = np.outer(template, activation)
    F, T = wh.shape
    ind = onsets.indicator()
    f_idx = np.arange(F)
    rep = (np.asarray(ref_phase)[:, None]
           * np.exp(1j * np.outer(f_idx, np.asarray(offset_slopes)))
           * ind[None, :])
    shifted = np.concatenate(
        [np.zeros((F, 1), dtype=np.complex128), prev[:, :-1]], axis=1)
    unwrap = np.asarray(frame_rotation)[:, None] * shifted * onsets.complement()[None, :]
    pull = sigma_r * rep + sigma_u * unwrap
    numer = np.asarray(residual_k) * wh + wh ** 2 * pull
    mag = np.abs(numer)
    dead = mag == 0
    return np.where(dead, prev, numer / np.where(dead, 1.0, mag))


def update_template(coherent_residual, activation, previous) -> np.ndarray:
    """Per-channel least squares against the phase-aligned residual,
    projected onto the nonnegative orthant.  If the activation is silent
    the template is left unchanged."""
    h = np.asarray(activation, dtype=np.float64)
    den = float(h @ h)
    if den <= 0:
        return np.asarray(previous, dtype=np.float64).copy()
    return np.maximum(np.asarray(coherent_residual) @ h / den, 0.0)


def update_activation(coherent_residual, template, previous, sigma_s: float,
                      p: float, eps: float = EPS) -> np.ndarray:
    """Per-frame least squares with the sparsity term folded into the
    denominator, projected onto the nonnegative orthant.

    Previous activations are floored at ``eps`` before taking the p-2 < 0
    power.  Frames whose denominator is zero (possible only when
    sigma_s = 0 and the template is silent) are left unchanged.
    """
    w = np.asarray(template, dtype=np.float64)
    prev = np.asarray(previous, dtype=np.float64)
    numer = w @ np.asarray(coherent_residual)
    ww = float(w @ w)
    if sigma_s > 0:
        den = p * sigma_s * np.maximum(prev, eps) ** (p - 2.0) + ww
    else:
        den = np.full_like(prev, ww)
    dead = den <= 0
    out = np.where(dead, prev, numer / np.where(dead, 1.0, den))
    return np.maximum(out, 0.0)


def normalize_factors(sources: list[SourceModel]) -> list[SourceModel]:
    """Fix the scale gauge: unit-norm templates, gains absorbed into the
    activations.  Silent templates are left alone.  Estimates are unchanged."""
    for s in sources:
        norm = float(np.linalg.norm(s.template))
        if norm > 0:
            s.template = s.template / norm
            s.activation = s.activation * norm
    return sources


def _check_finite(arr, update: str, k: int, iteration: int):
    if not np.isfinite(arr).all():
        raise NumericalError(
            f"non-finite values after the {update} update of source {k} "
            f"at iteration {iteration}")


def _refresh_frequencies(source: SourceModel, n_bins: int, hop: int):
    peaks = qifft_peaks(source.template)
    fm = regions_of_influence([b for b, _ in peaks], n_bins)
    source.freq_map = fm
    source.frame_rotation = fm.frame_rotation(hop)


def _source_unwrap_cost(x_mag, source: SourceModel) -> float:
    return unwrapping_cost(x_mag, [source.phases], [source.frame_rotation],
                           [source.onsets])


def _source_rep_cost(x_mag, source: SourceModel, ref_phase,
                     offset_slopes) -> float:
    return repetition_cost(x_mag, [source.phases], [ref_phase],
                           [offset_slopes], [source.onsets])


def _guarded_frequency_refresh(source: SourceModel, x_mag, n_bins: int,
                               hop: int):
    """Re-detect unwrapping frequencies, but keep the previous map when the
    re-detection would raise the unwrapping cost.

    Peak detection is not a descent step: a peak dropping below threshold
    between sweeps reassigns whole regions of influence and can kick the
    cost up.  The guard keeps the refresh from fighting the phase field it
    is supposed to serve.
    """
    if source.freq_map is None:
        _refresh_frequencies(source, n_bins, hop)
        return
    before = _source_unwrap_cost(x_mag, source)
    prev_map, prev_rot = source.freq_map, source.frame_rotation
    _refresh_frequencies(source, n_bins, hop)
    if _source_unwrap_cost(x_mag, source) > before:
        source.freq_map, source.frame_rotation = prev_map, prev_rot


def _guarded_onset_model_update(source: SourceModel, x_mag):
    """Joint (reference phase, offset slope) proposal with a monotone guard.

    The reference phase re-estimate alone never increases the repetition
    cost (it is the exact minimizer given the slopes).  The slope
    re-estimate is a rotational-invariance surrogate, so the new slopes are
    accepted together with their matching re-estimated reference phase only
    when the pair lowers the repetition cost; otherwise both keep their
    previous values.
    """
    ref_a = update_ref_phase(source.phases, x_mag, source.onsets,
                             source.offset_slopes, source.ref_phase)
    if not source.onsets.frames:
        source.ref_phase = ref_a
        return
    cost_a = _source_rep_cost(x_mag, source, ref_a, source.offset_slopes)
    slopes_b = update_offset_slopes(source.phases, ref_a, x_mag,
                                    source.onsets)
    ref_b = update_ref_phase(source.phases, x_mag, source.onsets,
                             slopes_b, ref_a)
    cost_b = _source_rep_cost(x_mag, source, ref_b, slopes_b)
    if cost_b <= cost_a:
        source.ref_phase, source.offset_slopes = ref_b, slopes_b
    else:
        source.ref_phase = ref_a


def sweep_once(X, sources: list[SourceModel], config: SeparationConfig,
               iteration: int = 0):
    """One coordinate-descent sweep over all sources, in update order:
    frequencies, reference phase, offset slopes, phase field, template,
    activation, norm gauge.  Mutates the source models in place."""
    if not isinstance(X, ComplexSpectrogram):
        raise ValidationError("sweep_once expects a ComplexSpectrogram")
    x_mag = X.magnitude()
    F, hop = X.n_bins, X.config.hop
    sigma_s = resolve_sigma_s(config, X)
    for k, s in enumerate(sources):
        _guarded_frequency_refresh(s, x_mag, F, hop)
        _check_finite(s.frame_rotation, "frequency", k, iteration)
        _guarded_onset_model_update(s, x_mag)
        _check_finite(s.ref_phase, "reference-phase", k, iteration)
        _check_finite(s.offset_slopes, "offset-slope", k, iteration)
        b_k = residual(X, sources, k)
        s.phases = update_phase_field(
            b_k, s.template, s.activation, s.ref_phase, s.offset_slopes,
            s.frame_rotation, s.onsets, config.sigma_u, config.sigma_r,
            s.phases)
        _check_finite(s.phases, "phase-field", k, iteration)
        coherent = np.real(b_k * np.conj(s.phases))
        s.template = update_template(coherent, s.activation, s.template)
        _check_finite(s.template, "template", k, iteration)
        s.activation = update_activation(
            coherent, s.template, s.activation, sigma_s, config.p, config.eps)
        _check_finite(s.activation, "activation", k, iteration)
        normalize_factors([s])
    return sources


def separate(X: ComplexSpectrogram, config: SeparationConfig,
             onsets: list[OnsetDomain],
             init: ComplexModel | None = None):
    """Run the full phase-constrained descent on a mixture spectrogram.

    Parameters
    ----------
    X : ComplexSpectrogram
        The mixture; its config supplies the hop for the phase recursion.
    config : SeparationConfig
    onsets : list of OnsetDomain
        One onset set per source (may be empty sets).
    init : ComplexModel, optional
        Starting templates/activations/phase fields.  When absent, the
        factors come from KL-NMF on |X| and every phase field starts at
        the mixture phase (through Wiener masking); reference phases and
        offset slopes always start uniform random in [-pi, pi) from the
        seed.

    Returns
    -------
    sources : list of SourceModel
    trace : ndarray
        Total cost at init and after each sweep (length iterations+1,
        shorter only if ``stop_tol`` triggers).
    """
    if not isinstance(X, ComplexSpectrogram):
        raise ValidationError("separate expects a ComplexSpectrogram")
    K = config.n_sources
    F, T = X.n_bins, X.n_frames
    hop = X.config.hop
    if len(onsets) != K:
        raise ConfigurationError(
            f"got {len(onsets)} onset sets for {K} sources")
    for k, om in enumerate(onsets):
        if om.n_frames != T:
            raise ValidationError(
                f"onset domain of source {k} spans {om.n_frames} frames, "
                f"spectrogram has {T}")

    sigma_s = resolve_sigma_s(config, X)
    cfg = dataclasses.replace(config, sigma_s=sigma_s)
    x_mag = X.magnitude()

    if init is None:
        factors = kl_nmf(x_mag, K, config.init_nmf_iterations, seed=config.seed)
        phase_fields = [np.exp(1j * np.angle(est.values))
                        for est in wiener_filter(X, factors)]
    else:
        if init.factors.templates.shape != (F, K) or \
                init.factors.activations.shape != (K, T):
            raise ValidationError("init model shapes do not match the mixture")
        factors = init.factors
        phase_fields = [init.phases[k].copy() for k in range(K)]

    rng = np.random.default_rng(config.seed)
    ref_init = np.exp(1j * rng.uniform(-np.pi, np.pi, size=(K, F)))
    slope_init = rng.uniform(-np.pi, np.pi, size=(K, T))

    sources = []
    for k in range(K):
        s = SourceModel(
            template=factors.templates[:, k].copy(),
            activation=factors.activations[k].copy(),
            phases=phase_fields[k],
            ref_phase=ref_init[k],
            offset_slopes=slope_init[k] * onsets[k].indicator(),
            frame_rotation=np.ones(F, dtype=np.complex128),
            onsets=onsets[k])
        _refresh_frequencies(s, F, hop)
        sources.append(s)
    # move the init into the unit-template gauge the sweeps maintain, so the
    # scale-sensitive sparsity term is comparable across the whole trace
    normalize_factors(sources)

    trace = [total_cost(X, sources, cfg)]
    for it in range(config.outer_iterations):
        sweep_once(X, sources, cfg, iteration=it)
        trace.append(total_cost(X, sources, cfg))
        if cfg.stop_tol is not None and trace[-2] > 0:
            if abs(trace[-2] - trace[-1]) <= cfg.stop_tol * trace[-2]:
                break
    return sources, np.array(trace)


def cnmf_sparse(X: ComplexSpectrogram, n_components: int, p: float = 1.0,
                sigma_s: float | None = None, iterations: int = 10,
                init: ComplexModel | None = None, seed: int = 0,
                init_nmf_iterations: int = 30):
    """Unconstrained sparse complex NMF: the sigma_u = sigma_r = 0 special
    case of the full descent (the phase update then reduces to the phase of
    the per-source residual).

    Returns the fitted ComplexModel and the cost trace.
    """
    config = SeparationConfig(
        n_sources=n_components, sigma_u=0.0, sigma_r=0.0, sigma_s=sigma_s,
        p=p, outer_iterations=iterations, seed=seed,
        init_nmf_iterations=init_nmf_iterations)
    empty = [OnsetDomain((), X.n_frames) for _ in range(n_components)]
    sources, trace = separate(X, config, empty, init=init)
    model = ComplexModel(
        factors=FactorModel(
            templates=np.stack([s.template for s in sources], axis=1),
            activations=np.stack([s.activation for s in sources])),
        phases=np.stack([s.phases for s in sources]))
    return model, trace
