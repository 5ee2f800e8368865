"""Synthetic mixtures, WAV ingestion/emission, and mixture manifests.

A synthetic mixture is two (or more) harmonic sources made of damped
sinusoids.  Each source is activated alone in its own segment, then all
sources play together; every activation restarts the source's waveform, so
repeats are exact time-shifted copies.  Segment boundaries are snapped to
the STFT hop grid so onset frame indexes are well defined, and the ground
truth (per-source time signals plus onset frames) travels with the mixture
in a JSON manifest.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError, ValidationError
from .transform import StftConfig, frame_count

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

FUNDAMENTAL_MIN_HZ = 100.0
PARTIAL_MAX_HZ = 3000.0
AMPLITUDE_RANGE = (0.5, 1.0)
DAMPING_RANGE = (0.5, 5.0)
COMPONENTS_RANGE = (3, 8)


@dataclass(frozen=True)
class Sinusoid:
    """One damped partial; damping is in 1/seconds, zero means sustained."""

    amplitude: float
    origin_phase: float
    frequency_hz: float
    damping: float = 0.0

    def __post_init__(self):
        if self.amplitude <= 0:
            raise ConfigurationError("amplitude must be positive")
        if self.damping < 0:
            raise ConfigurationError("damping must be nonnegative")
        if self.frequency_hz <= 0:
            raise ConfigurationError("frequency must be positive")


@dataclass(frozen=True)
class Segment:
    """A stretch of the timeline and the set of sources active in it."""

    start: float
    duration: float
    active_sources: tuple

    def __post_init__(self):
        if self.start < 0 or self.duration <= 0:
            raise ConfigurationError("segments need start >= 0 and duration > 0")
        object.__setattr__(self, "active_sources",
                           tuple(sorted(set(int(k) for k in self.active_sources))))


@dataclass(frozen=True)
class MixtureSpec:
    """Declarative description of a synthetic mixture.

    components[k] lists the partials of source k; onset_frames[k] are the
    STFT frame indexes where source k (re)enters, on the frame grid of
    `stft_config`.
    """

    sample_rate: float
    components: tuple
    segments: tuple
    onset_frames: tuple
    stft_config: StftConfig = field(default_factory=StftConfig)
    seed: int | None = None

    def __post_init__(self):
        nyquist = self.sample_rate / 2.0
        for comps in self.components:
            for c in comps:
                if c.frequency_hz >= nyquist:
                    raise ConfigurationError(
                        f"partial at {c.frequency_hz} Hz exceeds the Nyquist "
                        f"frequency {nyquist} Hz")
        hop = self.stft_config.hop
        for seg in self.segments:
            start_sample = round(seg.start * self.sample_rate)
            if start_sample % hop != 0:
                raise ValidationError(
                    f"segment start {seg.start}s (sample {start_sample}) is "
                    f"not on the hop grid of {hop} samples")
        for k, frames in enumerate(self.onset_frames):
            starts = self._entry_frames(k)
            if tuple(sorted(frames)) != starts:
                raise ValidationError(
                    f"onset frames {frames} of source {k} do not match the "
                    f"segment starts {starts}")

    @property
    def n_sources(self) -> int:
        return len(self.components)

    @property
    def duration(self) -> float:
        return max(seg.start + seg.duration for seg in self.segments)

    def _entry_frames(self, k: int) -> tuple:
        hop, sr = self.stft_config.hop, self.sample_rate
        return tuple(sorted(round(seg.start * sr) // hop
                            for seg in self.segments if k in seg.active_sources))


@dataclass(frozen=True)
class GroundTruth:
    """Realized signals of a MixtureSpec; mixture == sum(sources)."""

    mixture: np.ndarray
    sources: tuple
    spec: MixtureSpec


def _snap(sample: float, hop: int) -> int:
    return int(round(sample / hop)) * hop


def default_segments(n_sources: int, segment_duration: float,
                     config: StftConfig) -> tuple:
    """Each source alone in turn, then everybody together, with boundaries
    snapped to the hop grid."""
    sr, hop = config.sample_rate, config.hop
    bounds = [_snap(i * segment_duration * sr, hop) for i in range(n_sources + 2)]
    segs = [Segment(start=bounds[i] / sr, duration=(bounds[i + 1] - bounds[i]) / sr,
                    active_sources=(i,))
            for i in range(n_sources)]
    segs.append(Segment(start=bounds[n_sources] / sr,
                        duration=(bounds[n_sources + 1] - bounds[n_sources]) / sr,
                        active_sources=tuple(range(n_sources))))
    return tuple(segs)


def build_mixture_spec(components, segments, config: StftConfig = StftConfig(),
                       seed: int | None = None) -> MixtureSpec:
    """Assemble a spec, deriving the onset frames from the segment layout."""
    components = tuple(tuple(c) for c in components)
    segments = tuple(segments)
    sr, hop = config.sample_rate, config.hop
    onsets = tuple(
        tuple(sorted(round(seg.start * sr) // hop
                     for seg in segments if k in seg.active_sources))
        for k in range(len(components)))
    return MixtureSpec(sample_rate=sr, components=components, segments=segments,
                       onset_frames=onsets, stft_config=config, seed=seed)


OVERLAP_DETUNE_HZ = (2.0, 8.0)


def _harmonic_stack(rng, fundamental: float, n_comp: int) -> tuple:
    return tuple(
        Sinusoid(amplitude=float(rng.uniform(*AMPLITUDE_RANGE)),
                 origin_phase=float(rng.uniform(-np.pi, np.pi)),
                 frequency_hz=float((m + 1) * fundamental),
                 damping=float(rng.uniform(*DAMPING_RANGE)))
        for m in range(n_comp))


def random_mixture_spec(seed, config: StftConfig = StftConfig(),
                        n_sources: int = 2,
                        segment_duration: float = 1.0) -> MixtureSpec:
    """Draw a random harmonic mixture whose sources overlap in the TF plane.

    Each source is a stack of 3..8 partials at integer multiples of a
    fundamental; fundamentals are drawn so the whole stack stays inside
    [100, 3000] Hz.  After the first source, every further source is tuned
    so one of its partials lands a few hertz (within one STFT channel) from
    a partial of the first source, which makes the sources beat against
    each other where they meet.  Per-partial amplitude, origin phase and
    damping are uniform over the documented ranges.
    """
    rng = np.random.default_rng(seed)
    components = []
    n0 = int(rng.integers(COMPONENTS_RANGE[0], COMPONENTS_RANGE[1] + 1))
    fund0 = rng.uniform(FUNDAMENTAL_MIN_HZ, PARTIAL_MAX_HZ / n0)
    components.append(_harmonic_stack(rng, fund0, n0))
    for _ in range(1, n_sources):
        n_comp = int(rng.integers(COMPONENTS_RANGE[0], COMPONENTS_RANGE[1] + 1))
        detune = rng.uniform(*OVERLAP_DETUNE_HZ) * rng.choice([-1.0, 1.0])
        pairs = [(j0, j) for j0 in range(1, n0 + 1)
                 for j in range(1, n_comp + 1)
                 if FUNDAMENTAL_MIN_HZ
                 <= (j0 * fund0 + detune) / j
                 <= PARTIAL_MAX_HZ / n_comp]
        if pairs:
            j0, j = pairs[int(rng.integers(len(pairs)))]
            fundamental = (j0 * fund0 + detune) / j
        else:
            fundamental = rng.uniform(FUNDAMENTAL_MIN_HZ, PARTIAL_MAX_HZ / n_comp)
        components.append(_harmonic_stack(rng, fundamental, n_comp))
    segments = default_segments(n_sources, segment_duration, config)
    seed_int = int(seed) if np.isscalar(seed) else None
    return build_mixture_spec(components, segments, config, seed=seed_int)


def render(spec: MixtureSpec) -> GroundTruth:
    """Turn a spec into time signals.  Every active segment restarts the
    source's waveform (fresh envelope and origin phases)."""
    sr = spec.sample_rate
    n_total = round(spec.duration * sr)
    sources = [np.zeros(n_total) for _ in range(spec.n_sources)]
    for seg in spec.segments:
        s0 = round(seg.start * sr)
        s1 = min(round((seg.start + seg.duration) * sr), n_total)
        t = np.arange(s1 - s0) / sr
        for k in seg.active_sources:
            sig = np.zeros(s1 - s0)
            for c in spec.components[k]:
                sig += (c.amplitude * np.exp(-c.damping * t)
                        * np.cos(2 * np.pi * c.frequency_hz * t + c.origin_phase))
            sources[k][s0:s1] += sig
    mixture = np.sum(sources, axis=0)
    return GroundTruth(mixture=mixture, sources=tuple(sources), spec=spec)


def synth_damped_mixture(seed, config: StftConfig = StftConfig(),
                         n_sources: int = 2,
                         segment_duration: float = 1.0) -> GroundTruth:
    """Random spec + rendering in one call; same seed, same signals."""
    return render(random_mixture_spec(seed, config, n_sources, segment_duration))


def mixture_seed(corpus_seed: int, index: int) -> int:
    """Stable per-mixture integer seed derived from a corpus seed."""
    return int(np.random.SeedSequence([int(corpus_seed), int(index)])
               .generate_state(1)[0])


# ---------------------------------------------------------------------------
# WAV I/O (16-bit PCM mono only)

def save_wav(path, signal, sample_rate) -> int:
    """Write 16-bit PCM mono; samples outside [-1, 1] are clipped and the
    count of clipped samples is returned."""
    x = np.asarray(signal, dtype=np.float64).ravel()
    if not np.isfinite(x).all():
        raise ValidationError("cannot write non-finite samples")
    clipped = int(np.count_nonzero((x > 1.0) | (x < -1.0)))
    q = np.round(np.clip(x, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(round(sample_rate)))
        fh.writeframes(q.tobytes())
    return clipped


def load_wav(path):
    """Read 16-bit PCM mono into floats in [-1, 1]; returns (signal, rate)."""
    try:
        fh = wave.open(str(path), "rb")
    except (wave.Error, EOFError) as exc:
        raise IngestionError(f"{path}: not a readable WAV file ({exc})") from exc
    except FileNotFoundError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    with fh:
        if fh.getnchannels() != 1:
            raise IngestionError(
                f"{path}: expected mono, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2 or fh.getcomptype() != "NONE":
            raise IngestionError(f"{path}: only 16-bit PCM is supported")
        n = fh.getnframes()
        if n == 0:
            raise IngestionError(f"{path}: file contains no samples")
        data = np.frombuffer(fh.readframes(n), dtype="<i2")
        return data.astype(np.float64) / 32767.0, float(fh.getframerate())


# ---------------------------------------------------------------------------
# Manifests

@dataclass
class Manifest:
    """Parsed mixture manifest: file references, onsets and defaults."""

    path: Path
    sample_rate: float
    n_sources: int
    mixture_path: Path
    stft_config: StftConfig
    source_paths: tuple | None = None
    onset_frames: tuple | None = None
    separation: dict = field(default_factory=dict)
    seed: int | None = None

    def require_onsets(self) -> tuple:
        if self.onset_frames is None:
            raise ValidationError(
                f"{self.path}: manifest has no onset_frames section, which "
                f"the phase-constrained method requires")
        return self.onset_frames


def save_manifest(directory, gt: GroundTruth) -> Path:
    """Write mixture + per-source stems + manifest into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = gt.spec
    peak = max(np.abs(gt.mixture).max(), 1e-9)
    scale = 0.95 / peak if peak > 0.95 else 1.0  # headroom against clipping
    save_wav(directory / "mixture.wav", gt.mixture * scale, spec.sample_rate)
    source_names = []
    for k, src in enumerate(gt.sources):
        name = f"source{k}.wav"
        save_wav(directory / name, src * scale, spec.sample_rate)
        source_names.append(name)
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "sample_rate": spec.sample_rate,
        "n_sources": spec.n_sources,
        "mixture": "mixture.wav",
        "sources": source_names,
        "onset_frames": [list(f) for f in spec.onset_frames],
        "stft": {"window_length": spec.stft_config.window_length,
                 "hop": spec.stft_config.hop},
        "seed": spec.seed,
        "segments": [{"start": s.start, "duration": s.duration,
                      "active_sources": list(s.active_sources)}
                     for s in spec.segments],
        "components": [[{"amplitude": c.amplitude,
                         "origin_phase": c.origin_phase,
                         "frequency_hz": c.frequency_hz,
                         "damping": c.damping} for c in comps]
                       for comps in spec.components],
    }
    out = directory / MANIFEST_NAME
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def _wav_frame_count(path) -> int:
    try:
        with wave.open(str(path), "rb") as fh:
            return fh.getnframes()
    except (wave.Error, EOFError, FileNotFoundError) as exc:
        raise IngestionError(f"{path}: {exc}") from exc


def load_manifest(path) -> Manifest:
    """Parse and validate a manifest file.

    Onset frames are checked against the frame count implied by the
    mixture file and the STFT grid; missing optional sections are left as
    None and defaults filled where documented.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc

    version = doc.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise ValidationError(
            f"{path}: unsupported schema_version {version!r} "
            f"(expected {MANIFEST_SCHEMA_VERSION})")
    for key in ("sample_rate", "n_sources", "mixture"):
        if key not in doc:
            raise ValidationError(f"{path}: missing required key {key!r}")

    n_sources = int(doc["n_sources"])
    if n_sources < 1:
        raise ValidationError(f"{path}: n_sources must be >= 1")
    stft_doc = doc.get("stft", {})
    config = StftConfig(window_length=int(stft_doc.get("window_length", 512)),
                        hop=int(stft_doc.get("hop", 128)),
                        sample_rate=float(doc["sample_rate"]))
    mixture_path = path.parent / doc["mixture"]

    source_paths = None
    if doc.get("sources"):
        if len(doc["sources"]) != n_sources:
            raise ValidationError(
                f"{path}: {len(doc['sources'])} source files listed for "
                f"{n_sources} sources")
        source_paths = tuple(path.parent / s for s in doc["sources"])

    onset_frames = None
    if doc.get("onset_frames") is not None:
        raw = doc["onset_frames"]
        if len(raw) != n_sources:
            raise ValidationError(
                f"{path}: onset_frames lists {len(raw)} sources, expected "
                f"{n_sources} (section missing for source {len(raw)})")
        n_samples = _wav_frame_count(mixture_path)
        n_frames = frame_count(n_samples, config)
        onset_frames = []
        for k, frames in enumerate(raw):
            frames = tuple(sorted(int(t) for t in frames))
            if frames and (frames[0] < 0 or frames[-1] >= n_frames):
                raise ValidationError(
                    f"{path}: source {k} has onset frames {frames} outside "
                    f"[0, {n_frames - 1}]")
            onset_frames.append(frames)
        onset_frames = tuple(onset_frames)

    separation = dict(doc.get("separation", {}))
    allowed = {"sigma_u", "sigma_r", "sigma_s", "p", "outer_iterations",
               "init_nmf_iterations", "seed"}
    unknown = set(separation) - allowed
    if unknown:
        raise ValidationError(f"{path}: unknown separation keys {sorted(unknown)}")

    return Manifest(path=path, sample_rate=float(doc["sample_rate"]),
                    n_sources=n_sources, mixture_path=mixture_path,
                    stft_config=config, source_paths=source_paths,
                    onset_frames=onset_frames, separation=separation,
                    seed=doc.get("seed"))
