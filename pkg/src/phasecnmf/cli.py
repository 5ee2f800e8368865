"""Batch front end: generate corpora, separate, evaluate, sweep weights.

Subcommands
-----------
synth     write `count` synthetic mixtures (stems + manifest) into a corpus
          directory, reproducible from one corpus seed
separate  run one method (nmf-w / cnmf / cnmf-phi) on a manifest; writes
          WAV stems and a JSON run report
eval      score stems against the ground truth of every mixture in a
          corpus; writes a CSV with per-source and aggregate rows
sweep     run cnmf-phi over a (sigma_u, sigma_r) grid and write the mean
          scores per grid point as long-form CSV

Exit codes: 0 success, 2 usage, 3 validation/configuration,
4 input/output, 5 numerical abort.  The PHASECNMF_OUT environment
variable overrides the default output root where noted in --help.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cnmf import SeparationConfig, cnmf_sparse, resolve_sigma_s, separate
from .dataset import (MANIFEST_NAME, Manifest, load_manifest, load_wav,
                      mixture_seed, save_manifest, save_wav,
                      synth_damped_mixture)
from .errors import (ConfigurationError, EvaluationError, IngestionError,
                     NumericalError, ValidationError)
from .evaluation import aggregate, bss_eval
from .nmf import kl_nmf, wiener_filter
from .phase import OnsetDomain
from .transform import ComplexSpectrogram, StftConfig, istft, stft

METHODS = ("nmf-w", "cnmf", "cnmf-phi")
OUT_ENV_VAR = "PHASECNMF_OUT"
EVAL_CSV_SCHEMA = 1
SWEEP_CSV_SCHEMA = 1

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_IO = 4
EXIT_NUMERICAL = 5


@dataclass
class RunReport:
    """Serializable record of one separation run."""

    method: str
    manifest: str
    config: dict
    cost_trace: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    clipped_samples: dict = field(default_factory=dict)
    scores: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def _config_from(manifest: Manifest, args) -> SeparationConfig:
    """Merge CLI overrides over manifest defaults over built-in defaults."""
    sep = dict(manifest.separation)

    def pick(value, key, fallback):
        return value if value is not None else sep.get(key, fallback)

    return SeparationConfig(
        n_sources=manifest.n_sources,
        sigma_u=float(pick(getattr(args, "sigma_u", None), "sigma_u", 0.2)),
        sigma_r=float(pick(getattr(args, "sigma_r", None), "sigma_r", 0.2)),
        sigma_s=pick(getattr(args, "sigma_s", None), "sigma_s", None),
        p=float(pick(getattr(args, "p", None), "p", 1.0)),
        outer_iterations=int(pick(getattr(args, "iters", None),
                                  "outer_iterations", 10)),
        init_nmf_iterations=int(pick(getattr(args, "init_iters", None),
                                     "init_nmf_iterations", 30)),
        seed=int(pick(getattr(args, "seed", None), "seed", 0)))


def run_method(manifest: Manifest, method: str, config: SeparationConfig):
    """Separate one mixture with one method.

    Returns (stems, report): time-domain stems trimmed to the mixture
    length, and the RunReport (without scores).
    """
    if method not in METHODS:
        raise ConfigurationError(
            f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    timings = {}
    t0 = time.perf_counter()
    signal, _ = load_wav(manifest.mixture_path)
    X = stft(signal, manifest.stft_config)
    timings["load_and_transform"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if method == "nmf-w":
        factors, kl_trace = kl_nmf(X.magnitude(), config.n_sources,
                                   config.init_nmf_iterations,
                                   seed=config.seed, return_cost=True)
        estimates = [est.values for est in wiener_filter(X, factors)]
        trace = kl_trace
    elif method == "cnmf":
        model, trace = cnmf_sparse(
            X, config.n_sources, p=config.p, sigma_s=config.sigma_s,
            iterations=config.outer_iterations, seed=config.seed,
            init_nmf_iterations=config.init_nmf_iterations)
        W, H = model.factors.templates, model.factors.activations
        estimates = [np.outer(W[:, k], H[k]) * model.phases[k]
                     for k in range(config.n_sources)]
    else:
        frames = manifest.require_onsets()
        onsets = [OnsetDomain(f, X.n_frames) for f in frames]
        sources, trace = separate(X, config, onsets)
        estimates = [s.estimate() for s in sources]
    timings["factorize"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    stems = [istft(ComplexSpectrogram(values=e, config=X.config),
                   length=signal.size) for e in estimates]
    timings["synthesize"] = time.perf_counter() - t0

    snapshot = dataclasses.asdict(config)
    snapshot["sigma_s_resolved"] = resolve_sigma_s(config, X)
    snapshot["stft"] = {"window_length": manifest.stft_config.window_length,
                        "hop": manifest.stft_config.hop,
                        "sample_rate": manifest.stft_config.sample_rate}
    report = RunReport(method=method, manifest=str(manifest.path),
                       config=snapshot,
                       cost_trace=[float(c) for c in trace],
                       timings=timings)
    return stems, report


def _find_manifests(corpus_dir: Path) -> list[Path]:
    return sorted(corpus_dir.glob(f"*/{MANIFEST_NAME}"))


def _load_references(manifest: Manifest):
    if manifest.source_paths is None:
        raise ValidationError(
            f"{manifest.path}: manifest lists no ground-truth sources")
    return [load_wav(p)[0] for p in manifest.source_paths]


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if x.size >= n:
        return x[:n]
    return np.concatenate([x, np.zeros(n - x.size)])


# ---------------------------------------------------------------------------
# subcommands

def _synth_one(out_dir: str, corpus_seed: int, index: int,
               segment_duration: float) -> str:
    gt = synth_damped_mixture(mixture_seed(corpus_seed, index),
                              segment_duration=segment_duration)
    path = save_manifest(Path(out_dir) / f"mix{index:04d}", gt)
    return str(path)


def cmd_synth(args) -> int:
    out_dir = _resolve_out(args.out, "corpus")
    if args.count == 0:
        print("warning: count is 0, writing an empty corpus", file=sys.stderr)
        out_dir.mkdir(parents=True, exist_ok=True)
        return EXIT_OK
    if args.count < 0:
        raise ConfigurationError("count must be >= 0")
    jobs = [(str(out_dir), args.seed, i, args.segment_duration)
            for i in range(args.count)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            paths = list(pool.map(_synth_one, *zip(*jobs)))
    else:
        paths = [_synth_one(*job) for job in jobs]
    print(f"wrote {len(paths)} mixtures under {out_dir}")
    return EXIT_OK


def cmd_separate(args) -> int:
    manifest = load_manifest(args.manifest)
    config = _config_from(manifest, args)
    stems, report = run_method(manifest, args.method, config)
    out_root = Path(args.out) if args.out else manifest.path.parent
    stem_dir = out_root / "stems" / args.method
    stem_dir.mkdir(parents=True, exist_ok=True)
    for k, stem in enumerate(stems):
        clipped = save_wav(stem_dir / f"source{k}.wav", stem,
                           manifest.sample_rate)
        report.clipped_samples[f"source{k}"] = clipped
        if clipped:
            print(f"warning: source{k} clipped {clipped} samples",
                  file=sys.stderr)
    (stem_dir / "report.json").write_text(report.to_json() + "\n")
    print(f"{args.method}: wrote {len(stems)} stems to {stem_dir} "
          f"(final cost {report.cost_trace[-1]:.6g})")
    return EXIT_OK


def _eval_rows(manifest_path: Path, methods) -> tuple[list, dict]:
    manifest = load_manifest(manifest_path)
    refs = _load_references(manifest)
    n = min(r.size for r in refs)
    refs = np.stack([r[:n] for r in refs])
    name = manifest_path.parent.name
    rows, per_method = [], {}
    for method in methods:
        stem_dir = manifest_path.parent / "stems" / method
        stem_paths = [stem_dir / f"source{k}.wav"
                      for k in range(manifest.n_sources)]
        missing = [p for p in stem_paths if not p.exists()]
        if missing:
            rows.append({"row_type": "skip", "mixture": name, "method": method,
                         "source": "", "sdr_db": "", "sir_db": "", "sar_db": "",
                         "status": "skipped",
                         "reason": f"missing stems: {missing[0].name}"})
            continue
        ests = np.stack([_fit_length(load_wav(p)[0], n) for p in stem_paths])
        scores, _ = bss_eval(ests, refs)
        per_method[method] = scores
        for k, s in enumerate(scores):
            rows.append({"row_type": "per_source", "mixture": name,
                         "method": method, "source": k,
                         "sdr_db": f"{s.sdr_db:.4f}",
                         "sir_db": f"{s.sir_db:.4f}",
                         "sar_db": f"{s.sar_db:.4f}",
                         "status": "ok", "reason": ""})
    return rows, per_method


def cmd_eval(args) -> int:
    corpus = Path(args.corpus_dir)
    methods = _parse_methods(args.methods)
    manifests = _find_manifests(corpus)
    rows = []
    collected = {m: [] for m in methods}
    for mpath in manifests:
        mixture_rows, per_method = _eval_rows(mpath, methods)
        rows.extend(mixture_rows)
        for method, scores in per_method.items():
            collected[method].extend(scores)
    for method in methods:
        if collected[method]:
            agg = aggregate(collected[method])
            rows.append({"row_type": "aggregate", "mixture": "(mean)",
                         "method": method, "source": "(all)",
                         "sdr_db": f"{agg['sdr_db']:.4f}",
                         "sir_db": f"{agg['sir_db']:.4f}",
                         "sar_db": f"{agg['sar_db']:.4f}",
                         "status": "ok", "reason": f"n={agg['count']}"})
    out_path = Path(args.out) if args.out else corpus / "eval.csv"
    _write_csv(out_path, EVAL_CSV_SCHEMA,
               ["row_type", "mixture", "method", "source",
                "sdr_db", "sir_db", "sar_db", "status", "reason"], rows)
    print(f"wrote {out_path} ({len(rows)} rows)")
    return EXIT_OK


def _sweep_unit(manifest_path: str, sigma_u: float, sigma_r: float,
                iters: int, init_iters: int, seed: int):
    """One (grid cell, mixture) separation + scoring; runs in workers."""
    try:
        manifest = load_manifest(manifest_path)
        config = SeparationConfig(
            n_sources=manifest.n_sources, sigma_u=sigma_u, sigma_r=sigma_r,
            outer_iterations=iters, init_nmf_iterations=init_iters, seed=seed)
        signal, _ = load_wav(manifest.mixture_path)
        X = stft(signal, manifest.stft_config)
        onsets = [OnsetDomain(f, X.n_frames) for f in manifest.require_onsets()]
        sources, _ = separate(X, config, onsets)
        stems = np.stack([istft(ComplexSpectrogram(values=s.estimate(),
                                                   config=X.config),
                                length=signal.size) for s in sources])
        refs = _load_references(manifest)
        n = min(min(r.size for r in refs), stems.shape[1])
        scores, _ = bss_eval(stems[:, :n], np.stack([r[:n] for r in refs]))
        return (sigma_u, sigma_r, [(s.sdr_db, s.sir_db, s.sar_db)
                                   for s in scores], None)
    except Exception as exc:  # recorded per cell in the CSV error column
        return (sigma_u, sigma_r, [], f"{type(exc).__name__}: {exc}")


def cmd_sweep(args) -> int:
    corpus = Path(args.corpus_dir)
    grid_u = _parse_grid(args.sigma_u, "--sigma-u")
    grid_r = _parse_grid(args.sigma_r, "--sigma-r")
    manifests = _find_manifests(corpus)
    if not manifests:
        raise ValidationError(f"no {MANIFEST_NAME} files under {corpus}")
    units = [(str(m), su, sr, args.iters or 10, args.init_iters or 30,
              args.seed or 0)
             for su in grid_u for sr in grid_r for m in manifests]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_unit, *zip(*units)))
    else:
        results = [_sweep_unit(*u) for u in units]

    rows = []
    for su in grid_u:
        for sr in grid_r:
            cell = [r for r in results if r[0] == su and r[1] == sr]
            errors = [r[3] for r in cell if r[3]]
            triples = [t for r in cell for t in r[2]]
            if triples:
                arr = np.asarray(triples)
                means = arr.mean(axis=0)
                rows.append({"sigma_u": su, "sigma_r": sr,
                             "sdr_db": f"{means[0]:.4f}",
                             "sir_db": f"{means[1]:.4f}",
                             "sar_db": f"{means[2]:.4f}",
                             "n_scores": len(triples),
                             "error": errors[0] if errors else ""})
            else:
                rows.append({"sigma_u": su, "sigma_r": sr, "sdr_db": "",
                             "sir_db": "", "sar_db": "", "n_scores": 0,
                             "error": errors[0] if errors else "no results"})
    out_path = Path(args.out) if args.out else corpus / "sweep.csv"
    _write_csv(out_path, SWEEP_CSV_SCHEMA,
               ["sigma_u", "sigma_r", "sdr_db", "sir_db", "sar_db",
                "n_scores", "error"], rows)
    print(f"wrote {out_path} ({len(rows)} grid cells)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plumbing

def _write_csv(path: Path, schema: int, header: list[str], rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={schema}\n")
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _resolve_out(out, default_name: str) -> Path:
    if out:
        return Path(out)
    root = os.environ.get(OUT_ENV_VAR)
    return Path(root) / default_name if root else Path(default_name)


def _parse_grid(text, flag: str) -> list[float]:
    if not text:
        raise ConfigurationError(f"{flag} grid must not be empty")
    try:
        values = [float(v) for v in str(text).split(",") if v != ""]
    except ValueError as exc:
        raise ConfigurationError(f"bad {flag} grid {text!r}") from exc
    if not values:
        raise ConfigurationError(f"{flag} grid must not be empty")
    return values


def _parse_methods(text) -> list[str]:
    methods = [m for m in str(text).split(",") if m]
    for m in methods:
        if m not in METHODS:
            raise ConfigurationError(
                f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    return methods


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phasecnmf",
        description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--seed", type=int, default=1, help="corpus seed")
    p.add_argument("--count", type=int, default=30, help="number of mixtures")
    p.add_argument("--segment-duration", type=float, default=1.0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help=f"corpus directory (default: $"
                   f"{OUT_ENV_VAR}/corpus or ./corpus)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("separate", help="separate one mixture")
    p.add_argument("manifest", help="path to a mixture manifest")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--sigma-u", dest="sigma_u", type=float)
    p.add_argument("--sigma-r", dest="sigma_r", type=float)
    p.add_argument("--sigma-s", dest="sigma_s", type=float)
    p.add_argument("--p", dest="p", type=float)
    p.add_argument("--iters", type=int, help="descent sweeps (default 10)")
    p.add_argument("--init-iters", dest="init_iters", type=int,
                   help="KL-NMF iterations (default 30)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="stems root (default: next to the manifest)")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("eval", help="score stems against ground truth")
    p.add_argument("corpus_dir")
    p.add_argument("--methods", default=",".join(METHODS),
                   help="comma-separated subset of methods")
    p.add_argument("--out", help="CSV path (default: <corpus>/eval.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid-sweep sigma_u x sigma_r")
    p.add_argument("corpus_dir")
    p.add_argument("--sigma-u", dest="sigma_u", required=True,
                   help="comma-separated grid, e.g. 0.01,0.05,0.2,1,5")
    p.add_argument("--sigma-r", dest="sigma_r", required=True,
                   help="comma-separated grid")
    p.add_argument("--iters", type=int)
    p.add_argument("--init-iters", dest="init_iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="CSV path (default: <corpus>/sweep.csv)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ValidationError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (IngestionError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
