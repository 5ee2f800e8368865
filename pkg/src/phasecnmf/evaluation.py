"""Energy-ratio source separation metrics (SDR, SIR, SAR).

Each estimate is decomposed into a target part (its orthogonal projection
onto the matching reference with a single time-invariant gain), an
interference part (projection onto the span of all references minus the
target) and an artifact remainder.  The three ratios are

    SDR = 10 log10 ||s_target||^2 / ||e_interf + e_artif||^2
    SIR = 10 log10 ||s_target||^2 / ||e_interf||^2
    SAR = 10 log10 ||s_target + e_interf||^2 / ||e_artif||^2

Unlike the classic toolbox this projection allows no distortion filter,
only a scalar gain, so absolute dB values are not comparable with
filter-based implementations; orderings between methods are.  Ratios with
vanishing denominators are capped at +/- cap_db.

Estimates are matched to references by the permutation with the best mean
SIR (sources are few, the search is exhaustive).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError, ValidationError

DEFAULT_CAP_DB = 200.0
PROJECTION_VARIANT = "scalar-gain"


@dataclass(frozen=True)
class EvalScores:
    """Finite per-source scores in dB, clipped to [-cap_db, cap_db]."""

    sdr_db: float
    sir_db: float
    sar_db: float
    projection_variant: str = PROJECTION_VARIANT
    cap_db: float = DEFAULT_CAP_DB


def _db_ratio(num: float, den: float, cap: float) -> float:
    if num <= 0.0:
        return -cap
    if den <= 0.0:
        return cap
    return float(np.clip(10.0 * np.log10(num / den), -cap, cap))


def _decompose(estimate, references, j):
    """Split one estimate against reference j: (target, interference,
    artifacts), mutually orthogonal by construction."""
    ref = references[j]
    s_target = (estimate @ ref) / (ref @ ref) * ref
    gram = references @ references.T
    gains = np.linalg.lstsq(gram, references @ estimate, rcond=None)[0]
    p_all = gains @ references
    return s_target, p_all - s_target, estimate - p_all


def _criteria(s_target, e_interf, e_artif, cap):
    nt = float(s_target @ s_target)
    ni = float(e_interf @ e_interf)
    na = float(e_artif @ e_artif)
    sdr = _db_ratio(nt, float(np.sum((e_interf + e_artif) ** 2)), cap)
    sir = _db_ratio(nt, ni, cap)
    sar = _db_ratio(float(np.sum((s_target + e_interf) ** 2)), na, cap)
    return sdr, sir, sar


def bss_eval(estimates, references, cap_db: float = DEFAULT_CAP_DB):
    """Score K estimated signals against K references.

    Parameters
    ----------
    estimates, references : array-like, shape (K, n_samples)
        Time signals of equal length.
    cap_db : float
        Bound for ratios with vanishing error terms.

    Returns
    -------
    scores : list of EvalScores
        One entry per reference, under the best-SIR assignment.
    perm : ndarray, shape (K,)
        perm[j] is the estimate index matched to reference j.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(references, dtype=np.float64))
    if est.shape != ref.shape:
        raise ValidationError(
            f"estimates {est.shape} and references {ref.shape} must match")
    K = ref.shape[0]
    for j in range(K):
        if not np.any(ref[j]):
            raise EvaluationError(f"reference source {j} has zero energy")

    table = np.empty((K, K, 3))
    for i in range(K):
        for j in range(K):
            table[i, j] = _criteria(*_decompose(est[i], ref, j), cap_db)

    best_perm, best_sir = None, -np.inf
    for perm in itertools.permutations(range(K)):
        mean_sir = float(np.mean([table[perm[j], j, 1] for j in range(K)]))
        if mean_sir > best_sir:
            best_perm, best_sir = perm, mean_sir

    scores = [EvalScores(sdr_db=table[best_perm[j], j, 0],
                         sir_db=table[best_perm[j], j, 1],
                         sar_db=table[best_perm[j], j, 2],
                         cap_db=cap_db)
              for j in range(K)]
    return scores, np.asarray(best_perm)


def aggregate(scores) -> dict:
    """Arithmetic mean of each metric over a flat score collection."""
    scores = list(scores)
    if not scores:
        raise ValidationError("cannot aggregate an empty score set")
    return {
        "sdr_db": float(np.mean([s.sdr_db for s in scores])),
        "sir_db": float(np.mean([s.sir_db for s in scores])),
        "sar_db": float(np.mean([s.sar_db for s in scores])),
        "count": len(scores),
    }
