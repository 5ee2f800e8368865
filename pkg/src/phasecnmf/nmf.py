"""KL-divergence NMF with multiplicative updates, plus Wiener soft-masking.

This is both a baseline separator (factorize the magnitude spectrogram,
mask the complex mixture by relative modeled power) and the initializer
for the complex factorizations in :mod:`phasecnmf.cnmf`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .transform import ComplexSpectrogram

EPS = 1e-12


@dataclass
class FactorModel:
    """Nonnegative factorization V ~ templates @ activations.

    templates: F x K spectral templates, activations: K x T.
    """

    templates: np.ndarray
    activations: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.templates, dtype=np.float64)
        H = np.asarray(self.activations, dtype=np.float64)
        if W.ndim != 2 or H.ndim != 2 or W.shape[1] != H.shape[0]:
            raise ValidationError(
                f"incompatible factor shapes {W.shape} and {H.shape}")
        if (W < 0).any() or (H < 0).any():
            raise ValidationError("factors must be nonnegative")
        self.templates, self.activations = W, H

    @property
    def n_components(self) -> int:
        return self.templates.shape[1]

    def approximation(self) -> np.ndarray:
        return self.templates @ self.activations


def kl_divergence(V: np.ndarray, Vhat: np.ndarray) -> float:
    """Generalized KL divergence sum(V*log(V/Vhat) - V + Vhat), 0*log0 = 0."""
    Vhat = np.maximum(Vhat, EPS)
    log_term = np.where(V > 0, V * np.log(np.maximum(V, EPS) / Vhat), 0.0)
    return float(np.sum(log_term - V + Vhat))


def kl_nmf(V, n_components: int, iterations: int = 30, seed=0,
           return_cost: bool = False):
    """Factorize a nonnegative matrix with the standard KL multiplicative
    updates.

    Parameters
    ----------
    V : array, shape (F, T)
        Nonnegative data (here: a magnitude spectrogram).
    n_components : int
        Number of templates K.
    iterations : int
        Full (templates, activations) update pairs to run.
    seed : int or numpy seed-like
        Factors start uniform random in (0, 1]; the same seed reproduces
        the run bit for bit.
    return_cost : bool
        Also return the KL cost recorded after init and after every
        iteration (length iterations + 1).  The sequence is non-increasing.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2:
        raise ValidationError(f"expected a 2-D matrix, got shape {V.shape}")
    if (V < 0).any():
        raise ValidationError("kl_nmf input must be nonnegative")
    if n_components < 1 or iterations < 1:
        raise ValidationError("n_components and iterations must be >= 1")

    F, T = V.shape
    rng = np.random.default_rng(seed)
    W = 1.0 - rng.random((F, n_components))  # entries in (0, 1]
    H = 1.0 - rng.random((n_components, T))

    cost = [kl_divergence(V, W @ H)]
    for _ in range(iterations):
        WH = np.maximum(W @ H, EPS)
        W *= (V / WH) @ H.T / np.maximum(H.sum(axis=1), EPS)
        W = np.maximum(W, EPS)
        WH = np.maximum(W @ H, EPS)
        H *= W.T @ (V / WH) / np.maximum(W.sum(axis=0), EPS)[:, None]
        H = np.maximum(H, EPS)
        cost.append(kl_divergence(V, W @ H))

    model = FactorModel(templates=W, activations=H)
    if return_cost:
        return model, np.array(cost)
    return model


def wiener_filter(X: ComplexSpectrogram, model: FactorModel) -> list[ComplexSpectrogram]:
    """Split the complex mixture by relative modeled power.

    Each source gets X * (W_k H_k)^2 / sum_l (W_l H_l)^2; the estimates sum
    back to X exactly and all carry the mixture phase.  Bins where every
    model power is zero are split equally among the sources.
    """
    W, H = model.templates, model.activations
    if W.shape[0] != X.n_bins or H.shape[1] != X.n_frames:
        raise ValidationError(
            f"factor shapes {W.shape}x{H.shape} do not match spectrogram "
            f"{X.n_bins}x{X.n_frames}")
    K = model.n_components
    power = np.stack([np.outer(W[:, k], H[k]) ** 2 for k in range(K)])
    total = power.sum(axis=0)
    dead = total == 0
    masks = np.where(dead, 1.0 / K, power / np.where(dead, 1.0, total))
    return [ComplexSpectrogram(values=X.values * masks[k], config=X.config)
            for k in range(K)]
