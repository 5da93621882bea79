"""Posterior predictive category draws and the two accuracy metrics."""

from __future__ import annotations

import numpy as np

from .sampler import PosteriorDraws
from .trees import PackedForest, packed_fitted

__all__ = [
    "predict_draw",
    "posterior_predict",
    "predictive_mean",
    "accuracy_agreement",
    "mode_categories",
    "accuracy_mode",
]


def _categories_from_latents(W: np.ndarray) -> np.ndarray:
    """Map latent rows to codes: 0 (reference) unless some utility is
    nonnegative, in which case the argmax dimension + 1 (ties -> lowest)."""
    best = np.argmax(W, axis=1)
    cats = best + 1
    cats[W[np.arange(W.shape[0]), best] < 0.0] = 0
    return cats


def predict_draw(
    X: np.ndarray,
    forests: list[PackedForest],
    Sigma: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """One predictive category code per row for a single posterior draw."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    G = np.column_stack([packed_fitted(pf, X) for pf in forests])
    L = np.linalg.cholesky(Sigma)
    W = G + rng.standard_normal(G.shape) @ L.T
    return _categories_from_latents(W)


def posterior_predict(
    draws: PosteriorDraws,
    X: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """(N, J) matrix of predictive category codes, one column per kept draw."""
    if not draws.kept_forests:
        raise ValueError("posterior draws carry no stored forests")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    J = len(draws.kept_forests)
    out = np.empty((X.shape[0], J), dtype=np.intp)
    for j in range(J):
        out[:, j] = predict_draw(X, draws.kept_forests[j], draws.kept_sigmas[j], rng)
    return out


def predictive_mean(draws: PosteriorDraws, X: np.ndarray) -> np.ndarray:
    """(N, C) posterior mean of the latent regression functions."""
    if not draws.kept_forests:
        raise ValueError("posterior draws carry no stored forests")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    C = draws.num_latent
    total = np.zeros((X.shape[0], C))
    for forests in draws.kept_forests:
        for c in range(C):
            total[:, c] += packed_fitted(forests[c], X)
    return total / len(draws.kept_forests)


def accuracy_agreement(S: np.ndarray, predicted: np.ndarray) -> float:
    """Fraction of (row, draw) pairs where the predictive category matches."""
    S = np.asarray(S)
    if S.shape[0] != predicted.shape[0]:
        raise ValueError("row count mismatch")
    return float(np.mean(predicted == S[:, None]))


def mode_categories(predicted: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row modal category code and a mask of rows with tied modes.

    Ties resolve to the lowest category code.
    """
    n, _ = predicted.shape
    num_codes = int(predicted.max()) + 1
    modes = np.empty(n, dtype=np.intp)
    ties = np.zeros(n, dtype=bool)
    for i in range(n):
        counts = np.bincount(predicted[i], minlength=num_codes)
        modes[i] = np.argmax(counts)
        ties[i] = np.count_nonzero(counts == counts[modes[i]]) > 1
    return modes, ties


def accuracy_mode(S: np.ndarray, predicted: np.ndarray) -> tuple[float, int]:
    """Fraction of rows whose modal predictive category matches, plus the
    number of rows where the mode was tied."""
    S = np.asarray(S)
    if S.shape[0] != predicted.shape[0]:
        raise ValueError("row count mismatch")
    modes, ties = mode_categories(predicted)
    return float(np.mean(modes == S)), int(ties.sum())
