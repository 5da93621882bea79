"""Chain diagnostics: mixing statistics, trace extraction, and histograms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dists import WishartParams, sample_inverse_wishart
from .sampler import PosteriorDraws

__all__ = [
    "lag1_autocorr",
    "avg_tree_depth_trace",
    "sigma_entry_trace",
    "freedman_diaconis_bins",
    "HistogramSummary",
    "histogram",
    "prior_sigma_entry_draws",
    "posterior_summary",
]

_MIN_SERIES = 10


def lag1_autocorr(series: np.ndarray, discard: int = 0) -> float:
    """Lag-1 sample autocorrelation with the denominator-n convention.

    Returns nan for a (numerically) constant series.
    """
    x = np.asarray(series, dtype=float)[discard:]
    if x.ndim != 1:
        raise ValueError("series must be one-dimensional")
    if x.size < _MIN_SERIES:
        raise ValueError(f"need at least {_MIN_SERIES} values, got {x.size}")
    scale = max(1.0, float(np.abs(x).max()))
    x = x - x.mean()
    c0 = np.dot(x, x) / x.size
    if c0 <= (1e-12 * scale) ** 2:
        return float("nan")
    c1 = np.dot(x[:-1], x[1:]) / x.size
    return float(c1 / c0)


def avg_tree_depth_trace(draws: PosteriorDraws) -> np.ndarray:
    """(T, C) per-sweep mean leaf depth, averaged over each dimension's trees."""
    return draws.tree_depths.mean(axis=2)


def sigma_entry_trace(draws: PosteriorDraws, row: int, col: int) -> np.ndarray:
    return draws.sigma_trace[:, row, col]


def freedman_diaconis_bins(values: np.ndarray) -> int:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 1
    q75, q25 = np.percentile(values, [75, 25])
    iqr = q75 - q25
    if iqr <= 0:
        return 1
    width = 2.0 * iqr / values.size ** (1.0 / 3.0)
    span = values.max() - values.min()
    return max(1, int(np.ceil(span / width)))


@dataclass
class HistogramSummary:
    counts: np.ndarray
    edges: np.ndarray
    mean: float
    lower95: float
    upper95: float


def histogram(values: np.ndarray) -> HistogramSummary:
    values = np.asarray(values, dtype=float)
    counts, edges = np.histogram(values, bins=freedman_diaconis_bins(values))
    lo, hi = np.percentile(values, [2.5, 97.5])
    return HistogramSummary(counts, edges, float(values.mean()), float(lo), float(hi))


def prior_sigma_entry_draws(
    params: WishartParams,
    row: int,
    col: int,
    num_draws: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draws of a trace-normalized inverse-Wishart entry, for prior overlays.

    Each draw is rescaled so its trace equals the dimension, matching the
    identifiability constraint the samplers impose.
    """
    C = params.scale.shape[0]
    out = np.empty(num_draws)
    for i in range(num_draws):
        s = sample_inverse_wishart(params, rng)
        out[i] = s[row, col] * C / np.trace(s)
    return out


def _safe_lag1(series: np.ndarray) -> float:
    return lag1_autocorr(series) if series.size >= _MIN_SERIES else float("nan")


def posterior_summary(draws: PosteriorDraws) -> dict:
    """JSON-ready mixing and covariance summary of the kept draws."""
    kept = draws.kept_sigmas
    post = draws.sigma_trace[draws.burn_in :]
    C = draws.num_latent
    entries = {}
    for i in range(C):
        for j in range(i, C):
            series = kept[:, i, j] if kept.size else post[:, i, j]
            lo, hi = np.percentile(series, [2.5, 97.5])
            entries[f"sigma_{i + 1}{j + 1}"] = {
                "mean": float(series.mean()),
                "lower95": float(lo),
                "upper95": float(hi),
                "lag1_autocorr": _safe_lag1(post[:, i, j]),
            }
    depth = avg_tree_depth_trace(draws)[draws.burn_in :]
    return {
        "algorithm": draws.algorithm,
        "burn_in": draws.burn_in,
        "kept_draws": int(draws.num_kept),
        "sigma": entries,
        "mu_l1_lag1_autocorr": _safe_lag1(draws.mu_l1_trace[draws.burn_in :]),
        "avg_tree_depth": {
            f"dim_{j + 1}": float(depth[:, j].mean()) for j in range(C)
        },
    }
