"""Synthetic three-category data generators and exact outcome probabilities.

Covariates are U1..U5 ~ U(0,1) and V ~ U(0,2). Latent utilities for
categories 1 and 2 are nonlinear functions of the covariates plus bivariate
normal noise; category 3 is the reference (chosen when both utilities are
negative).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .data import Dataset, encode_outcomes

__all__ = [
    "SimSpec",
    "generate",
    "simulated_dataset",
    "bivariate_normal_cdf",
    "outcome_probs",
    "outcome_probs_vs_rho",
]

COLUMNS = ["S", "U1", "U2", "U3", "U4", "U5", "V"]


@dataclass(frozen=True)
class SimSpec:
    n: int
    setting: int = 1
    rho: float = 0.5

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("n must be positive")
        if self.setting not in (1, 2):
            raise ValueError("setting must be 1 or 2")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must be in (-1, 1)")


def latent_means(U: np.ndarray, V: np.ndarray, setting: int) -> np.ndarray:
    g1 = (
        15.0 * np.sin(np.pi * U[:, 0] * U[:, 1])
        + (U[:, 2] - 0.5) ** 2
        - 10.0 * U[:, 3]
        - 5.0 * U[:, 4]
    )
    if setting == 1:
        g2 = (U[:, 2] - 0.5) ** 3 - 20.0 * U[:, 3] * U[:, 4] + 4.0 * V
    else:
        g2 = (U[:, 2] - 0.5) ** 2 - U[:, 3] * U[:, 4] + 4.0 * V
    return np.column_stack([g1, g2])


def generate(spec: SimSpec, rng: np.random.Generator) -> pd.DataFrame:
    """Draw a dataset; outcome S in {1, 2, 3} with 3 the reference."""
    U = rng.uniform(size=(spec.n, 5))
    V = rng.uniform(0.0, 2.0, size=spec.n)
    G = latent_means(U, V, spec.setting)
    cov = np.array([[1.0, spec.rho], [spec.rho, 1.0]])
    W = G + rng.standard_normal((spec.n, 2)) @ np.linalg.cholesky(cov).T
    S = np.where(W.max(axis=1) < 0.0, 3, np.argmax(W, axis=1) + 1)
    df = pd.DataFrame(np.column_stack([U, V]), columns=COLUMNS[1:])
    df.insert(0, "S", S)
    return df


def simulated_dataset(
    spec: SimSpec, rng: np.random.Generator, reference: int = 3
) -> Dataset:
    df = generate(spec, rng)
    S, order = encode_outcomes(df["S"].to_numpy(), reference)
    return Dataset(
        S=S,
        X=df[COLUMNS[1:]].to_numpy(dtype=float),
        label_order=order,
        covariate_names=COLUMNS[1:],
    )


# -- Bivariate normal CDF (Drezner-Wesolowsky with Genz's refinements) -------

_GL6_W = (0.1713244923791704, 0.3607615730481386, 0.4679139345726910)
_GL6_X = (0.9324695142031521, 0.6612093864662645, 0.2386191860831969)
_GL12_W = (
    0.04717533638651183, 0.1069393259953184, 0.1600783285433462,
    0.2031674267230659, 0.2334925365383548, 0.2491470458134028,
)
_GL12_X = (
    0.9815606342467192, 0.9041172563704749, 0.7699026741943047,
    0.5873179542866175, 0.3678314989981802, 0.1252334085114689,
)
_GL20_W = (
    0.01761400713915212, 0.04060142980038694, 0.06267204833410907,
    0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
    0.1316886384491766, 0.1420961093183820, 0.1491729864726037,
    0.1527533871307258,
)
_GL20_X = (
    0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
    0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
    0.5108670019508271, 0.3737060887154195, 0.2277858511416451,
    0.07652652113349734,
)


def _bvn_upper(dh: float, dk: float, r: float) -> float:
    """P(X > dh, Y > dk) for standard bivariate normals with correlation r."""
    if math.isinf(dh) and dh > 0 or math.isinf(dk) and dk > 0:
        return 0.0
    if math.isinf(dh):
        return 1.0 if math.isinf(dk) else float(ndtr(-dk))
    if math.isinf(dk):
        return float(ndtr(-dh))

    if abs(r) < 0.3:
        w, x = _GL6_W, _GL6_X
    elif abs(r) < 0.75:
        w, x = _GL12_W, _GL12_X
    else:
        w, x = _GL20_W, _GL20_X

    h, k = dh, dk
    hk = h * k
    bvn = 0.0
    if abs(r) < 0.925:
        hs = (h * h + k * k) / 2.0
        asr = math.asin(r)
        for wi, xi in zip(w, x):
            for sn in (math.sin(asr * (1.0 - xi) / 2.0),
                       math.sin(asr * (1.0 + xi) / 2.0)):
                bvn += wi * math.exp((sn * hk - hs) / (1.0 - sn * sn))
        bvn = bvn * asr / (4.0 * math.pi) + float(ndtr(-h)) * float(ndtr(-k))
        return min(1.0, max(0.0, bvn))

    if r < 0.0:
        k = -k
        hk = -hk
    if abs(r) < 1.0:
        a_sq = (1.0 - r) * (1.0 + r)
        a = math.sqrt(a_sq)
        bs = (h - k) ** 2
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 16.0
        asr = -(bs / a_sq + hk) / 2.0
        if asr > -100.0:
            bvn = a * math.exp(asr) * (
                1.0 - c * (bs - a_sq) * (1.0 - d * bs / 5.0) / 3.0
                + c * d * a_sq * a_sq / 5.0
            )
        if hk > -100.0:
            b = math.sqrt(bs)
            sp = math.sqrt(2.0 * math.pi) * float(ndtr(-b / a))
            bvn -= math.exp(-hk / 2.0) * sp * b * (
                1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0
            )
        a /= 2.0
        for wi, xi in zip(w, x):
            for xs in ((a * (1.0 - xi)) ** 2, (a * (1.0 + xi)) ** 2):
                asr = -(bs / xs + hk) / 2.0
                if asr > -100.0:
                    rs = math.sqrt(1.0 - xs)
                    sp = 1.0 + c * xs * (1.0 + d * xs)
                    ep = math.exp(-hk * xs / (2.0 * (1.0 + rs) ** 2)) / rs
                    bvn += a * wi * math.exp(asr) * (ep - sp)
        bvn = -bvn / (2.0 * math.pi)
    if r > 0.0:
        bvn += float(ndtr(-max(h, k)))
    else:
        bvn = -bvn
        if k > h:
            if h < 0.0:
                bvn += float(ndtr(k)) - float(ndtr(h))
            else:
                bvn += float(ndtr(-h)) - float(ndtr(-k))
    return min(1.0, max(0.0, bvn))


def bivariate_normal_cdf(h: float, k: float, r: float) -> float:
    """P(X <= h, Y <= k) for standard bivariate normals with correlation r."""
    if not -1.0 < r < 1.0:
        raise ValueError("correlation must be in (-1, 1)")
    return _bvn_upper(-float(h), -float(k), float(r))


# -- Exact category probabilities at fixed latent means ----------------------


def outcome_probs(mu1: float, mu2: float, rho: float) -> tuple[float, float, float]:
    """(P(S=1), P(S=2), P(S=3)) for latents N((mu1, mu2), [[1, rho], [rho, 1]]).

    S=3 means both latents negative; S=1 means latent 1 wins (nonnegative and
    at least latent 2); S=2 is the complement.
    """
    p3 = bivariate_normal_cdf(-mu1, -mu2, rho)
    # S=1 iff W1 >= W2 and W1 >= 0, i.e. W2 - W1 <= 0 and -W1 <= 0.
    scale = math.sqrt(2.0 * (1.0 - rho))
    r12 = math.sqrt((1.0 - rho) / 2.0)
    p1 = bivariate_normal_cdf((mu1 - mu2) / scale, mu1, r12)
    p2 = bivariate_normal_cdf((mu2 - mu1) / scale, mu2, r12)
    return p1, p2, p3


def outcome_probs_vs_rho(
    mu1: float, mu2: float, rho_grid: np.ndarray
) -> pd.DataFrame:
    """Category probabilities across a grid of latent correlations."""
    rows = [outcome_probs(mu1, mu2, float(r)) for r in rho_grid]
    df = pd.DataFrame(rows, columns=["p1", "p2", "p3"])
    df.insert(0, "rho", np.asarray(rho_grid, dtype=float))
    return df
