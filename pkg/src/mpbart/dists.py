"""Sampling kernels for the distributions used by the posterior samplers.

Everything here is a pure function of its inputs and an explicit
``numpy.random.Generator``; there is no module-level random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import ndtr, ndtri

__all__ = [
    "TruncationInterval",
    "WishartParams",
    "sample_truncated_normal",
    "truncated_normal_vector",
    "sample_inverse_wishart",
    "sample_alpha_sq",
    "mvn_conditional",
    "conditional_coefficients",
]

# Beyond this many sd into a tail, the inverse-CDF route loses precision and
# we switch to exponential rejection sampling.
_TAIL_CUTOFF = 4.0


@dataclass(frozen=True)
class TruncationInterval:
    """Open interval (lower, upper); either bound may be infinite."""

    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(
                f"empty truncation interval: ({self.lower}, {self.upper})"
            )


@dataclass(frozen=True)
class WishartParams:
    """Degrees of freedom and scale matrix of an inverse-Wishart prior."""

    dof: float
    scale: np.ndarray = field(repr=False)

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=float)
        object.__setattr__(self, "scale", scale)
        c = scale.shape[0]
        if scale.shape != (c, c):
            raise ValueError("scale must be square")
        if not np.allclose(scale, scale.T):
            raise ValueError("scale must be symmetric")
        if self.dof <= c - 1:
            raise ValueError(f"dof must exceed dim-1, got {self.dof} for dim {c}")
        try:
            np.linalg.cholesky(scale)
        except np.linalg.LinAlgError as exc:
            raise ValueError("scale must be positive definite") from exc

    @property
    def dim(self) -> int:
        return self.scale.shape[0]


def _rejection_tail(a: float, b: float, rng: np.random.Generator) -> float:
    """Standard-normal draw on (a, b) with a >= _TAIL_CUTOFF.

    Exponential proposal with the optimal rate, truncated to (a, b), accepted
    with probability exp(-(x - lam)^2 / 2) up to a constant.
    """
    lam = 0.5 * (a + math.sqrt(a * a + 4.0))
    # Mass of Exp(lam) shifted at a that lands inside (a, b).
    if math.isinf(b):
        tail_mass = 1.0
    else:
        tail_mass = -math.expm1(-lam * (b - a))
    while True:
        u = rng.uniform()
        x = a - math.log1p(-u * tail_mass) / lam
        if rng.uniform() <= math.exp(-0.5 * (x - lam) ** 2):
            return x


def _inverse_cdf(a: float, b: float, u: float) -> float:
    """Standard-normal quantile of u within (a, b), tail-stable for |a|,|b|<~8."""
    if a >= 0.0:
        # Work in the upper tail via survival probabilities.
        sa = ndtr(-a)
        sb = ndtr(-b) if not math.isinf(b) else 0.0
        return -ndtri(sa - u * (sa - sb))
    if b <= 0.0:
        pa = ndtr(a)
        pb = ndtr(b)
        return ndtri(pa + u * (pb - pa))
    pa = ndtr(a)
    pb = ndtr(b) if not math.isinf(b) else 1.0
    return ndtri(pa + u * (pb - pa))


def sample_truncated_normal(
    mean: float,
    sd: float,
    iv: TruncationInterval,
    rng: np.random.Generator,
) -> float:
    """Draw from N(mean, sd^2) restricted to the open interval iv."""
    if sd <= 0.0:
        raise ValueError(f"sd must be positive, got {sd}")
    a = (iv.lower - mean) / sd
    b = (iv.upper - mean) / sd
    if a >= _TAIL_CUTOFF:
        z = _rejection_tail(a, b, rng)
    elif b <= -_TAIL_CUTOFF:
        z = -_rejection_tail(-b, -a, rng)
    else:
        z = _inverse_cdf(a, b, rng.uniform())
    return mean + sd * z


def truncated_normal_vector(
    mean: np.ndarray,
    sd: float,
    lower: np.ndarray,
    upper: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorized truncated-normal draws sharing a common sd.

    The bulk of the entries go through the inverse CDF on a single batch of
    uniforms; entries whose interval lies deep in a tail are redrawn one by
    one with the rejection sampler, in index order, so the draw sequence is a
    deterministic function of the rng state.
    """
    if sd <= 0.0:
        raise ValueError(f"sd must be positive, got {sd}")
    if np.any(lower >= upper):
        raise ValueError("every truncation interval needs lower < upper")
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    tail = (a >= _TAIL_CUTOFF) | (b <= -_TAIL_CUTOFF)

    u = rng.uniform(size=a.shape)
    z = np.empty_like(a)

    easy = ~tail
    ae = a[easy]
    be = b[easy]
    ue = u[easy]
    ze = np.empty_like(ae)

    hi = ae >= 0.0
    lo = be <= 0.0
    mid = ~(hi | lo)
    if np.any(hi):
        sa = ndtr(-ae[hi])
        sb = ndtr(-be[hi])
        ze[hi] = -ndtri(sa - ue[hi] * (sa - sb))
    if np.any(lo):
        pa = ndtr(ae[lo])
        pb = ndtr(be[lo])
        ze[lo] = ndtri(pa + ue[lo] * (pb - pa))
    if np.any(mid):
        pa = ndtr(ae[mid])
        pb = ndtr(be[mid])
        ze[mid] = ndtri(pa + ue[mid] * (pb - pa))
    z[easy] = ze

    idx = np.flatnonzero(tail)
    if idx.size:
        flip = b[idx] <= -_TAIL_CUTOFF  # mirror lower-tail intervals
        at = np.where(flip, -b[idx], a[idx])
        bt = np.where(flip, -a[idx], b[idx])
        lam = 0.5 * (at + np.sqrt(at * at + 4.0))
        span = -np.expm1(-lam * (bt - at))  # 1 for unbounded intervals
        vals = np.empty(idx.size)
        active = np.arange(idx.size)
        while active.size:
            u1 = rng.uniform(size=active.size)
            u2 = rng.uniform(size=active.size)
            x = at[active] - np.log1p(-u1 * span[active]) / lam[active]
            ok = (np.log(u2) <= -0.5 * (x - lam[active]) ** 2) & (x <= bt[active])
            vals[active[ok]] = x[ok]
            active = active[~ok]
        z[idx] = np.where(flip, -vals, vals)
    return mean + sd * z


def sample_inverse_wishart(p: WishartParams, rng: np.random.Generator) -> np.ndarray:
    """Draw a symmetric PD matrix from inverse-Wishart(dof, scale).

    Uses the Bartlett factor of the companion Wishart draw; the inversion
    goes through triangular solves, never a dense inverse.
    """
    c = p.dim
    # Bartlett factor: lower triangular, chi draws on the diagonal.
    A = np.zeros((c, c))
    df = p.dof - np.arange(c)
    A[np.diag_indices(c)] = np.sqrt(rng.chisquare(df))
    if c > 1:
        rows, cols = np.tril_indices(c, -1)
        A[rows, cols] = rng.standard_normal(rows.size)
    R = np.linalg.cholesky(p.scale)
    # With scale = R R^T, the inverse-Wishart draw is B^T B, B = A^{-1} R^T.
    B = solve_triangular(A, R.T, lower=True)
    S = B.T @ B
    return 0.5 * (S + S.T)


def sample_alpha_sq(
    nu: float,
    C: int,
    Psi: np.ndarray,
    Sigma: np.ndarray,
    rng: np.random.Generator,
) -> float:
    """Draw the squared expansion parameter trace(Psi Sigma^-1) / chi2(nu*C)."""
    try:
        factor = cho_factor(Sigma)
    except np.linalg.LinAlgError as exc:
        raise ValueError("Sigma must be positive definite") from exc
    t = float(np.trace(cho_solve(factor, Psi)))
    return t / rng.chisquare(nu * C)


def mvn_conditional(
    mu_i: np.ndarray,
    Sigma: np.ndarray,
    w: np.ndarray,
    j: int,
) -> tuple[float, float]:
    """Conditional mean and variance of coordinate j given the others.

    Returns (m_j, tau_j_sq) for W_j | W_{-j} under W ~ MVN(mu_i, Sigma).
    Indices are 0-based.
    """
    C = Sigma.shape[0]
    if not 0 <= j < C:
        raise IndexError(f"coordinate {j} out of range for dim {C}")
    if C == 1:
        return float(mu_i[0]), float(Sigma[0, 0])
    s, tau_sq = _conditional_j(Sigma, j)
    rest = np.delete(np.arange(C), j)
    m = float(mu_i[j] + s @ (w[rest] - mu_i[rest]))
    return m, tau_sq


def _conditional_j(Sigma: np.ndarray, j: int) -> tuple[np.ndarray, float]:
    C = Sigma.shape[0]
    rest = np.delete(np.arange(C), j)
    sub = Sigma[np.ix_(rest, rest)]
    try:
        s = np.linalg.solve(sub, Sigma[rest, j])
    except np.linalg.LinAlgError as exc:
        raise ValueError("principal submatrix is singular") from exc
    tau_sq = float(Sigma[j, j] - Sigma[j, rest] @ s)
    if tau_sq <= 0.0:
        raise ValueError("conditional variance not positive; Sigma not PD")
    return s, tau_sq


def conditional_coefficients(Sigma: np.ndarray) -> list[tuple[np.ndarray, float]]:
    """Per-coordinate regression coefficients and conditional variances.

    Entry j is (s_j, tau_j_sq) with s_j the coefficients of W_{-j} - mu_{-j}
    in the conditional mean of W_j. For C == 1 the coefficient vector is
    empty and tau_1^2 is the marginal variance.
    """
    C = Sigma.shape[0]
    if C == 1:
        return [(np.empty(0), float(Sigma[0, 0]))]
    return [_conditional_j(Sigma, j) for j in range(C)]
