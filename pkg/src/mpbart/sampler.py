"""The three Gibbs samplers (kd, p1, p2) over the latent-utility state.

Each sweep is Step 1 (truncated-normal latent redraw, with or without the
expansion parameter), Step 2 (backfitting MH over all trees), Step 3
(inverse-Wishart covariance redraw followed by trace normalization).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .dists import (
    WishartParams,
    conditional_coefficients,
    sample_alpha_sq,
    sample_inverse_wishart,
    truncated_normal_vector,
)
from .trees import (
    CutpointGrid,
    Forest,
    PackedForest,
    TreePrior,
    default_leaf_sd,
    pack_forest,
    update_tree,
)

__all__ = [
    "ALGORITHMS",
    "ChainConfig",
    "SamplerState",
    "PosteriorDraws",
    "NumericalError",
    "MPBartSampler",
    "run_chain",
]

logger = logging.getLogger(__name__)

ALGORITHMS = ("kd", "p1", "p2")

_EQ1_TOL = 1e-9
_TRACE_TOL = 1e-10
_COND_LIMIT = 1e12
_JITTER = 1e-10


class NumericalError(RuntimeError):
    """Non-finite or invalid sampler state, with the offending iteration."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class ChainConfig:
    burn_in: int
    draws: int
    num_trees: int = 100
    thin: int = 1
    nu: float | None = None  # default C + 1
    psi: np.ndarray | None = None  # default identity
    split_base: float = 0.95
    split_power: float = 2.0
    proposal_probs: tuple[float, float, float, float] = (0.25, 0.25, 0.4, 0.1)
    leaf_k: float = 2.0
    cutpoint_grid_size: int = 100
    store_forests: bool = True
    check_invariants: bool = True
    # Testing hook: skip the alpha1 draw entirely (alpha1 identically 1),
    # which reduces kd and p1 to p2's update on a shared rng stream.
    force_unit_alpha: bool = False

    def resolve(self, C: int) -> tuple[float, np.ndarray, TreePrior]:
        nu = self.nu if self.nu is not None else C + 1.0
        psi = np.asarray(self.psi, dtype=float) if self.psi is not None else np.eye(C)
        if nu < C + 1:
            raise ValueError(f"nu must be at least C+1={C + 1}, got {nu}")
        tree_prior = TreePrior(
            split_base=self.split_base,
            split_power=self.split_power,
            proposal_probs=self.proposal_probs,
            leaf_sd=default_leaf_sd(self.num_trees, self.leaf_k),
            cutpoint_grid_size=self.cutpoint_grid_size,
        )
        return nu, psi, tree_prior


@dataclass
class SamplerState:
    W: np.ndarray  # (N, C) normalized latent utilities
    mu: np.ndarray  # (N, C) normalized fitted means
    Sigma: np.ndarray  # (C, C), trace C
    forests: list[Forest]
    alpha1_sq: float = 1.0
    alpha3_sq: float = 1.0


@dataclass
class PosteriorDraws:
    algorithm: str
    burn_in: int
    thin: int
    label_order: list
    covariate_names: list[str]
    num_trees: int
    # Per-sweep traces (burn-in included).
    sigma_trace: np.ndarray  # (T, C, C)
    tree_depths: np.ndarray  # (T, C, m) mean leaf depth per tree
    mu_l1_trace: np.ndarray  # (T,) ||mu||_1 / N
    alpha1_trace: np.ndarray  # (T,)
    # Kept draws.
    kept_sigmas: np.ndarray  # (J, C, C)
    kept_forests: list[list[PackedForest]]  # [draw][latent dim], normalized scale

    @property
    def num_kept(self) -> int:
        return self.kept_sigmas.shape[0]

    @property
    def num_latent(self) -> int:
        return self.kept_sigmas.shape[1] if self.num_kept else self.sigma_trace.shape[1]


class MPBartSampler:
    """One chain of one algorithm; owns its state, caches, and rng."""

    def __init__(
        self,
        dataset: Dataset,
        config: ChainConfig,
        algorithm: str,
        rng: np.random.Generator,
    ):
        if algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {algorithm!r}; expected {ALGORITHMS}")
        levels = np.unique(dataset.S)
        if levels.size != len(dataset.label_order):
            raise ValueError("every outcome level must appear in the data")
        self.dataset = dataset
        self.config = config
        self.algorithm = algorithm
        self.rng = rng
        self.C = dataset.num_latent
        self.N = dataset.n
        self.nu, self.psi, self.tree_prior = config.resolve(self.C)
        if self.psi.shape != (self.C, self.C):
            raise ValueError("psi has the wrong shape")
        WishartParams(self.nu, self.psi)  # validates
        self.grid = CutpointGrid(dataset.X, config.cutpoint_grid_size)
        self.iteration = 0
        self._initialize()

    # -- Step 0 ------------------------------------------------------------

    def _initialize(self):
        m = self.config.num_trees
        C, N = self.C, self.N
        self.state = SamplerState(
            W=np.zeros((N, C)),
            mu=np.zeros((N, C)),
            Sigma=np.eye(C),
            forests=[Forest.stumps(m) for _ in range(C)],
        )
        # Forest fits in "tree scale": normalized for p1/p2, un-normalized
        # (theta-tilde) for kd. Per-tree fit vectors back the incremental
        # residual updates.
        self.fits = np.zeros((N, C))
        self.tree_fits = [np.zeros((m, N)) for _ in range(C)]
        # Scale the stored forests are expressed in: alpha1 of the most
        # recent kd backfitting pass, 1 for p1/p2.
        self._fit_scale = 1.0
        self._draw_latents(self.state.mu, self.state.Sigma)

    # -- Step 1 ------------------------------------------------------------

    def _draw_latents(self, mu: np.ndarray, Sigma: np.ndarray):
        """Redraw each W_ij from its truncated conditional, j ascending."""
        W = self.state.W
        S = self.dataset.S
        coeffs = conditional_coefficients(Sigma)
        C = self.C
        for j in range(C):
            s_j, tau_sq = coeffs[j]
            if C == 1:
                cond_mean = mu[:, 0].copy()
            else:
                rest = np.delete(np.arange(C), j)
                cond_mean = mu[:, j] + (W[:, rest] - mu[:, rest]) @ s_j
            lower = np.full(self.N, -np.inf)
            upper = np.full(self.N, np.inf)
            upper[S == 0] = 0.0
            own = S == j + 1
            if np.any(own):
                if C == 1:
                    lower[own] = 0.0
                else:
                    others = W[own].copy()
                    others[:, j] = -np.inf
                    lower[own] = np.maximum(0.0, others.max(axis=1))
            other = (S > 0) & ~own
            if np.any(other):
                upper[other] = W[other, S[other] - 1]
            W[:, j] = truncated_normal_vector(
                cond_mean, math.sqrt(tau_sq), lower, upper, self.rng
            )

    def step1(self):
        """Latent redraw; kd/p1 first draw the expansion parameter alpha1^2."""
        if self.algorithm in ("kd", "p1") and not self.config.force_unit_alpha:
            self.state.alpha1_sq = sample_alpha_sq(
                self.nu, self.C, self.psi, self.state.Sigma, self.rng
            )
        else:
            self.state.alpha1_sq = 1.0
        self._draw_latents(self.state.mu, self.state.Sigma)
        if self.config.check_invariants:
            self._check_eq1()

    # -- Step 2 ------------------------------------------------------------

    def step2(self):
        """Backfitting MH pass over every tree of every latent dimension.

        kd fits the un-normalized W-tilde with noise (alpha1 tau_j)^2; p1 and
        p2 fit the normalized W with tau_j^2. Trees are visited tree-index
        outer, dimension inner, so cross-dimension terms see partially
        updated forests.
        """
        alpha1 = math.sqrt(self.state.alpha1_sq)
        if self.algorithm == "kd":
            # The persistent chain state is the normalized mean component, so
            # bring the stored leaf values from last sweep's scale to the
            # current alpha1 before fitting W-tilde.
            ratio = alpha1 / self._fit_scale
            if ratio != 1.0:
                for forest in self.state.forests:
                    for tree in forest.trees:
                        for leaf in tree.leaves():
                            leaf.value *= ratio
                self.fits *= ratio
                for tf in self.tree_fits:
                    tf *= ratio
            self._fit_scale = alpha1
            Wwork = alpha1 * self.state.W
            noise_scale_sq = self.state.alpha1_sq
        else:
            Wwork = self.state.W
            noise_scale_sq = 1.0

        coeffs = conditional_coefficients(self.state.Sigma)
        C, m = self.C, self.config.num_trees
        X = self.dataset.X
        prior = self.tree_prior
        rest_idx = [np.delete(np.arange(C), j) for j in range(C)]

        for b in range(m):
            for j in range(C):
                s_j, tau_sq = coeffs[j]
                tau_eff_sq = noise_scale_sq * tau_sq
                if C == 1:
                    cross = 0.0
                else:
                    rest = rest_idx[j]
                    cross = (Wwork[:, rest] - self.fits[:, rest]) @ s_j
                r = (
                    Wwork[:, j]
                    - (self.fits[:, j] - self.tree_fits[j][b])
                    - cross
                )
                tree, _, fit_new, _ = update_tree(
                    self.state.forests[j].trees[b],
                    X,
                    self.grid,
                    r,
                    tau_eff_sq,
                    prior,
                    self.rng,
                )
                self.state.forests[j].trees[b] = tree
                self.fits[:, j] += fit_new - self.tree_fits[j][b]
                self.tree_fits[j][b] = fit_new

        if self.algorithm == "kd":
            self.state.mu = self.fits / alpha1
        else:
            self.state.mu = self.fits.copy()

    # -- Step 3 ------------------------------------------------------------

    def step3(self):
        """Covariance redraw and trace normalization; rescales W."""
        state = self.state
        alpha1 = math.sqrt(state.alpha1_sq)
        if self.algorithm == "kd":
            eps = alpha1 * state.W - self.fits  # W-tilde minus mu-tilde
        elif self.algorithm == "p1":
            eps = alpha1 * (state.W - state.mu)
        else:
            eps = state.W - state.mu

        M = self.psi + eps.T @ eps
        M = 0.5 * (M + M.T)
        if np.linalg.cond(M) > _COND_LIMIT:
            logger.warning(
                "ill-conditioned residual cross-product at iteration %d; "
                "adding %.0e jitter",
                self.iteration,
                _JITTER,
            )
            M = M + _JITTER * np.eye(self.C)
        sigma_tilde = sample_inverse_wishart(
            WishartParams(self.N + self.nu, M), self.rng
        )
        alpha3_sq = float(np.trace(sigma_tilde)) / self.C
        state.alpha3_sq = alpha3_sq
        state.Sigma = sigma_tilde / alpha3_sq
        state.W = state.mu + eps / math.sqrt(alpha3_sq)

    # -- Sweep and run -----------------------------------------------------

    def sweep(self):
        self.iteration += 1
        self.step1()
        self.step2()
        self.step3()
        if self.config.check_invariants:
            self._check_sweep()

    def run(self) -> PosteriorDraws:
        cfg = self.config
        total = cfg.burn_in + cfg.draws
        C, m = self.C, cfg.num_trees
        sigma_trace = np.empty((total, C, C))
        tree_depths = np.empty((total, C, m))
        mu_l1 = np.empty(total)
        alpha1_trace = np.empty(total)
        kept_sigmas = []
        kept_forests = []

        for t in range(total):
            self.sweep()
            state = self.state
            sigma_trace[t] = state.Sigma
            for j in range(C):
                tree_depths[t, j] = [
                    tree.mean_leaf_depth() for tree in state.forests[j].trees
                ]
            mu_l1[t] = np.abs(state.mu).sum() / self.N
            alpha1_trace[t] = state.alpha1_sq
            if t >= cfg.burn_in and (t - cfg.burn_in) % cfg.thin == 0:
                kept_sigmas.append(state.Sigma.copy())
                if cfg.store_forests:
                    kept_forests.append(self._normalized_packed_forests())

        return PosteriorDraws(
            algorithm=self.algorithm,
            burn_in=cfg.burn_in,
            thin=cfg.thin,
            label_order=self.dataset.label_order,
            covariate_names=self.dataset.covariate_names,
            num_trees=m,
            sigma_trace=sigma_trace,
            tree_depths=tree_depths,
            mu_l1_trace=mu_l1,
            alpha1_trace=alpha1_trace,
            kept_sigmas=(
                np.array(kept_sigmas) if kept_sigmas else np.empty((0, C, C))
            ),
            kept_forests=kept_forests,
        )

    def _normalized_packed_forests(self) -> list[PackedForest]:
        packed = [pack_forest(f) for f in self.state.forests]
        if self.algorithm == "kd":
            scale = 1.0 / math.sqrt(self.state.alpha1_sq)
            packed = [p.scaled(scale) for p in packed]
        return packed

    # -- Invariant checks ----------------------------------------------------

    def _check_eq1(self):
        """Latent rows must satisfy the outcome constraints after Step 1."""
        W = self.state.W
        S = self.dataset.S
        it = self.iteration
        if not np.isfinite(W).all():
            raise NumericalError("non-finite latent utilities", it)
        ref = S == 0
        if np.any(W[ref] > _EQ1_TOL):
            raise NumericalError("reference rows have a positive utility", it)
        nonref = ~ref
        if np.any(nonref):
            rows = np.flatnonzero(nonref)
            own = W[rows, S[rows] - 1]
            if np.any(own < -_EQ1_TOL):
                raise NumericalError("observed category has negative utility", it)
            if np.any(W[rows].max(axis=1) > own + _EQ1_TOL):
                raise NumericalError("observed category is not the argmax", it)

    def _check_sweep(self):
        state = self.state
        it = self.iteration
        if not (np.isfinite(state.Sigma).all() and np.isfinite(state.mu).all()):
            raise NumericalError("non-finite state", it)
        if abs(np.trace(state.Sigma) - self.C) > _TRACE_TOL:
            raise NumericalError("trace constraint violated", it)
        try:
            np.linalg.cholesky(state.Sigma)
        except np.linalg.LinAlgError:
            raise NumericalError("Sigma not positive definite", it) from None


def run_chain(
    dataset: Dataset,
    config: ChainConfig,
    algorithm: str,
    rng: np.random.Generator,
) -> PosteriorDraws:
    """Run one chain: Step 0 init, then burn-in + kept sweeps of Steps 1-3."""
    return MPBartSampler(dataset, config, algorithm, rng).run()
