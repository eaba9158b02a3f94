"""scikit-learn style wrappers around the functional pipeline.

``KnockoffTransformer`` is a fitted sampler for knockoff copies of a
predictor matrix; ``KnockoffSelector`` runs the full chain + filter and
behaves like a feature selector (get_support / transform).
"""

from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_is_fitted

from . import filters
from .data import Dataset, KnockoffPair
from .knockoffs import GaussianKnockoffSampler
from .sampler import SamplerConfig, fit_dataset


class KnockoffTransformer(TransformerMixin, BaseEstimator):
    """Fit a Gaussian knockoff sampler on X; transform returns knockoffs."""

    def __init__(self, assume_independent: bool = False, seed: int = 0):
        self.assume_independent = assume_independent
        self.seed = seed

    def fit(self, X, y=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self.sampler_ = GaussianKnockoffSampler.from_data(
            X, seed=self.seed, assume_independent=self.assume_independent
        )
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "sampler_")
        return self.sampler_.sample(np.asarray(X, dtype=float))


class KnockoffSelector(SelectorMixin, BaseEstimator):
    """Knockoff-filtered Bayesian variable selection as a feature selector.

    fit(X, y) generates knockoffs (unless given), runs one MCMC chain,
    and applies the knockoff filter at level ``q``.  After fitting,
    ``w_bar_`` holds the Rao-Blackwellized statistics, ``support_`` the
    boolean selection mask.
    """

    def __init__(
        self,
        model: str = "nonspatial",
        q: float = 0.2,
        offset: int = 1,
        n_iter: int = 4000,
        n_burn: int = 2000,
        n_thin: int = 10,
        sparsity_cap: float = 100.0,
        assume_independent: bool = False,
        positions=None,
        chromosome=None,
        seed: int = 0,
    ):
        self.model = model
        self.q = q
        self.offset = offset
        self.n_iter = n_iter
        self.n_burn = n_burn
        self.n_thin = n_thin
        self.sparsity_cap = sparsity_cap
        self.assume_independent = assume_independent
        self.positions = positions
        self.chromosome = chromosome
        self.seed = seed

    def fit(self, X, y, X_tilde=None, covariates=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        n, n_u = X.shape
        if X_tilde is None:
            sampler = GaussianKnockoffSampler.from_data(
                X, seed=self.seed + 1, assume_independent=self.assume_independent
            )
            X_tilde = sampler.sample(X)
        positions = (
            np.asarray(self.positions, dtype=np.int64)
            if self.positions is not None
            else np.arange(1, n_u + 1, dtype=np.int64)
        )
        chromosome = (
            np.asarray(self.chromosome, dtype=np.int64)
            if self.chromosome is not None
            else np.ones(n_u, dtype=np.int64)
        )
        Xc = np.ones((n, 1)) if covariates is None else np.atleast_2d(covariates)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # constant columns handled by eligibility
            dataset = Dataset(
                y=y,
                X=Xc,
                G=X,
                Z=np.eye(n),
                positions=positions,
                chromosome=chromosome,
            )
        pair = KnockoffPair.from_matrices(X, np.asarray(X_tilde, dtype=float))
        config = SamplerConfig(
            n_iter=self.n_iter,
            n_burn=self.n_burn,
            n_thin=self.n_thin,
            sparsity_cap=self.sparsity_cap,
            seed=self.seed,
        )
        self.accumulator_ = fit_dataset(dataset, pair, config, model=self.model)
        self.w_bar_ = self.accumulator_.w_bar
        result = filters.select(self.w_bar_, self.q, self.offset)
        self.threshold_ = result.t_star
        self.selected_ = result.selected
        self.support_ = np.zeros(n_u, dtype=bool)
        self.support_[result.selected] = True
        self.n_features_in_ = n_u
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "support_")
        return self.support_
