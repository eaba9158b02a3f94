"""Gaussian model-X knockoff construction and validation.

Only the equi-correlated diagonal is implemented: after standardizing
the predictors, s_j = min(1, 2*lambda_min(Sigma)) * (1 - 1e-6) for every
column, which keeps the joint covariance of (g, g~) positive definite.
Knockoffs produced by other tools (e.g. HMM-based genotype knockoffs)
are ingested via :func:`load_external_knockoffs`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import Dataset, KnockoffPair, column_variances, load_matrix
from .errors import DataError, NumericalError

_EQUI_SLACK = 1e-6


def equi_s(Sigma: np.ndarray) -> np.ndarray:
    """Equi-correlated decoupling diagonal for a unit-diagonal SPD Sigma."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    lam_min = scipy.linalg.eigh(Sigma, eigvals_only=True, subset_by_index=[0, 0])[0]
    if lam_min <= 0:
        raise NumericalError(
            f"covariance is not positive definite (lambda_min={lam_min:.3e})"
        )
    if lam_min < 1e-8:
        warnings.warn(
            f"covariance is nearly singular (lambda_min={lam_min:.3e}); "
            "knockoffs will be almost perfectly correlated with originals",
            stacklevel=2,
        )
    s = min(1.0, 2.0 * lam_min) * (1.0 - _EQUI_SLACK)
    return np.full(Sigma.shape[0], s)


@dataclass(frozen=True)
class GaussianKnockoffSampler:
    """Sampler for the conditional law g~ | g under the joint Gaussian model.

    ``Sigma is None`` means the identity (independent standardized
    columns), in which case no n_u x n_u matrices are formed.
    """

    Sigma: np.ndarray | None
    s: np.ndarray
    seed: int
    # precomputed pieces of the conditional law
    _mean_op: np.ndarray | None = None  # I - Sigma^{-1} diag(s) (right-multiplied)
    _chol: np.ndarray | None = None  # lower factor of 2diag(s) - diag(s)Sigma^{-1}diag(s)

    @classmethod
    def create(cls, Sigma, s=None, seed: int = 0) -> "GaussianKnockoffSampler":
        if Sigma is None:
            s = np.asarray(s, dtype=float) if s is not None else None
            if s is None:
                raise DataError("s must be given explicitly when Sigma is the identity")
            cond_var = 2.0 * s - s**2
            if np.any(cond_var <= 0) or np.any(s <= 0):
                raise NumericalError("conditional covariance not positive definite")
            return cls(None, s, seed)
        Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
        if s is None:
            s = equi_s(Sigma)
        s = np.asarray(s, dtype=float).ravel()
        Sinv_ds = scipy.linalg.solve(Sigma, np.diag(s), assume_a="pos")
        cond_cov = 2.0 * np.diag(s) - s[:, None] * Sinv_ds
        cond_cov = 0.5 * (cond_cov + cond_cov.T)
        try:
            chol = scipy.linalg.cholesky(cond_cov, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise NumericalError(
                "conditional covariance not positive definite (invalid s)"
            ) from exc
        return cls(Sigma, s, seed, _mean_op=np.eye(len(s)) - Sinv_ds, _chol=chol)

    @classmethod
    def from_data(
        cls, G: np.ndarray, seed: int = 0, assume_independent: bool = False
    ) -> "GaussianKnockoffSampler":
        """Estimate Sigma from standardized columns of G.

        The sample covariance is blended with the identity
        (delta = max(0, 1e-4 - lambda_min)) so the construction stays
        positive definite when n < n_u.
        """
        G = np.atleast_2d(np.asarray(G, dtype=float))
        if assume_independent:
            s = np.full(G.shape[1], 1.0 - _EQUI_SLACK)
            return cls.create(None, s, seed)
        Gs, _, _ = _standardize(G)
        Sigma = (Gs.T @ Gs) / (G.shape[0] - 1)
        lam_min = scipy.linalg.eigh(Sigma, eigvals_only=True, subset_by_index=[0, 0])[0]
        delta = max(0.0, 1e-4 - lam_min)
        if delta > 0:
            Sigma = Sigma + delta * np.eye(Sigma.shape[0])
            Sigma = Sigma / (1.0 + delta)  # restore unit diagonal
        return cls.create(Sigma, None, seed)

    def sample(self, G: np.ndarray, pin_rows: np.ndarray | None = None) -> np.ndarray:
        """Draw a knockoff copy of G, deterministically in the seed.

        Rows listed in ``pin_rows`` (e.g. the hold-out rows used to pick
        cluster representatives) are copied from G unchanged.
        """
        G = np.atleast_2d(np.asarray(G, dtype=float))
        if G.shape[1] != self.s.size:
            raise DataError(
                f"matrix has {G.shape[1]} columns, sampler expects {self.s.size}"
            )
        rng = np.random.default_rng(self.seed)
        Gs, mu, sd = _standardize(G)
        z = rng.standard_normal(G.shape)
        if self.Sigma is None:
            mean = Gs * (1.0 - self.s)
            noise = z * np.sqrt(2.0 * self.s - self.s**2)
        else:
            mean = Gs @ self._mean_op
            noise = z @ self._chol.T
        out = (mean + noise) * sd + mu
        if pin_rows is not None:
            pin = np.asarray(pin_rows, dtype=np.int64).ravel()
            if pin.size and (pin.min() < 0 or pin.max() >= G.shape[0]):
                raise DataError("pin_rows index out of range")
            out[pin] = G[pin]
        return out


def sample_knockoffs(G: np.ndarray, sampler: GaussianKnockoffSampler) -> np.ndarray:
    return sampler.sample(G)


def _standardize(G: np.ndarray):
    mu = G.mean(axis=0)
    sd = G.std(axis=0, ddof=1)
    sd = np.where(sd > 0, sd, 1.0)
    return (G - mu) / sd, mu, sd


@dataclass(frozen=True)
class ExchangeabilityReport:
    max_deviation: float
    tolerance: float
    passed: bool
    n_rows: int


def check_exchangeability(
    G: np.ndarray,
    G_tilde: np.ndarray,
    swaps: np.ndarray | list[int] | None = None,
    tolerance: float = 0.05,
) -> ExchangeabilityReport:
    """Compare joint second moments of (G, G~) against the swapped arrangement.

    For valid knockoffs the two empirical moment matrices agree up to
    Monte Carlo error; the report carries the max absolute deviation and
    a pass flag at the caller-supplied tolerance.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    G_tilde = np.atleast_2d(np.asarray(G_tilde, dtype=float))
    if G.shape != G_tilde.shape:
        raise DataError("original and knockoff matrices must be aligned")
    n, n_u = G.shape
    if swaps is None:
        swaps = np.arange(n_u)
    swaps = np.asarray(swaps, dtype=int)
    W = np.hstack([G, G_tilde])
    Ws = W.copy()
    Ws[:, swaps], Ws[:, swaps + n_u] = W[:, swaps + n_u], W[:, swaps]
    H = (W.T @ W) / n
    Hs = (Ws.T @ Ws) / n
    dev = float(np.max(np.abs(H - Hs)))
    return ExchangeabilityReport(dev, tolerance, dev <= tolerance, n)


def load_external_knockoffs(path, dataset: Dataset) -> KnockoffPair:
    """Ingest a knockoff matrix generated by an external tool."""
    G_tilde = load_matrix(path)
    if G_tilde.shape != dataset.G.shape:
        raise DataError(
            f"knockoff matrix is {G_tilde.shape}, genotype matrix is {dataset.G.shape}"
        )
    return KnockoffPair(
        G=dataset.G,
        G_tilde=G_tilde,
        s2=column_variances(dataset.G, dataset.Z),
        s2_tilde=column_variances(G_tilde, dataset.Z),
    )
