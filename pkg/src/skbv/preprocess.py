"""Variable pruning, marginal association ranking, kinship, and the
restricted-regression projection.

Pruning follows the cluster-representative recipe: complete-linkage
hierarchical clustering on 1 - |corr|, dendrogram cut so that every pair
inside a cluster has |corr| >= threshold, then one representative per
cluster chosen by the smallest marginal p-value computed on a held-out
row subset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.cluster.hierarchy as sch
import scipy.linalg
import scipy.spatial.distance as ssd
from scipy import stats

from .errors import DataError

__all__ = [
    "PruneResult",
    "MarginalRanks",
    "prune",
    "marginal_pvalues",
    "ibs_kinship",
    "relatedness_basis",
    "restricted_projection",
]


@dataclass(frozen=True)
class MarginalRanks:
    """Per-column single-SNP t-test p-values and their 1-based ranks.

    Ties are broken by column index (lower index wins) so ranks are a
    permutation of 1..n_u.
    """

    pvalues: np.ndarray
    pvalues_tilde: np.ndarray | None
    ranks: np.ndarray
    ranks_tilde: np.ndarray | None
    flagged: np.ndarray

    @staticmethod
    def _rank(pvalues: np.ndarray) -> np.ndarray:
        order = np.lexsort((np.arange(pvalues.size), pvalues))
        ranks = np.empty(pvalues.size, dtype=np.int64)
        ranks[order] = np.arange(1, pvalues.size + 1)
        return ranks


def marginal_pvalues(
    y: np.ndarray,
    columns: np.ndarray,
    X: np.ndarray | None = None,
    R: np.ndarray | None = None,
    columns_tilde: np.ndarray | None = None,
) -> MarginalRanks:
    """Two-sided t-test p-value per column in the single-SNP linear model.

    The model includes the relatedness basis R and covariates X; each
    column and y are pre-residualized against [R X] (Frisch-Waugh) so the
    slope test matches a full per-column least-squares refit.  Degrees of
    freedom: n - p - n_R - 1.
    """
    y = np.asarray(y, dtype=float).ravel()
    columns = np.atleast_2d(np.asarray(columns, dtype=float))
    if columns.shape[1] < 1:
        raise DataError("need at least one column")
    n = y.size
    W = _confounder_matrix(n, X, R)
    df = n - W.shape[1] - 1
    if df < 1:
        raise DataError(f"not enough observations for the t-test (df={df})")
    Q = _orth(W)
    y_r = y - Q @ (Q.T @ y)
    p, flag = _columnwise_pvalues(y_r, columns, Q, df)
    p_t = None
    ranks_t = None
    if columns_tilde is not None:
        p_t, flag_t = _columnwise_pvalues(y_r, np.atleast_2d(columns_tilde), Q, df)
        flag = flag | flag_t
        ranks_t = MarginalRanks._rank(p_t)
    return MarginalRanks(p, p_t, MarginalRanks._rank(p), ranks_t, flag)


def _confounder_matrix(n, X, R):
    parts = [np.ones((n, 1))]
    if R is not None and np.size(R):
        parts.append(np.atleast_2d(np.asarray(R, dtype=float)))
    if X is not None and np.size(X):
        parts.append(np.atleast_2d(np.asarray(X, dtype=float)))
    return np.hstack(parts)


def _orth(W):
    Q, Rf = np.linalg.qr(W)
    keep = np.abs(np.diag(Rf)) > 1e-12 * max(W.shape)
    return Q[:, keep]


def _columnwise_pvalues(y_r, columns, Q, df):
    C = columns - Q @ (Q.T @ columns)
    cc = np.einsum("ij,ij->j", C, C)
    cy = C.T @ y_r
    yy = y_r @ y_r
    zero = cc <= 1e-12 * max(1.0, yy)
    cc_safe = np.where(zero, 1.0, cc)
    coef = cy / cc_safe
    rss = np.maximum(yy - coef**2 * cc_safe, 0.0)
    se2 = rss / df / cc_safe
    # exactly collinear fit: rss == 0 -> p underflows to 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = coef / np.sqrt(se2)
        t = np.where(np.isfinite(t), t, np.inf * np.sign(coef))
    t = np.nan_to_num(t, nan=0.0)
    p = 2.0 * stats.t.sf(np.abs(t), df)
    p = np.where(zero, 1.0, p)
    return p, zero


@dataclass(frozen=True)
class PruneResult:
    """Correlation-clustering partition of raw SNP columns."""

    clusters: list[np.ndarray]
    representatives: np.ndarray
    holdout_rows: np.ndarray
    pruned_indices: np.ndarray  # == representatives, sorted ascending

    def pruned(self, G_raw: np.ndarray) -> np.ndarray:
        return np.asarray(G_raw)[:, self.pruned_indices]

    def to_json(self) -> str:
        return json.dumps(
            {
                "clusters": [c.tolist() for c in self.clusters],
                "representatives": self.representatives.tolist(),
                "holdout_rows": self.holdout_rows.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PruneResult":
        d = json.loads(text)
        reps = np.asarray(d["representatives"], dtype=np.int64)
        return cls(
            clusters=[np.asarray(c, dtype=np.int64) for c in d["clusters"]],
            representatives=reps,
            holdout_rows=np.asarray(d["holdout_rows"], dtype=np.int64),
            pruned_indices=np.sort(reps),
        )


def prune(
    G_raw: np.ndarray,
    y: np.ndarray,
    corr_threshold: float = 0.5,
    holdout_frac: float = 0.2,
    X: np.ndarray | None = None,
    R: np.ndarray | None = None,
    seed: int = 0,
) -> PruneResult:
    """Cluster columns by |corr| and keep one representative per cluster."""
    if not 0 < corr_threshold < 1:
        raise DataError("corr_threshold must be in (0, 1)")
    if not 0 < holdout_frac < 1:
        raise DataError("holdout_frac must be in (0, 1)")
    G_raw = np.atleast_2d(np.asarray(G_raw, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, n_raw = G_raw.shape
    rng = np.random.default_rng(seed)
    n_hold = int(round(holdout_frac * n))
    if n_hold < 2:
        raise DataError(f"holdout of {n_hold} rows is too small for marginal tests")
    holdout = np.sort(rng.choice(n, size=n_hold, replace=False))

    labels = _complete_linkage_labels(G_raw, corr_threshold)
    Xh = None if X is None else np.atleast_2d(np.asarray(X, dtype=float))[holdout]
    Rh = None if R is None else np.atleast_2d(np.asarray(R, dtype=float))[holdout]
    marg = marginal_pvalues(y[holdout], G_raw[holdout], X=Xh, R=Rh)

    clusters, reps = [], []
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        clusters.append(members)
        best = members[np.argmin(marg.pvalues[members])]  # argmin keeps lowest index on ties
        reps.append(best)
    reps = np.asarray(reps, dtype=np.int64)
    return PruneResult(
        clusters=clusters,
        representatives=reps,
        holdout_rows=holdout,
        pruned_indices=np.sort(reps),
    )


def _complete_linkage_labels(G: np.ndarray, corr_threshold: float) -> np.ndarray:
    n_raw = G.shape[1]
    if n_raw == 1:
        return np.zeros(1, dtype=np.int64)
    corr = np.corrcoef(G, rowvar=False)
    corr = np.nan_to_num(corr, nan=0.0)  # constant columns correlate with nothing
    np.fill_diagonal(corr, 1.0)
    dist = np.clip(1.0 - np.abs(corr), 0.0, None)
    Z = sch.linkage(ssd.squareform(dist, checks=False), method="complete")
    return sch.fcluster(Z, t=1.0 - corr_threshold, criterion="distance")


def ibs_kinship(G: np.ndarray) -> np.ndarray:
    """Identity-by-state kinship: share of loci at which two rows agree."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if not np.all((G == 0) | (G == 1)):
        raise DataError(
            "IBS kinship requires a binary 0/1 variant coding; round or recode first"
        )
    n_u = G.shape[1]
    K = (G @ G.T + (1.0 - G) @ (1.0 - G).T) / n_u
    return 0.5 * (K + K.T)


def relatedness_basis(K: np.ndarray, n_R: int, Z: np.ndarray | None = None):
    """Top-n_R singular vectors of the kinship matrix, lifted to
    observation space via Z and re-orthonormalized."""
    from .data import RelatednessBasis

    K = np.atleast_2d(np.asarray(K, dtype=float))
    n_g = K.shape[0]
    if not 1 <= n_R < n_g:
        raise DataError(f"n_R must be in [1, {n_g})")
    if np.max(np.abs(K - K.T)) > 1e-8:
        raise DataError("kinship matrix must be symmetric")
    U, sv, _ = scipy.linalg.svd(0.5 * (K + K.T))
    rank = int(np.sum(sv > sv[0] * 1e-12))
    if rank < n_R:
        raise DataError(f"kinship matrix has rank {rank} < requested n_R={n_R}")
    R = U[:, :n_R]
    if Z is not None:
        R = np.asarray(Z, dtype=float) @ R
    Q, Rf = np.linalg.qr(R)
    if np.min(np.abs(np.diag(Rf))) < 1e-10:
        raise DataError("lifted relatedness basis is rank deficient")
    return RelatednessBasis(R=Q)


def restricted_projection(
    R: np.ndarray, Z: np.ndarray | None, G: np.ndarray, G_tilde: np.ndarray | None = None
):
    """Project the linked genotype columns off the relatedness space.

    K = (I - R R') Z G for orthonormal R; satisfies R' K = 0.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    ZG = G if Z is None else np.asarray(Z, dtype=float) @ G
    K = _project_out(R, ZG)
    if G_tilde is None:
        return K
    Gt = np.atleast_2d(np.asarray(G_tilde, dtype=float))
    ZGt = Gt if Z is None else np.asarray(Z, dtype=float) @ Gt
    return K, _project_out(R, ZGt)


def _project_out(R, M):
    if R is None or np.size(R) == 0:
        return M.copy()
    R = np.atleast_2d(np.asarray(R, dtype=float))
    return M - R @ (R.T @ M)
