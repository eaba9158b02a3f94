"""SNP proximity structure, Moran-operator basis, and the reduced-rank
CAR prior for the spatial inclusion-probability field.

The basis is built per chromosome and stacked block-diagonally: each
chromosome gets its own intercept and coefficient block while the scale
parameter tau is shared.  Basis columns are the unscaled leading
eigenvectors of the Moran operator (orthonormal, centered), which keeps
the induced prior covariance B' L(rho) B well conditioned.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import expit

from .errors import DataError, NumericalError

_PI_CLAMP = 1e-12


@dataclass(frozen=True)
class ProximityMatrix:
    """Sparse symmetric 0/1 adjacency over SNPs; no cross-chromosome edges."""

    A: sp.csr_matrix
    kind: str
    chromosome: np.ndarray
    d_thresh: int | None = None

    @property
    def n_u(self) -> int:
        return self.A.shape[0]

    def degrees(self) -> np.ndarray:
        return np.asarray(self.A.sum(axis=1)).ravel()


def neighborhood(
    positions: np.ndarray,
    chromosome: np.ndarray,
    kind: str = "simple-k",
    param: int = 2,
) -> ProximityMatrix:
    """Build the SNP adjacency.

    simple-k: SNP i is adjacent to the ``param`` SNPs before and after it
    within its chromosome (the simple structure is k=2).
    distance-threshold: adjacency iff base-pair distance <= ``param``.
    """
    positions = np.asarray(positions, dtype=np.int64).ravel()
    chromosome = np.asarray(chromosome, dtype=np.int64).ravel()
    if positions.size != chromosome.size:
        raise DataError("positions and chromosome must have equal length")
    n_u = positions.size
    rows, cols = [], []
    for chrom in np.unique(chromosome):
        idx = np.flatnonzero(chromosome == chrom)
        pos = positions[idx]
        m = idx.size
        if kind == "simple-k":
            k = int(param)
            for off in range(1, k + 1):
                if off < m:
                    rows.extend(idx[:-off])
                    cols.extend(idx[off:])
        elif kind == "distance-threshold":
            d = int(param)
            j = 0
            for i in range(m):
                while pos[i] - pos[j] > d:
                    j += 1
                for jj in range(j, i):
                    rows.append(idx[jj])
                    cols.append(idx[i])
        else:
            raise DataError(f"unknown neighborhood kind: {kind!r}")
    data = np.ones(len(rows))
    A = sp.coo_matrix((data, (rows, cols)), shape=(n_u, n_u))
    A = (A + A.T).tocsr()
    A.data = np.minimum(A.data, 1.0)
    if A.nnz == 0:
        warnings.warn("isolated graph: proximity matrix has no edges", stacklevel=2)
    return ProximityMatrix(
        A=A,
        kind=kind,
        chromosome=chromosome,
        d_thresh=int(param) if kind == "distance-threshold" else None,
    )


def _moran_eigs(A_block: sp.csr_matrix, n_alpha: int):
    """Leading eigenpairs of the Moran operator of one chromosome block."""
    m = A_block.shape[0]
    total = A_block.sum()
    if total == 0:
        return np.empty(0), np.empty((m, 0))
    scale = m / total

    if m <= 400 or n_alpha >= m - 2:
        Ad = A_block.toarray()
        C = np.eye(m) - np.ones((m, m)) / m
        M = scale * (C @ Ad @ C)
        vals, vecs = scipy.linalg.eigh(M)
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
    else:
        def mv(x):
            xc = x - x.mean()
            y = A_block @ xc
            return scale * (y - y.mean())

        op = spla.LinearOperator((m, m), matvec=mv, dtype=float)
        k = min(n_alpha + 2, m - 2)
        vals, vecs = spla.eigsh(op, k=k, which="LA")
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]

    pos = vals > 1e-10
    if np.sum(pos[:n_alpha]) < min(n_alpha, vals.size):
        warnings.warn(
            f"only {int(np.sum(pos))} positive Moran eigenvalues; basis truncated",
            stacklevel=3,
        )
    keep = np.flatnonzero(pos)[:n_alpha]
    vecs = vecs[:, keep]
    # fix signs for determinism
    signs = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])
    return vals[keep], vecs * signs


@dataclass(frozen=True)
class SpatialBasis:
    """Block-diagonal Moran basis with its reduced-rank CAR prior factor."""

    B: np.ndarray  # n_u x n_alpha_total
    eigenvalues: np.ndarray
    rho: float
    chrom_labels: np.ndarray
    chrom_of_snp: np.ndarray  # block index per SNP row
    chrom_of_col: np.ndarray  # block index per basis column
    prior_covs: tuple  # per-block C = B' L(rho) B
    prior_factors: tuple  # per-block (cho_factor output)

    @property
    def n_alpha(self) -> int:
        return self.B.shape[1]

    @property
    def n_blocks(self) -> int:
        return len(self.chrom_labels)

    def alpha_quad(self, alpha: np.ndarray) -> float:
        """sum over blocks of alpha_b' C_b^{-1} alpha_b."""
        total = 0.0
        for b, (c, low) in enumerate(self.prior_factors):
            ab = alpha[self.chrom_of_col == b]
            if ab.size:
                total += float(ab @ scipy.linalg.cho_solve((c, low), ab))
        return total


def moran_basis(A: ProximityMatrix, n_alpha: int) -> tuple[np.ndarray, np.ndarray]:
    """First n_alpha positive-eigenvalue Moran eigenvectors (single block).

    Returns (eigenvalues, B); columns of B are orthonormal and centered.
    """
    if A.n_u == 0:
        raise DataError("empty proximity matrix")
    labels = np.unique(A.chromosome)
    if labels.size != 1:
        raise DataError("moran_basis expects a single chromosome block; use build_spatial_basis")
    vals, vecs = _moran_eigs(A.A, min(n_alpha, A.n_u))
    return vals, vecs


def prior_precision(B: np.ndarray, A: ProximityMatrix | sp.spmatrix, rho: float):
    """C = B' L(rho) B with L(rho) = (diag(A1) - rho A)^{-1}, factorized.

    Computed by a sparse solve of (diag(A1) - rho A) Y = B; L is never
    formed.  Returns (C, cho_factor(C)).
    """
    if not 0 < rho < 1:
        raise DataError("rho must be in (0, 1)")
    A_mat = A.A if isinstance(A, ProximityMatrix) else A
    B = np.atleast_2d(np.asarray(B, dtype=float))
    deg = np.asarray(A_mat.sum(axis=1)).ravel()
    P = sp.diags(deg) - rho * A_mat
    try:
        lu = spla.splu(P.tocsc())
        Y = lu.solve(B)
    except RuntimeError as exc:
        raise NumericalError(
            f"CAR precision is singular at rho={rho}; try a smaller rho"
        ) from exc
    C = B.T @ Y
    C = 0.5 * (C + C.T)
    try:
        factor = scipy.linalg.cho_factor(C)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(
            f"reduced-rank prior covariance not positive definite at rho={rho}; "
            "try a smaller rho"
        ) from exc
    return C, factor


def build_spatial_basis(
    positions: np.ndarray,
    chromosome: np.ndarray,
    n_alpha: int | None = None,
    rho: float = 0.999,
    kind: str = "simple-k",
    param: int = 2,
    cache_dir=None,
) -> SpatialBasis:
    """Construct the full block-diagonal basis and its prior factors."""
    prox = neighborhood(positions, chromosome, kind=kind, param=param)
    n_u = prox.n_u
    if n_alpha is None:
        n_alpha = 25 if n_u <= 20_000 else 100

    labels = np.unique(prox.chromosome)
    chrom_of_snp = np.searchsorted(labels, prox.chromosome)

    cache_file = None
    if cache_dir is not None:
        h = hashlib.sha256()
        h.update(prox.A.indptr.tobytes())
        h.update(prox.A.indices.tobytes())
        h.update(np.float64(rho).tobytes())
        h.update(np.int64(n_alpha).tobytes())
        from pathlib import Path

        cache_file = Path(cache_dir) / f"basis_{h.hexdigest()[:16]}.skbv"

    if cache_file is not None and cache_file.exists():
        from .data import load_matrix

        # packed layout: row 0 = block index per column, row 1 = eigenvalues,
        # remaining n_u rows = B
        packed = load_matrix(cache_file)
        col_chrom_arr = packed[0].astype(np.int64)
        eigenvalues = packed[1]
        B_full = packed[2:]
    else:
        B_blocks, val_blocks, col_chrom = [], [], []
        for b, lab in enumerate(labels):
            mask = chrom_of_snp == b
            sub = prox.A[np.ix_(mask, mask)].tocsr()
            vals, vecs = _moran_eigs(sub, n_alpha)
            full = np.zeros((n_u, vecs.shape[1]))
            full[mask] = vecs
            B_blocks.append(full)
            val_blocks.append(vals)
            col_chrom.extend([b] * vecs.shape[1])

        B_full = np.hstack(B_blocks) if B_blocks else np.zeros((n_u, 0))
        eigenvalues = np.concatenate(val_blocks) if val_blocks else np.empty(0)
        col_chrom_arr = np.asarray(col_chrom, dtype=np.int64)

    covs, factors = [], []
    for b, lab in enumerate(labels):
        mask = chrom_of_snp == b
        cols = col_chrom_arr == b
        sub = prox.A[np.ix_(mask, mask)].tocsr()
        Bb = B_full[np.ix_(mask, cols)]
        if Bb.shape[1] == 0:
            covs.append(np.empty((0, 0)))
            factors.append((np.empty((0, 0)), True))
            continue
        C, factor = prior_precision(Bb, sub, rho)
        covs.append(C)
        factors.append(factor)

    if cache_file is not None and not cache_file.exists():
        from .data import save_matrix

        packed = np.vstack([col_chrom_arr.astype(float), eigenvalues, B_full])
        save_matrix(cache_file, packed)

    return SpatialBasis(
        B=B_full,
        eigenvalues=eigenvalues,
        rho=rho,
        chrom_labels=labels,
        chrom_of_snp=chrom_of_snp,
        chrom_of_col=col_chrom_arr,
        prior_covs=tuple(covs),
        prior_factors=tuple(factors),
    )


@dataclass
class PiField:
    """Logit-scale inclusion-probability field: logit(pi) = mu + B alpha."""

    mu_pi: np.ndarray  # one intercept per chromosome block
    alpha: np.ndarray

    def pi(self, basis: SpatialBasis) -> np.ndarray:
        return logit_pi(self, basis)

    def logits(self, basis: SpatialBasis) -> np.ndarray:
        mu = np.asarray(self.mu_pi, dtype=float)[basis.chrom_of_snp]
        return mu + basis.B @ self.alpha


def logit_pi(field: PiField, basis: SpatialBasis) -> np.ndarray:
    """Elementwise logistic of the field, clamped for numerical safety."""
    return np.clip(expit(field.logits(basis)), _PI_CLAMP, 1.0 - _PI_CLAMP)
