"""Core data containers and file ingestion.

Matrices are stored dense, one column per SNP, because the sampler is
dominated by per-SNP column access.  Missing values are rejected at load
time.  Two on-disk matrix formats are supported: headerless CSV and a
packed little-endian binary format (magic ``SKBV``, u64 rows, u64 cols,
row-major f64).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

_MAGIC = b"SKBV"


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    """Observed data: phenotype, covariates, linked genotype matrix.

    ``Z`` links the ``n_g`` genotypes to the ``n`` observations; each row
    has exactly one 1.  ``positions``/``chromosome`` give the genomic
    coordinate of each of the ``n_u`` SNP columns of ``G``.
    """

    y: np.ndarray
    X: np.ndarray
    G: np.ndarray
    Z: np.ndarray
    positions: np.ndarray
    chromosome: np.ndarray

    def __post_init__(self):
        y = _freeze(np.asarray(self.y, dtype=float).ravel())
        X = _freeze(np.atleast_2d(np.asarray(self.X, dtype=float)))
        G = _freeze(np.atleast_2d(np.asarray(self.G, dtype=float)))
        Z = _freeze(np.atleast_2d(np.asarray(self.Z, dtype=float)))
        positions = _freeze(np.asarray(self.positions, dtype=np.int64).ravel())
        chromosome = _freeze(np.asarray(self.chromosome, dtype=np.int64).ravel())
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "chromosome", chromosome)
        n, n_g, n_u = y.size, G.shape[0], G.shape[1]
        if X.shape[0] != n:
            raise DataError(
                f"covariate rows ({X.shape[0]}) do not match phenotype length ({n})"
            )
        if Z.shape != (n, n_g):
            raise DataError(
                f"link matrix is {Z.shape}, expected ({n}, {n_g})"
            )
        if positions.size != n_u or chromosome.size != n_u:
            raise DataError(
                f"map length ({positions.size}) does not match SNP count ({n_u})"
            )
        for arr, name in ((y, "phenotype"), (X, "covariates"), (G, "genotypes")):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite value in {name}; missing data is not supported")
        row_sums = Z.sum(axis=1)
        if not (np.all(row_sums == 1) and np.all((Z == 0) | (Z == 1))):
            raise DataError("each row of the link matrix must contain exactly one 1")
        for chrom in np.unique(chromosome):
            pos_c = positions[chromosome == chrom]
            if np.any(np.diff(pos_c) <= 0):
                raise DataError(
                    f"positions not strictly increasing within chromosome {chrom}"
                )
        s2 = column_variances(G, Z)
        if np.any(s2 == 0):
            idx = np.flatnonzero(s2 == 0)
            warnings.warn(
                f"{idx.size} constant SNP column(s) flagged ineligible for inclusion "
                f"(first: {idx[0]})",
                stacklevel=2,
            )

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def n_g(self) -> int:
        return self.G.shape[0]

    @property
    def n_u(self) -> int:
        return self.G.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def linked(self) -> np.ndarray:
        """Genotype matrix lifted to observation space (Z G)."""
        if self.identity_link:
            return self.G
        return self.Z @ self.G

    @property
    def identity_link(self) -> bool:
        return self.n == self.n_g and np.array_equal(self.Z, np.eye(self.n))


@dataclass(frozen=True)
class KnockoffPair:
    """Column-aligned original and knockoff genotype matrices."""

    G: np.ndarray
    G_tilde: np.ndarray
    s2: np.ndarray
    s2_tilde: np.ndarray

    def __post_init__(self):
        G = _freeze(np.atleast_2d(np.asarray(self.G, dtype=float)))
        Gt = _freeze(np.atleast_2d(np.asarray(self.G_tilde, dtype=float)))
        if G.shape != Gt.shape:
            raise DataError(
                f"knockoff matrix is {Gt.shape}, expected {G.shape}"
            )
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "G_tilde", Gt)
        object.__setattr__(self, "s2", _freeze(np.asarray(self.s2, dtype=float).ravel()))
        object.__setattr__(
            self, "s2_tilde", _freeze(np.asarray(self.s2_tilde, dtype=float).ravel())
        )
        if self.s2.size != G.shape[1] or self.s2_tilde.size != G.shape[1]:
            raise DataError("per-column variance length does not match column count")

    @classmethod
    def from_matrices(cls, G, G_tilde, Z=None) -> "KnockoffPair":
        G = np.asarray(G, dtype=float)
        G_tilde = np.asarray(G_tilde, dtype=float)
        if Z is None:
            Z = np.eye(G.shape[0])
        return cls(G, G_tilde, column_variances(G, Z), column_variances(G_tilde, Z))


@dataclass(frozen=True)
class RelatednessBasis:
    """Orthonormal basis spanning the relatedness (population structure) space."""

    R: np.ndarray

    def __post_init__(self):
        R = _freeze(np.atleast_2d(np.asarray(self.R, dtype=float)))
        object.__setattr__(self, "R", R)
        if R.shape[1] > 0:
            gram = R.T @ R
            if np.max(np.abs(gram - np.eye(R.shape[1]))) > 1e-10:
                raise DataError("relatedness basis columns are not orthonormal")

    @property
    def n_R(self) -> int:
        return self.R.shape[1]


def column_variances(M: np.ndarray, Z: np.ndarray | None = None) -> np.ndarray:
    """Sample variances (denominator n-1) of the linked columns Z @ M."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        raise DataError("cannot compute column variances of an empty matrix")
    linked = M if Z is None else np.asarray(Z, dtype=float) @ M
    if linked.shape[0] < 2:
        return np.zeros(linked.shape[1])
    return linked.var(axis=0, ddof=1)


# ---------------------------------------------------------------------------
# matrix / vector file I/O


def save_matrix(path, M: np.ndarray) -> None:
    """Write a matrix as CSV (.csv) or packed binary (anything else)."""
    path = Path(path)
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if path.suffix.lower() == ".csv":
        np.savetxt(path, M, delimiter=",", fmt="%.17g")
    else:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<QQ", M.shape[0], M.shape[1]))
            fh.write(M.astype("<f8").tobytes(order="C"))


def load_matrix(path) -> np.ndarray:
    """Read a matrix written by :func:`save_matrix` (format sniffed by magic)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == _MAGIC:
        with open(path, "rb") as fh:
            fh.read(4)
            rows, cols = struct.unpack("<QQ", fh.read(16))
            buf = fh.read(rows * cols * 8)
        if len(buf) != rows * cols * 8:
            raise DataError(f"truncated binary matrix file: {path}")
        return np.frombuffer(buf, dtype="<f8").reshape(rows, cols).copy()
    return _load_csv_matrix(path)


def _load_csv_matrix(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                bad = next(j for j, c in enumerate(cells) if not _is_float(c))
                raise DataError(
                    f"non-numeric cell at row {i + 1}, column {bad + 1} of {path}"
                ) from None
    if not rows:
        raise DataError(f"empty matrix file: {path}")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(
                f"ragged CSV: row {i + 1} has {len(r)} cells, row 1 has {width} ({path})"
            )
    return np.asarray(rows, dtype=float)


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_vector(path) -> np.ndarray:
    """One value per line."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    vals = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                vals.append(float(line))
            except ValueError:
                raise DataError(f"non-numeric value at line {i + 1} of {path}") from None
    return np.asarray(vals, dtype=float)


def save_vector(path, v: np.ndarray) -> None:
    np.savetxt(path, np.asarray(v, dtype=float).ravel(), fmt="%.17g")


def load_map(path) -> tuple[np.ndarray, np.ndarray]:
    """Map file: CSV with columns chromosome,position (header optional)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    chroms, positions = [], []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if i == 0 and not _is_float(cells[0]):
                continue  # header
            if len(cells) < 2:
                raise DataError(f"map line {i + 1} needs chromosome,position ({path})")
            try:
                chroms.append(int(float(cells[0])))
                positions.append(int(float(cells[1])))
            except ValueError:
                raise DataError(f"non-numeric map entry at line {i + 1} of {path}") from None
    return np.asarray(chroms, dtype=np.int64), np.asarray(positions, dtype=np.int64)


def save_map(path, chromosome, positions) -> None:
    with open(path, "w") as fh:
        fh.write("chromosome,position\n")
        for c, p in zip(chromosome, positions):
            fh.write(f"{int(c)},{int(p)}\n")


def load_dataset(
    genotype_path,
    phenotype_path,
    map_path,
    covariate_path=None,
    link_path=None,
) -> Dataset:
    """Assemble a validated :class:`Dataset` from its component files.

    Z defaults to identity when no link file is given and n == n_g.
    The covariate matrix defaults to a single intercept column.
    """
    G = load_matrix(genotype_path)
    y = load_vector(phenotype_path)
    chromosome, positions = load_map(map_path)
    n, n_g = y.size, G.shape[0]
    if covariate_path is not None:
        X = load_matrix(covariate_path)
    else:
        X = np.ones((n, 1))
    if link_path is not None:
        idx = load_vector(link_path).astype(np.int64)
        if idx.size != n:
            raise DataError(
                f"link file has {idx.size} rows, expected one per observation ({n})"
            )
        if np.any(idx < 0) or np.any(idx >= n_g):
            raise DataError(f"link index out of range [0, {n_g})")
        Z = np.zeros((n, n_g))
        Z[np.arange(n), idx] = 1.0
    else:
        if n != n_g:
            raise DataError(
                f"phenotype length ({n}) does not match genotype rows ({n_g}) "
                "and no link file was given"
            )
        Z = np.eye(n)
    return Dataset(y=y, X=X, G=G, Z=Z, positions=positions, chromosome=chromosome)
