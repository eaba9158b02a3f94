import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from skbv.data import (
    Dataset,
    KnockoffPair,
    RelatednessBasis,
    column_variances,
    load_dataset,
    load_map,
    load_matrix,
    load_vector,
    save_map,
    save_matrix,
    save_vector,
)
from skbv.errors import DataError


def _toy_dataset(n=6, n_u=4):
    rng = np.random.default_rng(0)
    G = rng.integers(0, 2, size=(n, n_u)).astype(float)
    G[0, 0] = 1.0 - G[1, 0]  # avoid constant columns
    return Dataset(
        y=rng.standard_normal(n),
        X=np.ones((n, 1)),
        G=G,
        Z=np.eye(n),
        positions=np.arange(1, n_u + 1) * 10,
        chromosome=np.ones(n_u, dtype=int),
    )


class TestMatrixIO:
    def test_binary_roundtrip(self, tmp_path, rng):
        M = rng.standard_normal((7, 5))
        path = tmp_path / "m.skbv"
        save_matrix(path, M)
        np.testing.assert_array_equal(load_matrix(path), M)

    def test_csv_roundtrip(self, tmp_path, rng):
        M = rng.standard_normal((4, 3))
        path = tmp_path / "m.csv"
        save_matrix(path, M)
        np.testing.assert_allclose(load_matrix(path), M, rtol=0, atol=0)

    def test_format_sniffed_by_magic(self, tmp_path, rng):
        M = rng.standard_normal((3, 2))
        path = tmp_path / "m.dat"
        save_matrix(path, M)  # non-.csv suffix -> binary
        assert path.read_bytes()[:4] == b"SKBV"
        np.testing.assert_array_equal(load_matrix(path), M)

    def test_ragged_csv_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,2,3\n4,5\n")
        with pytest.raises(DataError, match="ragged"):
            load_matrix(path)

    def test_non_numeric_cell_located(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,2\n3,x\n")
        with pytest.raises(DataError, match="row 2, column 2"):
            load_matrix(path)

    def test_truncated_binary_rejected(self, tmp_path, rng):
        path = tmp_path / "m.skbv"
        save_matrix(path, rng.standard_normal((5, 5)))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(DataError, match="truncated"):
            load_matrix(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_matrix(tmp_path / "nope.csv")

    def test_vector_roundtrip(self, tmp_path, rng):
        v = rng.standard_normal(9)
        path = tmp_path / "v.txt"
        save_vector(path, v)
        np.testing.assert_allclose(load_vector(path), v)

    def test_map_roundtrip(self, tmp_path):
        chrom = np.array([1, 1, 2])
        pos = np.array([10, 20, 5])
        path = tmp_path / "map.csv"
        save_map(path, chrom, pos)
        c2, p2 = load_map(path)
        np.testing.assert_array_equal(c2, chrom)
        np.testing.assert_array_equal(p2, pos)

    @settings(max_examples=25, deadline=None)
    @given(
        arrays(
            np.float64,
            st.tuples(st.integers(1, 6), st.integers(1, 6)),
            elements=st.floats(-1e12, 1e12, allow_nan=False, width=64),
        )
    )
    def test_binary_roundtrip_property(self, M):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "m.bin"
            save_matrix(path, M)
            np.testing.assert_array_equal(load_matrix(path), np.atleast_2d(M))


class TestDataset:
    def test_valid_construction(self):
        ds = _toy_dataset()
        assert ds.n == 6 and ds.n_u == 4 and ds.identity_link

    def test_arrays_frozen(self):
        ds = _toy_dataset()
        with pytest.raises(ValueError):
            ds.y[0] = 1.0

    def test_bad_link_rows(self, rng):
        n, n_u = 5, 3
        Z = np.eye(n)
        Z[0, 0] = 0.5
        with pytest.raises(DataError, match="exactly one 1"):
            Dataset(
                y=rng.standard_normal(n),
                X=np.ones((n, 1)),
                G=rng.integers(0, 2, (n, n_u)).astype(float),
                Z=Z,
                positions=np.arange(1, n_u + 1),
                chromosome=np.ones(n_u, dtype=int),
            )

    def test_positions_must_increase_within_chromosome(self, rng):
        with pytest.raises(DataError, match="strictly increasing"):
            Dataset(
                y=rng.standard_normal(4),
                X=np.ones((4, 1)),
                G=rng.integers(0, 2, (4, 3)).astype(float),
                Z=np.eye(4),
                positions=np.array([10, 10, 20]),
                chromosome=np.ones(3, dtype=int),
            )

    def test_positions_reset_across_chromosomes_ok(self, rng):
        G = rng.integers(0, 2, (6, 4)).astype(float)
        ds = Dataset(
            y=rng.standard_normal(6),
            X=np.ones((6, 1)),
            G=G,
            Z=np.eye(6),
            positions=np.array([10, 20, 5, 15]),
            chromosome=np.array([1, 1, 2, 2]),
        )
        assert ds.n_u == 4

    def test_non_finite_rejected(self, rng):
        y = rng.standard_normal(5)
        y[2] = np.nan
        with pytest.raises(DataError, match="non-finite"):
            Dataset(
                y=y,
                X=np.ones((5, 1)),
                G=rng.integers(0, 2, (5, 2)).astype(float),
                Z=np.eye(5),
                positions=np.array([1, 2]),
                chromosome=np.ones(2, dtype=int),
            )

    def test_constant_column_warns(self, rng):
        G = rng.integers(0, 2, (8, 3)).astype(float)
        G[:, 1] = 1.0
        with pytest.warns(UserWarning, match="constant"):
            Dataset(
                y=rng.standard_normal(8),
                X=np.ones((8, 1)),
                G=G,
                Z=np.eye(8),
                positions=np.array([1, 2, 3]),
                chromosome=np.ones(3, dtype=int),
            )

    def test_linked_with_repeat_observations(self, rng):
        n_g, n = 3, 5
        G = np.array([[0, 1], [1, 0], [1, 1]], dtype=float)
        idx = np.array([0, 0, 1, 2, 2])
        Z = np.zeros((n, n_g))
        Z[np.arange(n), idx] = 1
        ds = Dataset(
            y=rng.standard_normal(n),
            X=np.ones((n, 1)),
            G=G,
            Z=Z,
            positions=np.array([1, 2]),
            chromosome=np.ones(2, dtype=int),
        )
        np.testing.assert_array_equal(ds.linked(), G[idx])


class TestColumnVariances:
    def test_matches_numpy_ddof1(self, rng):
        M = rng.standard_normal((10, 4))
        np.testing.assert_allclose(column_variances(M), M.var(axis=0, ddof=1))

    def test_linked_variances(self, rng):
        M = rng.standard_normal((3, 2))
        idx = np.array([0, 1, 1, 2])
        Z = np.zeros((4, 3))
        Z[np.arange(4), idx] = 1
        np.testing.assert_allclose(
            column_variances(M, Z), M[idx].var(axis=0, ddof=1)
        )


class TestKnockoffPair:
    def test_shape_mismatch(self, rng):
        with pytest.raises(DataError):
            KnockoffPair.from_matrices(
                rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
            )

    def test_from_matrices_variances(self, rng):
        G = rng.standard_normal((6, 3))
        Gt = rng.standard_normal((6, 3))
        pair = KnockoffPair.from_matrices(G, Gt)
        np.testing.assert_allclose(pair.s2, G.var(axis=0, ddof=1))
        np.testing.assert_allclose(pair.s2_tilde, Gt.var(axis=0, ddof=1))


class TestRelatednessBasis:
    def test_orthonormality_enforced(self, rng):
        with pytest.raises(DataError, match="orthonormal"):
            RelatednessBasis(R=rng.standard_normal((5, 2)))

    def test_valid(self, rng):
        Q, _ = np.linalg.qr(rng.standard_normal((6, 2)))
        assert RelatednessBasis(R=Q).n_R == 2


class TestLoadDataset:
    def _write(self, tmp_path, n=5, n_u=3, link=False):
        rng = np.random.default_rng(1)
        n_g = 3 if link else n
        G = rng.integers(0, 2, (n_g, n_u)).astype(float)
        save_matrix(tmp_path / "g.csv", G)
        save_vector(tmp_path / "y.txt", rng.standard_normal(n))
        save_map(tmp_path / "map.csv", np.ones(n_u, int), np.arange(1, n_u + 1))
        if link:
            save_vector(tmp_path / "link.txt", np.array([0, 1, 1, 2, 0]))
        return tmp_path

    def test_identity_link_default(self, tmp_path):
        d = self._write(tmp_path)
        ds = load_dataset(d / "g.csv", d / "y.txt", d / "map.csv")
        assert ds.identity_link and ds.p == 1

    def test_explicit_link(self, tmp_path):
        d = self._write(tmp_path, link=True)
        ds = load_dataset(d / "g.csv", d / "y.txt", d / "map.csv", link_path=d / "link.txt")
        assert ds.n == 5 and ds.n_g == 3

    def test_length_mismatch_without_link(self, tmp_path):
        d = self._write(tmp_path, link=True)  # n_g=3 but y has 5 entries
        with pytest.raises(DataError, match="link"):
            load_dataset(d / "g.csv", d / "y.txt", d / "map.csv")
