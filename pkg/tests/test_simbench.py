import numpy as np
import pytest

from skbv import filters
from skbv.errors import DataError
from skbv.sampler import SamplerConfig
from skbv.simbench import (
    SimDesign,
    SimResult,
    _cluster_sizes,
    _place_clusters,
    run_grid,
    simulate,
    summarize,
)

from oracles import naive_quantile


def _desk(n=80, n_u=150, **kw):
    base = dict(
        n=n, n_g=n, n_u=n_u, n_relevant=10, n_clusters=2, effect_size=1.0, seed=0
    )
    base.update(kw)
    return SimDesign(**base)


class TestDesign:
    def test_validation(self):
        with pytest.raises(DataError):
            _desk(n_clusters=11)  # more clusters than relevant SNPs
        with pytest.raises(DataError):
            _desk(effect_size=-1.0)
        with pytest.raises(DataError):
            SimDesign(genotype_source="real-subset")

    def test_nsr_is_reciprocal_effect(self):
        assert _desk(effect_size=0.2).nsr == pytest.approx(5.0)
        assert _desk(effect_size=0.0).nsr == np.inf

    def test_cluster_sizes_even(self):
        assert _cluster_sizes(30, 3) == [10, 10, 10]
        assert _cluster_sizes(10, 3) == [4, 3, 3]
        assert _cluster_sizes(30, 30) == [1] * 30

    def test_placement_contiguous_non_overlapping(self, rng):
        for _ in range(50):
            sizes = [5, 3, 2]
            idx = _place_clusters(rng, 100, sizes)
            assert len(idx) == len(set(idx.tolist())) == 10
            assert idx.min() >= 0 and idx.max() < 100
            # adjacent clusters may touch, so maximal runs can merge
            runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
            assert len(runs) <= len(sizes)
            for r in runs:
                np.testing.assert_array_equal(np.diff(r), 1)


class TestSimulate:
    def test_shapes_and_determinism(self):
        d = _desk(seed=4)
        ds1, pair1, truth1 = simulate(d)
        ds2, pair2, truth2 = simulate(d)
        assert ds1.n == 80 and ds1.n_u == 150
        np.testing.assert_array_equal(ds1.G, ds2.G)
        np.testing.assert_array_equal(pair1.G_tilde, pair2.G_tilde)
        np.testing.assert_array_equal(truth1, truth2)

    def test_single_cluster_contiguous(self):
        ds, pair, truth = simulate(_desk(n_clusters=1, seed=7))
        np.testing.assert_array_equal(np.diff(np.sort(truth)), 1)
        assert len(truth) == 10

    def test_all_singletons(self):
        ds, pair, truth = simulate(_desk(n_clusters=10, seed=8))
        assert len(truth) == 10

    def test_genotypes_binary_with_sane_maf(self):
        ds, _, _ = simulate(_desk(n=300, seed=2))
        assert set(np.unique(ds.G)) <= {0.0, 1.0}
        freqs = ds.G.mean(axis=0)
        assert freqs.min() > 0.0 and freqs.max() < 0.75

    def test_signal_in_phenotype(self):
        d = _desk(n=200, effect_size=2.0, seed=3)
        ds, _, truth = simulate(d)
        null = simulate(_desk(n=200, effect_size=0.0, seed=3))[0]
        assert ds.y.var() > null.y.var() * 1.5

    def test_knockoffs_carry_no_signal(self):
        # u~ = 0: y depends only on original columns
        d = _desk(n=150, effect_size=1.5, seed=6)
        ds, pair, truth = simulate(d)
        resid = ds.y - ds.X @ np.linalg.lstsq(ds.X, ds.y, rcond=None)[0]
        corr_true = np.abs(
            [np.corrcoef(resid, pair.G[:, j])[0, 1] for j in truth]
        )
        corr_kn = np.abs(
            [np.corrcoef(resid, pair.G_tilde[:, j])[0, 1] for j in truth]
        )
        assert np.mean(corr_true) > np.mean(corr_kn)

    def test_covariates_shape(self):
        ds, _, _ = simulate(_desk())
        assert ds.X.shape == (80, 3)
        np.testing.assert_array_equal(ds.X[:, 0], 1.0)

    def test_n_must_equal_n_g(self):
        with pytest.raises(DataError, match="identity link"):
            simulate(SimDesign(n=10, n_g=12, n_u=50, n_relevant=5, n_clusters=1))


@pytest.fixture(scope="module")
def grid_result():
    cfg = SamplerConfig(n_iter=600, n_burn=300, n_thin=10)
    designs = [_desk(effect_size=1.0), _desk(effect_size=0.5, seed=1)]
    return run_grid(
        designs,
        models=("nonspatial", "bh"),
        q=0.2,
        replicates=3,
        config=cfg,
        seed=3,
    )


class TestRunGrid:
    def test_row_count(self, grid_result):
        assert len(grid_result.rows) == 2 * 2 * 3

    def test_deterministic(self, grid_result):
        cfg = SamplerConfig(n_iter=600, n_burn=300, n_thin=10)
        designs = [_desk(effect_size=1.0), _desk(effect_size=0.5, seed=1)]
        again = run_grid(
            designs,
            models=("nonspatial", "bh"),
            q=0.2,
            replicates=3,
            config=cfg,
            seed=3,
        )
        for a, b in zip(grid_result.rows, again.rows):
            assert a["fdp"] == b["fdp"] and a["tpp"] == b["tpp"]

    def test_parallel_matches_serial(self):
        cfg = SamplerConfig(n_iter=400, n_burn=200, n_thin=10)
        designs = [_desk(effect_size=1.0)]
        serial = run_grid(designs, models=("bh",), replicates=4, config=cfg, n_jobs=1)
        parallel = run_grid(designs, models=("bh",), replicates=4, config=cfg, n_jobs=2)
        for a, b in zip(serial.rows, parallel.rows):
            assert a["fdp"] == b["fdp"] and a["tpp"] == b["tpp"]

    def test_failed_model_recorded_grid_continues(self):
        cfg = SamplerConfig(n_iter=300, n_burn=100)
        res = run_grid(
            [_desk()], models=("bogus", "bh"), replicates=2, config=cfg
        )
        bogus = [r for r in res.rows if r["model"] == "bogus"]
        bh = [r for r in res.rows if r["model"] == "bh"]
        assert all(r["error"] for r in bogus)
        assert all(not r["error"] for r in bh)

    def test_csv_roundtrip(self, grid_result, tmp_path):
        path = tmp_path / "res.csv"
        grid_result.to_csv(path)
        back = SimResult.from_csv(path)
        assert len(back.rows) == len(grid_result.rows)
        assert back.rows[0]["fdp"] == pytest.approx(grid_result.rows[0]["fdp"])


class TestSummarize:
    def _fake_result(self):
        rows = []
        vals = [(0.1, 0.5), (0.2, 0.7), (0.0, 0.9)]
        for i, (fdp, tpp) in enumerate(vals):
            rows.append(
                {
                    "design": "d",
                    "model": "m",
                    "replicate": i,
                    "fdp": fdp,
                    "tpp": tpp,
                    "error": "",
                }
            )
        return SimResult(rows=rows)

    def test_group_means(self):
        s = summarize(self._fake_result())
        assert len(s) == 1
        assert s[0]["fdp_mean"] == pytest.approx(0.1)
        assert s[0]["tpp_mean"] == pytest.approx(0.7)

    def test_quantiles_match_order_statistic_oracle(self, rng):
        rows = [
            {
                "design": "d",
                "model": "m",
                "replicate": i,
                "fdp": float(v),
                "tpp": float(v) / 2,
                "error": "",
            }
            for i, v in enumerate(rng.random(37))
        ]
        s = summarize(SimResult(rows=rows), quantiles=(0.05, 0.95))[0]
        vals = [r["fdp"] for r in rows]
        assert s["fdp_q05"] == pytest.approx(naive_quantile(vals, 0.05))
        assert s["fdp_q95"] == pytest.approx(naive_quantile(vals, 0.95))

    def test_failed_only_group_omitted_with_warning(self):
        rows = [
            {"design": "d", "model": "m", "replicate": 0, "error": "boom"},
        ]
        with pytest.warns(UserWarning, match="failed"):
            assert summarize(SimResult(rows=rows)) == []


@pytest.mark.slow
class TestNullCalibration:
    def test_zero_signal_rarely_selects(self):
        cfg = SamplerConfig(n_iter=1_500, n_burn=750, n_thin=10)
        hits = 0
        n_seeds = 15
        res = run_grid(
            [_desk(n=100, n_u=200, effect_size=0.0)],
            models=("nonspatial",),
            q=0.2,
            replicates=n_seeds,
            config=cfg,
            n_jobs=4,
            seed=77,
        )
        for r in res.rows:
            assert not r["error"], r["error"]
            if r["n_selected"] > 0:
                hits += 1
        assert hits <= 0.2 * n_seeds
