"""Simulation designs and the benchmark grid runner.

Phenotypes follow y ~ N(X beta + G u + G~ u~, sigma2_e I) with u~ = 0:
knockoff columns carry no signal in truth.  Genotypes in synthetic mode
are i.i.d. Bernoulli(maf) columns with maf ~ Uniform(0.1, 0.5), so the
Gaussian equi-correlated knockoffs applied after standardization are
exchangeable by column independence.

The grid is parameterized by effect_size directly; the noise-to-signal
ratio is reported as 1/effect_size with sigma2_e fixed at 1.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from . import filters
from .data import Dataset, KnockoffPair
from .errors import DataError
from .knockoffs import GaussianKnockoffSampler
from .preprocess import marginal_pvalues
from .sampler import SamplerConfig, fit_dataset

_QUANTILE_METHOD = "inverted_cdf"  # nearest-rank order statistic


@dataclass(frozen=True)
class SimDesign:
    """One simulation cell: genotype shape, signal layout, noise level."""

    n: int = 1000
    n_g: int = 1000
    n_u: int = 20_000
    n_relevant: int = 30
    n_clusters: int = 30
    effect_size: float = 1.0
    sigma2_e: float = 1.0
    genotype_source: str = "synthetic-iid"
    genotype_path: str | None = None
    knockoff_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_relevant > self.n_u:
            raise DataError("more relevant SNPs than SNPs")
        if not 1 <= self.n_clusters <= max(self.n_relevant, 1):
            raise DataError("n_clusters must be in [1, n_relevant]")
        if self.effect_size < 0 or self.sigma2_e <= 0:
            raise DataError("effect_size must be >= 0 and sigma2_e > 0")
        if self.genotype_source not in ("synthetic-iid", "real-subset"):
            raise DataError(f"unknown genotype_source {self.genotype_source!r}")
        if self.genotype_source == "real-subset" and self.genotype_path is None:
            raise DataError("real-subset mode needs genotype_path")

    @property
    def nsr(self) -> float:
        """Noise-to-signal ratio: 1 / effect_size at sigma2_e = 1."""
        return np.inf if self.effect_size == 0 else 1.0 / self.effect_size

    def label(self) -> str:
        return f"c{self.n_clusters}_e{self.effect_size:g}"


def _cluster_sizes(n_relevant: int, n_clusters: int) -> list[int]:
    base, extra = divmod(n_relevant, n_clusters)
    return [base + (1 if i < extra else 0) for i in range(n_clusters)]


def _place_clusters(rng, n_u: int, sizes: list[int]) -> np.ndarray:
    """Random non-overlapping contiguous runs; returns relevant indices."""
    total = sum(sizes)
    free = n_u - total
    offsets = np.sort(rng.integers(0, free + 1, size=len(sizes)))
    idx = []
    consumed = 0
    for off, size in zip(offsets, sizes):
        start = int(off) + consumed
        idx.extend(range(start, start + size))
        consumed += size
    return np.asarray(idx, dtype=np.int64)


def simulate(design: SimDesign) -> tuple[Dataset, KnockoffPair, np.ndarray]:
    """Generate one dataset, its knockoff pair, and the true signal set."""
    rng = np.random.default_rng(design.seed)
    n, n_g, n_u = design.n, design.n_g, design.n_u

    if design.genotype_source == "synthetic-iid":
        maf = rng.uniform(0.1, 0.5, size=n_u)
        G = (rng.random((n_g, n_u)) < maf).astype(float)
    else:
        from .data import load_matrix

        G = load_matrix(design.genotype_path)
        if G.shape != (n_g, n_u):
            raise DataError(
                f"genotype file is {G.shape}, design expects ({n_g}, {n_u})"
            )
    if n != n_g:
        raise DataError("simulation uses an identity link; set n == n_g")

    positions = np.arange(1, n_u + 1, dtype=np.int64) * 1000
    chromosome = np.ones(n_u, dtype=np.int64)

    covars = rng.standard_normal((n, 2))
    X = np.column_stack([np.ones(n), covars])
    beta = np.array([1.0, 0.5, -0.5])

    sizes = _cluster_sizes(design.n_relevant, design.n_clusters)
    truth = _place_clusters(rng, n_u, sizes)
    u = np.zeros(n_u)
    u[truth] = design.effect_size

    y = X @ beta + G @ u + np.sqrt(design.sigma2_e) * rng.standard_normal(n)

    if design.knockoff_path is not None:
        from .data import load_matrix

        G_tilde = load_matrix(design.knockoff_path)
        if G_tilde.shape != G.shape:
            raise DataError("knockoff file shape does not match genotypes")
    else:
        sampler = GaussianKnockoffSampler.from_data(
            G,
            seed=design.seed + 1,
            assume_independent=design.genotype_source == "synthetic-iid",
        )
        G_tilde = sampler.sample(G)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # rare constant columns are handled downstream
        dataset = Dataset(
            y=y, X=X, G=G, Z=np.eye(n), positions=positions, chromosome=chromosome
        )
    pair = KnockoffPair.from_matrices(G, G_tilde)
    return dataset, pair, truth


@dataclass
class SimResult:
    """Flat per-replicate rows plus the quantile convention used later."""

    rows: list = field(default_factory=list)
    quantile_method: str = _QUANTILE_METHOD

    _FIELDS = (
        "design",
        "model",
        "replicate",
        "seed",
        "n_clusters",
        "effect_size",
        "nsr",
        "fdp",
        "tpp",
        "n_selected",
        "runtime_s",
        "error",
    )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self._FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r.get(k, "") for k in self._FIELDS})

    @classmethod
    def from_csv(cls, path) -> "SimResult":
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                for k in ("fdp", "tpp", "runtime_s", "effect_size", "nsr"):
                    if r.get(k):
                        r[k] = float(r[k])
                for k in ("replicate", "seed", "n_clusters", "n_selected"):
                    if r.get(k):
                        r[k] = int(r[k])
                rows.append(r)
        return cls(rows=rows)


def _replicate_seed(grid_seed: int, design_idx: int, rep: int) -> int:
    ss = np.random.SeedSequence([grid_seed, design_idx, rep])
    return int(ss.generate_state(1)[0])


def _fit_one(dataset, pair, truth, model, q, config):
    t0 = time.perf_counter()
    if model == "bh":
        marg = marginal_pvalues(dataset.y, dataset.linked(), X=dataset.X[:, 1:])
        selected = filters.bh_select(marg.pvalues, q)
    else:
        acc = fit_dataset(dataset, pair, config, model=model)
        selected = filters.select(acc.w_bar, q).selected
    runtime = time.perf_counter() - t0
    fdp, tpp = filters.evaluate(selected, truth, len(truth))
    return fdp, tpp, len(selected), runtime


def _run_replicate(design_idx, design, models, q, rep, base_config, grid_seed):
    seed = _replicate_seed(grid_seed, design_idx, rep)
    rows = []
    try:
        dataset, pair, truth = simulate(replace(design, seed=seed))
    except Exception as exc:  # failed replicate: record, keep grid alive
        return [
            {
                "design": design.label(),
                "model": m,
                "replicate": rep,
                "seed": seed,
                "n_clusters": design.n_clusters,
                "effect_size": design.effect_size,
                "nsr": design.nsr,
                "error": str(exc),
            }
            for m in models
        ]
    for model in models:
        row = {
            "design": design.label(),
            "model": model,
            "replicate": rep,
            "seed": seed,
            "n_clusters": design.n_clusters,
            "effect_size": design.effect_size,
            "nsr": design.nsr,
            "error": "",
        }
        try:
            cfg = replace(base_config, seed=seed + 1)
            fdp, tpp, n_sel, runtime = _fit_one(dataset, pair, truth, model, q, cfg)
            row.update(fdp=fdp, tpp=tpp, n_selected=n_sel, runtime_s=runtime)
        except Exception as exc:
            row["error"] = str(exc)
        rows.append(row)
    return rows


def run_grid(
    designs: list[SimDesign],
    models=("spatial", "nonspatial"),
    q: float = 0.2,
    replicates: int = 10,
    config: SamplerConfig | None = None,
    n_jobs: int = 1,
    seed: int = 0,
) -> SimResult:
    """Fit every model to every (design, replicate) cell.

    Each replicate owns its seed stream, so results are deterministic for
    a fixed (designs, config, seed) regardless of n_jobs.
    """
    if config is None:
        config = SamplerConfig(n_iter=4000, n_burn=2000, n_thin=10)
    jobs = [
        (i, d, models, q, r, config, seed)
        for i, d in enumerate(designs)
        for r in range(replicates)
    ]
    chunks = Parallel(n_jobs=n_jobs)(delayed(_run_replicate)(*j) for j in jobs)
    result = SimResult()
    for chunk in chunks:
        result.rows.extend(chunk)
    return result


def summarize(result: SimResult, quantiles=(0.05, 0.95)) -> list[dict]:
    """Group by (design, model); mean and order-statistic quantiles of
    fdp/tpp.  Cells with only failed replicates are omitted with a warning."""
    groups: dict[tuple, list[dict]] = {}
    for r in result.rows:
        groups.setdefault((r["design"], r["model"]), []).append(r)
    out = []
    for (design, model), rows in sorted(groups.items()):
        ok = [r for r in rows if not r.get("error")]
        if not ok:
            warnings.warn(f"all replicates failed for {design}/{model}", stacklevel=2)
            continue
        fdp = np.array([r["fdp"] for r in ok])
        tpp = np.array([r["tpp"] for r in ok])
        row = {
            "design": design,
            "model": model,
            "n_replicates": len(ok),
            "n_failed": len(rows) - len(ok),
            "fdp_mean": float(fdp.mean()),
            "tpp_mean": float(tpp.mean()),
            "quantile_method": result.quantile_method,
        }
        for qq in quantiles:
            tag = f"{int(round(qq * 100)):02d}"
            row[f"fdp_q{tag}"] = float(
                np.quantile(fdp, qq, method=result.quantile_method)
            )
            row[f"tpp_q{tag}"] = float(
                np.quantile(tpp, qq, method=result.quantile_method)
            )
        out.append(row)
    return out


def summary_to_csv(path, summary: list[dict]) -> None:
    if not summary:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0].keys()))
        w.writeheader()
        w.writerows(summary)
