"""Command-line front end.

Subcommands: simulate | knockoffs | prune | fit | filter | bench.
Every run writes a resolved-config echo (JSON, ``"schema": 1``) so a run
can be reproduced from its outputs.  Exit codes: 0 success, 2 usage,
3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import filters, simbench
from .data import (
    load_dataset,
    load_matrix,
    load_vector,
    save_map,
    save_matrix,
    save_vector,
)
from .errors import DataError, NumericalError
from .knockoffs import GaussianKnockoffSampler, load_external_knockoffs
from .preprocess import ibs_kinship, prune, relatedness_basis
from .sampler import PosteriorAccumulator, SamplerConfig, fit_dataset

SCHEMA = 1


def _echo(path: Path, command: str, params: dict) -> None:
    payload = {"schema": SCHEMA, "command": command}
    for k, v in sorted(params.items()):
        if k in ("func", "command"):
            continue
        payload[k] = str(v) if isinstance(v, Path) else v
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _outdir(path_str: str) -> Path:
    out = Path(path_str)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- simulate ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    design = simbench.SimDesign(
        n=args.n,
        n_g=args.n,
        n_u=args.n_u,
        n_relevant=args.n_relevant,
        n_clusters=args.n_clusters,
        effect_size=args.effect_size,
        sigma2_e=args.sigma2_e,
        seed=args.seed,
    )
    dataset, pair, truth = simbench.simulate(design)
    out = _outdir(args.out)
    save_matrix(out / "genotypes.csv", dataset.G)
    save_matrix(out / "knockoffs.csv", pair.G_tilde)
    save_vector(out / "phenotype.txt", dataset.y)
    save_matrix(out / "covariates.csv", dataset.X)
    save_map(out / "map.csv", dataset.chromosome, dataset.positions)
    save_vector(out / "truth.txt", truth)
    _echo(out / "config.json", "simulate", vars(args))
    return 0


# -- knockoffs ---------------------------------------------------------------


def cmd_knockoffs(args) -> int:
    G = load_matrix(args.genotypes)
    sampler = GaussianKnockoffSampler.from_data(
        G, seed=args.seed, assume_independent=args.assume_independent
    )
    pin = None
    if args.pin_rows is not None:
        pin = load_vector(args.pin_rows).astype(np.int64)
    save_matrix(args.out, sampler.sample(G, pin_rows=pin))
    _echo(Path(str(args.out) + ".config.json"), "knockoffs", vars(args))
    return 0


# -- prune -------------------------------------------------------------------


def cmd_prune(args) -> int:
    G = load_matrix(args.genotypes)
    y = load_vector(args.phenotype)
    result = prune(
        G,
        y,
        corr_threshold=args.threshold,
        holdout_frac=args.holdout_frac,
        seed=args.seed,
    )
    out = Path(args.out)
    out.write_text(result.to_json() + "\n")
    save_vector(Path(str(out) + ".indices.txt"), result.pruned_indices)
    _echo(Path(str(out) + ".config.json"), "prune", vars(args))
    return 0


# -- fit ---------------------------------------------------------------------


def cmd_fit(args) -> int:
    dataset = load_dataset(
        args.genotypes,
        args.phenotype,
        args.map,
        covariate_path=args.covariates,
        link_path=args.link,
    )
    if args.knockoffs is not None:
        pair = load_external_knockoffs(args.knockoffs, dataset)
    elif args.gen_knockoffs:
        sampler = GaussianKnockoffSampler.from_data(
            dataset.G, seed=args.seed + 1, assume_independent=args.assume_independent
        )
        from .data import KnockoffPair

        pair = KnockoffPair.from_matrices(
            dataset.G, sampler.sample(dataset.G), Z=dataset.Z
        )
    else:
        raise DataError(
            "no knockoff source: pass --knockoffs FILE or --gen-knockoffs"
        )
    R = None
    if args.n_R > 0:
        K_kin = ibs_kinship(dataset.G)
        R = relatedness_basis(
            K_kin, args.n_R, Z=None if dataset.identity_link else dataset.Z
        )
    out = _outdir(args.out)
    config = SamplerConfig(
        n_iter=args.n_iter,
        n_burn=args.n_burn,
        n_thin=args.n_thin,
        sparsity_cap=args.sparsity_cap,
        mean_logit_cap=args.mean_logit_cap,
        mu_pi_mean=args.mu_pi_mean,
        rho=args.rho,
        seed=args.seed,
        trace_path=str(out / "trace.csv"),
    )
    spatial_kwargs = {} if args.n_alpha is None else {"n_alpha": args.n_alpha}
    acc = fit_dataset(
        dataset, pair, config, model=args.model, R=R, spatial_kwargs=spatial_kwargs
    )
    (out / "accumulator.json").write_text(acc.to_json() + "\n")
    _echo(out / "config.json", "fit", vars(args))
    return 0


# -- filter ------------------------------------------------------------------


def cmd_filter(args) -> int:
    text = Path(args.accumulator).read_text()
    if not text.strip():
        raise DataError(f"empty accumulator file: {args.accumulator}")
    try:
        acc = PosteriorAccumulator.from_json(text)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"malformed accumulator JSON ({args.accumulator}): {exc}")
    result = filters.select(acc.w_bar, args.q, args.offset)
    out = _outdir(args.out)
    (out / "selection.json").write_text(result.to_json() + "\n")
    mask = np.zeros(acc.n_u, dtype=int)
    mask[result.selected] = 1
    with open(out / "selection.csv", "w") as fh:
        fh.write("snp_id,chrom,pos,w_bar,selected_flag\n")
        for j in range(acc.n_u):
            fh.write(
                f"{j},{int(acc.chromosome[j])},{int(acc.positions[j])},"
                f"{acc.w_bar[j]:.10g},{mask[j]}\n"
            )
    _echo(out / "config.json", "filter", vars(args))
    return 0


# -- bench -------------------------------------------------------------------

_GRID_KEYS = {"schema", "designs", "models", "q", "replicates", "sampler", "seed"}


def cmd_bench(args) -> int:
    try:
        grid = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed grid config: {exc}")
    unknown = set(grid) - _GRID_KEYS
    if unknown:
        raise DataError(f"unknown grid config keys: {sorted(unknown)}")
    try:
        designs = [simbench.SimDesign(**d) for d in grid["designs"]]
    except TypeError as exc:
        raise DataError(f"bad design entry: {exc}")
    config = SamplerConfig(**grid.get("sampler", {"n_iter": 2000, "n_burn": 1000}))
    result = simbench.run_grid(
        designs,
        models=tuple(grid.get("models", ("spatial", "nonspatial"))),
        q=float(grid.get("q", 0.2)),
        replicates=int(grid.get("replicates", 3)),
        config=config,
        n_jobs=args.threads,
        seed=int(grid.get("seed", 0)),
    )
    out = _outdir(args.out)
    result.to_csv(out / "results.csv")
    simbench.summary_to_csv(out / "summary.csv", simbench.summarize(result))
    _echo(out / "config.json", "bench", {"config": args.config, "grid": grid})
    if result.rows and all(r.get("error") for r in result.rows):
        print("bench: every replicate failed", file=sys.stderr)
        return 4
    for r in result.rows:
        if r.get("error"):
            print(f"bench: replicate failed: {r['design']}/{r['model']}: {r['error']}", file=sys.stderr)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="skbv",
        description="Spatial knockoff Bayesian variable selection",
    )
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="generate a synthetic dataset + knockoffs")
    ps.add_argument("--out", required=True)
    ps.add_argument("--n", type=int, default=200)
    ps.add_argument("--n-u", type=int, default=1000)
    ps.add_argument("--n-relevant", type=int, default=20)
    ps.add_argument("--n-clusters", type=int, default=5)
    ps.add_argument("--effect-size", type=float, default=1.0)
    ps.add_argument("--sigma2-e", type=float, default=1.0)
    ps.add_argument("--seed", type=int, default=0)
    ps.set_defaults(func=cmd_simulate)

    pk = sub.add_parser("knockoffs", help="generate Gaussian knockoffs for a matrix")
    pk.add_argument("--genotypes", required=True)
    pk.add_argument("--out", required=True)
    pk.add_argument("--seed", type=int, default=0)
    pk.add_argument("--assume-independent", action="store_true")
    pk.add_argument(
        "--pin-rows",
        default=None,
        help="file of row indices to copy from the originals unchanged",
    )
    pk.set_defaults(func=cmd_knockoffs)

    pp = sub.add_parser("prune", help="correlation-prune SNP columns")
    pp.add_argument("--genotypes", required=True)
    pp.add_argument("--phenotype", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--threshold", type=float, default=0.5)
    pp.add_argument("--holdout-frac", type=float, default=0.2)
    pp.add_argument("--seed", type=int, default=0)
    pp.set_defaults(func=cmd_prune)

    pf = sub.add_parser("fit", help="run the MCMC chain on a dataset")
    pf.add_argument("--genotypes", required=True)
    pf.add_argument("--phenotype", required=True)
    pf.add_argument("--map", required=True)
    pf.add_argument("--covariates", default=None)
    pf.add_argument("--link", default=None)
    pf.add_argument("--knockoffs", default=None)
    pf.add_argument("--gen-knockoffs", action="store_true")
    pf.add_argument("--assume-independent", action="store_true")
    pf.add_argument("--model", choices=("nonspatial", "spatial"), default="nonspatial")
    pf.add_argument("--n-R", type=int, default=0)
    pf.add_argument("--n-iter", type=int, default=20_000)
    pf.add_argument("--n-burn", type=int, default=10_000)
    pf.add_argument("--n-thin", type=int, default=10)
    pf.add_argument("--sparsity-cap", type=float, default=100.0)
    pf.add_argument("--mean-logit-cap", type=float, default=None)
    pf.add_argument("--mu-pi-mean", type=float, default=-7.0)
    pf.add_argument("--rho", type=float, default=0.999)
    pf.add_argument("--n-alpha", type=int, default=None)
    pf.add_argument("--seed", type=int, default=0)
    pf.add_argument("--out", required=True)
    pf.set_defaults(func=cmd_fit)

    pl = sub.add_parser("filter", help="apply the knockoff filter to saved statistics")
    pl.add_argument("--accumulator", required=True)
    pl.add_argument("--q", type=float, default=0.2)
    pl.add_argument("--offset", type=int, default=1)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_filter)

    pb = sub.add_parser("bench", help="run a simulation benchmark grid")
    pb.add_argument("--config", required=True)
    pb.add_argument("--out", required=True)
    pb.add_argument("--threads", type=int, default=1)
    pb.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        if hasattr(args, "q") and not 0 < args.q < 1:
            parser.error("--q must be in (0, 1)")  # exits 2
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
