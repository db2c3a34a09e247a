"""Command-line entry point: ``spafh {simulate,generate,fit,compare,diagnose}``.

Exit codes: 0 success, 1 validation error, 2 chain failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io
from .diagnostics import DegenerateChainWarning, effective_sample_size, morans_i, summarize_fit
from .io import DataError, RunConfig, fmt
from .mcmc import ChainConfig, ChainError, run_chain
from .model import ModelError, ModelSpec, Variant
from .simulation import ScenarioSpec, build_lattice, gen_dataset, run_study

logger = logging.getLogger("spafh")

VARIANT_NAMES = [v.value for v in Variant]


def _model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--nu0", type=float, help="inverse-Wishart degrees of freedom (default k)")
    g.add_argument("--eta", type=float, help="sigmoid sharpness of the positivity relaxation")
    g.add_argument("--ng-c", type=float, help="gamma hyperprior shape for the normal-gamma rate")
    g.add_argument("--ng-d", type=float, help="gamma hyperprior rate for the normal-gamma rate")
    g = p.add_argument_group("chain")
    g.add_argument("--n-total", type=int, help="total Gibbs iterations")
    g.add_argument("--n-burnin", type=int, help="discarded iterations")
    g.add_argument("--thin", type=int)
    g.add_argument("--seed", type=int)


def _data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--estimates", help="CSV: area_id, y_1..y_k")
    g.add_argument("--design", help="CSV: area_id, response_index, x_1..x_s")
    g.add_argument("--variance", help="CSV: area_id, lower-triangle entries of V_i")
    g.add_argument("--adjacency", help="CSV edge list: area_id_1, area_id_2")
    g.add_argument("--log-transform", action="store_true",
                   help="log the estimates and delta-method the variances")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spafh", description="Spatial multivariate Fay-Herriot models with shrinkage priors.",
                                     argument_default=argparse.SUPPRESS)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file supplying any flag (command line wins)")
    common.add_argument("--out", help="output directory")

    p = sub.add_parser("simulate", parents=[common], help="run the lattice simulation study",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--scenarios", type=int, nargs="+", choices=[1, 2, 3, 4, 5])
    p.add_argument("--m", type=int, nargs="+", help="lattice sizes (multiples of 10)")
    p.add_argument("--variance-cases", nargs="+", choices=["a", "b"])
    p.add_argument("--methods", nargs="+", choices=VARIANT_NAMES)
    p.add_argument("--n-reps", type=int)
    p.add_argument("--jobs", type=int, help="worker processes")
    _model_args(p)

    p = sub.add_parser("generate", parents=[common], help="write one simulated dataset as CSV files",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--scenario", type=int, choices=[1, 2, 3, 4, 5])
    p.add_argument("--m", type=int, nargs=1)
    p.add_argument("--variance-cases", nargs=1, choices=["a", "b"])
    p.add_argument("--seed", type=int)

    p = sub.add_parser("fit", parents=[common], help="fit one model to one dataset",
                       argument_default=argparse.SUPPRESS)
    _data_args(p)
    p.add_argument("--variant", choices=VARIANT_NAMES)
    p.add_argument("--store-draws", action="store_true", help="also write draws.csv")
    _model_args(p)

    p = sub.add_parser("compare", parents=[common], help="fit several variants, tabulate DIC/ESS/time",
                       argument_default=argparse.SUPPRESS)
    _data_args(p)
    p.add_argument("--variants", nargs="+", choices=VARIANT_NAMES)
    _model_args(p)

    p = sub.add_parser("diagnose", parents=[common], help="Moran's I and ESS report for a fit",
                       argument_default=argparse.SUPPRESS)
    _data_args(p)
    p.add_argument("--fit-dir", help="directory written by 'fit'")
    return parser


def resolve_config(argv=None) -> tuple[RunConfig, bool]:
    ns = vars(build_parser().parse_args(argv))
    verbose = ns.pop("verbose", False)
    merged = {}
    if "config" in ns:
        merged.update(io.load_config(ns.pop("config")))
    merged.update(ns)
    merged["command"] = ns["command"]
    return RunConfig.from_dict(merged), verbose


def _model_spec(cfg: RunConfig, variant) -> ModelSpec:
    return ModelSpec(variant=variant, nu0=cfg.nu0, eta=cfg.eta, ng_c=cfg.ng_c, ng_d=cfg.ng_d, seed=cfg.seed)


def _chain_config(cfg: RunConfig) -> ChainConfig:
    return ChainConfig(n_total=cfg.n_total, n_burnin=cfg.n_burnin, thin=cfg.thin)


def _load_inputs(cfg: RunConfig, need_adjacency: bool):
    missing = [n for n in ("estimates", "design", "variance") if getattr(cfg, n) is None]
    if missing:
        raise DataError(f"missing required input(s): {', '.join('--' + n for n in missing)}")
    data = io.load_dataset(cfg.estimates, cfg.design, cfg.variance)
    if cfg.log_transform:
        data = io.log_transform_dataset(data)
    structure = None
    if cfg.adjacency is not None:
        structure = io.load_adjacency(cfg.adjacency, data.area_ids)
    elif need_adjacency:
        raise DataError("spatial variants need --adjacency")
    return data, structure


def _write_config(cfg: RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")


def _fit_one(cfg: RunConfig, variant: Variant, data, structure, out: Path, store_draws: bool):
    spec = _model_spec(cfg, variant)
    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()
    draws = run_chain(rng, data, structure, spec, _chain_config(cfg))
    runtime = time.perf_counter() - t0
    summary = summarize_fit(draws, data)
    io.write_fit_outputs(summary, draws, data, out, store_draws=store_draws, extra={"variant": variant.value})
    (out / "timing.json").write_text(json.dumps({"runtime_seconds": runtime}, indent=2) + "\n", encoding="utf-8")
    return summary, runtime


def cmd_simulate(cfg: RunConfig) -> int:
    grid = [ScenarioSpec(scenario=s, m=m, variance_case=v)
            for s in cfg.scenarios for m in cfg.m for v in cfg.variance_cases]
    kwargs = {"nu0": cfg.nu0, "eta": cfg.eta, "ng_c": cfg.ng_c, "ng_d": cfg.ng_d}
    table = run_study(grid, cfg.methods, cfg.n_reps, cfg.seed, _chain_config(cfg), kwargs, n_jobs=cfg.jobs)
    out = Path(cfg.out)
    io.write_study_outputs(table, out)
    _write_config(cfg, out)
    for r in sorted(table.medians(), key=lambda r: (r["scenario"], r["m"], r["variance_case"], r["method"])):
        print(f"scenario {r['scenario']} m={r['m']} case {r['variance_case']} {r['method']:>6}: "
              f"AAD {r['aad']:.4f} ASD {r['asd']:.4f} CP {r['cp']:.3f} AL {r['al']:.3f}")
    return 0


def cmd_generate(cfg: RunConfig) -> int:
    spec = ScenarioSpec(scenario=cfg.scenario, m=cfg.m[0], variance_case=cfg.variance_cases[0], seed=cfg.seed)
    structure = build_lattice(spec.m)
    data, theta, u = gen_dataset(np.random.default_rng(cfg.seed), spec, structure)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_dataset(data, out / "estimates.csv", out / "design.csv", out / "variance.csv")
    io.save_adjacency(structure, data.area_ids, out / "adjacency.csv")
    with (out / "truth.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "response", "theta", "u"])
        for i, aid in enumerate(data.area_ids):
            for j in range(data.k):
                w.writerow([aid, j + 1, fmt(theta[i, j]), fmt(u[i, j])])
    print(f"wrote scenario {spec.scenario} dataset (m={spec.m}) to {out}")
    return 0


def cmd_fit(cfg: RunConfig) -> int:
    variant = Variant.parse(cfg.variant)
    data, structure = _load_inputs(cfg, variant.spatial)
    out = Path(cfg.out)
    summary, _ = _fit_one(cfg, variant, data, structure, out, cfg.store_draws)
    _write_config(cfg, out)
    print(f"{variant.value}: DIC {summary.dic:.3f} p_D {summary.p_d:.3f} mean ESS {summary.mean_ess:.1f}")
    return 0


def cmd_compare(cfg: RunConfig) -> int:
    variants = [Variant.parse(v) for v in cfg.variants]
    data, structure = _load_inputs(cfg, any(v.spatial for v in variants))
    out = Path(cfg.out)
    rows = []
    for v in variants:
        summary, runtime = _fit_one(cfg, v, data, structure, out / v.value, store_draws=False)
        rows.append([v.value, fmt(summary.dic), fmt(summary.p_d), fmt(summary.mean_ess), fmt(runtime)])
        print(f"{v.value:>6}: DIC {summary.dic:10.3f}  ESS {summary.mean_ess:9.1f}  time {runtime:7.2f}s")
    with (out / "compare.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "dic", "p_d", "mean_ess", "runtime_seconds"])
        w.writerows(rows)
    _write_config(cfg, out)
    return 0


def _read_summary_u(path: Path, data) -> np.ndarray:
    index = {a: i for i, a in enumerate(data.area_ids)}
    u = np.full((data.m, data.k), np.nan)
    with path.open(newline="", encoding="utf-8") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            if row["area_id"] not in index:
                raise DataError(f"{path}:{line}: unknown area_id {row['area_id']!r}")
            u[index[row["area_id"]], int(row["response"]) - 1] = float(row["u_mean"])
    if np.isnan(u).any():
        raise DataError(f"{path}: summary does not cover every (area, response)")
    return u


def cmd_diagnose(cfg: RunConfig) -> int:
    data, structure = _load_inputs(cfg, True)
    report = {"morans_i_direct": [morans_i(data.y[:, j], structure) for j in range(data.k)]}
    if cfg.fit_dir is not None:
        fit_dir = Path(cfg.fit_dir)
        summary_csv = fit_dir / "summary.csv"
        if not summary_csv.exists():
            raise DataError(f"{summary_csv}: not found")
        u = _read_summary_u(summary_csv, data)
        report["morans_i_u_mean"] = [morans_i(u[:, j], structure) for j in range(data.k)]
        draws_csv = fit_dir / "draws.csv"
        if draws_csv.exists():
            theta = io.read_draws(draws_csv, data)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateChainWarning)
                ess = np.array([[effective_sample_size(theta[:, i, j]) for j in range(data.k)]
                                for i in range(data.m)])
            report["theta_ess"] = {"mean": float(ess.mean()), "min": float(ess.min()),
                                   "max": float(ess.max()), "n_draws": int(theta.shape[0])}
        else:
            logger.warning("%s not found; refit with --store-draws for ESS", draws_csv)
    # without an explicit --out the report lands next to the fit
    out = Path(cfg.fit_dir if cfg.fit_dir is not None and cfg.out == RunConfig.out else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "diagnose.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for key, val in report.items():
        print(f"{key}: {val}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "generate": cmd_generate, "fit": cmd_fit,
            "compare": cmd_compare, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    try:
        cfg, verbose = resolve_config(argv)
    except (DataError, ModelError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    logger.debug("config %s", asdict(cfg))
    try:
        return COMMANDS[cfg.command](cfg)
    except ChainError as exc:
        print(f"chain failure: {exc}", file=sys.stderr)
        return 2
    except (DataError, ModelError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
