#!/usr/bin/env python3
"""Command line entry point: simulate, fit, predict, diagnose and inspect partitions."""

import argparse
import json
import logging
import math
import os
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from config import RunConfig, deep_merge, load_config, parse_overrides
from constants import (
    DRAWS_FILE,
    EDGES_FILE,
    FACTOR_B_FILE,
    FACTOR_D_FILE,
    LOG_ENV,
    METADATA_FILE,
    PARTITION_FILE,
    PREDICTION_METRICS_FILE,
    SLICED_FILE,
    SUMMARY_FILE,
    SWEEP_FILE,
    TEST_FILE,
    TRAIN_FILE,
    TRUTH_FILE,
    W2_FILE,
    ModelKind,
)
from dag import RadialDag, build_dag
from errors import ConfigError, RadgpError
from geometry import LocationSet, min_separation
from inference import (
    RegressionData,
    combine_chains,
    run_chains,
    run_latent_mcmc,
    run_response_mcmc,
)
from kernels import recommend_radius
from metrics import mse_and_coverage, region_labels, regional_sliced_w2, w2_radius_sweep, w2_report
from partition import partition_locations, validate_partition
from precision import build_exact_factor, build_sparse_factor
from predict import (
    PredictionPlan,
    build_prediction_plan,
    exact_predictive_moments,
    latent_predictor,
    response_predictor,
    sample_prediction,
    sample_prediction_response,
    sample_test_nodes,
    summarize_predictions,
)
from simulate import simulate_dataset
from workspace import RunWorkspace

logger = logging.getLogger(__name__)


def resolve_rho(cfg: RunConfig, locations: LocationSet) -> float:
    """Explicit radius, or the recommended one when `rho` is `auto`."""
    if cfg.rho != "auto":
        return float(cfg.rho)
    q = min_separation(locations)
    rho = recommend_radius(cfg.kernel, q, len(locations), locations.dim)
    if not math.isfinite(rho):
        raise ConfigError("recommended radius is not finite; set rho explicitly", q=q)
    logger.info(f"rho=auto: q={q:.4g}, n={len(locations)}, chosen rho={rho:.6g}")
    return rho


def _training_dag(cfg: RunConfig, locations: LocationSet, rho: float, seed: int) -> RadialDag:
    return build_dag(partition_locations(locations, rho, seed, cfg.index))


def _test_path(cfg: RunConfig) -> Path | None:
    path = cfg.input_path("test_path", TEST_FILE)
    return path if path.is_file() else None


def _load(
    cfg: RunConfig, ws: RunWorkspace
) -> tuple[RegressionData, LocationSet | None, np.ndarray]:
    data = ws.load_training(cfg.input_path("train_path", TRAIN_FILE))
    test_path = _test_path(cfg)
    if test_path is None:
        return data, None, np.empty((0, data.p))
    test, X_test = ws.load_test(test_path, data.locations.dim, data.p)
    return data, test, X_test


def _write_predictions(
    cfg: RunConfig, ws: RunWorkspace, iterations: np.ndarray, values: np.ndarray
) -> list[Path]:
    summary = summarize_predictions(values, level=cfg.mcmc.level)
    return [ws.write_predictions(iterations, values), ws.write_frame(summary, SUMMARY_FILE)]


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    """Write training, test and truth tables drawn from the configured truth."""
    sim = cfg.simulation
    ws = RunWorkspace(cfg.out_dir)
    data = simulate_dataset(
        sim.kernel,
        n_train=sim.n_train,
        n_test=sim.n_test,
        nugget_sd=sim.nugget_sd,
        seed=cfg.seed,
        dim=sim.dim,
        layout=sim.layout,
        test_layout=sim.test_layout,
        beta=sim.beta,
        dense_cap=sim.dense_cap,
        blocked=sim.blocked,
        blocked_rho=sim.blocked_rho,
    )
    ws.write_metadata({"simulation": sim.model_dump(mode="json"), "simulation_seed": cfg.seed})
    return [
        ws.write_frame(data.train, TRAIN_FILE),
        ws.write_frame(data.test, TEST_FILE),
        ws.write_frame(data.truth, TRUTH_FILE),
    ]


def cmd_fit(cfg: RunConfig, model: ModelKind) -> list[Path]:
    """Run the latent or response sampler; predicts inline when a test table exists."""
    ws = RunWorkspace(cfg.out_dir)
    data, test, X_test = _load(cfg, ws)
    rho = resolve_rho(cfg, data.locations)
    threads = cfg.threads_resolved
    dag = _training_dag(cfg, data.locations, rho, cfg.seed)

    predictor = None
    if test is not None and len(test):
        plan = build_prediction_plan(dag, test, seed=cfg.seed, index_kind=cfg.index)
        predictor = (
            latent_predictor(plan, X_test, cfg.mcmc.noisy)
            if model == "latent"
            else response_predictor(plan, data, X_test, cfg.mcmc.noisy)
        )

    kwargs: dict[str, Any] = dict(
        data=data,
        prior=cfg.priors,
        rho=rho,
        l1=cfg.mcmc.l1,
        l2=cfg.mcmc.l2,
        kernel=cfg.kernel,
        mh_cfg=cfg.mcmc.mh(model),
        theta0=cfg.mcmc.theta0,
        thin=cfg.mcmc.thin,
        jitter=cfg.jitter,
        predictor=predictor,
        dag=dag,
    )
    if model == "latent":
        runner: Callable = run_latent_mcmc
        kwargs.update(cg_cfg=cfg.cg, keep_latent=cfg.mcmc.keep_latent)
    else:
        runner = run_response_mcmc
    # chains share the thread budget with the factor builds
    workers = min(cfg.mcmc.chains, threads)
    kwargs["threads"] = max(1, threads // workers)
    chains = run_chains(runner, cfg.mcmc.chains, cfg.seed, workers=workers, **kwargs)
    draws = combine_chains(chains)

    ws.write_draws(
        draws,
        {
            "rho": rho,
            "partition_seed": cfg.seed,
            "n_subsets": dag.partition.n_subsets,
            "max_parents": int(dag.n_parents.max()),
            "chains": cfg.mcmc.chains,
            "config_hash": cfg.fingerprint(),
        },
    )
    written = [ws.path(name) for name in (DRAWS_FILE, METADATA_FILE)]
    if draws.predictions is not None:
        iterations = draws.retained()["iteration"].to_numpy()
        written += _write_predictions(cfg, ws, iterations, draws.predictions)
    means = draws.posterior_means()
    logger.info(", ".join(f"{k}={v:.4g}" for k, v in means.items()))
    return written


def _plan_from_fit(cfg: RunConfig, ws: RunWorkspace, data: RegressionData, test: LocationSet):
    meta = ws.read_metadata()
    rho = float(meta["rho"]) if "rho" in meta else resolve_rho(cfg, data.locations)
    seed = int(meta.get("partition_seed", cfg.seed))
    dag = _training_dag(cfg, data.locations, rho, seed)
    return build_prediction_plan(dag, test, seed=seed, index_kind=cfg.index)


def cmd_predict(cfg: RunConfig) -> list[Path]:
    """Joint test draws from stored posterior draws."""
    ws = RunWorkspace(cfg.out_dir)
    data, test, X_test = _load(cfg, ws)
    draws = ws.read_draws()
    if test is None:
        test = LocationSet.empty(data.locations.dim)
    plan = _plan_from_fit(cfg, ws, data, test)
    rng = np.random.default_rng(cfg.seed)
    if draws.model == "latent":
        iterations, values = sample_prediction(plan, draws, rng, X_test, cfg.mcmc.noisy)
    else:
        iterations, values = sample_prediction_response(
            plan, draws, data, rng, X_test, cfg.mcmc.noisy
        )
    return _write_predictions(cfg, ws, iterations, values)


def _conditioning_field(ws: RunWorkspace, data: RegressionData) -> np.ndarray:
    """Posterior-mean latent field; the detrended response when no latent draws are stored."""
    if ws.path(DRAWS_FILE).is_file():
        draws = ws.read_draws()
        if draws.latent is not None and draws.latent.shape[1] == data.n:
            logger.info(f"conditioning on the mean latent field of {len(draws.latent)} draws")
            return draws.latent.mean(axis=0)
    logger.info("no latent draws stored; conditioning on the least-squares residual field")
    if not data.p:
        return data.Y
    beta = np.linalg.lstsq(data.X, data.Y, rcond=None)[0]
    return data.Y - data.X @ beta


def _regional_comparison(
    cfg: RunConfig, plan: PredictionPlan, values: np.ndarray, rng: np.random.Generator
) -> pd.DataFrame:
    labels = region_labels(plan.test_points, cfg.diagnostics.regions)
    cols = np.flatnonzero(labels != "")
    if not cols.size:
        logger.warning("no test locations fall inside the comparison regions")
        return pd.DataFrame(columns=["region", "method", "value", "n_locations"])
    n_draws = cfg.diagnostics.n_draws
    radgp = np.vstack([sample_test_nodes(plan, cfg.kernel, values, rng) for _ in range(n_draws)])
    mean, cov = exact_predictive_moments(
        plan.train_points, plan.test_points[cols], cfg.kernel, values
    )
    w, v = np.linalg.eigh(cov)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    reference = np.full_like(radgp, np.nan)
    reference[:, cols] = mean + rng.standard_normal((n_draws, len(cols))) @ root.T
    return regional_sliced_w2(
        plan.test_points,
        radgp,
        reference,
        method="radgp",
        n_projections=cfg.diagnostics.n_projections,
        seed=cfg.seed,
        edges=cfg.diagnostics.regions,
    )


def cmd_diagnose(cfg: RunConfig) -> list[Path]:
    """Prediction scores, W2 report, radius sweep and regional sliced W2 tables."""
    ws = RunWorkspace(cfg.out_dir)
    diag = cfg.diagnostics
    data, test, _ = _load(cfg, ws)
    rho = resolve_rho(cfg, data.locations)
    written = []

    truth_path = cfg.input_path("truth_path", TRUTH_FILE)
    if ws.path(SUMMARY_FILE).is_file() and truth_path.is_file():
        summary = ws.read_frame(ws.path(SUMMARY_FILE))
        mse, coverage = mse_and_coverage(ws.read_frame(truth_path), summary, cfg.mcmc.level)
        scores = pd.DataFrame({"mse": [mse], "coverage": [coverage], "level": [cfg.mcmc.level]})
        written.append(ws.write_frame(scores, PREDICTION_METRICS_FILE))
        logger.info(f"test MSE={mse:.4g}, coverage={coverage:.3f}")

    if len(data.locations) > diag.cap:
        n = len(data.locations)
        logger.warning(f"skipping dense diagnostics: n={n} exceeds cap {diag.cap}")
        return written
    dag = _training_dag(cfg, data.locations, rho, cfg.seed)
    exact = build_exact_factor(data.locations, cfg.kernel, order=dag.order, cap=diag.cap)
    report = w2_report(exact, build_sparse_factor(dag, cfg.kernel, jitter=cfg.jitter), diag.cap)
    frame = pd.DataFrame([{"method": "radgp", "rho": rho, **report.model_dump()}])
    written.append(ws.write_frame(frame, W2_FILE))

    if diag.rho_grid:
        sweep = w2_radius_sweep(data.locations, cfg.kernel, diag.rho_grid, cfg.seed, diag.cap)
        written.append(ws.write_frame(sweep, SWEEP_FILE))

    if test is not None and len(test) and data.locations.dim == 2:
        plan = build_prediction_plan(dag, test, seed=cfg.seed, index_kind=cfg.index)
        rng = np.random.default_rng(cfg.seed)
        field = _conditioning_field(ws, data)
        written.append(ws.write_frame(_regional_comparison(cfg, plan, field, rng), SLICED_FILE))
    return written


def cmd_partition(cfg: RunConfig) -> list[Path]:
    """Dump the partition and graph (and optionally the factor) for inspection."""
    ws = RunWorkspace(cfg.out_dir)
    data, test, _ = _load(cfg, ws)
    rho = resolve_rho(cfg, data.locations)
    dag: RadialDag = _training_dag(cfg, data.locations, rho, cfg.seed)
    if test is not None and len(test):
        dag = build_prediction_plan(dag, test, seed=cfg.seed, index_kind=cfg.index).dag
    report = validate_partition(dag.partition, dag.locations)
    ws.write_metadata(
        {
            "partition": {
                "rho": rho,
                "n_subsets": report.n_subsets,
                "subset_bound": report.subset_bound,
                "bound_met": report.bound_met,
                "max_parents": int(dag.n_parents.max()) if dag.n else 0,
            }
        }
    )
    written = [
        ws.write_frame(dag.partition.to_frame(), PARTITION_FILE),
        ws.write_frame(dag.to_frame(), EDGES_FILE),
    ]
    if cfg.diagnostics.factor_dump:
        b, d = build_sparse_factor(dag, cfg.kernel, jitter=cfg.jitter).to_frames()
        written += [ws.write_frame(b, FACTOR_B_FILE), ws.write_frame(d, FACTOR_D_FILE)]
    return written


COMMANDS: dict[str, tuple[str, Callable[[RunConfig], list[Path]]]] = {
    "simulate": ("draw a synthetic dataset", cmd_simulate),
    "fit-latent": ("latent-effects sampler", lambda cfg: cmd_fit(cfg, "latent")),
    "fit-response": ("marginal response sampler", lambda cfg: cmd_fit(cfg, "response")),
    "predict": ("joint predictions from stored draws", cmd_predict),
    "diagnose": ("approximation and prediction diagnostics", cmd_diagnose),
    "partition": ("dump partition, graph and factor", cmd_partition),
}


def build_parser() -> argparse.ArgumentParser:
    """Parser with one subcommand per entry of `COMMANDS`."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--rho", help="approximation radius or 'auto'")
    common.add_argument("--threads", type=int, help="0 uses every core")
    common.add_argument("--out", type=Path, help="output directory")
    parser = argparse.ArgumentParser(
        prog="radgp",
        description="Radial neighbors Gaussian process. Any option may also be given "
        "as a dotted override, e.g. --mcmc.l1 500 or --kernel.params.phi=20.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, _) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def _flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    flags = {"seed": args.seed, "rho": args.rho, "threads": args.threads, "out_dir": args.out}
    return {k: v for k, v in flags.items() if v is not None}


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def main(argv: list[str] | None = None) -> int:
    """Run one command; returns the process exit code."""
    _configure_logging(os.environ.get(LOG_ENV, "INFO").upper())
    args, extra = build_parser().parse_known_args(argv)
    try:
        overrides = deep_merge(parse_overrides(extra), _flag_overrides(args))
        cfg = load_config(args.config, overrides)
        _configure_logging(cfg.log)
        written = COMMANDS[args.command][1](cfg)
    except RadgpError as err:
        print(err.as_line(), file=sys.stderr)
        return 1
    except Exception as err:
        logger.exception(f"{args.command} failed")
        print(json.dumps({"module": "radgp", "error": str(err), "context": {}}), file=sys.stderr)
        return 2
    for path in written:
        logger.info(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
