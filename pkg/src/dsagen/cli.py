"""Command-line pipeline: config + case file in, datasets and reports out.

Subcommands: ``polytope``, ``generate``, ``benchmark``, ``train-eval``,
``stats``.  Configuration is a TOML file; command-line flags override config
keys, and the ``DSAGEN_SEED`` environment variable overrides the seed.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure,
4 insufficient data.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import acproj, dataset, mlbench, samplers, walker
from .errors import (ConfigError, DsagenError, InsufficientDataError,
                     LinearizationError, PowerFlowError, ProjectionError,
                     RelaxationError)
from .netmodel import from_vector, parse_case_file
from .relaxation import (Bounds, HyperplaneConfig, initial_bounds, obbt,
                         load_polytope, save_polytope, separating_hyperplanes)
from .smallsignal import load_dynamics
from .walker import DWConfig, SecuritySpec

log = logging.getLogger("dsagen")


@dataclass
class RunConfig:
    """Validated configuration for a full run (unknown keys rejected)."""

    case_file: str = ""
    dynamics_file: str = ""
    load_scale: float = 0.8
    load_band: float = 0.2
    # power flow
    pf_tol: float = 1e-8
    feas_tol: float = 1e-6
    # relaxation / Algorithm 1
    N1: int = 100
    tau: float = 0.05
    eta: int = 30
    obbt_iters: int = 3
    conic_tol: float = 1e-6
    hr_burn_in: int = 100
    hr_thinning: int = 10
    volume_samples: int = 1000
    # nonlinear projection
    nlp_tol: float = 1e-6
    nlp_max_iter: int = 200
    nlp_restarts: int = 3
    # walker
    gamma: float = 0.03
    beta: float = 0.0025
    epsilons: list = field(default_factory=lambda: [0.04, 0.03, 0.02, 0.01])
    distances: list = field(default_factory=lambda: [0.010, 0.005, 0.0025])
    kappa_max: int = 30
    kappa_hic: int = 15
    discretization_mw: float = 1.0
    N2: int = 200
    seed: int = 0
    # benchmarks
    bench: str = "lhc"
    n_init: int = 4000
    n: int = 10000
    s_scale: float = 0.25
    # orchestration
    out_dir: str = "out"
    workers: int = 1

    def as_dict(self):
        return asdict(self)


def load_config(path: str | None, overrides: dict) -> RunConfig:
    data = {}
    if path:
        try:
            data = tomllib.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    env_seed = os.environ.get("DSAGEN_SEED")
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"DSAGEN_SEED is not an integer: {env_seed!r}")
    cfg = RunConfig(**data)
    if not cfg.case_file:
        raise ConfigError("case_file is required")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if not (0 < cfg.beta < cfg.gamma):
        raise ConfigError("need 0 < beta < gamma")
    return cfg


def _load_model(cfg: RunConfig):
    model = parse_case_file(cfg.case_file, load_scale=cfg.load_scale)
    dynamics = None
    if cfg.dynamics_file:
        dynamics = load_dynamics(cfg.dynamics_file)
    return model, dynamics


def _require_dynamics(cfg, dynamics):
    if dynamics is None:
        raise ConfigError("dynamics_file is required for this command")
    return dynamics


def _spec(cfg: RunConfig) -> SecuritySpec:
    return SecuritySpec(gamma=cfg.gamma, beta=cfg.beta)


def _dwconfig(cfg: RunConfig) -> DWConfig:
    return DWConfig(epsilons=tuple(cfg.epsilons),
                    distances=tuple(cfg.distances),
                    kappa_max=cfg.kappa_max, kappa_hic=cfg.kappa_hic,
                    discretization_mw=cfg.discretization_mw)


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except (RelaxationError, PowerFlowError, LinearizationError,
                ProjectionError, np.linalg.LinAlgError) as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(3)
        except InsufficientDataError as exc:
            click.echo(f"insufficient data: {exc}", err=True)
            sys.exit(4)
        except DsagenError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)
    return wrapper


def _common_options(fn):
    fn = click.option("--config", "-c", "config_path", type=str, default=None,
                      help="TOML configuration file.")(fn)
    fn = click.option("--case-file", type=str, default=None)(fn)
    fn = click.option("--dynamics-file", type=str, default=None)(fn)
    fn = click.option("--out-dir", type=str, default=None)(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--workers", type=int, default=None)(fn)
    return fn


def _gather(config_path, **overrides) -> RunConfig:
    return load_config(config_path, overrides)


@click.group()
@click.option("--verbose", is_flag=True, default=False)
def main(verbose):
    """Security-boundary dataset generation toolbox."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")


def _save_bounds(bounds: Bounds, path: Path):
    payload = {k: np.asarray(getattr(bounds, k)).tolist()
               for k in ("v_lo", "v_hi", "th_lo", "th_hi", "x_lo", "x_hi")}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_bounds(path: Path) -> Bounds:
    raw = json.loads(path.read_text())
    return Bounds(**{k: np.asarray(v, float) for k, v in raw.items()})


@main.command("polytope")
@_common_options
@_exit_codes
def cmd_polytope(config_path, **overrides):
    """Run bound tightening and the separating-hyperplane loop."""
    cfg = _gather(config_path, **overrides)
    model, _ = _load_model(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    bounds0 = initial_bounds(model, load_band=cfg.load_band)
    bounds = obbt(model, bounds0, iterations=cfg.obbt_iters)
    hp_cfg = HyperplaneConfig(n1=cfg.N1, tau=cfg.tau, eta=cfg.eta,
                              volume_samples=cfg.volume_samples,
                              hr_burn_in=cfg.hr_burn_in,
                              hr_thinning=cfg.hr_thinning, seed=cfg.seed)
    run = separating_hyperplanes(model, bounds, hp_cfg)
    if run.stop_reason == "eta":
        log.info("volume stopping rule fired at iteration %d", run.stop_iteration)
    save_polytope(run.polytope, out, model.input_index_map().fingerprint())
    _save_bounds(bounds, out / "bounds.json")
    dataset.write_manifest(out / "manifest_polytope.json", model,
                           cfg.as_dict(), {"seed": cfg.seed})
    summary = {"cuts": run.n_cuts, "iterations": run.iterations,
               "failures": run.n_failures, "degenerate": run.n_degenerate,
               "stop_reason": run.stop_reason,
               "stop_iteration": run.stop_iteration,
               "final_volume": run.polytope.volume_history[-1]}
    (out / "polytope_run.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    click.echo(f"polytope: {run.n_cuts} cuts, stop by {run.stop_reason}, "
               f"relative volume {run.polytope.volume_history[-1]:.4g}")


def _check_manifest(out: Path, name: str, model, cfg: RunConfig):
    path = out / name
    if not path.exists():
        raise ConfigError(f"missing artifact {path}; run `dsagen polytope` first")
    manifest = json.loads(path.read_text())
    if manifest["case_hash"] != model.case_hash():
        raise ConfigError(
            f"{name} was produced from a different case file; refusing")


def _walk_cache_key(cfg: RunConfig, model) -> str:
    keys = {k: v for k, v in cfg.as_dict().items()
            if k in ("gamma", "beta", "epsilons", "distances", "kappa_max",
                     "kappa_hic", "discretization_mw", "N2", "seed",
                     "load_scale", "load_band")}
    keys["case_hash"] = model.case_hash()
    return dataset.config_hash(keys)


@main.command("generate")
@_common_options
@click.option("--resume", is_flag=True, default=False,
              help="Reuse cached walk results with a matching manifest.")
@_exit_codes
def cmd_generate(config_path, resume, **overrides):
    """Produce the boundary-dense dataset (directed-walk pipeline)."""
    cfg = _gather(config_path, **overrides)
    model, dynamics = _load_model(cfg)
    dynamics = _require_dynamics(cfg, dynamics)
    out = Path(cfg.out_dir)
    _check_manifest(out, "manifest_polytope.json", model, cfg)
    polytope, header = load_polytope(out)
    if header["index_map_hash"] != model.input_index_map().fingerprint():
        raise ConfigError("polytope index map does not match this case")
    bounds = _load_bounds(out / "bounds.json")
    spec = _spec(cfg)
    dw_cfg = _dwconfig(cfg)

    init = walker.init_points(model, polytope, cfg.N2, cfg.seed, dynamics,
                              bounds=bounds, workers=cfg.workers)
    log.info("init: %d feasible, %d infeasible, %d dropped",
             len(init.feasible), len(init.infeasible), init.dropped)

    cache_dir = out / "walks"
    cache_dir.mkdir(parents=True, exist_ok=True)
    cache_key = _walk_cache_key(cfg, model)
    key_file = cache_dir / "cache_key.json"
    if resume and key_file.exists():
        stored = json.loads(key_file.read_text())["cache_key"]
        if stored != cache_key:
            raise ConfigError("walk cache was produced with different inputs; "
                              "remove the walks/ directory or rerun without --resume")
    key_file.write_text(json.dumps({"cache_key": cache_key}) + "\n")

    starts = [op for op, _ in init.feasible]
    traces = [None] * len(starts)
    todo = []
    for i in range(len(starts)):
        cache_file = cache_dir / f"walk_{i:05d}.json"
        if resume and cache_file.exists():
            payload = json.loads(cache_file.read_text())
            traces[i] = [(from_vector(model, np.asarray(x)), z)
                         for x, z in payload["hic_points"]]
        else:
            todo.append(i)

    def _run_walk(i):
        tr = walker.directed_walk(model, dynamics, starts[i], spec, dw_cfg)
        return i, tr

    if cfg.workers > 1 and todo:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_walk, todo))
    else:
        results = [_run_walk(i) for i in todo]
    for i, tr in results:
        traces[i] = [(op, z) for op, z in tr.hic_points]
        payload = {"termination": tr.termination,
                   "hic_points": [[op.x.tolist(), z] for op, z in tr.hic_points]}
        (cache_dir / f"walk_{i:05d}.json").write_text(
            json.dumps(payload, sort_keys=True) + "\n")

    hic_points = [pt for tr in traces for pt in tr]
    finalized, dropped_fin = walker.finalize(hic_points, model, dynamics,
                                             bounds=bounds, workers=cfg.workers)
    log.info("walks found %d unique band points (%d dropped in finalize)",
             len(hic_points), dropped_fin)

    rows = []
    i = 0
    for op, zeta in init.feasible:
        rows.append(dataset.label(i, op, True, True, zeta, spec, "dw", cfg.seed))
        i += 1
    for op, zeta in init.infeasible:
        rows.append(dataset.label(i, op, zeta is not None, False, zeta, spec,
                                  "dw", cfg.seed))
        i += 1
    for pt in finalized:
        rows.append(dataset.label(i, pt.op, pt.converged, pt.feasible,
                                  pt.zeta, spec, pt.source, cfg.seed))
        i += 1

    dataset.write_csv(rows, model, out / "dataset_dw.csv")
    dataset.write_stats(rows, out / "stats_dw.json")
    dataset.write_manifest(out / "manifest_dw.json", model, cfg.as_dict(),
                           {"seed": cfg.seed,
                            "dropped_init": init.dropped,
                            "dropped_finalize": dropped_fin})
    st = dataset.stats(rows)
    click.echo(f"generate: {len(rows)} samples, feasible {st.feasible_share:.1%}, "
               f"HIC {st.hic_share:.1%} -> {out / 'dataset_dw.csv'}")


@main.command("benchmark")
@_common_options
@click.option("--which", type=click.Choice(["lhc", "importance"]), default=None)
@_exit_codes
def cmd_benchmark(config_path, which, **overrides):
    """Run a benchmark sampler (naive LHC or importance sampling)."""
    cfg = _gather(config_path, **overrides)
    if which is None:
        which = cfg.bench
    model, dynamics = _load_model(cfg)
    dynamics = _require_dynamics(cfg, dynamics)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = _spec(cfg)
    if which == "lhc":
        rows, dropped = samplers.lhc_benchmark(
            model, dynamics, cfg.n, cfg.seed, spec,
            load_band=cfg.load_band, workers=cfg.workers)
    else:
        rows, dropped = samplers.importance_benchmark(
            model, dynamics, cfg.n_init, cfg.n, cfg.seed, spec, s=cfg.s_scale,
            load_band=cfg.load_band, workers=cfg.workers)
    dataset.write_csv(rows, model, out / f"dataset_{which}.csv")
    dataset.write_stats(rows, out / f"stats_{which}.json")
    dataset.write_manifest(out / f"manifest_{which}.json", model,
                           cfg.as_dict(), {"seed": cfg.seed, "dropped": dropped})
    st = dataset.stats(rows)
    click.echo(f"benchmark {which}: {len(rows)} samples, "
               f"feasible {st.feasible_share:.1%}, HIC {st.hic_share:.1%}")


@main.command("train-eval")
@_common_options
@_exit_codes
def cmd_train_eval(config_path, **overrides):
    """Train per-dataset decision trees and emit the evaluation report."""
    cfg = _gather(config_path, **overrides)
    model, _ = _load_model(cfg)
    out = Path(cfg.out_dir)
    names = []
    data = {}
    for name in ("dw", "lhc", "importance"):
        path = out / f"dataset_{name}.csv"
        if path.exists():
            data[name] = dataset.read_csv(path, model)
            names.append(name)
    if len(data) < 2:
        raise InsufficientDataError(
            f"train-eval needs >= 2 datasets in {out}, found {names}")
    spec = _spec(cfg)
    boundary_source = "dw" if "dw" in data else names[0]
    report = mlbench.cross_evaluate(data, spec,
                                    boundary_source=boundary_source,
                                    split_seed=cfg.seed)

    tree_dir = out / "trees"
    tree_dir.mkdir(parents=True, exist_ok=True)
    for name, tree in report.trees.items():
        (tree_dir / f"tree_{name}.json").write_text(mlbench.tree_to_json(tree))
    (out / "eval_report.json").write_text(
        json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")

    with open(out / "misclass_hist.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["train_set", "zeta_bin_lo", "zeta_bin_hi",
                         "cause", "count"])
        for name in sorted(report.histograms):
            for lo, hi, cause, count in report.histograms[name]:
                writer.writerow([name,
                                 "" if lo is None else "%.6g" % lo,
                                 "" if hi is None else "%.6g" % hi,
                                 cause, count])

    imap = model.input_index_map()
    if len(imap.pg_gens) >= 2:
        a = model.generators[imap.pg_gens[0]].bus_id
        b = model.generators[imap.pg_gens[1]].bus_id
        for name, rows in data.items():
            with open(out / f"scatter_{name}.csv", "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow([f"PG_{a}", f"PG_{b}", "secure", "in_hic"])
                for s in rows:
                    writer.writerow([dataset.FLOAT_FMT % s.x[0],
                                     dataset.FLOAT_FMT % s.x[1],
                                     int(s.secure), int(s.in_hic)])

    cols = names + ["boundary"]
    click.echo("F1 cross-table (rows = training set):")
    click.echo("  train\\test  " + "  ".join(f"{c:>10}" for c in cols))
    for name in sorted(data):
        vals = [report.f1_scores.get((name, c), float("nan")) for c in cols]
        click.echo(f"  {name:>10}  " + "  ".join(f"{v:10.3f}" for v in vals))


@main.command("stats")
@click.argument("csv_path", type=str)
@_common_options
@_exit_codes
def cmd_stats(csv_path, config_path, **overrides):
    """Print the share statistics of a dataset CSV."""
    cfg = _gather(config_path, **overrides)
    model, _ = _load_model(cfg)
    rows = dataset.read_csv(csv_path, model)
    st = dataset.stats(rows)
    click.echo(json.dumps(st.as_dict(), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
