"""Command-line interface: ``sepsurf <command> [options]``.

Every command accepts ``--config FILE`` (JSON whose keys mirror the long
option names, with dashes or underscores); explicit flags override it.  Each
output embeds the resolved configuration, so feeding that block back through
``--config`` reruns the command identically.  JSON outputs carry it under
``"config"``; CSV outputs get a ``<output>.config.json`` sidecar.

Exit codes: 0 success, 2 usage error, 3 data or I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from sepsurf import __version__
from sepsurf.data import Grid2, OptionDomain, SparseDataset, ingest_options
from sepsurf.errors import DataError, SepsurfError, SingularSystem
from sepsurf.prediction import blup, pointwise_band, simultaneous_band
from sepsurf.separable import FitOptions, SeparableModel, fit_separable
from sepsurf.simstudy import (
    SCENARIOS,
    HoldoutPattern,
    Scenario,
    error_study,
    fit_4d,
    holdout_evaluate,
    runtime_benchmark,
    sample_surfaces,
    scenario_covariance,
    write_csv,
)
from sepsurf.smoothing import Bandwidths2

log = logging.getLogger("sepsurf")

EXIT_USAGE = 2

DEFAULTS = {
    "simulate": {
        "scenario": "brownian", "grid": "20", "n": 100, "p": "0.1", "noise_sigma2": None, "seed": 0,
        "out": "data.csv", "truth": None,
    },
    "estimate": {
        "data": None, "grid": "20", "method": "separable", "steps": 2, "bandwidth": None, "folds": 10,
        "psd": False, "seed": 0, "out": "model.json",
    },
    "predict": {
        "model": None, "obs": None, "surface": None, "alpha": 0.05, "n_draws": 10_000, "seed": 0,
        "ridge": None, "out": "prediction.json",
    },
    "evaluate": {
        "data": None, "grid": "20", "pattern": "chain", "folds": 10, "methods": "separable,presmooth",
        "bandwidth": None, "seed": 0, "out": "evaluation.csv",
    },
    "benchmark": {
        "kind": "error", "scenario": "brownian", "grid": "20", "n": 100, "p": "0.1", "replicates": 5,
        "methods": "one_step,proposed", "bandwidth": None, "seed": 0, "out": "benchmark.csv",
    },
    "ingest-options": {"input": None, "out": "options.csv", "log_iv": True},
}
REQUIRED = {"estimate": ["data"], "predict": ["model", "obs"], "evaluate": ["data"], "ingest-options": ["input"]}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# parsing helpers


def _floats(text) -> list[float]:
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _grid(text) -> Grid2:
    vals = [int(v) for v in _floats(text)]
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 1:
        raise UsageError(f"grid must be 'd' or 'd1,d2', got {text!r}")
    return Grid2(*vals)


def _fractions(text) -> list[float]:
    """Sampling fractions; values above 1 are read as percentages."""
    out = [v / 100.0 if v > 1 else v for v in _floats(text)]
    if any(not 0 < v <= 1 for v in out):
        raise UsageError(f"sampling fractions must lie in (0, 1] or (0, 100] percent, got {text!r}")
    return out


def _bandwidth_options(text, **kwargs) -> FitOptions:
    """``h`` (all smoothers), ``h1,h2`` (shared pair) or eight values for mean, A, B and noise pairs."""
    if text is None:
        return FitOptions(**kwargs)
    vals = _floats(text)
    if len(vals) in (1, 2):
        return FitOptions.fixed(tuple(vals) if len(vals) == 2 else vals[0], **kwargs)
    if len(vals) == 8:
        pairs = [tuple(vals[k:k + 2]) for k in range(0, 8, 2)]
        return FitOptions(bw_mean=pairs[0], bw_a=pairs[1], bw_b=pairs[2], bw_noise=pairs[3], **kwargs)
    raise UsageError("--bandwidth takes 1, 2 or 8 comma-separated values")


def _write_json(path, doc):
    text = json.dumps(doc, indent=1)
    if str(path) == "-":
        sys.stdout.write(text + "\n")
    else:
        Path(path).write_text(text, encoding="utf-8")


def _write_sidecar(out, config):
    if str(out) != "-":
        _write_json(f"{out}.config.json", {"config": config})


@contextmanager
def _stage(name, timings):
    start = time.perf_counter()
    yield
    timings[name] = time.perf_counter() - start
    # wall-times go to the log only, so outputs stay reproducible
    log.info("%s: %.3f s", name, timings[name])


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg) -> int:
    grid = _grid(cfg["grid"])
    (p,) = _fractions(cfg["p"])
    sc = Scenario(cfg["scenario"], grid)
    cov = scenario_covariance(sc)
    ds = sample_surfaces(cov, grid, int(cfg["n"]), p, cfg["noise_sigma2"], int(cfg["seed"]))
    ds.to_csv(cfg["out"])
    _write_sidecar(cfg["out"], cfg)
    truth_path = cfg["truth"] or str(Path(cfg["out"]).with_suffix("")) + ".truth.json"
    truth = {"grid": {"d1": grid.d1, "d2": grid.d2}, "scenario": sc.kind, "sigma2": ds.meta["sigma2"]}
    if isinstance(cov, tuple):
        truth.update({"A": cov[0].ravel().tolist(), "B": cov[1].ravel().tolist()})
    else:
        truth.update({"shape": list(cov.shape), "C": cov.ravel().tolist()})
    truth["config"] = cfg
    _write_json(truth_path, truth)
    log.info("wrote %d observations of %d surfaces to %s", len(ds), ds.n_surfaces, cfg["out"])
    return 0


def cmd_estimate(cfg) -> int:
    grid = _grid(cfg["grid"])
    timings = {}
    with _stage("read", timings):
        ds = SparseDataset.from_csv(cfg["data"])
    opts = _bandwidth_options(
        cfg["bandwidth"], steps=int(cfg["steps"]), psd_project=bool(cfg["psd"]), seed=int(cfg["seed"]),
        cv_folds=int(cfg["folds"]),
    )
    if cfg["method"] == "separable":
        with _stage("fit_separable", timings):
            model = fit_separable(ds, grid, opts)
        _write_json(cfg["out"], json.loads(model.to_json(None, config=cfg)))
        return 0
    if grid.d1 * grid.d2 >= 400 or len(ds) / max(ds.n_surfaces, 1) >= 40:
        log.warning("4D smoothing is expensive at this size (cost grows with grid^4 and pairs per surface)")
    with _stage("bandwidths", timings):
        if any(v is None for v in (opts.bw_mean, opts.bw_a, opts.bw_b, opts.bw_noise)):
            # 4D windows are transferred from the separable cross-validation
            sep = fit_separable(ds, grid, opts)
            bw = {k: Bandwidths2(*v) for k, v in sep.bandwidths.items()}
            opts = FitOptions(bw_mean=bw["mean"], bw_a=bw["a"], bw_b=bw["b"], bw_noise=bw["noise"])
    with _stage("fit_4d", timings):
        mean, C, sigma2 = fit_4d(ds, grid, opts)
    doc = {
        "grid": {"d1": grid.d1, "d2": grid.d2},
        "method": "4d",
        "mean": mean.ravel().tolist(),
        "shape": list(C.shape),
        "C": C.ravel().tolist(),
        "sigma2": sigma2,
        "bandwidths": {k: list(getattr(opts, f"bw_{k}").as_tuple()) for k in ("mean", "a", "b", "noise")},
        "meta": {"n_surfaces": int(ds.n_surfaces), "n_obs": len(ds), "seed": int(cfg["seed"])},
        "config": cfg,
    }
    _write_json(cfg["out"], doc)
    return 0


def _read_obs(path, surface):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"t", "s", "y"} <= set(rows[0]):
        raise DataError(f"{path}: need columns t,s,y")
    if surface is not None:
        if "surface_id" not in rows[0]:
            raise DataError(f"{path}: --surface given but there is no surface_id column")
        rows = [r for r in rows if int(r["surface_id"]) == int(surface)]
        if not rows:
            raise DataError(f"{path}: surface {surface} has no observations")
    t, s, y = (np.array([float(r[k]) for r in rows]) for k in ("t", "s", "y"))
    return t, s, y


def cmd_predict(cfg) -> int:
    model = SeparableModel.from_json(cfg["model"])
    t, s, y = _read_obs(cfg["obs"], cfg["surface"])
    try:
        res = blup(model, t, s, y, ridge=cfg["ridge"])
    except SingularSystem as exc:
        raise SingularSystem(f"{exc} (try --ridge 1e-6 or larger)") from exc
    pointwise_band(res, float(cfg["alpha"]))
    simultaneous_band(res, float(cfg["alpha"]), int(cfg["n_draws"]), int(cfg["seed"]))
    doc = res.to_dict()
    doc["quantile_order"] = {
        "z_below_u": bool(res.z_quantile < res.u_quantile),
        "z_quantile": res.z_quantile,
        "u_quantile": res.u_quantile,
    }
    doc["config"] = cfg
    _write_json(cfg["out"], doc)
    return 0


def cmd_evaluate(cfg) -> int:
    grid = _grid(cfg["grid"])
    ds = SparseDataset.from_csv(cfg["data"])
    opts = _bandwidth_options(cfg["bandwidth"], seed=int(cfg["seed"]))
    if any(v is None for v in (opts.bw_mean, opts.bw_a, opts.bw_b, opts.bw_noise)):
        sep = fit_separable(ds, grid, opts)
        bw = {k: Bandwidths2(*v) for k, v in sep.bandwidths.items()}
        opts = FitOptions(bw_mean=bw["mean"], bw_a=bw["a"], bw_b=bw["b"], bw_noise=bw["noise"])
    names = [m.strip() for m in str(cfg["methods"]).split(",") if m.strip()]
    for m in names:
        if m not in ("separable", "4d", "presmooth"):
            raise UsageError(f"unknown method {m!r}")
    rep = holdout_evaluate(
        ds, grid, HoldoutPattern(cfg["pattern"]), int(cfg["folds"]), {m: m for m in names}, int(cfg["seed"]), opts
    )
    write_csv(rep["rows"], cfg["out"], ["pattern", "fold", "surface_id", "method", "rmse_ratio"])
    _write_sidecar(cfg["out"], {**cfg, "medians": rep["medians"], "skipped": rep["skipped"]})
    for m, v in rep["medians"].items():
        log.info("median RMSE ratio %s: %.4f", m, v)
    return 0


def cmd_benchmark(cfg) -> int:
    grid = _grid(cfg["grid"])
    ps = _fractions(cfg["p"])
    methods = [m.strip() for m in str(cfg["methods"]).split(",") if m.strip()]
    if cfg["kind"] == "error":
        opts = _bandwidth_options(cfg["bandwidth"], seed=int(cfg["seed"]))
        rows = error_study(
            Scenario(cfg["scenario"], grid), ps, int(cfg["n"]), int(cfg["replicates"]), methods, int(cfg["seed"]), opts
        )
        write_csv(rows, cfg["out"], ["scenario", "p", "n", "method", "replicate", "rel_error"])
    else:
        bw = None
        if cfg["bandwidth"] is not None:
            vals = _floats(cfg["bandwidth"])
            bw = tuple(vals[:2]) if len(vals) > 1 else vals[0]
        sizes = [(grid.d1, int(cfg["n"]), p) for p in ps]
        rows = runtime_benchmark(
            [cfg["scenario"]], sizes, int(cfg["seed"]), bw,
            include_unpooled="separable_unpooled" in methods or "all" in methods,
            include_4d="4d" in methods or "all" in methods,
        )
        write_csv(rows, cfg["out"], ["scenario", "d", "n", "p", "method", "seconds"])
    _write_sidecar(cfg["out"], cfg)
    return 0


def cmd_ingest_options(cfg) -> int:
    ds = ingest_options(cfg["input"], OptionDomain(), log_iv=bool(cfg["log_iv"]))
    ds.to_csv(cfg["out"])
    _write_sidecar(cfg["out"], {**cfg, "ingest": ds.meta})
    log.info(
        "kept %d quotes; dropped %d outside the domain and %d without implied volatility",
        len(ds), ds.meta["dropped_outside_domain"], ds.meta["dropped_no_implied_vol"],
    )
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "ingest-options": cmd_ingest_options,
}


# ---------------------------------------------------------------------------
# argument parser and config resolution


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=S)
    common.add_argument("--config", help="JSON file with option values (flags take precedence)")
    common.add_argument("--threads", type=int, help="cap on BLAS threads (env SEPSURF_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="sepsurf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"sepsurf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], argument_default=S, help="draw a synthetic sparse dataset")
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--grid", help="d or d1,d2")
    p.add_argument("--n", type=int, help="number of surfaces")
    p.add_argument("--p", help="fraction of cells kept per surface (values > 1 are percent)")
    p.add_argument("--noise-sigma2", type=float, help="noise variance (default 1/(d1*d2))")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="dataset CSV")
    p.add_argument("--truth", help="truth JSON (default <out>.truth.json)")

    p = sub.add_parser("estimate", parents=[common], argument_default=S, help="fit a covariance model")
    p.add_argument("--data", help="CSV with surface_id,t,s,y")
    p.add_argument("--grid")
    p.add_argument("--method", choices=["separable", "4d"])
    p.add_argument("--steps", type=int)
    p.add_argument("--bandwidth", help="h | h1,h2 | 8 values (mean, A, B, noise pairs); default: cross-validate")
    p.add_argument("--folds", type=int)
    p.add_argument("--psd", action="store_true", help="project factors onto PSD matrices")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("predict", parents=[common], argument_default=S, help="BLUP with confidence bands")
    p.add_argument("--model", help="model JSON from 'estimate'")
    p.add_argument("--obs", help="CSV with t,s,y (optionally surface_id)")
    p.add_argument("--surface", type=int, help="use only rows with this surface_id")
    p.add_argument("--alpha", type=float)
    p.add_argument("--n-draws", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ridge", type=float)
    p.add_argument("--out")

    p = sub.add_parser("evaluate", parents=[common], argument_default=S, help="hold-out prediction comparison")
    p.add_argument("--data")
    p.add_argument("--grid")
    p.add_argument("--pattern", choices=["chain", "itm", "otm", "short", "long"])
    p.add_argument("--folds", type=int)
    p.add_argument("--methods", help="comma list of separable, 4d, presmooth")
    p.add_argument("--bandwidth")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("benchmark", parents=[common], argument_default=S, help="error study or runtime table")
    p.add_argument("--kind", choices=["error", "runtime"])
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--grid")
    p.add_argument("--n", type=int)
    p.add_argument("--p", help="comma list of fractions or percentages")
    p.add_argument("--replicates", type=int)
    p.add_argument("--methods", help="error: one_step,proposed,three_step,4d,bsa; runtime: separable_unpooled,4d")
    p.add_argument("--bandwidth")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("ingest-options", parents=[common], argument_default=S, help="option quotes to implied vols")
    p.add_argument("--input", help="CSV with surface_id,spot,strike,tau_days,rate,price")
    p.add_argument("--out")
    p.add_argument("--no-log-iv", dest="log_iv", action="store_false", help="store implied vol, not its log")
    return parser


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    cfg = dict(DEFAULTS[command])
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "threads", "verbose")}
    if getattr(ns, "config", None):
        try:
            doc = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {ns.config}: {exc}") from exc
        doc = doc.get("config", doc)
        if doc.get("command", command) != command:
            raise UsageError(f"config is for command {doc['command']!r}, not {command!r}")
        for key, val in doc.items():
            key = key.replace("-", "_")
            if key == "command":
                continue
            if key not in cfg:
                raise UsageError(f"unknown config key {key!r} for {command}")
            cfg[key] = val
    cfg.update(flags)
    missing = [k for k in REQUIRED.get(command, []) if cfg.get(k) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    cfg["command"] = command
    return cfg


def _threads(ns) -> int | None:
    val = getattr(ns, "threads", None)
    if val is None and os.environ.get("SEPSURF_THREADS"):
        try:
            val = int(os.environ["SEPSURF_THREADS"])
        except ValueError as exc:
            raise UsageError("SEPSURF_THREADS must be an integer") from exc
    if val is not None and val < 1:
        raise UsageError("--threads must be positive")
    return val


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
        format="%(name)s: %(levelname)s: %(message)s",
    )
    try:
        threads = _threads(ns)
        cfg = resolve_config(ns.command, ns)
        with threadpool_limits(limits=threads):
            return COMMANDS[ns.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sepsurf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SepsurfError as exc:
        print(f"sepsurf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError, KeyError) as exc:
        print(f"sepsurf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
