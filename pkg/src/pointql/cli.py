"""Command-line interface: ``pointql simulate | fit | study``.

Every subcommand reads an optional JSON config (``--config``); flags given on
the command line win over config values. Unknown config keys are an error.
Outputs are staged in a temporary directory and moved into ``--out`` only
after the command succeeds.

Exit codes: 0 success, 1 input or system error, 2 numerical failure or
non-convergence.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core_model import (
    CovariateField,
    IntensityModel,
    Window,
    make_grid_quadrature,
    read_pattern_csv,
    read_raster,
    write_pattern_csv,
    write_raster,
)
from .errors import InputFormatError, InvalidArgumentError, NumericError, PointQLError
from .estimate import FitConfig, fit_pipeline
from .simulate import (
    GaussianFieldSpec,
    StudyCell,
    StudyConfig,
    ThomasSpec,
    calibrate_intercept,
    run_mse_study,
    simulate_gaussian_field,
    simulate_thomas,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

PCF_CHOICES = {
    "thomas": ("thomas", 0.5),
    "matern025": ("matern", 0.25),
    "matern05": ("matern", 0.5),
    "matern1": ("matern", 1.0),
    "cauchy": ("cauchy", 0.5),
    "poisson": ("poisson", 0.5),
}

# config key -> (default, flag type, help)
SIMULATE_KEYS = {
    "kappa": (100.0, float, "parent intensity of the Thomas process"),
    "omega": (0.02, float, "offspring dispersal standard deviation"),
    "beta1": (1.0, float, "coefficient of the Gaussian field covariate"),
    "beta0": (None, float, "intercept; calibrated to target_count when omitted"),
    "target_count": (400.0, float, "expected number of points used to calibrate beta0"),
    "window": (1.0, float, "side length of the square window [0, s]^2"),
    "grid": ("50x50", str, "field raster size NXxNY"),
    "field_scale": (0.1, float, "range of the exponential field covariance"),
    "field_variance": (1.0, float, "variance of the Gaussian field"),
}
FIT_KEYS = {
    "pattern": (None, str, "point pattern CSV (header x,y)"),
    "rasters": ([], str, "covariate raster file; repeat for several"),
    "estimator": ("ql", str, "estimator: cl, wcl or ql"),
    "pcf": ("thomas", str, "pair correlation family: " + ", ".join(PCF_CHOICES)),
    "grid": (None, str, "quadrature grid NXxNY; defaults to the first raster's size"),
    "taper_eps": (0.01, float, "taper threshold epsilon in (0, 1)"),
    "link": ("log", str, "link function: log or identity"),
    "intercept": (True, None, "include a constant-1 intercept covariate"),
    "max_iter": (50, int, "maximum Fisher scoring iterations"),
    "step_tol": (1e-8, float, "convergence tolerance on the sup-norm of the update"),
}
STUDY_KEYS = {
    "cells": (
        [{"kappa": 100.0, "omega": 0.02, "beta1": 1.0, "window": 1.0},
         {"kappa": 200.0, "omega": 0.04, "beta1": 1.0, "window": 1.0}],
        None,
        "list of cells {kappa, omega, beta1, window, target_count}; config file only",
    ),
    "n_reps": (500, int, "replicates per cell"),
    "grid_per_unit": (50, int, "quadrature cells per unit length"),
    "taper_eps": (0.01, float, "taper threshold epsilon"),
    "field_scale": (0.1, float, "range of the exponential field covariance"),
    "field_variance": (1.0, float, "variance of the Gaussian field"),
    "family": ("thomas", str, "pair correlation family fitted by minimum contrast"),
    "max_iter": (50, int, "maximum Fisher scoring iterations"),
    "max_fail_frac": (0.05, float, "cells with a larger failed fraction are marked invalid"),
}
COMMAND_KEYS = {"simulate": SIMULATE_KEYS, "fit": FIT_KEYS, "study": STUDY_KEYS}


def parse_grid(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*x\s*(\d+)\s*", str(text))
    if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
        raise InvalidArgumentError(f"grid must look like NXxNY with positive integers, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _flag(key):
    return "--" + key.replace("_", "-")


def _add_keys(parser, keys):
    for key, (default, typ, text) in keys.items():
        shown = json.dumps(default)
        help_ = f"{text} [config key: {key}; default: {shown}]"
        if key == "cells":
            continue
        if typ is None:
            parser.add_argument(_flag(key), dest=key, default=None, action=argparse.BooleanOptionalAction, help=help_)
        elif isinstance(default, list):
            parser.add_argument(_flag(key).rstrip("s"), dest=key, action="append", default=None, type=typ, help=help_)
        else:
            parser.add_argument(_flag(key), dest=key, default=None, type=typ, help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointql", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pointql {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    docs = {
        "simulate": "simulate a Gaussian field and an inhomogeneous Thomas pattern",
        "fit": "fit an intensity model to a point pattern and covariate rasters",
        "study": "Monte Carlo MSE comparison of CL, WCL and QL",
    }
    for name, keys in COMMAND_KEYS.items():
        epilog = "config keys (JSON): " + ", ".join(f"{k}={json.dumps(v[0])}" for k, v in keys.items())
        p = sub.add_parser(name, help=docs[name], description=docs[name], epilog=epilog)
        p.add_argument("--config", type=Path, help="JSON config file [default: none]")
        p.add_argument("--seed", type=int, default=0, help="random seed (unsigned 64-bit) [default: 0]")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory [default: .]")
        p.add_argument("--threads", type=int, default=1, help="worker processes [default: 1]")
        _add_keys(p, keys)
    return parser


def resolve_config(args, keys) -> dict:
    cfg = {k: v[0] for k, v in keys.items()}
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise InputFormatError(f"{args.config}: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise InputFormatError(f"{args.config}:{exc.lineno}: {exc.msg}") from exc
        if not isinstance(loaded, dict):
            raise InputFormatError(f"{args.config}: top level must be a JSON object")
        unknown = sorted(set(loaded) - set(keys))
        if unknown:
            raise InputFormatError(f"{args.config}: unknown config key(s) {unknown}")
        cfg.update(loaded)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


class StagedOutput:
    """Files are written to a scratch directory and moved into place on commit."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".pointql-", dir=self.out))

    def path(self, name: str) -> Path:
        return self.tmp / name

    def commit(self):
        for f in sorted(self.tmp.iterdir()):
            os.replace(f, self.out / f.name)
        self.tmp.rmdir()

    def discard(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


def _staged(out, body):
    stage = StagedOutput(out)
    try:
        code = body(stage)
    except BaseException:
        stage.discard()
        raise
    stage.commit()
    return code


# -- simulate ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = resolve_config(args, SIMULATE_KEYS)
    window = Window.square(float(cfg["window"]))
    nx, ny = parse_grid(cfg["grid"])
    fspec = GaussianFieldSpec(nx, ny, window, float(cfg["field_scale"]), float(cfg["field_variance"]))
    if not (float(cfg["kappa"]) > 0 and float(cfg["omega"]) > 0):
        raise InvalidArgumentError(f"kappa and omega must be positive, got {cfg['kappa']}, {cfg['omega']}")
    rng = np.random.default_rng(args.seed)
    Z = simulate_gaussian_field(fspec, rng, name="Z")
    quad = make_grid_quadrature(window, nx, ny)
    beta1 = float(cfg["beta1"])
    beta0 = cfg["beta0"]
    if beta0 is None:
        beta0 = calibrate_intercept(Z, beta1, float(cfg["target_count"]), quad.weights)
    model = IntensityModel((CovariateField.constant(window), Z), [float(beta0), beta1])
    pattern = simulate_thomas(ThomasSpec(float(cfg["kappa"]), float(cfg["omega"]), model), window, rng)

    def body(stage):
        write_pattern_csv(stage.path("pattern.csv"), pattern)
        write_raster(stage.path("Z.txt"), Z)
        truth = {"beta": [float(beta0), beta1], "kappa": float(cfg["kappa"]), "omega": float(cfg["omega"]),
                 "window": [window.xmin, window.xmax, window.ymin, window.ymax], "n_points": pattern.n,
                 "seed": args.seed, "config": cfg}
        stage.path("truth.json").write_text(json.dumps(truth, indent=2) + "\n")
        return EXIT_OK

    code = _staged(args.out, body)
    print(f"simulated {pattern.n} points; beta = ({beta0:.6g}, {beta1:.6g}); wrote {args.out}")
    return code


# -- fit ----------------------------------------------------------------------


def _fit_table(res) -> str:
    lines = [f"estimator: {res.estimator}", f"converged: {res.converged} after {res.iterations} iterations"]
    if res.psi_used is not None:
        lines.append("pcf: " + json.dumps(res.psi_used.to_config()))
    if res.taper_stats and res.taper_stats.get("d_taper") is not None:
        lines.append(f"d_taper: {res.taper_stats['d_taper']:.6g}")
    width = max(len(n) for n in res.names)
    lines.append(f"{'covariate':<{width}}  {'estimate':>12}  {'se':>12}")
    for n, b, s in zip(res.names, res.beta_hat, res.se):
        lines.append(f"{n:<{width}}  {b:>12.6g}  {s:>12.6g}")
    t = res.timing
    lines.append(f"time fit only: {t.get('fit_seconds', float('nan')):.3f} s; "
                 f"fit + standard errors: {t.get('fit_and_cov_seconds', float('nan')):.3f} s")
    return "\n".join(lines) + "\n"


def cmd_fit(args) -> int:
    cfg = resolve_config(args, FIT_KEYS)
    if not cfg["pattern"]:
        raise InvalidArgumentError("a pattern CSV is required (--pattern or config key 'pattern')")
    rasters = cfg["rasters"]
    if isinstance(rasters, str):
        rasters = [rasters]
    if not rasters:
        raise InvalidArgumentError("at least one raster is required (--raster or config key 'rasters')")
    paths = [Path(cfg["pattern"]).resolve()] + [Path(r).resolve() for r in rasters]
    for p in paths:
        if not p.is_file():
            raise InputFormatError(f"{p}: no such file")
    if cfg["pcf"] not in PCF_CHOICES:
        raise InvalidArgumentError(f"pcf must be one of {list(PCF_CHOICES)}, got {cfg['pcf']!r}")
    family, nu = PCF_CHOICES[cfg["pcf"]]
    fields = [read_raster(p) for p in paths[1:]]
    window = fields[0].window
    for f, p in zip(fields[1:], paths[2:]):
        if not f.window.isclose(window):
            raise InputFormatError(f"{p}: raster window {f.window} differs from {window}")
    pattern = read_pattern_csv(paths[0], window)
    grid = parse_grid(cfg["grid"]) if cfg["grid"] else (fields[0].nx, fields[0].ny)
    quad = make_grid_quadrature(window, *grid)
    covs = ([CovariateField.constant(window)] if cfg["intercept"] else []) + fields
    model = IntensityModel(tuple(covs), np.zeros(len(covs)), cfg["link"])
    config = FitConfig(max_iter=int(cfg["max_iter"]), step_tol=float(cfg["step_tol"]),
                       taper_eps=float(cfg["taper_eps"]), estimator=cfg["estimator"])

    res, _ = fit_pipeline(pattern, model, quad, config, family=family, nu=nu)

    def body(stage):
        payload = res.to_json()
        payload.update(pattern=str(paths[0]), rasters=[str(p) for p in paths[1:]], grid=list(grid))
        stage.path("fit.json").write_text(json.dumps(payload, indent=2) + "\n")
        stage.path("fit.txt").write_text(_fit_table(res))
        return EXIT_OK if res.converged else EXIT_NUMERIC

    code = _staged(args.out, body)
    sys.stdout.write(_fit_table(res))
    return code


# -- study ------------------------------------------------------------------------


def cmd_study(args) -> int:
    cfg = resolve_config(args, STUDY_KEYS)
    try:
        cells = tuple(StudyCell(**c) for c in cfg["cells"])
    except TypeError as exc:
        raise InvalidArgumentError(f"bad cell specification: {exc}") from exc
    config = StudyConfig(
        cells=cells, n_reps=int(cfg["n_reps"]), grid_per_unit=int(cfg["grid_per_unit"]),
        taper_eps=float(cfg["taper_eps"]), field_scale=float(cfg["field_scale"]),
        field_variance=float(cfg["field_variance"]), family=cfg["family"], max_iter=int(cfg["max_iter"]),
        threads=max(1, int(args.threads)), max_fail_frac=float(cfg["max_fail_frac"]),
    )
    t0 = time.perf_counter()
    table = run_mse_study(config, seed=args.seed)
    elapsed = time.perf_counter() - t0

    def body(stage):
        stage.path("study.csv").write_text(table.to_csv())
        stage.path("replicates.csv").write_text(table.replicates_csv())
        return EXIT_OK

    _staged(args.out, body)
    for line in table.summary_lines():
        print(line)
    print(f"elapsed {elapsed:.1f} s; wrote {Path(args.out) / 'study.csv'}")
    return EXIT_OK if all(r["valid"] for r in table.rows) else EXIT_NUMERIC


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "study": cmd_study}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"pointql {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PointQLError, OSError) as exc:
        print(f"pointql {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
