"""Simulation of covariate fields and inhomogeneous Thomas processes, and the
Monte Carlo harness comparing CL, WCL and QL by mean squared error.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

from .core_model import CovariateField, IntensityModel, PointPattern, Window, make_grid_quadrature
from .errors import DomainError, InvalidArgumentError, NumericError, PointQLError
from .estimate import FitConfig, fit_cl, fit_ql, fit_two_step_psi, fit_wcl

DENSE_FIELD_CELLS = 64 * 64
DENSE_FALLBACK_CELLS = 80 * 80
DILATION_SDS = 4.0
STUDY_COLUMNS = (
    "kappa", "omega", "beta1", "window", "n_reps", "n_failed",
    "mse_cl", "mse_wcl", "mse_ql", "red_wcl_pct", "red_ql_pct",
)


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class GaussianFieldSpec:
    nx: int
    ny: int
    window: Window
    scale: float = 0.1
    variance: float = 1.0
    cov: str = "exponential"

    def __post_init__(self):
        if self.cov != "exponential":
            raise InvalidArgumentError(f"unsupported covariance {self.cov!r}")
        if not (self.scale > 0 and self.variance > 0):
            raise InvalidArgumentError("field scale and variance must be positive")
        if int(self.nx) < 1 or int(self.ny) < 1:
            raise InvalidArgumentError("field grid must be at least 1x1")

    def covariance(self, r):
        return self.variance * np.exp(-np.asarray(r) / self.scale)


@lru_cache(maxsize=8)
def _dense_factor(spec: GaussianFieldSpec) -> np.ndarray:
    centers = CovariateField(spec.nx, spec.ny, spec.window, np.zeros(spec.nx * spec.ny)).cell_centers()
    C = spec.covariance(cdist(centers, centers))
    try:
        return sla.cholesky(C, lower=True, check_finite=False)
    except sla.LinAlgError as exc:
        raise NumericError(f"Cholesky of the {spec.nx}x{spec.ny} field covariance failed: {exc}") from exc


@lru_cache(maxsize=8)
def _circulant_sqrt_eigs(spec: GaussianFieldSpec):
    """sqrt of the eigenvalues of the doubled-torus embedding, or None if it is not PSD."""
    hx = spec.window.width / spec.nx
    hy = spec.window.height / spec.ny
    M, N = 2 * spec.nx, 2 * spec.ny
    kx = np.minimum(np.arange(M), M - np.arange(M)) * hx
    ky = np.minimum(np.arange(N), N - np.arange(N)) * hy
    r = np.hypot(ky[:, None], kx[None, :])
    eig = np.fft.fft2(spec.covariance(r)).real
    if eig.min() < -1e-9 * eig.max():
        return None
    return np.sqrt(np.clip(eig, 0.0, None) / (M * N))


def simulate_gaussian_field(spec: GaussianFieldSpec, seed=None, name: str = "Z") -> CovariateField:
    """One zero-mean draw at the cell centres of the field grid."""
    rng = as_rng(seed)
    n = spec.nx * spec.ny
    if n > DENSE_FIELD_CELLS:
        sq = _circulant_sqrt_eigs(spec)
        if sq is not None:
            xi = rng.standard_normal(sq.shape) + 1j * rng.standard_normal(sq.shape)
            full = np.fft.fft2(sq * xi).real
            vals = full[: spec.ny, : spec.nx].ravel()
            return CovariateField(spec.nx, spec.ny, spec.window, vals, name=name)
        if n > DENSE_FALLBACK_CELLS:
            raise NumericError(
                f"circulant embedding of the {spec.nx}x{spec.ny} grid is not non-negative definite "
                "and the grid is too large for a dense factorisation"
            )
    L = _dense_factor(spec)
    vals = L @ rng.standard_normal(n)
    return CovariateField(spec.nx, spec.ny, spec.window, vals, name=name)


@dataclass(frozen=True)
class ThomasSpec:
    kappa: float
    omega: float
    target_model: IntensityModel

    def __post_init__(self):
        if not (self.kappa > 0 and math.isfinite(self.kappa)):
            raise InvalidArgumentError(f"kappa must be positive, got {self.kappa}")
        if not (self.omega > 0 and math.isfinite(self.omega)):
            raise InvalidArgumentError(f"omega must be positive, got {self.omega}")


def sup_intensity(model: IntensityModel, window: Window) -> float:
    """Exact supremum of a piecewise-constant-covariate intensity over ``window``."""
    xe = {window.xmin, window.xmax}
    ye = {window.ymin, window.ymax}
    for c in model.covariates:
        w = c.window
        xe.update(w.xmin + np.arange(c.nx + 1) * (w.width / c.nx))
        ye.update(w.ymin + np.arange(c.ny + 1) * (w.height / c.ny))
    xs = np.array(sorted(x for x in xe if window.xmin <= x <= window.xmax))
    ys = np.array(sorted(y for y in ye if window.ymin <= y <= window.ymax))
    mx, my = 0.5 * (xs[1:] + xs[:-1]), 0.5 * (ys[1:] + ys[:-1])
    gx, gy = np.meshgrid(mx, my)
    with np.errstate(over="ignore"):  # an infinite sup is reported by the caller
        return float(np.max(model.intensity_at(np.column_stack([gx.ravel(), gy.ravel()]))))


def simulate_thomas(spec: ThomasSpec, window: Window, seed=None) -> PointPattern:
    """Inhomogeneous Thomas process by independent thinning of a homogeneous one.

    Parents are Poisson(kappa) on the window dilated by 4 omega; each gets
    Poisson(lambda_max / kappa) offspring with N(0, omega^2 I) displacements;
    an offspring at u inside the window is kept with probability
    lambda(u) / lambda_max.
    """
    rng = as_rng(seed)
    lam_max = sup_intensity(spec.target_model, window)
    if not (math.isfinite(lam_max) and lam_max > 0):
        raise DomainError(f"sup of the target intensity is {lam_max}", value=lam_max)
    big = window.dilate(DILATION_SDS * spec.omega)
    n_par = rng.poisson(spec.kappa * big.area)
    parents = np.column_stack(
        [rng.uniform(big.xmin, big.xmax, n_par), rng.uniform(big.ymin, big.ymax, n_par)]
    )
    n_off = rng.poisson(lam_max / spec.kappa, n_par)
    centres = np.repeat(parents, n_off, axis=0)
    pts = centres + rng.normal(0.0, spec.omega, centres.shape)
    pts = pts[window.contains(pts)] if len(pts) else pts.reshape(0, 2)
    u = rng.uniform(size=len(pts))
    if len(pts):
        keep = u * lam_max < spec.target_model.intensity_at(pts)
        pts = pts[keep]
    return PointPattern(pts, window)


# -- MSE study -----------------------------------------------------------------------


@dataclass(frozen=True)
class StudyCell:
    kappa: float
    omega: float
    beta1: float
    window: float = 1.0  # side length of the square window
    target_count: float | None = None  # default 400 per unit area

    @property
    def count(self) -> float:
        return self.target_count if self.target_count is not None else 400.0 * self.window**2


@dataclass(frozen=True)
class StudyConfig:
    cells: tuple = (StudyCell(100, 0.02, 1.0), StudyCell(200, 0.04, 1.0))
    n_reps: int = 500
    grid_per_unit: int = 50
    taper_eps: float = 0.01
    field_scale: float = 0.1
    field_variance: float = 1.0
    family: str = "thomas"
    max_iter: int = 50
    threads: int = 1
    max_fail_frac: float = 0.05

    def __post_init__(self):
        cells = tuple(c if isinstance(c, StudyCell) else StudyCell(**c) for c in self.cells)
        object.__setattr__(self, "cells", cells)
        if int(self.n_reps) < 1:
            raise InvalidArgumentError("n_reps must be >= 1")


@dataclass
class StudyTable:
    rows: list
    replicates: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(STUDY_COLUMNS)
        for row in self.rows:
            wr.writerow([_fmt(row[c]) for c in STUDY_COLUMNS])
        return buf.getvalue()

    def replicates_csv(self) -> str:
        if not self.replicates:
            return ""
        cols = list(self.replicates[0].keys())
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(cols)
        for rec in self.replicates:
            wr.writerow([_fmt(rec[c]) for c in cols])
        return buf.getvalue()

    def summary_lines(self) -> list[str]:
        out = []
        for r in self.rows:
            flags = []
            if not r["valid"]:
                flags.append("INVALID")
            if r["low_confidence"]:
                flags.append("low-confidence")
            out.append(
                f"kappa={r['kappa']:g} omega={r['omega']:g} beta1={r['beta1']:g} W=[0,{r['window']:g}]^2 "
                f"reps={r['n_reps']} failed={r['n_failed']} "
                f"WCL {r['red_wcl_pct']:.1f}% QL {r['red_ql_pct']:.1f}%"
                + (f" [{', '.join(flags)}]" if flags else "")
            )
        return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def replicate_rng(seed: int, cell_index: int, rep: int) -> np.random.Generator:
    """Independent stream per (seed, cell, replicate); invariant to scheduling."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(cell_index, rep)))


def calibrate_intercept(field_: CovariateField, beta1: float, target: float, weights: np.ndarray) -> float:
    """beta0 with sum_i exp(beta0 + beta1 Z_i) w_i = target."""
    a = beta1 * field_.values
    amax = a.max()
    return math.log(target) - (amax + math.log(np.sum(np.exp(a - amax) * weights)))


def run_replicate(config: StudyConfig, cell_index: int, rep: int, seed: int) -> dict:
    cell = config.cells[cell_index]
    rng = replicate_rng(seed, cell_index, rep)
    window = Window.square(cell.window)
    n_grid = int(round(config.grid_per_unit * cell.window))
    quad = make_grid_quadrature(window, n_grid, n_grid)
    fspec = GaussianFieldSpec(n_grid, n_grid, window, config.field_scale, config.field_variance)
    rec = {"cell": cell_index, "rep": rep, "failed": False, "error": ""}
    try:
        Z = simulate_gaussian_field(fspec, rng)
        beta0 = calibrate_intercept(Z, cell.beta1, cell.count, quad.weights)
        truth = np.array([beta0, cell.beta1])
        model = IntensityModel((CovariateField.constant(window), Z), truth, "log")
        pattern = simulate_thomas(ThomasSpec(cell.kappa, cell.omega, model), window, rng)
        rec.update(beta0_star=beta0, beta1_star=cell.beta1, n_points=pattern.n,
                   achieved_count=float(model.intensity_at(quad.nodes) @ quad.weights))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cl = fit_cl(pattern, model, quad, FitConfig(estimator="cl", max_iter=config.max_iter, compute_cov=False))
            pcf = fit_two_step_psi(pattern, model, cl.beta_hat, config.family)
            wcl = fit_wcl(pattern, model, pcf, quad,
                          FitConfig(estimator="wcl", taper_eps=config.taper_eps, max_iter=config.max_iter, compute_cov=False))
            ql = fit_ql(pattern, model, pcf, quad,
                        FitConfig(estimator="ql", taper_eps=config.taper_eps, max_iter=config.max_iter),
                        beta_tilde=cl.beta_hat)
        for name, res in (("cl", cl), ("wcl", wcl), ("ql", ql)):
            if not res.converged:
                raise NumericError(f"{name} fit did not converge")
            rec[f"{name}_b0"], rec[f"{name}_b1"] = (float(b) for b in res.beta_hat)
        rec["ql_se0"], rec["ql_se1"] = (float(s) for s in ql.se)
        rec["psi"] = ";".join(repr(float(v)) for v in pcf.psi)
        rec["d_taper"] = ql.taper_stats["d_taper"]
    except PointQLError as exc:
        rec["failed"] = True
        rec["error"] = f"{type(exc).__name__}: {exc}"
    return rec


def _run_task(args):
    return run_replicate(*args)


REPLICATE_FIELDS = (
    "cell", "rep", "failed", "error", "beta0_star", "beta1_star", "n_points", "achieved_count",
    "cl_b0", "cl_b1", "wcl_b0", "wcl_b1", "ql_b0", "ql_b1", "ql_se0", "ql_se1", "psi", "d_taper",
)


def _normalise(rec):
    return {k: rec.get(k, "") for k in REPLICATE_FIELDS}


def squared_errors(recs, estimator: str) -> np.ndarray:
    """Per-replicate ||beta_hat - beta*||^2 for the successful replicates."""
    return np.array(
        [(r[f"{estimator}_b0"] - r["beta0_star"]) ** 2 + (r[f"{estimator}_b1"] - r["beta1_star"]) ** 2 for r in recs]
    )


def summarise_cell(cell: StudyCell, recs: list, config: StudyConfig) -> dict:
    ok = [r for r in recs if not r["failed"]]
    n_failed = len(recs) - len(ok)
    row = {
        "kappa": float(cell.kappa), "omega": float(cell.omega), "beta1": float(cell.beta1),
        "window": float(cell.window), "n_reps": len(recs), "n_failed": n_failed,
    }
    if ok:
        mse = {e: float(np.mean(squared_errors(ok, e))) for e in ("cl", "wcl", "ql")}
        red = {e: 100.0 * (1.0 - mse[e] / mse["cl"]) if mse["cl"] > 0 else float("nan") for e in ("wcl", "ql")}
    else:
        mse = {e: float("nan") for e in ("cl", "wcl", "ql")}
        red = {"wcl": float("nan"), "ql": float("nan")}
    row.update(mse_cl=mse["cl"], mse_wcl=mse["wcl"], mse_ql=mse["ql"],
               red_wcl_pct=red["wcl"], red_ql_pct=red["ql"])
    row["valid"] = n_failed <= config.max_fail_frac * len(recs)
    row["low_confidence"] = len(ok) < 30
    return row


def run_mse_study(config: StudyConfig, seed: int = 0) -> StudyTable:
    """Run every (cell, replicate) and summarise MSE reductions against CL."""
    tasks = [(config, c, r, seed) for c in range(len(config.cells)) for r in range(config.n_reps)]
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            recs = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * config.threads))))
    else:
        recs = [_run_task(t) for t in tasks]
    recs = [_normalise(r) for r in recs]
    rows = []
    for c, cell in enumerate(config.cells):
        rows.append(summarise_cell(cell, [r for r in recs if r["cell"] == c], config))
    return StudyTable(rows, recs)


def study_config_dict(config: StudyConfig) -> dict:
    d = asdict(config)
    d["cells"] = [asdict(c) for c in config.cells]
    return d
