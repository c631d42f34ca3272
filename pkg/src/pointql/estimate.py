"""Intensity estimators: composite likelihood (CL), weighted CL (WCL) and
quasi-likelihood (QL), plus the two-step pair-correlation fit, sandwich
covariances and Wald backward selection.

All three estimators are solved by Fisher scoring. CL and WCL use the exact
event locations in the data term; QL uses quadrature cell counts, i.e. the
score (Y - mu)^T V^{-1} D with V = diag(mu)^{1/2} (I + G) diag(mu)^{1/2}.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats
from scipy.spatial import cKDTree

from .core_model import IntensityModel, PointPattern, QuadratureScheme
from .errors import DomainError, InvalidArgumentError, NumericError, PointQLError
from .fredholm import SymmetricFactor, excess_matvec, kernel_from_intensity, nystrom_solve
from .paircorr import FREE_PARAMS, PairCorrelationModel, k_function, taper_distance

ESTIMATORS = ("cl", "wcl", "ql")
_MAX_HALVINGS = 30


class CellOccupancyWarning(UserWarning):
    """Some quadrature cells hold more than one event."""


class SelectionError(PointQLError):
    """A refit failed during backward selection; ``trace`` holds the steps so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class FitConfig:
    max_iter: int = 50
    step_tol: float = 1e-8
    taper_eps: float | None = 0.01  # None: no taper (dense solve)
    estimator: str = "ql"
    init: tuple | None = None
    compute_cov: bool = True

    def __post_init__(self):
        if int(self.max_iter) < 1:
            raise InvalidArgumentError("max_iter must be >= 1")
        if not self.step_tol > 0:
            raise InvalidArgumentError("step_tol must be positive")
        if self.taper_eps is not None and not 0 < self.taper_eps < 1:
            raise InvalidArgumentError(f"taper_eps must lie in (0, 1), got {self.taper_eps}")
        if self.estimator not in ESTIMATORS:
            raise InvalidArgumentError(f"estimator must be one of {ESTIMATORS}")


@dataclass
class FitResult:
    beta_hat: np.ndarray
    cov_hat: np.ndarray | None
    iterations: int
    converged: bool
    score_norm: float
    estimator: str
    names: list = field(default_factory=list)
    psi_used: PairCorrelationModel | None = None
    taper_stats: dict | None = None
    warnings: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        if self.cov_hat is None:
            return np.full(self.beta_hat.shape, np.nan)
        return np.sqrt(np.clip(np.diag(self.cov_hat), 0.0, None))

    def wald_pvalues(self) -> np.ndarray:
        z = self.beta_hat / self.se
        return 2.0 * stats.norm.sf(np.abs(z))

    def to_json(self) -> dict:
        ts = self.taper_stats or {}
        return {
            "beta_hat": [float(b) for b in self.beta_hat],
            "se": [float(s) for s in self.se],
            "cov": None if self.cov_hat is None else self.cov_hat.tolist(),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "estimator": self.estimator,
            "psi": None if self.psi_used is None else self.psi_used.to_config(),
            "d_taper": ts.get("d_taper"),
            "warnings": list(self.warnings),
            "names": list(self.names),
            "timing": dict(self.timing),
        }


# -- shared pieces -----------------------------------------------------------


def default_init(pattern: PointPattern, model: IntensityModel) -> np.ndarray:
    """Intercept matched to N / |W|, other coefficients zero."""
    j = model.intercept_index()
    beta = np.zeros(model.p)
    rate = pattern.n / pattern.window.area
    if j is None:
        if model.link == "identity":
            raise InvalidArgumentError("identity link without an intercept needs an explicit init")
        return beta
    beta[j] = math.log(rate) if model.link == "log" else rate
    return beta


def _check_data(pattern, model):
    if pattern.n < model.p:
        raise InvalidArgumentError(f"pattern has {pattern.n} points but the model has p={model.p} parameters")


def _initial_beta(pattern, model, config):
    if config.init is not None:
        beta = np.asarray(config.init, dtype=float).ravel()
        if beta.size != model.p:
            raise InvalidArgumentError(f"init has length {beta.size}, expected {model.p}")
        return beta
    return default_init(pattern, model)


def _solve_step(S, score, it):
    try:
        step = np.linalg.solve(S, score)
    except np.linalg.LinAlgError:
        raise NumericError(f"singular sensitivity matrix at iteration {it}") from None
    if not np.all(np.isfinite(step)):
        raise NumericError(f"non-finite Fisher scoring step at iteration {it}")
    return step


def _admissible(model, beta, designs):
    for Z in designs:
        if not Z.size:
            continue
        eta = Z @ beta
        if model.link == "identity":
            if not np.all(eta > 0):
                return False
        # exp must neither overflow nor underflow to zero
        elif not (np.all(eta < 700.0) and np.all(eta > -700.0)):
            return False
    return True


_MAX_ETA_STEP = 5.0


def _accept_step(model, beta, step, designs):
    """Step-halve until the intensity is positive and finite on every design.

    Under the log link a step that moves the linear predictor by more than
    ``_MAX_ETA_STEP`` anywhere is first scaled back to that size, so a poor
    start cannot throw the iteration far past the root.
    """
    if model.link == "log":
        shift = max((np.max(np.abs(Z @ step)) for Z in designs if Z.size), default=0.0)
        if shift > _MAX_ETA_STEP:
            step = step * (_MAX_ETA_STEP / shift)
    for _ in range(_MAX_HALVINGS):
        cand = beta + step
        if _admissible(model, cand, designs):
            return cand
        step = 0.5 * step
    raise DomainError("Fisher scoring update could not keep the intensity positive and finite")


def godambe_covariance(F, D, mu, nodes, pcf: PairCorrelationModel | None = None) -> np.ndarray:
    """Sandwich covariance S^{-1} (F^T V F) S^{-T} with S = D^T F.

    F holds the estimating-function weights at the quadrature nodes (m x p),
    D = d mu / d beta, and V_ij = mu_i 1(i=j) + mu_i mu_j c(u_i - u_j). V is
    only applied through blockwise products, never formed or inverted.
    """
    S = D.T @ F
    VF = mu[:, None] * F
    if pcf is not None and not pcf.is_poisson:
        VF = VF + mu[:, None] * excess_matvec(nodes, pcf, mu[:, None] * F)
    Sigma = F.T @ VF
    try:
        Sinv = np.linalg.inv(S)
    except np.linalg.LinAlgError:
        raise NumericError("singular sensitivity matrix in covariance estimate") from None
    cov = Sinv @ Sigma @ Sinv.T
    return 0.5 * (cov + cov.T)


# -- CL and WCL ------------------------------------------------------------


def _weighted_poisson_fit(pattern, model, quad, config, A, estimator, pcf_cov):
    _check_data(pattern, model)
    t0 = time.perf_counter()
    Zq = model.design(quad.nodes)
    Zx = model.design(pattern.points)
    w = quad.weights
    beta = _initial_beta(pattern, model, config)

    def pieces(beta):
        lam_q = model.intensity_from_design(Zq, beta, quad.nodes)
        lam_x = model.intensity_from_design(Zx, beta, pattern.points)
        grad_q = model.gradient_from_design(Zq, lam_q)
        grad_x = model.gradient_from_design(Zx, lam_x)
        wq = 1.0 / (1.0 + lam_q * A)
        wx = 1.0 / (1.0 + lam_x * A)
        score = (wx / lam_x) @ grad_x - (wq * w) @ grad_q
        return lam_q, grad_q, wq, score

    converged, it = False, 0
    for it in range(1, config.max_iter + 1):
        lam_q, grad_q, wq, score = pieces(beta)
        S = grad_q.T @ ((wq * w / lam_q)[:, None] * grad_q)
        step = _solve_step(S, score, it)
        new = _accept_step(model, beta, step, (Zq, Zx))
        done = np.max(np.abs(new - beta)) < config.step_tol
        beta = new
        if done:
            converged = True
            break
    lam_q, grad_q, wq, score = pieces(beta)
    t1 = time.perf_counter()
    cov = None
    if config.compute_cov:
        F = (wq / lam_q)[:, None] * grad_q
        D = grad_q * w[:, None]
        cov = godambe_covariance(F, D, lam_q * w, quad.nodes, pcf_cov)
    t2 = time.perf_counter()
    return FitResult(
        beta_hat=beta,
        cov_hat=cov,
        iterations=it,
        converged=converged,
        score_norm=float(np.max(np.abs(score))),
        estimator=estimator,
        names=model.names,
        timing={"fit_seconds": t1 - t0, "fit_and_cov_seconds": t2 - t0},
    )


def fit_cl(pattern, model, quad, config: FitConfig | None = None, pcf: PairCorrelationModel | None = None) -> FitResult:
    """Composite-likelihood (Poisson score) fit.

    ``pcf`` does not affect the estimate; when given, the covariance is the
    sandwich under that pair correlation instead of the inverse Poisson
    information.
    """
    config = config or FitConfig(estimator="cl")
    res = _weighted_poisson_fit(pattern, model, quad, config, 0.0, "cl", pcf)
    res.psi_used = pcf
    return res


def wcl_constant(pcf: PairCorrelationModel, taper_eps: float) -> tuple[float, float | None]:
    """A = K(d) - pi d^2 at the taper distance d, and d itself."""
    if pcf.is_poisson:
        return 0.0, None
    d = taper_distance(pcf, taper_eps)
    return float(k_function(pcf, d) - math.pi * d * d), d


def fit_wcl(pattern, model, pcf: PairCorrelationModel, quad, config: FitConfig | None = None) -> FitResult:
    """Weighted Poisson score with w(u) = 1 / (1 + lambda(u) A)."""
    config = config or FitConfig(estimator="wcl")
    eps = config.taper_eps if config.taper_eps is not None else 0.01
    A, d = wcl_constant(pcf, eps)
    res = _weighted_poisson_fit(pattern, model, quad, config, A, "wcl", pcf)
    res.psi_used = pcf
    res.taper_stats = {"d_taper": d, "A": A}
    return res


# -- QL ----------------------------------------------------------------------


def _occupancy_warning(Y):
    occupied = np.count_nonzero(Y)
    multi = np.count_nonzero(Y >= 2)
    if multi:
        frac = multi / max(occupied, 1)
        msg = f"{multi} of {occupied} occupied cells ({100 * frac:.1f}%) hold more than one event"
        warnings.warn(msg, CellOccupancyWarning, stacklevel=3)
        return msg
    return None


def fit_ql(
    pattern,
    model,
    pcf: PairCorrelationModel,
    quad,
    config: FitConfig | None = None,
    beta_tilde=None,
) -> FitResult:
    """Quasi-likelihood fit by iterative generalised least squares.

    ``G`` is assembled once from (beta_tilde, pcf), tapered at the distance
    where c has dropped to ``taper_eps`` of c(0), and factored once. Only the
    diagonal scaling diag(mu)^{1/2} follows the current iterate. When
    ``beta_tilde`` is None a CL fit provides it.
    """
    config = config or FitConfig(estimator="ql")
    _check_data(pattern, model)
    t0 = time.perf_counter()
    if beta_tilde is None:
        beta_tilde = fit_cl(pattern, model, quad, FitConfig(estimator="cl", compute_cov=False)).beta_hat
    beta_tilde = np.asarray(beta_tilde, dtype=float)
    notes = []
    Y = quad.cell_counts(pattern.points)
    msg = _occupancy_warning(Y)
    if msg:
        notes.append(msg)

    Zq = model.design(quad.nodes)
    w = quad.weights
    lam_tilde = model.intensity_from_design(Zq, beta_tilde, quad.nodes)
    d_taper = None
    if not pcf.is_poisson and config.taper_eps is not None:
        d_taper = taper_distance(pcf, config.taper_eps)
    kernel = kernel_from_intensity(lam_tilde, pcf, quad, d_taper)
    factor = None if pcf.is_poisson else SymmetricFactor(kernel)
    if factor is not None and factor.jitter:
        notes.append(f"diagonal jitter {factor.jitter:.3g} added to I + G")

    def pieces(beta):
        lam = model.intensity_from_design(Zq, beta, quad.nodes)
        mu = lam * w
        D = model.gradient_from_design(Zq, lam) * w[:, None]
        s = np.sqrt(mu)
        B = D / s[:, None]
        X = B if factor is None else factor.solve(B)
        VinvD = X / s[:, None]
        score = VinvD.T @ (Y - mu)
        return mu, D, VinvD, score

    # start at beta_tilde: it is already at hand and the moment-match start can diverge
    beta = np.asarray(config.init, dtype=float).ravel() if config.init is not None else beta_tilde.copy()
    if beta.size != model.p:
        raise InvalidArgumentError(f"init has length {beta.size}, expected {model.p}")
    converged, it = False, 0
    for it in range(1, config.max_iter + 1):
        mu, D, VinvD, score = pieces(beta)
        step = _solve_step(D.T @ VinvD, score, it)
        new = _accept_step(model, beta, step, (Zq,))
        done = np.max(np.abs(new - beta)) < config.step_tol
        beta = new
        if done:
            converged = True
            break
    mu, D, VinvD, score = pieces(beta)
    t1 = time.perf_counter()
    cov = godambe_covariance(VinvD, D, mu, quad.nodes, pcf) if config.compute_cov else None
    t2 = time.perf_counter()
    stats_ = kernel.sparsity_stats()
    return FitResult(
        beta_hat=beta,
        cov_hat=cov,
        iterations=it,
        converged=converged,
        score_norm=float(np.max(np.abs(score))),
        estimator="ql",
        names=model.names,
        psi_used=pcf,
        taper_stats={"d_taper": d_taper, "retained_fraction": stats_["fill_ratio"], "retained": stats_["retained"]},
        warnings=notes,
        timing={"fit_seconds": t1 - t0, "fit_and_cov_seconds": t2 - t0},
    )


def ql_phi(model: IntensityModel, pcf: PairCorrelationModel, quad: QuadratureScheme, taper_eps: float | None = None):
    """Nystrom phi-hat at the nodes for the model's own beta."""
    lam = model.intensity_at(quad.nodes)
    d = None if (pcf.is_poisson or taper_eps is None) else taper_distance(pcf, taper_eps)
    kernel = kernel_from_intensity(lam, pcf, quad, d)
    rhs = model.gradient_at(quad.nodes) / lam[:, None]
    return nystrom_solve(kernel, rhs).values


def ql_estimating_function(counts, phi, mu) -> np.ndarray:
    """sum_i phi(u_i) (Y_i - mu_i)."""
    return phi.T @ (np.asarray(counts, float) - mu)


# -- two-step estimation of psi ---------------------------------------------------


def default_t_grid(window, n: int = 100) -> np.ndarray:
    tmax = 0.25 * min(window.width, window.height)
    return np.linspace(tmax / n, tmax, n)


def empirical_k_inhom(pattern: PointPattern, model: IntensityModel, t_grid) -> np.ndarray:
    """Inhomogeneous K-function estimate with translation edge correction.

    K(t) = |W|^{-1} sum_{u != v, ||u - v|| <= t} 1 / (lambda(u) lambda(v) e(u, v)),
    e(u, v) = |W cap W_{u - v}| / |W|.
    """
    t = np.asarray(t_grid, dtype=float)
    win = pattern.window
    if t.size and (np.any(np.diff(t) < 0) or t[0] < 0):
        raise InvalidArgumentError("t_grid must be non-negative and increasing")
    if t.size and t[-1] > 0.25 * min(win.width, win.height) * (1 + 1e-12):
        raise InvalidArgumentError("t_grid exceeds a quarter of the shorter window side")
    if pattern.n < 2 or t.size == 0:
        return np.zeros_like(t)
    pts = pattern.points
    lam = model.intensity_at(pts)
    bad = np.flatnonzero(~(lam > 0))
    if bad.size:
        raise DomainError(f"intensity {lam[bad[0]]} at event {tuple(pts[bad[0]])}", location=tuple(pts[bad[0]]))
    pairs = cKDTree(pts).query_pairs(t[-1], output_type="ndarray")
    if pairs.size == 0:
        return np.zeros_like(t)
    i, j = pairs[:, 0], pairs[:, 1]
    delta = np.abs(pts[i] - pts[j])
    dist = np.hypot(delta[:, 0], delta[:, 1])
    e = (win.width - delta[:, 0]) * (win.height - delta[:, 1]) / win.area
    contrib = 2.0 / (lam[i] * lam[j] * e)
    order = np.argsort(dist, kind="stable")
    csum = np.concatenate([[0.0], np.cumsum(contrib[order])])
    k = csum[np.searchsorted(dist[order], t, side="right")] / win.area
    k[t <= 0] = 0.0
    return k


def _start_psi(family, n, window, k_hat, t_grid, nu):
    rng = min(window.width, window.height)
    scale = rng / 20.0
    if family == "thomas":
        return np.array([n / window.area / 2.0, scale])
    # match the excess of K at the largest lag to c(0) * area of the bump
    excess = max(float(k_hat[-1] - math.pi * t_grid[-1] ** 2), 1e-3 * math.pi * scale**2)
    spread = 2.0 * math.pi * scale**2 if family == "cauchy" else 4.0 * math.pi * nu * scale**2
    return np.array([excess / spread, scale])


def min_contrast(k_hat, t_grid, family: str, start=None, nu: float = 0.5, power: float = 0.25, window=None, n=None, max_iter: int = 4000):
    """Fit psi by minimising sum_t (K_hat(t)^q - K(t; psi)^q)^2 with Nelder-Mead.

    The search runs over log-parameters and stops when the simplex diameter
    falls below 1e-6.
    """
    if family not in FREE_PARAMS or family == "poisson":
        raise InvalidArgumentError(f"cannot fit psi for family {family!r}")
    k_hat = np.asarray(k_hat, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    target = np.clip(k_hat, 0.0, None) ** power
    extra = (nu,) if family == "matern" else ()
    if start is None:
        if window is None or n is None:
            raise InvalidArgumentError("start values need either start= or window= and n=")
        start = _start_psi(family, n, window, k_hat, t_grid, nu)

    def build(theta):
        return PairCorrelationModel(family, tuple(np.exp(theta)) + extra)

    def objective(theta):
        if np.any(np.abs(theta) > 700):
            return np.inf
        try:
            kt = k_function(build(theta), t_grid)
        except (InvalidArgumentError, NumericError):
            return np.inf
        return float(np.sum((target - kt**power) ** 2))

    x0 = np.log(np.asarray(start, dtype=float))
    res = optimize.minimize(
        objective, x0, method="Nelder-Mead",
        options={"xatol": 1e-6, "fatol": np.inf, "maxiter": max_iter, "maxfev": 4 * max_iter},
    )
    if not res.success or not np.isfinite(res.fun):
        raise NumericError(
            f"minimum contrast for {family} did not converge: {res.message}; "
            f"best psi {np.exp(res.x).tolist()} with contrast {res.fun:.6g}"
        )
    return build(res.x)


def fit_two_step_psi(pattern, model, beta_tilde, family: str, t_grid=None, nu: float = 0.5, start=None) -> PairCorrelationModel:
    """Minimum-contrast psi from the inhomogeneous K-function at beta_tilde."""
    if family == "poisson":
        return PairCorrelationModel.poisson()
    if pattern.n < 2:
        raise InvalidArgumentError("need at least two points to estimate the pair correlation")
    t_grid = default_t_grid(pattern.window) if t_grid is None else np.asarray(t_grid, dtype=float)
    k_hat = empirical_k_inhom(pattern, model.with_beta(beta_tilde), t_grid)
    return min_contrast(k_hat, t_grid, family, start=start, nu=nu, window=pattern.window, n=pattern.n)


# -- pipeline and model selection ----------------------------------------------------


def fit_pipeline(pattern, model, quad, config: FitConfig, family: str = "thomas", nu: float = 0.5, t_grid=None):
    """CL for beta_tilde, minimum contrast for psi, then the requested estimator.

    Returns ``(result, pcf)``.
    """
    cl_cfg = FitConfig(max_iter=config.max_iter, step_tol=config.step_tol, estimator="cl", init=config.init, compute_cov=False)
    cl = fit_cl(pattern, model, quad, cl_cfg)
    pcf = fit_two_step_psi(pattern, model, cl.beta_hat, family, t_grid=t_grid, nu=nu)
    if config.estimator == "cl":
        res = fit_cl(pattern, model, quad, config, pcf=pcf)
    elif config.estimator == "wcl":
        res = fit_wcl(pattern, model, pcf, quad, config)
    else:
        res = fit_ql(pattern, model, pcf, quad, config, beta_tilde=cl.beta_hat)
    return res, pcf


def backward_select(pattern, model_full, pcf_family: str, quad, config: FitConfig, alpha: float = 0.05, nu: float = 0.5):
    """Drop the least significant non-intercept covariate until all Wald p <= alpha.

    Returns ``(final_model, trace)``; the final model carries the fitted beta.
    Ties in p-value drop the later covariate.
    """
    if model_full.p == 1:
        return model_full, []
    trace = []
    current = model_full
    while True:
        try:
            res, pcf = fit_pipeline(pattern, current, quad, config, pcf_family, nu)
        except PointQLError as exc:
            raise SelectionError(f"refit with covariates {current.names} failed: {exc}", trace) from exc
        pvals = res.wald_pvalues()
        icpt = current.intercept_index()
        cand = [j for j in range(current.p) if j != icpt]
        if not cand:
            return current.with_beta(res.beta_hat), trace
        worst = cand[0]
        for j in cand[1:]:
            if pvals[j] >= pvals[worst]:
                worst = j
        if not pvals[worst] > alpha:
            return current.with_beta(res.beta_hat), trace
        trace.append(
            {
                "dropped": current.names[worst],
                "p_value": float(pvals[worst]),
                "beta": float(res.beta_hat[worst]),
                "se": float(res.se[worst]),
                "psi": pcf.to_config(),
            }
        )
        current = current.subset([j for j in range(current.p) if j != worst])
