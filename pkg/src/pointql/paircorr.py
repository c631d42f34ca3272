"""Isotropic pair correlation families g(r) = 1 + c(r).

Families: ``thomas`` (kappa, omega), ``matern`` (sigma2, alpha, nu) with
nu in {0.25, 0.5, 1.0}, ``cauchy`` (sigma2, alpha), and the pseudo-family
``poisson`` with g identically 1. All non-Poisson families have c(0) > 0 and
c strictly decreasing in r.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .errors import InvalidArgumentError, NumericError

FAMILIES = ("thomas", "matern", "cauchy", "poisson")
MATERN_NUS = (0.25, 0.5, 1.0)
PARAM_NAMES = {
    "thomas": ("kappa", "omega"),
    "matern": ("sigma2", "alpha", "nu"),
    "cauchy": ("sigma2", "alpha"),
    "poisson": (),
}
# parameters estimated by minimum contrast; matern nu stays fixed
FREE_PARAMS = {"thomas": 2, "matern": 2, "cauchy": 2, "poisson": 0}

_QUAD_RTOL = 1e-8
_EFFECTIVE_RANGE_RATIO = 1e-4


@dataclass(frozen=True)
class PairCorrelationModel:
    family: str
    psi: tuple = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidArgumentError(f"unknown pcf family {self.family!r}; expected one of {FAMILIES}")
        psi = tuple(float(v) for v in self.psi)
        names = PARAM_NAMES[self.family]
        if len(psi) != len(names):
            raise InvalidArgumentError(f"{self.family} expects parameters {names}, got {psi}")
        if not all(math.isfinite(v) and v > 0 for v in psi):
            raise InvalidArgumentError(f"{self.family} parameters must be positive and finite, got {psi}")
        if self.family == "matern" and psi[2] not in MATERN_NUS:
            raise InvalidArgumentError(f"matern nu must be one of {MATERN_NUS}, got {psi[2]}")
        object.__setattr__(self, "psi", psi)

    # constructors
    @classmethod
    def thomas(cls, kappa: float, omega: float) -> "PairCorrelationModel":
        return cls("thomas", (kappa, omega))

    @classmethod
    def matern(cls, sigma2: float, alpha: float, nu: float = 0.5) -> "PairCorrelationModel":
        return cls("matern", (sigma2, alpha, nu))

    @classmethod
    def cauchy(cls, sigma2: float, alpha: float) -> "PairCorrelationModel":
        return cls("cauchy", (sigma2, alpha))

    @classmethod
    def poisson(cls) -> "PairCorrelationModel":
        return cls("poisson", ())

    @property
    def is_poisson(self) -> bool:
        return self.family == "poisson"

    @property
    def params(self) -> dict:
        return dict(zip(PARAM_NAMES[self.family], self.psi))

    @property
    def scale(self) -> float:
        """Natural length scale of the family (omega or alpha)."""
        if self.family == "thomas":
            return self.psi[1]
        if self.family in ("matern", "cauchy"):
            return self.psi[1]
        return 1.0

    def excess(self, r) -> np.ndarray:
        """c(r) = g(r) - 1, vectorised over distances r >= 0."""
        r = np.asarray(r, dtype=float)
        fam = self.family
        if fam == "poisson":
            return np.zeros_like(r)
        if fam == "thomas":
            kappa, omega = self.psi
            return np.exp(-(r * r) / (4.0 * omega * omega)) / (4.0 * math.pi * omega * omega * kappa)
        if fam == "cauchy":
            sigma2, alpha = self.psi
            return sigma2 * (1.0 + (r / alpha) ** 2) ** -1.5
        sigma2, alpha, nu = self.psi
        x = r / alpha
        out = np.full_like(x, sigma2)
        pos = x > 0
        xp = x[pos]
        norm = 2.0 ** (nu - 1.0) * special.gamma(nu)
        out[pos] = sigma2 * xp**nu * special.kv(nu, xp) / norm
        return out

    @property
    def c0(self) -> float:
        return float(self.excess(np.array([0.0]))[0])

    def __call__(self, r) -> np.ndarray:
        return 1.0 + self.excess(r)

    def to_config(self) -> dict:
        return {"family": self.family, **self.params}

    @classmethod
    def from_config(cls, cfg: dict) -> "PairCorrelationModel":
        cfg = dict(cfg)
        fam = cfg.pop("family", None)
        if fam not in FAMILIES:
            raise InvalidArgumentError(f"unknown pcf family {fam!r}")
        names = PARAM_NAMES[fam]
        unknown = set(cfg) - set(names)
        if unknown:
            raise InvalidArgumentError(f"unknown keys for {fam} pcf: {sorted(unknown)}")
        missing = [k for k in names if k not in cfg]
        if missing:
            raise InvalidArgumentError(f"missing keys for {fam} pcf: {missing}")
        return cls(fam, tuple(cfg[k] for k in names))

    def free_params(self) -> np.ndarray:
        return np.array(self.psi[: FREE_PARAMS[self.family]])

    def with_free_params(self, values) -> "PairCorrelationModel":
        values = tuple(float(v) for v in values)
        return PairCorrelationModel(self.family, values + self.psi[FREE_PARAMS[self.family]:])


def pcf_eval(model: PairCorrelationModel, r) -> float | np.ndarray:
    """g(r; psi). Scalar in, scalar out."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise InvalidArgumentError("distance must be non-negative")
    out = model(r_arr)
    return float(out) if out.ndim == 0 else out


def _radial_quad(model, a, b):
    """2 pi * integral_a^b c(s) s ds, with an error check."""
    f = lambda s: float(model.excess(np.array([s]))[0]) * s  # noqa: E731
    val, err = integrate.quad(f, a, b, epsrel=_QUAD_RTOL, epsabs=0.0, limit=200)
    if not math.isfinite(val) or err > 10 * _QUAD_RTOL * abs(val) + 1e-300:
        raise NumericError(
            f"radial integral of {model.family} on [{a}, {b}] did not converge "
            f"(estimate {val:.6g}, abs error {err:.3g})"
        )
    return 2.0 * math.pi * val


def excess_integral(model: PairCorrelationModel) -> float:
    """Integral of |g - 1| over the plane."""
    if model.is_poisson:
        return 0.0
    if model.family == "thomas":
        return 1.0 / model.psi[0]
    r1 = effective_range(model)
    return _radial_quad(model, 0.0, r1) + _radial_quad(model, r1, math.inf)


def neumann_condition_bound(model: PairCorrelationModel, lambda_sup: float) -> float:
    """sup lambda times the excess integral; the Neumann series is guaranteed when < 1."""
    if not lambda_sup > 0:
        raise InvalidArgumentError("lambda_sup must be positive")
    return lambda_sup * excess_integral(model)


def k_function_thomas(t, kappa: float, omega: float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return math.pi * t * t + (1.0 - np.exp(-(t * t) / (4.0 * omega * omega))) / kappa


def k_function(model: PairCorrelationModel, t) -> float | np.ndarray:
    """K(t) = pi t^2 + 2 pi * integral_0^t c(s) s ds, vectorised over t."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise InvalidArgumentError("t must be non-negative")
    if model.is_poisson:
        out = math.pi * t_arr**2
    elif model.family == "thomas":
        out = k_function_thomas(t_arr, *model.psi)
    else:
        flat = t_arr.ravel()
        order = np.argsort(flat)
        acc, prev = 0.0, 0.0
        vals = np.empty_like(flat)
        for k in order:
            tk = flat[k]
            if tk > prev:
                acc += _radial_quad(model, prev, tk)
                prev = tk
            vals[k] = math.pi * tk * tk + acc
        out = vals.reshape(t_arr.shape)
    return float(out) if out.ndim == 0 else out


def taper_distance(model: PairCorrelationModel, eps: float) -> float:
    """Distance d with c(d) / c(0) = eps, by bisection to 1e-10."""
    if not 0.0 < eps < 1.0:
        raise InvalidArgumentError(f"eps must lie in (0, 1), got {eps}")
    c0 = model.c0
    if not c0 > 0:
        raise InvalidArgumentError(f"taper distance undefined for {model.family}: c(0) = {c0}")

    def ratio(d):
        return float(model.excess(np.array([d]))[0]) / c0

    hi = model.scale
    while ratio(hi) >= eps:
        hi *= 2.0
        if hi > 1e12 * model.scale:
            raise NumericError("could not bracket the taper distance")
    lo = 0.0
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if ratio(mid) > eps:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def effective_range(model: PairCorrelationModel) -> float:
    """Distance at which c has dropped to 1e-4 of c(0)."""
    if model.is_poisson:
        return 0.0
    return taper_distance(model, _EFFECTIVE_RANGE_RATIO)
