"""Windows, point patterns, covariate rasters, intensity models and quadrature.

Everything here is immutable after construction. Array-valued fields are
stored as read-only numpy arrays so instances can be shared freely between
threads and worker processes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, InputFormatError, InvalidArgumentError

LINKS = ("log", "identity")


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Window:
    """Axis-aligned rectangular observation window."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        vals = (self.xmin, self.xmax, self.ymin, self.ymax)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidArgumentError(f"window bounds must be finite, got {vals}")
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise InvalidArgumentError(f"degenerate window {vals}")

    @classmethod
    def square(cls, side: float = 1.0) -> "Window":
        return cls(0.0, float(side), 0.0, float(side))

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return (
            (p[:, 0] >= self.xmin)
            & (p[:, 0] <= self.xmax)
            & (p[:, 1] >= self.ymin)
            & (p[:, 1] <= self.ymax)
        )

    def dilate(self, d: float) -> "Window":
        return Window(self.xmin - d, self.xmax + d, self.ymin - d, self.ymax + d)

    def isclose(self, other: "Window", rtol: float = 1e-9) -> bool:
        scale = max(self.width, self.height)
        a = np.array([self.xmin, self.xmax, self.ymin, self.ymax])
        b = np.array([other.xmin, other.xmax, other.ymin, other.ymax])
        return bool(np.all(np.abs(a - b) <= rtol * scale))


@dataclass(frozen=True)
class PointPattern:
    """Finite set of event locations inside a window. Duplicates are allowed."""

    points: np.ndarray
    window: Window

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if np.isnan(pts).any():
            raise InvalidArgumentError("point coordinates contain NaN")
        outside = np.flatnonzero(~self.window.contains(pts)) if len(pts) else []
        if len(outside):
            raise InvalidArgumentError(
                f"{len(outside)} point(s) outside the window, first at index {outside[0]}"
            )
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class CovariateField:
    """Piecewise-constant raster covariate.

    ``values`` has length ``nx * ny`` in row-major order: the row index is the
    y cell counted from ``ymin`` upward, the column index the x cell counted
    from ``xmin`` rightward. Lookup is nearest-cell.
    """

    nx: int
    ny: int
    window: Window
    values: np.ndarray
    name: str = "z"

    def __post_init__(self):
        if int(self.nx) < 1 or int(self.ny) < 1:
            raise InvalidArgumentError(f"raster dimensions must be positive, got {self.nx}x{self.ny}")
        vals = np.asarray(self.values, dtype=float).ravel()
        if vals.size != self.nx * self.ny:
            raise InvalidArgumentError(
                f"raster {self.name!r} has {vals.size} values, expected {self.nx * self.ny}"
            )
        if not np.all(np.isfinite(vals)):
            raise InvalidArgumentError(f"raster {self.name!r} contains non-finite values")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))
        object.__setattr__(self, "values", _frozen(vals))

    @classmethod
    def constant(cls, window: Window, value: float = 1.0, name: str = "intercept") -> "CovariateField":
        return cls(1, 1, window, np.array([value], dtype=float), name=name)

    @property
    def is_constant_one(self) -> bool:
        return bool(np.all(self.values == 1.0))

    def cell_index(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        w = self.window
        ix = np.floor((p[:, 0] - w.xmin) / w.width * self.nx).astype(np.int64)
        iy = np.floor((p[:, 1] - w.ymin) / w.height * self.ny).astype(np.int64)
        np.clip(ix, 0, self.nx - 1, out=ix)
        np.clip(iy, 0, self.ny - 1, out=iy)
        return iy * self.nx + ix

    def at(self, points) -> np.ndarray:
        return self.values[self.cell_index(points)]

    def cell_centers(self) -> np.ndarray:
        w = self.window
        xs = w.xmin + (np.arange(self.nx) + 0.5) * (w.width / self.nx)
        ys = w.ymin + (np.arange(self.ny) + 0.5) * (w.height / self.ny)
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True)
class IntensityModel:
    """Regression model lambda(u; beta) = link^{-1}(z(u) . beta)."""

    covariates: tuple
    beta: np.ndarray
    link: str = "log"

    def __post_init__(self):
        covs = tuple(self.covariates)
        if len(covs) < 1:
            raise InvalidArgumentError("an intensity model needs at least one covariate")
        if self.link not in LINKS:
            raise InvalidArgumentError(f"unknown link {self.link!r}; expected one of {LINKS}")
        beta = np.asarray(self.beta, dtype=float).ravel()
        if beta.size != len(covs):
            raise InvalidArgumentError(f"beta has length {beta.size} but there are {len(covs)} covariates")
        if not np.all(np.isfinite(beta)):
            raise InvalidArgumentError("beta contains non-finite values")
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "beta", _frozen(beta))

    @property
    def p(self) -> int:
        return len(self.covariates)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.covariates]

    def intercept_index(self) -> int | None:
        for j, c in enumerate(self.covariates):
            if c.is_constant_one:
                return j
        return None

    def with_beta(self, beta) -> "IntensityModel":
        return replace(self, beta=np.asarray(beta, dtype=float))

    def subset(self, keep: Sequence[int]) -> "IntensityModel":
        keep = list(keep)
        return IntensityModel(
            tuple(self.covariates[j] for j in keep), self.beta[keep], self.link
        )

    def design(self, points) -> np.ndarray:
        """Covariate matrix z(u) with one row per point."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if p.shape[0] == 0:
            return np.zeros((0, self.p))
        return np.column_stack([c.at(p) for c in self.covariates])

    def intensity_from_design(self, Z: np.ndarray, beta=None, points=None) -> np.ndarray:
        beta = self.beta if beta is None else np.asarray(beta, dtype=float)
        eta = Z @ beta
        if self.link == "log":
            return np.exp(eta)
        bad = np.flatnonzero(~(eta > 0))
        if bad.size:
            k = int(bad[0])
            loc = None if points is None else tuple(np.atleast_2d(points)[k])
            raise DomainError(
                f"identity link gives non-positive intensity {eta[k]:.6g} at {loc}",
                location=loc,
                value=float(eta[k]),
            )
        return eta

    def gradient_from_design(self, Z: np.ndarray, lam: np.ndarray) -> np.ndarray:
        if self.link == "log":
            return lam[:, None] * Z
        return np.array(Z, dtype=float, copy=True)

    def intensity_at(self, points) -> np.ndarray:
        return self.intensity_from_design(self.design(points), points=points)

    def gradient_at(self, points) -> np.ndarray:
        Z = self.design(points)
        lam = self.intensity_from_design(Z, points=points)
        return self.gradient_from_design(Z, lam)


@dataclass(frozen=True)
class QuadratureScheme:
    """Quadrature nodes and positive weights partitioning a window.

    ``shape`` is ``(nx, ny)`` for grid schemes; it lets cell counts be
    computed by direct indexing instead of a nearest-node search.
    """

    nodes: np.ndarray
    weights: np.ndarray
    window: Window
    shape: tuple | None = None
    _tree: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=float).ravel()
        if nodes.shape[0] != weights.size:
            raise InvalidArgumentError("nodes and weights differ in length")
        if weights.size == 0 or np.any(weights <= 0):
            raise InvalidArgumentError("quadrature weights must be positive")
        if not np.all(self.window.contains(nodes)):
            raise InvalidArgumentError("quadrature node outside window")
        if abs(weights.sum() - self.window.area) > 1e-12 * self.window.area * max(1, math.log2(weights.size)):
            raise InvalidArgumentError(
                f"weights sum to {weights.sum()!r}, window area is {self.window.area!r}"
            )
        object.__setattr__(self, "nodes", _frozen(nodes))
        object.__setattr__(self, "weights", _frozen(weights))

    @property
    def m(self) -> int:
        return self.weights.size

    def cell_of(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if p.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        if self.shape is not None:
            nx, ny = self.shape
            w = self.window
            ix = np.clip(np.floor((p[:, 0] - w.xmin) / w.width * nx).astype(np.int64), 0, nx - 1)
            iy = np.clip(np.floor((p[:, 1] - w.ymin) / w.height * ny).astype(np.int64), 0, ny - 1)
            return iy * nx + ix
        if self._tree is None:
            object.__setattr__(self, "_tree", cKDTree(self.nodes))
        return self._tree.query(p)[1]

    def cell_counts(self, points) -> np.ndarray:
        """Number of points in each quadrature cell (nearest node for non-grid schemes)."""
        return np.bincount(self.cell_of(points), minlength=self.m).astype(float)


def make_grid_quadrature(window: Window, nx: int, ny: int) -> QuadratureScheme:
    """Midpoint Riemann rule on an ``nx`` by ``ny`` grid of equal cells."""
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise InvalidArgumentError(f"grid dimensions must be positive integers, got {nx}x{ny}")
    nx, ny = int(nx), int(ny)
    nodes = CovariateField(nx, ny, window, np.zeros(nx * ny)).cell_centers()
    weights = np.full(nx * ny, window.area / (nx * ny))
    return QuadratureScheme(nodes, weights, window, shape=(nx, ny))


def intensity(model: IntensityModel, u) -> float:
    """lambda(u; beta) at a single location."""
    u = np.asarray(u, dtype=float).reshape(1, 2)
    return float(model.intensity_at(u)[0])


def intensity_gradient(model: IntensityModel, u) -> np.ndarray:
    """d lambda(u; beta) / d beta at a single location."""
    u = np.asarray(u, dtype=float).reshape(1, 2)
    return model.gradient_at(u)[0]


def expected_count(model: IntensityModel, quad: QuadratureScheme) -> float:
    """Quadrature approximation of the integral of lambda over the window."""
    return float(model.intensity_at(quad.nodes) @ quad.weights)


# -- file formats -----------------------------------------------------------


def read_pattern_csv(path, window: Window) -> PointPattern:
    """Read a ``x,y`` CSV. Points outside ``window`` are a hard error."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputFormatError(f"{path}: {exc.strerror or exc}") from exc
    if not lines or lines[0].strip() != "x,y":
        raise InputFormatError(f"{path}:1: header must be exactly 'x,y'")
    pts, lineno = [], []
    for k, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise InputFormatError(f"{path}:{k}: expected two comma-separated values")
        try:
            x, y = float(parts[0]), float(parts[1])
        except ValueError:
            raise InputFormatError(f"{path}:{k}: could not parse {line!r} as two floats") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise InputFormatError(f"{path}:{k}: non-finite coordinate")
        pts.append((x, y))
        lineno.append(k)
    arr = np.array(pts, dtype=float).reshape(-1, 2)
    inside = window.contains(arr) if len(arr) else np.ones(0, bool)
    if not np.all(inside):
        bad = [lineno[i] for i in np.flatnonzero(~inside)]
        shown = ", ".join(map(str, bad[:20])) + (" ..." if len(bad) > 20 else "")
        raise InputFormatError(f"{path}: {len(bad)} point(s) outside the window on line(s) {shown}")
    return PointPattern(arr, window)


def write_pattern_csv(path, pattern: PointPattern) -> None:
    with open(path, "w") as fh:
        fh.write("x,y\n")
        for x, y in pattern.points.tolist():
            fh.write(f"{x!r},{y!r}\n")


def read_raster(path, name: str | None = None) -> CovariateField:
    """Read the plain-text raster format (header ``nx ny xmin xmax ymin ymax``)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputFormatError(f"{path}: {exc.strerror or exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise InputFormatError(f"{path}:1: empty raster file")
    head = lines[0].split()
    if len(head) != 6:
        raise InputFormatError(f"{path}:1: header must be 'nx ny xmin xmax ymin ymax'")
    try:
        nx, ny = int(head[0]), int(head[1])
        bounds = [float(v) for v in head[2:]]
    except ValueError:
        raise InputFormatError(f"{path}:1: could not parse header {lines[0]!r}") from None
    vals = []
    for k, line in enumerate(lines[1:], start=2):
        for tok in line.split():
            try:
                vals.append(float(tok))
            except ValueError:
                raise InputFormatError(f"{path}:{k}: bad value {tok!r}") from None
    if len(vals) != nx * ny:
        raise InputFormatError(f"{path}: expected {nx * ny} values, found {len(vals)}")
    try:
        window = Window(*bounds)
        return CovariateField(nx, ny, window, np.array(vals), name=name or path.stem)
    except InvalidArgumentError as exc:
        raise InputFormatError(f"{path}: {exc}") from exc


def write_raster(path, cov: CovariateField) -> None:
    w = cov.window
    vals = cov.values.reshape(cov.ny, cov.nx)
    with open(path, "w") as fh:
        fh.write(f"{cov.nx} {cov.ny} " + " ".join(repr(float(v)) for v in (w.xmin, w.xmax, w.ymin, w.ymax)) + "\n")
        for row in vals:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
