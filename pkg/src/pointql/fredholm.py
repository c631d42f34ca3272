"""Nystrom discretisation of (I + T) phi = lambda'/lambda.

The kernel is t(u, v) = lambda(v) [g(u - v) - 1]. On a quadrature scheme with
nodes u_i and weights w_i, and mu_i = lambda(u_i) w_i, the discrete system

    phi_l + sum_i c(u_l - u_i) mu_i phi_i = rhs_l

is equivalent to the symmetric system (I + G) psi = sqrt(mu) rhs with
G_ij = sqrt(mu_i mu_j) c(u_i - u_j) and psi = sqrt(mu) phi. The symmetric
form is positive definite for Cox-type pair correlations and is the one we
factor. Tapering zeroes c beyond a cut-off distance, which leaves a sparse
matrix; after a bandwidth-reducing permutation it is factored with banded
Cholesky (LAPACK pbtrf).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .core_model import IntensityModel, QuadratureScheme
from .errors import DomainError, InvalidArgumentError, NumericError
from .paircorr import PairCorrelationModel

DENSE_CAP = 6000
EIGEN_CAP = 4096
DIRECT_RTOL = 1e-10
NEUMANN_TOL = 1e-10
_BLOCK_ENTRIES = 4_000_000


@dataclass(frozen=True)
class DiscretizedKernel:
    """Node intensities plus the matrix of c(||u_l - u_i||) (dense or sparse)."""

    quad: QuadratureScheme
    lam: np.ndarray
    pcf: PairCorrelationModel
    excess: object  # ndarray (m, m) or scipy.sparse csr
    d_taper: float | None = None

    @property
    def m(self) -> int:
        return self.quad.m

    @property
    def mu(self) -> np.ndarray:
        return self.lam * self.quad.weights

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.excess)

    @property
    def n_stored(self) -> int:
        return int(self.excess.nnz) if self.is_sparse else int(self.excess.size)

    def t_matrix(self) -> np.ndarray:
        """Dense t(u_l, u_i) = lambda(u_i) c(u_l - u_i)."""
        c = self.excess.toarray() if self.is_sparse else self.excess
        return c * self.lam[None, :]

    def system_matrix(self) -> np.ndarray:
        """Dense T_h with entries t(u_l, u_i) w_i."""
        c = self.excess.toarray() if self.is_sparse else self.excess
        return c * self.mu[None, :]

    def G(self):
        """Symmetrised matrix sqrt(mu_i mu_j) c(u_i - u_j), same storage as ``excess``."""
        s = np.sqrt(self.mu)
        if self.is_sparse:
            d = sp.diags(s)
            return (d @ self.excess @ d).tocsr()
        return self.excess * np.outer(s, s)

    def apply_T(self, phi: np.ndarray) -> np.ndarray:
        """T_h phi without forming T_h."""
        mu = self.mu
        scaled = phi * (mu[:, None] if phi.ndim == 2 else mu)
        return np.asarray(self.excess @ scaled)

    def row_sum_bound(self) -> float:
        """max_l sum_i |t(u_l, u_i)| w_i, the discrete analogue of ||T||_inf."""
        a = abs(self.excess) if self.is_sparse else np.abs(self.excess)
        return float(np.max(np.asarray(a @ self.mu)))

    def sparsity_stats(self) -> dict:
        m = self.m
        return {
            "m": m,
            "retained": self.n_stored,
            "fill_ratio": self.n_stored / float(m * m),
            "d_taper": self.d_taper,
            "family": self.pcf.family,
        }

    def sparsity_json(self) -> str:
        return json.dumps(self.sparsity_stats(), sort_keys=True)


@dataclass(frozen=True)
class PhiSolution:
    values: np.ndarray
    residual_norm: float
    method: str  # "direct" or "neumann"
    solver: str = ""
    iterations: int = 0


def _node_intensity(model: IntensityModel, quad: QuadratureScheme) -> np.ndarray:
    lam = model.intensity_at(quad.nodes)
    bad = np.flatnonzero(~(lam > 0))
    if bad.size:
        k = bad[0]
        raise DomainError(
            f"non-positive intensity {lam[k]:.6g} at node {tuple(quad.nodes[k])}",
            location=tuple(quad.nodes[k]),
            value=float(lam[k]),
        )
    return lam


def tapered_excess(nodes: np.ndarray, pcf: PairCorrelationModel, d_taper: float) -> sp.csr_matrix:
    """Sparse c(||u_i - u_j||) keeping only pairs at distance <= d_taper."""
    m = nodes.shape[0]
    pairs = cKDTree(nodes).query_pairs(d_taper, output_type="ndarray")
    i, j = pairs[:, 0], pairs[:, 1]
    dist = np.sqrt(np.sum((nodes[i] - nodes[j]) ** 2, axis=1))
    off = pcf.excess(dist)
    diag = np.arange(m)
    rows = np.concatenate([i, j, diag])
    cols = np.concatenate([j, i, diag])
    vals = np.concatenate([off, off, np.full(m, pcf.c0)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, m))


def build_kernel(
    model: IntensityModel,
    pcf: PairCorrelationModel,
    quad: QuadratureScheme,
    taper: float | None = None,
) -> DiscretizedKernel:
    lam = _node_intensity(model, quad)
    return kernel_from_intensity(lam, pcf, quad, taper)


def kernel_from_intensity(lam, pcf, quad, taper=None) -> DiscretizedKernel:
    m = quad.m
    if pcf.is_poisson:
        return DiscretizedKernel(quad, lam, pcf, sp.csr_matrix((m, m)), taper)
    if taper is not None:
        if not taper > 0:
            raise InvalidArgumentError(f"taper distance must be positive, got {taper}")
        return DiscretizedKernel(quad, lam, pcf, tapered_excess(quad.nodes, pcf, taper), float(taper))
    if m > DENSE_CAP:
        raise InvalidArgumentError(f"dense kernel with m={m} exceeds {DENSE_CAP}; use a taper")
    c = pcf.excess(cdist(quad.nodes, quad.nodes))
    return DiscretizedKernel(quad, lam, pcf, c, None)


def excess_matvec(nodes: np.ndarray, pcf: PairCorrelationModel, X: np.ndarray, targets=None) -> np.ndarray:
    """C X with C_li = c(||t_l - u_i||), evaluated blockwise without storing C."""
    targets = nodes if targets is None else np.atleast_2d(targets)
    X2 = X.reshape(X.shape[0], -1)
    out = np.empty((targets.shape[0], X2.shape[1]))
    if pcf.is_poisson:
        out[:] = 0.0
        return out.reshape((targets.shape[0],) + X.shape[1:])
    step = max(1, _BLOCK_ENTRIES // max(1, nodes.shape[0]))
    for a in range(0, targets.shape[0], step):
        c = pcf.excess(cdist(targets[a : a + step], nodes))
        out[a : a + step] = c @ X2
    return out.reshape((targets.shape[0],) + X.shape[1:])


class SymmetricFactor:
    """Cholesky factor of I + G, dense or banded after reordering.

    If the first attempt finds a non-positive pivot, a single diagonal
    jitter of 1e-10 * trace(I + G) / m is added before giving up.
    """

    def __init__(self, kernel: DiscretizedKernel):
        self.m = kernel.m
        self.jitter = 0.0
        G = kernel.G()
        if kernel.is_sparse:
            self._init_banded(G)
        else:
            self._init_dense(G)

    def _init_dense(self, G):
        A = G + np.eye(self.m)
        self.kind = "cholesky-dense"
        self.perm = None
        try:
            self._cf = sla.cho_factor(A, lower=True, check_finite=False)
        except sla.LinAlgError as exc:
            self.jitter = 1e-10 * np.trace(A) / self.m
            A[np.diag_indices_from(A)] += self.jitter
            try:
                self._cf = sla.cho_factor(A, lower=True, check_finite=False)
            except sla.LinAlgError as exc2:
                raise NumericError(f"Cholesky of I + G failed after jitter: {exc2} (first: {exc})") from exc2

    def _init_banded(self, G):
        A = (G + sp.identity(self.m, format="csr")).tocsr()
        natural_bw = _bandwidth(A)
        perm = reverse_cuthill_mckee(A, symmetric_mode=True)
        Ap = A[perm][:, perm].tocoo()
        if _bandwidth(Ap) < natural_bw:
            self.perm = perm
        else:
            self.perm = None
            Ap = A.tocoo()
        lower = Ap.row >= Ap.col
        r, c, v = Ap.row[lower], Ap.col[lower], Ap.data[lower]
        bw = int(np.max(r - c)) if r.size else 0
        ab = np.zeros((bw + 1, self.m))
        ab[r - c, c] = v
        self.kind = "cholesky-banded"
        self.bandwidth = bw
        try:
            self._cb = sla.cholesky_banded(ab, lower=True, check_finite=False)
        except sla.LinAlgError as exc:
            self.jitter = 1e-10 * float(ab[0].sum()) / self.m
            ab[0] += self.jitter
            try:
                self._cb = sla.cholesky_banded(ab, lower=True, check_finite=False)
            except sla.LinAlgError as exc2:
                raise NumericError(
                    f"sparse Cholesky of I + G_taper failed after jitter {self.jitter:.3g}: {exc2}; "
                    "shrink the taper distance or use the dense solver"
                ) from exc2

    def solve(self, B: np.ndarray) -> np.ndarray:
        if self.kind == "cholesky-dense":
            return sla.cho_solve(self._cf, B, check_finite=False)
        if self.perm is None:
            return sla.cho_solve_banded((self._cb, True), B, check_finite=False)
        X = np.empty_like(B, dtype=float)
        X[self.perm] = sla.cho_solve_banded((self._cb, True), B[self.perm], check_finite=False)
        return X


def _bandwidth(A) -> int:
    A = A.tocoo()
    return int(np.max(np.abs(A.row - A.col))) if A.nnz else 0


def _residual(kernel: DiscretizedKernel, phi, rhs) -> float:
    return float(np.max(np.abs(phi + kernel.apply_T(phi) - rhs))) if rhs.size else 0.0


def nystrom_solve(kernel: DiscretizedKernel, rhs, method: str = "auto", factor: SymmetricFactor | None = None) -> PhiSolution:
    """Solve phi + T_h phi = rhs for every column of ``rhs``.

    ``method`` is ``"cholesky"`` (symmetric route, the default) or ``"lu"``
    (dense LU of I + T_h, for checking).
    """
    rhs = np.asarray(rhs, dtype=float)
    vec = rhs.ndim == 1
    R = rhs[:, None] if vec else rhs
    if R.shape[0] != kernel.m:
        raise InvalidArgumentError(f"rhs has {R.shape[0]} rows, kernel has m={kernel.m}")
    if method == "auto":
        method = "cholesky"
    if kernel.pcf.is_poisson:
        phi, solver = R.copy(), "identity"
    elif method == "lu":
        A = np.eye(kernel.m) + kernel.system_matrix()
        phi = sla.lu_solve(sla.lu_factor(A, check_finite=False), R, check_finite=False)
        solver = "lu-dense"
    elif method == "cholesky":
        factor = factor or SymmetricFactor(kernel)
        s = np.sqrt(kernel.mu)[:, None]
        phi = factor.solve(s * R) / s
        solver = factor.kind
    else:
        raise InvalidArgumentError(f"unknown solve method {method!r}")
    if not np.all(np.isfinite(phi)):
        raise NumericError("non-finite entries in the Nystrom solution")
    res = _residual(kernel, phi, R)
    return PhiSolution(phi[:, 0] if vec else phi, res, "direct", solver)


def neumann_solve(kernel: DiscretizedKernel, rhs, k_max: int = 1000, tol: float = NEUMANN_TOL, force: bool = False) -> PhiSolution:
    """Partial sums of sum_k (-T_h)^k rhs.

    ``k_max=0`` returns the leading term rhs without a convergence check.
    Otherwise iteration stops once the newest term's sup-norm is below
    ``tol * ||rhs||_inf``.
    """
    rhs = np.asarray(rhs, dtype=float)
    if k_max < 0:
        raise InvalidArgumentError("k_max must be non-negative")
    bound = kernel.row_sum_bound()
    if bound >= 1.0 and not force:
        raise InvalidArgumentError(
            f"discrete row-sum bound {bound:.4g} >= 1: Neumann series not guaranteed (pass force=True to try)"
        )
    total = rhs.copy()
    if k_max == 0:
        return PhiSolution(total, _residual(kernel, total, rhs), "neumann", "neumann", 0)
    scale = max(float(np.max(np.abs(rhs))) if rhs.size else 0.0, np.finfo(float).tiny)
    term = rhs
    for k in range(1, k_max + 1):
        term = -kernel.apply_T(term)
        total = total + term
        inc = float(np.max(np.abs(term))) if term.size else 0.0
        if inc < tol * scale:
            return PhiSolution(total, _residual(kernel, total, rhs), "neumann", "neumann", k)
        if not math.isfinite(inc):
            break
    raise NumericError(f"Neumann series did not converge in {k_max} terms; last increment norm {inc:.3g}")


def min_eigen_symmetrized(model: IntensityModel, pcf: PairCorrelationModel, quad: QuadratureScheme, taper: float | None = None) -> float:
    """Smallest eigenvalue of G (optionally tapered)."""
    if quad.m > EIGEN_CAP:
        raise InvalidArgumentError(f"m={quad.m} exceeds {EIGEN_CAP} for a dense eigensolve; subsample the grid")
    kernel = build_kernel(model, pcf, quad, taper)
    G = kernel.G()
    G = G.toarray() if sp.issparse(G) else G
    return float(sla.eigvalsh(G, subset_by_index=[0, 0])[0])


def interpolate_phi(kernel: DiscretizedKernel, phi: np.ndarray, model: IntensityModel, points) -> np.ndarray:
    """Off-node Nystrom extension phi(u) = rhs(u) - sum_i c(u - u_i) mu_i phi_i."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    Z = model.design(points)
    lam = model.intensity_from_design(Z, points=points)
    rhs = model.gradient_from_design(Z, lam) / lam[:, None]
    phi2 = phi[:, None] if phi.ndim == 1 else phi
    corr = excess_matvec(kernel.quad.nodes, kernel.pcf, kernel.mu[:, None] * phi2, targets=points)
    out = rhs - corr
    return out[:, 0] if phi.ndim == 1 else out
