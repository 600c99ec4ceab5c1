"""Spatial deconfounding transforms.

Spatially structured covariates can be collinear with a latent spatial
effect, biasing the fixed-effect estimates.  Three remedies are
implemented, each attacking a different ingredient of the model:

- restricted spatial regression (``rhz_*``): the latent effect is
  re-expressed in an orthonormal basis of the orthogonal complement of
  the design span, so it can no longer compete with the covariates;
- projected-centroid graph rebuilding (``spock_*``): region centroids
  are projected orthogonal to the design and the neighborhood graph is
  rebuilt by nearest neighbors in the projected space, keeping each
  region's original neighbor count;
- covariate residualization (``spatialplus_residualize``): each flagged
  covariate is regressed on space (lattice thin-plate smooth plus
  linear trends) and replaced by the residual.

The module also computes the adjusted estimand ``beta_star`` targeted
by deconfounded fits in simulation studies.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .graph import LatticeMap, RegionGraph, SparsePrecision, knn_graph

__all__ = [
    "RhzBasis",
    "ResidualizedDesign",
    "rhz_basis",
    "rhz_transform",
    "spock_centroids",
    "spock_graph",
    "beta_star",
    "spatialplus_residualize",
]

_RANK_TOL = 1e-10


@dataclass(frozen=True)
class RhzBasis:
    """Orthonormal basis of the orthogonal complement of a design span.

    ``matrix`` is n x (n - q) with matrix' X = 0 and orthonormal
    columns; ``q`` is the design rank it complements.
    """

    matrix: np.ndarray
    q: int

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class ResidualizedDesign:
    """One covariate column residualized against a spatial smooth.

    ``residual`` is the column minus the fitted surface; ``fitted`` is
    the stage-1 posterior-mean surface at each region;
    ``tau_noise`` is the stage-1 posterior mean of the noise precision.
    """

    residual: np.ndarray
    fitted: np.ndarray
    tau_noise: float


def _check_full_rank(X: np.ndarray, what: str = "design") -> None:
    """Raise with the offending columns when X is rank deficient."""
    n, q = X.shape
    if q == 0:
        return
    if q > n:
        raise ValueError(f"{what} has more columns ({q}) than rows ({n})")
    s = np.linalg.svd(X, compute_uv=False)
    tol = max(n, q) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    tol = max(tol, _RANK_TOL * (s[0] if s.size else 1.0))
    rank = int(np.sum(s > tol))
    if rank < q:
        # name columns that add no rank over their predecessors
        dependent = []
        r = 0
        for k in range(q):
            sk = np.linalg.svd(X[:, :k + 1], compute_uv=False)
            rk = int(np.sum(sk > tol))
            if rk == r:
                dependent.append(k)
            r = rk
        raise ValueError(
            f"{what} is rank deficient (rank {rank} < {q}); dependent "
            f"columns: {dependent}")


def rhz_basis(X: np.ndarray) -> RhzBasis:
    """Orthonormal complement of span(X) via full orthogonal factorization.

    Deterministic for a given X.  Raises when X is rank deficient
    (listing the dependent columns) or spans the whole space.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a 2-d array")
    n, q = X.shape
    _check_full_rank(X)
    if q == n:
        raise ValueError(
            "design spans the whole space (q = n); no complement exists")
    if q == 0:
        return RhzBasis(matrix=np.eye(n), q=0)
    full, _ = np.linalg.qr(X, mode="complete")
    b = full[:, q:]
    # fix signs for determinism: make the largest-magnitude entry positive
    lead = np.argmax(np.abs(b), axis=0)
    signs = np.sign(b[lead, np.arange(b.shape[1])])
    signs[signs == 0] = 1.0
    return RhzBasis(matrix=b * signs, q=q)


def rhz_transform(prec: SparsePrecision, basis: RhzBasis) -> np.ndarray:
    """Project a latent precision onto the complement basis: B' A B.

    The result is dense, symmetric, and positive definite whenever the
    precision's null space lies inside the design span (an intercept
    column removes the intrinsic autoregressive null vector).  An
    indefinite result triggers a warning, not an error.
    """
    if prec.dimension != basis.n:
        raise ValueError(
            f"precision dimension {prec.dimension} != basis rows {basis.n}")
    b = basis.matrix
    m = b.T @ (prec.matrix @ b)
    m = 0.5 * (m + m.T)
    if m.size:
        eigmin = float(np.linalg.eigvalsh(m)[0])
        if eigmin <= 1e-10 * max(1.0, float(np.abs(m).max())):
            warnings.warn(
                "projected precision is not positive definite "
                f"(min eigenvalue {eigmin:.3e}); is the intercept included "
                "in the design?", RuntimeWarning, stacklevel=2)
    return m


def spock_centroids(centroids: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Project centroids onto the orthogonal complement of span(X).

    Applies S* = (I - X (X'X)^{-1} X') S columnwise; idempotent, and
    every output column is orthogonal to every design column.
    """
    S = np.asarray(centroids, dtype=float)
    X = np.asarray(X, dtype=float)
    if S.ndim != 2 or S.shape[1] != 2:
        raise ValueError("centroids must be an (n, 2) array")
    if X.shape[0] != S.shape[0]:
        raise ValueError("centroids and design must have equal row counts")
    _check_full_rank(X)
    if X.shape[1] == 0:
        return S.copy()
    coef, *_ = np.linalg.lstsq(X, S, rcond=None)
    return S - X @ coef


def spock_graph(graph: RegionGraph, X: np.ndarray) -> RegionGraph:
    """Rebuild the neighbor graph on design-projected centroids.

    Each region requests its original neighbor count among the
    projected centroids (nearest-neighbor, index tie-break), then the
    directed sets are union-symmetrized.
    """
    if graph.centroids is None:
        raise ValueError("graph has no centroids; required for projection")
    projected = spock_centroids(graph.centroids, X)
    return knn_graph(projected, graph.degrees)


def beta_star(beta: np.ndarray, X: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Adjusted estimand beta + (X'X)^{-1} X' phi.

    This is the coefficient vector a deconfounded model estimates when
    the realized spatial effect phi leaks into the span of X.
    """
    X = np.asarray(X, dtype=float)
    beta = np.asarray(beta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if X.shape[0] != phi.shape[0]:
        raise ValueError("X and phi must have equal row counts")
    if beta.shape != (X.shape[1],):
        raise ValueError("beta length must equal the design column count")
    adj, *_ = np.linalg.lstsq(X, phi, rcond=None)
    return beta + adj


def spatialplus_residualize(x_col: np.ndarray, lattice: LatticeMap,
                            engine=None) -> ResidualizedDesign:
    """Residualize one covariate column against a lattice smooth.

    Stage 1 fits the Gaussian model x = trend + smooth + noise, where
    the trend carries the intercept and both lattice coordinate ramps
    as fixed effects and the smooth is a constrained second-order
    random walk over the lattice cells.  The returned residual is
    x minus the posterior-mean fitted surface at each region's cell.

    ``engine`` is the fitting entry point (defaults to the package's
    nested-Laplace ``fit``); it must accept a ModelSpec and return a
    FitResult.
    """
    from . import lgm  # local import: lgm depends on this module's transforms

    x = np.asarray(x_col, dtype=float)
    if x.ndim != 1:
        raise ValueError("x_col must be a vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("x_col must be finite")
    if lattice.n_regions != x.size:
        raise ValueError(
            f"lattice maps {lattice.n_regions} regions, x_col has {x.size}")
    if engine is None:
        engine = lgm.fit
    m1, m2 = lattice.shape
    rows = (lattice.cell_index // m2).astype(float)
    cols = (lattice.cell_index % m2).astype(float)
    trend = np.column_stack([rows, cols])
    spec = lgm.ModelSpec(family="gaussian", method="nps", y=x, X=trend,
                         intercept=True, spatial=lattice)
    result = engine(spec)
    fitted = np.asarray(result.eta_mean, dtype=float)
    tau_noise = float(result.hyper_summary.get("tau_noise", np.nan))
    return ResidualizedDesign(residual=x - fitted, fitted=fitted,
                              tau_noise=tau_noise)
