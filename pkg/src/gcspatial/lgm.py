"""Nested-Laplace inference for latent Gaussian models of areal counts.

The model class is

    y_i ~ family(eta_i),   eta = offset + X beta + M u,
    beta ~ N(0, beta_precision^{-1} I),
    u ~ intrinsic GMRF with precision tau * Q0 and linear constraints,

with family one of gamma-count (dispersion alpha), Poisson, or Gaussian
(noise precision tau_noise; used by the covariate-residualization
stage).  The latent structure is selected by ``method``:

- ``ps``     intrinsic autoregressive prior on the region graph;
- ``spock``  same, but on the graph rebuilt from design-projected
             centroids;
- ``rhz``    spatial effect restricted to the orthogonal complement of
             the design span (dense projected precision);
- ``nps``    thin-plate (second-order random walk) smooth on a lattice;
- ``splus``  covariates flagged as confounded are residualized against
             a lattice smooth, then fitted as ``nps``;
- ``none``   no spatial term.

Inference integrates the hyperparameters over a small grid: the
hyperparameter posterior is located by coordinate-wise golden-section
ascent of the Laplace-approximate marginal, a regular grid (step 0.75
in curvature-standardized log units) is laid around the mode, points
below mode - 5 are dropped, and latent marginals are Gaussian mixtures
over the surviving points.  Linear constraints are enforced exactly
through bordered (KKT) systems, which also yield the exact restricted
log-determinants entering the marginal likelihood.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg as dense_linalg
from scipy import sparse, special
from scipy.sparse import linalg as sparse_linalg

from . import criteria as criteria_mod
from .deconfound import rhz_basis, rhz_transform, spock_graph, \
    spatialplus_residualize
from .gcdist import GcParams, SeriesCapError, gc_mean, loglik_eta_terms
from .graph import LatticeMap, RegionGraph, SparsePrecision, \
    icar_precision, rw2d_precision

__all__ = [
    "ModelSpec",
    "PriorSpec",
    "HyperPoint",
    "FitResult",
    "NonConvergenceError",
    "assemble_latent_prior",
    "newton_mode",
    "log_marginal_theta",
    "theta_log_prior",
    "explore_hypergrid",
    "latent_marginals",
    "fitted_means",
    "hpd_interval",
    "fit",
]

FAMILIES = ("gc", "poisson", "gaussian")
RESERVED_FAMILIES = ("nb", "gp")
METHODS = ("ps", "nps", "rhz", "spock", "splus", "none")

_GRAD_TOL = 1e-8
_MAX_NEWTON = 100
_GRID_STEP = 0.75
_GRID_DROP = 5.0
_MAX_MODE_EVALS = 600
# 3-point Gauss-Hermite rule for N(m, s^2): nodes m, m +/- sqrt(3) s
_GH_NODES = (-math.sqrt(3.0), 0.0, math.sqrt(3.0))
_GH_WEIGHTS = (1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0)


class NonConvergenceError(RuntimeError):
    """Newton or hyperparameter search failed; carries diagnostics."""

    def __init__(self, message: str, grad_norm: float | None = None):
        super().__init__(message)
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class PriorSpec:
    """Hyperprior settings.

    ``beta_precision``: precision of the zero-mean Gaussian prior on
    each fixed effect.  ``pc_lambda_tau`` / ``pc_lambda_noise``: rate of
    the penalized-complexity prior pi(tau) =
    (lambda/2) tau^{-3/2} exp(-lambda tau^{-1/2}) on the latent and
    Gaussian-noise precisions; the default calibrates
    P(1/sqrt(tau) > 1) = 0.01.  ``alpha_log_mean``/``alpha_log_sd``:
    Gaussian prior on log alpha (dispersion), centered on the Poisson
    case.
    """

    beta_precision: float = 0.001
    pc_lambda_tau: float = -math.log(0.01)
    pc_lambda_noise: float = -math.log(0.01)
    alpha_log_mean: float = 0.0
    alpha_log_sd: float = 1.0

    def __post_init__(self):
        for name in ("beta_precision", "pc_lambda_tau", "pc_lambda_noise",
                     "alpha_log_sd"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")


@dataclass(frozen=True)
class ModelSpec:
    """Complete description of one model fit.

    ``X`` holds the covariate columns (no intercept column); set
    ``intercept=True`` to prepend one.  ``spatial`` is a RegionGraph
    for methods ps/rhz/spock, a LatticeMap for nps/splus, or None for
    method none.  ``offset`` is added to the linear predictor (log
    expected counts), defaulting to zero.  ``confounded_cols`` indexes
    the covariate columns to residualize under method splus.
    ``covariate_names`` labels the columns in reported summaries.
    """

    family: str
    method: str
    y: np.ndarray
    X: np.ndarray
    intercept: bool = False
    offset: np.ndarray | None = None
    spatial: object = None
    priors: PriorSpec = field(default_factory=PriorSpec)
    confounded_cols: tuple = ()
    covariate_names: tuple = ()

    def __post_init__(self):
        if self.family in RESERVED_FAMILIES:
            raise ValueError(
                f"family {self.family!r} is reserved in the schema but "
                "not supported by this engine")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 1 or y.size == 0 or not np.all(np.isfinite(y)):
            raise ValueError("y must be a finite nonempty vector")
        if self.family in ("gc", "poisson"):
            if np.any(y < 0) or np.any(y != np.rint(y)):
                raise ValueError(
                    f"family {self.family!r} needs nonnegative integer y")
        object.__setattr__(self, "y", y)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.size == 0:
            X = X.reshape(y.size, 0)
        if X.shape[0] != y.size or not np.all(np.isfinite(X)):
            raise ValueError("X must be finite with one row per region")
        object.__setattr__(self, "X", X)
        if self.offset is not None:
            off = np.asarray(self.offset, dtype=float)
            if off.shape != y.shape or not np.all(np.isfinite(off)):
                raise ValueError("offset must match y and be finite")
            object.__setattr__(self, "offset", off)
        if self.method in ("ps", "rhz", "spock"):
            if not isinstance(self.spatial, RegionGraph):
                raise ValueError(
                    f"method {self.method!r} needs a RegionGraph")
            if self.spatial.n != y.size:
                raise ValueError("graph size must match y")
        elif self.method in ("nps", "splus"):
            if not isinstance(self.spatial, LatticeMap):
                raise ValueError(f"method {self.method!r} needs a LatticeMap")
            if self.spatial.n_regions != y.size:
                raise ValueError("lattice region count must match y")
        elif self.spatial is not None:
            raise ValueError("method 'none' takes no spatial structure")
        cols = tuple(int(c) for c in self.confounded_cols)
        if any(c < 0 or c >= X.shape[1] for c in cols):
            raise ValueError("confounded_cols out of range")
        if self.method == "splus" and not cols:
            raise ValueError("method 'splus' needs confounded_cols")
        object.__setattr__(self, "confounded_cols", cols)
        names = tuple(self.covariate_names) or tuple(
            f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValueError("covariate_names length must match X columns")
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.y.size

    def offset_vector(self) -> np.ndarray:
        return np.zeros(self.n) if self.offset is None else self.offset


@dataclass(frozen=True)
class HyperPoint:
    """One hyperparameter grid point (log scale) with its weight."""

    theta: tuple
    log_post: float
    weight: float


def theta_names(spec: ModelSpec) -> tuple:
    """Ordered names of the log-scale hyperparameters of a spec."""
    names = []
    if spec.family == "gc":
        names.append("alpha")
    if spec.family == "gaussian":
        names.append("tau_noise")
    if spec.method != "none":
        names.append("tau_spatial")
    return tuple(names)


def _theta_array(spec, theta) -> np.ndarray:
    if isinstance(theta, HyperPoint):
        theta = theta.theta
    arr = np.atleast_1d(np.asarray(theta, dtype=float))
    want = len(theta_names(spec))
    if arr.shape != (want,):
        raise ValueError(
            f"theta must supply {want} values {theta_names(spec)}, "
            f"got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("theta must be finite")
    return arr


def _theta_parts(spec, theta) -> dict:
    arr = _theta_array(spec, theta)
    return dict(zip(theta_names(spec), arr))


# --------------------------------------------------------------------------
# workspace: structure shared by every evaluation of one spec


class _Workspace:
    """Per-spec precomputed structure (design, prior, constraints)."""

    def __init__(self, spec: ModelSpec):
        base = spec
        stage1 = []
        if spec.method == "splus":
            X = spec.X.copy()
            for c in spec.confounded_cols:
                res = spatialplus_residualize(X[:, c], spec.spatial)
                X[:, c] = res.residual
                stage1.append(res)
            base = replace(spec, method="nps", X=X, confounded_cols=())
        self.spec = base
        self.stage1 = tuple(stage1)
        n = base.n
        q0 = base.X.shape[1]
        X_full = base.X
        names = list(base.covariate_names)
        if base.intercept:
            X_full = np.column_stack([np.ones(n), X_full])
            names = ["intercept"] + names
        self.X_full = X_full
        self.q = X_full.shape[1]
        self.beta_names = tuple(names)
        del q0

        method = base.method
        cons_spatial = []
        if method in ("ps", "spock"):
            graph = base.spatial
            if method == "spock":
                graph = spock_graph(graph, X_full)
            prec = icar_precision(graph)
            self.Q0 = prec.matrix
            self.ds = n
            cons_spatial = list(prec.constraint_vectors)
            self.M = sparse.eye_array(n, format="csr")
            self.sparse_h = True
        elif method == "nps":
            prec = rw2d_precision(base.spatial)
            self.Q0 = prec.matrix
            self.ds = prec.dimension
            cons_spatial = list(prec.constraint_vectors)
            self.M = base.spatial.membership_matrix()
            self.sparse_h = True
        elif method == "rhz":
            base_prec = icar_precision(base.spatial)
            basis = rhz_basis(X_full)
            dense_q = rhz_transform(base_prec, basis)
            self.Q0 = sparse.csr_array(dense_q)
            self.ds = basis.matrix.shape[1]
            self.M = sparse.csr_array(basis.matrix)
            self.sparse_h = False
        else:  # none
            self.Q0 = None
            self.ds = 0
            self.M = None
            self.sparse_h = False
        self.d = self.q + self.ds
        if self.d == 0:
            raise ValueError("model has no latent coordinates "
                             "(no covariates, no intercept, no spatial term)")

        if self.M is not None:
            self.A = np.hstack([X_full, self.M.toarray()])
            self.A_sp = sparse.hstack(
                [sparse.csr_array(X_full), self.M], format="csr")
        else:
            self.A = X_full.copy()
            self.A_sp = sparse.csr_array(X_full)

        self.c = len(cons_spatial)
        if self.c:
            C = np.zeros((self.c, self.d))
            for i, v in enumerate(cons_spatial):
                C[i, self.q:] = v
            self.C = C
            # orthonormal basis of the constraint rows, for projected
            # gradients and the determinant correction
            self.Y, _ = np.linalg.qr(C.T)
            self.logdet_CY = float(
                np.linalg.slogdet(C @ self.Y)[1])
        else:
            self.C = np.zeros((0, self.d))
            self.Y = np.zeros((self.d, 0))
            self.logdet_CY = 0.0

        self.latent_names = self.beta_names + tuple(
            f"spatial:{j}" for j in range(self.ds))
        self._logdet0 = self._spatial_base_logdet()

    def _spatial_base_logdet(self) -> float:
        """log det of the unit-tau spatial prior restricted to the
        constraint-feasible subspace."""
        if self.Q0 is None:
            return 0.0
        if self.c == 0:
            sign, val = np.linalg.slogdet(self.Q0.toarray())
            if sign <= 0:
                raise ValueError("projected spatial precision not PD")
            return float(val)
        Cs = self.C[:, self.q:]
        k = sparse.bmat(
            [[self.Q0, sparse.csr_array(Cs.T)],
             [sparse.csr_array(Cs), None]], format="csc")
        lu = sparse_linalg.splu(k)
        logabs = float(np.sum(np.log(np.abs(lu.U.diagonal()))))
        ys, _ = np.linalg.qr(Cs.T)
        corr = float(np.linalg.slogdet(Cs @ ys)[1])
        return logabs - 2.0 * corr

    def prior_matrix(self, spec, parts) -> sparse.csr_array:
        blocks = []
        if self.q:
            blocks.append(spec.priors.beta_precision *
                          sparse.eye_array(self.q, format="csr"))
        if self.ds:
            tau = math.exp(parts["tau_spatial"])
            blocks.append((self.Q0 * tau).tocsr())
        if not blocks:
            return sparse.csr_array((0, 0))
        return sparse.block_diag(blocks, format="csr")

    def logdet_prior_z(self, spec, parts) -> float:
        """log det of the full latent prior restricted to the feasible
        subspace (beta block plus constrained spatial block)."""
        val = self.q * math.log(spec.priors.beta_precision)
        if self.ds:
            val += (self.ds - self.c) * parts["tau_spatial"] + self._logdet0
        return val


def _workspace(spec: ModelSpec) -> _Workspace:
    ws = spec.__dict__.get("_ws")
    if ws is None:
        ws = _Workspace(spec)
        object.__setattr__(spec, "_ws", ws)
    return ws


# --------------------------------------------------------------------------
# likelihood dispatch


def _loglik_terms(spec, ws, eta_total, parts):
    """(log-lik vector, d/deta, d2/deta2) for the working family."""
    y = ws.spec.y
    fam = ws.spec.family
    if fam == "gc":
        alpha = math.exp(parts["alpha"])
        return loglik_eta_terms(alpha, y, eta_total)
    if fam == "poisson":
        lam = np.exp(eta_total)
        ll = y * eta_total - lam - special.gammaln(y + 1.0)
        return ll, y - lam, -lam
    # gaussian: eta is the mean, tau_noise the precision
    tau = math.exp(parts["tau_noise"])
    resid = y - eta_total
    ll = 0.5 * (math.log(tau) - math.log(2.0 * math.pi)) \
        - 0.5 * tau * resid * resid
    d1 = tau * resid
    d2 = np.full(y.shape, -tau)
    return ll, d1, d2


def theta_log_prior(spec: ModelSpec, theta) -> float:
    """Log prior density of the log-scale hyperparameters.

    Penalized-complexity priors on precisions (with the log-scale
    Jacobian) and a Gaussian prior on log alpha.
    """
    parts = _theta_parts(spec, theta)
    pri = spec.priors
    total = 0.0
    if "alpha" in parts:
        z = (parts["alpha"] - pri.alpha_log_mean) / pri.alpha_log_sd
        total += -0.5 * z * z - math.log(pri.alpha_log_sd) \
            - 0.5 * math.log(2.0 * math.pi)
    for name, lam in (("tau_spatial", pri.pc_lambda_tau),
                      ("tau_noise", pri.pc_lambda_noise)):
        if name in parts:
            th = parts[name]
            total += math.log(lam / 2.0) - 0.5 * th \
                - lam * math.exp(-0.5 * th)
    return total


# --------------------------------------------------------------------------
# factorizations


class _Factor:
    """LU factorization of the bordered system [[H, C'], [C, 0]].

    Provides constrained solves and the restricted log-determinant of H
    via log det(Z'HZ) = log|det K| - 2 log|det C Y| with Z, Y
    orthonormal bases of the null space and row space of C.
    """

    def __init__(self, h, C, use_sparse):
        d = h.shape[0]
        c = C.shape[0]
        self.d, self.c = d, c
        if use_sparse:
            k = sparse.bmat(
                [[h, sparse.csr_array(C.T)], [sparse.csr_array(C), None]],
                format="csc") if c else sparse.csc_array(h)
            self._lu = sparse_linalg.splu(k)
            self.logabsdet_k = float(
                np.sum(np.log(np.abs(self._lu.U.diagonal()))))
            self._solve = self._lu.solve
        else:
            hd = h.toarray() if sparse.issparse(h) else np.asarray(h)
            if c:
                k = np.zeros((d + c, d + c))
                k[:d, :d] = hd
                k[:d, d:] = C.T
                k[d:, :d] = C
            else:
                k = hd
            self._lu = dense_linalg.lu_factor(k)
            self.logabsdet_k = float(
                np.sum(np.log(np.abs(np.diag(self._lu[0])))))
            self._solve = lambda b: dense_linalg.lu_solve(self._lu, b)

    def solve_constrained(self, rhs: np.ndarray) -> np.ndarray:
        """Solve the KKT system for the top-block right-hand side."""
        if self.c == 0:
            return self._solve(rhs)
        if rhs.ndim == 1:
            full = np.concatenate([rhs, np.zeros(self.c)])
            return self._solve(full)[: self.d]
        full = np.vstack([rhs, np.zeros((self.c, rhs.shape[1]))])
        return self._solve(full)[: self.d]

    def restricted_logdet(self, logdet_cy: float) -> float:
        return self.logabsdet_k - 2.0 * logdet_cy


def _hessian(ws, q_mat, W):
    if ws.sparse_h:
        awa = (ws.A_sp.T @ sparse.diags_array(W) @ ws.A_sp).tocsr()
        return (q_mat + awa).tocsr()
    # dense workspaces (projected bases, spatial-free models) would pay
    # a large overhead for sparse products of fully dense factors
    awa = ws.A.T @ (W[:, None] * ws.A)
    q = q_mat.toarray() if sparse.issparse(q_mat) else np.asarray(q_mat)
    return q + awa


def _use_sparse(ws) -> bool:
    return ws.sparse_h and ws.d + ws.c >= 64


# --------------------------------------------------------------------------
# mode finding


def assemble_latent_prior(spec: ModelSpec, theta) -> SparsePrecision:
    """Joint latent prior precision over (beta, spatial block).

    Block diagonal: beta_precision * I on the fixed effects and
    tau * Q0 on the spatial block, with the spatial constraints padded
    to full latent dimension.
    """
    ws = _workspace(spec)
    parts = _theta_parts(ws.spec, theta)
    mat = ws.prior_matrix(ws.spec, parts)
    cons = tuple(ws.C[i] for i in range(ws.c))
    return SparsePrecision(matrix=mat, constraint_vectors=cons,
                           rank_deficiency=ws.c)


def _fallback_init(ws, spec, parts) -> np.ndarray:
    """Feasible start when the likelihood underflows at zero."""
    y = spec.y
    off = spec.offset_vector()
    if spec.family == "gc":
        target = np.log((y + 0.5) / math.exp(parts["alpha"])) - off
    elif spec.family == "poisson":
        target = np.log(y + 0.5) - off
    else:
        target = y - off
    psi, *_ = np.linalg.lstsq(ws.A, target, rcond=None)
    if ws.c:
        psi = psi - ws.Y @ (ws.Y.T @ psi)
    return psi


def newton_mode(spec: ModelSpec, theta, init: np.ndarray | None = None):
    """Constrained Newton ascent of the latent log posterior.

    Returns (mode, hessian_at_mode, info) where info carries the
    iteration count, final projected-gradient norm, objective pieces,
    the KKT factorization, and restricted log-determinants.  Steps are
    computed from bordered systems so every iterate satisfies the
    constraints exactly; an Armijo backtracking line search guarantees
    monotone ascent and damps through flat-likelihood regions.
    """
    ws = _workspace(spec)
    spec_r = ws.spec
    parts = _theta_parts(spec_r, theta)
    off = spec_r.offset_vector()
    n = spec_r.n

    if init is None:
        psi = np.zeros(ws.d)
    else:
        psi = np.asarray(init, dtype=float).copy()
        if psi.shape != (ws.d,) or not np.all(np.isfinite(psi)):
            raise ValueError("init must be a finite vector of latent size")
        if ws.c:
            psi = psi - ws.Y @ (ws.Y.T @ psi)

    q_mat = ws.prior_matrix(spec_r, parts)

    def objective(p):
        ll, d1, d2 = _loglik_terms(spec_r, ws, off + ws.A @ p, parts)
        quad = 0.5 * float(p @ (q_mat @ p))
        return float(np.sum(ll)) - quad, ll, d1, d2

    f_cur, ll, d1, d2 = objective(psi)
    if not np.isfinite(f_cur):
        psi = _fallback_init(ws, spec_r, parts)
        f_cur, ll, d1, d2 = objective(psi)
        if not np.isfinite(f_cur):
            raise NonConvergenceError(
                "likelihood underflows at the fallback start", float("inf"))

    steps = 0
    grad_norm = float("inf")
    h = None
    factor = None
    for _ in range(_MAX_NEWTON):
        g = ws.A.T @ d1 - q_mat @ psi
        g_proj = g - ws.Y @ (ws.Y.T @ g) if ws.c else g
        grad_norm = float(np.linalg.norm(g_proj))
        if grad_norm <= _GRAD_TOL * (1.0 + float(np.linalg.norm(psi))):
            break
        W = np.maximum(-d2, 0.0)
        h = _hessian(ws, q_mat, W)
        factor = _Factor(h, ws.C, _use_sparse(ws))
        delta = factor.solve_constrained(g)
        slope = float(g @ delta)
        if slope <= 0.0:
            # numerically degenerate direction; fall back to gradient
            delta = g_proj
            slope = float(g @ delta)
        # The attainable gain from here is about slope / 2.  Once that drops
        # below the floating-point resolution of the objective, no line
        # search can verify further progress: the mode is converged to the
        # best precision the arithmetic supports, even if the gradient norm
        # sits slightly above its tolerance.
        if slope <= 4.0 * np.finfo(float).eps * (1.0 + abs(f_cur)):
            break
        t = 1.0
        while t > 1e-10:
            f_new, ll_n, d1_n, d2_n = objective(psi + t * delta)
            if np.isfinite(f_new) and f_new >= f_cur + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            raise NonConvergenceError(
                f"line search stalled (gradient norm {grad_norm:.3e})",
                grad_norm)
        psi = psi + t * delta
        f_cur, ll, d1, d2 = f_new, ll_n, d1_n, d2_n
        steps += 1
    else:
        raise NonConvergenceError(
            f"Newton did not converge in {_MAX_NEWTON} iterations "
            f"(gradient norm {grad_norm:.3e})", grad_norm)

    # factorization at the mode (refresh the Hessian at the final point)
    W = np.maximum(-d2, 0.0)
    h = _hessian(ws, q_mat, W)
    factor = _Factor(h, ws.C, _use_sparse(ws))
    info = {
        "iterations": steps,
        "grad_norm": grad_norm,
        "loglik": float(np.sum(ll)),
        "quad": 0.5 * float(psi @ (q_mat @ psi)),
        "objective": f_cur,
        "logdet_h_z": factor.restricted_logdet(ws.logdet_CY),
        "logdet_q_z": ws.logdet_prior_z(spec_r, parts),
        "factor": factor,
        "eta": off + ws.A @ psi,
    }
    return psi, h, info


def log_marginal_theta(spec: ModelSpec, theta,
                       init: np.ndarray | None = None) -> float:
    """Laplace approximation of log p(y, theta) up to a constant.

    loglik(mode) - quadratic prior penalty + half the difference of the
    restricted prior and Hessian log-determinants + log prior(theta).
    Exact (no approximation) for the Gaussian family.
    """
    _, _, info = newton_mode(spec, theta, init=init)
    return (info["objective"]
            + 0.5 * (info["logdet_q_z"] - info["logdet_h_z"])
            + theta_log_prior(_workspace(spec).spec, theta))


# --------------------------------------------------------------------------
# hyperparameter exploration


class _Evaluator:
    """Memoized log-marginal evaluations with warm-started modes."""

    def __init__(self, spec):
        self.spec = spec
        self.ws = _workspace(spec)
        self.cache = {}
        self.last_mode = None
        self.evals = 0

    def __call__(self, theta: np.ndarray) -> float:
        key = tuple(np.round(np.asarray(theta, dtype=float), 12))
        if key in self.cache:
            return self.cache[key][0]
        if self.evals >= _MAX_MODE_EVALS:
            raise NonConvergenceError(
                f"hyperparameter search exceeded {_MAX_MODE_EVALS} "
                "evaluations without settling")
        self.evals += 1
        psi, _, info = newton_mode(self.spec, np.asarray(theta),
                                   init=self.last_mode)
        self.last_mode = psi
        lp = (info["objective"]
              + 0.5 * (info["logdet_q_z"] - info["logdet_h_z"])
              + theta_log_prior(self.ws.spec, theta))
        self.cache[key] = (lp, psi)
        return lp


def _golden_max(f, lo, hi, tol=0.05):
    """Golden-section maximization of a 1-d function on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = f(x1)
    return (x1, f1) if f1 >= f2 else (x2, f2)


def explore_hypergrid(spec: ModelSpec):
    """Locate the hyperparameter mode and lay a weighted grid around it.

    Coordinate-wise golden-section ascent from zero, finite-difference
    curvature to standardize each axis, a regular grid with step 0.75
    standardized units, discarding points more than 5 log-units below
    the mode, and normalized weights.  Returns a list of HyperPoint.
    """
    names = theta_names(_workspace(spec).spec)
    j = len(names)
    ev = _Evaluator(spec)
    if j == 0:
        return [HyperPoint(theta=(), log_post=ev(np.zeros(0)), weight=1.0)]

    theta = np.zeros(j)
    best = ev(theta)
    for _ in range(6):
        moved = 0.0
        for k in range(j):
            def f1(x, k=k):
                t = theta.copy()
                t[k] = x
                return ev(t)
            x_star, f_star = _golden_max(f1, theta[k] - 3.0, theta[k] + 3.0)
            moved = max(moved, abs(x_star - theta[k]))
            theta[k] = x_star
            best = f_star
        if moved < 0.05:
            break

    # curvature-standardized grid steps
    sds = np.empty(j)
    h = 0.3
    for k in range(j):
        t_hi = theta.copy()
        t_hi[k] += h
        t_lo = theta.copy()
        t_lo[k] -= h
        curv = (ev(t_hi) - 2.0 * best + ev(t_lo)) / (h * h)
        sds[k] = 1.0 / math.sqrt(max(-curv, 1e-2))
    sds = np.clip(sds, 0.05, 3.0)

    span = int(math.ceil(math.sqrt(2.0 * _GRID_DROP) / _GRID_STEP))
    offsets = np.arange(-span, span + 1)
    grids = np.meshgrid(*([offsets] * j), indexing="ij")
    points = []
    for idx in range(offsets.size ** j):
        ks = np.array([g.ravel()[idx] for g in grids])
        t = theta + _GRID_STEP * ks * sds
        lp = ev(t)
        if np.isfinite(lp) and lp >= best - _GRID_DROP:
            points.append((tuple(t), lp))
    best_lp = max(lp for _, lp in points)
    raw = np.array([math.exp(lp - best_lp) for _, lp in points])
    weights = raw / raw.sum()
    points = [HyperPoint(theta=t, log_post=lp, weight=float(w))
              for (t, lp), w in zip(points, weights)]
    return sorted(points, key=lambda p: p.theta)


# --------------------------------------------------------------------------
# conditional and mixture summaries


class _GridRecord:
    """Per-grid-point conditional Gaussian summaries."""

    __slots__ = ("theta", "weight", "log_post", "psi_mean", "psi_sd",
                 "eta_mean", "eta_sd", "iterations", "grad_norm")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def _conditional_records(spec, grid, warm=None):
    ws = _workspace(spec)
    records = []
    init = warm
    for hp in grid:
        psi, _, info = newton_mode(spec, np.asarray(hp.theta), init=init)
        init = psi
        factor = info["factor"]
        cov = factor.solve_constrained(np.eye(ws.d))
        psi_var = np.clip(np.diag(cov), 0.0, None)
        az = ws.A @ cov
        eta_var = np.clip(np.einsum("ij,ij->i", az, ws.A), 0.0, None)
        records.append(_GridRecord(
            theta=np.asarray(hp.theta), weight=hp.weight,
            log_post=hp.log_post, psi_mean=psi,
            psi_sd=np.sqrt(psi_var), eta_mean=ws.A @ psi,
            eta_sd=np.sqrt(eta_var), iterations=info["iterations"],
            grad_norm=info["grad_norm"]))
    return records


def _mixture_moments(means, sds, weights):
    """Mean and sd of a Gaussian mixture, columnwise.

    means/sds: (K, m); weights: (K,).
    """
    mean = weights @ means
    second = weights @ (sds * sds + means * means)
    var = np.clip(second - mean * mean, 0.0, None)
    return mean, np.sqrt(var)


def _mixture_cdf(x, means, sds, weights):
    """CDF of the Gaussian mixture at points x (vectorized batches).

    x: (..., m); means/sds: (K, m); weights: (K,).
    """
    z = (x[..., None, :] - means) / sds
    return np.einsum("...km,k->...m", special.ndtr(z), weights)


def _mixture_pdf(x, means, sds, weights):
    z = (x[..., None, :] - means) / sds
    phi = np.exp(-0.5 * z * z) / (math.sqrt(2.0 * math.pi) * sds)
    return np.einsum("...km,k->...m", phi, weights)


def _hpd_batch(means, sds, weights, level):
    """Shortest intervals holding >= level mass, per column.

    means/sds: (K, m); returns (lo, hi) arrays of length m.  Evaluates
    the exact mixture CDF on a 2048-point lattice, scans with two
    pointers, then polishes the endpoints by bisection on the
    equal-density condition.
    """
    k, m = means.shape
    lo_edge = np.min(means - 8.0 * sds, axis=0)
    hi_edge = np.max(means + 8.0 * sds, axis=0)
    npts = 2048
    ts = np.linspace(0.0, 1.0, npts)
    xs = lo_edge + ts[:, None] * (hi_edge - lo_edge)  # (npts, m)
    cdf = np.empty((npts, m))
    for i in range(0, npts, 256):
        block = xs[i:i + 256]  # (b, m)
        z = (block[:, None, :] - means[None]) / sds[None]
        cdf[i:i + 256] = np.einsum("bkm,k->bm", special.ndtr(z), weights)

    spacing = (hi_edge - lo_edge) / (npts - 1)
    lo = np.empty(m)
    hi = np.empty(m)
    lo_a = np.empty(m)
    lo_b = np.empty(m)
    for col in range(m):
        f = cdf[:, col]
        x = xs[:, col]
        js = np.searchsorted(f, f + level, side="left")
        valid = js < npts
        if not np.any(valid):
            lo[col], hi[col] = x[0], x[-1]
            lo_a[col] = lo_b[col] = x[0]
            continue
        widths = np.where(valid, x[np.minimum(js, npts - 1)] - x, np.inf)
        i_star = int(np.argmin(widths))
        j_star = int(js[i_star])
        lo[col], hi[col] = x[i_star], x[j_star]
        # The width curve is nearly flat around the optimum, so the argmin
        # alone can sit several cells off-center; the plateau of
        # near-minimal widths brackets the true shortest interval.
        plateau = np.flatnonzero(widths <= widths[i_star] + 4.0 * spacing[col])
        lo_a[col] = x[plateau[0]] - spacing[col]
        lo_b[col] = x[plateau[-1]] + spacing[col]
    # polish: equal-density endpoints conserving the target mass.  The
    # lower endpoint is bisected over the plateau bracket; for each
    # candidate the upper endpoint solving mass = level is found by an
    # inner bisection, and the density difference steers the outer one.

    def upper_for(lo_cand, iters):
        target = _mixture_cdf(lo_cand[None], means, sds, weights)[0] + level
        ha, hb = lo_cand.copy(), hi_edge.copy()
        for _ in range(iters):
            hm = 0.5 * (ha + hb)
            c = _mixture_cdf(hm[None], means, sds, weights)[0]
            go_right = c < target
            ha = np.where(go_right, hm, ha)
            hb = np.where(go_right, hb, hm)
        return 0.5 * (ha + hb), target

    def density_gap(lo_cand, iters):
        hi_cand, target = upper_for(lo_cand, iters)
        gap = _mixture_pdf(lo_cand[None], means, sds, weights)[0] \
            - _mixture_pdf(hi_cand[None], means, sds, weights)[0]
        return gap, target

    gap_a, _ = density_gap(lo_a, 25)
    gap_b, _ = density_gap(lo_b, 25)
    bracketed = (gap_a <= 0.0) & (gap_b >= 0.0)
    for _ in range(30):
        mid = 0.5 * (lo_a + lo_b)
        gap, _ = density_gap(mid, 25)
        go_right = gap <= 0.0
        lo_a = np.where(go_right, mid, lo_a)
        lo_b = np.where(go_right, lo_b, mid)
    lo_ref = 0.5 * (lo_a + lo_b)
    hi_ref, target = upper_for(lo_ref, 60)
    keep = bracketed
    keep &= (hi_ref - lo_ref) <= (hi - lo) + spacing
    keep &= target <= 1.0 + 1e-9
    lo = np.where(keep, lo_ref, lo)
    hi = np.where(keep, hi_ref, hi)
    return lo, hi


def hpd_interval(means, sds, weights, level: float = 0.95):
    """Shortest interval with >= level mass under a Gaussian mixture.

    ``means``, ``sds``, ``weights`` describe the mixture components of
    a single scalar marginal.  For multimodal mixtures the result is
    the shortest single interval, a documented simplification.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    means = np.asarray(means, dtype=float).reshape(-1, 1)
    sds = np.asarray(sds, dtype=float).reshape(-1, 1)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if np.any(sds <= 0):
        raise ValueError("component sds must be positive")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    lo, hi = _hpd_batch(means, sds, weights, level)
    return float(lo[0]), float(hi[0])


def latent_marginals(spec: ModelSpec, grid):
    """FitResult for a hyperparameter grid (full mixture summaries)."""
    return _assemble_result(spec, grid)


def fitted_means(spec: ModelSpec, eta_hat, hyper_summary) -> np.ndarray:
    """Posterior-mean count surface mu_hat at the fitted predictor.

    ``eta_hat`` must include the offset.  Gamma-count means come from
    the tail-sum series at the posterior-mean dispersion; Poisson means
    are exp(eta); Gaussian means are eta itself.
    """
    eta_hat = np.asarray(eta_hat, dtype=float)
    fam = spec.family
    if fam == "gaussian":
        return eta_hat.copy()
    if fam == "poisson":
        return np.exp(eta_hat)
    alpha = float(hyper_summary["alpha"])
    out = np.empty(eta_hat.size)
    for i, e in enumerate(eta_hat):
        params = GcParams(alpha=alpha, gamma_rate=alpha * math.exp(e))
        try:
            out[i] = gc_mean(params)
        except SeriesCapError:
            out[i] = math.exp(e)
    return out


# --------------------------------------------------------------------------
# result assembly


@dataclass(frozen=True)
class FitResult:
    """Posterior summaries of one fit.

    ``latent_*`` entries are ordered fixed effects first (see
    ``latent_names``) then spatial coordinates.  ``eta_mean`` is the
    posterior mean linear predictor excluding the offset; ``fitted``
    includes it and is on the response scale.  ``criteria`` holds dic,
    p_dic, waic, p_waic, log_score, mspe.
    """

    family: str
    method: str
    theta_names: tuple
    hyper_points: tuple
    hyper_summary: dict
    latent_names: tuple
    latent_mean: np.ndarray
    latent_sd: np.ndarray
    latent_hpd: np.ndarray
    eta_mean: np.ndarray
    fitted: np.ndarray
    criteria: dict
    cpo: np.ndarray
    diagnostics: dict

    def beta_index(self, name: str) -> int:
        return self.latent_names.index(name)

    def to_json(self) -> str:
        payload = {
            "family": self.family,
            "method": self.method,
            "theta_names": list(self.theta_names),
            "hyper_points": [
                {"theta": list(hp.theta), "log_post": hp.log_post,
                 "weight": hp.weight} for hp in self.hyper_points],
            "hyper_summary": dict(self.hyper_summary),
            "latent_names": list(self.latent_names),
            "latent_mean": self.latent_mean.tolist(),
            "latent_sd": self.latent_sd.tolist(),
            "latent_hpd": self.latent_hpd.tolist(),
            "eta_mean": self.eta_mean.tolist(),
            "fitted": self.fitted.tolist(),
            "criteria": dict(self.criteria),
            "cpo": self.cpo.tolist(),
            "diagnostics": self.diagnostics,
        }
        return json.dumps(payload, indent=2)

    @staticmethod
    def from_json(text: str) -> "FitResult":
        data = json.loads(text)
        return FitResult(
            family=data["family"], method=data["method"],
            theta_names=tuple(data["theta_names"]),
            hyper_points=tuple(
                HyperPoint(theta=tuple(hp["theta"]),
                           log_post=hp["log_post"], weight=hp["weight"])
                for hp in data["hyper_points"]),
            hyper_summary=data["hyper_summary"],
            latent_names=tuple(data["latent_names"]),
            latent_mean=np.array(data["latent_mean"]),
            latent_sd=np.array(data["latent_sd"]),
            latent_hpd=np.array(data["latent_hpd"]),
            eta_mean=np.array(data["eta_mean"]),
            fitted=np.array(data["fitted"]),
            criteria=data["criteria"],
            cpo=np.array(data["cpo"]),
            diagnostics=data["diagnostics"])

    def summaries_equal(self, other: "FitResult") -> bool:
        return self.to_json() == other.to_json()


def _hyper_summary(spec, ws, grid) -> dict:
    names = theta_names(ws.spec)
    out = {}
    if not names:
        return out
    thetas = np.array([hp.theta for hp in grid])
    weights = np.array([hp.weight for hp in grid])
    for j, name in enumerate(names):
        out[name] = float(weights @ np.exp(thetas[:, j]))
        out[f"log_{name}_mean"] = float(weights @ thetas[:, j])
    return out


def _criteria_logliks(spec, ws, records):
    """Sigma-point log-likelihood matrix and weights for criteria."""
    off = ws.spec.offset_vector()
    rows, wts = [], []
    for rec in records:
        parts = dict(zip(theta_names(ws.spec), rec.theta))
        for node, gw in zip(_GH_NODES, _GH_WEIGHTS):
            eta_t = off + rec.eta_mean + node * rec.eta_sd
            ll, _, _ = _loglik_terms(spec, ws, eta_t, parts)
            rows.append(ll)
            wts.append(rec.weight * gw)
    return np.array(rows), np.array(wts)


def _assemble_result(spec: ModelSpec, grid, warm=None) -> FitResult:
    ws = _workspace(spec)
    records = _conditional_records(spec, grid, warm=warm)
    weights = np.array([r.weight for r in records])
    psi_means = np.array([r.psi_mean for r in records])
    psi_sds = np.array([r.psi_sd for r in records])
    eta_means = np.array([r.eta_mean for r in records])
    eta_sds = np.array([r.eta_sd for r in records])

    latent_mean, latent_sd = _mixture_moments(psi_means, psi_sds, weights)
    eta_mean, _ = _mixture_moments(eta_means, eta_sds, weights)
    sds_safe = np.maximum(psi_sds, 1e-12)
    hpd_lo, hpd_hi = _hpd_batch(psi_means, sds_safe, weights, 0.95)
    latent_hpd = np.column_stack([hpd_lo, hpd_hi])

    hyper = _hyper_summary(spec, ws, grid)
    off = ws.spec.offset_vector()
    eta_hat_total = off + eta_mean
    fitted = fitted_means(ws.spec, eta_hat_total, hyper)

    logliks, llw = _criteria_logliks(spec, ws, records)
    parts_hat = {}
    names = theta_names(ws.spec)
    if names:
        parts_hat = {name: float(hyper[f"log_{name}_mean"])
                     for name in names}
    ll_hat, _, _ = _loglik_terms(spec, ws, eta_hat_total, parts_hat)
    dic, p_dic = criteria_mod.compute_dic(logliks, llw, float(np.sum(ll_hat)))
    waic, p_waic = criteria_mod.compute_waic(logliks, llw)
    cpo, log_score = criteria_mod.compute_cpo_ls(logliks, llw)
    mspe = criteria_mod.compute_mspe(ws.spec.y, fitted)

    diagnostics = {
        "newton_iterations": [int(r.iterations) for r in records],
        "grad_norms": [float(r.grad_norm) for r in records],
        "n_grid": len(records),
        "splus_tau_noise": [float(s.tau_noise) for s in ws.stage1],
    }
    return FitResult(
        family=spec.family, method=spec.method,
        theta_names=names,
        hyper_points=tuple(grid), hyper_summary=hyper,
        latent_names=ws.latent_names,
        latent_mean=latent_mean, latent_sd=latent_sd,
        latent_hpd=latent_hpd, eta_mean=eta_mean, fitted=fitted,
        criteria={"dic": float(dic), "p_dic": float(p_dic),
                  "waic": float(waic), "p_waic": float(p_waic),
                  "log_score": float(log_score), "mspe": float(mspe)},
        cpo=cpo, diagnostics=diagnostics)


def fit(spec: ModelSpec) -> FitResult:
    """Full nested-Laplace fit: hypergrid, marginals, criteria."""
    grid = explore_hypergrid(spec)
    return _assemble_result(spec, grid)
