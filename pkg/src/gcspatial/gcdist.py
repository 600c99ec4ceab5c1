"""Gamma-count distribution: exact pmf, moments, derivatives and sampling.

The gamma-count law is the count distribution induced by i.i.d.
Gamma(alpha, rate) waiting times between events observed over a window
(0, t].  Writing G(a, x) for the regularized lower incomplete gamma
function (with the convention G(0, x) = 1), the pmf is

    P(Y = y) = G(y * alpha, rate * t) - G((y + 1) * alpha, rate * t)

alpha < 1 gives over-dispersed counts, alpha = 1 recovers the Poisson
distribution with mean rate * t, and alpha > 1 gives under-dispersion.

Regression models link the rate to a linear predictor eta through
rate = alpha * exp(eta), so that alpha = 1 reduces to a log-linear
Poisson model.  The derivative helpers here are written against eta
under that link.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "GcParams",
    "FlatLikelihoodError",
    "SeriesCapError",
    "reg_lower_gamma",
    "gc_pmf",
    "gc_log_pmf",
    "gc_log_pmf_grad",
    "gc_mean",
    "gc_sample",
    "sample_renewal_counts",
    "loglik_eta_terms",
]

# pmf values below this underflow threshold are reported as exactly 0,
# with log-pmf -inf.
PMF_FLOOR = 1e-300
_LOG_FLOOR = math.log(PMF_FLOOR)

# below this, the direct-space difference of incomplete gammas switches
# to the log-space series / continued-fraction route
_DIRECT_SAFE = 1e-250


class FlatLikelihoodError(ValueError):
    """The pmf underflowed; derivative information is unavailable."""


class SeriesCapError(RuntimeError):
    """A series truncation hit its hard cap before reaching tolerance."""


@dataclass(frozen=True)
class GcParams:
    """Parameters of the gamma-count law.

    alpha:      dispersion (shape of the waiting-time gamma), > 0
    gamma_rate: waiting-time rate, > 0
    exposure:   observation window t, > 0 (default 1)
    """

    alpha: float
    gamma_rate: float
    exposure: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "gamma_rate", "exposure"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v!r}")

    @property
    def x(self) -> float:
        """The incomplete-gamma argument rate * exposure."""
        return self.gamma_rate * self.exposure


def reg_lower_gamma(a, x):
    """Regularized lower incomplete gamma G(a, x), with G(0, x) = 1.

    Vectorized; scalars in, scalar out.  Requires a >= 0 and x >= 0,
    both finite.
    """
    a_arr = np.asarray(a, dtype=float)
    x_arr = np.asarray(x, dtype=float)
    if not (np.all(np.isfinite(a_arr)) and np.all(np.isfinite(x_arr))):
        raise ValueError("reg_lower_gamma requires finite inputs")
    if np.any(a_arr < 0) or np.any(x_arr < 0):
        raise ValueError("reg_lower_gamma requires a >= 0 and x >= 0")
    a_b, x_b = np.broadcast_arrays(a_arr, x_arr)
    out = np.empty(a_b.shape, dtype=float)
    zero = a_b == 0
    out[zero] = 1.0
    if np.any(~zero):
        out[~zero] = special.gammainc(a_b[~zero], x_b[~zero])
    if np.isscalar(a) and np.isscalar(x):
        return float(out)
    return out


def _log_lower_series(a: float, x: float) -> float:
    """log G(a, x) by the ascending series; accurate for x < a + 1."""
    if x == 0.0:
        return -np.inf
    # G(a,x) = x^a e^{-x} / Gamma(a+1) * sum_{n>=0} x^n / prod_{m=1..n} (a+m)
    s = 1.0
    c = 1.0
    n = 0
    while True:
        n += 1
        c *= x / (a + n)
        s += c
        if c < s * 1e-17 or n > 10_000:
            break
    return a * math.log(x) - x - special.gammaln(a + 1.0) + math.log(s)


def _log_upper_cf(a: float, x: float) -> float:
    """log of the regularized upper incomplete gamma by Lentz's continued
    fraction; accurate for x > a + 1."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return a * math.log(x) - x - special.gammaln(a) + math.log(h)


def _log_diff_exp(log_hi: float, log_lo: float) -> float:
    """log(exp(log_hi) - exp(log_lo)) for log_hi >= log_lo."""
    d = log_lo - log_hi
    if d >= 0.0:
        return -np.inf
    return log_hi + math.log1p(-math.exp(d))


def _pmf_one(alpha: float, x: float, y: int) -> float:
    """pmf at a single y, choosing the numerically benign tail."""
    b = (y + 1) * alpha
    if y == 0:
        p = special.gammaincc(b, x)
    else:
        a = y * alpha
        pa = special.gammainc(a, x)
        if pa < 0.5:
            p = pa - special.gammainc(b, x)
        else:
            p = special.gammaincc(b, x) - special.gammaincc(a, x)
    return max(float(p), 0.0)


def _log_pmf_one(alpha: float, x: float, y: int) -> float:
    p = _pmf_one(alpha, x, y)
    if p >= _DIRECT_SAFE:
        return math.log(p)
    # deep tail: rebuild the difference from log-space tail evaluations
    a = y * alpha
    b = (y + 1) * alpha
    if y == 0:
        lp = _log_upper_cf(b, x) if x > b + 1.0 else math.log(p) if p > 0 else -np.inf
    elif x < a + 1.0:
        lp = _log_diff_exp(_log_lower_series(a, x), _log_lower_series(b, x))
    elif x > b + 1.0:
        lp = _log_diff_exp(_log_upper_cf(b, x), _log_upper_cf(a, x))
    else:
        # straddling the bulk: the direct difference cannot be this small
        # unless it genuinely underflows
        lp = math.log(p) if p > 0.0 else -np.inf
    return lp if lp >= _LOG_FLOOR else -np.inf


def gc_pmf(params: GcParams, y):
    """P(Y = y) for the gamma-count law. y may be an int or array of ints."""
    x = params.x
    y_arr = np.atleast_1d(np.asarray(y))
    if np.any(y_arr < 0) or not np.issubdtype(y_arr.dtype, np.integer):
        raise ValueError("y must be a nonnegative integer (or array thereof)")
    out = np.array([_pmf_one(params.alpha, x, int(yi)) for yi in y_arr])
    out[out < PMF_FLOOR] = 0.0
    if np.isscalar(y) or np.asarray(y).ndim == 0:
        return float(out[0])
    return out


def gc_log_pmf(params: GcParams, y):
    """log P(Y = y); -inf where the pmf underflows below 1e-300."""
    x = params.x
    y_arr = np.atleast_1d(np.asarray(y))
    if np.any(y_arr < 0) or not np.issubdtype(y_arr.dtype, np.integer):
        raise ValueError("y must be a nonnegative integer (or array thereof)")
    out = np.array([_log_pmf_one(params.alpha, x, int(yi)) for yi in y_arr])
    if np.isscalar(y) or np.asarray(y).ndim == 0:
        return float(out[0])
    return out


def _grad_terms(alpha, x, y, log_f):
    """First and second eta-derivatives of log pmf, given log f.

    Operates on 1-d arrays of equal length.  Uses the closed forms from
    d/dx G(c, x) = x^{c-1} e^{-x} / Gamma(c) and the chain rule
    dx/deta = x under the rate link x = alpha * exp(eta) * t:

        d1 = x (s_a - s_b)
        d2 = d1 + x ((a-1) s_a - (b-1) s_b) - x d1 - d1^2

    with s_c = x^{c-1} e^{-x} / (Gamma(c) f) and s_a = 0 at y = 0.
    """
    a = y * alpha
    b = (y + 1) * alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        log_gb = (b - 1.0) * np.log(x) - x - special.gammaln(b)
        sb = np.exp(np.minimum(log_gb - log_f, 700.0))
        sa = np.zeros_like(sb)
        pos = y > 0
        if np.any(pos):
            log_ga = (a[pos] - 1.0) * np.log(x[pos]) - x[pos] \
                - special.gammaln(a[pos])
            sa[pos] = np.exp(np.minimum(log_ga - log_f[pos], 700.0))
    d1 = x * (sa - sb)
    d2 = d1 + x * ((a - 1.0) * sa - (b - 1.0) * sb) - x * d1 - d1 * d1
    return d1, d2


def gc_log_pmf_grad(params: GcParams, y: int, eta: float):
    """(d/deta, d2/deta2) of log pmf under the link rate = alpha * exp(eta).

    The rate stored in ``params`` is ignored; it is derived from ``eta``.
    Raises FlatLikelihoodError when the pmf underflows at this eta.
    """
    alpha = params.alpha
    x = alpha * math.exp(eta) * params.exposure
    lf = _log_pmf_one(alpha, x, int(y))
    if not np.isfinite(lf):
        raise FlatLikelihoodError(
            f"pmf underflow at y={y}, eta={eta:.3f} (alpha={alpha:.3f})")
    d1, d2 = _grad_terms(alpha, np.array([x]), np.array([int(y)]),
                         np.array([lf]))
    return float(d1[0]), float(d2[0])


def loglik_eta_terms(alpha: float, y: np.ndarray, eta: np.ndarray,
                     exposure=1.0):
    """Vectorized (log-pmf, d1, d2) against eta for the inference engine.

    Entries where the pmf underflows get log-pmf -inf and zero
    derivatives; the caller is expected to treat those as flat-likelihood
    observations (reject the step / damp).
    """
    y = np.asarray(y)
    eta = np.asarray(eta, dtype=float)
    x = alpha * np.exp(eta) * np.broadcast_to(
        np.asarray(exposure, dtype=float), eta.shape)
    ll = np.array([_log_pmf_one(alpha, float(xi), int(yi))
                   for xi, yi in zip(x, y)])
    ok = np.isfinite(ll)
    d1 = np.zeros_like(eta)
    d2 = np.zeros_like(eta)
    if np.any(ok):
        g1, g2 = _grad_terms(alpha, x[ok], y[ok], ll[ok])
        d1[ok] = g1
        d2[ok] = g2
    return ll, d1, d2


def gc_mean(params: GcParams, tail_tol: float = 1e-10) -> float:
    """E(Y) = sum_{k>=1} G(k * alpha, rate * t), truncated.

    The series is summed until a term drops below ``tail_tol`` (hard cap
    1e6 terms, raising SeriesCapError).
    """
    if not (0.0 < tail_tol <= 1e-4):
        raise ValueError("tail_tol must lie in (0, 1e-4]")
    x = params.x
    total = 0.0
    k0 = 1
    chunk = 256
    while k0 <= 1_000_000:
        ks = np.arange(k0, min(k0 + chunk, 1_000_001), dtype=float)
        terms = special.gammainc(ks * params.alpha, x)
        below = np.flatnonzero(terms < tail_tol)
        if below.size:
            total += float(terms[: below[0]].sum())
            return total
        total += float(terms.sum())
        k0 += chunk
    raise SeriesCapError("gc_mean series exceeded 1e6 terms before reaching tail_tol")


def sample_renewal_counts(alpha: float, rates: np.ndarray,
                          rng: np.random.Generator, exposure=1.0) -> np.ndarray:
    """Count gamma-renewal events in (0, exposure] for each rate.

    Waiting times are Gamma(alpha, rate_i); the count for unit i is the
    number of partial sums that land at or below the exposure window.
    """
    rates = np.asarray(rates, dtype=float)
    n = rates.size
    expo = np.broadcast_to(np.asarray(exposure, dtype=float), rates.shape).ravel()
    scale = 1.0 / rates.ravel()
    totals = np.zeros(n)
    counts = np.zeros(n, dtype=np.int64)
    idx = np.arange(n)
    while idx.size:
        totals[idx] += rng.gamma(alpha, scale[idx])
        alive = totals[idx] <= expo[idx]
        counts[idx[alive]] += 1
        idx = idx[alive]
    return counts.reshape(rates.shape)


def gc_sample(params: GcParams, rng_seed: int, n: int) -> np.ndarray:
    """Draw n gamma-count variates by direct renewal simulation.

    Deterministic given the seed; no shared generator state.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    rates = np.full(n, params.gamma_rate)
    return sample_renewal_counts(params.alpha, rates, rng, params.exposure)
