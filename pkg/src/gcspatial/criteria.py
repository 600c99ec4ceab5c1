"""Model comparison scores computed from weighted posterior draws.

All functions consume a matrix of per-draw, per-observation
log-likelihoods together with draw weights summing to one.  The engine
produces the draws deterministically as Gauss-Hermite sigma points of
the per-observation posterior predictor (3 points per grid
configuration of the hyperparameters), so every score is reproducible
bit-for-bit; they approximate posterior expectations rather than
Monte-Carlo estimates.

Scores:

- DIC: posterior mean deviance plus effective parameter count
  p_D = mean deviance - deviance at the posterior mean;
- WAIC: -2 (lppd - p_waic) with p_waic the per-observation posterior
  variance of the log-likelihood;
- CPO: leave-one-out predictive ordinate via the harmonic-mean
  identity 1/CPO_i = E[1/lik_i], evaluated in log space; the
  associated log-score is LS = -sum_i log CPO_i (a sum, not a mean);
- MSPE: mean squared difference between observations and fitted means.

Draw log-likelihoods are floored at LOGLIK_FLOOR (-700, roughly the
log of the smallest normal double) before any score is formed: a draw
that assigns an observation probability below e^-700 would otherwise
turn the variance and harmonic-mean terms into inf/NaN, when the
meaningful answer is simply "an extremely poor score".
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "LOGLIK_FLOOR",
    "compute_dic",
    "compute_waic",
    "compute_cpo_ls",
    "compute_mspe",
]

# Smallest admissible draw log-likelihood; see module docstring.
LOGLIK_FLOOR = -700.0


def _check_draws(logliks, weights):
    ll = np.asarray(logliks, dtype=float)
    w = np.asarray(weights, dtype=float)
    if ll.ndim != 2:
        raise ValueError("logliks must be a (draws, observations) matrix")
    if w.shape != (ll.shape[0],):
        raise ValueError("weights must have one entry per draw")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
        raise ValueError("weights must be nonnegative and sum to 1")
    if np.any(np.isnan(ll)):
        raise ValueError("logliks must not contain NaN")
    return np.maximum(ll, LOGLIK_FLOOR), w


def compute_dic(logliks, weights, loglik_at_mean: float):
    """Deviance information criterion from weighted draws.

    ``loglik_at_mean`` is the total log-likelihood at the posterior
    mean configuration.  Returns (dic, p_dic) with
    p_dic = mean deviance - deviance(mean); negative p_dic (possible
    under poor fits) triggers a warning, not an error.
    """
    ll, w = _check_draws(logliks, weights)
    dbar = float(w @ (-2.0 * ll.sum(axis=1)))
    dhat = -2.0 * float(loglik_at_mean)
    p_dic = dbar - dhat
    if p_dic < 0:
        warnings.warn(f"negative effective parameter count p_dic={p_dic:.4g}",
                      RuntimeWarning, stacklevel=2)
    return dbar + p_dic, p_dic


def compute_waic(logliks, weights):
    """Widely applicable information criterion from weighted draws.

    Returns (waic, p_waic) where waic = -2 (lppd - p_waic) and p_waic
    sums the per-observation weighted variances of the log-likelihood.
    """
    ll, w = _check_draws(logliks, weights)
    with np.errstate(divide="ignore"):
        log_w = np.where(w > 0, np.log(np.maximum(w, 1e-300)), -np.inf)
    lppd = float(np.sum(logsumexp(ll + log_w[:, None], axis=0)))
    mean_ll = w @ ll
    var_ll = w @ (ll * ll) - mean_ll * mean_ll
    p_waic = float(np.sum(np.clip(var_ll, 0.0, None)))
    return -2.0 * (lppd - p_waic), p_waic


def compute_cpo_ls(logliks, weights):
    """Conditional predictive ordinates and their negative log score.

    Uses the harmonic-mean identity 1/CPO_i = sum_k w_k / lik_ik,
    evaluated in log space so large negative log-likelihoods cannot
    overflow.  Returns (cpo vector, LS) with LS = -sum_i log CPO_i.
    """
    ll, w = _check_draws(logliks, weights)
    with np.errstate(divide="ignore"):
        log_w = np.where(w > 0, np.log(np.maximum(w, 1e-300)), -np.inf)
    log_inv_cpo = logsumexp(-ll + log_w[:, None], axis=0)
    log_cpo = -log_inv_cpo
    cpo = np.exp(log_cpo)
    log_score = -float(np.sum(log_cpo))
    return cpo, log_score


def compute_mspe(y, fitted) -> float:
    """Mean squared difference between observations and fitted means."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(fitted, dtype=float)
    if y.shape != mu.shape:
        raise ValueError("y and fitted must have equal shapes")
    diff = y - mu
    return float(np.mean(diff * diff))
