"""Bayesian spatial regression for over- and under-dispersed counts.

The package provides:

- ``gcdist``: the gamma-count distribution (pmf, mean, sampling,
  derivatives of the log pmf with respect to the linear predictor);
- ``graph``: adjacency structures, intrinsic autoregressive and
  thin-plate lattice precision matrices;
- ``deconfound``: restricted spatial regression, projected-centroid
  graph reconstruction, and two-stage residualization, the three
  strategies for separating fixed effects from spatial confounding;
- ``lgm``: a nested-Laplace inference engine for latent Gaussian
  models with gamma-count, Poisson, or Gaussian observations;
- ``criteria``: DIC, WAIC, pseudo-marginal (CPO) and squared-error
  model comparison scores;
- ``simstudy``: a replication harness measuring bias, coverage, and
  error of the deconfounding strategies under controlled confounding;
- ``cli``: the ``gcspatial`` command-line entry point.
"""

from . import gcdist, graph, deconfound, lgm, criteria, simstudy

__all__ = ["gcdist", "graph", "deconfound", "lgm", "criteria", "simstudy"]
__version__ = "0.1.0"
