"""Spatial confounding and three ways to defuse it.

One simulated map, one problem: the covariate x2 was built to be
strongly correlated with the spatial field phi (collinearity between a
fixed effect and the random effect, i.e. spatial confounding).  A model
that lets the field roam freely ("ps") struggles to attribute the
shared variation; the three deconfounding strategies restrict or
rebuild the field so the covariate keeps its explanatory role:

- rhz:   restrict the field to the orthogonal complement of the
         covariates (restricted spatial regression);
- spock: rebuild the neighbourhood graph from centroids projected away
         from the covariate space, so the prior smooths only what the
         covariates cannot explain;
- splus: regress the confounded covariate on the smoothed field first,
         then use its residual (two-stage residualization).

Under confounding, the restricted methods estimate the adjusted
coefficient beta* = beta + (X'X)^-1 X' phi -- the coefficient of the
realized map, field variation along x2 included -- and they estimate it
far more precisely than the free-field model estimates anything.

Run from the repository root:  python3 demos/02_spatial_confounding.py
Takes about half a minute (three full fits on a 192-region map).
"""

import numpy as np

from gcspatial import lgm, simstudy


def main():
    config = simstudy.ScenarioConfig(name="demo-confounded", alpha=0.5,
                                     tau_x=11.0)
    data = simstudy.generate_replication(config, rep=0, base_seed=0)

    print("=" * 72)
    print("The simulated map (12 x 16 lattice, gamma-count alpha = 0.5)")
    print("=" * 72)
    corr = np.corrcoef(data.x2, data.phi)[0, 1]
    print(f"  regions:                 {data.y.size}")
    print(f"  corr(x2, spatial field): {corr:+.3f}   <-- the confounding")
    print(f"  generating coefficients: beta1 = {config.beta[0]:+.2f},"
          f"  beta2 = {config.beta[1]:+.2f}")
    tgt = simstudy.replication_targets(config, data, "rhz")
    print(f"  adjusted coefficients:   beta1* = {tgt[0]:+.4f},"
          f" beta2* = {tgt[1]:+.4f}")
    print("  (beta* folds the realized field's covariate-aligned part"
          " into the slope)")

    print()
    print("=" * 72)
    print("Fits (posterior mean, sd, 95% HPD for the confounded slope x2)")
    print("=" * 72)
    print("  method   beta2_hat     sd     95% HPD            alpha_hat")
    results = {}
    for method in ("ps", "rhz", "spock"):
        spec = simstudy.build_model_spec(config, data, method)
        res = lgm.fit(spec)
        results[method] = res
        k = res.beta_index("x2")
        lo, hi = res.latent_hpd[k]
        print(f"  {method:6s}  {res.latent_mean[k]:+8.4f}"
              f"  {res.latent_sd[k]:6.4f}  [{lo:+.4f}, {hi:+.4f}]"
              f"   {res.hyper_summary['alpha']:.4f}")

    print()
    print("=" * 72)
    print("Reading the table")
    print("=" * 72)
    k = results["ps"].beta_index("x2")
    ps_err = results["ps"].latent_mean[k] - config.beta[1]
    rhz_err = results["rhz"].latent_mean[k] - tgt[1]
    print(f"  free field (ps):    beta2_hat misses the generating value"
          f" by {ps_err:+.3f} --\n"
          f"                      the field cannot tell its own"
          " variation apart from x2's,\n"
          "                      so the slope absorbs a"
          " replication-dependent share of it.")
    print(f"  restricted (rhz):   estimates the adjusted coefficient by"
          f" design and lands\n"
          f"                      {rhz_err:+.4f} from beta2*.")
    print("  spock agrees with rhz despite arriving by a different route"
          "\n  (projected centroids instead of an explicit projection of"
          " the field).")
    print("\n  One map cannot show the variance story: over repeated"
          " maps the free-field\n  slope swings widely around beta2"
          " while the restricted fits stay tight on\n  beta2*, and the"
          " study harness measures exactly that -- see"
          "\n  demos/05_replication_study.py.")


if __name__ == "__main__":
    main()
