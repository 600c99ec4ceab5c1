"""Does WAIC detect the dispersion family?  Depends what you pair it with.

Data: over-dispersed counts (gamma-count, alpha = 0.5) on a 192-region
map, five independent replications.  On each we compare the gamma-count
and Poisson families twice:

1. as plain log-linear regressions (method "none") -- the only thing
   differing between the paired fits is the count likelihood;
2. as spatial models with a free autoregressive field per region
   (method "ps").

The first pairing isolates the question and answers it loudly: the
Poisson likelihood has no way to account for variance above the mean,
so its WAIC collapses.  The second pairing muddies it: a free field
can absorb extra-Poisson variation region by region (at these modest
count sizes the effective-parameter penalty does not fully charge for
the chase), so the margin shrinks and occasionally flips.  A model
comparison meant to select the observation family should not hand one
side a per-observation sponge.

Run from the repository root:  python3 demos/03_model_selection.py
Takes about a minute (ten plain fits, ten spatial fits).
"""

import numpy as np

from gcspatial import lgm, simstudy


def fit_waic(family, method, config, data):
    kwargs = dict(family=family, y=data.y, X=data.design, intercept=True,
                  covariate_names=("x1", "x2"))
    if method == "none":
        spec = lgm.ModelSpec(method="none", **kwargs)
    else:
        cfg = simstudy.ScenarioConfig(name=config.name, alpha=config.alpha,
                                      tau_x=config.tau_x, family=family)
        spec = simstudy.build_model_spec(cfg, data, method)
    return float(lgm.fit(spec).criteria["waic"])


def main():
    config = simstudy.ScenarioConfig(name="demo-selection", alpha=0.5,
                                     tau_x=11.0)
    reps = range(5)

    print("=" * 72)
    print("WAIC, gamma-count vs Poisson (lower is better; "
          "delta = gc - poisson)")
    print("=" * 72)
    print("            --- plain regression ---      --- with free "
          "field ---")
    print("  rep        gc   poisson     delta        gc   poisson"
          "     delta")
    wins = {"none": 0, "ps": 0}
    for rep in reps:
        data = simstudy.generate_replication(config, rep, base_seed=0)
        row = []
        for method in ("none", "ps"):
            wg = fit_waic("gc", method, config, data)
            wp = fit_waic("poisson", method, config, data)
            wins[method] += wg < wp
            row.extend([wg, wp, wg - wp])
        print(f"  {rep}      {row[0]:7.1f}  {row[1]:7.1f}  {row[2]:+8.1f}"
              f"    {row[3]:7.1f}  {row[4]:7.1f}  {row[5]:+8.1f}")
    print(f"\n  gamma-count preferred: {wins['none']}/5 (plain), "
          f"{wins['ps']}/5 (free field)")

    print()
    print("=" * 72)
    print("Why the free field blurs the comparison")
    print("=" * 72)
    data = simstudy.generate_replication(config, 0, base_seed=0)
    for family in ("gc", "poisson"):
        cfg = simstudy.ScenarioConfig(name=config.name, alpha=config.alpha,
                                      tau_x=config.tau_x, family=family)
        res = lgm.fit(simstudy.build_model_spec(cfg, data, "ps"))
        tau = res.hyper_summary["tau_spatial"]
        pw = res.criteria["p_waic"]
        print(f"  {family:8s} spatial fit: field precision tau_hat ="
              f" {tau:8.2f},  p_waic = {pw:6.1f}")
    print("\n  The Poisson fit drops the field precision (a rougher,"
          "\n  larger-variance field) and runs up a far larger"
          " effective\n  parameter count: the field is doing the"
          " dispersion's job.\n  The gamma-count fit leaves that job to"
          " its likelihood, where\n  a single shape parameter covers"
          " it.")


if __name__ == "__main__":
    main()
