"""Running a small replication study through the library API.

The study harness simulates confounded count maps, fits a set of
deconfounding methods to every replication, and aggregates coefficient
error, relative bias, and interval coverage per (scenario, method)
cell.  Coverage is scored against each method's own target: the
generating coefficients for the free-field fits, the field-adjusted
coefficients for the restricted ones.

This demo keeps things small -- two scenarios on a 6 x 8 map, three
replications, two methods -- so it finishes in well under a minute;
the full-size version (192 regions, 50 replications, all methods) is
what the acceptance suite runs and what the ``gcspatial simulate``
command exposes.

Run from the repository root:  python3 demos/05_replication_study.py
"""

import json
import pathlib

from gcspatial import simstudy

OUT = pathlib.Path(__file__).resolve().parent / "output" / "study"


def main():
    configs = [
        simstudy.ScenarioConfig(name="overdispersed", alpha=0.5,
                                tau_x=11.0, nrows=6, ncols=8),
        simstudy.ScenarioConfig(name="equidispersed", alpha=1.0,
                                tau_x=11.0, nrows=6, ncols=8),
    ]
    report = simstudy.run_study(configs, reps=3, base_seed=0,
                                methods=("ps", "rhz"))

    print("=" * 72)
    print("Per-cell summary (3 replications each -- demonstration "
          "sizes only)")
    print("=" * 72)
    print("  scenario       method   mse(b2)   rel_bias(b2)  "
          "coverage(b2)  alpha_hat")
    for scen in sorted(report.summary):
        for method, cell in sorted(report.summary[scen].items()):
            alpha = cell["mean_alpha_hat"]
            alpha_s = f"{alpha:9.3f}" if alpha == alpha else "      n/a"
            print(f"  {scen:13s}  {method:6s}  {cell['mse'][1]:8.4f}   "
                  f"{cell['rel_bias'][1]:+10.4f}   "
                  f"{cell['coverage'][1]:9.2f}   {alpha_s}")

    print("\n  Even at these tiny sizes the pattern from the full study"
          " shows:\n  the restricted fit tracks its adjusted target"
          " more tightly than the\n  free-field fit tracks the"
          " generating value, and alpha_hat separates\n  the"
          " over-dispersed scenario from the equi-dispersed one.")

    OUT.mkdir(parents=True, exist_ok=True)
    simstudy.write_records_csv(report.records, OUT / "records.csv")
    (OUT / "report.json").write_text(report.to_json())
    print()
    print("=" * 72)
    print("Artifacts")
    print("=" * 72)
    print(f"  {OUT / 'records.csv'}: one row per (scenario, rep,"
          " method) with\n  estimates, targets, squared errors,"
          " coverage flags, alpha_hat, WAIC,\n  and wall time;"
          " aggregate any way the per-cell summary does not.")
    print(f"  {OUT / 'report.json'}: the full report, records and"
          " summary included.")
    rec = report.records[0]
    print(f"\n  First record: scenario={rec.scenario!r} rep={rec.rep}"
          f" method={rec.method!r}\n  beta2_hat={rec.beta_hat[1]:+.4f}"
          f" target2={rec.beta_target[1]:+.4f}"
          f" covered2={rec.covered[1]}")
    n_fail = sum(not r.converged for r in report.records)
    print(f"\n  Failed fits are recorded, not raised ({n_fail} in this"
          " run); the harness\n  aborts only if a cell exceeds a 20%"
          " failure rate.")
    print("\n  The same study runs from the command line:\n"
          "    gcspatial simulate --out study_dir --reps 3"
          " --scenarios alpha=0.5\n  using the built-in full-size"
          " scenario grid.")
    json.loads(report.to_json())  # round-trip sanity


if __name__ == "__main__":
    main()
