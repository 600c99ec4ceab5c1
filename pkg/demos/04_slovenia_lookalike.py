"""A synthetic stand-in for the classic Slovenian stomach-cancer data.

The benchmark dataset for spatially confounded disease mapping --
municipality-level stomach-cancer counts with expected cases and a
socioeconomic score -- is not redistributable, so this demo builds a
synthetic dataset with the same shape and file formats, then runs the
command-line interface on it end to end.

Files produced under demos/output/lookalike/:

- data.csv       id,y,expected,se_score   (one row per region)
- adjacency.txt  one "i j" pair of 0-based region indices per edge
- centroids.csv  id,x,y planar coordinates

These are exactly the formats the ``gcspatial fit`` command consumes;
with the real files in place of the synthetic ones the same commands
reproduce the benchmark analysis.  The acceptance suite's anchor test
(tests/test_acceptance.py, criterion 10) runs automatically against a
directory of real files named like the above when the environment
variable GCSPATIAL_SLOVENIA_DIR points at it.

Synthetic truth: gamma-count counts with alpha = 0.55 (over-dispersed),
log relative risk = -0.2 * se_score + field, and a score built to be
negatively correlated with the field -- the confounding that makes the
free-field fit ambivalent about the score while restricted fits keep
its effect.

Run from the repository root:  python3 demos/04_slovenia_lookalike.py
Takes about half a minute (two full fits through the CLI).
"""

import csv
import json
import pathlib

import numpy as np

from gcspatial import cli, simstudy
from gcspatial.gcdist import sample_renewal_counts
from gcspatial.graph import rook_lattice
from gcspatial.lgm import FitResult

OUT = pathlib.Path(__file__).resolve().parent / "output" / "lookalike"

ALPHA = 0.55
BETA_SE = -0.2
TAU_FIELD = 3.33


def build_dataset(rng):
    graph = rook_lattice(12, 16)
    n = graph.n
    phi = simstudy.sample_icar_field(graph, TAU_FIELD, rng)
    se_score = -0.8 * phi + rng.normal(0.0, np.sqrt(1.0 / 11.0), n)
    expected = np.exp(rng.normal(np.log(20.0), 0.5, n))
    eta = BETA_SE * se_score + phi
    rates = ALPHA * expected * np.exp(eta)
    y = sample_renewal_counts(ALPHA, rates, rng)
    return graph, phi, se_score, expected, y


def write_files(graph, se_score, expected, y):
    OUT.mkdir(parents=True, exist_ok=True)
    ids = [f"M{i + 1:03d}" for i in range(graph.n)]
    with open(OUT / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "y", "expected", "se_score"])
        for i, rid in enumerate(ids):
            w.writerow([rid, int(y[i]), f"{expected[i]:.6f}",
                        f"{se_score[i]:.6f}"])
    with open(OUT / "adjacency.txt", "w") as fh:
        for i, j in graph.edge_list():
            fh.write(f"{i} {j}\n")
    with open(OUT / "centroids.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y"])
        for i, rid in enumerate(ids):
            w.writerow([rid, graph.centroids[i, 0], graph.centroids[i, 1]])


def run_fit(method):
    config = {"family": "gc", "method": method, "offset": "expected"}
    cfg_path = OUT / f"model_{method}.json"
    cfg_path.write_text(json.dumps(config, indent=2))
    out_dir = OUT / f"fit_{method}"
    code = cli.main([
        "fit", "--data", str(OUT / "data.csv"),
        "--adjacency", str(OUT / "adjacency.txt"),
        "--config", str(cfg_path), "--out", str(out_dir)])
    assert code == 0, f"fit exited with {code}"
    return FitResult.from_json((out_dir / "fit.json").read_text())


def main():
    rng = np.random.default_rng(20240719)
    graph, phi, se_score, expected, y = build_dataset(rng)
    write_files(graph, se_score, expected, y)

    print("=" * 72)
    print("Synthetic municipality data written to", OUT)
    print("=" * 72)
    print(f"  regions: {graph.n}   edges: {len(graph.edge_list())}")
    print(f"  counts: min {y.min()}, median {np.median(y):.0f}, "
          f"max {y.max()}   (expected cases ~lognormal, mean "
          f"{expected.mean():.1f})")
    print(f"  corr(se_score, field): "
          f"{np.corrcoef(se_score, phi)[0, 1]:+.3f}")
    design = np.column_stack([np.ones(graph.n), se_score])
    beta_star = BETA_SE + np.linalg.lstsq(design, phi, rcond=None)[0][1]
    print(f"  truth: alpha = {ALPHA}, score coefficient = {BETA_SE}")
    print(f"  adjusted coefficient on this map (score's share of the"
          f" realized field\n  folded in, the target of the restricted"
          f" fits): {beta_star:+.4f}")

    print()
    print("=" * 72)
    print("CLI fits (gcspatial fit --data ... --adjacency ... "
          "--config ...)")
    print("=" * 72)
    rows = []
    for method in ("ps", "rhz"):
        res = run_fit(method)
        k = res.beta_index("se_score")
        lo, hi = res.latent_hpd[k]
        rows.append((method, res.hyper_summary["alpha"],
                     res.latent_mean[k], lo, hi))
    print("\n  method   alpha_hat   se_coef     95% HPD")
    for method, a, b, lo, hi in rows:
        tag = "excludes 0" if (lo > 0 or hi < 0) else "includes 0"
        print(f"  {method:6s}   {a:7.4f}   {b:+8.4f}   [{lo:+.4f},"
              f" {hi:+.4f}]  {tag}")

    print("\n  The restricted fit pulls the coefficient toward the"
          " adjusted value; both\n  read part of the residual field as"
          " extra count dispersion, so alpha_hat\n  sits below the"
          " sampling truth -- dispersion estimates on confounded maps"
          "\n  are conservative.")
    print("\n  Each fit directory also holds criteria.csv (DIC/WAIC/"
          "log-score/MSPE)\n  and regions.csv (per-region fitted means"
          " and relative risks).")
    print("\n  To run the acceptance anchor against the real data:"
          "\n    GCSPATIAL_SLOVENIA_DIR=/path/to/files python3 -m"
          " pytest\n      tests/test_acceptance.py -k criterion_10")


if __name__ == "__main__":
    main()
