"""Command-line interface for fitting models and running studies.

Subcommands
-----------
``fit``
    Fit one model to a regional count dataset.  Inputs: a region CSV
    with header ``id,y,expected,<covariate...>`` (``expected`` is
    optional and defaults to 1), an adjacency edge-list file for the
    graph-based methods, a centroid CSV ``id,x,y`` for the methods
    that need coordinates, and a JSON model configuration.  Outputs,
    under ``--out``: the full fit as JSON, a one-row criteria CSV, and
    a per-region posterior-summary CSV for external plotting.
``simulate``
    Run a replication study (optionally restricted with ``--scenarios``
    filters) and write the aggregated report, the per-fit records, and
    a flat summary table under ``--out``.
``gcdist``
    Print the gamma-count probability table for fixed parameters.

Every command is bit-reproducible: ``fit`` and ``gcdist`` involve no
randomness at all, and ``simulate`` derives every stream from
``--seed``.  Environment overrides: ``GCSPATIAL_JOBS`` (default worker
count) and ``GCSPATIAL_LOG`` (log level).

Exit codes: 0 success; 2 malformed or inconsistent input (files,
configuration, model validation); 3 fit or study did not converge;
4 unexpected internal error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import lgm, simstudy
from .gcdist import GcParams, gc_pmf
from .graph import read_adjacency, read_centroids, snap_to_lattice

__all__ = ["main", "read_dataset", "Dataset", "CliInputError",
           "EXIT_OK", "EXIT_INPUT", "EXIT_CONVERGENCE", "EXIT_INTERNAL"]

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3
EXIT_INTERNAL = 4

_RESERVED_COLUMNS = ("id", "y", "expected", "intercept")

log = logging.getLogger("gcspatial")


class CliInputError(Exception):
    """Malformed or inconsistent command input (maps to exit code 2)."""


# --------------------------------------------------------------------------
# dataset file


@dataclasses.dataclass(frozen=True)
class Dataset:
    """Parsed region CSV: ids in file order, responses, exposure
    totals, and named covariate columns."""

    ids: tuple
    y: np.ndarray
    expected: np.ndarray
    covariates: dict

    @property
    def n(self) -> int:
        return len(self.ids)


def read_dataset(path) -> Dataset:
    """Read a region CSV with header ``id,y,expected,<covariate...>``.

    The ``expected`` column is optional (default 1).  Responses must be
    nonnegative integers and expected values strictly positive; errors
    name the offending line.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CliInputError(f"cannot read dataset {path}: {exc}") from exc
    rows = [(i + 1, r) for i, r in enumerate(rows)
            if any(field.strip() for field in r)]
    if not rows:
        raise CliInputError(f"{path}: empty dataset file")
    _, header = rows[0]
    header = [h.strip() for h in header]
    if len(header) < 2 or header[0] != "id" or header[1] != "y":
        raise CliInputError(
            f"{path} line 1: header must start with 'id,y', got "
            f"{','.join(header)!r}")
    has_expected = len(header) > 2 and header[2] == "expected"
    cov_names = header[3:] if has_expected else header[2:]
    seen = set()
    for name in cov_names:
        if not name:
            raise CliInputError(f"{path} line 1: empty covariate name")
        if name in _RESERVED_COLUMNS:
            raise CliInputError(
                f"{path} line 1: column name {name!r} is reserved")
        if name in seen:
            raise CliInputError(
                f"{path} line 1: duplicate column name {name!r}")
        seen.add(name)

    ids, id_lines = [], {}
    y, expected = [], []
    covs = {name: [] for name in cov_names}
    for lineno, row in rows[1:]:
        if len(row) != len(header):
            raise CliInputError(
                f"{path} line {lineno}: expected {len(header)} fields, "
                f"got {len(row)}")
        row = [field.strip() for field in row]
        rid = row[0]
        if not rid:
            raise CliInputError(f"{path} line {lineno}: empty region id")
        if rid in id_lines:
            raise CliInputError(
                f"{path} line {lineno}: duplicate id {rid!r} "
                f"(first seen on line {id_lines[rid]})")
        id_lines[rid] = lineno
        ids.append(rid)
        y.append(_parse_count(path, lineno, "y", row[1]))
        if has_expected:
            expected.append(
                _parse_positive(path, lineno, "expected", row[2]))
            values = row[3:]
        else:
            expected.append(1.0)
            values = row[2:]
        for name, field in zip(cov_names, values):
            covs[name].append(_parse_float(path, lineno, name, field))
    if not ids:
        raise CliInputError(f"{path}: no data rows")
    return Dataset(ids=tuple(ids),
                   y=np.array(y, dtype=float),
                   expected=np.array(expected, dtype=float),
                   covariates={k: np.array(v) for k, v in covs.items()})


def _parse_float(path, lineno, col, text) -> float:
    try:
        value = float(text)
    except ValueError:
        raise CliInputError(
            f"{path} line {lineno}: {col} value {text!r} is not a "
            "number") from None
    if not math.isfinite(value):
        raise CliInputError(
            f"{path} line {lineno}: {col} value {text!r} is not finite")
    return value


def _parse_count(path, lineno, col, text) -> float:
    value = _parse_float(path, lineno, col, text)
    if value < 0 or value != round(value):
        raise CliInputError(
            f"{path} line {lineno}: {col} must be a nonnegative "
            f"integer, got {text!r}")
    return value


def _parse_positive(path, lineno, col, text) -> float:
    value = _parse_float(path, lineno, col, text)
    if value <= 0:
        raise CliInputError(
            f"{path} line {lineno}: {col} must be > 0, got {text!r}")
    return value


def _ordered_centroids(path, dataset: Dataset) -> np.ndarray:
    """Centroid coordinates reordered to dataset id order; every id
    mismatch in either direction is listed."""
    try:
        cent_ids, coords = read_centroids(path)
    except OSError as exc:
        raise CliInputError(f"cannot read centroids {path}: {exc}") from exc
    except ValueError as exc:
        raise CliInputError(f"{path}: {exc}") from exc
    dupes = sorted({i for i in cent_ids if cent_ids.count(i) > 1})
    if dupes:
        raise CliInputError(f"{path}: duplicate centroid ids: "
                            + ", ".join(dupes))
    have = dict(zip(cent_ids, coords))
    missing = [i for i in dataset.ids if i not in have]
    extra = [i for i in cent_ids if i not in set(dataset.ids)]
    if missing or extra:
        parts = []
        if missing:
            parts.append("dataset ids without centroids: "
                         + ", ".join(missing))
        if extra:
            parts.append("centroid ids not in dataset: "
                         + ", ".join(extra))
        raise CliInputError(f"{path}: id mismatch; " + "; ".join(parts))
    return np.array([have[i] for i in dataset.ids])


# --------------------------------------------------------------------------
# fit command


_FIT_CONFIG_KEYS = ("family", "method", "covariates", "intercept",
                    "offset", "lattice", "confounded", "priors")


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliInputError(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliInputError(f"{path}: invalid JSON ({exc})") from exc


def _load_fit_config(path) -> dict:
    raw = _load_json(path, "model configuration")
    if not isinstance(raw, dict):
        raise CliInputError(f"{path}: model configuration must be a "
                            "JSON object")
    unknown = sorted(set(raw) - set(_FIT_CONFIG_KEYS))
    if unknown:
        raise CliInputError(
            f"{path}: unknown configuration keys: {', '.join(unknown)}; "
            f"known keys: {', '.join(_FIT_CONFIG_KEYS)}")
    for key in ("family", "method"):
        if key not in raw:
            raise CliInputError(f"{path}: missing required key {key!r}")
    config = {"covariates": None, "intercept": True, "offset": "expected",
              "lattice": [20, 20], "confounded": None, "priors": {}}
    config.update(raw)
    if config["offset"] not in ("expected", "none"):
        raise CliInputError(f"{path}: offset must be 'expected' or "
                            f"'none', got {config['offset']!r}")
    lat = config["lattice"]
    if (not isinstance(lat, (list, tuple)) or len(lat) != 2
            or any(not isinstance(v, int) or v < 1 for v in lat)):
        raise CliInputError(f"{path}: lattice must be a pair of "
                            "positive integers")
    prior_fields = {f.name for f in dataclasses.fields(lgm.PriorSpec)}
    bad = sorted(set(config["priors"]) - prior_fields)
    if bad:
        raise CliInputError(
            f"{path}: unknown prior settings: {', '.join(bad)}; "
            f"known: {', '.join(sorted(prior_fields))}")
    return config


def _select_covariates(dataset: Dataset, config, config_path):
    names = config["covariates"]
    if names is None:
        names = list(dataset.covariates)
    unknown = [n for n in names if n not in dataset.covariates]
    if unknown:
        available = ", ".join(dataset.covariates) or "(none)"
        raise CliInputError(
            f"{config_path}: unknown covariates: {', '.join(unknown)}; "
            f"dataset provides: {available}")
    X = (np.column_stack([dataset.covariates[n] for n in names])
         if names else np.empty((dataset.n, 0)))
    return X, tuple(names)


def _build_spatial(method, args, config, dataset: Dataset):
    """Spatial structure (or None) plus spatial+ column indices."""
    if method in ("ps", "rhz", "spock"):
        if not args.adjacency:
            raise CliInputError(
                f"method {method!r} needs --adjacency")
        try:
            graph = read_adjacency(args.adjacency, n=dataset.n)
        except OSError as exc:
            raise CliInputError(
                f"cannot read adjacency {args.adjacency}: {exc}") from exc
        except ValueError as exc:
            raise CliInputError(f"{args.adjacency}: {exc}") from exc
        if method == "spock":
            if not args.centroids:
                raise CliInputError("method 'spock' needs --centroids")
            coords = _ordered_centroids(args.centroids, dataset)
            graph = graph.with_centroids(coords)
        return graph
    if method in ("nps", "splus"):
        if not args.centroids:
            raise CliInputError(f"method {method!r} needs --centroids")
        coords = _ordered_centroids(args.centroids, dataset)
        try:
            return snap_to_lattice(coords, tuple(config["lattice"]))
        except ValueError as exc:
            raise CliInputError(f"{args.centroids}: {exc}") from exc
    return None


def _confounded_indices(config, names, config_path):
    chosen = config["confounded"]
    if chosen is None:
        return tuple(range(len(names)))
    unknown = [c for c in chosen if c not in names]
    if unknown:
        raise CliInputError(
            f"{config_path}: confounded names not among the fitted "
            f"covariates: {', '.join(unknown)}")
    return tuple(names.index(c) for c in chosen)


def cmd_fit(args) -> int:
    dataset = read_dataset(args.data)
    config = _load_fit_config(args.config)
    X, names = _select_covariates(dataset, config, args.config)
    method = config["method"]
    spatial = _build_spatial(method, args, config, dataset)
    confounded = (_confounded_indices(config, names, args.config)
                  if method == "splus" else ())
    offset = (np.log(dataset.expected)
              if config["offset"] == "expected" else None)
    spec = lgm.ModelSpec(
        family=config["family"], method=method, y=dataset.y, X=X,
        intercept=bool(config["intercept"]), offset=offset,
        spatial=spatial, priors=lgm.PriorSpec(**config["priors"]),
        confounded_cols=confounded, covariate_names=names)
    log.info("fitting %s/%s to %d regions", spec.family, method, dataset.n)
    result = lgm.fit(spec)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fit.json").write_text(result.to_json())
    _write_criteria_csv(out / "criteria.csv", result, dataset.n)
    _write_regions_csv(out / "regions.csv", dataset, result)
    crit = result.criteria
    hyper = ", ".join(f"{k}={v:.4g}" for k, v in
                      sorted(result.hyper_summary.items())
                      if not k.startswith("log_"))
    print(f"fit {result.family}/{result.method} to {dataset.n} regions: "
          f"waic={crit['waic']:.3f} dic={crit['dic']:.3f} "
          f"log_score={crit['log_score']:.3f} | {hyper}")
    print(f"wrote {out / 'fit.json'}, {out / 'criteria.csv'}, "
          f"{out / 'regions.csv'}")
    return EXIT_OK


_CRITERIA_COLS = ("dic", "p_dic", "waic", "p_waic", "log_score", "mspe")


def _write_criteria_csv(path, result, n) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "method", "n", *_CRITERIA_COLS])
        w.writerow([result.family, result.method, n,
                    *(result.criteria[c] for c in _CRITERIA_COLS)])


def _write_regions_csv(path, dataset: Dataset, result) -> None:
    """Per-region posterior summaries for external plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "y", "expected", "eta_mean", "fitted",
                    "rel_risk"])
        for i, rid in enumerate(dataset.ids):
            fitted = result.fitted[i]
            w.writerow([rid, dataset.y[i], dataset.expected[i],
                        result.eta_mean[i], fitted,
                        fitted / dataset.expected[i]])


# --------------------------------------------------------------------------
# simulate command


_STUDY_CONFIG_KEYS = ("scenarios", "reps", "methods", "base_seed")
_SCENARIO_FIELDS = {f.name for f in
                    dataclasses.fields(simstudy.ScenarioConfig)}


def _load_study_config(path):
    raw = _load_json(path, "study configuration")
    if not isinstance(raw, dict):
        raise CliInputError(f"{path}: study configuration must be a "
                            "JSON object")
    unknown = sorted(set(raw) - set(_STUDY_CONFIG_KEYS))
    if unknown:
        raise CliInputError(
            f"{path}: unknown configuration keys: {', '.join(unknown)}; "
            f"known keys: {', '.join(_STUDY_CONFIG_KEYS)}")
    scenarios = None
    if "scenarios" in raw:
        scenarios = []
        for i, entry in enumerate(raw["scenarios"]):
            if not isinstance(entry, dict):
                raise CliInputError(
                    f"{path}: scenarios[{i}] must be a JSON object")
            bad = sorted(set(entry) - _SCENARIO_FIELDS)
            if bad:
                raise CliInputError(
                    f"{path}: scenarios[{i}] has unknown settings: "
                    f"{', '.join(bad)}")
            try:
                scenarios.append(simstudy.ScenarioConfig(**entry))
            except (TypeError, ValueError) as exc:
                raise CliInputError(
                    f"{path}: scenarios[{i}]: {exc}") from exc
    return scenarios, raw.get("reps"), raw.get("methods"), \
        raw.get("base_seed")


def _parse_scenario_filter(text):
    """Parse one ``key=value[,key=value...]`` scenario selector."""
    allowed = ("name", "alpha", "tau_x", "family")
    clauses = {}
    for part in text.split(","):
        if "=" not in part:
            raise CliInputError(
                f"bad --scenarios clause {part!r}; expected key=value")
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in allowed:
            raise CliInputError(
                f"unknown --scenarios key {key!r}; "
                f"choose from {', '.join(allowed)}")
        if key in ("alpha", "tau_x"):
            try:
                value = float(value)
            except ValueError:
                raise CliInputError(
                    f"--scenarios {key} needs a number, got "
                    f"{value!r}") from None
        else:
            value = value.strip()
        clauses[key] = value
    return clauses


def _filter_scenarios(scenarios, selectors):
    if not selectors:
        return list(scenarios)

    def matches(scen, clauses):
        for key, want in clauses.items():
            have = getattr(scen, key)
            ok = (math.isclose(have, want) if isinstance(want, float)
                  else have == want)
            if not ok:
                return False
        return True

    chosen, seen = [], set()
    for text in selectors:
        clauses = _parse_scenario_filter(text)
        hits = [s for s in scenarios if matches(s, clauses)]
        if not hits:
            raise CliInputError(
                f"--scenarios {text!r} matches no scenario; available: "
                + ", ".join(s.name for s in scenarios))
        for s in hits:
            if s.name not in seen:
                seen.add(s.name)
                chosen.append(s)
    return chosen


def cmd_simulate(args) -> int:
    scenarios, reps, methods, base_seed = None, None, None, None
    if args.config:
        scenarios, reps, methods, base_seed = _load_study_config(
            args.config)
    if scenarios is None:
        scenarios = simstudy.default_scenarios()
    scenarios = _filter_scenarios(scenarios, args.scenarios)
    if args.reps is not None:
        reps = args.reps
    if reps is None:
        reps = 50
    if args.seed is not None:
        base_seed = args.seed
    if base_seed is None:
        base_seed = 0
    if methods is None:
        methods = simstudy.DEFAULT_METHODS
    jobs = args.jobs if args.jobs is not None else _env_jobs()
    log.info("running %d scenario(s) x %d rep(s) x %d method(s), "
             "%d worker(s)", len(scenarios), reps, len(methods), jobs)
    try:
        report = simstudy.run_study(scenarios, reps=reps,
                                    base_seed=base_seed, jobs=jobs,
                                    methods=tuple(methods))
    except ValueError as exc:
        raise CliInputError(str(exc)) from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    simstudy.write_records_csv(report.records, out / "records.csv")
    _write_summary_csv(out / "summary.csv", report)
    for scen in report.summary:
        for method, agg in report.summary[scen].items():
            mse = agg.get("mse")
            shown = ("mse=" + "/".join(f"{v:.4g}" for v in mse)
                     if mse is not None else "all fits failed")
            print(f"{scen} {method}: {agg['n_fits']} fits "
                  f"({agg['n_failed']} failed), {shown}")
    print(f"wrote {out / 'report.json'}, {out / 'records.csv'}, "
          f"{out / 'summary.csv'}")
    return EXIT_OK


def _write_summary_csv(path, report) -> None:
    """Flatten scenario -> method -> aggregates into one table."""
    rows = []
    for scen, per_method in report.summary.items():
        for method, agg in per_method.items():
            row = {"scenario": scen, "method": method,
                   "n_fits": agg["n_fits"], "n_failed": agg["n_failed"]}
            for key in ("rel_bias", "mse", "coverage"):
                for j, v in enumerate(agg.get(key, []), start=1):
                    row[f"{key}{j}"] = v
            row["mean_alpha_hat"] = agg.get("mean_alpha_hat")
            row["mean_seconds"] = agg.get("mean_seconds")
            rows.append(row)
    pd.DataFrame(rows).to_csv(path, index=False)


# --------------------------------------------------------------------------
# gcdist command


def cmd_gcdist(args) -> int:
    try:
        params = GcParams(alpha=args.alpha, gamma_rate=args.gamma)
    except ValueError as exc:
        raise CliInputError(str(exc)) from exc
    ys = np.arange(args.max_y + 1)
    pmf = gc_pmf(params, ys)
    print("y,pmf")
    for k, p in zip(ys, pmf):
        print(f"{k},{p:.12g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing and dispatch


def _env_jobs() -> int:
    raw = os.environ.get("GCSPATIAL_JOBS", "")
    if not raw:
        return 1
    try:
        jobs = int(raw)
    except ValueError:
        raise CliInputError(
            f"GCSPATIAL_JOBS must be an integer, got {raw!r}") from None
    if jobs < 1:
        raise CliInputError("GCSPATIAL_JOBS must be >= 1")
    return jobs


def _nonneg_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _positive_int(text):
    value = _nonneg_int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _positive_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number")
    if not (math.isfinite(value) and value > 0):
        raise argparse.ArgumentTypeError("must be a positive number")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcspatial",
        description="Bayesian spatial regression for dispersed counts.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser(
        "fit", help="fit one model to a regional dataset")
    p_fit.add_argument("--data", required=True,
                       help="region CSV: id,y,expected,<covariate...>")
    p_fit.add_argument("--config", required=True,
                       help="model configuration JSON")
    p_fit.add_argument("--out", required=True,
                       help="output directory")
    p_fit.add_argument("--adjacency",
                       help="edge list, one 'i j' pair per line "
                            "(graph-based methods)")
    p_fit.add_argument("--centroids",
                       help="centroid CSV id,x,y (coordinate-based "
                            "methods)")
    p_fit.add_argument("--seed", type=_nonneg_int, default=0,
                       help="accepted for interface uniformity; "
                            "fitting is deterministic")
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser(
        "simulate", help="run a replication study")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--config", help="study configuration JSON")
    p_sim.add_argument("--reps", type=_positive_int,
                       help="replications per scenario (default 50)")
    p_sim.add_argument("--jobs", type=_positive_int,
                       help="worker processes (default "
                            "$GCSPATIAL_JOBS or 1)")
    p_sim.add_argument("--seed", type=_nonneg_int,
                       help="base seed for all streams (default 0)")
    p_sim.add_argument("--scenarios", action="append", default=[],
                       metavar="KEY=VALUE[,KEY=VALUE...]",
                       help="restrict to matching scenarios, e.g. "
                            "'alpha=1,tau_x=11'; repeatable")
    p_sim.set_defaults(func=cmd_simulate)

    p_pmf = sub.add_parser(
        "gcdist", help="print a gamma-count probability table")
    p_pmf.add_argument("alpha", type=_positive_float,
                       help="dispersion parameter")
    p_pmf.add_argument("gamma", type=_positive_float,
                       help="waiting-time rate")
    p_pmf.add_argument("max_y", type=_nonneg_int,
                       help="largest count to tabulate")
    p_pmf.add_argument("--seed", type=_nonneg_int, default=0,
                       help="accepted for interface uniformity; "
                            "the table is deterministic")
    p_pmf.set_defaults(func=cmd_gcdist)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("GCSPATIAL_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (lgm.NonConvergenceError, simstudy.StudyFailureError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (CliInputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:  # pragma: no cover - defensive catch-all
        log.exception("internal error")
        print("internal error (set GCSPATIAL_LOG=DEBUG for details)",
              file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
