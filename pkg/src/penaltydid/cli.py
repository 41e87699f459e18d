"""``penaltydid`` command-line driver.

Subcommands: ``simulate``, ``estimate``, ``dml`` and ``coverage``. Options can
also come from a JSON file (``--config``) whose keys are the long option
names; flags given on the command line win. ``PENALTYDID_SEED`` overrides the
seed from a config file (but not an explicit ``--seed``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 estimation
failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from ._io import atomic_write_csv, atomic_write_json
from .did import EVENT_STUDY_HEADER, CellSkipped, DidConfig, estimate_event_study, event_study_rows
from .dml import (DmlConfig, DmlError, build_did_sample, dml_atet, linear_did, mother_table_from_panel,
                  placebo_reform, shrink_window)
from .forest import DEFAULT_GRID, ForestConfig
from .learners import LearnerSpec
from .panel import build_panel, read_claims_csv, read_units_csv, write_claims_csv, write_units_csv
from .simgen import ConfigError, DgpConfig, calibrated_config, null_config, true_event_effects

log = logging.getLogger("penaltydid")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION = 0, 2, 3, 4
SEED_ENV = "PENALTYDID_SEED"
PRESETS = {"default": DgpConfig, "calibrated": calibrated_config, "null": null_config}
FILTER_FIELDS = {"employed": "employed_at_birth", "subsidy": "subsidy", "cesarean": "cesarean",
                 "birth_year": "birth_year"}

# defaults applied after config-file and flag merging
DEFAULTS = {
    "preset": "default", "dgp": None, "n_units": None, "n_months": None,
    "delta": 9, "event_window": "-24:72", "draws": 999, "outcome": "rx", "filter": None,
    "include_never_treated": False, "window": None, "unbalanced": False, "level": 0.95,
    "multiplier": "rademacher",
    "reform_month": None, "window_months": 3, "placebo": "", "windows": "", "event_year": 1,
    "folds": 5, "trim": 0.02, "trees": 500, "learner": "forest", "linear": False,
    "reps": 200, "workers": None, "reproducible": False,
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class EstimationError(Exception):
    pass


# ----------------------------------------------------------------------------- helpers

def build_version() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def parse_range(text: str, name: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in str(text).split(":"))
    except ValueError:
        raise UsageError(f"--{name} must look like START:END, got {text!r}") from None
    if b < a:
        raise UsageError(f"--{name} is empty: {text!r}")
    return a, b


def parse_int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    text = str(text or "").strip()
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def parse_filter(expr: str | None) -> list[tuple[str, object]]:
    """``employed=true,birth_year=1990`` -> [(attribute, value), ...]."""
    if not expr:
        return []
    out = []
    for part in expr.split(","):
        if "=" not in part:
            raise UsageError(f"filter term {part!r} must be key=value")
        key, val = (s.strip() for s in part.split("=", 1))
        if key not in FILTER_FIELDS:
            raise UsageError(f"unknown filter key {key!r}; choose from {sorted(FILTER_FIELDS)}")
        if key == "birth_year":
            try:
                out.append((FILTER_FIELDS[key], int(val)))
            except ValueError:
                raise UsageError(f"birth_year filter needs an integer, got {val!r}") from None
        else:
            low = val.lower()
            if low not in ("true", "false", "1", "0"):
                raise UsageError(f"filter {key} needs true/false, got {val!r}")
            out.append((FILTER_FIELDS[key], low in ("true", "1")))
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Defaults < config file < flags; the seed env var sits between file and flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        for key, val in file_cfg.items():
            cfg[key.replace("-", "_")] = val
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    for key, val in vars(args).items():
        if key in ("func", "config", "command"):
            continue
        if val is not None:
            cfg[key] = val
    if cfg.get("seed") is None:
        raise UsageError(f"a seed is required (--seed, config file or {SEED_ENV})")
    cfg["seed"] = int(cfg["seed"])
    if cfg.get("workers") is None:
        cfg["workers"] = os.cpu_count() or 1
    if int(cfg["workers"]) < 1:
        raise UsageError("--workers must be >= 1")
    cfg["command"] = args.command
    return cfg


def _require(cfg: dict, *names):
    for name in names:
        if not cfg.get(name):
            raise UsageError(f"--{name.replace('_', '-')} is required")
        if name in ("claims", "units", "dgp") and not Path(cfg[name]).is_file():
            raise UsageError(f"--{name} file not found: {cfg[name]}")


def _out_dir(cfg: dict) -> Path:
    _require(cfg, "out")
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


class Timer:
    def __init__(self):
        self.stages: dict[str, float] = {}

    @contextlib.contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = time.perf_counter() - t0

    def report(self, reproducible: bool) -> dict:
        return {k: (None if reproducible else round(v, 6)) for k, v in self.stages.items()}


def dgp_from(cfg: dict) -> DgpConfig:
    if cfg["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}")
    if cfg.get("dgp"):
        _require(cfg, "dgp")
        dgp = DgpConfig.load(cfg["dgp"])
    else:
        dgp = PRESETS[cfg["preset"]]()
    over = {k: int(cfg[k]) for k in ("n_units", "n_months") if cfg.get(k) is not None}
    if "n_months" in over:
        lo, hi = dgp.cohort_band
        over["cohort_band"] = (min(lo, over["n_months"] - 1), min(hi, over["n_months"]))
    return replace(dgp, seed=cfg["seed"], **over).validate()


def load_panel(cfg: dict, timer: Timer):
    _require(cfg, "claims", "units")
    with timer.stage("read"):
        try:
            claims = read_claims_csv(cfg["claims"])
            units = read_units_csv(cfg["units"])
        except (ValueError, KeyError) as exc:
            raise DataError(str(exc)) from None
    n_read = len(units)
    terms = parse_filter(cfg.get("filter"))
    if terms:
        units = [u for u in units if all(getattr(u, a) == v for a, v in terms)]
        if not units:
            raise DataError(f"filter {cfg['filter']!r} leaves no units")
    if cfg.get("window"):
        window = parse_range(cfg["window"], "window")
    else:
        months = [int(claims.month.max())] if len(claims.month) else []
        months += [u.first_child_month for u in units if u.first_child_month is not None]
        months += [u.enrolled_to for u in units if u.enrolled_to is not None]
        if not months:
            raise DataError("cannot infer the panel window; pass --window")
        window = (0, max(months))
    with timer.stage("panel"):
        try:
            panel = build_panel(claims, units, window, balanced=not cfg["unbalanced"])
        except ValueError as exc:
            raise DataError(str(exc)) from None
    if panel.n_units == 0:
        raise DataError("no units survive panel assembly")
    info = {"n_units_read": n_read, "n_units_subgroup": len(units), "n_units": panel.n_units,
            "window": list(window), "panel_diagnostics": list(panel.diagnostics)}
    return panel, info


# ----------------------------------------------------------------------------- subcommands

def cmd_simulate(cfg: dict) -> int:
    from .simgen import simulate_panel

    out = _out_dir(cfg)
    timer = Timer()
    dgp = dgp_from(cfg)
    with timer.stage("simulate"):
        sim = simulate_panel(dgp)
    with timer.stage("write"):
        write_claims_csv(out / "claims.csv", sim.claims)
        write_units_csv(out / "units.csv", sim.units)
        ts, path = true_event_effects(dgp)
        atomic_write_json(out / "truth.json", {
            "config": dgp.to_json(),
            "event_times": [int(t) for t in ts],
            "theta_es": [float(v) for v in path],
        })
    print(f"simulated {dgp.n_units} units x {dgp.n_months} months -> {out}")
    return EXIT_OK


def did_config(cfg: dict) -> DidConfig:
    if int(cfg["delta"]) < 0:
        raise UsageError("--delta must be >= 0")
    return DidConfig(delta=int(cfg["delta"]), outcome=cfg["outcome"],
                     include_never_treated=bool(cfg["include_never_treated"]))


def cmd_estimate(cfg: dict) -> int:
    out = _out_dir(cfg)
    timer = Timer()
    ew = parse_range(cfg["event_window"], "event-window")
    dcfg = did_config(cfg)
    if int(cfg["draws"]) < 199:
        raise UsageError("--draws must be >= 199")
    panel, info = load_panel(cfg, timer)
    if dcfg.outcome not in panel.outcomes:
        raise UsageError(f"unknown outcome {dcfg.outcome!r}")
    with timer.stage("estimate"):
        try:
            curve, cells = estimate_event_study(panel, dcfg, ew, n_draws=int(cfg["draws"]), seed=cfg["seed"],
                                                level=float(cfg["level"]), multiplier=cfg["multiplier"])
        except CellSkipped as exc:
            raise EstimationError(f"no estimable cells: {exc}") from None
    with timer.stage("write"):
        atomic_write_csv(out / "event_study.csv", EVENT_STUDY_HEADER, event_study_rows(curve))
        atomic_write_json(out / "report.json", {
            "version": build_version(),
            "config": _public(cfg),
            "timings": timer.report(cfg["reproducible"]),
            "sample": info,
            "n_cells": len(cells.effects),
            "skipped_cells": list(cells.skipped),
            "critical_value": curve.critical_value,
            "diagnostics": list(curve.diagnostics),
        })
    print(f"estimated {len(curve.event_times)} event times from {len(cells.effects)} cells "
          f"({len(cells.skipped)} skipped), n={panel.n_units} -> {out}")
    return EXIT_OK


def dml_config(cfg: dict) -> DmlConfig:
    kind = cfg["learner"]
    if kind == "forest":
        spec = LearnerSpec(kind="forest", forest=ForestConfig(n_trees=int(cfg["trees"])), grid=DEFAULT_GRID)
        g_spec, l_spec = spec, spec
    elif kind == "parametric":
        g_spec, l_spec = LearnerSpec(kind="logit"), LearnerSpec(kind="ols")
    else:
        raise UsageError(f"unknown learner {kind!r} (forest or parametric)")
    if int(cfg["folds"]) < 2:
        raise UsageError("--folds must be >= 2")
    if not 0 <= float(cfg["trim"]) < 0.5:
        raise UsageError("--trim must be in [0, 0.5)")
    return DmlConfig(k_folds=int(cfg["folds"]), g_learner=g_spec, l_learner=l_spec,
                     trim=float(cfg["trim"]), seed=cfg["seed"])


def cmd_dml(cfg: dict) -> int:
    out = _out_dir(cfg)
    timer = Timer()
    if cfg.get("reform_month") is None:
        raise UsageError("--reform-month is required")
    reform = int(cfg["reform_month"])
    dcfg = dml_config(cfg)
    placebos = parse_int_list(cfg["placebo"])
    windows = parse_int_list(cfg["windows"])
    w = int(cfg["window_months"])
    year = int(cfg["event_year"])
    panel, info = load_panel(cfg, timer)
    table = mother_table_from_panel(panel, event_years=(year,), outcome=cfg["outcome"])
    result: dict = {"version": build_version(), "config": _public(cfg), "sample": info}
    try:
        with timer.stage("main"):
            sample = build_did_sample(table, reform, w, 0, year)
            main = dml_atet(sample, dcfg)
        result["main"] = {**main.to_json(), "cell_counts": sample.cell_counts()}
        if cfg["linear"]:
            with timer.stage("linear"):
                result["linear_did"] = linear_did(sample)
        blocks = {}
        with timer.stage("placebo"):
            for s in placebos:
                r = placebo_reform(table, reform, s, dcfg, w, year)
                blocks[str(s)] = r.to_json()
        result["placebo"] = blocks
        blocks = {}
        with timer.stage("windows"):
            for wm in windows:
                blocks[str(wm)] = shrink_window(table, reform, wm, dcfg, year, min_cell=1).to_json()
        result["windows"] = blocks
    except DmlError as exc:
        msg = str(exc)
        if "empty" in msg or "cover" in msg or "too small" in msg:
            raise DataError(msg) from None
        raise EstimationError(msg) from None
    result["timings"] = timer.report(cfg["reproducible"])
    atomic_write_json(out / "atet.json", result)
    print(f"ATET {main.theta:.5f} (se {main.se:.5f}), n={main.n} -> {out}")
    return EXIT_OK


def cmd_coverage(cfg: dict) -> int:
    from .simgen import dr_event_study_estimator, monte_carlo_run

    out = _out_dir(cfg)
    timer = Timer()
    dgp = dgp_from(cfg)
    if int(cfg["reps"]) < 2:
        raise UsageError("--reps must be >= 2")
    ew = parse_range(cfg["event_window"], "event-window")
    est = dr_event_study_estimator(did_config(cfg), ew, int(cfg["draws"]))
    with timer.stage("monte_carlo"):
        table = monte_carlo_run(dgp, est, int(cfg["reps"]), cfg["seed"], workers=int(cfg["workers"]))
    if table["n_ok"] == 0:
        raise EstimationError("every replication failed: " + "; ".join(table["failures"][:3]))
    rows = [(t, repr(b), repr(se), repr(r), repr(c), n) for t, b, se, r, c, n in
            zip(table["event_times"], table["bias"], table["bias_mcse"], table["rmse"],
                table["pointwise_coverage"], table["n_per_t"])]
    atomic_write_csv(out / "coverage.csv", ("event_time", "bias", "bias_mcse", "rmse", "pointwise_coverage", "n"),
                     rows)
    atomic_write_json(out / "report.json", {
        "version": build_version(),
        "config": _public(cfg),
        "dgp": dgp.to_json(),
        "timings": timer.report(cfg["reproducible"]),
        "n_reps": table["n_reps"], "n_failed": table["n_failed"], "failures": table["failures"],
        "uniform_coverage": table["uniform_coverage"],
        "uniform_coverage_mcse": table["uniform_coverage_mcse"],
    })
    print(f"uniform coverage {table['uniform_coverage']:.3f} over {table['n_ok']} reps -> {out}")
    return EXIT_OK


def _public(cfg: dict) -> dict:
    """Resolved configuration minus run-environment keys that would break byte-identical reruns."""
    skip = {"workers", "out"}
    return {k: v for k, v in sorted(cfg.items()) if k not in skip}


# ----------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="penaltydid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, inputs: bool):
        sp.add_argument("--config", help="JSON file of option defaults")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help="process-pool size (default: CPU count)")
        sp.add_argument("--reproducible", action="store_true", default=None,
                        help="omit wall-clock timings so reruns are byte-identical")
        sp.add_argument("-v", "--verbose", action="store_true", default=None)
        if inputs:
            sp.add_argument("--claims")
            sp.add_argument("--units")
            sp.add_argument("--window", help="panel calendar window START:END (default: inferred)")
            sp.add_argument("--unbalanced", action="store_true", default=None)
            sp.add_argument("--filter", help="subgroup, e.g. employed=true")
            sp.add_argument("--outcome")

    def dgp_opts(sp):
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--dgp", help="DGP config JSON")
        sp.add_argument("--n-units", type=int)
        sp.add_argument("--n-months", type=int)

    def did_opts(sp):
        sp.add_argument("--delta", type=int)
        sp.add_argument("--event-window", help="START:END event times")
        sp.add_argument("--draws", type=int)
        sp.add_argument("--include-never-treated", action="store_true", default=None)

    s = sub.add_parser("simulate", help="write claims.csv, units.csv and truth.json")
    common(s, inputs=False)
    dgp_opts(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", help="event study with uniform bands")
    common(s, inputs=True)
    did_opts(s)
    s.add_argument("--level", type=float)
    s.add_argument("--multiplier", choices=("rademacher", "mammen"))
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("dml", help="cross-fitted ATET around a reform date")
    common(s, inputs=True)
    s.add_argument("--reform-month", type=int)
    s.add_argument("--window-months", type=int)
    s.add_argument("--event-year", type=int)
    s.add_argument("--placebo", help="comma-separated shifts in months, e.g. 3,6")
    s.add_argument("--windows", help="comma-separated narrower windows, e.g. 1")
    s.add_argument("--folds", type=int)
    s.add_argument("--trim", type=float)
    s.add_argument("--trees", type=int)
    s.add_argument("--learner", choices=("forest", "parametric"))
    s.add_argument("--linear", action="store_true", default=None, help="also report the linear DiD")
    s.set_defaults(func=cmd_dml)

    s = sub.add_parser("coverage", help="Monte Carlo bias and band coverage")
    common(s, inputs=False)
    dgp_opts(s)
    did_opts(s)
    s.add_argument("--reps", type=int)
    s.set_defaults(func=cmd_coverage)
    return p


RANGE_OPTIONS = ("--event-window", "--window")


def _glue_ranges(argv: list[str]) -> list[str]:
    """``--event-window -24:36`` -> ``--event-window=-24:36`` so argparse does not
    mistake a negative range for an option."""
    out, i = [], 0
    while i < len(argv):
        if argv[i] in RANGE_OPTIONS and i + 1 < len(argv) and argv[i + 1].startswith("-") and ":" in argv[i + 1]:
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(_glue_ranges(list(sys.argv[1:] if argv is None else argv)))
    func = args.func
    verbose = args.verbose
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        cfg.pop("verbose", None)
        return func(cfg)
    except (UsageError, ConfigError) as exc:
        print(f"penaltydid: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"penaltydid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EstimationError as exc:
        print(f"penaltydid: estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
