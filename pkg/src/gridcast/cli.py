"""Command line interface.

Subcommands::

    gridcast simulate --out DIR [--seed N] ...
    gridcast fit      --data DIR --out DIR [--family F] [--hour H] [--window TD] [--date D]
    gridcast predict  --data DIR --params DIR --out FILE [--date D]
    gridcast grid     --data DIR --params DIR --out DIR [--cov-model K]
    gridcast verify   --data DIR --out DIR [--holdout 50x10] [--seed N] [--cov-models acd]

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import pipeline
from .dataio import (
    COVARIATE_FILE,
    RunConfig,
    fmt,
    load_dataset,
    read_csv,
    read_grid,
    write_csv,
    write_dataset,
    write_grid,
)
from .distributions import Family
from .emos import DEFAULT_WINDOW, EmosModel, LocalParams, RegionalParams
from .errors import DataError, DomainError, GridcastError, NumericalError, OutOfBoundsError, ParameterError
from .geostat import CovKind
from .simulate import SimulationConfig, simulate

log = logging.getLogger("gridcast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

LOCAL_FILE = "local_params.csv"
REGIONAL_FILE = "regional_params.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


def _family(text: str) -> Family:
    try:
        return Family.parse(text)
    except (ValueError, ParameterError):
        raise argparse.ArgumentTypeError(f"unknown family {text!r}") from None


def _kind(text: str) -> CovKind:
    try:
        return CovKind(text.lower())
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown covariance model {text!r}") from None


def _kinds(text: str) -> List[CovKind]:
    parts = [p for p in text.replace(",", "") if not p.isspace()]
    if not parts:
        raise argparse.ArgumentTypeError("no covariance models given")
    return [_kind(p) for p in parts]


def _holdout(text: str):
    try:
        size, reps = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"holdout must look like 50x10, got {text!r}") from None
    if size < 1 or reps < 0:
        raise argparse.ArgumentTypeError("holdout size must be positive")
    return size, reps


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridcast", description="Gridded EMOS wind-speed calibration.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic dataset with known truth")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stations", type=int, default=SimulationConfig.n_stations)
    p.add_argument("--days", type=int, default=SimulationConfig.n_days)
    p.add_argument("--members", type=int, default=SimulationConfig.n_members)
    p.add_argument("--family", type=_family, default=Family.parse(SimulationConfig.family))
    p.add_argument("--start", type=_date, default=_date(SimulationConfig.start_date))
    p.add_argument("--hours", type=int, nargs="+", default=list(SimulationConfig.hours))
    p.add_argument("--drift", type=float, default=SimulationConfig.drift_amplitude,
                   help="amplitude of the seasonal drift in the additive bias")

    def common(p, params=False):
        p.add_argument("--data", type=Path, required=True, help="dataset directory")
        if params:
            p.add_argument("--params", type=Path, required=True, help="output directory of `fit`")
        p.add_argument("--min-days", type=int, default=200,
                       help="minimum observed days per calendar year (default 200)")

    p = sub.add_parser("fit", help="fit EMOS parameters for one forecast day")
    common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--family", type=_family, default=Family.TRUNC_LOGISTIC)
    p.add_argument("--hour", type=int, default=18)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--date", type=_date, help="forecast date (default: last date in the data)")
    p.add_argument("--no-regional", action="store_true", help="keep uniform weights, c = 1, d = 0")

    p = sub.add_parser("predict", help="station predictive parameters from fitted EMOS")
    common(p, params=True)
    p.add_argument("--out", type=Path, required=True, help="output CSV file")
    p.add_argument("--date", type=_date, help="forecast date (default: the fit date)")

    p = sub.add_parser("grid", help="interpolate predictive parameters to the covariate grid")
    common(p, params=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--cov-model", type=_kind, default=CovKind.D)
    p.add_argument("--date", type=_date, help="forecast date (default: the fit date)")

    p = sub.add_parser("verify", help="holdout verification report")
    common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--holdout", type=_holdout, default=(50, 10), help="SIZExREPS (default 50x10)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cov-models", type=_kinds, default=[CovKind.A, CovKind.B, CovKind.C, CovKind.D])
    p.add_argument("--family", type=_family, default=Family.TRUNC_LOGISTIC)
    p.add_argument("--hour", type=int, default=18)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--start", type=_date)
    p.add_argument("--end", type=_date)
    p.add_argument("--min-distance", type=float, default=20.0,
                   help="minimum distance between held-out stations in km")
    p.add_argument("--no-regional", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# Fitted-parameter files
# ---------------------------------------------------------------------------


def write_model(out_dir: Path, model: EmosModel, date) -> None:
    write_csv(
        out_dir / LOCAL_FILE,
        ["station_id", "a", "b", "xi2"],
        ([p.station_id, float(p.a), float(p.b), float(p.xi2)] for p in model.local.values()),
    )
    reg = model.regional
    rows = [
        ["family", model.family.value],
        ["hour", model.hour],
        ["window", model.training_window_days],
        ["date", str(date)],
        ["c", float(reg.c)],
        ["d", float(reg.d)],
    ]
    rows += [[f"w{k + 1}", float(w)] for k, w in enumerate(reg.weights)]
    rows += [["skipped", s] for s in model.diagnostics.get("skipped", [])]
    write_csv(out_dir / REGIONAL_FILE, ["name", "value"], rows)


def read_model(params_dir: Path):
    """Fitted model and its forecast date from a `fit` output directory."""
    _, lrows = read_csv(params_dir / LOCAL_FILE)
    local = {}
    for line, row in lrows:
        try:
            sid, a, b, xi2 = row[0], float(row[1]), float(row[2]), float(row[3])
        except (ValueError, IndexError):
            raise DataError(f"{params_dir / LOCAL_FILE}:{line}: malformed row") from None
        local[sid] = LocalParams(sid, a, b, xi2)
    _, rrows = read_csv(params_dir / REGIONAL_FILE)
    meta, weights, skipped = {}, [], []
    for line, row in rrows:
        if len(row) != 2:
            raise DataError(f"{params_dir / REGIONAL_FILE}:{line}: malformed row")
        name, value = row
        if name.startswith("w") and name[1:].isdigit():
            weights.append(float(value))
        elif name == "skipped":
            skipped.append(value)
        else:
            meta[name] = value
    try:
        regional = RegionalParams(np.array(weights), float(meta["c"]), float(meta["d"]))
        model = EmosModel(
            Family.parse(meta["family"]), int(meta["hour"]), int(meta["window"]), local, regional,
            {"skipped": skipped},
        )
        date = dt.date.fromisoformat(meta["date"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{params_dir / REGIONAL_FILE}: invalid parameter file ({exc})") from None
    return model, date


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _load(args):
    config = RunConfig(data_dir=args.data, min_days_per_year=args.min_days)
    return load_dataset(args.data, config)


def _pick_date(ds, date):
    if date is None:
        if ds.dates.size == 0:
            raise DataError("dataset has no dates")
        return ds.dates[-1].item()
    return date


def cmd_simulate(args) -> int:
    cfg = SimulationConfig(
        n_stations=args.stations,
        n_days=args.days,
        n_members=args.members,
        family=args.family.value,
        start_date=args.start.isoformat(),
        hours=tuple(args.hours),
        drift_amplitude=args.drift,
    )
    sim = simulate(cfg, seed=args.seed)
    write_dataset(sim.dataset, args.out, sim.covariate)
    truth = sim.truth
    write_csv(
        args.out / "truth_local.csv",
        ["station_id", "a", "b", "xi2"],
        ([p.station_id, p.a, p.b, p.xi2] for p in truth.local.values()),
    )
    reg = truth.regional
    write_csv(
        args.out / "truth_regional.csv",
        ["name", "value"],
        [["c", float(reg.c)], ["d", float(reg.d)]] + [[f"w{k + 1}", float(w)] for k, w in enumerate(reg.weights)],
    )
    return EXIT_OK


def cmd_fit(args) -> int:
    ds = _load(args)
    date = _pick_date(ds, args.date)
    model = pipeline.fit_day(ds, date, args.hour, args.family, args.window, regional=not args.no_regional)
    if not model.local:
        raise DataError(f"no station has enough training data before {date}")
    write_model(args.out, model, date)
    log.info("fitted %d stations, skipped %d", len(model.local), len(model.diagnostics["skipped"]))
    return EXIT_OK


def cmd_predict(args) -> int:
    ds = _load(args)
    model, fit_date = read_model(args.params)
    date = args.date or fit_date
    preds = pipeline.station_predictions(model, ds, date, model.hour)
    write_csv(
        args.out,
        ["station_id", "date", "hour", "family", "mu", "sigma2"],
        (
            [s, str(date), model.hour, model.family.value, float(m), float(v)]
            for s, m, v in zip(preds.station_ids, preds.mu, preds.sigma2)
        ),
    )
    return EXIT_OK


def cmd_grid(args) -> int:
    ds = _load(args)
    cov_path = args.data / COVARIATE_FILE
    if not cov_path.exists():
        raise DataError(f"{cov_path}: covariate grid not found")
    covariate = read_grid(cov_path, positive=True)
    model, fit_date = read_model(args.params)
    date = args.date or fit_date
    out = pipeline.grid_day(model, ds, date, model.hour, covariate, args.cov_model)
    for name, key in (("mean.gcg", "mu_hat"), ("krigvar.gcg", "krig_var_mu"), ("variance.gcg", "sigma_tilde2")):
        write_grid(args.out / name, covariate.with_values(out[key].ravel()))
    rows = []
    for field_name in ("mu", "logsigma"):
        cm = out[f"{field_name}_model"]
        rows += [[field_name, cm.kind.value, f"theta{i + 1}", float(t)] for i, t in enumerate(cm.theta)]
    write_csv(args.out / "cov_params.csv", ["field", "kind", "name", "value"], rows)
    flagged = np.flatnonzero(out["clamped"].ravel())
    xs, ys = covariate.node_coords()
    write_csv(
        args.out / "grid_flags.csv",
        ["node", "x", "y", "flag"],
        ([int(i), float(xs[i]), float(ys[i]), "mu_clamped"] for i in flagged),
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    ds = _load(args)
    size, reps = args.holdout
    dates = pipeline.verification_dates(ds, args.window, args.start, args.end)
    if dates.size == 0:
        raise DataError("no verification dates with a full training window")
    report = pipeline.run_holdout_experiment(
        ds,
        args.family,
        args.hour,
        dates,
        cov_kinds=args.cov_models,
        holdout_size=size,
        holdout_reps=reps,
        seed=args.seed,
        td=args.window,
        min_distance=args.min_distance,
        regional=not args.no_regional,
    )
    report.write(args.out)
    skipped = [[h, s, n] for (s, h), n in sorted(report.skipped.items(), key=lambda kv: (kv[0][1], kv[0][0]))]
    write_csv(args.out / "skipped.csv", ["hour", "station_set", "n_skipped"], skipped)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "grid": cmd_grid,
    "verify": cmd_verify,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, DomainError, OutOfBoundsError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA
    except (ParameterError, ValueError, GridcastError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
