"""Daily fit, interpolation and holdout-verification workflows."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import distributions as dist
from . import emos
from .dataio import CovariateGrid, ForecastDataset
from .distributions import Family
from .emos import EmosModel, LocalParams, RegionalParams, TrainingSet
from .errors import NumericalError
from .geostat import CovarianceModel, CovKind, KrigingField, Site, grid_predictive_arrays, reml_fit
from .verification import ScoredForecast, VerificationReport, build_report, randomized_pit_ensemble, sample_holdout

log = logging.getLogger(__name__)

THREADS_ENV = "GRIDCAST_THREADS"


def n_threads() -> int:
    """Worker count from ``GRIDCAST_THREADS`` (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map(fn, items):
    workers = n_threads()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def training_sets(ds: ForecastDataset, date, hour: int, td: int, station_ids=None) -> List[TrainingSet]:
    ids = ds.station_ids if station_ids is None else list(station_ids)
    return [emos.assemble_training(ds, s, date, hour, td) for s in ids]


def fit_local_all(training: Sequence[TrainingSet], family) -> Dict[str, LocalParams]:
    """Local fits for every training set; skipped stations are left out."""
    fits = _map(lambda t: emos.fit_local(t, family), list(training))
    return {t.station_id: p for t, p in zip(training, fits) if p is not None}


def fit_day(
    ds: ForecastDataset,
    date,
    hour: int,
    family,
    td: int = emos.DEFAULT_WINDOW,
    regional: bool = True,
    station_ids=None,
    local: Optional[Dict[str, LocalParams]] = None,
    training: Optional[Sequence[TrainingSet]] = None,
) -> EmosModel:
    """Two-step EMOS fit for one verification day.

    Precomputed ``local`` fits and ``training`` sets may be passed in; they
    are restricted to ``station_ids``.
    """
    family = Family.parse(family)
    ids = ds.station_ids if station_ids is None else list(station_ids)
    if training is None:
        training = training_sets(ds, date, hour, td, ids)
    else:
        keep = set(ids)
        training = [t for t in training if t.station_id in keep]
    if local is None:
        local = fit_local_all(training, family)
    else:
        local = {s: local[s] for s in ids if s in local}
    skipped = [s for s in ids if s not in local]
    if regional and local:
        reg = emos.fit_regional(training, local, family)
    else:
        reg = RegionalParams.simplified(ds.n_members)
    return EmosModel(family, int(hour), td, local, reg, {"skipped": skipped})


@dataclass
class StationPredictions:
    """Predictive parameters at fitted stations for one day."""

    station_ids: List[str]
    mu: np.ndarray
    sigma2: np.ndarray


def station_predictions(model: EmosModel, ds: ForecastDataset, date, hour: int, station_ids=None) -> StationPredictions:
    """(mu, sigma2) at stations with local parameters and a complete ensemble."""
    ids = ds.station_ids if station_ids is None else list(station_ids)
    ids = [s for s in ids if s in model.local]
    di = ds.date_index(date)
    if di < 0 or not ids:
        return StationPredictions([], np.empty(0), np.empty(0))
    hi = ds.hour_index(hour)
    f = ds.forecasts[hi, di, [ds.station_index(s) for s in ids], :]
    ok = np.all(np.isfinite(f), axis=1)
    ids = [s for s, k in zip(ids, ok) if k]
    mu, s2 = model.predictive_params(ids, f[ok])
    if model.family is Family.GAMMA:
        mu = np.maximum(mu, emos.EPS)
    return StationPredictions(ids, mu, s2)


def interpolation_fields(sites: Sequence[Site], mu, sigma2, kind=None):
    """The ``mu`` and ``logsigma`` kriging fields of one day."""
    mu_field = KrigingField("mu", list(sites), np.asarray(mu, dtype=float))
    ls_field = KrigingField("logsigma", list(sites), 0.5 * np.log(np.asarray(sigma2, dtype=float)))
    return mu_field, ls_field


def fit_fields(mu_field: KrigingField, ls_field: KrigingField, kind):
    """REML-fit the same covariance kind independently to both fields."""
    kind = CovKind(kind)
    models = _map(lambda f: reml_fit(f, kind), [mu_field, ls_field])
    return mu_field.with_model(models[0]), ls_field.with_model(models[1])


def grid_targets(grid: CovariateGrid) -> List[Site]:
    xs, ys = grid.node_coords()
    w = grid.array.ravel()
    return [Site(f"g{i}", float(x), float(y), float(v)) for i, (x, y, v) in enumerate(zip(xs.ravel(), ys.ravel(), w))]


def grid_day(
    model: EmosModel,
    ds: ForecastDataset,
    date,
    hour: int,
    covariate: CovariateGrid,
    kind=CovKind.D,
) -> dict:
    """Gridded predictive parameters over the covariate grid nodes.

    Returns the arrays of :func:`~gridcast.geostat.grid_predictive_arrays`
    reshaped to the grid, plus the fitted covariance models.
    """
    preds = station_predictions(model, ds, date, hour)
    sites = [ds.stations[ds.station_index(s)] for s in preds.station_ids]
    mu_field, ls_field = fit_fields(*interpolation_fields(sites, preds.mu, preds.sigma2), kind)
    out = grid_predictive_arrays(mu_field, ls_field, grid_targets(covariate))
    shape = (covariate.ny, covariate.nx)
    gridded = {k: np.asarray(v).reshape(shape) for k, v in out.items()}
    gridded["mu_model"] = mu_field.model
    gridded["logsigma_model"] = ls_field.model
    return gridded


# ---------------------------------------------------------------------------
# Verification experiments
# ---------------------------------------------------------------------------


def _krig_method(kind: CovKind) -> str:
    return f"krig-{kind.value}"


def _score(family, mu, s2, y):
    crps = dist.crps_array(family, mu, s2, y)
    pit = dist.cdf_array(family, mu, s2, y)
    return crps, pit


def verification_dates(ds: ForecastDataset, td: int, start=None, end=None) -> np.ndarray:
    """Dates with a full training window inside the dataset, clipped to [start, end]."""
    dates = ds.dates
    if dates.size == 0:
        return dates
    first = dates[0] + np.timedelta64(td, "D")
    sel = dates >= first
    if start is not None:
        sel &= dates >= np.datetime64(start, "D")
    if end is not None:
        sel &= dates <= np.datetime64(end, "D")
    return dates[sel]


def run_holdout_experiment(
    ds: ForecastDataset,
    family,
    hour: int,
    dates: Iterable,
    cov_kinds: Sequence = (CovKind.A, CovKind.C, CovKind.D),
    holdout_size: int = 50,
    holdout_reps: int = 10,
    seed: int = 0,
    td: int = emos.DEFAULT_WINDOW,
    min_distance: float = 20.0,
    regional: bool = True,
    include_all: bool = True,
) -> VerificationReport:
    """Leave-out verification of station calibration and its interpolation.

    Replicate ``r`` withholds ``holdout_size`` stations; the regional step
    and the kriging fields use the retained stations only.  Held-out
    stations are scored with the raw ensemble, their own local calibration
    (using the replicate's regional parameters) and every interpolation
    model in ``cov_kinds``.  With ``include_all`` the in-sample comparison
    of raw ensemble and EMOS at every station is added as station set
    ``all``.
    """
    family = Family.parse(family)
    kinds = [CovKind(k) for k in cov_kinds]
    rng = np.random.default_rng(seed)
    holdouts = [
        sample_holdout(ds.stations, holdout_size, rng, min_distance) for _ in range(holdout_reps)
    ] if holdout_reps > 0 else []
    pit_rng = np.random.default_rng([seed, 1])
    hi = ds.hour_index(hour)
    records: List[ScoredForecast] = []
    methods: Dict[str, List[str]] = {}
    if include_all:
        methods["all"] = ["raw", f"emos-{family.value}"]
    for r in range(len(holdouts)):
        methods[str(r + 1)] = ["raw", "local"] + [_krig_method(k) for k in kinds]

    for date in dates:
        date = np.datetime64(date, "D")
        di = ds.date_index(date)
        if di < 0:
            continue
        y_all = ds.observations[hi, di]
        f_all = ds.forecasts[hi, di]
        training = training_sets(ds, date, hour, td)
        local = fit_local_all(training, family)
        dstr = str(date)

        def emit(sset, sids, method, crps, pit):
            for s, c, p in zip(sids, crps, pit):
                records.append(ScoredForecast(sset, s, dstr, int(hour), method, float(c), float(p)))

        def raw(sset, sids):
            idx = [ds.station_index(s) for s in sids]
            y = y_all[idx]
            f = f_all[idx]
            ok = np.isfinite(y) & np.all(np.isfinite(f), axis=1)
            if not ok.any():
                return
            crps = dist.crps_ensemble_array(f[ok], y[ok])
            pit = randomized_pit_ensemble(f[ok], y[ok], pit_rng)
            emit(sset, [s for s, k in zip(sids, ok) if k], "raw", crps, pit)

        def observed(preds: StationPredictions):
            y = y_all[[ds.station_index(s) for s in preds.station_ids]]
            return y, np.isfinite(y)

        if include_all:
            model = fit_day(ds, date, hour, family, td, regional, local=local, training=training)
            raw("all", ds.station_ids)
            preds = station_predictions(model, ds, date, hour)
            y, ok = observed(preds)
            crps, pit = _score(family, preds.mu[ok], preds.sigma2[ok], y[ok])
            emit("all", [s for s, k in zip(preds.station_ids, ok) if k], f"emos-{family.value}", crps, pit)

        for r, held in enumerate(holdouts):
            sset = str(r + 1)
            held_set = set(held)
            retained = [s for s in ds.station_ids if s not in held_set]
            try:
                model = fit_day(ds, date, hour, family, td, regional, retained, local, training)
            except NumericalError as exc:
                log.warning("%s replicate %s: regional fit failed: %s", dstr, sset, exc)
                continue
            raw(sset, held)
            # held-out stations scored with their own calibration
            own = EmosModel(family, model.hour, td, {s: local[s] for s in held if s in local}, model.regional)
            preds = station_predictions(own, ds, date, hour, held)
            y, ok = observed(preds)
            crps, pit = _score(family, preds.mu[ok], preds.sigma2[ok], y[ok])
            emit(sset, [s for s, k in zip(preds.station_ids, ok) if k], "local", crps, pit)

            fitted = station_predictions(model, ds, date, hour, retained)
            sites = [ds.stations[ds.station_index(s)] for s in fitted.station_ids]
            targets_ids = [s for s in held if np.isfinite(y_all[ds.station_index(s)])]
            targets = [ds.stations[ds.station_index(s)] for s in targets_ids]
            if not targets or len(sites) < 3:
                continue
            y_t = y_all[[ds.station_index(s) for s in targets_ids]]
            fields = interpolation_fields(sites, fitted.mu, fitted.sigma2)
            for kind in kinds:
                try:
                    out = grid_predictive_arrays(*fit_fields(*fields, kind), targets)
                except NumericalError as exc:
                    log.warning("%s replicate %s kind %s: %s", dstr, sset, kind.value, exc)
                    continue
                crps, pit = _score(family, out["mu_hat"], out["sigma_tilde2"], y_t)
                emit(sset, targets_ids, _krig_method(kind), crps, pit)
    return build_report(records, methods)


def crps_by_window(
    ds: ForecastDataset,
    family,
    hour: int,
    windows: Sequence[int],
    dates: Iterable,
    regional: bool = True,
) -> Dict[int, dict]:
    """Mean CRPS of station EMOS forecasts for several training-window lengths.

    Averages use the matched sample of station-days forecast under every
    window.  Returns per window the mean, its standard error and the
    per-forecast scores.
    """
    family = Family.parse(family)
    hi = ds.hour_index(hour)
    scores: Dict[int, Dict[tuple, float]] = {int(w): {} for w in windows}
    for date in dates:
        date = np.datetime64(date, "D")
        di = ds.date_index(date)
        if di < 0:
            continue
        y_all = ds.observations[hi, di]
        for td in scores:
            model = fit_day(ds, date, hour, family, td, regional)
            preds = station_predictions(model, ds, date, hour)
            y = y_all[[ds.station_index(s) for s in preds.station_ids]]
            ok = np.isfinite(y)
            crps = dist.crps_array(family, preds.mu[ok], preds.sigma2[ok], y[ok])
            for s, c in zip([s for s, k in zip(preds.station_ids, ok) if k], crps):
                scores[td][(str(date), s)] = float(c)
    common = set.intersection(*(set(v) for v in scores.values())) if scores else set()
    keys = sorted(common)
    out = {}
    for td, sc in scores.items():
        vals = np.array([sc[k] for k in keys])
        out[td] = {
            "n": int(vals.size),
            "mean_crps": float(vals.mean()) if vals.size else float("nan"),
            "se_crps": float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else float("nan"),
            "scores": vals,
        }
    return out
