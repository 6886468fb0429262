"""Scores and calibration diagnostics.

Per-forecast scores are collected as :class:`ScoredForecast` records, one
per (station set, station, date, hour, method).  :func:`build_report`
aggregates them over the *matched sample*: a station-day enters the
averages only if every compared method produced a forecast for it.
"""

from __future__ import annotations

import datetime as dt
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import distributions as dist
from .dataio import write_csv
from .errors import DomainError
from .geostat import Site


@dataclass(frozen=True)
class PitSample:
    station_id: str
    date: dt.date
    hour: int
    pit: float

    def __post_init__(self):
        if not 0.0 <= self.pit <= 1.0:
            raise DomainError(f"PIT value {self.pit!r} outside [0, 1]")


@dataclass(frozen=True)
class PitSummary:
    station_id: str
    n: int
    pit_mean: float
    pit_mad: float


def pit(d: dist.PredictiveDistribution, y: float) -> float:
    """Probability integral transform F(y)."""
    if not math.isfinite(y) or y < 0:
        raise DomainError(f"observation must be a nonnegative wind speed, got {y!r}")
    return dist.cdf(d, y)


def randomized_pit_ensemble(members, y, rng: np.random.Generator):
    """Randomized PIT of raw ensembles; ``members`` has shape (n, m).

    The observation's rank among the m + 1 values is drawn uniformly over
    its tie range and then spread uniformly over the rank's cell, giving
    ``U(r_lo / (m + 1), (r_hi + 1) / (m + 1))`` with ``r_lo``, ``r_hi`` the
    member counts strictly below and at or below ``y``.
    """
    f = np.atleast_2d(np.asarray(members, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    m = f.shape[1]
    below = np.sum(f < y[:, None], axis=1)
    at_or_below = np.sum(f <= y[:, None], axis=1)
    return (below + rng.random(y.size) * (at_or_below - below + 1)) / (m + 1)


def pit_summary(samples, station_id: str = "all") -> PitSummary:
    """Mean PIT and mean absolute deviation of the PIT from 0.5.

    ``samples`` may be :class:`PitSample` records or plain PIT values.
    """
    values = np.array([s.pit if isinstance(s, PitSample) else s for s in samples], dtype=float)
    if values.size == 0:
        raise DomainError("PIT summary of an empty sample")
    if isinstance(samples, Sequence) and samples and isinstance(samples[0], PitSample):
        ids = {s.station_id for s in samples}
        if len(ids) == 1:
            station_id = next(iter(ids))
    return PitSummary(
        station_id,
        int(values.size),
        float(values.mean()),
        float(np.abs(values - 0.5).mean()),
    )


def average_crps(pairs) -> float:
    """Arithmetic mean CRPS over forecast-observation pairs.

    Each pair is ``(forecast, y)`` where the forecast is a
    :class:`~gridcast.distributions.PredictiveDistribution`, an array of
    ensemble members or an already computed CRPS value (float).
    """
    scores = []
    for fc, y in pairs:
        if isinstance(fc, dist.PredictiveDistribution):
            scores.append(dist.crps(fc, y))
        elif np.ndim(fc) == 0 and y is None:
            scores.append(float(fc))
        else:
            scores.append(dist.crps_ensemble(fc, y))
    if not scores:
        raise DomainError("average CRPS of an empty sample")
    return float(np.mean(scores))


def sample_holdout(
    sites: Sequence[Site],
    size: int,
    rng: np.random.Generator,
    min_distance: float = 20.0,
    max_tries: int = 1000,
) -> List[str]:
    """Random holdout set whose members are at least ``min_distance`` km apart.

    Candidates are drawn in random order and rejected if they fall too
    close to an already selected station; the whole draw is repeated if the
    set cannot be completed.
    """
    if size > len(sites):
        raise ValueError(f"cannot hold out {size} of {len(sites)} stations")
    xy = np.array([[s.x, s.y] for s in sites])
    for _ in range(max_tries):
        chosen: List[int] = []
        for i in rng.permutation(len(sites)):
            if chosen and np.min(np.hypot(*(xy[chosen] - xy[i]).T)) < min_distance:
                continue
            chosen.append(int(i))
            if len(chosen) == size:
                return [sites[j].id for j in sorted(chosen)]
    raise ValueError(
        f"could not place {size} holdout stations at least {min_distance} km apart"
    )


class ScoredForecast(NamedTuple):
    station_set: str
    station_id: str
    date: str
    hour: int
    method: str
    crps: float
    pit: float


@dataclass
class VerificationReport:
    rows: List[dict]
    station_rows: List[dict]
    pit_rows: List[ScoredForecast]
    pit_summaries: List[dict]
    skipped: Dict[Tuple[str, int], int] = field(default_factory=dict)

    REPORT_COLUMNS = (
        "hour", "station_set", "method", "n", "mean_crps", "se_crps", "pit_mean", "pit_mad", "n_skipped",
    )

    def table(self, station_set: Optional[str] = None, hour: Optional[int] = None) -> Dict[str, dict]:
        """Report rows keyed by method, optionally filtered."""
        return {
            r["method"]: r
            for r in self.rows
            if (station_set is None or r["station_set"] == station_set)
            and (hour is None or r["hour"] == hour)
        }

    def write(self, out_dir) -> List[Path]:
        out = Path(out_dir)
        paths = [
            out / "report.csv",
            out / "station_crps.csv",
            out / "pit.csv",
            out / "pit_summary.csv",
        ]
        write_csv(paths[0], self.REPORT_COLUMNS, ([r[c] for c in self.REPORT_COLUMNS] for r in self.rows))
        scols = ("hour", "station_set", "station_id", "method", "n", "mean_crps")
        write_csv(paths[1], scols, ([r[c] for c in scols] for r in self.station_rows))
        pcols = ("station_set", "station_id", "date", "hour", "method", "pit")
        write_csv(paths[2], pcols, ([getattr(r, c) for c in pcols] for r in self.pit_rows))
        qcols = ("hour", "station_set", "station_id", "method", "n", "pit_mean", "pit_mad")
        write_csv(paths[3], qcols, ([r[c] for c in qcols] for r in self.pit_summaries))
        return paths


def _set_order(name: str):
    return (0, 0, name) if not name.isdigit() else (1, int(name), name)


def build_report(records: Iterable[ScoredForecast], methods: Optional[Dict[str, Sequence[str]]] = None) -> VerificationReport:
    """Aggregate scored forecasts into a matched-sample report.

    ``methods`` maps each station set to the methods compared on it; by
    default every method seen for that set is required.
    """
    by_key = defaultdict(dict)
    seen_methods = defaultdict(list)
    for r in records:
        by_key[(r.station_set, r.hour, r.station_id, r.date)][r.method] = r
        if r.method not in seen_methods[r.station_set]:
            seen_methods[r.station_set].append(r.method)
    required = {s: list((methods or {}).get(s, seen_methods[s])) for s in seen_methods}

    matched = defaultdict(list)  # (set, hour, method) -> records
    skipped = defaultdict(int)
    for key in sorted(by_key, key=lambda k: (_set_order(k[0]), k[1], k[2], k[3])):
        entry = by_key[key]
        need = required[key[0]]
        if all(m in entry for m in need):
            for m in need:
                matched[(key[0], key[1], m)].append(entry[m])
        else:
            skipped[(key[0], key[1])] += 1

    rows, station_rows, pit_rows, summaries = [], [], [], []
    for (sset, hour, method) in sorted(matched, key=lambda k: (k[1], _set_order(k[0]), required[k[0]].index(k[2]))):
        recs = matched[(sset, hour, method)]
        crps = np.array([r.crps for r in recs])
        pits = np.array([r.pit for r in recs])
        n = crps.size
        rows.append(
            {
                "hour": hour,
                "station_set": sset,
                "method": method,
                "n": n,
                "mean_crps": float(crps.mean()),
                "se_crps": float(crps.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan,
                "pit_mean": float(pits.mean()),
                "pit_mad": float(np.abs(pits - 0.5).mean()),
                "n_skipped": skipped.get((sset, hour), 0),
            }
        )
        per_station = defaultdict(list)
        for r in recs:
            per_station[r.station_id].append(r)
        for sid in sorted(per_station):
            srecs = per_station[sid]
            station_rows.append(
                {
                    "hour": hour,
                    "station_set": sset,
                    "station_id": sid,
                    "method": method,
                    "n": len(srecs),
                    "mean_crps": float(np.mean([r.crps for r in srecs])),
                }
            )
            summ = pit_summary([r.pit for r in srecs], sid)
            summaries.append(
                {
                    "hour": hour,
                    "station_set": sset,
                    "station_id": sid,
                    "method": method,
                    "n": summ.n,
                    "pit_mean": summ.pit_mean,
                    "pit_mad": summ.pit_mad,
                }
            )
        pit_rows.extend(recs)
    return VerificationReport(rows, station_rows, pit_rows, summaries, dict(skipped))
