"""Dataset ingestion, grid files and bilinear interpolation.

File layout of a dataset directory::

    stations.csv       station_id,x,y,wbar        (wbar may be empty)
    forecasts.csv      station_id,date,hour,f1,...,fm
    observations.csv   station_id,date,hour,obs   (empty obs = missing)
    covariate.gcg      annual-mean wind speed grid (optional)

Grid files (``.gcg``) are little-endian: the magic bytes ``GCG1``, ``nx``
and ``ny`` as int32, ``x0, y0, dx, dy`` as float64, then ``nx * ny``
float64 values in row-major order (row index = y).
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .distributions import Family
from .emos import DEFAULT_WINDOW, EnsembleForecast
from .errors import DataError, OutOfBoundsError
from .geostat import CovKind, Site

log = logging.getLogger(__name__)

GRID_MAGIC = b"GCG1"
_GRID_HEADER = struct.Struct("<4sii4d")

STATIONS_FILE = "stations.csv"
FORECASTS_FILE = "forecasts.csv"
OBSERVATIONS_FILE = "observations.csv"
COVARIATE_FILE = "covariate.gcg"

PathLike = Union[str, os.PathLike]


# ---------------------------------------------------------------------------
# Atomic output
# ---------------------------------------------------------------------------


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(x) -> str:
    """Shortest round-trip text for a float; empty for missing values."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def read_csv(path: PathLike) -> Tuple[List[str], List[Tuple[int, List[str]]]]:
    """Header and ``(line_number, fields)`` rows of a headered CSV file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [(reader.line_num, row) for row in reader if row]
    return header, rows


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovariateGrid:
    nx: int
    ny: int
    x0: float
    y0: float
    dx: float
    dy: float
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype="<f8").ravel())
        object.__setattr__(self, "values", values)
        if self.nx < 1 or self.ny < 1 or self.nx * self.ny != values.size:
            raise DataError(f"grid shape {self.nx}x{self.ny} does not match {values.size} values")
        if not (self.dx > 0 and self.dy > 0):
            raise DataError("grid spacing must be positive")

    @property
    def array(self) -> np.ndarray:
        """Values as an (ny, nx) array."""
        return self.values.reshape(self.ny, self.nx)

    def node_coords(self):
        """Coordinates of all nodes in storage order."""
        xs = self.x0 + self.dx * np.arange(self.nx)
        ys = self.y0 + self.dy * np.arange(self.ny)
        gx, gy = np.meshgrid(xs, ys)
        return gx.ravel(), gy.ravel()

    def with_values(self, values) -> "CovariateGrid":
        return CovariateGrid(self.nx, self.ny, self.x0, self.y0, self.dx, self.dy, values)

    def to_bytes(self) -> bytes:
        header = _GRID_HEADER.pack(GRID_MAGIC, self.nx, self.ny, self.x0, self.y0, self.dx, self.dy)
        return header + self.values.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "CovariateGrid":
        if len(data) < _GRID_HEADER.size:
            raise DataError(f"{source}: truncated grid header")
        magic, nx, ny, x0, y0, dx, dy = _GRID_HEADER.unpack_from(data)
        if magic != GRID_MAGIC:
            raise DataError(f"{source}: bad magic {magic!r}")
        expected = _GRID_HEADER.size + 8 * nx * ny
        if nx < 1 or ny < 1 or len(data) != expected:
            raise DataError(f"{source}: expected {expected} bytes for a {nx}x{ny} grid, got {len(data)}")
        values = np.frombuffer(data, dtype="<f8", offset=_GRID_HEADER.size).copy()
        return cls(nx, ny, x0, y0, dx, dy, values)


def write_grid(path: PathLike, grid: CovariateGrid) -> None:
    atomic_write_bytes(path, grid.to_bytes())


def read_grid(path: PathLike, positive: bool = False) -> CovariateGrid:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    grid = CovariateGrid.from_bytes(path.read_bytes(), str(path))
    if positive and not np.all(grid.values > 0):
        raise DataError(f"{path}: covariate values must be positive")
    return grid


def bilinear(grid: CovariateGrid, x, y):
    """Bilinear interpolation; raises ``OutOfBoundsError`` outside the grid."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    fi = (x - grid.x0) / grid.dx
    fj = (y - grid.y0) / grid.dy
    tol = 1e-9
    if (
        np.any(~np.isfinite(fi))
        or np.any(~np.isfinite(fj))
        or np.any(fi < -tol)
        or np.any(fi > grid.nx - 1 + tol)
        or np.any(fj < -tol)
        or np.any(fj > grid.ny - 1 + tol)
    ):
        raise OutOfBoundsError("query point lies outside the grid")
    fi = np.clip(fi, 0.0, grid.nx - 1)
    fj = np.clip(fj, 0.0, grid.ny - 1)
    i0 = np.minimum(np.floor(fi).astype(int), max(grid.nx - 2, 0))
    j0 = np.minimum(np.floor(fj).astype(int), max(grid.ny - 2, 0))
    i1 = np.minimum(i0 + 1, grid.nx - 1)
    j1 = np.minimum(j0 + 1, grid.ny - 1)
    tx = fi - i0
    ty = fj - j0
    v = grid.array
    out = (
        (1 - tx) * (1 - ty) * v[j0, i0]
        + tx * (1 - ty) * v[j0, i1]
        + (1 - tx) * ty * v[j1, i0]
        + tx * ty * v[j1, i1]
    )
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass
class ForecastDataset:
    """Dense panel of ensemble forecasts and observations.

    ``forecasts`` has shape (hours, dates, stations, members) and
    ``observations`` (hours, dates, stations); missing entries are NaN.
    ``dates`` is a sorted ``datetime64[D]`` array.
    """

    stations: List[Site]
    dates: np.ndarray
    hours: Tuple[int, ...]
    forecasts: np.ndarray
    observations: np.ndarray
    excluded: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.hours = tuple(int(h) for h in self.hours)
        self._station_pos = {s.id: i for i, s in enumerate(self.stations)}
        if len(self._station_pos) != len(self.stations):
            raise DataError("duplicate station ids")
        shape = (len(self.hours), self.dates.size, len(self.stations))
        if self.forecasts.shape[:3] != shape or self.observations.shape != shape:
            raise DataError("forecast/observation panels do not match the dataset axes")

    @property
    def n_members(self) -> int:
        return self.forecasts.shape[-1]

    @property
    def station_ids(self) -> List[str]:
        return [s.id for s in self.stations]

    def station_index(self, station) -> int:
        if isinstance(station, Site):
            station = station.id
        if isinstance(station, (int, np.integer)) and not isinstance(station, bool):
            return int(station)
        try:
            return self._station_pos[station]
        except KeyError:
            raise KeyError(f"unknown station {station!r}") from None

    def hour_index(self, hour: int) -> int:
        try:
            return self.hours.index(int(hour))
        except ValueError:
            raise KeyError(f"hour {hour} not in dataset") from None

    def date_indices(self, dates) -> np.ndarray:
        """Positions of ``dates`` in the date axis, -1 where absent."""
        dates = np.atleast_1d(np.asarray(dates, dtype="datetime64[D]"))
        if self.dates.size == 0:
            return np.full(dates.shape, -1)
        pos = np.searchsorted(self.dates, dates)
        pos_c = np.minimum(pos, self.dates.size - 1)
        return np.where(self.dates[pos_c] == dates, pos_c, -1)

    def date_index(self, date) -> int:
        return int(self.date_indices([np.datetime64(date, "D")])[0])

    def forecast(self, station, date, hour) -> Optional[EnsembleForecast]:
        di = self.date_index(date)
        if di < 0:
            return None
        f = self.forecasts[self.hour_index(hour), di, self.station_index(station)]
        if not np.all(np.isfinite(f)):
            return None
        sid = self.stations[self.station_index(station)].id
        return EnsembleForecast(sid, np.datetime64(date, "D").item(), int(hour), f)

    def observation(self, station, date, hour) -> Optional[float]:
        di = self.date_index(date)
        if di < 0:
            return None
        y = self.observations[self.hour_index(hour), di, self.station_index(station)]
        return None if np.isnan(y) else float(y)

    def subset(self, station_ids: Sequence[str]) -> "ForecastDataset":
        idx = [self.station_index(s) for s in station_ids]
        return ForecastDataset(
            [self.stations[i] for i in idx],
            self.dates.copy(),
            self.hours,
            self.forecasts[:, :, idx, :].copy(),
            self.observations[:, :, idx].copy(),
            list(self.excluded),
        )


@dataclass
class RunConfig:
    family: Family = Family.TRUNC_LOGISTIC
    hours: Tuple[int, ...] = (18,)
    training_window_days: int = DEFAULT_WINDOW
    cov_kind: CovKind = CovKind.D
    holdout_size: int = 50
    holdout_reps: int = 10
    min_holdout_distance: float = 20.0
    seed: int = 0
    min_days_per_year: int = 200
    regional: bool = True
    data_dir: Optional[Path] = None
    out_dir: Optional[Path] = None

    def __post_init__(self):
        self.family = Family.parse(self.family)
        self.cov_kind = CovKind(self.cov_kind)
        self.hours = tuple(int(h) for h in self.hours)
        if not 1 <= self.training_window_days <= 365:
            raise ValueError("training window must lie in [1, 365] days")
        if self.holdout_size < 1 or self.holdout_reps < 1:
            raise ValueError("holdout size and replicate count must be positive")
        if self.data_dir is not None and not Path(self.data_dir).exists():
            raise DataError(f"{self.data_dir}: data directory not found")


def _parse_float(text, path, line, what):
    text = text.strip()
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: cannot parse {what} {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"{path}:{line}: {what} must be finite")
    return value


def _parse_date(text, path, line):
    try:
        return np.datetime64(dt.date.fromisoformat(text.strip()), "D")
    except ValueError:
        raise DataError(f"{path}:{line}: bad ISO-8601 date {text!r}") from None


def _parse_hour(text, path, line):
    try:
        return int(text)
    except ValueError:
        raise DataError(f"{path}:{line}: bad hour {text!r}") from None


def _require_columns(header, required, path):
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")


def read_stations(path: PathLike, covariate: Optional[CovariateGrid] = None) -> List[Site]:
    header, rows = read_csv(path)
    _require_columns(header, ["station_id", "x", "y"], path)
    ci = {c: header.index(c) for c in header}
    stations = []
    for line, row in rows:
        if len(row) != len(header):
            raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        sid = row[ci["station_id"]].strip()
        x = _parse_float(row[ci["x"]], path, line, "x")
        y = _parse_float(row[ci["y"]], path, line, "y")
        if math.isnan(x) or math.isnan(y):
            raise DataError(f"{path}:{line}: station coordinates are required")
        w = _parse_float(row[ci["wbar"]], path, line, "wbar") if "wbar" in ci else math.nan
        if math.isnan(w):
            if covariate is None:
                raise DataError(f"{path}:{line}: wbar missing and no covariate grid supplied")
            try:
                w = bilinear(covariate, x, y)
            except OutOfBoundsError:
                raise DataError(f"{path}:{line}: station {sid} lies outside the covariate grid") from None
        if not w > 0:
            raise DataError(f"{path}:{line}: wbar must be positive")
        stations.append(Site(sid, x, y, w))
    return stations


def _resolve_paths(paths) -> Dict[str, Optional[Path]]:
    if isinstance(paths, (str, os.PathLike)):
        root = Path(paths)
        if not root.is_dir():
            raise DataError(f"{root}: data directory not found")
        cov = root / COVARIATE_FILE
        return {
            "stations": root / STATIONS_FILE,
            "forecasts": root / FORECASTS_FILE,
            "observations": root / OBSERVATIONS_FILE,
            "covariate": cov if cov.exists() else None,
        }
    out = {k: (Path(v) if v is not None else None) for k, v in dict(paths).items()}
    out.setdefault("covariate", None)
    return out


def load_dataset(paths, config: Optional[RunConfig] = None) -> ForecastDataset:
    """Read and validate a dataset.

    ``paths`` is a dataset directory or a mapping with keys ``stations``,
    ``forecasts``, ``observations`` and optionally ``covariate``.  Stations
    whose observations are too sparse (fewer than
    ``config.min_days_per_year`` nonmissing days per calendar year, prorated
    for partially covered years) are dropped and listed in ``excluded``.
    """
    min_days = config.min_days_per_year if config is not None else 200
    p = _resolve_paths(paths)
    covariate = read_grid(p["covariate"], positive=True) if p.get("covariate") else None
    stations = read_stations(p["stations"], covariate)
    pos = {s.id: i for i, s in enumerate(stations)}
    if len(pos) != len(stations):
        raise DataError(f"{p['stations']}: duplicate station ids")

    fpath = p["forecasts"]
    header, frows = read_csv(fpath)
    _require_columns(header, ["station_id", "date", "hour"], fpath)
    member_cols = [i for i, h in enumerate(header) if h not in ("station_id", "date", "hour")]
    m = len(member_cols)
    if m == 0:
        raise DataError(f"{fpath}: no ensemble member columns")
    ci = {c: header.index(c) for c in ("station_id", "date", "hour")}
    f_records = []
    for line, row in frows:
        if len(row) != len(header):
            raise DataError(
                f"{fpath}:{line}: row has {len(row) - 3} members, expected {m}"
            )
        sid = row[ci["station_id"]].strip()
        if sid not in pos:
            raise DataError(f"{fpath}:{line}: unknown station {sid!r}")
        date = _parse_date(row[ci["date"]], fpath, line)
        hour = _parse_hour(row[ci["hour"]], fpath, line)
        vals = [_parse_float(row[c], fpath, line, "forecast") for c in member_cols]
        if any(v < 0 for v in vals):
            raise DataError(f"{fpath}:{line}: negative wind speed forecast")
        f_records.append((sid, date, hour, vals))

    opath = p["observations"]
    header, orows = read_csv(opath)
    _require_columns(header, ["station_id", "date", "hour", "obs"], opath)
    ci = {c: header.index(c) for c in ("station_id", "date", "hour", "obs")}
    o_records = []
    for line, row in orows:
        if len(row) != len(header):
            raise DataError(f"{opath}:{line}: expected {len(header)} fields, got {len(row)}")
        sid = row[ci["station_id"]].strip()
        if sid not in pos:
            raise DataError(f"{opath}:{line}: unknown station {sid!r}")
        y = _parse_float(row[ci["obs"]], opath, line, "observation")
        if y < 0:
            raise DataError(f"{opath}:{line}: negative wind speed observation")
        o_records.append(
            (sid, _parse_date(row[ci["date"]], opath, line), _parse_hour(row[ci["hour"]], opath, line), y)
        )

    dates = np.unique(np.array([r[1] for r in f_records] + [r[1] for r in o_records], dtype="datetime64[D]"))
    hours = tuple(sorted({r[2] for r in f_records} | {r[2] for r in o_records}))
    hpos = {h: i for i, h in enumerate(hours)}
    forecasts = np.full((len(hours), dates.size, len(stations), m), np.nan)
    observations = np.full((len(hours), dates.size, len(stations)), np.nan)
    if f_records:
        di = np.searchsorted(dates, np.array([r[1] for r in f_records]))
        for (sid, _, hour, vals), d in zip(f_records, di):
            forecasts[hpos[hour], d, pos[sid]] = vals
    if o_records:
        di = np.searchsorted(dates, np.array([r[1] for r in o_records]))
        for (sid, _, hour, y), d in zip(o_records, di):
            observations[hpos[hour], d, pos[sid]] = y

    ds = ForecastDataset(stations, dates, hours, forecasts, observations)
    sparse = sparse_stations(ds, min_days)
    if sparse:
        for sid in sparse:
            log.warning("excluding station %s: fewer than %d observed days per year", sid, min_days)
        keep = [s.id for s in stations if s.id not in set(sparse)]
        ds = ds.subset(keep)
        ds.excluded = list(sparse)
    return ds


def sparse_stations(ds: ForecastDataset, min_days_per_year: int) -> List[str]:
    """Stations below the observation-density threshold in any year."""
    if ds.dates.size == 0 or min_days_per_year <= 0:
        return []
    observed_day = np.any(np.isfinite(ds.observations), axis=0)  # (dates, stations)
    years = ds.dates.astype("datetime64[Y]").astype(int) + 1970
    out = []
    for year in np.unique(years):
        sel = years == year
        n_year = 366 if (year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)) else 365
        threshold = min_days_per_year * sel.sum() / n_year
        counts = observed_day[sel].sum(axis=0)
        out.extend(ds.stations[i].id for i in np.flatnonzero(counts < threshold))
    seen = set()
    return [s for s in out if not (s in seen or seen.add(s))]


def write_dataset(ds: ForecastDataset, out_dir: PathLike, covariate: Optional[CovariateGrid] = None) -> None:
    out = Path(out_dir)
    write_csv(
        out / STATIONS_FILE,
        ["station_id", "x", "y", "wbar"],
        ([s.id, float(s.x), float(s.y), float(s.wbar)] for s in ds.stations),
    )
    m = ds.n_members
    dates = [str(d) for d in ds.dates]

    def frows():
        for hi, hour in enumerate(ds.hours):
            for di, date in enumerate(dates):
                for si, s in enumerate(ds.stations):
                    f = ds.forecasts[hi, di, si]
                    if np.all(np.isfinite(f)):
                        yield [s.id, date, hour] + [float(v) for v in f]

    def orows():
        for hi, hour in enumerate(ds.hours):
            for di, date in enumerate(dates):
                for si, s in enumerate(ds.stations):
                    yield [s.id, date, hour, float(ds.observations[hi, di, si])]

    write_csv(out / FORECASTS_FILE, ["station_id", "date", "hour"] + [f"f{k + 1}" for k in range(m)], frows())
    write_csv(out / OBSERVATIONS_FILE, ["station_id", "date", "hour", "obs"], orows())
    if covariate is not None:
        write_grid(out / COVARIATE_FILE, covariate)
