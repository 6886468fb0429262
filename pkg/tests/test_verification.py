import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gridcast import distributions as dist
from gridcast.distributions import Family, PredictiveDistribution
from gridcast.errors import DomainError
from gridcast.geostat import Site
from gridcast.verification import (
    PitSample,
    ScoredForecast,
    average_crps,
    build_report,
    pit,
    pit_summary,
    randomized_pit_ensemble,
    sample_holdout,
)

DAY = dt.date(2013, 1, 1)


def tl(mu=3.0, sigma2=1.0):
    return PredictiveDistribution.make(Family.TRUNC_LOGISTIC, mu, sigma2)


# ---------------------------------------------------------------------------
# PIT
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("family", list(Family))
def test_pit_at_median(family):
    d = PredictiveDistribution.make(family, 2.5, 0.8)
    assert pit(d, dist.quantile(d, 0.5)) == pytest.approx(0.5, abs=1e-10)


@pytest.mark.parametrize("family", list(Family))
def test_pit_at_zero(family):
    assert pit(PredictiveDistribution.make(family, 2.5, 0.8), 0.0) == 0.0


def test_pit_rejects_negative_observation():
    with pytest.raises(DomainError):
        pit(tl(), -0.1)
    with pytest.raises(DomainError):
        pit(tl(), float("nan"))


@pytest.mark.parametrize("family", list(Family))
def test_pit_uniform_on_calibrated_draws(family):
    rng = np.random.default_rng(0)
    d = PredictiveDistribution.make(family, 1.5, 1.2)
    y = dist.quantile_array(family, np.full(10_000, 1.5), np.full(10_000, 1.2), rng.uniform(size=10_000))
    p = np.array([pit(d, v) for v in y])
    assert stats.kstest(p, "uniform").statistic < 0.02


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 30.0), st.floats(0.0, 30.0))
def test_pit_monotone(y1, y2):
    d = tl(2.0, 1.5)
    lo, hi = sorted((y1, y2))
    assert pit(d, lo) <= pit(d, hi)


def test_pit_sample_bounds():
    with pytest.raises(DomainError):
        PitSample("S", DAY, 18, 1.2)


def test_randomized_ensemble_pit():
    rng = np.random.default_rng(1)
    members = np.array([[1.0, 2.0, 3.0, 4.0]] * 3)
    p = randomized_pit_ensemble(members, [0.5, 5.0, 2.0], rng)
    assert 0.0 <= p[0] <= 0.2
    assert 0.8 <= p[1] <= 1.0
    assert 0.2 <= p[2] <= 0.6


def test_randomized_ensemble_pit_uniform_for_exchangeable_obs():
    rng = np.random.default_rng(2)
    draws = rng.gamma(3.0, 1.0, size=(10_000, 11))
    p = randomized_pit_ensemble(np.round(draws[:, :10], 1), np.round(draws[:, 10], 1), rng)
    assert stats.kstest(p, "uniform").statistic < 0.02


# ---------------------------------------------------------------------------
# PIT summaries
# ---------------------------------------------------------------------------


def test_summary_underdispersed_limit():
    s = pit_summary([0.0, 1.0] * 50)
    assert s.pit_mean == 0.5
    assert s.pit_mad == 0.5


def test_summary_overdispersed_limit():
    s = pit_summary([0.5] * 10)
    assert (s.pit_mean, s.pit_mad) == (0.5, 0.0)


def test_summary_uniform_grid():
    s = pit_summary(np.arange(0.005, 1.0, 0.01))
    assert s.n == 100
    assert s.pit_mean == pytest.approx(0.5)
    assert s.pit_mad == pytest.approx(0.25)


def test_summary_of_records_keeps_station():
    s = pit_summary([PitSample("S7", DAY, 18, 0.3), PitSample("S7", DAY, 18, 0.9)])
    assert s.station_id == "S7"
    assert s.pit_mean == pytest.approx(0.6)


def test_summary_empty():
    with pytest.raises(DomainError):
        pit_summary([])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30),
    st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30),
)
def test_summary_union_is_weighted_average(a, b):
    sa, sb, su = pit_summary(a), pit_summary(b), pit_summary(a + b)
    n = len(a) + len(b)
    assert su.pit_mean == pytest.approx((len(a) * sa.pit_mean + len(b) * sb.pit_mean) / n, abs=1e-12)
    assert su.pit_mad == pytest.approx((len(a) * sa.pit_mad + len(b) * sb.pit_mad) / n, abs=1e-12)


# ---------------------------------------------------------------------------
# average CRPS
# ---------------------------------------------------------------------------


def test_average_of_precomputed_scores():
    assert average_crps([(0.4, None), (0.6, None)]) == pytest.approx(0.5)


def test_average_perfect_point_forecasts():
    assert average_crps([(np.array([2.0]), 2.0), (np.array([0.0]), 0.0)]) == 0.0


def test_average_empty():
    with pytest.raises(DomainError):
        average_crps([])


@settings(max_examples=20, deadline=None)
@given(st.permutations(list(range(6))))
def test_average_order_invariant(perm):
    pairs = [(tl(1.0 + i, 0.5 + 0.1 * i), 0.7 * i) for i in range(6)]
    assert average_crps([pairs[i] for i in perm]) == pytest.approx(average_crps(pairs), rel=1e-14)


def test_calibrated_beats_underdispersed_ensemble():
    rng = np.random.default_rng(3)
    n, m = 10_000, 20
    mu = rng.uniform(2.0, 8.0, size=n)
    s2 = rng.uniform(0.5, 2.0, size=n)
    fam = Family.TRUNC_LOGISTIC
    y = dist.quantile_array(fam, mu, s2, rng.uniform(size=n))
    members = dist.quantile_array(
        fam, np.repeat(mu, m), np.repeat(s2, m), rng.uniform(size=n * m)
    ).reshape(n, m)
    center = members.mean(axis=1, keepdims=True)
    narrow = np.maximum(center + 0.5 * (members - center), 0.0)
    c_scores = dist.crps_array(fam, mu, s2, y)
    e_scores = np.array([dist.crps_ensemble(narrow[i], y[i]) for i in range(n)])
    diff = e_scores - c_scores
    assert average_crps([(PredictiveDistribution.make(fam, mu[i], s2[i]), y[i]) for i in range(200)]) == pytest.approx(
        c_scores[:200].mean(), rel=1e-12
    )
    assert diff.mean() > 3 * diff.std(ddof=1) / np.sqrt(n)


# ---------------------------------------------------------------------------
# holdout sampling and reports
# ---------------------------------------------------------------------------


def network(n=286, extent=400.0, seed=0):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0.0, extent, size=(n, 2))
    return [Site(f"S{i:03d}", float(x), float(y), 4.0) for i, (x, y) in enumerate(xy)]


def test_holdout_minimum_distance():
    sites = network()
    rng = np.random.default_rng(4)
    pos = {s.id: (s.x, s.y) for s in sites}
    for _ in range(10):
        ids = sample_holdout(sites, 50, rng, min_distance=20.0)
        assert len(set(ids)) == 50
        xy = np.array([pos[i] for i in ids])
        d = np.hypot(*(xy[:, None, :] - xy[None, :, :]).transpose(2, 0, 1))
        assert d[np.triu_indices(50, 1)].min() >= 20.0


def test_holdout_deterministic_per_seed():
    sites = network()
    a = sample_holdout(sites, 50, np.random.default_rng(7))
    b = sample_holdout(sites, 50, np.random.default_rng(7))
    assert a == b


def test_holdout_impossible():
    with pytest.raises(ValueError):
        sample_holdout(network(10, extent=5.0), 5, np.random.default_rng(0), max_tries=5)
    with pytest.raises(ValueError):
        sample_holdout(network(10), 11, np.random.default_rng(0))


def records(station_set, sid, day, methods, base=0.5):
    return [
        ScoredForecast(station_set, sid, day, 18, m, base + 0.1 * k, 0.25 + 0.1 * k)
        for k, m in enumerate(methods)
    ]


def test_report_full_matched_sample():
    recs = []
    for sid in ("A", "B"):
        for day in ("2013-01-01", "2013-01-02"):
            recs += records("1", sid, day, ["raw", "local", "krig-d"])
    rep = build_report(recs)
    tab = rep.table("1", 18)
    assert list(tab) == ["raw", "local", "krig-d"]
    assert all(r["n"] == 4 for r in tab.values())
    assert tab["local"]["mean_crps"] == pytest.approx(0.6)
    assert rep.skipped == {}


def test_report_excludes_incomplete_station_days():
    recs = records("1", "A", "2013-01-01", ["raw", "local"]) + records("1", "A", "2013-01-02", ["raw", "local"])
    recs += records("1", "B", "2013-01-01", ["raw", "local"])
    recs += records("1", "B", "2013-01-02", ["raw"], base=9.0)  # local skipped that day
    rep = build_report(recs)
    tab = rep.table("1")
    assert tab["raw"]["n"] == tab["local"]["n"] == 3
    assert tab["raw"]["mean_crps"] == pytest.approx(0.5)
    assert rep.skipped == {("1", 18): 1}
    assert tab["raw"]["n_skipped"] == 1


def test_report_ten_replicates_shape():
    sites = network()
    rng = np.random.default_rng(5)
    recs = []
    for rep_i in range(10):
        for sid in sample_holdout(sites, 50, rng):
            for day in ("2013-01-01", "2013-01-02"):
                recs += records(str(rep_i + 1), sid, day, ["local"])
    rep = build_report(recs)
    rows = [r for r in rep.rows if r["method"] == "local"]
    assert [r["station_set"] for r in rows] == [str(i) for i in range(1, 11)]
    assert all(r["n"] <= 50 * 2 for r in rows)
    assert len({r["station_id"] for r in rep.station_rows if r["station_set"] == "3"}) == 50


def test_report_write(tmp_path):
    recs = records("1", "A", "2013-01-01", ["raw", "local"]) + records("1", "B", "2013-01-01", ["raw", "local"])
    paths = build_report(recs).write(tmp_path)
    assert [p.name for p in paths] == ["report.csv", "station_crps.csv", "pit.csv", "pit_summary.csv"]
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[0].startswith("hour,station_set,method,n,mean_crps")
    assert len(lines) == 3
    assert len((tmp_path / "pit.csv").read_text().splitlines()) == 5
