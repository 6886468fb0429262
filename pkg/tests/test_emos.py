import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcast import distributions as dist
from gridcast import emos
from gridcast.dataio import ForecastDataset
from gridcast.distributions import Family
from gridcast.emos import (
    EmosModel,
    EnsembleForecast,
    LocalParams,
    PooledData,
    RegionalParams,
    TrainingSet,
    assemble_training,
    fit_local,
    fit_regional,
    predict,
)
from gridcast.errors import ParameterError
from gridcast.geostat import Site
from gridcast.optimizer import EPS


def sample_pairs(rng, n, a, b, xi2, family="trunc-logistic", m=20, sid="S1"):
    signal = rng.gamma(4.0, 1.5, size=n)
    members = signal[:, None] + rng.normal(0.0, 0.5, size=(n, m))
    members = np.abs(members)
    mu = a + b * members.mean(axis=1)
    y = dist.quantile_array(Family.parse(family), mu, np.full(n, xi2), rng.uniform(size=n))
    return TrainingSet(sid, members, y, n_requested=n)


def small_dataset(n_days=100, n_stations=3, m=5, seed=0):
    rng = np.random.default_rng(seed)
    stations = [Site(f"S{i}", 10.0 * i, 0.0, 1.0 + i) for i in range(n_stations)]
    dates = np.datetime64("2013-01-01") + np.arange(n_days)
    f = rng.gamma(3.0, 1.0, size=(1, n_days, n_stations, m))
    y = f.mean(axis=-1) + rng.normal(0.0, 0.3, size=(1, n_days, n_stations)) ** 2
    return ForecastDataset(stations, dates, (18,), f, y)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


def test_ensemble_statistics_population_variance():
    fc = EnsembleForecast("S", dt.date(2013, 1, 1), 18, np.array([2.0, 2.0, 4.0, 4.0]))
    assert fc.ens_mean == 3.0
    assert fc.ens_var == 1.0


def test_ensemble_rejects_negative_members():
    with pytest.raises(ParameterError):
        EnsembleForecast("S", dt.date(2013, 1, 1), 18, np.array([1.0, -0.5]))


def test_regional_simplex_validation():
    with pytest.raises(ParameterError):
        RegionalParams(np.array([0.6, 0.6]), 1.0, 0.0)
    with pytest.raises(ParameterError):
        RegionalParams(np.array([0.5, 0.5]), 0.0, 0.0)
    with pytest.raises(ParameterError):
        RegionalParams(np.array([0.5, 0.5]), 1.0, -0.1)


# ---------------------------------------------------------------------------
# training windows
# ---------------------------------------------------------------------------


def test_window_all_present():
    ds = small_dataset()
    t = assemble_training(ds, "S0", np.datetime64("2013-03-01"), 18, 30)
    assert len(t) == 30
    assert t.n_missing == 0


def test_window_drops_missing_days():
    ds = small_dataset()
    target = np.datetime64("2013-03-20")
    di = ds.date_indices(target - np.arange(1, 71))
    ds.observations[0, di[:6], 1] = np.nan
    ds.forecasts[0, di[6:10], 1, 2] = np.nan
    t = assemble_training(ds, "S1", target, 18, 70)
    assert len(t) == 60
    assert t.n_missing == 10
    assert not t.too_sparse
    # the target day itself is never part of the window
    assert np.all(t.obs != ds.observations[0, ds.date_index(target), 1])


def test_window_skip_rule():
    ds = small_dataset()
    target = np.datetime64("2013-03-20")
    di = ds.date_indices(target - np.arange(1, 71))
    ds.observations[0, di[:25], 0] = np.nan
    t = assemble_training(ds, "S0", target, 18, 70)
    assert len(t) == 45
    assert t.too_sparse
    assert fit_local(t, "tl") is None


def test_window_before_data_start_counts_missing():
    ds = small_dataset()
    t = assemble_training(ds, "S0", np.datetime64("2013-01-11"), 18, 30)
    assert len(t) == 10
    assert t.too_sparse


def test_window_requires_positive_length():
    ds = small_dataset()
    with pytest.raises(ValueError):
        assemble_training(ds, "S0", np.datetime64("2013-03-01"), 18, 0)


# ---------------------------------------------------------------------------
# local fit
# ---------------------------------------------------------------------------


def test_fit_local_recovers_truth():
    # n = 500 pairs per replicate; single-sample spread of a and xi2 is about 0.08
    rng = np.random.default_rng(5)
    fits = [fit_local(sample_pairs(rng, 500, 1.0, 0.8, 1.0), "tl") for _ in range(30)]
    est = np.array([[p.a, p.b, p.xi2] for p in fits])
    truth = np.array([1.0, 0.8, 1.0])
    assert np.all(np.median(np.abs(est - truth), axis=0) <= 0.1)
    assert np.all(np.abs(est.mean(axis=0) - truth) <= 0.05)


def test_fit_local_perfect_forecast():
    rng = np.random.default_rng(3)
    members = rng.gamma(4.0, 1.5, size=(200, 10))
    pairs = TrainingSet("S", members, members.mean(axis=1), n_requested=200)
    p = fit_local(pairs, "trunc-logistic")
    assert p.a == pytest.approx(0.0, abs=1e-3)
    assert p.b == pytest.approx(1.0, abs=1e-3)
    assert p.xi2 <= 1e-4


@pytest.mark.parametrize("family", ["trunc-normal", "gamma"])
def test_fit_local_other_families(family):
    rng = np.random.default_rng(8)
    pairs = sample_pairs(rng, 600, 0.5, 0.9, 0.8, family=family)
    p = fit_local(pairs, family)
    assert abs(p.b - 0.9) < 0.1
    assert abs(p.xi2 - 0.8) < 0.15
    if family == "gamma":
        assert p.a >= EPS


def test_fit_local_respects_bounds():
    rng = np.random.default_rng(4)
    members = rng.gamma(4.0, 1.5, size=(100, 5))
    y = rng.gamma(4.0, 1.5, size=100)  # forecasts carry no information
    p = fit_local(TrainingSet("S", members, y, 100), "tn")
    assert p.b >= 0.0
    assert p.xi2 >= EPS


# ---------------------------------------------------------------------------
# regional fit
# ---------------------------------------------------------------------------


def regional_training(rng, n_stations=20, n=100, m=8, informative=False, d_true=0.0):
    training, local = [], {}
    for s in range(n_stations):
        sid = f"S{s}"
        a, b, xi2 = rng.uniform(0.0, 1.0), rng.uniform(0.7, 1.0), rng.uniform(0.5, 1.5)
        signal = rng.gamma(4.0, 1.5, size=n)
        if informative:
            members = np.abs(signal[:, None] + rng.normal(0.0, 2.0, size=(n, m)))
            members[:, 0] = signal
            center = signal
        else:
            members = np.abs(signal[:, None] + rng.normal(0.0, rng.uniform(0.1, 1.5, size=(n, 1)), size=(n, m)))
            center = members.mean(axis=1)
        s2 = xi2 + d_true * members.var(axis=1)
        y = dist.quantile_array(Family.TRUNC_LOGISTIC, a + b * center, s2, rng.uniform(size=n))
        training.append(TrainingSet(sid, members, y, n))
        local[sid] = LocalParams(sid, a, b, xi2)
    return training, local


def test_regional_upweights_informative_member():
    rng = np.random.default_rng(0)
    training, local = regional_training(rng, informative=True)
    reg = fit_regional(training, local, "tl")
    assert reg.weights[0] > 0.5
    assert np.all(reg.weights[1:] < 0.1)


def test_regional_homoscedastic():
    rng = np.random.default_rng(1)
    training, local = regional_training(rng, n_stations=30, n=150)
    reg = fit_regional(training, local, "tl")
    assert abs(reg.d) <= 0.1
    assert abs(reg.c - 1.0) <= 0.1


def test_regional_exchangeable_members_flat_objective():
    rng = np.random.default_rng(2)
    training, local = regional_training(rng)
    reg = fit_regional(training, local, "tl")
    pooled = PooledData.build(training, local)
    fitted = pooled.mean_crps("tl", reg)
    uniform = pooled.mean_crps("tl", RegionalParams(np.full(8, 1 / 8), reg.c, reg.d))
    assert abs(uniform - fitted) <= 1e-3


def test_regional_never_worse_than_start():
    rng = np.random.default_rng(3)
    training, local = regional_training(rng, informative=True, d_true=0.4)
    pooled = PooledData.build(training, local)
    reg = fit_regional(training, local, "tl")
    start = pooled.mean_crps("tl", RegionalParams.simplified(8))
    assert pooled.mean_crps("tl", reg) <= start
    assert np.all(reg.weights >= 0)
    assert abs(reg.weights.sum() - 1.0) <= 1e-12
    assert reg.d > 0.1


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def model_for(local, weights, c, d, family="tl"):
    return EmosModel(Family.parse(family), 18, 70, {p.station_id: p for p in local}, RegionalParams(np.asarray(weights, float), c, d))


def fc(members, sid="S"):
    return EnsembleForecast(sid, dt.date(2013, 1, 1), 18, np.asarray(members, dtype=float))


def test_predict_reduces_to_simplified_model():
    model = model_for([LocalParams("S", 0.0, 1.0, 2.0)], [0.25] * 4, 1.0, 0.0)
    d = predict(model, fc([1.0, 2.0, 3.0, 6.0]))
    assert d.mu == pytest.approx(3.0)
    assert d.sigma2 == pytest.approx(2.0)


def test_predict_climatological_mean():
    model = model_for([LocalParams("S", 1.0, 0.0, 1.0)], [0.5, 0.5], 1.0, 0.0)
    assert predict(model, fc([10.0, 30.0])).mu == 1.0


def test_predict_spread_term():
    model = model_for([LocalParams("S", 0.0, 1.0, 1.0)], [0.25] * 4, EPS, 1.0)
    d = predict(model, fc([2.0, 2.0, 4.0, 4.0]))
    assert d.mu == pytest.approx(3.0)
    assert d.sigma2 == pytest.approx(1.0, abs=1e-7)


def test_predict_unknown_station():
    model = model_for([LocalParams("S", 0.0, 1.0, 1.0)], [1.0], 1.0, 0.0)
    with pytest.raises(KeyError):
        predict(model, fc([1.0], sid="other"))


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(0.0, 20.0), min_size=3, max_size=3),
    st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3),
    st.permutations([0, 1, 2]),
)
def test_predict_member_permutation_invariance(members, raw_w, perm):
    w = np.array(raw_w) / np.sum(raw_w)
    w = w / w.sum()
    local = [LocalParams("S", 0.3, 0.9, 1.2)]
    m1 = model_for(local, w, 0.8, 0.5)
    m2 = model_for(local, w[list(perm)], 0.8, 0.5)
    d1 = predict(m1, fc(members))
    d2 = predict(m2, fc(np.array(members)[list(perm)]))
    assert d1.mu == pytest.approx(d2.mu, rel=1e-12)
    assert d1.sigma2 == pytest.approx(d2.sigma2, rel=1e-12)


def test_two_step_consistency_with_uniform_weights():
    rng = np.random.default_rng(9)
    pairs = sample_pairs(rng, 200, 0.5, 0.9, 1.0, m=6)
    local = fit_local(pairs, "tl")
    model = model_for([local], RegionalParams.simplified(6).weights, 1.0, 0.0)
    members = pairs.members[0]
    d = predict(model, fc(members, sid="S1"))
    assert d.mu == pytest.approx(local.a + local.b * members.mean(), rel=1e-14)
    assert d.sigma2 == local.xi2
