import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imputecast.pipeline import (
    DataError,
    MinMax,
    SimulationSpec,
    SplitSpec,
    TimeSeries,
    apply_mcar,
    bootstrap_window,
    ingest_csv,
    lag_steps,
    make_instances,
    minmax_fit_apply,
    simulate,
    stack_instances,
    write_csv,
)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------------------
# CSV


def test_ingest_all_present(tmp_path):
    s = ingest_csv(write(tmp_path, "timestamp,power\n0,1.5\n300,2.5\n600,3.5\n"))
    assert s.mask.tolist() == [True, True, True]
    assert s.values.tolist() == [1.5, 2.5, 3.5]
    assert s.resolution == 300 and s.start == 0


def test_ingest_empty_value_is_missing(tmp_path):
    s = ingest_csv(write(tmp_path, "timestamp,power\n0,1\n300,\n600,3\n"))
    assert s.mask.tolist() == [True, False, True]
    assert math.isnan(s.values[1])


def test_ingest_iso_timestamps(tmp_path):
    s = ingest_csv(write(tmp_path, "timestamp,power\n2018-01-01T00:00:00Z,1\n"
                                   "2018-01-01T00:05:00Z,2\n"))
    assert s.start == 1514764800 and s.resolution == 300


def test_ingest_duplicate_timestamp_names_row(tmp_path):
    with pytest.raises(DataError, match="row 3.*duplicate"):
        ingest_csv(write(tmp_path, "timestamp,power\n0,1\n0,2\n300,3\n"))


def test_ingest_non_monotone(tmp_path):
    with pytest.raises(DataError, match="row 4.*non-monotone"):
        ingest_csv(write(tmp_path, "timestamp,power\n0,1\n300,2\n200,3\n"))


def test_ingest_irregular_spacing(tmp_path):
    with pytest.raises(DataError, match="row 4.*spacing"):
        ingest_csv(write(tmp_path, "timestamp,power\n0,1\n300,2\n900,3\n"))


def test_ingest_unparseable_value(tmp_path):
    with pytest.raises(DataError, match="row 2.*bad value"):
        ingest_csv(write(tmp_path, "timestamp,power\n0,abc\n"))


def test_ingest_bad_header(tmp_path):
    with pytest.raises(DataError, match="header"):
        ingest_csv(write(tmp_path, "time,value\n0,1\n"))


def test_csv_round_trip(tmp_path):
    s = TimeSeries.from_values([1.25, np.nan, 3.5], start=1514764800)
    write_csv(tmp_path / "r.csv", s)
    back = ingest_csv(tmp_path / "r.csv")
    assert back.mask.tolist() == [True, False, True]
    assert back.values[0] == 1.25 and back.start == s.start


# ---------------------------------------------------------------------------
# normalization


def test_minmax_definition():
    s = TimeSeries.from_values([0.0, 52.5, 26.25, 10.0, 60.0])
    out, sc = minmax_fit_apply(s, SplitSpec(0.4, 0.2, 0.4))
    assert (sc.lo, sc.hi) == (0.0, 52.5)
    assert out.values[2] == 0.5
    assert out.values[4] > 1.0  # test value above the training maximum


def test_minmax_ignores_missing_training_entries():
    s = TimeSeries.from_values([1.0, 100.0, 3.0, 2.0, 2.0], mask=[1, 0, 1, 1, 1])
    _, sc = minmax_fit_apply(s, SplitSpec(0.6, 0.2, 0.2))
    assert (sc.lo, sc.hi) == (1.0, 3.0)


def test_minmax_constant_training_split_errors():
    with pytest.raises(DataError):
        minmax_fit_apply(TimeSeries.from_values([2.0] * 6 + [1.0, 3.0, 5.0, 7.0]), SplitSpec())


def test_minmax_inverse_round_trip():
    rng = np.random.default_rng(0)
    x = rng.uniform(-100, 100, 1000)
    sc = MinMax(-3.0, 41.0)
    np.testing.assert_allclose(sc.inverse(sc.apply(x)), x, rtol=0, atol=1e-12)


def test_normalization_independent_of_test_split_order():
    rng = np.random.default_rng(1)
    v = rng.uniform(0, 50, 100)
    _, a = minmax_fit_apply(TimeSeries.from_values(v), SplitSpec())
    w = v.copy()
    w[80:] = rng.permutation(w[80:]) * 3.0
    _, b = minmax_fit_apply(TimeSeries.from_values(w), SplitSpec())
    assert a == b


def test_split_is_chronological_and_contiguous():
    s = TimeSeries.from_values(np.arange(10.0))
    tr, va, te = SplitSpec().split(s)
    assert tr.values.tolist() == [0, 1, 2, 3, 4, 5]
    assert va.values.tolist() == [6, 7] and te.values.tolist() == [8, 9]
    assert va.start == s.start + 6 * s.resolution
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.5, 0.1)


# ---------------------------------------------------------------------------
# MCAR


def test_mcar_rate_zero_and_one():
    s = TimeSeries.from_values(np.arange(50.0))
    same = apply_mcar(s, 0.0, 3)
    assert np.array_equal(same.values, s.values) and same.mask.all()
    assert not apply_mcar(s, 1.0, 3).mask.any()


def binomial_central_interval(n, p, mass):
    tail = (1.0 - mass) / 2
    c, lo, hi = 0.0, None, None
    for k in range(n + 1):
        c += math.exp(math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
                      + k * math.log(p) + (n - k) * math.log1p(-p))
        if lo is None and c >= tail:
            lo = k
        if hi is None and c >= 1.0 - tail:
            return lo, k


def test_mcar_count_in_binomial_interval():
    lo, hi = binomial_central_interval(10_000, 0.25, 0.999)
    # the tabulated bounds [2356, 2645] contain the exact central interval
    assert 2356 <= lo and hi <= 2645
    s = TimeSeries.from_values(np.ones(10_000))
    dropped = int((~apply_mcar(s, 0.25, 42).mask).sum())
    assert 2356 <= dropped <= 2645


@settings(max_examples=30, deadline=None)
@given(rate=st.floats(0, 1), seed=st.integers(0, 2**31), pre=st.floats(0, 1))
def test_mcar_never_resurrects(rate, seed, pre):
    rng = np.random.default_rng(seed)
    s = TimeSeries.from_values(rng.normal(size=200), mask=rng.random(200) >= pre)
    out = apply_mcar(s, rate, seed)
    assert not np.any(out.mask & ~s.mask)
    assert np.array_equal(out.values[out.mask], s.values[out.mask])
    assert np.array_equal(apply_mcar(s, rate, seed).mask, out.mask)


# ---------------------------------------------------------------------------
# instances


def test_exact_length_gives_one_instance():
    s = TimeSeries.from_values(np.arange(7.0))
    assert len(make_instances(s, 3, 4, 1)) == 1
    with pytest.raises(DataError):
        make_instances(TimeSeries.from_values(np.arange(6.0)), 3, 4)


def test_window_overlap_invariant():
    rng = np.random.default_rng(2)
    s = apply_mcar(TimeSeries.from_values(rng.normal(size=60)), 0.3, 1)
    for inst in make_instances(s, 4, 6, 1):
        for i in range(inst.T - 1):
            a, b = inst.raw_window(i), inst.raw_window(i + 1)
            am, bm = inst.window_mask(i), inst.window_mask(i + 1)
            assert np.array_equal(am[1:], bm[:-1])
            assert np.array_equal(a[1:][am[1:]], b[:-1][bm[:-1]])
            assert inst.window_mask(i + 1)[-1] == inst.target_mask[i]


def test_targets_reconstruct_series_without_gaps():
    v = np.arange(40.0) * 0.5
    s = TimeSeries.from_values(v)
    insts = make_instances(s, 3, 5)  # stride T
    assert [i.start for i in insts] == [0, 5, 10, 15, 20, 25, 30]
    recon = np.concatenate([i.targets for i in insts])
    assert np.array_equal(recon, v[3:3 + 5 * len(insts)])
    assert not any(i.bootstrapped for i in insts)


def test_gapped_first_window_is_bootstrap_filled():
    s = TimeSeries.from_values([1.0, 2.0, np.nan, 4.0, 5.0, 6.0, 7.0])
    (inst,) = [i for i in make_instances(s, 3, 1, 1) if i.start == 1]
    assert inst.bootstrapped
    assert inst.first_window.tolist() == [2.0, 3.0, 4.0]


def test_bootstrap_is_causal_at_window_end():
    # a trailing gap holds the last value rather than peeking past the window
    s = TimeSeries.from_values([1.0, 2.0, np.nan, 10.0])
    assert bootstrap_window(s, 0, 3).tolist() == [1.0, 2.0, 2.0]


@pytest.mark.parametrize("sentinel", [0.0, -1e9, 12345.0])
def test_instances_invariant_to_sentinel(sentinel):
    rng = np.random.default_rng(3)
    s = apply_mcar(TimeSeries.from_values(rng.normal(size=80)), 0.3, 5)
    ref = stack_instances(make_instances(s, 3, 8))
    other = stack_instances(make_instances(s.with_sentinel(sentinel), 3, 8))
    assert np.array_equal(ref.first, other.first)
    assert np.array_equal(ref.targets, other.targets)
    assert np.array_equal(ref.tmask, other.tmask)


def test_lag_minutes_to_steps():
    assert lag_steps(15, 300) == 3
    assert [lag_steps(m, 300) for m in (5, 10, 20)] == [1, 2, 4]
    with pytest.raises(ValueError):
        lag_steps(7, 300)


# ---------------------------------------------------------------------------
# synthetic data


def test_simulation_bounded_and_seeded():
    spec = SimulationSpec(n=3000)
    a, b = simulate(spec, 1), simulate(spec, 1)
    assert np.array_equal(a.values, b.values)
    assert a.values.min() >= 0 and a.values.max() <= spec.capacity
    assert not np.array_equal(a.values, simulate(spec, 2).values)


def test_simulation_has_daily_season():
    s = simulate(SimulationSpec(n=288 * 40, ar_scale=0.0, noise=0.0), 0)
    x = s.values - s.values.mean()
    ac = float(x[:-288] @ x[288:]) / float(x @ x)
    assert ac > 0.8


def test_empty_simulation():
    assert len(simulate(SimulationSpec(n=0), 0)) == 0
    with pytest.raises(ValueError):
        simulate(SimulationSpec(n=-1), 0)
