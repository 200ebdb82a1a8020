import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oran_twin.errors import CatalogError, EmptySeries, InsufficientHistory, InvalidInterval, ParseError, ShapeError
from oran_twin.telemetry import (
    FeatureStats,
    KpmSample,
    KpmSeries,
    build_features,
    read_trace,
    resample,
    standardize,
    window_mean,
    write_trace,
)


def raw(points, metric="dl_prb_usage", entity="cell0"):
    return KpmSeries.from_samples(KpmSample(t, entity, metric, v, q) for t, v, q in points)


def triples(s):
    return [(float(t), float(v), int(q)) for t, v, q in zip(s.times, s.values, s.quality)]


class TestResample:
    def test_bucket_means(self):
        out = resample(raw([(0.2, 10, 1), (0.7, 20, 1), (1.4, 30, 1)]), 1.0)
        assert triples(out) == [(1.0, 15.0, 1), (2.0, 30.0, 1)]

    def test_aligned_identity(self):
        assert triples(resample(raw([(1.0, 5, 1)]), 1.0)) == [(1.0, 5.0, 1)]

    def test_gap_carry_forward(self):
        # hand trace over buckets 1..5 with bucket 3 empty
        pts = [(0.5, 1, 1), (1.5, 2, 1), (1.9, 4, 1), (3.2, 7, 1), (4.9, 9, 1)]
        out = resample(raw(pts), 1.0)
        assert triples(out) == [(1.0, 1.0, 1), (2.0, 3.0, 1), (3.0, 3.0, 0), (4.0, 7.0, 1), (5.0, 9.0, 1)]

    def test_bad_quality_taints_bucket(self):
        out = resample(raw([(0.1, 1, 1), (0.6, 3, 0), (1.5, 5, 1)]), 1.0)
        assert list(out.quality) == [0, 1]
        assert out.values[0] == 2.0

    def test_errors(self):
        with pytest.raises(InvalidInterval):
            resample(raw([(1.0, 1, 1)]), 0.0)
        empty = KpmSeries("dl_prb_usage", "cell0", [], [], [])
        with pytest.raises(EmptySeries):
            resample(empty, 1.0)

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(
            st.tuples(st.floats(0, 50, allow_nan=False), st.floats(-1e3, 1e3, allow_nan=False), st.sampled_from([0, 1])),
            min_size=1,
            max_size=40,
        ),
        st.sampled_from([0.5, 1.0, 2.5]),
    )
    def test_idempotent(self, pts, dt):
        pts.sort(key=lambda p: p[0])
        once = resample(raw(pts), dt)
        twice = resample(once, dt)
        np.testing.assert_array_equal(once.times, twice.times)
        np.testing.assert_allclose(once.values, twice.values, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(once.quality, twice.quality)


class TestWindowMean:
    def test_basic(self):
        assert window_mean([1, 2, 3, 4], 4, 3) == 3.0

    def test_constant(self):
        assert window_mean([7.5] * 10, 10, 6) == 7.5

    def test_insufficient(self):
        with pytest.raises(InsufficientHistory):
            window_mean([1, 2], 2, 3)

    def test_variance_reduction_monte_carlo(self):
        rng = np.random.default_rng(0)
        draws = rng.standard_normal((100_000, 8)).mean(axis=1)
        assert 0.10 <= draws.var() <= 0.15

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-100, 100), st.floats(-10, 10), st.integers(1, 12), st.integers(0, 20))
    def test_ramp_lag(self, a, b, W, extra):
        t = W + extra
        x = a + b * np.arange(1, t + 1)
        assert window_mean(x, t, W) == pytest.approx(a + b * (t - (W - 1) / 2), abs=1e-9)


class TestFeatures:
    def test_direct_substitution(self):
        fv = build_features(KpmSeries.from_values([1, 2, 3, 4, 5]), tau=2, W=2)[-1]
        assert fv.lags == (4.0, 3.0)
        assert fv.window_mean == 4.5
        assert fv.rate == 1.0

    def test_degenerate_window(self):
        fv = build_features(KpmSeries.from_values([2, 6]), tau=0, W=1)[-1]
        assert (fv.value, fv.window_mean, fv.rate) == (6.0, 6.0, 4.0)
        assert fv.lags == ()

    def test_ratio_guard(self):
        vol = KpmSeries.from_values([5.0, 5.0], metric="pdcp_volume")
        prb = KpmSeries.from_values([1.0, 0.0], metric="prb_alloc")
        fv = build_features(vol, 0, 1, ratios={"vol_per_prb": (vol, prb)})[-1]
        assert fv.cross_ratios["vol_per_prb"] == pytest.approx(5.0 / 1e-6)

    def test_too_short(self):
        with pytest.raises(InsufficientHistory):
            build_features(KpmSeries.from_values([1, 2, 3]), tau=3, W=2)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=30), st.integers(0, 3), st.integers(1, 4))
    def test_causal(self, xs, tau, W):
        full = build_features(KpmSeries.from_values(xs), tau, W)
        cut = len(xs) - 1
        prefix = build_features(KpmSeries.from_values(xs[:cut]), tau, W) if cut >= max(tau, W) + 1 else []
        for a, b in zip(prefix, full):
            np.testing.assert_array_equal(a.as_array(), b.as_array())


class TestStandardize:
    def test_scalar(self):
        assert standardize(5.0, FeatureStats(np.array([5.0]), np.array([2.0]))) == 0.0

    def test_std_guard(self):
        assert standardize(7.0, FeatureStats(np.array([7.0]), np.array([0.0]))) == 0.0

    def test_vector(self):
        z = standardize([1.0, 3.0], FeatureStats(np.array([0.0, 1.0]), np.array([1.0, 2.0])))
        np.testing.assert_array_equal(z, [1.0, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            standardize([1.0, 2.0, 3.0], FeatureStats(np.zeros(2), np.ones(2)))

    def test_feature_vectors_carry_stats(self):
        fvs = build_features(KpmSeries.from_values([1, 2, 3, 4]), 1, 2)
        X = np.array([f.as_array() for f in fvs])
        stats = FeatureStats.fit(X)
        out = standardize(fvs, stats)
        assert all(f.standardized and f.stats is stats for f in out)
        np.testing.assert_allclose([f.as_array() for f in out], standardize(X, stats))


class TestTrace:
    def test_round_trip_bytes(self, tmp_path):
        rng = np.random.default_rng(3)
        metrics = ["dl_prb_usage", "serving_sinr", "tb_errors", "pdcp_volume"]
        samples = [
            KpmSample(float(rng.uniform(0, 100)), f"e{rng.integers(5)}", metrics[rng.integers(4)], float(rng.normal()), int(rng.integers(2)))
            for _ in range(1000)
        ]
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_trace(samples, p1)
        write_trace(read_trace(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_missing_value(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        good = {"t": 1.0, "entity": "cell0", "metric": "tb_total", "value": 3.0, "q": 1}
        bad = {k: v for k, v in good.items() if k != "value"}
        p.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
        with pytest.raises(ParseError) as exc:
            read_trace(p)
        assert exc.value.line == 2

    def test_unknown_metric(self, tmp_path):
        p = tmp_path / "foo.jsonl"
        p.write_text(json.dumps({"t": 1.0, "entity": "cell0", "metric": "foo", "value": 1.0, "q": 1}) + "\n")
        with pytest.raises(CatalogError):
            read_trace(p)
