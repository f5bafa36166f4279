import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from asdesign.core_data import (
    DataError, DgpConfig, FeatureSpec, GeoPanel, InsufficientDataError, SchemaError,
    UniquenessError, build_geo_graph, engineer_features, generate_synthetic, geo_arrays,
    load_geo_panel, raw_series_features, split_for_embedding, synthetic_panel, write_geo_panel,
)


def _panel_csv(tmp_path, rows, name="panel.csv"):
    path = tmp_path / name
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def _rows(n=3, weeks=4):
    rows = []
    for i in range(n):
        row = {"geo_id": f"G{i + 1}"}
        row.update({f"rev_w{w + 1}": 100.0 + 10 * i + w for w in range(weeks)})
        row.update({f"spend_w{w + 1}": 10.0 + i for w in range(weeks)})
        row["population"] = 1000 * (i + 1)
        rows.append(row)
    return rows


class TestLoadPanel:
    def test_shape(self, tmp_path):
        panel = load_geo_panel(_panel_csv(tmp_path, _rows()))
        assert panel.revenue.shape == (3, 4)
        assert panel.covariate_names == ["population"]
        assert panel.weeks == 4

    def test_weeks_sorted_numerically(self, tmp_path):
        rows = _rows(weeks=11)
        df = pd.DataFrame(rows)
        cols = ["geo_id"] + sorted([c for c in df.columns if c != "geo_id"])  # rev_w10 before rev_w2
        path = tmp_path / "p.csv"
        df[cols].to_csv(path, index=False)
        panel = load_geo_panel(path)
        np.testing.assert_allclose(panel.revenue[0], 100.0 + np.arange(11))

    def test_duplicate_id(self, tmp_path):
        rows = _rows()
        rows[2]["geo_id"] = "G1"
        with pytest.raises(UniquenessError, match="G1"):
            load_geo_panel(_panel_csv(tmp_path, rows))

    def test_negative_cell_named(self, tmp_path):
        rows = _rows()
        rows[1]["rev_w3"] = -5
        with pytest.raises(DataError, match=r"G2.*rev_w3"):
            load_geo_panel(_panel_csv(tmp_path, rows))

    def test_non_numeric_cell(self, tmp_path):
        rows = _rows()
        rows[0]["spend_w2"] = "abc"
        with pytest.raises(DataError, match=r"G1.*spend_w2"):
            load_geo_panel(_panel_csv(tmp_path, rows))

    def test_missing_column(self, tmp_path):
        rows = [{k: v for k, v in r.items() if k != "geo_id"} for r in _rows()]
        with pytest.raises(SchemaError):
            load_geo_panel(_panel_csv(tmp_path, rows))

    def test_missing_declared_covariate(self, tmp_path):
        with pytest.raises(SchemaError):
            load_geo_panel(_panel_csv(tmp_path, _rows()), {"covariates": ["income"]})

    def test_round_trip(self, tmp_path):
        cfg = DgpConfig(n_geos=12, seed=4)
        panel = synthetic_panel(generate_synthetic(cfg), cfg)
        write_geo_panel(panel, tmp_path / "x.csv")
        back = load_geo_panel(tmp_path / "x.csv")
        assert back.geo_ids == panel.geo_ids
        np.testing.assert_allclose(back.revenue, panel.revenue, atol=1e-6)
        np.testing.assert_allclose(back.static_covariates, panel.static_covariates, atol=1e-6)


class TestPanelInvariants:
    def test_one_week_rejected(self):
        with pytest.raises(DataError):
            GeoPanel(["a", "b"], np.ones((2, 1)), np.ones((2, 1)), np.zeros((2, 0)))

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            GeoPanel(["a", "b"], np.ones((2, 3)), np.ones((2, 4)), np.zeros((2, 0)))


class TestSynthetic:
    def test_effect_identity(self):
        cfg = DgpConfig(n_geos=200, seed=3)
        r, s, tau = geo_arrays(generate_synthetic(cfg))
        expect = cfg.true_iroas * s * (1 + cfg.het_scale * (r / r.mean() - 1))
        np.testing.assert_allclose(tau / expect, 1.0, rtol=0, atol=1e-15)
        assert np.max(np.abs(tau - expect)) <= 1e-9 * np.max(np.abs(tau))

    def test_homogeneous(self):
        r, s, tau = geo_arrays(generate_synthetic(DgpConfig(n_geos=50, het_scale=0.0, seed=1)))
        np.testing.assert_allclose(tau, 2.0 * s, rtol=1e-15)

    def test_lognormal_moments(self):
        r, _, _ = geo_arrays(generate_synthetic(DgpConfig(n_geos=10_000, seed=42)))
        logs = np.log(r)
        assert abs(logs.mean() - 10) < 0.02
        assert abs(logs.std(ddof=1) - 0.5) < 0.02

    def test_potential_outcomes(self):
        for g in generate_synthetic(DgpConfig(n_geos=20, seed=0)):
            y0, y1 = g.potential_outcomes
            assert y0 == g.baseline_revenue and y1 - y0 == pytest.approx(g.true_effect, rel=1e-12)
            assert g.baseline_revenue > 0 and g.spend > 0

    def test_bit_reproducible(self):
        a = generate_synthetic(DgpConfig(n_geos=30, seed=9))
        b = generate_synthetic(DgpConfig(n_geos=30, seed=9))
        assert a == b

    def test_positive_spend_under_huge_noise(self):
        _, s, _ = geo_arrays(generate_synthetic(DgpConfig(n_geos=500, spend_noise_sd=0.8, seed=2)))
        assert np.all(s > 0)

    @pytest.mark.parametrize("kw", [{"sigma": 0}, {"spend_ratio": 0}, {"n_geos": 3}])
    def test_config_invariants(self, kw):
        with pytest.raises(ValueError):
            DgpConfig(**kw)


def _flat_panel(series):
    series = np.atleast_2d(np.asarray(series, dtype=float))
    n = series.shape[0]
    return GeoPanel([f"g{i}" for i in range(n)], series, np.ones_like(series), np.zeros((n, 0)))


class TestFeatures:
    def test_constant_series(self):
        raw = raw_series_features(_flat_panel([[5.0] * 12]), FeatureSpec())
        # mean, variance, slope, 3 Fourier magnitudes
        assert raw.shape == (1, 6)
        assert raw[0, 1] == 0 and np.all(raw[0, 3:] == 0)

    def test_pure_cosine(self):
        weeks = 24
        t = np.arange(weeks)
        y = 100 + 7 * np.cos(2 * np.pi * t / weeks)
        mags = raw_series_features(_flat_panel([y]), FeatureSpec())[0, 3:]
        # independent DFT oracle: |X_k| * 2 / T
        oracle = np.abs(np.fft.rfft(y - y.mean()))[1:4] * 2 / weeks
        np.testing.assert_allclose(mags, oracle, atol=1e-9)
        assert mags[0] == pytest.approx(7.0) and mags[0] > 100 * mags[1:].max()

    def test_trend_slope(self):
        y = 3.0 + 0.5 * np.arange(10)
        raw = raw_series_features(_flat_panel([y]), FeatureSpec(fourier=False))
        assert raw[0, 2] == pytest.approx(0.5)

    def test_identical_geos_identical_rows(self):
        cfg = DgpConfig(n_geos=10, seed=1)
        panel = synthetic_panel(generate_synthetic(cfg), cfg)
        rev = panel.revenue.copy()
        rev[1] = rev[0]
        cov = panel.static_covariates.copy()
        cov[1] = cov[0]
        p2 = GeoPanel(panel.geo_ids, rev, panel.spend, cov, panel.covariate_names)
        f = engineer_features(p2)
        np.testing.assert_array_equal(f[0], f[1])

    def test_insufficient_weeks(self):
        with pytest.raises(InsufficientDataError):
            engineer_features(_flat_panel([[1.0, 2.0, 3.0, 4.0]] * 3), FeatureSpec(fourier_order=3))

    def test_dimension_follows_flags(self):
        cfg = DgpConfig(n_geos=8, seed=1)
        panel = synthetic_panel(generate_synthetic(cfg), cfg)
        assert engineer_features(panel, FeatureSpec()).shape == (8, 3 + 3 + 2)
        assert engineer_features(panel, FeatureSpec(fourier_order=1, static=False)).shape == (8, 4)

    @given(hnp.arrays(np.float64, (7, 10), elements=st.floats(0, 1e6, allow_nan=False)))
    def test_standardised_columns(self, rev):
        panel = _flat_panel(rev)
        f = engineer_features(panel, FeatureSpec(fourier_order=2))
        assert np.all(np.abs(f.mean(axis=0)) < 1e-9)
        sds = f.std(axis=0)
        assert np.all((sds == 0) | (np.abs(sds - 1) < 1e-9))

    def test_holdout_target(self):
        cfg = DgpConfig(n_geos=10, seed=1, weeks=20)
        panel = synthetic_panel(generate_synthetic(cfg), cfg)
        head, target = split_for_embedding(panel, 0.2)
        assert head.weeks == 16
        np.testing.assert_allclose(target.mean(), 0, atol=1e-12)
        np.testing.assert_allclose(target.std(), 1)


class TestGraph:
    def test_triangle(self):
        g = build_geo_graph(np.array([[0.0], [1.0], [3.0]]), 2)
        a = g.adjacency
        assert np.all(a[~np.eye(3, dtype=bool)] > 0)
        np.testing.assert_array_equal(a, a.T)

    def test_identical_weight_one(self):
        x = np.array([[0.0, 1.0], [0.0, 1.0], [5.0, 2.0], [7.0, -1.0]])
        assert build_geo_graph(x, 1).adjacency[0, 1] == 1.0

    def test_planted_clusters_disconnected(self):
        rng = np.random.default_rng(0)
        x = np.vstack([rng.normal(0, 1, (10, 3)), rng.normal(100, 1, (10, 3))])
        a = build_geo_graph(x, 3).adjacency
        assert np.all(a[:10, 10:] == 0)

    def test_kernel_weights(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 2))
        a = build_geo_graph(x, 5).adjacency
        d2 = ((x[:, None] - x[None]) ** 2).sum(-1)
        med = np.median(d2[~np.eye(6, dtype=bool)])
        expect = np.exp(-d2 / med)
        np.fill_diagonal(expect, 0)
        np.testing.assert_allclose(a, expect, rtol=1e-12)

    @pytest.mark.parametrize("k", [0, 5])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            build_geo_graph(np.zeros((5, 2)), k)

    @given(hnp.arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(1, 4)),
                      elements=st.floats(-100, 100, allow_nan=False)),
           st.integers(1, 11))
    def test_graph_invariants(self, x, k):
        k = min(k, x.shape[0] - 1)
        a = build_geo_graph(x, k).adjacency
        np.testing.assert_array_equal(a, a.T)
        assert np.all(np.diag(a) == 0)
        off = a[a != 0]
        assert np.all((off > 0) & (off <= 1))
        # every node keeps at least its k outgoing edges after symmetrisation
        assert np.all((a > 0).sum(axis=1) >= k)
