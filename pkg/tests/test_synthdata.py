import numpy as np
import pytest

from copad import synthdata as sd


def scenario(**kw):
    defaults = dict(d_gen=4, length=4000, dependency_strength=0.9,
                    anomaly_dependency_shift=0.5, anomaly_fraction=0.1,
                    anomaly_span_range=(0.25, 0.5), seed=0)
    defaults.update(kw)
    return sd.ScenarioConfig(**defaults)


class TestGenerate:
    def test_deterministic_per_seed(self):
        a = sd.generate_latent_series(scenario(seed=42))
        b = sd.generate_latent_series(scenario(seed=42))
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.labels, b.labels)
        assert a.events == b.events

    def test_labels_match_events_exactly(self):
        s = sd.generate_latent_series(scenario(seed=3))
        expected = np.zeros_like(s.labels)
        for start, end in s.events:
            expected[start:end] = 1
        assert np.array_equal(s.labels, expected)
        # events are disjoint and ordered
        for (s0, e0), (s1, e1) in zip(s.events, s.events[1:]):
            assert e0 < s1

    def test_anomaly_fraction_hit(self):
        s = sd.generate_latent_series(scenario(seed=1, length=10000))
        assert s.labels.mean() == pytest.approx(0.1, abs=0.002)

    def test_zero_shift_degeneracy(self):
        cfg = scenario(anomaly_dependency_shift=0.0, seed=7)
        rng = np.random.default_rng(cfg.seed)
        b_norm, b_anom = sd.transition_matrices(cfg, rng)
        assert np.array_equal(b_norm, b_anom)

    def test_matched_spectral_radius(self):
        cfg = scenario(anomaly_dependency_shift=1.5, seed=5)
        rng = np.random.default_rng(cfg.seed)
        b_norm, b_anom = sd.transition_matrices(cfg, rng)
        r_norm = np.max(np.abs(np.linalg.eigvals(b_norm)))
        r_anom = np.max(np.abs(np.linalg.eigvals(b_anom)))
        assert r_norm == pytest.approx(0.95 * 0.9, rel=1e-12)
        assert r_anom == pytest.approx(r_norm, rel=1e-10)
        assert not np.allclose(b_norm, b_anom)

    def test_zero_coupling_white_noise(self):
        s = sd.generate_latent_series(
            scenario(dependency_strength=0.0, length=20000, seed=2))
        z = s.values
        for j in range(z.shape[1]):
            x = z[:-1, j] - z[:-1, j].mean()
            y = z[1:, j] - z[1:, j].mean()
            rho = np.dot(x, y) / np.sqrt(np.dot(x, x) * np.dot(y, y))
            assert abs(rho) <= 3.0 / np.sqrt(len(x))

    def test_stability_long_run(self):
        s = sd.generate_latent_series(scenario(length=100000, seed=9))
        assert np.abs(s.values).max() <= 1e3

    def test_unattainable_fraction(self):
        with pytest.raises(ValueError):
            sd.generate_latent_series(scenario(length=5, anomaly_fraction=0.01))


class TestMarginalWarp:
    def test_identity_pipeline(self):
        warp = sd.WarpConfig(scale_range=(1.0, 1.0), shift_range=(0.0, 0.0),
                             num_warps=0, noise_sigma=0.0)
        x = np.random.default_rng(0).normal(size=(50, 3))
        out = sd.apply_marginal_warp(x, slice(0, 50), warp, seed=1)
        assert np.array_equal(out, x)

    def test_power_warp_with_unit_exponent_is_identity(self):
        x = np.random.default_rng(1).normal(size=(20, 2))
        warp = sd.WarpConfig(power_range=(1.0, 1.0))
        # draw stages until the power branch comes up; it must act as identity
        for seed in range(50):
            rng = np.random.default_rng(seed)
            if rng.integers(0, 3) == 0:
                out = sd._nonlinear_stage(x, warp, np.random.default_rng(seed))
                assert np.allclose(out, x, atol=1e-15)
                return
        pytest.fail("power branch never sampled")

    def test_untouched_rows_bit_exact(self):
        warp = sd.WarpConfig()
        x = np.random.default_rng(2).normal(size=(100, 3))
        out = sd.apply_marginal_warp(x, slice(30, 60), warp, seed=4)
        assert np.array_equal(out[:30], x[:30])
        assert np.array_equal(out[60:], x[60:])
        assert not np.array_equal(out[30:60], x[30:60])

    def test_noise_variance_oracle(self):
        warp = sd.WarpConfig(scale_range=(1.0, 1.0), shift_range=(0.0, 0.0),
                             num_warps=0, noise_sigma=0.1, noise_amplitude=0.0)
        n = 10000
        x = np.zeros((n, 2))
        out = sd.apply_marginal_warp(x, slice(0, n), warp, seed=5)
        var = (out - x).var()
        assert abs(var - 0.01) <= 0.2 * 0.01

    def test_empty_rows_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            sd.apply_marginal_warp(np.zeros((10, 2)), slice(5, 5),
                                   sd.WarpConfig(), seed=0)

    def test_warp_events_only_touches_events(self):
        s = sd.generate_latent_series(scenario(seed=11))
        warped = sd.warp_events(s, sd.WarpConfig(), seed=0)
        normal = s.labels == 0
        assert np.array_equal(warped.values[normal], s.values[normal])
        assert not np.array_equal(warped.values[~normal], s.values[~normal])

    def test_warp_segments_covers_everything(self):
        s = sd.generate_latent_series(scenario(seed=12, length=1000))
        warped = sd.warp_segments(s, sd.WarpConfig(noise_sigma=0.5), seed=0,
                                  num_segments=4)
        # noise makes every row move almost surely
        assert np.all(np.any(warped.values != s.values, axis=1))


class TestLocalPerturbation:
    def test_hand_interpolation(self):
        snippet = np.array([[1.0, 10.0], [3.0, 30.0]])
        out = sd.resize_snippet(snippet, 3)
        assert np.allclose(out, [[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])

    def test_resize_same_length_exact(self):
        snippet = np.random.default_rng(0).normal(size=(7, 3))
        assert np.array_equal(sd.resize_snippet(snippet, 7), snippet)

    def test_identity_overlay(self):
        length = 4
        snippet = np.arange(8.0).reshape(length, 2)
        window = np.zeros((length, 2))
        for seed in range(500):
            out = sd.local_perturbation(window, [snippet], 0.0, (1.0, 1.0),
                                        0, seed)
            if np.array_equal(out, snippet):
                return
        pytest.fail("no seed selected the whole window as the interval")

    def test_locality(self):
        rng = np.random.default_rng(3)
        window = rng.normal(size=(20, 3))
        snippet = rng.normal(size=(6, 3))
        out = sd.local_perturbation(window, [snippet], 0.1, (0.95, 1.05),
                                    2, seed=8)
        changed = np.any(out != window, axis=1)
        idx = np.flatnonzero(changed)
        # the changed rows form one contiguous interval
        assert idx.size > 0
        assert np.array_equal(idx, np.arange(idx[0], idx[-1] + 1))
        outside = np.ones(20, dtype=bool)
        outside[idx[0]:idx[-1] + 1] = False
        assert np.array_equal(out[outside], window[outside])

    def test_feature_mismatch(self):
        with pytest.raises(ValueError, match="features"):
            sd.local_perturbation(np.zeros((10, 3)), [np.zeros((4, 2))],
                                  0.0, (1.0, 1.0), 0, seed=0)

    def test_empty_pool(self):
        with pytest.raises(ValueError, match="pool"):
            sd.local_perturbation(np.zeros((10, 3)), [], 0.0, (1.0, 1.0),
                                  0, seed=0)


class TestRobustnessContrast:
    def test_copula_score_moves_less_than_gaussian_under_marginal_warp(self):
        # With no dependency shift, warping the marginals of anomaly spans
        # should barely move a rank-based copula score while shifting a
        # multivariate-Gaussian score substantially.
        from copad import dependency as dep

        s = sd.generate_latent_series(
            scenario(seed=21, length=4000, anomaly_dependency_shift=0.0))
        warp = sd.WarpConfig(noise_sigma=0.05)
        warped = sd.warp_events(s, warp, seed=1)

        normal_rows = s.values[s.labels == 0]
        mu, sigma = normal_rows.mean(axis=0), normal_rows.std(axis=0)
        corr = np.corrcoef(((normal_rows - mu) / sigma).T)
        chol = sd.np.linalg.cholesky(corr)
        d = s.values.shape[1]

        cop = dep.DependencyModel.create("copula", "gaussian", d,
                                         marginal_mode="empirical")
        cop.chol_params = type(cop.chol_params)(dep.pack_cholesky(chol))
        cop.set_standardization(mu, sigma)
        cop.set_reference(normal_rows)

        mv = dep.DependencyModel.create("multivariate", "gaussian", d)
        mv.chol_params = type(mv.chol_params)(dep.pack_cholesky(chol))
        mv.set_standardization(mu, sigma)

        anom = s.labels == 1
        deltas_cop, deltas_mv = [], []
        for before, after in zip(s.values[anom][::20], warped.values[anom][::20]):
            deltas_cop.append(abs(dep.score(after, cop) - dep.score(before, cop)))
            deltas_mv.append(abs(dep.score(after, mv) - dep.score(before, mv)))
        ratio = np.median(deltas_cop) / np.median(deltas_mv)
        assert ratio < 1.0


class TestPresets:
    def test_shift_ordering(self):
        s1 = sd.case_preset(1).anomaly_dependency_shift
        s2 = sd.case_preset(2).anomaly_dependency_shift
        s3 = sd.case_preset(3).anomaly_dependency_shift
        assert s2 > s1 > s3

    def test_case3_shifts_levels_upward(self):
        # case 3 anomalies are marked by a positive level shift, so marginal
        # scorers can find them
        lo, hi = sd.case_preset(3).warp.shift_range
        assert lo > 0.0 and hi > lo

    def test_serialization_round_trip(self):
        for case in (1, 2, 3):
            cfg = sd.case_preset(case)
            assert sd.ScenarioConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_case(self):
        with pytest.raises(ValueError, match="case"):
            sd.case_preset(4)


class TestSidecars:
    def test_csv_and_events_round_trip(self, tmp_path):
        s = sd.generate_latent_series(scenario(seed=6, length=500))
        csv_path = tmp_path / "series.csv"
        ev_path = tmp_path / "series.events"
        sd.write_series_csv(s, csv_path)
        sd.write_events(s.events, ev_path)

        header = csv_path.read_text().splitlines()[0]
        assert header == "timestamp,f1,f2,f3,f4,label"
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1)
        assert np.array_equal(data[:, 1:-1], s.values)
        assert np.array_equal(data[:, -1].astype(int), s.labels)
        assert sd.read_events(ev_path) == list(s.events)
