"""Data-generating processes and the coverage experiment runner."""

import numpy as np
import pytest

from shiftshare import (
    DgpConfig,
    ShiftShareWarning,
    ValidationError,
    generate,
    run_coverage,
    shiftshare_2sls,
)
from shiftshare.simulate import ESTIMATORS


class TestGenerate:
    def test_deterministic_given_seed(self):
        cfg = DgpConfig(n=40, m=15, beta_true=2.0, seed=9)
        a = generate(cfg)
        b = generate(cfg)
        assert np.array_equal(a.shares.weights, b.shares.weights)
        assert np.array_equal(a.shifts.values, b.shifts.values)
        assert np.array_equal(a.dataset.outcome, b.dataset.outcome)
        c = generate(DgpConfig(n=40, m=15, beta_true=2.0, seed=10))
        assert not np.array_equal(a.dataset.outcome, c.dataset.outcome)

    def test_noiseless_limit(self):
        cfg = DgpConfig(n=30, m=12, beta_true=1.5, error_sd=0.0, seed=3)
        data = generate(cfg)
        assert np.allclose(data.dataset.outcome, 1.5 * data.dataset.regressor, atol=1e-14)
        assert np.array_equal(data.dataset.regressor, data.instrument)

    def test_dirichlet_rows_complete(self):
        data = generate(DgpConfig(n=80, m=25, seed=1))
        assert np.max(np.abs(data.shares.row_sums() - 1.0)) < 1e-12

    def test_sparse_block_rows_complete(self):
        data = generate(DgpConfig(n=60, m=24, share_model="sparse-block",
                                  n_blocks=6, seed=2))
        assert np.max(np.abs(data.shares.row_sums() - 1.0)) < 1e-12
        # block structure: each row has support inside exactly one block
        support = data.shares.weights > 0
        blocks = np.array_split(np.arange(24), 6)
        for row in support:
            hits = [row[cols].any() for cols in blocks]
            assert sum(hits) == 1

    def test_network_four_cycle(self):
        data = generate(DgpConfig(n=4, m=4, share_model="network-inverse-degree", seed=0))
        w = data.shares.weights
        assert np.all(np.sort(w, axis=1)[:, -2:] == 0.5)
        assert np.all(np.sort(w, axis=1)[:, :-2] == 0.0)
        assert np.all(np.diag(w) == 0.0)

    def test_network_seeding_is_binary(self):
        cfg = DgpConfig(n=30, m=30, share_model="network-inverse-degree",
                        shift_model="bernoulli", seeding_prob=0.4, seed=4)
        data = generate(cfg)
        assert set(np.unique(data.shifts.values)) <= {0.0, 1.0}

    def test_clustered_shift_labels(self):
        data = generate(DgpConfig(n=20, m=12, shift_model="clustered",
                                  n_shift_clusters=4, shift_rho=0.6, seed=5))
        assert data.shifts.cluster is not None
        assert len(set(data.shifts.cluster.tolist())) == 4

    def test_exchangeable_group_labels(self):
        data = generate(DgpConfig(n=20, m=12, shift_model="exchangeable-groups",
                                  n_exchange_groups=3, seed=6))
        assert data.shifts.exchange_group is not None
        assert len(set(data.shifts.exchange_group.tolist())) == 3

    def test_share_correlated_error_fraction(self):
        # the latent component should carry about the configured share of
        # total error variance on average
        cfg = DgpConfig(n=150, m=40, share_model="sparse-block", n_blocks=8,
                        error_model="share-correlated", share_error_frac=0.5,
                        error_sd=1.0, seed=7)
        ratios = []
        for rep in range(200):
            data = generate(cfg, _path=(rep,))
            u = data.truth.latent_error_shock
            shared = data.shares.weights @ u
            shared = shared * np.sqrt(
                0.5 / np.mean(np.sum(data.shares.weights**2, axis=1))
            )
            ratios.append(np.var(shared) / np.var(data.truth.errors))
        assert 0.3 < np.mean(ratios) < 0.7

    def test_first_stage_noise_and_pi(self):
        cfg = DgpConfig(n=50, m=10, pi_sd=0.3, first_stage_noise_sd=0.5,
                        first_stage_endog=0.5, seed=8)
        data = generate(cfg)
        assert data.truth.pi is not None
        assert not np.array_equal(data.dataset.regressor, data.instrument)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValidationError):
            DgpConfig(n=10, m=5, shift_rho=1.0)
        with pytest.raises(ValidationError):
            DgpConfig(n=10, m=5, share_model="nope")
        with pytest.raises(ValidationError):
            DgpConfig(n=10, m=8, share_model="network-inverse-degree")
        with pytest.raises(ValidationError):
            DgpConfig(n=10, m=5, share_error_frac=1.5)


class TestRunCoverage:
    def test_noiseless_recovers_truth_for_all_estimators(self):
        cfg = DgpConfig(n=40, m=16, beta_true=-0.8, error_sd=0.0, seed=0)
        results = run_coverage(cfg, ["conventional-hc", "exposure-robust"],
                               replications=120, seed=5)
        for r in results:
            assert abs(r.mean_bias) < 1e-10
            assert r.n_failed == 0

    def test_identical_data_across_estimators(self):
        cfg = DgpConfig(n=50, m=20, seed=0)
        seen = {}

        def capture(tag):
            def fn(data):
                seen.setdefault(tag, []).append(data.dataset.outcome.copy())
                rep = shiftshare_2sls(data.dataset, data.instrument)
                return rep.beta_hat, rep.se_variants["conventional_hc"]
            return fn

        results = run_coverage(cfg, [("a", capture("a")), ("b", capture("b"))],
                               replications=100, seed=3)
        assert all(np.array_equal(x, y) for x, y in zip(seen["a"], seen["b"]))
        assert results[0].coverage95 == results[1].coverage95

    def test_failures_counted_and_excluded(self):
        cfg = DgpConfig(n=30, m=10, seed=0)
        calls = {"k": 0}

        def flaky(data):
            calls["k"] += 1
            if calls["k"] % 3 == 0:
                from shiftshare.errors import EstimationError
                raise EstimationError("synthetic failure")
            rep = shiftshare_2sls(data.dataset, data.instrument)
            return rep.beta_hat, rep.se_variants["conventional_hc"]

        results = run_coverage(cfg, [("flaky", flaky)], replications=120, seed=1)
        assert results[0].n_failed == 40
        assert results[0].replications == 120

    def test_low_replications_warn(self):
        cfg = DgpConfig(n=20, m=8, seed=0)
        with pytest.warns(ShiftShareWarning, match="replications"):
            run_coverage(cfg, ["conventional-hc"], replications=50, seed=0)

    def test_unknown_estimator_rejected(self):
        cfg = DgpConfig(n=20, m=8, seed=0)
        with pytest.raises(ValidationError, match="unknown estimator"):
            run_coverage(cfg, ["nope"], replications=100, seed=0)

    def test_iid_conventional_coverage_band(self):
        # quick version of the calibration run; the acceptance suite runs the
        # full-size experiment
        cfg = DgpConfig(n=200, m=50, beta_true=1.0, error_model="iid", seed=0)
        results = run_coverage(cfg, ["conventional-hc"], replications=300, seed=7)
        assert 0.90 <= results[0].coverage95 <= 0.99

    def test_registry_exposes_documented_estimators(self):
        assert {"conventional-hc", "exposure-robust", "exposure-cluster"} <= set(ESTIMATORS)


class TestEstimatorVariants:
    def test_unit_clustering_still_undercovers_with_share_errors(self):
        cfg = DgpConfig(n=200, m=300, beta_true=1.0, share_model="sparse-block",
                        n_blocks=10, error_model="share-correlated",
                        share_error_frac=0.5, seed=0)
        results = {r.estimator: r for r in run_coverage(
            cfg, ["conventional-cluster", "exposure-cluster"],
            replications=300, seed=11)}
        assert results["conventional-cluster"].coverage95 < 0.92
        assert results["exposure-cluster"].coverage95 > results[
            "conventional-cluster"].coverage95

    def test_exposure_cluster_runs_with_clustered_shifts(self):
        cfg = DgpConfig(n=120, m=60, shift_model="clustered", n_shift_clusters=12,
                        shift_rho=0.4, seed=2)
        results = run_coverage(cfg, ["exposure-cluster"], replications=100, seed=3)
        assert results[0].n_failed == 0
        assert np.isfinite(results[0].coverage95)
