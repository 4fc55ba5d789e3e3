"""Tests for the statistical verification suites."""

import json
import math

import numpy as np
import pytest

from dgs.diagnostics import (
    CheckReport,
    check_conditional_score,
    check_gradient_unbiasedness,
    check_multistep_marginals,
    run_all_checks,
)
from dgs.mixtures import ring_2d, two_mode_1d
from dgs.sampling import OracleDenoiser, edm_schedule


class TestCheckReport:
    def test_string_rendering(self):
        report = CheckReport(check="demo", passed=True, statistic=1e-6, threshold=1e-4, trials=10)
        assert "demo: PASS" in str(report)
        report = CheckReport(check="demo", passed=False, statistic=1.0, threshold=1e-4, trials=10)
        assert "FAIL" in str(report)

    def test_json_round_trip(self):
        report = check_conditional_score(trials=5)
        blob = json.dumps(report.to_dict())
        assert json.loads(blob)["check"] == "conditional-score-identity"


class TestConditionalScoreCheck:
    def test_passes_across_dimensions(self):
        report = check_conditional_score(trials=120)
        assert report.passed
        assert report.statistic < 1e-6
        assert report.details["worst_case"]["dim"] in (1, 2, 4)

    def test_zero_trials_passes_vacuously(self):
        report = check_conditional_score(trials=0)
        assert report.passed
        assert report.statistic == 0.0

    def test_threshold_actually_gates(self):
        report = check_conditional_score(trials=40, threshold=1e-16)
        assert not report.passed

    def test_deterministic_given_seed(self):
        a = check_conditional_score(trials=30, seed=9)
        b = check_conditional_score(trials=30, seed=9)
        assert a.statistic == b.statistic


class TestMultistepMarginalCheck:
    def test_oracle_chain_passes_in_2d(self):
        report = check_multistep_marginals(gmm=ring_2d(), n=8192, seed=1)
        assert report.passed
        assert report.details["metric"] == "energy"
        assert len(report.details["levels"]) == 8

    def test_oracle_chain_passes_in_1d(self):
        report = check_multistep_marginals(gmm=two_mode_1d(), n=8192, seed=2)
        assert report.passed
        assert report.details["metric"] == "ks"
        assert report.statistic < 0.02

    @pytest.mark.parametrize("zeta", [0.0, 1.0])
    def test_extreme_mixing_factors_stay_exact(self, zeta):
        report = check_multistep_marginals(gmm=ring_2d(), n=4096, zeta=zeta, seed=3, energy_threshold=8e-3)
        assert report.passed

    def test_detects_a_wrong_denoiser(self):
        # an oracle for a shifted mixture is a broken sampler for the ring
        wrong = OracleDenoiser(ring_2d(radius=2.5))
        report = check_multistep_marginals(gmm=ring_2d(), n=2048, seed=4, denoiser=wrong)
        assert not report.passed
        assert report.statistic > 10 * report.threshold

    def test_short_schedule_supported(self):
        schedule = edm_schedule(3, 0.1, 5.0, 3.0)
        report = check_multistep_marginals(gmm=ring_2d(), schedule=schedule, n=4096, seed=5, energy_threshold=8e-3)
        assert report.passed
        assert len(report.details["levels"]) == 3


class TestGradientUnbiasednessCheck:
    def test_generic_generator_matches_closed_form(self):
        report = check_gradient_unbiasedness(trials=150_000, seed=0)
        assert report.passed
        assert report.statistic <= 3.0
        assert report.details["matched_max_abs"] < 1e-10

    def test_zero_trials_passes_vacuously(self):
        report = check_gradient_unbiasedness(trials=0)
        assert report.passed
        assert report.trials == 0

    @pytest.mark.parametrize("gen", [(1.3, 0.2, 0.9), (0.2, -0.8, 0.3)])
    def test_other_operating_points(self, gen):
        report = check_gradient_unbiasedness(trials=150_000, seed=7, gen=gen)
        assert report.passed, report.details["z_scores"]

    def test_estimates_track_expectations(self):
        report = check_gradient_unbiasedness(trials=100_000, seed=1)
        expected = np.array(report.details["expected"])
        estimated = np.array(report.details["estimated"])
        se = np.array(report.details["standard_errors"])
        assert np.all(np.abs(expected - estimated) <= 3.0 * se)

    def test_degenerate_noise_scale_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            check_gradient_unbiasedness(trials=10, gen=(1.0, 0.0, 0.0))


class TestRunAllChecks:
    def test_fast_suite_all_pass(self):
        reports = run_all_checks(seed=0, fast=True)
        assert len(reports) == 3
        assert all(r.passed for r in reports)
        assert {r.check for r in reports} == {
            "conditional-score-identity",
            "multistep-marginal-exactness",
            "gradient-unbiasedness",
        }
