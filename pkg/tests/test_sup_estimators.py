"""Test Monte Carlo estimators and bound reports for expected suprema."""

import numpy as np
import pytest

from volsup.errors import DomainError, InputError, UsageError
from volsup.path_types import TimeGrid
from volsup.sup_estimators import (
    AFFINE_CAVEAT,
    DOOB_CONSTANT,
    BoundReport,
    MCEstimate,
    Verdict,
    affine_sup_bound,
    doob_l1_check,
    estimate_sup,
    generic_sup_bound,
    geometric_cauchy_test,
    lognormal_xlogplus_mean,
    martingale_check,
    rbergomi_sup_bound,
    refinement_study,
    reverse_l1_check,
    share_measure_check,
    tail_sums,
    weighted_ks_statistic,
    weighted_ks_test,
)
from volsup.sv_models import (
    AffineVolterraParams,
    RoughBergomiParams,
    affine_mean_curve,
    linear_growth_spec,
    simulate_gbm,
)
from volsup.volterra_kernel import PowerLawKernel


# ==============================================================================
# Estimates and verdicts
# ==============================================================================


class TestMCEstimate:
    """Test sample means with standard errors."""

    def test_from_samples(self):
        """Test the mean and standard error of a small sample."""
        est = MCEstimate.from_samples([1.0, 2.0, 3.0])
        assert est.mean == pytest.approx(2.0)
        assert est.stderr == pytest.approx(1.0 / np.sqrt(3.0))
        assert est.n == 3

    def test_too_few_samples(self):
        """Test that one sample has no standard error."""
        with pytest.raises(UsageError, match="at least 2"):
            MCEstimate.from_samples([1.0])

    def test_nan_samples(self):
        """Test that NaN samples are refused."""
        with pytest.raises(InputError, match="NaN"):
            MCEstimate.from_samples([1.0, np.nan])

    def test_scaled(self):
        """Test an affine transform of the estimate."""
        est = MCEstimate(2.0, 0.5, 10).scaled(-2.0, 1.0)
        assert (est.mean, est.stderr, est.n) == (-3.0, 1.0, 10)

    def test_martingale_check(self):
        """Test that a centred terminal sample passes."""
        samples = np.tile([0.9, 1.1], 500)
        assert martingale_check(samples, 1.0).ok
        assert not martingale_check(samples + 1.0, 1.0).ok


class TestBoundReport:
    """Test one-sided verdicts."""

    @pytest.mark.parametrize(
        "rhs, expected",
        [(1.2, Verdict.HOLDS), (0.95, Verdict.WITHIN_NOISE), (0.5, Verdict.VIOLATED)],
    )
    def test_upper_verdicts(self, rhs, expected):
        """Test the three verdict bands for an upper bound."""
        report = BoundReport(lhs=MCEstimate(1.0, 0.1, 100), rhs=rhs)
        assert report.verdict == expected

    def test_lower_direction(self):
        """Test that a lower bound flips the sign of the gap."""
        report = BoundReport(lhs=MCEstimate(1.0, 0.01, 100), rhs=2.0, direction="lower")
        assert report.verdict == Verdict.VIOLATED
        assert report.slack == pytest.approx(1.0)

    def test_combined_stderr(self):
        """Test that both sides contribute to the standard error."""
        report = BoundReport(
            lhs=MCEstimate(1.0, 0.3, 100), rhs=MCEstimate(2.0, 0.4, 100)
        )
        assert report.stderr == pytest.approx(0.5)

    def test_bad_direction(self):
        """Test that the direction is validated."""
        with pytest.raises(UsageError, match="direction"):
            BoundReport(lhs=MCEstimate(1.0, 0.1, 10), rhs=1.0, direction="both")

    def test_rows_include_secondary(self):
        """Test that a secondary report adds a row."""
        secondary = BoundReport(lhs=MCEstimate(1.0, 0.1, 10), rhs=3.0, label="loose")
        report = BoundReport(lhs=MCEstimate(1.0, 0.1, 10), rhs=2.0, secondary=secondary)
        rows = report.to_rows()
        assert [row["check"] for row in rows] == ["bound", "loose"]
        assert rows[1]["verdict"] == "holds"


# ==============================================================================
# Doob and reverse L1
# ==============================================================================


class TestDoobL1:
    """Test Doob's L1 inequality and its reverse."""

    def test_xlogplus_closed_form_matches_quadrature(self):
        """Test the closed form of E[X log+ X] against quadrature."""
        closed = lognormal_xlogplus_mean(0.8, 1.5)
        quad = lognormal_xlogplus_mean(0.8, 1.5, method="quad")
        assert closed == pytest.approx(quad, abs=1e-8)

    def test_xlogplus_degenerate(self):
        """Test that sigma = 0 gives zero."""
        assert lognormal_xlogplus_mean(0.0, 1.0) == 0.0

    def test_unknown_method(self):
        """Test that the method name is validated."""
        with pytest.raises(UsageError, match="unknown method"):
            lognormal_xlogplus_mean(0.5, 1.0, method="series")

    def test_doob_holds_for_gbm(self):
        """Test that GBM paths satisfy Doob's L1 inequality."""
        paths = simulate_gbm(1.0, TimeGrid(1.0, 64), 4000, seed=1)
        report = doob_l1_check(paths, 1.0)
        assert report.verdict == Verdict.HOLDS
        assert report.lhs.n == 4000
        assert report.rhs_value == pytest.approx(
            DOOB_CONSTANT * (report.extra["xlogx"].mean + 1.0)
        )

    def test_doob_needs_positive_paths(self):
        """Test that a non-positive path is refused."""
        paths = np.array([[1.0, 0.0, 2.0], [1.0, 1.5, 2.0]])
        with pytest.raises(InputError, match="positive"):
            doob_l1_check(paths, 1.0)

    def test_doob_needs_positive_start(self):
        """Test that X0 must be positive."""
        with pytest.raises(InputError, match="X0"):
            doob_l1_check(np.ones((2, 3)), 0.0)

    def test_reverse_l1_small_sample(self):
        """Test the reverse inequality on hand-made samples."""
        report = reverse_l1_check([2.0, 3.0], [1.0, 1.0])
        assert report.direction == "lower"
        assert report.rhs_value == pytest.approx(1.0)
        assert report.verdict == Verdict.HOLDS

    def test_reverse_l1_needs_unit_start(self):
        """Test that X0 must be one."""
        with pytest.raises(DomainError, match="X0 = 1"):
            reverse_l1_check([2.0, 3.0], [1.0, 1.0], X0=2.0)

    def test_reverse_l1_length_mismatch(self):
        """Test that samples must pair up."""
        with pytest.raises(UsageError):
            reverse_l1_check([2.0, 3.0, 4.0], [1.0, 1.0])

    def test_reverse_l1_negative_closing(self):
        """Test that closing values must be non-negative."""
        with pytest.raises(InputError, match="non-negative"):
            reverse_l1_check([2.0, 3.0], [1.0, -1.0])

    def test_estimate_sup(self):
        """Test grid maxima of explicit paths."""
        est = estimate_sup(np.array([[0.0, 2.0, 1.0], [0.0, 1.0, 4.0]]))
        assert est.mean == pytest.approx(3.0)


# ==============================================================================
# Share-measure bounds
# ==============================================================================


class TestShareMeasure:
    """Test share-measure bounds and the law check."""

    @pytest.fixture
    def params(self):
        return RoughBergomiParams(alpha=0.7, eta=1.5, rho=-0.7, v0=0.04)

    def test_rbergomi_bound_holds(self, params):
        """Test that the rough Bergomi sup bound holds on a coarse grid."""
        report = rbergomi_sup_bound(params, 1.0, 2000, seed=3, n_steps=32)
        assert [r.verdict for r in report.reports()] == [Verdict.HOLDS, Verdict.HOLDS]
        assert report.secondary.rhs_value == pytest.approx(DOOB_CONSTANT * 1.02)
        assert report.extra["martingale"].estimate.n == 2000

    def test_rbergomi_bound_is_reproducible(self, params):
        """Test that the same seed gives the same estimate."""
        first = rbergomi_sup_bound(params, 1.0, 300, seed=3, n_steps=16)
        second = rbergomi_sup_bound(params, 1.0, 300, seed=3, n_steps=16)
        assert first.lhs == second.lhs

    def test_generic_bound_holds(self):
        """Test a linear-growth model with and without a variance bound."""
        spec = linear_growth_spec(PowerLawKernel(alpha=0.7, eta=1.0))
        report = generic_sup_bound(spec, 1.0, 1000, seed=4, n_steps=16)
        assert report.label == "generic-sup"
        assert report.secondary is None
        assert report.verdict == Verdict.HOLDS
        bounded = generic_sup_bound(
            spec, 1.0, 1000, seed=4, n_steps=16, integrated_variance=0.05
        )
        assert bounded.lhs == report.lhs
        assert bounded.secondary.rhs_value == pytest.approx(DOOB_CONSTANT * 1.025)

    def test_affine_bound_holds(self):
        """Test the affine bound and its caveat on a coarse grid."""
        p = AffineVolterraParams(
            a1=0.002, b0=0.02, b1=-0.5, y0=0.04, alpha=0.6, eta=1.0
        )
        report = affine_sup_bound(p, 1.0, 1000, seed=6, n_steps=16)
        assert [r.verdict for r in report.reports()] == [Verdict.HOLDS, Verdict.HOLDS]
        assert report.caveat == AFFINE_CAVEAT
        assert report.secondary.oracle == "monte-carlo"

    def test_affine_variance_bound_uses_tilted_paths(self):
        """Test that the variance bound integrates v~ along the simulated paths."""
        p = AffineVolterraParams(a1=0.0, b0=0.02, b1=-0.5, y0=0.04, alpha=0.6, eta=1.0)
        grid = TimeGrid(1.0, 16)
        report = affine_sup_bound(p, 1.0, 200, seed=2, n_steps=16)
        # without noise v~ is the deterministic mean curve
        curve = affine_mean_curve(p, grid).values
        integral = curve[:-1].sum() * grid.step
        assert report.secondary.oracle == "monte-carlo"
        assert isinstance(report.secondary.rhs, MCEstimate)
        assert report.secondary.rhs_value == pytest.approx(
            DOOB_CONSTANT * (1.0 + 0.5 * integral), rel=1e-9
        )
        assert "mean_curve_integral" in report.extra

    @pytest.mark.integration
    def test_share_measure_law(self, params):
        """Test that weighting by S_T moves Y_T closer to Y~_T than no weighting."""
        report = share_measure_check(
            params, 1.0, 10000, seed=5, n_steps=32, n_resamples=199
        )
        assert report.control.rejects
        assert report.statistic < report.control.statistic
        assert list(report.ecdf.columns) == ["x", "weighted", "reference"]


class TestWeightedKS:
    """Test the weighted Kolmogorov-Smirnov statistic and bootstrap."""

    def test_identical_samples(self):
        """Test that identical samples never reject."""
        x = np.linspace(-1.0, 1.0, 200)
        report = weighted_ks_test(x, np.ones_like(x), x, n_resamples=49)
        assert report.statistic == 0.0
        assert report.p_value == 1.0
        assert report.warning is None

    def test_shifted_samples_reject(self):
        """Test that a large location shift rejects."""
        rng = np.random.default_rng(0)
        x = rng.normal(size=300)
        report = weighted_ks_test(x, np.ones_like(x), x + 3.0, n_resamples=199)
        assert report.rejects

    def test_exponential_tilt(self):
        """Test that exp(x - 1/2) weights turn N(0, 1) into N(1, 1)."""
        rng = np.random.default_rng(1)
        x = rng.normal(size=4000)
        y = rng.normal(loc=1.0, size=4000)
        assert weighted_ks_statistic(x, np.exp(x - 0.5), y) < 0.12
        assert weighted_ks_statistic(x, np.ones_like(x), y) > 0.3

    def test_low_ess_warning(self):
        """Test the effective sample size warning."""
        x = np.arange(50.0)
        report = weighted_ks_test(x, np.ones_like(x), x, n_resamples=9)
        assert report.ess == pytest.approx(50.0)
        assert "effective sample size" in report.warning

    def test_length_mismatch(self):
        """Test that all inputs must have the same length."""
        with pytest.raises(UsageError, match="same length"):
            weighted_ks_test([1.0, 2.0], [1.0, 1.0], [1.0])

    def test_negative_weights(self):
        """Test that weights must be non-negative."""
        with pytest.raises(InputError, match="weights"):
            weighted_ks_test([1.0, 2.0], [1.0, -1.0], [1.0, 2.0])


# ==============================================================================
# Tail sums and refinement
# ==============================================================================


class TestTailSums:
    """Test partial sums of sup tail probabilities."""

    def test_partial_sums(self):
        """Test s_N on a hand-made sample."""
        report = tail_sums([0.5, 2.5, 10.0], N_ladder=(1, 2, 4))
        np.testing.assert_allclose(report.partial_sums, [2 / 3, 4 / 3, 2.0])
        assert report.table["tail_prob"].iloc[-1] == pytest.approx(1 / 3)

    def test_infinite_sup_diverges(self):
        """Test that an infinite supremum makes the sums grow linearly."""
        report = tail_sums([np.inf, 1.0], N_ladder=(2, 4, 8, 16))
        np.testing.assert_allclose(report.partial_sums, [1.0, 2.0, 4.0, 8.0])
        assert report.divergent

    def test_bad_ladder(self):
        """Test that the ladder must increase strictly."""
        with pytest.raises(UsageError, match="N_ladder"):
            tail_sums([1.0, 2.0], N_ladder=(1, 4, 2))

    def test_cauchy_test(self):
        """Test the divergence heuristic on linear and geometric ladders."""
        assert geometric_cauchy_test([1.0, 2.0, 3.0, 4.0])
        assert not geometric_cauchy_test([1.0, 1.5, 1.75, 1.875])
        with pytest.raises(UsageError):
            geometric_cauchy_test([1.0, 2.0])

    def test_refinement_study(self):
        """Test the refinement table on fixed path sources."""
        sources = {
            2: np.array([[0.0, 1.0, 0.5], [0.0, 2.0, 1.0]]),
            4: np.array([[0.0, 1.5], [0.0, 2.5]]),
        }
        table = refinement_study(sources.__getitem__, [2, 4])
        assert table["mean"].tolist() == [1.5, 2.0]
        assert table["change"].iloc[1] == pytest.approx(0.5)
        assert table["consistent"].all()
