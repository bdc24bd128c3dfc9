"""Test power-law kernels, quadrature weights and the Volterra solvers."""

import numpy as np
import pytest

from volsup.errors import DomainError, InputError, NumericError, UsageError
from volsup.path_types import PathBatch, SamplePath, TimeGrid
from volsup.volterra_kernel import (
    DriftSpec,
    PowerLawKernel,
    continuity_report,
    euler_svie,
    kernel_eval,
    kernel_l1,
    kernel_l2,
    pathwise_bounds,
    quad_weights,
    solve_pathwise,
)


@pytest.fixture
def kernel():
    return PowerLawKernel(alpha=0.7, eta=1.5)


@pytest.fixture
def grid():
    return TimeGrid(1.0, 64)


# ==============================================================================
# Kernel evaluation
# ==============================================================================


class TestPowerLawKernel:
    """Test the kernel and its closed-form integrals."""

    def test_rejects_alpha_at_half(self):
        """Test that alpha = 1/2 is outside the square-integrable range."""
        with pytest.raises(DomainError, match="alpha must be > 1/2"):
            PowerLawKernel(alpha=0.5, eta=1.0)

    def test_rejects_nonpositive_eta(self):
        """Test that eta must be positive."""
        with pytest.raises(DomainError, match="eta"):
            PowerLawKernel(alpha=0.7, eta=0.0)

    def test_kernel_eval_value(self, kernel):
        """Test K(t, s) against the power law."""
        expected = 1.5 * np.sqrt(0.4) * 0.25 ** (-0.3)
        assert kernel_eval(kernel, 0.5, 0.25) == pytest.approx(expected, rel=1e-14)

    def test_kernel_eval_on_diagonal(self, kernel):
        """Test that the diagonal is refused."""
        with pytest.raises(DomainError, match="s < t"):
            kernel_eval(kernel, 0.5, 0.5)

    def test_kernel_eval_negative_s(self, kernel):
        """Test that negative s is refused."""
        with pytest.raises(DomainError):
            kernel_eval(kernel, 0.5, -0.1)

    def test_alpha_one_is_constant(self):
        """Test that alpha = 1 gives the flat kernel eta."""
        k = PowerLawKernel(alpha=1.0, eta=2.0)
        assert kernel_eval(k, 3.0, 0.1) == pytest.approx(2.0)
        assert kernel_l1(k, 3.0) == pytest.approx(6.0)

    def test_kernel_l1_closed_form(self, kernel):
        """Test int_0^t K(t, s) ds."""
        t = 0.8
        expected = kernel.scale * t**0.7 / 0.7
        assert kernel_l1(kernel, t) == pytest.approx(expected, rel=1e-14)
        assert kernel_l1(kernel, 0.0) == 0.0

    def test_kernel_l2_is_variance(self, kernel):
        """Test int_0^t K^2 ds = eta^2 t^(2 alpha - 1)."""
        assert kernel_l2(kernel, 0.25) == pytest.approx(2.25 * 0.25**0.4, rel=1e-14)

    def test_window_l1_matches_full_integral(self, kernel):
        """Test that the full window reproduces kernel_l1."""
        assert kernel.window_l1(0.9, 0.0, 0.9) == pytest.approx(kernel_l1(kernel, 0.9))

    def test_negative_time(self, kernel):
        """Test that negative t is refused by the closed forms."""
        with pytest.raises(DomainError):
            kernel_l1(kernel, -1.0)
        with pytest.raises(DomainError):
            kernel_l2(kernel, -1.0)


# ==============================================================================
# Continuity diagnostics
# ==============================================================================


class TestContinuityReport:
    """Test window integrals and fitted exponents."""

    def test_gamma_hat_equals_alpha(self, kernel):
        """Test that the sup-window exponent recovers alpha."""
        eps = [2.0**-j for j in range(1, 11)]
        report = continuity_report(kernel, 1.0, eps)
        assert report.gamma_hat == pytest.approx(0.7, abs=1e-6)
        assert report.gamma_l2 == pytest.approx(0.4, abs=1e-6)

    def test_window_table_closed_form(self, kernel):
        """Test sup_window_l1 = scale / alpha * eps^alpha."""
        eps = [0.5, 0.1, 0.01]
        report = continuity_report(kernel, 1.0, eps)
        expected = kernel.scale / 0.7 * np.asarray(eps) ** 0.7
        np.testing.assert_allclose(report.table["sup_window_l1"], expected, rtol=1e-12)
        columns = ["eps", "sup_window_l1", "window_l2", "shift_l1"]
        assert list(report.table.columns) == columns

    def test_h0_gamma_is_smallest(self, kernel):
        """Test that h0_gamma takes the smaller of the two H0 exponents."""
        report = continuity_report(kernel, 1.0, [2.0**-j for j in range(2, 9)])
        assert report.h0_gamma == min(report.gamma_l2, report.gamma_shift)

    def test_empty_eps_list(self, kernel):
        """Test that an empty eps list is a usage error."""
        with pytest.raises(UsageError, match="must not be empty"):
            continuity_report(kernel, 1.0, [])

    def test_non_decreasing_eps_list(self, kernel):
        """Test that eps must decrease strictly."""
        with pytest.raises(UsageError, match="decreasing"):
            continuity_report(kernel, 1.0, [0.1, 0.1])

    def test_nonpositive_eps(self, kernel):
        """Test that eps must be positive."""
        with pytest.raises(UsageError, match="positive"):
            continuity_report(kernel, 1.0, [0.5, 0.0])

    def test_single_eps_has_no_slope(self, kernel):
        """Test that one window leaves the exponents undefined."""
        report = continuity_report(kernel, 1.0, [0.1])
        assert np.isnan(report.gamma_hat)


# ==============================================================================
# Quadrature weights
# ==============================================================================


class TestQuadWeights:
    """Test exact interval weights."""

    def test_rows_sum_to_kernel_mass(self, kernel, grid):
        """Test that row i integrates K(t_i, .) over [0, t_i]."""
        weights = quad_weights(kernel, grid)
        expected = [kernel_l1(kernel, t) for t in grid.nodes]
        np.testing.assert_allclose(weights.w.sum(axis=1), expected, rtol=1e-12)

    def test_squared_l2_rows_sum_to_variance(self, kernel, grid):
        """Test that the squared L2 masses add up to kernel_l2."""
        weights = quad_weights(kernel, grid)
        expected = [kernel_l2(kernel, t) for t in grid.nodes]
        np.testing.assert_allclose((weights.l2**2).sum(axis=1), expected, rtol=1e-12)

    def test_upper_triangle_is_zero(self, kernel, grid):
        """Test that no weight falls on k >= i."""
        weights = quad_weights(kernel, grid)
        assert weights.w.shape == (65, 64)
        assert np.all(np.triu(weights.w) == 0.0)

    def test_weights_are_read_only(self, kernel, grid):
        """Test that cached weights cannot be modified."""
        weights = quad_weights(kernel, grid)
        with pytest.raises(ValueError):
            weights.w[1, 0] = 0.0

    def test_empty_grid(self, kernel):
        """Test the zero-step grid."""
        weights = quad_weights(kernel, TimeGrid(1.0, 0))
        assert weights.w.shape == (1, 0)

    def test_blended_preserves_row_sums(self, kernel, grid):
        """Test that theta only moves weight within the last interval."""
        weights = quad_weights(kernel, grid)
        W = weights.blended(0.5)
        assert W.shape == (65, 65)
        np.testing.assert_allclose(W.sum(axis=1), weights.w.sum(axis=1), rtol=1e-13)
        assert W[3, 3] == pytest.approx(0.5 * weights.w[3, 2])


# ==============================================================================
# Pathwise solver
# ==============================================================================


def _forcing(grid, n_paths=8, seed=1):
    rng = np.random.default_rng(seed)
    steps = rng.normal(size=(n_paths, grid.n_steps + 1))
    return PathBatch(grid, np.cumsum(steps, axis=1))


class TestSolvePathwise:
    """Test the solver for X = Z - int K g(X) ds."""

    def test_constant_drift(self, kernel, grid):
        """Test that a constant g subtracts c times the kernel mass."""
        Z = _forcing(grid)
        g = DriftSpec(lambda t, y: 0.3 + 0.0 * y, name="const")
        X = solve_pathwise(Z, kernel, g)
        mass = np.array([kernel_l1(kernel, t) for t in grid.nodes])
        np.testing.assert_allclose(
            X.values, Z.values - 0.3 * mass, rtol=1e-12, atol=1e-12
        )

    def test_zero_drift_is_identity(self, kernel, grid):
        """Test that g = 0 returns Z."""
        Z = _forcing(grid)
        X = solve_pathwise(Z, kernel, DriftSpec(lambda t, y: 0.0 * y))
        np.testing.assert_array_equal(X.values, Z.values)

    @pytest.mark.parametrize("theta", [0.0, 0.5, 1.0])
    def test_bounds_hold(self, kernel, grid, theta):
        """Test lower <= X <= Z for an increasing drift."""
        Z = _forcing(grid)
        g = DriftSpec(lambda t, y: np.exp(0.1 * y), name="exp")
        X = solve_pathwise(Z, kernel, g, theta=theta)
        lower, upper = pathwise_bounds(Z, kernel, g, theta=theta)
        assert np.all(X.values <= upper.values)
        assert np.all(lower.values <= X.values + 1e-9)

    def test_sample_path_in_sample_path_out(self, kernel, grid):
        """Test that a single path keeps its type."""
        Z = SamplePath(grid, np.linspace(0.0, 1.0, grid.n_steps + 1))
        X = solve_pathwise(Z, kernel, DriftSpec(lambda t, y: np.exp(0.1 * y)))
        assert isinstance(X, SamplePath)

    def test_theta_out_of_range(self, kernel, grid):
        """Test that theta must lie in [0, 1]."""
        with pytest.raises(DomainError, match="theta"):
            solve_pathwise(
                _forcing(grid), kernel, DriftSpec(lambda t, y: 0.0 * y), theta=1.5
            )

    def test_negative_drift_rejected(self, kernel, grid):
        """Test that a negative g is refused."""
        with pytest.raises(InputError, match="negative"):
            g = DriftSpec(lambda t, y: y, name="identity")
            solve_pathwise(_forcing(grid), kernel, g)

    def test_decreasing_drift_rejected(self, kernel, grid):
        """Test that a decreasing g is refused when monotonicity is required."""
        g = DriftSpec(lambda t, y: np.exp(-y), name="decay")
        with pytest.raises(InputError, match="non-decreasing"):
            solve_pathwise(_forcing(grid), kernel, g)

    def test_decreasing_drift_allowed(self, kernel, grid):
        """Test that the monotonicity check can be relaxed to a warning."""
        g = DriftSpec(lambda t, y: np.exp(-0.1 * y), name="decay")
        assert g.validate(require_monotone=False) is False
        X = solve_pathwise(_forcing(grid), kernel, g, require_monotone=False)
        assert np.isfinite(X.values).all()

    def test_nan_forcing(self, kernel, grid):
        """Test that NaN in Z is an input error."""
        Z = _forcing(grid)
        Z.values[0, 5] = np.nan
        with pytest.raises(InputError, match="NaN"):
            solve_pathwise(Z, kernel, DriftSpec(lambda t, y: 0.0 * y))

    def test_fixed_point_failure(self, kernel, grid):
        """Test that a capped fixed-point iteration reports failure."""
        g = DriftSpec(lambda t, y: np.exp(0.5 * y), name="steep")
        with pytest.raises(NumericError, match="did not converge"):
            solve_pathwise(_forcing(grid), kernel, g, theta=1.0, tol=0.0, max_iter=1)

    def test_linear_ode_limit(self):
        """Test alpha = eta = 1, Z = 1, g = max(x, 0) against X_t = exp(-t)."""
        k = PowerLawKernel(alpha=1.0, eta=1.0)
        grid = TimeGrid(1.0, 512)
        g = DriftSpec(lambda t, y: np.maximum(y, 0.0), name="positive part")
        X = solve_pathwise(SamplePath(grid, np.ones(513)), k, g)
        assert np.max(np.abs(X.values - np.exp(-grid.nodes))) <= 5e-3

    @pytest.mark.parametrize("theta", [0.0, 1.0])
    def test_ode_error_halves_with_grid(self, theta):
        """Test that doubling the grid roughly halves the error against exp(-t)."""
        k = PowerLawKernel(alpha=1.0, eta=1.0)
        g = DriftSpec(lambda t, y: np.maximum(y, 0.0), name="positive part")
        errors = []
        for n in (64, 128, 256, 512):
            grid = TimeGrid(1.0, n)
            X = solve_pathwise(SamplePath(grid, np.ones(n + 1)), k, g, theta=theta)
            errors.append(np.max(np.abs(X.values - np.exp(-grid.nodes))))
        ratios = np.array(errors[:-1]) / np.array(errors[1:])
        assert (ratios > 1.6).all()
        assert (ratios < 2.5).all()

    def test_rough_kernel_converges_under_doubling(self, kernel):
        """Test that successive grid doublings move the solution less and less."""
        g = DriftSpec(lambda t, y: np.maximum(y, 0.0), name="positive part")
        solutions = []
        for n in (32, 64, 128, 256):
            Z = SamplePath(TimeGrid(1.0, n), np.ones(n + 1))
            solutions.append(solve_pathwise(Z, kernel, g))
        # compare on the coarsest grid's nodes
        coarse = [X.values[:: X.grid.n_steps // 32] for X in solutions]
        moves = [np.max(np.abs(a - b)) for a, b in zip(coarse[:-1], coarse[1:])]
        assert moves[1] < 0.8 * moves[0]
        assert moves[2] < 0.8 * moves[1]


# ==============================================================================
# Euler scheme
# ==============================================================================


class TestEulerSVIE:
    """Test the Euler scheme for stochastic Volterra equations."""

    def test_deterministic_drift(self, kernel, grid):
        """Test that sigma = 0 and constant b give y0 + b int K."""
        dB = np.zeros((3, grid.n_steps))
        Y = euler_svie(
            kernel, lambda t, y: 0.2 + 0.0 * y, lambda t, y: 0.0 * y, 0.04, dB, grid
        )
        mass = np.array([kernel_l1(kernel, t) for t in grid.nodes])
        expected = 0.04 + 0.2 * np.tile(mass, (3, 1))
        np.testing.assert_allclose(Y.values, expected, rtol=1e-12)

    def test_single_path(self, kernel, grid):
        """Test that 1-D increments give a SamplePath."""
        dB = np.full(grid.n_steps, 0.01)
        Y = euler_svie(
            kernel, lambda t, y: 0.0 * y, lambda t, y: 1.0 + 0.0 * y, 0.0, dB, grid
        )
        assert isinstance(Y, SamplePath)
        assert Y.values[0] == 0.0

    def test_variance_of_additive_noise(self, kernel):
        """Test that additive noise reproduces Var(Y_T) = eta^2 T^(2 alpha - 1)."""
        grid = TimeGrid(1.0, 32)
        rng = np.random.default_rng(7)
        dB = rng.normal(scale=np.sqrt(grid.step), size=(20000, grid.n_steps))
        Y = euler_svie(
            kernel, lambda t, y: 0.0 * y, lambda t, y: 1.0 + 0.0 * y, 0.0, dB, grid
        )
        assert Y.values[:, -1].var() == pytest.approx(kernel_l2(kernel, 1.0), rel=0.05)

    def test_increment_mismatch(self, kernel, grid):
        """Test that dB must match the grid."""
        with pytest.raises(UsageError, match="increments"):
            euler_svie(
                kernel,
                lambda t, y: 0.0 * y,
                lambda t, y: 0.0 * y,
                0.0,
                np.zeros(grid.n_steps - 1),
                grid,
            )

    def test_nan_coefficient(self, kernel, grid):
        """Test that a NaN coefficient is a numerical failure."""
        with pytest.raises(NumericError, match="NaN"):
            euler_svie(
                kernel,
                lambda t, y: np.full_like(y, np.nan),
                lambda t, y: 0.0 * y,
                0.0,
                np.zeros(grid.n_steps),
                grid,
            )
