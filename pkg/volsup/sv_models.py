"""
Stochastic volatility models driven by Volterra processes.

This module provides:
- Exact joint Gaussian sampling of the Riemann-Liouville field and its
  driving Brownian increments (stacked Cholesky factor)
- The rough Bergomi model and its share-measure process Y~ / v~
- Generic stochastic volatility models built on the Euler SVIE scheme
- Affine Volterra (rough Heston type) models with full truncation
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterator, Optional, Union

import numpy as np
from scipy import linalg
from scipy.integrate import quad
from scipy.special import hyp2f1

from .config import Config
from .errors import DomainError, InputError, NumericError
from .path_types import PathBatch, SamplePath, TimeGrid
from .simulation_engine import RunOptions, StreamTag, simulation
from .volterra_kernel import (
    DriftSpec,
    PowerLawKernel,
    QuadWeights,
    euler_svie,
    evaluate_coefficient,
    quad_weights,
    solve_pathwise,
)

logger = logging.getLogger(__name__)

Paths = Union[SamplePath, PathBatch]


# ==============================================================================
# Riemann-Liouville field
# ==============================================================================


def rl_covariance(k: PowerLawKernel, t: float, u: float) -> float:
    """Cov(Y_t, Y_u) for the Riemann-Liouville process Y_t = int_0^t K(t, s) dB_s.

    Off the diagonal the Ito isometry integral is evaluated by adaptive
    quadrature with an algebraic endpoint weight for the integrable singularity.

    Raises:
        DomainError: If t or u is negative
    """
    if t < 0 or u < 0:
        raise DomainError(f"times must be non-negative, got t={t}, u={u}")
    lo, hi = min(t, u), max(t, u)
    if lo == 0:
        return 0.0
    if lo == hi:
        return float(k.eta**2 * lo ** (2 * k.alpha - 1))
    a = k.alpha - 1
    # (hi - s)^a is smooth on [0, lo]; (lo - s)^a goes into the weight
    value, _ = quad(
        lambda s: (hi - s) ** a,
        0.0,
        lo,
        weight="alg",
        wvar=(0.0, a),
        epsabs=0.0,
        epsrel=Config.TOLERANCES["quad_rtol"],
    )
    return float(k.eta**2 * (2 * k.alpha - 1) * value)


def rl_covariance_matrix(k: PowerLawKernel, nodes: np.ndarray) -> np.ndarray:
    """Closed-form covariance of Y at strictly positive nodes.

    Uses eta^2 (2 alpha - 1) t^alpha u^(alpha - 1) / alpha * 2F1(1 - alpha, 1; 1 + alpha; t / u)
    for t < u and eta^2 t^(2 alpha - 1) on the diagonal.
    """
    t = np.asarray(nodes, dtype=float)
    lo = np.minimum.outer(t, t)
    hi = np.maximum.outer(t, t)
    a = k.alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        z = lo / hi
        off = (
            k.eta**2
            * (2 * a - 1)
            * lo**a
            * hi ** (a - 1)
            / a
            * hyp2f1(1 - a, 1.0, 1 + a, z)
        )
    cov = np.where(lo == hi, k.eta**2 * lo ** (2 * a - 1), off)
    return np.where(lo == 0, 0.0, cov)


def driver_covariance(k: PowerLawKernel, grid: TimeGrid) -> np.ndarray:
    """Covariance of the stacked vector (Y_{t_1..t_n}, dB_1..dB_n)."""
    n = grid.n_steps
    nodes = grid.nodes[1:]
    weights = quad_weights(k, grid)
    sigma = np.zeros((2 * n, 2 * n))
    sigma[:n, :n] = rl_covariance_matrix(k, nodes)
    # Cov(Y_{t_i}, dB_j) is the kernel mass of interval j seen from t_i
    cross = np.asarray(weights.w[1:, :])
    sigma[:n, n:] = cross
    sigma[n:, :n] = cross.T
    sigma[n:, n:] = grid.step * np.eye(n)
    return sigma


@lru_cache(maxsize=8)
def driver_factor(k: PowerLawKernel, grid: TimeGrid) -> np.ndarray:
    """Lower Cholesky factor of ``driver_covariance``, cached per (kernel, grid).

    Raises:
        NumericError: If the factorization fails even after diagonal jitter
    """
    sigma = driver_covariance(k, grid)
    if sigma.size == 0:
        return sigma
    try:
        factor = linalg.cholesky(sigma, lower=True)
    except linalg.LinAlgError:
        jitter = Config.TOLERANCES["cholesky_jitter"]
        logger.info(
            "driver covariance not positive definite; adding jitter %.1e", jitter
        )
        try:
            factor = linalg.cholesky(sigma + jitter * np.eye(len(sigma)), lower=True)
        except linalg.LinAlgError:
            smallest = float(linalg.eigvalsh(sigma)[0])
            raise NumericError(
                f"Cholesky factorization of the driver covariance failed; "
                f"smallest eigenvalue {smallest:.3e}"
            ) from None
    factor.setflags(write=False)
    return factor


@dataclass
class GaussianDriver:
    """One chunk of jointly sampled (Y, dB) plus independent dW_perp increments."""

    grid: TimeGrid
    Y: PathBatch
    dB: np.ndarray
    dW_perp: np.ndarray
    seed: Optional[int] = None
    chunk_index: int = 0

    def price_increments(self, rho: float) -> np.ndarray:
        """dW = rho dB + sqrt(1 - rho^2) dW_perp, correlated with the field's noise."""
        return rho * self.dB + np.sqrt(1 - rho**2) * self.dW_perp


def driver_chunk(
    k: PowerLawKernel,
    grid: TimeGrid,
    rng: np.random.Generator,
    size: int,
    seed: Optional[int] = None,
    chunk_index: int = 0,
) -> GaussianDriver:
    n = grid.n_steps
    factor = driver_factor(k, grid)
    normals = rng.standard_normal((size, 2 * n))
    joint = normals @ factor.T
    dW_perp = rng.standard_normal((size, n)) * np.sqrt(grid.step)
    Y = np.zeros((size, n + 1))
    Y[:, 1:] = joint[:, :n]
    return GaussianDriver(
        grid, PathBatch(grid, Y), joint[:, n:], dW_perp, seed, chunk_index
    )


def sample_driver(
    k: PowerLawKernel,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    options: Optional[RunOptions] = None,
) -> Iterator[GaussianDriver]:
    """Stream drivers chunk by chunk; reproducible given the seed."""
    sim = simulation(n_paths, seed, StreamTag.DRIVER, options, desc="Sampling drivers")
    return sim.imap(
        lambda rng, size, index: driver_chunk(k, grid, rng, size, seed, index)
    )


# ==============================================================================
# Rough Bergomi
# ==============================================================================


@dataclass(frozen=True)
class RoughBergomiParams:
    alpha: float
    eta: float
    rho: float
    v0: float
    s0: float = 1.0
    xi0: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        PowerLawKernel(self.alpha, self.eta)
        if self.rho > 0:
            raise DomainError(f"rho must be ≤ 0, got {self.rho}")
        if self.rho < -1:
            raise DomainError(f"rho must be ≥ -1, got {self.rho}")
        if not self.v0 > 0:
            raise DomainError(f"v0 must be > 0, got {self.v0}")
        if not self.s0 > 0:
            raise DomainError(f"s0 must be > 0, got {self.s0}")

    @property
    def kernel(self) -> PowerLawKernel:
        return PowerLawKernel(self.alpha, self.eta)

    def forward_variance(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.xi0 is None:
            return np.full(t.shape, self.v0)
        curve = np.broadcast_to(np.asarray(self.xi0(t), dtype=float), t.shape)
        if (curve < 0).any():
            raise InputError("forward variance curve must be non-negative")
        return curve

    def integrated_forward_variance(self, T: float) -> float:
        if self.xi0 is None:
            return self.v0 * T
        value, _ = quad(lambda s: float(self.forward_variance(s)), 0.0, T)
        return float(value)


def _same_kind(template: Paths, values: np.ndarray) -> Paths:
    if isinstance(template, SamplePath):
        return SamplePath(template.grid, values.reshape(-1))
    return PathBatch(template.grid, values, flags=template.flags.copy())


def rbergomi_variance(p: RoughBergomiParams, Y: Paths) -> Paths:
    """v_t = xi0(t) exp(Y_t - eta^2 / 2 t^(2 alpha - 1))."""
    t = Y.grid.nodes
    compensator = 0.5 * p.eta**2 * t ** (2 * p.alpha - 1)
    v = p.forward_variance(t) * np.exp(np.asarray(Y.values) - compensator)
    return _same_kind(Y, v)


def simulate_price(v: Paths, dW: np.ndarray, s0: float) -> Paths:
    """Log-Euler price: log S_{i+1} = log S_i + sqrt(v_i) dW_i - v_i dt / 2.

    Raises:
        InputError: If v has a negative entry
    """
    if not s0 > 0:
        raise DomainError(f"s0 must be > 0, got {s0}")
    values = np.atleast_2d(v.values)
    if (values < 0).any():
        raise InputError("variance path has negative entries")
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    n = v.grid.n_steps
    if dW.shape != (values.shape[0], n):
        raise InputError(f"dW has shape {dW.shape}, expected {(values.shape[0], n)}")
    left = values[:, :-1]
    log_inc = np.sqrt(left) * dW - 0.5 * left * v.grid.step
    log_s = np.zeros_like(values)
    log_s[:, 1:] = np.cumsum(log_inc, axis=1)
    return _same_kind(v, s0 * np.exp(log_s))


def rbergomi_drift(p: RoughBergomiParams) -> DriftSpec:
    """g(t, y) = |rho| sqrt(xi0(t)) exp(y / 2 - eta^2 / 4 t^(2 alpha - 1))."""

    def g(t, y):
        t = np.asarray(t, dtype=float)
        root = np.sqrt(p.forward_variance(t))
        exponent = 0.5 * y - 0.25 * p.eta**2 * t ** (2 * p.alpha - 1)
        return abs(p.rho) * root * np.exp(exponent)

    return DriftSpec(g, name="rbergomi")


def simulate_tilde_y(
    p: RoughBergomiParams,
    driver: GaussianDriver,
    weights: Optional[QuadWeights] = None,
) -> PathBatch:
    """Share-measure driver Y~ = Y - int K |rho| sqrt(v~) ds, so Y~ <= Y pathwise."""
    if p.rho > 0:
        raise DomainError(f"rho must be ≤ 0, got {p.rho}")
    if p.rho == 0:
        return PathBatch(driver.grid, driver.Y.values.copy())
    return solve_pathwise(driver.Y, p.kernel, rbergomi_drift(p), weights=weights)


@dataclass
class ModelPaths:
    """One chunk of a stochastic volatility simulation.

    ``dW`` are the price increments; ``tilde_y`` / ``tilde_v`` are the
    share-measure processes driven by the same noise.
    """

    Y: PathBatch
    v: PathBatch
    S: PathBatch
    tilde_y: PathBatch
    tilde_v: PathBatch
    dW: np.ndarray

    @property
    def grid(self) -> TimeGrid:
        return self.Y.grid

    def lemma_functional(self) -> np.ndarray:
        """Per path sum sqrt(v~) dW + 1/2 sum v~ dt, the share-measure log-price."""
        left = self.tilde_v.values[:, :-1]
        stochastic = (np.sqrt(left) * self.dW).sum(axis=1)
        return stochastic + 0.5 * left.sum(axis=1) * self.grid.step


def rbergomi_chunk(
    p: RoughBergomiParams, driver: GaussianDriver, weights: Optional[QuadWeights] = None
) -> ModelPaths:
    v = rbergomi_variance(p, driver.Y)
    dW = driver.price_increments(p.rho)
    S = simulate_price(v, dW, p.s0)
    tilde_y = simulate_tilde_y(p, driver, weights)
    return ModelPaths(driver.Y, v, S, tilde_y, rbergomi_variance(p, tilde_y), dW)


def simulate_rbergomi(
    p: RoughBergomiParams,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    options: Optional[RunOptions] = None,
) -> Iterator[ModelPaths]:
    k = p.kernel
    weights = quad_weights(k, grid)

    def run(rng, size, index):
        return rbergomi_chunk(p, driver_chunk(k, grid, rng, size, seed, index), weights)

    sim = simulation(n_paths, seed, StreamTag.DRIVER, options, desc="Rough Bergomi")
    return sim.imap(run)


# ==============================================================================
# Generic stochastic volatility models
# ==============================================================================


@dataclass(frozen=True)
class GenericSVSpec:
    """Y solves the Volterra equation with coefficients b, sigma; v = f(t, Y)."""

    kernel: PowerLawKernel
    f: Callable
    b: Callable
    sigma: Callable
    y0: float
    rho: float
    s0: float = 1.0

    def __post_init__(self):
        if not -1 <= self.rho <= 1:
            raise DomainError(f"rho must lie in [-1, 1], got {self.rho}")
        if not self.s0 > 0:
            raise DomainError(f"s0 must be > 0, got {self.s0}")
        f0 = float(evaluate_coefficient(self.f, 0.0, np.asarray(self.y0, dtype=float)))
        if not f0 > 0:
            raise DomainError(f"f(0, y0) must be > 0, got {f0}")

    def tilted_drift(self) -> Callable:
        """b + rho sqrt(f) sigma, the drift of Y~."""

        def drift(t, y):
            root = np.sqrt(evaluate_coefficient(self.f, t, y))
            b = evaluate_coefficient(self.b, t, y)
            return b + self.rho * root * evaluate_coefficient(self.sigma, t, y)

        return drift


def linear_growth_spec(
    kernel: PowerLawKernel,
    v0: float = 0.04,
    b0: float = 0.0,
    b1: float = -0.5,
    sigma0: float = 1.0,
    sigma1: float = 0.0,
    y0: float = 0.0,
    rho: float = -0.7,
    s0: float = 1.0,
) -> GenericSVSpec:
    """Lipschitz coefficients of linear growth with link f(t, y) = v0 sqrt(1 + y^2).

    sqrt(f) has bounded derivative, so b + rho sqrt(f) sigma stays Lipschitz.
    """
    return GenericSVSpec(
        kernel=kernel,
        f=lambda t, y: v0 * np.sqrt(1.0 + np.square(y)),
        b=lambda t, y: b0 + b1 * y,
        sigma=lambda t, y: sigma0 + sigma1 * y,
        y0=y0,
        rho=rho,
        s0=s0,
    )


def _link(spec_f: Callable, Y: PathBatch) -> PathBatch:
    t = Y.grid.nodes[None, :]
    v = evaluate_coefficient(spec_f, t, Y.values)
    if np.isnan(v).any():
        raise NumericError("link function returned NaN")
    if (v < 0).any():
        raise InputError("link function returned a negative variance")
    return PathBatch(Y.grid, np.array(v))


def correlated_increments(
    rng: np.random.Generator, size: int, grid: TimeGrid, rho: float
):
    """(dW, dB) with dB = rho dW + sqrt(1 - rho^2) dW_bar."""
    root_h = np.sqrt(grid.step)
    dW = rng.standard_normal((size, grid.n_steps)) * root_h
    dW_bar = rng.standard_normal((size, grid.n_steps)) * root_h
    return dW, rho * dW + np.sqrt(1 - rho**2) * dW_bar


def simulate_generic_tilde_y(
    spec: GenericSVSpec,
    dB: np.ndarray,
    grid: TimeGrid,
    weights: Optional[QuadWeights] = None,
) -> Paths:
    """Y~ under the share measure: same noise, drift b + rho sqrt(f) sigma."""
    drift = spec.tilted_drift()
    return euler_svie(spec.kernel, drift, spec.sigma, spec.y0, dB, grid, weights)


def generic_sv_chunk(
    spec: GenericSVSpec,
    grid: TimeGrid,
    rng: np.random.Generator,
    size: int,
    weights: Optional[QuadWeights] = None,
) -> ModelPaths:
    weights = weights or quad_weights(spec.kernel, grid)
    dW, dB = correlated_increments(rng, size, grid, spec.rho)
    Y = euler_svie(spec.kernel, spec.b, spec.sigma, spec.y0, dB, grid, weights)
    tilde_y = simulate_generic_tilde_y(spec, dB, grid, weights)
    v = _link(spec.f, Y)
    S = simulate_price(v, dW, spec.s0)
    return ModelPaths(Y, v, S, tilde_y, _link(spec.f, tilde_y), dW)


def simulate_generic_sv(
    spec: GenericSVSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    options: Optional[RunOptions] = None,
) -> Iterator[ModelPaths]:
    weights = quad_weights(spec.kernel, grid)
    sim = simulation(n_paths, seed, StreamTag.GENERIC_SV, options, desc="Generic SV")
    return sim.imap(
        lambda rng, size, index: generic_sv_chunk(spec, grid, rng, size, weights)
    )


# ==============================================================================
# Affine Volterra models
# ==============================================================================


@dataclass(frozen=True)
class AffineVolterraParams:
    """Y = Y0 + int K (b0 + b1 Y) ds + int K sqrt(a1 Y) dB, variance v = Y+."""

    a1: float
    b0: float
    b1: float
    y0: float
    alpha: float
    eta: float
    rho: float = -0.7
    s0: float = 1.0
    a0: float = 0.0

    def __post_init__(self):
        if self.a0 != 0:
            raise DomainError(f"a0 must be 0, got {self.a0}")
        if not 0.5 < self.alpha < 1:
            raise DomainError(f"alpha must lie in (1/2, 1) for affine models, got {self.alpha}")
        if self.a1 < 0:
            raise DomainError(f"a1 must be ≥ 0, got {self.a1}")
        if self.b0 < 0:
            raise DomainError(f"b0 must be ≥ 0, got {self.b0}")
        if self.y0 < 0:
            raise DomainError(f"y0 must be ≥ 0, got {self.y0}")
        if not -1 <= self.rho <= 1:
            raise DomainError(f"rho must lie in [-1, 1], got {self.rho}")
        if not self.s0 > 0:
            raise DomainError(f"s0 must be > 0, got {self.s0}")
        PowerLawKernel(self.alpha, self.eta)

    @property
    def kernel(self) -> PowerLawKernel:
        return PowerLawKernel(self.alpha, self.eta)

    def coefficients(self, tilted: bool = False):
        """Fully truncated (drift, diffusion); the tilt adds rho sqrt(a1) y+ to the drift."""
        slope = self.b1 + (self.rho * np.sqrt(self.a1) if tilted else 0.0)

        def drift(t, y):
            return self.b0 + slope * np.maximum(y, 0.0)

        def diffusion(t, y):
            return np.sqrt(self.a1 * np.maximum(y, 0.0))

        return drift, diffusion


def affine_mean_curve(p: AffineVolterraParams, grid: TimeGrid) -> SamplePath:
    """Deterministic solve of y = Y0 + W (b0 + b1 y) with the grid's quadrature weights.

    (I - b1 W) is unit lower triangular, so this is a single triangular solve.
    """
    n = grid.n_steps
    if n == 0:
        return SamplePath(grid, np.array([p.y0]))
    W = np.zeros((n + 1, n + 1))
    W[:, :n] = quad_weights(p.kernel, grid).w
    system = np.eye(n + 1) - p.b1 * W
    rhs = p.y0 + p.b0 * W.sum(axis=1)
    y = linalg.solve_triangular(system, rhs, lower=True, unit_diagonal=True)
    return SamplePath(grid, y)


def affine_chunk(
    p: AffineVolterraParams,
    grid: TimeGrid,
    rng: np.random.Generator,
    size: int,
    weights: Optional[QuadWeights] = None,
) -> PathBatch:
    weights = weights or quad_weights(p.kernel, grid)
    dB = rng.standard_normal((size, grid.n_steps)) * np.sqrt(grid.step)
    drift, diffusion = p.coefficients()
    Y = euler_svie(p.kernel, drift, diffusion, p.y0, dB, grid, weights)
    return PathBatch(grid, np.maximum(Y.values, 0.0))


def simulate_affine(
    p: AffineVolterraParams,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    options: Optional[RunOptions] = None,
) -> Iterator[PathBatch]:
    """Stream Y+ paths of the affine Volterra equation (full truncation Euler)."""
    weights = quad_weights(p.kernel, grid)
    sim = simulation(n_paths, seed, StreamTag.AFFINE, options, desc="Affine Volterra")
    return sim.imap(lambda rng, size, index: affine_chunk(p, grid, rng, size, weights))


def affine_sv_chunk(
    p: AffineVolterraParams,
    grid: TimeGrid,
    rng: np.random.Generator,
    size: int,
    weights: Optional[QuadWeights] = None,
) -> ModelPaths:
    weights = weights or quad_weights(p.kernel, grid)
    dW, dB = correlated_increments(rng, size, grid, p.rho)
    drift, diffusion = p.coefficients()
    tilted, _ = p.coefficients(tilted=True)
    Y = euler_svie(p.kernel, drift, diffusion, p.y0, dB, grid, weights)
    tilde_y = euler_svie(p.kernel, tilted, diffusion, p.y0, dB, grid, weights)
    v = PathBatch(grid, np.maximum(Y.values, 0.0))
    tilde_v = PathBatch(grid, np.maximum(tilde_y.values, 0.0))
    return ModelPaths(Y, v, simulate_price(v, dW, p.s0), tilde_y, tilde_v, dW)


def simulate_affine_sv(
    p: AffineVolterraParams,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    options: Optional[RunOptions] = None,
) -> Iterator[ModelPaths]:
    """Affine model with price; v = Y+ and W correlated with the driving noise."""
    weights = quad_weights(p.kernel, grid)
    sim = simulation(n_paths, seed, StreamTag.AFFINE, options, desc="Affine SV")
    return sim.imap(
        lambda rng, size, index: affine_sv_chunk(p, grid, rng, size, weights)
    )


# ==============================================================================
# Geometric Brownian motion test bed
# ==============================================================================


def gbm_chunk(
    sigma: float, grid: TimeGrid, rng: np.random.Generator, size: int, s0: float = 1.0
) -> PathBatch:
    """Exact lognormal values at the nodes: S_t = s0 exp(sigma B_t - sigma^2 t / 2)."""
    dB = rng.standard_normal((size, grid.n_steps)) * np.sqrt(grid.step)
    B = np.zeros((size, grid.n_steps + 1))
    B[:, 1:] = np.cumsum(dB, axis=1)
    return PathBatch(grid, s0 * np.exp(sigma * B - 0.5 * sigma**2 * grid.nodes))


def simulate_gbm(
    sigma: float,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    s0: float = 1.0,
    options: Optional[RunOptions] = None,
) -> Iterator[PathBatch]:
    if sigma < 0:
        raise DomainError(f"sigma must be ≥ 0, got {sigma}")
    if not s0 > 0:
        raise DomainError(f"s0 must be > 0, got {s0}")
    sim = simulation(n_paths, seed, StreamTag.GBM, options, desc="GBM")
    return sim.imap(lambda rng, size, index: gbm_chunk(sigma, grid, rng, size, s0))
