"""
Martingales whose supremum is not integrable, and the tools to diagnose them.

This module provides:
- Quantile models F with the Hardy-Littlewood maximal function H_F
- Stein's x log x criterion evaluated along a truncation ladder
- The Dubins-Gilat martingale on ((0, 1), Lebesgue)
- Inverse three-dimensional Bessel paths with their exact supremum law
- The c_n sequence, the randomized level and the stopped construction that
  makes a class C0 local martingale uniformly integrable without an
  integrable supremum
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.special import digamma, erfc, exp1, gamma, gammaincc
from scipy.stats import norm

from .config import Config
from .errors import DomainError, InputError, UsageError
from .path_types import PathBatch, SamplePath, TimeGrid, iter_batches
from .simulation_engine import RunOptions, StreamTag, simulation
from .sup_estimators import MCEstimate, TailSumReport, geometric_cauchy_test, tail_sums

logger = logging.getLogger(__name__)


# ==============================================================================
# Quantile models
# ==============================================================================


@dataclass(frozen=True)
class QuantileModel:
    """A distribution F described by its quantile function.

    ``exp_quantile(u)`` is F^-1(1 - e^-u), which keeps precision deep in the
    upper tail. ``log_exp_quantile(u)`` is its logarithm, for positive heavy
    tails whose quantiles overflow.
    """

    name: str
    quantile: Callable[[float], float]
    cdf: Callable[[float], float]
    mean: float
    exp_quantile: Optional[Callable[[float], float]] = None
    log_exp_quantile: Optional[Callable[[float], float]] = None

    def tail_integrand(self, u: float) -> float:
        """F^-1(1 - e^-u) e^-u; integrating over u in (a, inf) gives int_{1 - e^-a}^1 F^-1."""
        if self.log_exp_quantile is not None:
            return float(np.exp(self.log_exp_quantile(u) - u))
        x = self.exp_quantile(u) if self.exp_quantile else self.quantile(-np.expm1(-u))
        return float(x * np.exp(-u))

    def xlogplus_integrand(self, u: float) -> float:
        """|x| log+ |x| at x = F^-1(1 - e^-u), times e^-u."""
        if self.log_exp_quantile is not None:
            log_x = self.log_exp_quantile(u)
            return float(np.exp(log_x - u) * max(log_x, 0.0))
        if self.exp_quantile:
            x = abs(self.exp_quantile(u))
        else:
            x = abs(self.quantile(-np.expm1(-u)))
        if x <= 1:
            return 0.0
        return float(x * np.log(x) * np.exp(-u))


def uniform() -> QuantileModel:
    return QuantileModel(
        name="uniform",
        quantile=lambda s: s,
        cdf=lambda x: float(np.clip(x, 0.0, 1.0)),
        mean=0.5,
        exp_quantile=lambda u: -np.expm1(-u),
    )


def exponential(rate: float = 1.0) -> QuantileModel:
    if not rate > 0:
        raise DomainError(f"rate must be > 0, got {rate}")
    return QuantileModel(
        name="exponential" if rate == 1.0 else f"exponential({rate:g})",
        quantile=lambda s: -np.log1p(-s) / rate,
        cdf=lambda x: float(-np.expm1(-rate * x)) if x > 0 else 0.0,
        mean=1.0 / rate,
        exp_quantile=lambda u: u / rate,
    )


def _upper_gamma_negative(s: float, x: float) -> float:
    """Gamma(s, x) for s in [-1, 0), from Gamma(s + 1, x) by the downward recurrence."""
    if s + 1 == 0:
        upper = exp1(x)
    else:
        upper = gammaincc(s + 1, x) * gamma(s + 1)
    return float((upper - x**s * np.exp(-x)) / s)


def pareto_tail(a: float = 1.5) -> QuantileModel:
    """Density c / (x^2 (log x)^a) on x >= e with a in (1, 2].

    The survival function is Gamma(1 - a, log x) / Gamma(1 - a, 1), the mean is
    c / (a - 1) with c = 1 / Gamma(1 - a, 1), and int x log x dF diverges, so
    H_F is not integrable.
    """
    if not 1 < a <= 2:
        raise DomainError(f"pareto_tail exponent must lie in (1, 2], got {a}")
    s = 1.0 - a
    norm_const = _upper_gamma_negative(s, 1.0)
    c = 1.0 / norm_const

    def log_survival(log_x: float) -> float:
        # past the underflow point use the leading asymptotic of Gamma(s, v)
        if log_x < 600:
            return float(np.log(_upper_gamma_negative(s, log_x)) + np.log(c))
        v = log_x
        return float((s - 1) * np.log(v) - v + np.log1p((s - 1) / v) + np.log(c))

    def log_exp_quantile(u: float) -> float:
        if u <= 0:
            return 1.0
        # safeguarded Newton on log S(v) = -u, falling back to brentq
        lo, hi = 1.0, max(2.0, u + 50.0)
        v = min(max(u + np.log(c) - a * np.log(max(u, 1.0)), lo), hi)
        for _ in range(30):
            f = log_survival(v) + u
            if f > 0:
                lo = v
            else:
                hi = v
            slope = -np.exp(np.log(c) - a * np.log(v) - v - log_survival(v))
            step = v - f / slope
            if not lo < step < hi:
                step = 0.5 * (lo + hi)
            if abs(step - v) <= 1e-14 * max(1.0, v):
                return float(step)
            v = step
        root = brentq(lambda x: log_survival(x) + u, lo, hi, xtol=1e-14, rtol=1e-15)
        return float(root)

    def cdf(x: float) -> float:
        if x <= np.e:
            return 0.0
        return float(-np.expm1(log_survival(np.log(x))))

    def quantile(p: float) -> float:
        if p <= 0:
            return float(np.e)
        return float(np.exp(log_exp_quantile(-np.log1p(-p))))

    return QuantileModel(
        name=f"pareto_tail({a:g})",
        quantile=quantile,
        cdf=cdf,
        mean=c / (a - 1),
        log_exp_quantile=log_exp_quantile,
    )


def pareto_normalization(a: float) -> float:
    """1 / c by direct quadrature of the density shape, for cross-checking."""
    value, _ = quad(
        lambda v: np.exp(-v) * v ** (-a), 1.0, np.inf, epsabs=0.0, epsrel=1e-12
    )
    return float(value)


BUILTIN_MODELS: Dict[str, Callable[..., QuantileModel]] = {
    "uniform": uniform,
    "exponential": exponential,
    "pareto_tail": pareto_tail,
}


def model_by_name(name: str, tail_exponent: float = 1.5) -> QuantileModel:
    if name == "pareto_tail":
        return pareto_tail(tail_exponent)
    if name not in BUILTIN_MODELS:
        raise UsageError(f"unknown distribution {name!r}; choose from {sorted(BUILTIN_MODELS)}")
    return BUILTIN_MODELS[name]()


# ==============================================================================
# Hardy-Littlewood maximal function and Stein's criterion
# ==============================================================================


def _upper_integral(F: QuantileModel, u_lo: float, u_hi: float = np.inf) -> float:
    value, _ = quad(
        F.tail_integrand,
        u_lo,
        u_hi,
        epsabs=0.0,
        epsrel=Config.TOLERANCES["quad_rtol"],
        limit=200,
    )
    return float(value)


def _check_probability(t: float, what: str = "t") -> None:
    if not 0 < t < 1:
        raise DomainError(f"{what} must lie in (0, 1), got {t}")


def hl_maximal(F: QuantileModel, t: float) -> float:
    """H_F(t) = (1 / (1 - t)) int_t^1 F^-1(s) ds.

    The integral runs in u = -log(1 - s), where the upper endpoint singularity
    of F^-1 becomes an integrable tail.
    """
    _check_probability(t)
    return _upper_integral(F, -np.log1p(-t)) / (1 - t)


@dataclass
class SteinReport:
    model: str
    xlogx_integral: float
    divergent: bool
    ladder: pd.DataFrame

    @property
    def predicts_H_in_L1(self) -> bool:
        return not self.divergent


def stein_check(F: QuantileModel, max_halvings: int = 60) -> SteinReport:
    """Integrate |F^-1| log+ |F^-1| over (0, 1 - eps) for eps = 2^-k.

    The truncated integrals are built block by block; the divergence flag comes
    from the geometric Cauchy test on the ladder.
    """
    edges = np.arange(max_halvings + 1) * np.log(2.0)
    partial = [0.0]
    blocks = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        block, _ = quad(
            F.xlogplus_integrand,
            lo,
            hi,
            epsabs=0.0,
            epsrel=Config.TOLERANCES["quad_rtol"],
            limit=100,
        )
        blocks.append(block)
        partial.append(partial[-1] + block)
    ladder = pd.DataFrame({"eps": np.exp(-edges), "truncated_integral": partial})
    # late blocks fall below the spacing of the partial sums; test them directly
    divergent = geometric_cauchy_test(np.cumsum([0.0] + blocks[-2:]))
    return SteinReport(
        model=F.name,
        xlogx_integral=float("inf") if divergent else float(partial[-1]),
        divergent=divergent,
        ladder=ladder,
    )


# ==============================================================================
# Dubins-Gilat martingale
# ==============================================================================


def dg_path(F: QuantileModel, s: float, grid: Optional[TimeGrid] = None) -> SamplePath:
    """X_t(s) = H_F(t) for t <= s and F^-1(s) for t > s, on a grid over [0, 1].

    H_F(0) is the mean of F.
    """
    _check_probability(s, "s")
    grid = grid or TimeGrid(1.0, 100)
    if grid.horizon != 1.0:
        raise UsageError("Dubins-Gilat paths live on [0, 1]")
    closing = F.quantile(s)
    values = [
        (F.mean if t == 0 else hl_maximal(F, t)) if t <= s else closing
        for t in grid.nodes
    ]
    return SamplePath(grid, np.array(values))


def dg_path_supremum(F: QuantileModel, s: float) -> float:
    """sup_t X_t(s) = max(H_F(s), F^-1(s)) = H_F(s); H_F is non-decreasing."""
    _check_probability(s, "s")
    return max(hl_maximal(F, s), F.quantile(s))


def dg_martingale_identity(F: QuantileModel, t1: float, t2: float) -> float:
    """Residual of E[X_{t2} | U >= t1] = H_F(t1).

    residual = (int_{t1}^{t2} F^-1 + (1 - t2) H_F(t2)) / (1 - t1) - H_F(t1)
    """
    _check_probability(t1, "t1")
    _check_probability(t2, "t2")
    if t1 > t2:
        raise UsageError(f"need t1 <= t2, got t1={t1}, t2={t2}")
    u1, u2 = -np.log1p(-t1), -np.log1p(-t2)
    middle = _upper_integral(F, u1, u2) if t2 > t1 else 0.0
    return (middle + (1 - t2) * hl_maximal(F, t2)) / (1 - t1) - hl_maximal(F, t1)


# ==============================================================================
# Inverse Bessel(3) process
# ==============================================================================


def inverse_bessel_mean(T: float, start_radius: float = 1.0) -> float:
    """E[1 / |x + B_T|] = (1/r)(2 Phi(r / sqrt(T)) - 1) for |x| = r."""
    if T == 0:
        return 1.0 / start_radius
    return float((2 * norm.cdf(start_radius / np.sqrt(T)) - 1) / start_radius)


def inverse_bessel_sup_tail(
    m, T: float = np.inf, start_radius: float = 1.0
) -> np.ndarray:
    """P[sup_{t <= T} M_t > m] = (1/(r m)) erfc((r - 1/m) / sqrt(2T)) for m > 1/r.

    As T grows this tends to 1/(r m), Doob's maximal identity.
    """
    m = np.asarray(m, dtype=float)
    r = start_radius
    with np.errstate(divide="ignore"):
        limit = 1.0 / (r * m)
        if np.isinf(T):
            tail = limit
        else:
            tail = limit * erfc((r - 1.0 / m) / np.sqrt(2 * T))
    return np.where(m * r <= 1, 1.0, tail)


def sample_inverse_bessel_sup(
    n: int,
    rng: np.random.Generator,
    T: float = np.inf,
    start_radius: float = 1.0,
) -> np.ndarray:
    """Exact draws of sup_{t <= T} M_t by inverting ``inverse_bessel_sup_tail``."""
    r = start_radius
    u = 1.0 - rng.random(n)
    top = 1.0 / (r * u)
    if np.isinf(T):
        return top
    # the tail is decreasing in m and bounded by 1/(r m); bisect in log m
    lo = np.full(n, np.log(1.0 / r))
    hi = np.log(top)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        above = inverse_bessel_sup_tail(np.exp(mid), T, r) > u
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    return np.exp(hi)


def bessel_bridge_minima(
    radius: np.ndarray, step: float, rng: np.random.Generator
) -> np.ndarray:
    """Exact minima of |x + B| between consecutive grid nodes.

    Given the node radii a and b, the radius between two nodes is a Bessel(3)
    bridge, which is a Brownian bridge from a to b conditioned to stay
    positive. Its minimum m satisfies

        P[m <= e] = (exp(-2(a - e)(b - e)/h) - exp(-2ab/h)) / (1 - exp(-2ab/h))

    for 0 <= e <= min(a, b), which inverts in closed form at a uniform draw.

    Args:
        radius: Node radii, one row per path
        step: Grid spacing h
        rng: Source of the uniforms, one per interval

    Returns:
        Array of interval minima with one column per grid interval
    """
    a, b = radius[:, :-1], radius[:, 1:]
    u = 1.0 - rng.random(a.shape)
    with np.errstate(divide="ignore"):
        log_w = np.logaddexp(np.log1p(-u), np.log(u) + 2 * a * b / step)
    scaled = step * log_w
    disc = np.maximum((a + b) ** 2 - 2 * scaled, 0.0)
    return scaled / (a + b + np.sqrt(disc))


def inverse_bessel_chunk(
    grid: TimeGrid,
    rng: np.random.Generator,
    size: int,
    start_radius: float = 1.0,
) -> PathBatch:
    """Grid values of M = 1 / |x + B| and the supremum of each continuous path."""
    cap = Config.TOLERANCES["sup_cap"]
    n = grid.n_steps
    steps = rng.standard_normal((size, n, 3)) * np.sqrt(grid.step)
    position = np.zeros((size, n + 1, 3))
    position[:, 0, 0] = start_radius
    start = start_radius * np.array([1.0, 0.0, 0.0])
    position[:, 1:, :] = start + np.cumsum(steps, axis=1)
    radius = np.linalg.norm(position, axis=2)
    if n:
        lowest = bessel_bridge_minima(radius, grid.step, rng).min(axis=1)
    else:
        lowest = radius[:, 0]
    flagged = lowest < 1.0 / cap
    with np.errstate(divide="ignore"):
        values = np.minimum(1.0 / radius, cap)
        sup = np.minimum(1.0 / lowest, cap)
    if flagged.any():
        logger.warning(
            "%d inverse Bessel paths capped at %.0e", int(flagged.sum()), cap
        )
    return PathBatch(grid, values, flags=flagged, sup=sup)


def inverse_bessel_paths(
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    start_radius: float = 1.0,
    options: Optional[RunOptions] = None,
) -> Iterator[PathBatch]:
    """Stream M_t = 1 / |x + B_t| with |x| = start_radius.

    Each batch carries the grid values and, in ``sup``, the supremum of the
    continuous path over the horizon drawn from the bridges between nodes.
    """
    if not start_radius > 0:
        raise DomainError(f"start_radius must be > 0, got {start_radius}")
    sim = simulation(n_paths, seed, StreamTag.BESSEL, options, desc="Inverse Bessel")
    return sim.imap(
        lambda rng, size, index: inverse_bessel_chunk(grid, rng, size, start_radius)
    )


def coarse_maxima(batch: PathBatch) -> Optional[np.ndarray]:
    """Path maxima over every other node, or None when the grid has an odd step count."""
    if batch.grid.n_steps < 2 or batch.grid.n_steps % 2:
        return None
    return batch.values[:, ::2].max(axis=1)


@dataclass
class BesselSups:
    """Suprema of a stream of inverse Bessel paths.

    ``bridge`` are the continuous-path suprema, ``grid`` the node maxima and
    ``coarse`` the maxima over every other node (empty for odd grids).
    """

    bridge: np.ndarray
    grid: np.ndarray
    coarse: np.ndarray
    capped: int = 0


def collect_bessel_sups(
    batches, keep: Sequence[int] = ()
) -> Tuple[BesselSups, np.ndarray]:
    """Gather suprema from a path stream, plus the values at the ``keep`` columns."""
    bridge, grid_max, coarse, kept = [], [], [], []
    capped = 0
    cols = list(keep)
    for batch in batches:
        if batch.sup is None:
            raise UsageError("paths carry no continuous suprema")
        bridge.append(batch.sup)
        grid_max.append(batch.values.max(axis=1))
        half = coarse_maxima(batch)
        if half is not None:
            coarse.append(half)
        kept.append(batch.values[:, cols])
        capped += int(batch.flags.sum())
    sups = BesselSups(
        bridge=np.concatenate(bridge),
        grid=np.concatenate(grid_max),
        coarse=np.concatenate(coarse) if coarse else np.zeros(0),
        capped=capped,
    )
    return sups, np.concatenate(kept)


def _tail(x: np.ndarray, levels: np.ndarray) -> np.ndarray:
    return (x[:, None] > levels[None, :]).mean(axis=0)


def maximal_identity_table(
    sup_samples,
    T: float,
    levels: Sequence[float] = tuple(range(2, 11)),
    start_radius: float = 1.0,
    grid_sups=None,
    coarse_sups=None,
    reference_sups=None,
) -> pd.DataFrame:
    """Empirical P[sup M > n] against the exact horizon-T law and the 1/(r n) limit.

    ``sup_samples`` carry the verdict. Grid maxima never exceed the continuous
    supremum, so their tails are checked one-sided; ``grid_doubling_gain`` is
    how much the grid tail rises when the node count doubles. Draws from
    ``sample_inverse_bessel_sup`` can be passed as ``reference_sups`` and are
    reported without a verdict.
    """
    x = np.asarray(sup_samples, dtype=float)
    levels = np.asarray(list(levels), dtype=float)
    empirical = _tail(x, levels)
    exact = inverse_bessel_sup_tail(levels, T, start_radius)
    stderr = np.sqrt(exact * (1 - exact) / x.size)
    k = Config.TOLERANCES["sigma_multiplier"]
    table = pd.DataFrame(
        {
            "n": levels,
            "empirical": empirical,
            "exact_horizon": exact,
            "limit": 1.0 / (start_radius * levels),
            "stderr": stderr,
            "within": np.abs(empirical - exact) <= k * stderr,
            "truncation_gap": 1.0 / (start_radius * levels) - exact,
            "oracle": "closed-form",
        }
    )
    if grid_sups is not None:
        grid_tail = _tail(np.asarray(grid_sups, dtype=float), levels)
        table["grid"] = grid_tail
        table["grid_below"] = grid_tail <= exact + k * stderr
        if coarse_sups is not None and np.size(coarse_sups):
            coarse_tail = _tail(np.asarray(coarse_sups, dtype=float), levels)
            table["grid_doubling_gain"] = grid_tail - coarse_tail
    if reference_sups is not None:
        table["exact_sampler"] = _tail(np.asarray(reference_sups, dtype=float), levels)
    return table


# ==============================================================================
# c_n sequence, randomized level and stopping
# ==============================================================================


class CSequence:
    """c_0 = 1, c_n = log(e + sum_{k <= n} p_k), extended lazily.

    Tails come either as a finite array (p_k = 0 beyond it) or as a callable
    k -> p_k over integer arrays. ``partial_sum`` optionally gives
    sum_{k <= n} p_k in closed form for indices beyond the materialized range;
    without it, callable tails are summed up to ``max_terms`` and treated as
    zero afterwards.
    """

    def __init__(
        self,
        tails: Union[Sequence[float], Callable[[np.ndarray], np.ndarray]],
        partial_sum: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        materialize: int = 1 << 16,
        max_terms: int = 1 << 22,
    ):
        self._callable = callable(tails)
        self._tails = tails
        self.partial_sum_fn = partial_sum
        self.max_terms = max_terms
        self._sums = np.zeros(0)
        if self._callable:
            self._extend(materialize)
        else:
            p = np.asarray(tails, dtype=float)
            self._check(p)
            self._sums = np.cumsum(p)

    @staticmethod
    def _check(p: np.ndarray) -> None:
        if np.isnan(p).any() or (p < 0).any() or (p > 1).any():
            raise InputError("tail probabilities must lie in [0, 1]")

    def _extend(self, n: int) -> None:
        n = min(n, self.max_terms)
        have = self._sums.size
        if not self._callable or n <= have:
            return
        k = np.arange(have + 1, n + 1)
        p = np.asarray(self._tails(k), dtype=float)
        self._check(p)
        start = self._sums[-1] if have else 0.0
        self._sums = np.concatenate([self._sums, start + np.cumsum(p)])

    @property
    def sums(self) -> np.ndarray:
        """Materialized partial sums; entry n - 1 holds sum_{k <= n} p_k."""
        return self._sums

    @property
    def finite_support(self) -> bool:
        return not self._callable

    @property
    def total(self) -> float:
        """Sum of all p_k (inf when the closed-form partial sums diverge)."""
        if self._callable and self.partial_sum_fn is not None:
            return float(self.partial_sum_fn(np.array([np.inf]))[0])
        self._extend(self.max_terms)
        return float(self._sums[-1]) if self._sums.size else 0.0

    def partial_sums(self, n) -> np.ndarray:
        """sum_{k <= n} p_k for n >= 0 (inf allowed)."""
        n = np.asarray(n, dtype=float)
        out = np.zeros(n.shape)
        positive = n >= 1
        if not positive.any():
            return out
        if self._callable and self.partial_sum_fn is not None:
            cached = positive & (n <= self._sums.size)
            out[cached] = self._sums[n[cached].astype(np.int64) - 1]
            beyond = positive & ~cached
            out[beyond] = self.partial_sum_fn(n[beyond])
            return out
        wanted = n[positive]
        finite = wanted[np.isfinite(wanted)]
        if finite.size:
            self._extend(int(finite.max()))
        if not self._sums.size:
            return out
        idx = np.minimum(wanted, self._sums.size).astype(np.int64)
        out[positive] = self._sums[idx - 1]
        return out

    def c(self, n) -> np.ndarray:
        return np.log(np.e + self.partial_sums(n))

    def survival(self, n) -> np.ndarray:
        """P[Theta > n] = 1 / c_n."""
        return 1.0 / self.c(n)


def c_sequence_from_tails(p, partial_sum=None) -> CSequence:
    """Build c_n from tail probabilities p_n = P[sup M > n]."""
    return CSequence(p, partial_sum)


def class_c0_sequence() -> CSequence:
    """p_k = 1/k, the maximal identity tails; partial sums are harmonic numbers."""
    return CSequence(
        lambda k: 1.0 / k,
        partial_sum=lambda n: np.where(
            np.isinf(n), np.inf, digamma(n + 1) + np.euler_gamma
        ),
    )


def sample_level(c: CSequence, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    """Draw Theta with P[Theta > n] = 1 / c_n by inverting the survival function.

    Theta is the smallest n with sum_{k <= n} p_k > exp(1/U) - e. Levels that
    are never reached, or lie beyond float range, are returned as inf.

    Raises:
        UsageError: If all tails vanish, so the level would never trigger
    """
    total = c.total
    if total == 0:
        raise UsageError("tail probabilities are all zero; the level never triggers")
    u = 1.0 - rng.random(size)
    with np.errstate(over="ignore"):
        target = np.exp(1.0 / u) - np.e
    levels = np.full(size, np.inf)

    sums = c.sums
    cached = target < sums[-1]
    levels[cached] = np.searchsorted(sums, target[cached], side="right") + 1.0
    if c.partial_sum_fn is not None and not c.finite_support:
        rest = ~cached & np.isfinite(target) & (target < total)
        if rest.any():
            levels[rest] = _invert_partial_sum(c, target[rest], float(sums.size))
    return levels


def _invert_partial_sum(c: CSequence, target: np.ndarray, start: float) -> np.ndarray:
    """Smallest n > start with partial sum > target, by bracketing then bisection."""
    lo = np.full(target.shape, start)
    hi = np.full(target.shape, 2.0 * start)
    while True:
        short = (c.partial_sums(hi) <= target) & np.isfinite(hi)
        if not short.any():
            break
        lo = np.where(short, hi, lo)
        hi = np.where(short, hi * 2.0, hi)
        hi[hi > 1e300] = np.inf
    finite = np.isfinite(hi)
    lo, hi_f = lo[finite], hi[finite]
    for _ in range(1100):
        if not (hi_f - lo > 1).any():
            break
        mid = np.floor(0.5 * (lo + hi_f))
        over = c.partial_sums(mid) > target[finite]
        hi_f = np.where(over, mid, hi_f)
        lo = np.where(over, lo, mid)
    out = np.full(target.shape, np.inf)
    out[finite] = hi_f
    return out


def stop_at_level(paths: PathBatch, levels) -> PathBatch:
    """Stop each grid path at its first node reaching its level.

    The stopped path holds that node's value afterwards; ``flags`` marks the
    paths that were stopped.
    """
    levels = np.asarray(levels, dtype=float).ravel()
    values = paths.values
    if levels.size != values.shape[0]:
        raise UsageError(f"{levels.size} levels for {values.shape[0]} paths")
    crossed = values >= levels[:, None]
    stopped = crossed.any(axis=1)
    first = np.argmax(crossed, axis=1)
    out = values.copy()
    cols = np.arange(values.shape[1])
    rows = np.flatnonzero(stopped)
    if rows.size:
        after = cols[None, :] > first[rows, None]
        frozen = values[rows, first[rows]][:, None]
        out[rows] = np.where(after, frozen, values[rows])
    return PathBatch(paths.grid, out, flags=stopped)


@dataclass
class StoppedReport:
    """Diagnostics of the stopped construction M^sigma with sigma = inf{t : M_t >= Theta}.

    ``tails`` carries the continuous-path tails that bear the verdict, the
    grid-stopped tails and, when given, the exact-sampler reference column.
    """

    tails: pd.DataFrame
    expectation_capped: MCEstimate
    expectation_uncapped: MCEstimate
    mass_beyond_cap: float
    level_cap: float
    series: pd.DataFrame
    series_divergent: bool
    horizon: float
    contrast: Dict[str, TailSumReport] = field(default_factory=dict)
    terminal_mean: Optional[MCEstimate] = None
    grid_expectation: Optional[MCEstimate] = None
    m0: float = 1.0

    @property
    def uniformly_integrable(self) -> bool:
        return self.expectation_capped.within(self.m0)

    @property
    def tails_ok(self) -> bool:
        return bool(self.tails["within"].all())


def c0_stopped_tail(
    c: CSequence, n, start_radius: float = 1.0, T: float = np.inf
) -> np.ndarray:
    """P[sup_{t <= T} M^sigma_t > n] = P[sup_{t <= T} M_t > n] P[Theta > n].

    Over the infinite horizon this is (1/(r n)) (1 / c_n).
    """
    n = np.asarray(n, dtype=float)
    return inverse_bessel_sup_tail(n, T, start_radius) * c.survival(n)


def stopped_construction_report(
    paths,
    levels,
    c: CSequence,
    level_cap: Optional[float] = None,
    n_max: int = 20,
    series_points: Sequence[int] = (100, 1_000, 10_000),
    contrast_level: int = 10,
    reference_sups=None,
) -> StoppedReport:
    """Check the stopped construction against its exact class C0 oracles.

    For continuous paths sup M^sigma = min(sup M, Theta), and at the horizon
    M^sigma_T = max(Theta, M_0) on {sup M >= Theta} and M_T otherwise. Both use
    the continuous suprema the path stream draws between nodes, so the tails
    and E[M^sigma_T] = M_0 carry no grid bias. The grid version, with sigma
    the first node where M >= Theta (``stop_at_level``), is reported next to
    them together with the change under grid doubling.

    Args:
        paths: Inverse Bessel batches carrying ``sup``, as streamed by
            ``inverse_bessel_paths``
        levels: Independent levels Theta, one per path
        c: The sequence defining the law of Theta
        level_cap: Cap L on the level for the uniform integrability estimate
        n_max: Largest n in the tail table
        series_points: N values for the exact series sum (1/n)(1/c_n)
        contrast_level: Deterministic level k for the bounded contrast
        reference_sups: Optional exact-sampler suprema over the same horizon

    Returns:
        StoppedReport

    Raises:
        UsageError: If paths lack suprema or path and level counts differ
    """
    theta = np.asarray(levels, dtype=float).ravel()
    level_cap = Config.TOLERANCES["level_cap"] if level_cap is None else level_cap
    k = Config.TOLERANCES["sigma_multiplier"]
    capped_theta = np.minimum(theta, level_cap)
    finite_theta = np.where(np.isfinite(theta), theta, 0.0)

    sups, grid_sups, coarse_sups = [], [], []
    terminal, capped_terminal, uncapped_terminal, grid_terminal = [], [], [], []
    grid, m0 = None, 1.0
    start = 0
    for batch in iter_batches(paths):
        if batch.sup is None:
            raise UsageError(
                "paths carry no continuous suprema; stream them with inverse_bessel_paths"
            )
        size = len(batch)
        if start + size > theta.size:
            raise UsageError(f"more paths than the {theta.size} levels")
        rows = slice(start, start + size)
        if grid is None:
            grid, m0 = batch.grid, float(batch.values[0, 0])
        start += size

        sup, last = batch.sup, batch.values[:, -1]
        level = capped_theta[rows]
        sups.append(sup)
        terminal.append(last)
        capped_terminal.append(np.where(sup >= level, np.maximum(level, m0), last))
        uncapped_terminal.append(
            np.where(sup >= theta[rows], np.maximum(finite_theta[rows], m0), last)
        )
        stopped = stop_at_level(batch, theta[rows])
        grid_sups.append(stopped.values.max(axis=1))
        grid_terminal.append(stopped.values[:, -1])
        if coarse_maxima(batch) is not None:
            half = PathBatch(
                TimeGrid(batch.grid.horizon, batch.grid.n_steps // 2),
                batch.values[:, ::2],
            )
            coarse_sups.append(stop_at_level(half, theta[rows]).values.max(axis=1))
    if grid is None or start != theta.size:
        raise UsageError(f"{start} paths but {theta.size} levels")

    sup = np.concatenate(sups)
    stopped_sup = np.minimum(sup, theta)
    n = np.arange(1, n_max + 1, dtype=float)
    empirical = _tail(stopped_sup, n)
    oracle = c0_stopped_tail(c, n, start_radius=1.0 / m0, T=grid.horizon)
    stderr = np.sqrt(oracle * (1 - oracle) / sup.size)
    tails = pd.DataFrame(
        {
            "n": n.astype(int),
            "empirical": empirical,
            "oracle": oracle,
            "stderr": stderr,
            "within": np.abs(empirical - oracle) <= k * stderr,
            "grid": _tail(np.concatenate(grid_sups), n),
            "provenance": "closed-form",
        }
    )
    if coarse_sups:
        tails["grid_doubling_gain"] = tails["grid"] - _tail(
            np.concatenate(coarse_sups), n
        )
    if reference_sups is not None:
        reference = np.asarray(reference_sups, dtype=float).ravel()
        if reference.size != theta.size:
            raise UsageError(f"{reference.size} reference suprema for {theta.size} levels")
        tails["exact_sampler"] = _tail(np.minimum(reference, theta), n)

    expectation_capped = MCEstimate.from_samples(np.concatenate(capped_terminal))
    expectation_uncapped = MCEstimate.from_samples(np.concatenate(uncapped_terminal))

    points = np.asarray(list(series_points), dtype=float)
    full = np.arange(1, int(points.max()) + 1, dtype=float)
    cumulative = np.cumsum(c0_stopped_tail(c, full, start_radius=1.0 / m0))
    series_values = cumulative[points.astype(np.int64) - 1]
    series = pd.DataFrame({"N": points.astype(int), "partial_sum": series_values})

    contrast = {
        "unstopped": tail_sums(sup),
        "bounded": tail_sums(np.minimum(sup, contrast_level)),
        "stopped": tail_sums(stopped_sup),
    }

    report = StoppedReport(
        tails=tails,
        expectation_capped=expectation_capped,
        expectation_uncapped=expectation_uncapped,
        mass_beyond_cap=float(c.survival(level_cap)[()]),
        level_cap=level_cap,
        series=series,
        series_divergent=geometric_cauchy_test(series_values),
        horizon=grid.horizon,
        contrast=contrast,
        terminal_mean=MCEstimate.from_samples(np.concatenate(terminal)),
        grid_expectation=MCEstimate.from_samples(np.concatenate(grid_terminal)),
        m0=m0,
    )
    if not report.uniformly_integrable:
        logger.warning(
            "E[M^sigma_T] = %.4f +/- %.4f differs from %.4f",
            expectation_capped.mean,
            expectation_capped.stderr,
            m0,
        )
    return report


def sample_stopped_construction(
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    c: Optional[CSequence] = None,
    options: Optional[RunOptions] = None,
    start_radius: float = 1.0,
) -> Tuple[Iterator[PathBatch], np.ndarray]:
    """Inverse Bessel path stream and independent levels Theta, from separate streams.

    The levels are drawn up front; the paths stream lazily.
    """
    c = c or class_c0_sequence()
    levels = simulation(n_paths, seed, StreamTag.LEVEL, options, desc="Levels").collect(
        lambda rng, size, index: {"theta": sample_level(c, rng, size)}
    )["theta"]
    paths = inverse_bessel_paths(grid, n_paths, seed, start_radius, options)
    return paths, levels


def exact_sup_samples(
    n_paths: int,
    seed: int,
    T: float,
    start_radius: float = 1.0,
    options: Optional[RunOptions] = None,
) -> np.ndarray:
    """Draws from ``sample_inverse_bessel_sup`` on their own stream, for reference columns."""

    def reduce(rng, size, index):
        return {"sup": sample_inverse_bessel_sup(size, rng, T, start_radius)}

    sim = simulation(n_paths, seed, StreamTag.BESSEL_SUP, options, desc="Suprema")
    return sim.collect(reduce)["sup"]
