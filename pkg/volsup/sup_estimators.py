"""
Monte Carlo functionals of path suprema.

Estimators for E[sup S], both sides of Doob's L1 inequality, the explicit
share-measure bound on E[sup S] for stochastic volatility models, the weighted
Kolmogorov-Smirnov law-equality check, the reverse L1 inequality and tail-sum
divergence diagnostics.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy import stats
from scipy.integrate import quad, trapezoid

from .config import Config
from .errors import DomainError, InputError, UsageError
from .path_types import TimeGrid, iter_batches
from .simulation_engine import RunOptions, StreamTag, chunk_rng, simulation
from .sv_models import (
    AffineVolterraParams,
    GenericSVSpec,
    ModelPaths,
    RoughBergomiParams,
    affine_mean_curve,
    affine_sv_chunk,
    driver_chunk,
    generic_sv_chunk,
    rbergomi_chunk,
)
from .volterra_kernel import quad_weights

logger = logging.getLogger(__name__)

DOOB_CONSTANT = np.e / (np.e - 1)


# ==============================================================================
# Estimates and reports
# ==============================================================================


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n: int

    @property
    def ci95(self) -> Tuple[float, float]:
        return (self.mean - 1.96 * self.stderr, self.mean + 1.96 * self.stderr)

    @classmethod
    def from_samples(cls, samples) -> "MCEstimate":
        """Sample mean and its standard error.

        Raises:
            UsageError: If fewer than two samples are given
            InputError: If a sample is NaN
        """
        x = np.asarray(samples, dtype=float).ravel()
        if x.size < 2:
            raise UsageError(f"need at least 2 samples, got {x.size}")
        if np.isnan(x).any():
            raise InputError("samples contain NaN")
        return cls(float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size)), int(x.size))

    def scaled(self, factor: float, shift: float = 0.0) -> "MCEstimate":
        """Estimate of factor * X + shift."""
        return MCEstimate(factor * self.mean + shift, abs(factor) * self.stderr, self.n)

    def within(self, target: float, multiplier: Optional[float] = None) -> bool:
        k = Config.TOLERANCES["sigma_multiplier"] if multiplier is None else multiplier
        return abs(self.mean - target) <= k * self.stderr


class Verdict(str, Enum):
    HOLDS = "holds"
    WITHIN_NOISE = "violated-within-noise"
    VIOLATED = "violated"


@dataclass
class BoundReport:
    """One side of an inequality checked by Monte Carlo.

    ``direction`` is ``upper`` when lhs <= rhs is expected and ``lower`` when
    lhs >= rhs is expected. A verdict is ``violated`` only when the gap exceeds
    the sigma multiplier times the combined standard error.
    """

    lhs: MCEstimate
    rhs: Union[float, MCEstimate]
    label: str = "bound"
    direction: str = "upper"
    oracle: str = "monte-carlo"
    caveat: Optional[str] = None
    secondary: Optional["BoundReport"] = None
    extra: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.direction not in ("upper", "lower"):
            raise UsageError(f"direction must be 'upper' or 'lower', got {self.direction!r}")

    @property
    def rhs_value(self) -> float:
        return self.rhs.mean if isinstance(self.rhs, MCEstimate) else float(self.rhs)

    @property
    def stderr(self) -> float:
        rhs_se = self.rhs.stderr if isinstance(self.rhs, MCEstimate) else 0.0
        return float(np.hypot(self.lhs.stderr, rhs_se))

    @property
    def slack(self) -> float:
        return self.rhs_value - self.lhs.mean

    @property
    def verdict(self) -> Verdict:
        k = Config.TOLERANCES["sigma_multiplier"]
        gap = -self.slack if self.direction == "upper" else self.slack
        if gap - k * self.stderr > 0:
            return Verdict.VIOLATED
        if gap > 0:
            return Verdict.WITHIN_NOISE
        return Verdict.HOLDS

    def reports(self) -> List["BoundReport"]:
        out = [self]
        if self.secondary is not None:
            out.extend(self.secondary.reports())
        return out

    def to_rows(self) -> List[dict]:
        rows = []
        for report in self.reports():
            rows.append(
                {
                    "check": report.label,
                    "direction": report.direction,
                    "lhs": report.lhs.mean,
                    "lhs_stderr": report.lhs.stderr,
                    "rhs": report.rhs_value,
                    "rhs_stderr": (
                        report.rhs.stderr
                        if isinstance(report.rhs, MCEstimate)
                        else 0.0
                    ),
                    "slack": report.slack,
                    "n": report.lhs.n,
                    "verdict": report.verdict.value,
                    "oracle": report.oracle,
                    "caveat": report.caveat or "",
                }
            )
        return rows


@dataclass
class MartingaleCheck:
    estimate: MCEstimate
    s0: float

    @property
    def ok(self) -> bool:
        return self.estimate.within(self.s0)


def martingale_check(terminal_samples, s0: float) -> MartingaleCheck:
    """Compare MC E[S_T] with S0."""
    check = MartingaleCheck(MCEstimate.from_samples(terminal_samples), s0)
    if not check.ok:
        logger.warning(
            "E[S_T] = %.6g +/- %.2g differs from S0 = %.6g",
            check.estimate.mean,
            check.estimate.stderr,
            s0,
        )
    return check


def _path_summaries(paths) -> Dict[str, np.ndarray]:
    sups, terminals, minima = [], [], []
    for batch in iter_batches(paths):
        values = batch.values
        sups.append(values.max(axis=1))
        terminals.append(values[:, -1])
        minima.append(values.min(axis=1))
    if not sups:
        raise UsageError("path stream is empty")
    return {
        "sup": np.concatenate(sups),
        "terminal": np.concatenate(terminals),
        "min": np.concatenate(minima),
    }


def estimate_sup(paths) -> MCEstimate:
    """Mean of per-path grid maxima.

    Raises:
        UsageError: If fewer than two paths are supplied
    """
    return MCEstimate.from_samples(_path_summaries(paths)["sup"])


# ==============================================================================
# Doob and reverse L1 inequalities
# ==============================================================================


def lognormal_xlogx_mean(sigma: float, T: float) -> float:
    """E[X log X] = sigma^2 T / 2 for X = exp(sigma B_T - sigma^2 T / 2)."""
    return 0.5 * sigma**2 * T


def lognormal_xlogplus_mean(sigma: float, T: float, method: str = "closed") -> float:
    """E[X log+ X] for the same lognormal, m Phi(m / s) + s phi(m / s).

    With X as density, log X ~ N(m, s^2), m = sigma^2 T / 2, s = sigma sqrt(T).
    ``method="quad"`` integrates that normal law numerically instead.
    """
    m = 0.5 * sigma**2 * T
    s = sigma * np.sqrt(T)
    if s == 0:
        return 0.0
    if method == "closed":
        return float(m * stats.norm.cdf(m / s) + s * stats.norm.pdf(m / s))
    if method == "quad":
        value, _ = quad(
            lambda x: x * stats.norm.pdf(x, loc=m, scale=s),
            0.0,
            np.inf,
            epsabs=0.0,
            epsrel=Config.TOLERANCES["quad_rtol"],
        )
        return float(value)
    raise UsageError(f"unknown method {method!r}")


def doob_l1_check(paths, X0: float) -> BoundReport:
    """E[sup X] <= e/(e-1) (E[X_T log X_T] + X0 (1 - log X0)).

    Raises:
        InputError: If any path value or X0 is non-positive
    """
    if not X0 > 0:
        raise InputError(f"X0 must be > 0, got {X0}")
    summary = _path_summaries(paths)
    if (summary["min"] <= 0).any():
        raise InputError("Doob's L1 inequality needs strictly positive paths")
    terminal = summary["terminal"]
    xlogx = MCEstimate.from_samples(terminal * np.log(terminal))
    rhs = xlogx.scaled(DOOB_CONSTANT, DOOB_CONSTANT * X0 * (1 - np.log(X0)))
    return BoundReport(
        lhs=MCEstimate.from_samples(summary["sup"]),
        rhs=rhs,
        label="doob-l1",
        extra={"xlogx": xlogx},
    )


def _xlogplus(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    big = x > 1
    out[big] = x[big] * np.log(x[big])
    return out


def reverse_l1_check(sup_samples, closing_samples, X0: float = 1.0) -> BoundReport:
    """E[sup X] >= 1 + E[X_inf log+ X_inf] for a continuous martingale with X0 = 1."""
    if X0 != 1:
        raise DomainError(f"reverse L1 check needs X0 = 1, got {X0}")
    sups = np.asarray(sup_samples, dtype=float).ravel()
    closing = np.asarray(closing_samples, dtype=float).ravel()
    if sups.shape != closing.shape:
        raise UsageError(f"{sups.size} sup samples but {closing.size} closing samples")
    if (closing < 0).any():
        raise InputError("closing samples must be non-negative")
    term = MCEstimate.from_samples(_xlogplus(closing))
    return BoundReport(
        lhs=MCEstimate.from_samples(sups),
        rhs=term.scaled(1.0, 1.0),
        label="reverse-l1",
        direction="lower",
        extra={"xlogplus": term},
    )


# ==============================================================================
# Share-measure bounds for stochastic volatility models
# ==============================================================================


def _chunk_summary(paths: ModelPaths) -> Dict[str, np.ndarray]:
    S = paths.S.values
    return {
        "sup": S.max(axis=1),
        "terminal": S[:, -1],
        "lemma": paths.lemma_functional(),
        "y_T": paths.Y.values[:, -1],
        "tilde_y_T": paths.tilde_y.values[:, -1],
        "tilde_v_int": paths.tilde_v.values[:, :-1].sum(axis=1) * paths.grid.step,
    }


def _lemma_bound(
    data: Dict[str, np.ndarray],
    s0: float,
    label: str,
    integrated_variance: Union[float, MCEstimate, None],
    variance_oracle: str = "closed-form",
    caveat: Optional[str] = None,
) -> BoundReport:
    lhs = MCEstimate.from_samples(data["sup"])
    scale = DOOB_CONSTANT * s0
    rhs = MCEstimate.from_samples(data["lemma"]).scaled(scale, scale)
    secondary = None
    if integrated_variance is not None:
        if isinstance(integrated_variance, MCEstimate):
            variance_rhs: Union[float, MCEstimate] = integrated_variance.scaled(
                0.5 * scale, scale
            )
        else:
            variance_rhs = scale * (1.0 + 0.5 * integrated_variance)
        secondary = BoundReport(
            lhs=lhs,
            rhs=variance_rhs,
            label=f"{label} (variance-curve bound)",
            oracle=variance_oracle,
            caveat=caveat,
        )
    return BoundReport(
        lhs=lhs,
        rhs=rhs,
        label=label,
        caveat=caveat,
        secondary=secondary,
        extra={"martingale": martingale_check(data["terminal"], s0)},
    )


def rbergomi_sup_bound(
    p: RoughBergomiParams,
    T: float,
    n_paths: int,
    seed: int,
    n_steps: int = 512,
    options: Optional[RunOptions] = None,
) -> BoundReport:
    """E[sup S] against the explicit share-measure bound for rough Bergomi.

    rhs = e/(e-1) (S0 + S0 E[int sqrt(v~) dW + 1/2 int v~ ds]). The secondary
    report replaces the expectation by the forward variance integral, using
    E[v~_s] <= xi0(s).
    """
    if p.rho > 0:
        raise DomainError(f"rho must be ≤ 0, got {p.rho}")
    grid = TimeGrid(T, n_steps)
    k = p.kernel
    weights = quad_weights(k, grid)

    def reduce(rng, size, index):
        driver = driver_chunk(k, grid, rng, size, seed, index)
        return _chunk_summary(rbergomi_chunk(p, driver, weights))

    sim = simulation(n_paths, seed, StreamTag.DRIVER, options, desc="Rough Bergomi")
    data = sim.collect(reduce)
    return _lemma_bound(data, p.s0, "rbergomi-sup", p.integrated_forward_variance(T))


def generic_sup_bound(
    spec: GenericSVSpec,
    T: float,
    n_paths: int,
    seed: int,
    n_steps: int = 256,
    integrated_variance: Optional[float] = None,
    options: Optional[RunOptions] = None,
) -> BoundReport:
    """Share-measure bound on E[sup S] for any generic stochastic volatility model."""
    grid = TimeGrid(T, n_steps)
    weights = quad_weights(spec.kernel, grid)
    sim = simulation(n_paths, seed, StreamTag.GENERIC_SV, options, desc="Generic SV")
    data = sim.collect(
        lambda rng, size, index: _chunk_summary(
            generic_sv_chunk(spec, grid, rng, size, weights)
        )
    )
    return _lemma_bound(data, spec.s0, "generic-sup", integrated_variance)


AFFINE_CAVEAT = (
    "supremum over all weak solutions evaluated at the constructed solution only"
)


def affine_sup_bound(
    p: AffineVolterraParams,
    T: float,
    n_paths: int,
    seed: int,
    n_steps: int = 256,
    options: Optional[RunOptions] = None,
) -> BoundReport:
    """Share-measure bound for the affine Volterra model with variance Y+.

    The secondary bound uses the Monte Carlo mean of int v~ ds from the tilted
    paths. The integral of the untilted linear mean curve, which ignores both
    the truncation at 0 and the tilt, is kept in ``extra`` for comparison.
    """
    grid = TimeGrid(T, n_steps)
    weights = quad_weights(p.kernel, grid)
    sim = simulation(n_paths, seed, StreamTag.AFFINE, options, desc="Affine SV")
    data = sim.collect(
        lambda rng, size, index: _chunk_summary(
            affine_sv_chunk(p, grid, rng, size, weights)
        )
    )
    report = _lemma_bound(
        data,
        p.s0,
        "affine-sup",
        MCEstimate.from_samples(data["tilde_v_int"]),
        variance_oracle="monte-carlo",
        caveat=AFFINE_CAVEAT,
    )
    mean_curve = affine_mean_curve(p, grid)
    report.extra["mean_curve_integral"] = float(
        trapezoid(np.maximum(mean_curve.values, 0.0), grid.nodes)
    )
    return report


def refinement_study(
    sampler: Callable[[int], object], n_steps_list: Sequence[int]
) -> pd.DataFrame:
    """E[sup] at several grid sizes; coarser grids should not exceed finer ones.

    Args:
        sampler: Maps a step count to a path source for ``estimate_sup``
        n_steps_list: Increasing step counts

    Returns:
        DataFrame with one row per grid and the change against the previous grid
    """
    rows = []
    previous: Optional[MCEstimate] = None
    for n_steps in n_steps_list:
        est = estimate_sup(sampler(n_steps))
        row = {"n_steps": n_steps, "mean": est.mean, "stderr": est.stderr, "n": est.n}
        if previous is None:
            row.update(
                {"change": np.nan, "combined_stderr": np.nan, "consistent": True}
            )
        else:
            combined = float(np.hypot(est.stderr, previous.stderr))
            change = est.mean - previous.mean
            row.update(
                {
                    "change": change,
                    "combined_stderr": combined,
                    "consistent": bool(
                        change >= -Config.TOLERANCES["sigma_multiplier"] * combined
                    ),
                }
            )
        rows.append(row)
        previous = est
    return pd.DataFrame(rows)


# ==============================================================================
# Weighted Kolmogorov-Smirnov law equality
# ==============================================================================


@dataclass
class WeightedKSReport:
    statistic: float
    p_value: float
    n: int
    n_resamples: int
    ess: float
    label: str = "weighted-ks"
    warning: Optional[str] = None
    martingale: Optional[MartingaleCheck] = None
    control: Optional["WeightedKSReport"] = None
    ecdf: Optional[pd.DataFrame] = None

    @property
    def rejects(self) -> bool:
        return self.p_value < Config.TOLERANCES["ks_level"]

    def to_rows(self) -> List[dict]:
        rows = [
            {
                "check": self.label,
                "statistic": self.statistic,
                "p_value": self.p_value,
                "n": self.n,
                "n_resamples": self.n_resamples,
                "ess": self.ess,
                "warning": self.warning or "",
                "oracle": "paired-bootstrap",
            }
        ]
        if self.control is not None:
            rows.extend(self.control.to_rows())
        return rows


def weighted_ks_statistic(x, weights, y) -> float:
    """sup |F_w(z) - G(z)| between the weighted ecdf of x and the plain ecdf of y."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(weights, dtype=float)
    y = np.asarray(y, dtype=float)
    order = np.argsort(x)
    x_sorted, w_cum = x[order], np.cumsum(w[order])
    w_cum = np.insert(w_cum / w_cum[-1], 0, 0.0)
    points = np.sort(np.concatenate([x, y]))
    f = w_cum[np.searchsorted(x_sorted, points, side="right")]
    g = np.searchsorted(np.sort(y), points, side="right") / y.size
    return float(np.abs(f - g).max())


def weighted_ks_test(
    x,
    weights,
    y,
    n_resamples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    label: str = "weighted-ks",
) -> WeightedKSReport:
    """Paired bootstrap test that x under weights has the law of y.

    Samples are resampled jointly by index, which keeps the dependence between
    x, y and the weights. The bootstrap statistic is centered at the observed
    ecdf difference.
    """
    x = np.asarray(x, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if not (x.size == w.size == y.size):
        raise UsageError("x, weights and y must have the same length")
    if x.size < 2:
        raise UsageError("need at least 2 samples")
    if np.isnan(x).any() or np.isnan(y).any() or np.isnan(w).any():
        raise InputError("samples contain NaN")
    if (w < 0).any() or not w.sum() > 0:
        raise InputError("weights must be non-negative with positive sum")
    n_resamples = int(n_resamples or Config.TOLERANCES["bootstrap_resamples"])
    rng = rng or np.random.default_rng(0)

    n = x.size
    points = np.sort(np.concatenate([x, y]))
    size = points.size
    ix = np.searchsorted(points, x, side="left")
    iy = np.searchsorted(points, y, side="left")

    def difference(sel):
        fx = np.cumsum(np.bincount(ix[sel], weights=w[sel], minlength=size))
        fy = np.cumsum(np.bincount(iy[sel], minlength=size))
        return fx / fx[-1] - fy / sel.size

    base = difference(np.arange(n))
    statistic = float(np.abs(base).max())
    exceed = 0
    for _ in range(n_resamples):
        sel = rng.integers(0, n, n)
        if np.abs(difference(sel) - base).max() >= statistic:
            exceed += 1

    ess = float(w.sum() ** 2 / np.square(w).sum())
    warning = None
    if ess < Config.TOLERANCES["ess_floor"]:
        warning = f"effective sample size {ess:.1f} below {Config.TOLERANCES['ess_floor']:.0f}"
        logger.warning("%s: %s", label, warning)
    fx = np.cumsum(np.bincount(ix, weights=w, minlength=size))
    fy = np.cumsum(np.bincount(iy, minlength=size))
    picks = np.unique(np.linspace(0, size - 1, min(size, 201)).astype(np.int64))
    ecdf = pd.DataFrame(
        {"x": points[picks], "weighted": fx[picks] / fx[-1], "reference": fy[picks] / n}
    )
    return WeightedKSReport(
        statistic=statistic,
        p_value=(1 + exceed) / (n_resamples + 1),
        n=n,
        n_resamples=n_resamples,
        ess=ess,
        label=label,
        warning=warning,
        ecdf=ecdf,
    )


def share_measure_check(
    p: RoughBergomiParams,
    T: float,
    n_paths: int,
    seed: int,
    n_steps: int = 256,
    n_resamples: Optional[int] = None,
    options: Optional[RunOptions] = None,
) -> WeightedKSReport:
    """Law of Y_T under the share measure against the law of Y~_T.

    The S_T-weighted ecdf of Y_T is compared with the plain ecdf of Y~_T. The
    attached control compares Y_T and Y~_T without weights, which must reject
    whenever rho < 0.
    """
    grid = TimeGrid(T, n_steps)
    k = p.kernel
    weights = quad_weights(k, grid)

    def reduce(rng, size, index):
        driver = driver_chunk(k, grid, rng, size, seed, index)
        return _chunk_summary(rbergomi_chunk(p, driver, weights))

    sim = simulation(n_paths, seed, StreamTag.DRIVER, options, desc="Share measure")
    data = sim.collect(reduce)
    martingale = martingale_check(data["terminal"], p.s0)
    report = weighted_ks_test(
        data["y_T"],
        data["terminal"],
        data["tilde_y_T"],
        n_resamples,
        chunk_rng(seed, StreamTag.BOOTSTRAP, 0),
        label="share-measure",
    )
    report.martingale = martingale
    if not martingale.ok:
        note = "martingale pre-check failed"
        report.warning = f"{report.warning}; {note}" if report.warning else note
    report.control = weighted_ks_test(
        data["y_T"],
        np.ones_like(data["y_T"]),
        data["tilde_y_T"],
        n_resamples,
        chunk_rng(seed, StreamTag.BOOTSTRAP, 1),
        label="share-measure-control",
    )
    return report


# ==============================================================================
# Tail sums
# ==============================================================================


def geometric_cauchy_test(
    values: Sequence[float], ratio: Optional[float] = None
) -> bool:
    """True when a ladder of partial sums looks divergent.

    The last increment must be positive and at least ``ratio`` times the one
    before it; convergent series have increments shrinking geometrically.
    """
    ratio = Config.TOLERANCES["cauchy_ratio"] if ratio is None else ratio
    increments = np.diff(np.asarray(values, dtype=float))
    if increments.size < 2:
        raise UsageError("need at least three partial sums")
    last, prev = increments[-1], increments[-2]
    if not last > 0:
        return False
    return bool(prev <= 0 or last / prev >= ratio)


@dataclass
class TailSumReport:
    table: pd.DataFrame
    divergent: bool
    tail_exponent: float

    @property
    def partial_sums(self) -> np.ndarray:
        return self.table["partial_sum"].to_numpy()


DEFAULT_LADDER = tuple(2**k for k in range(1, 11))


def tail_sums(sup_samples, N_ladder: Sequence[int] = DEFAULT_LADDER) -> TailSumReport:
    """s_N = sum_{n <= N} P^[sup > n] along a ladder of N.

    Each s_N is the mean of per-sample counts #{n <= N : sup > n}, so its
    standard error is exact. ``tail_exponent`` is the OLS slope of
    log P^[sup > N] against log N.
    """
    x = np.asarray(sup_samples, dtype=float).ravel()
    if np.isnan(x).any():
        raise InputError("sup samples contain NaN")
    ladder = np.asarray(list(N_ladder), dtype=np.int64)
    if ladder.size < 3 or (ladder < 1).any() or (np.diff(ladder) <= 0).any():
        raise UsageError("N_ladder needs at least three strictly increasing positive integers")

    exceed = np.where(np.isinf(x), np.inf, np.ceil(x) - 1)
    rows = []
    for N in ladder:
        counts = np.clip(exceed, 0, N)
        rows.append(
            {
                "N": int(N),
                "partial_sum": float(counts.mean()),
                "stderr": (
                    float(counts.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
                ),
                "tail_prob": float((x > N).mean()),
            }
        )
    table = pd.DataFrame(rows)
    table["increment"] = table["partial_sum"].diff()

    positive = table["tail_prob"] > 0
    tail_exponent = float("nan")
    if positive.sum() >= 2:
        X = sm.add_constant(np.log(table.loc[positive, "N"].to_numpy(dtype=float)))
        fit = sm.OLS(np.log(table.loc[positive, "tail_prob"].to_numpy()), X).fit()
        tail_exponent = float(fit.params[1])

    return TailSumReport(
        table=table,
        divergent=geometric_cauchy_test(table["partial_sum"].to_numpy()),
        tail_exponent=tail_exponent,
    )
