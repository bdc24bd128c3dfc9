"""
Experiment orchestration for volsup.

This module handles:
- Loading flat ``key = value`` experiment files into a validated ExperimentConfig
- Running the check behind each subcommand and collecting result rows
- Writing the manifest, the results table and plot-ready series files
"""

import logging
import subprocess
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from . import __version__
from .config import Config
from .errors import ConfigError, DomainError
from .path_types import TimeGrid
from .pathology import (
    QuantileModel,
    class_c0_sequence,
    collect_bessel_sups,
    dg_martingale_identity,
    dg_path,
    dg_path_supremum,
    exact_sup_samples,
    hl_maximal,
    inverse_bessel_mean,
    inverse_bessel_paths,
    maximal_identity_table,
    model_by_name,
    sample_stopped_construction,
    stein_check,
    stopped_construction_report,
)
from .simulation_engine import RunOptions
from .sup_estimators import (
    BoundReport,
    MartingaleCheck,
    MCEstimate,
    Verdict,
    affine_sup_bound,
    doob_l1_check,
    lognormal_xlogplus_mean,
    lognormal_xlogx_mean,
    martingale_check,
    rbergomi_sup_bound,
    reverse_l1_check,
    share_measure_check,
    tail_sums,
)
from .sv_models import (
    AffineVolterraParams,
    RoughBergomiParams,
    affine_mean_curve,
    simulate_affine,
    simulate_affine_sv,
    simulate_gbm,
    simulate_rbergomi,
)
from .volterra_kernel import PowerLawKernel, continuity_report

logger = logging.getLogger(__name__)

COMMANDS = (
    "kernel-check",
    "simulate",
    "sup-bound",
    "measure-check",
    "doob-check",
    "reverse-l1",
    "hl-maximal",
    "dubins-gilat",
    "stopped-lm",
    "affine-heston",
)

MODELS = ("rbergomi", "gbm", "affine", "bessel")

RESULT_COLUMNS = (
    "command",
    "check",
    "parameter",
    "estimate",
    "stderr",
    "reference",
    "reference_stderr",
    "direction",
    "verdict",
    "oracle",
    "n",
    "note",
)

CHECKPOINTS = (0.25, 0.5, 1.0)
DEFAULT_EPS = tuple(2.0**-k for k in range(1, 11))

# Closed-form H_F and the tolerance it is checked to
HL_CLOSED_FORMS: Dict[str, Tuple[Callable[[float], float], float]] = {
    "uniform": (lambda t: 0.5 * (1.0 + t), 1e-10),
    "exponential": (lambda t: 1.0 - np.log1p(-t), 1e-8),
}


# ==============================================================================
# Configuration
# ==============================================================================


def _parse_int(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError("boolean is not an integer")
    try:
        return int(str(value).strip())
    except ValueError:
        number = float(value)
        if not number.is_integer():
            raise
        return int(number)


def _parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_floats(value: Any) -> Tuple[float, ...]:
    if isinstance(value, str):
        return tuple(float(part) for part in value.replace(" ", "").split(",") if part)
    return tuple(float(v) for v in value)


def _parse_text(value: Any) -> str:
    return str(value).strip()


_PARSERS: Dict[str, Callable[[Any], Any]] = {
    "command": _parse_text,
    "model": _parse_text,
    "dist": _parse_text,
    "alpha": float,
    "eta": float,
    "rho": float,
    "v0": float,
    "s0": float,
    "sigma": float,
    "a1": float,
    "b0": float,
    "b1": float,
    "y0": float,
    "horizon": float,
    "n_steps": _parse_int,
    "n_paths": _parse_int,
    "seed": _parse_int,
    "n_workers": _parse_int,
    "output_dir": lambda v: Path(str(v).strip()),
    "t": float,
    "s": float,
    "tail_exponent": float,
    "start_radius": float,
    "eps_list": _parse_floats,
    "refine": _parse_bool,
    "n_resamples": _parse_int,
}

_INT_TOLERANCES = ("fixed_point_max_iter", "bootstrap_resamples")


def _coerce(key: str, raw: Any, parser: Callable[[Any], Any]) -> Any:
    try:
        return parser(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from exc


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


@dataclass
class ExperimentConfig:
    """One experiment: the subcommand to run and every number it depends on.

    Fields mirror the keys of an experiment file. ``tolerances`` holds the
    ``tol_*`` overrides applied to ``Config.TOLERANCES`` while the run lasts.
    """

    command: str
    model: str = "rbergomi"
    dist: str = "uniform"
    alpha: float = Config.DEFAULT_PARAMS["alpha"]
    eta: float = Config.DEFAULT_PARAMS["eta"]
    rho: float = Config.DEFAULT_PARAMS["rho"]
    v0: float = Config.DEFAULT_PARAMS["v0"]
    s0: float = Config.DEFAULT_PARAMS["s0"]
    sigma: float = Config.DEFAULT_PARAMS["sigma"]
    a1: float = Config.AFFINE_PARAMS["a1"]
    b0: float = Config.AFFINE_PARAMS["b0"]
    b1: float = Config.AFFINE_PARAMS["b1"]
    y0: float = Config.AFFINE_PARAMS["y0"]
    horizon: float = Config.DEFAULT_PARAMS["horizon"]
    n_steps: int = Config.DEFAULT_PARAMS["n_steps"]
    n_paths: int = Config.DEFAULT_PARAMS["n_paths"]
    seed: int = Config.DEFAULT_PARAMS["seed"]
    n_workers: Optional[int] = None
    output_dir: Path = Config.DEFAULT_OUTPUT_DIR
    t: float = 0.5
    s: float = 0.5
    tail_exponent: float = 1.5
    start_radius: float = 1.0
    eps_list: Tuple[float, ...] = DEFAULT_EPS
    refine: bool = False
    n_resamples: Optional[int] = None
    tolerances: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "ExperimentConfig":
        """Coerce raw key/value pairs; unknown keys are rejected.

        Commands on the affine model take their alpha, eta and rho defaults
        from ``Config.AFFINE_PARAMS``.
        """
        known = {f.name for f in fields(cls)} - {"tolerances"}
        parsed: Dict[str, Any] = {}
        tolerances: Dict[str, float] = {}
        for raw_key, raw in values.items():
            key = raw_key.strip().lower().replace("-", "_")
            if raw is None:
                raise ConfigError(f"key {key!r} has no value")
            if key.startswith("tol_"):
                name = key[4:]
                if name not in Config.TOLERANCES:
                    raise ConfigError(f"unknown tolerance {key!r}")
                parser = _parse_int if name in _INT_TOLERANCES else float
                tolerances[name] = _coerce(key, raw, parser)
                continue
            if key not in known:
                raise ConfigError(f"unknown key {key!r}")
            parsed[key] = _coerce(key, raw, _PARSERS[key])

        if "command" not in parsed:
            raise ConfigError("missing required key 'command'")
        if parsed["command"] not in COMMANDS:
            raise ConfigError(
                f"unknown command {parsed['command']!r}; choose from {', '.join(COMMANDS)}"
            )
        if parsed["command"] == "affine-heston" or (
            parsed["command"] == "simulate" and parsed.get("model") == "affine"
        ):
            for key, value in Config.AFFINE_PARAMS.items():
                parsed.setdefault(key, value)
        return cls(**parsed, tolerances=tolerances)

    def to_mapping(self) -> Dict[str, str]:
        """String form of every set field, in field order, readable by from_mapping."""
        out: Dict[str, str] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "tolerances":
                for name, tol in sorted(value.items()):
                    out[f"tol_{name}"] = _format_value(tol)
            elif value is not None:
                out[f.name] = _format_value(value)
        return out

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.n_steps)

    def kernel(self) -> PowerLawKernel:
        return PowerLawKernel(self.alpha, self.eta)

    def rbergomi_params(self) -> RoughBergomiParams:
        return RoughBergomiParams(self.alpha, self.eta, self.rho, self.v0, self.s0)

    def affine_params(self) -> AffineVolterraParams:
        return AffineVolterraParams(
            a1=self.a1,
            b0=self.b0,
            b1=self.b1,
            y0=self.y0,
            alpha=self.alpha,
            eta=self.eta,
            rho=self.rho,
            s0=self.s0,
        )

    def quantile_model(self) -> QuantileModel:
        return model_by_name(self.dist, self.tail_exponent)

    def validate(self) -> None:
        """Check every value against the preconditions of the delegated ops.

        Raises:
            ConfigError: For values no command accepts
            DomainError: For model parameters outside their domain
        """
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.n_paths < 2:
            raise ConfigError(f"n_paths must be at least 2, got {self.n_paths}")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be at least 1, got {self.n_steps}")
        if not self.horizon > 0:
            raise ConfigError(f"horizon must be > 0, got {self.horizon}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.n_workers is not None and self.n_workers < 1:
            raise ConfigError(f"n_workers must be at least 1, got {self.n_workers}")
        if self.n_resamples is not None and self.n_resamples < 1:
            raise ConfigError(f"n_resamples must be at least 1, got {self.n_resamples}")

        command = self.command
        if command == "kernel-check":
            self.kernel()
            eps = np.asarray(self.eps_list, dtype=float)
            if eps.size < 2 or (eps <= 0).any() or (np.diff(eps) >= 0).any():
                raise ConfigError("eps_list needs two or more positive, decreasing values")
        elif command == "simulate":
            if self.model not in MODELS:
                raise ConfigError(f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
            if self.model == "rbergomi":
                self.rbergomi_params()
            elif self.model == "affine":
                self.affine_params()
            elif self.model == "gbm":
                self._check_gbm()
            elif not self.start_radius > 0:
                raise DomainError(f"start_radius must be > 0, got {self.start_radius}")
        elif command in ("sup-bound", "measure-check"):
            self.rbergomi_params()
        elif command == "doob-check":
            self._check_gbm()
        elif command == "reverse-l1":
            self._check_gbm()
            if self.s0 != 1.0:
                raise DomainError(f"reverse L1 check needs s0 = 1, got {self.s0}")
        elif command == "hl-maximal":
            self.quantile_model()
            if not 0 < self.t < 1:
                raise DomainError(f"t must lie in (0, 1), got {self.t}")
        elif command == "dubins-gilat":
            self.quantile_model()
            if not 0 < self.s < 1:
                raise DomainError(f"s must lie in (0, 1), got {self.s}")
        elif command == "stopped-lm":
            if not self.start_radius > 0:
                raise DomainError(f"start_radius must be > 0, got {self.start_radius}")
        elif command == "affine-heston":
            self.affine_params()

    def _check_gbm(self) -> None:
        if self.sigma < 0:
            raise DomainError(f"sigma must be ≥ 0, got {self.sigma}")
        if not self.s0 > 0:
            raise DomainError(f"s0 must be > 0, got {self.s0}")


def read_config_file(path: Union[str, Path]) -> Dict[str, Optional[str]]:
    """Raw key/value pairs of a flat experiment file.

    Raises:
        ConfigError: If the file does not exist
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return dict(dotenv_values(path))


def build_config(
    command: Optional[str] = None,
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """Merge defaults < config file < VOLSUP_SEED < overrides, then validate."""
    values: Dict[str, Any] = {}
    if path is not None:
        values.update(read_config_file(path))
    if command is not None:
        in_file = values.get("command")
        if in_file is not None and in_file.strip() != command:
            raise ConfigError(f"config file is for {in_file!r}, not {command!r}")
        values["command"] = command
    try:
        env_seed = Config.env_seed()
    except ValueError as exc:
        raise ConfigError("VOLSUP_SEED must be an integer") from exc
    if env_seed is not None:
        values["seed"] = env_seed
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    config = ExperimentConfig.from_mapping(values)
    config.validate()
    return config


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    return build_config(path=path)


def config_from_manifest(path: Union[str, Path]) -> ExperimentConfig:
    """Rebuild the config echoed in a manifest.txt, seed included."""
    values = {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("config."):
            key, _, value = line[len("config.") :].partition(" = ")
            values[key] = value
    return ExperimentConfig.from_mapping(values)


@contextmanager
def tolerance_overrides(overrides: Mapping[str, float]) -> Iterator[None]:
    saved = dict(Config.TOLERANCES)
    Config.TOLERANCES.update(overrides)
    try:
        yield
    finally:
        Config.TOLERANCES.clear()
        Config.TOLERANCES.update(saved)


# ==============================================================================
# Result rows
# ==============================================================================


def result_row(
    check: str,
    estimate: float,
    stderr: float = 0.0,
    reference: float = float("nan"),
    reference_stderr: float = 0.0,
    direction: str = "",
    verdict: Union[Verdict, str] = "",
    oracle: str = "",
    n: int = 0,
    parameter: str = "",
    note: str = "",
) -> Dict[str, Any]:
    """One results.csv row. Rows without a verdict are informational."""
    return {
        "check": check,
        "parameter": parameter,
        "estimate": float(estimate),
        "stderr": float(stderr),
        "reference": float(reference),
        "reference_stderr": float(reference_stderr),
        "direction": direction,
        "verdict": verdict.value if isinstance(verdict, Verdict) else verdict,
        "oracle": oracle,
        "n": int(n),
        "note": note,
    }


def oracle_verdict(
    estimate: float,
    stderr: float,
    reference: float,
    reference_stderr: float = 0.0,
    tolerance: float = 0.0,
) -> Verdict:
    """Two-sided comparison with a reference value.

    Within the sigma multiplier of the combined stderr the check holds. Beyond
    it, a further ``noise_band`` stderrs (2 by default) are labelled violated
    within noise, which leaves the exit code at 0; ``tol_noise_band = 0`` makes
    every miss past the multiplier a hard violation. Deterministic checks pass
    a zero stderr and an absolute tolerance.
    """
    k = Config.TOLERANCES["sigma_multiplier"]
    band = Config.TOLERANCES["noise_band"]
    combined = float(np.hypot(stderr, reference_stderr))
    gap = abs(estimate - reference) - tolerance
    if gap <= k * combined:
        return Verdict.HOLDS
    if gap <= (k + band) * combined:
        return Verdict.WITHIN_NOISE
    return Verdict.VIOLATED


def oracle_row(
    check: str,
    est: MCEstimate,
    reference: float,
    oracle: str,
    parameter: str = "",
    note: str = "",
) -> Dict[str, Any]:
    return result_row(
        check,
        est.mean,
        est.stderr,
        reference,
        direction="equal",
        verdict=oracle_verdict(est.mean, est.stderr, reference),
        oracle=oracle,
        n=est.n,
        parameter=parameter,
        note=note,
    )


def exact_row(
    check: str,
    value: float,
    reference: float,
    tolerance: float,
    oracle: str,
    parameter: str = "",
    n: int = 0,
    note: str = "",
) -> Dict[str, Any]:
    return result_row(
        check,
        value,
        reference=reference,
        direction="equal",
        verdict=oracle_verdict(value, 0.0, reference, tolerance=tolerance),
        oracle=oracle,
        n=n,
        parameter=parameter,
        note=note,
    )


def expectation_row(
    check: str,
    value: float,
    observed: bool,
    expected: bool,
    oracle: str,
    parameter: str = "",
    note: str = "",
) -> Dict[str, Any]:
    """Row for a yes/no property that has a known answer."""
    return result_row(
        check,
        value,
        direction="flag",
        verdict=Verdict.HOLDS if observed == expected else Verdict.VIOLATED,
        oracle=oracle,
        parameter=parameter,
        note=note,
    )


def bound_rows(report: BoundReport, parameter: str = "") -> List[Dict[str, Any]]:
    rows = []
    for part in report.reports():
        rhs_se = part.rhs.stderr if isinstance(part.rhs, MCEstimate) else 0.0
        rows.append(
            result_row(
                part.label,
                part.lhs.mean,
                part.lhs.stderr,
                part.rhs_value,
                rhs_se,
                direction=part.direction,
                verdict=part.verdict,
                oracle=part.oracle,
                n=part.lhs.n,
                parameter=parameter,
                note=part.caveat or "",
            )
        )
    return rows


def martingale_row(check: MartingaleCheck, parameter: str = "") -> Dict[str, Any]:
    return oracle_row(
        "martingale", check.estimate, check.s0, "closed-form", parameter, "E[S_T] = S0"
    )


@dataclass
class RunResult:
    rows: List[Dict[str, Any]] = field(default_factory=list)
    series: Dict[str, pd.DataFrame] = field(default_factory=dict)
    summary: List[str] = field(default_factory=list)

    def add(self, *rows: Dict[str, Any]) -> None:
        self.rows.extend(rows)

    @property
    def verdicts(self) -> Dict[str, str]:
        out = {}
        for row in self.rows:
            if row["verdict"]:
                key = row["check"]
                if row["parameter"]:
                    key = f"{key}[{row['parameter']}]"
                out[key] = row["verdict"]
        return out

    @property
    def exit_code(self) -> int:
        return 2 if Verdict.VIOLATED.value in self.verdicts.values() else 0

    def table(self, command: str) -> pd.DataFrame:
        columns = [c for c in RESULT_COLUMNS if c != "command"]
        frame = pd.DataFrame(self.rows, columns=columns)
        frame.insert(0, "command", command)
        return frame


@dataclass
class RunManifest:
    config: Dict[str, str]
    version: str
    seed: int
    started: str
    wall_clock: float
    verdicts: Dict[str, str]
    exit_code: int
    summary: List[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"version = {self.version}",
            f"started = {self.started}",
            f"wall_clock_seconds = {self.wall_clock:.3f}",
            f"seed = {self.seed}",
            f"exit_code = {self.exit_code}",
        ]
        lines += [f"config.{key} = {value}" for key, value in self.config.items()]
        lines += [
            f"verdict.{key.replace('=', ':')} = {value}"
            for key, value in self.verdicts.items()
        ]
        return "\n".join(lines) + "\n"


# ==============================================================================
# Runners
# ==============================================================================


def _checkpoints(grid: TimeGrid) -> List[Tuple[float, int]]:
    marks: List[Tuple[float, int]] = []
    for fraction in CHECKPOINTS:
        index = int(round(fraction * grid.n_steps))
        if index > 0 and (not marks or marks[-1][1] != index):
            marks.append((float(grid.nodes[index]), index))
    return marks


def run_kernel_check(config: ExperimentConfig, options: RunOptions) -> RunResult:
    k = config.kernel()
    report = continuity_report(k, config.horizon, config.eps_list)
    result = RunResult()
    for row in report.table.itertuples(index=False):
        exact = k.scale / k.alpha * row.eps**k.alpha
        result.add(
            exact_row(
                "window-l1",
                row.sup_window_l1,
                exact,
                1e-9 * exact,
                "closed-form",
                parameter=f"eps={row.eps:g}",
            )
        )
    result.add(
        exact_row("gamma-hat", report.gamma_hat, k.alpha, 1e-6, "ols-fit"),
        exact_row("gamma-l2", report.gamma_l2, 2 * k.alpha - 1, 1e-6, "ols-fit"),
        result_row(
            "gamma-shift",
            report.gamma_shift,
            reference=k.alpha,
            oracle="ols-fit",
            note="slope over the whole eps range",
        ),
    )
    result.series["kernel_windows"] = report.table
    result.summary += [
        f"gamma_hat = {report.gamma_hat:.6f}",
        f"gamma_l2 = {report.gamma_l2:.6f}",
        f"h0_gamma = {report.h0_gamma:.6f}",
    ]
    return result


def _simulate_rbergomi(config: ExperimentConfig, options: RunOptions) -> RunResult:
    p = config.rbergomi_params()
    grid = config.grid
    marks = _checkpoints(grid)
    cols = [index for _, index in marks]
    squares, variances, terminals = [], [], []
    violations = 0
    s_sum = np.zeros(grid.n_steps + 1)
    v_sum = np.zeros(grid.n_steps + 1)
    for chunk in simulate_rbergomi(p, grid, config.n_paths, config.seed, options):
        squares.append(np.square(chunk.Y.values[:, cols]))
        variances.append(chunk.v.values[:, cols])
        terminals.append(chunk.S.values[:, -1])
        violations += int((chunk.tilde_y.values > chunk.Y.values).sum())
        s_sum += chunk.S.values.sum(axis=0)
        v_sum += chunk.v.values.sum(axis=0)
    squares_all = np.concatenate(squares)
    variances_all = np.concatenate(variances)

    result = RunResult()
    for j, (t, _) in enumerate(marks):
        parameter = f"t={t:g}"
        result.add(
            oracle_row(
                "rl-variance",
                MCEstimate.from_samples(squares_all[:, j]),
                p.eta**2 * t ** (2 * p.alpha - 1),
                "closed-form",
                parameter,
            ),
            oracle_row(
                "forward-variance",
                MCEstimate.from_samples(variances_all[:, j]),
                float(p.forward_variance(t)),
                "closed-form",
                parameter,
            ),
        )
    result.add(
        result_row(
            "apriori-domination",
            violations,
            reference=0.0,
            direction="upper",
            verdict=Verdict.HOLDS if violations == 0 else Verdict.VIOLATED,
            oracle="pathwise",
            n=config.n_paths,
            note="nodes with Y~ > Y",
        ),
        martingale_row(martingale_check(np.concatenate(terminals), p.s0)),
    )
    result.series["rbergomi_mean_paths"] = pd.DataFrame(
        {
            "t": grid.nodes,
            "S_mean": s_sum / config.n_paths,
            "v_mean": v_sum / config.n_paths,
        }
    )
    result.summary.append(f"a-priori domination violations: {violations}")
    return result


def _simulate_gbm(config: ExperimentConfig, options: RunOptions) -> RunResult:
    grid = config.grid
    marks = _checkpoints(grid)
    cols = [index for _, index in marks]
    values, sups = [], []
    s_sum = np.zeros(grid.n_steps + 1)
    batches = simulate_gbm(
        config.sigma, grid, config.n_paths, config.seed, config.s0, options
    )
    for batch in batches:
        values.append(batch.values[:, cols])
        sups.append(batch.values.max(axis=1))
        s_sum += batch.values.sum(axis=0)
    values_all = np.concatenate(values)
    result = RunResult()
    for j, (t, _) in enumerate(marks):
        result.add(
            oracle_row(
                "gbm-mean",
                MCEstimate.from_samples(values_all[:, j]),
                config.s0,
                "closed-form",
                f"t={t:g}",
            )
        )
    sup = MCEstimate.from_samples(np.concatenate(sups))
    result.add(
        result_row("expected-sup", sup.mean, sup.stderr, oracle="monte-carlo", n=sup.n)
    )
    result.series["gbm_mean_path"] = pd.DataFrame(
        {"t": grid.nodes, "S_mean": s_sum / config.n_paths}
    )
    result.summary.append(f"E[sup S] = {sup.mean:.6f} +/- {sup.stderr:.2g}")
    return result


def _simulate_affine(config: ExperimentConfig, options: RunOptions) -> RunResult:
    p = config.affine_params()
    grid = config.grid
    mean_curve = affine_mean_curve(p, grid)
    y_sum = np.zeros(grid.n_steps + 1)
    marks = _checkpoints(grid)
    cols = [index for _, index in marks]
    values = []
    for batch in simulate_affine(p, grid, config.n_paths, config.seed, options):
        values.append(batch.values[:, cols])
        y_sum += batch.values.sum(axis=0)
    values_all = np.concatenate(values)
    result = RunResult()
    for j, (t, index) in enumerate(marks):
        result.add(
            oracle_row(
                "affine-mean",
                MCEstimate.from_samples(values_all[:, j]),
                float(mean_curve.values[index]),
                "resolvent-solve",
                f"t={t:g}",
                note="Y+ against the linear mean equation",
            )
        )
    result.series["affine_mean_curve"] = pd.DataFrame(
        {
            "t": grid.nodes,
            "mc_mean": y_sum / config.n_paths,
            "resolvent": mean_curve.values,
        }
    )
    return result


def _bessel_tail_rows(
    result: RunResult, table: pd.DataFrame, horizon: float, n_paths: int
) -> None:
    for row in table.itertuples(index=False):
        parameter = f"T={horizon:g},n={row.n:g}"
        result.add(
            result_row(
                "maximal-identity",
                row.empirical,
                row.stderr,
                row.exact_horizon,
                direction="equal",
                verdict=oracle_verdict(row.empirical, row.stderr, row.exact_horizon),
                oracle="closed-form",
                n=n_paths,
                parameter=parameter,
                note="continuous suprema from the simulated paths",
            ),
            result_row(
                "grid-sup-tail",
                row.grid,
                row.stderr,
                row.exact_horizon,
                direction="lower",
                verdict=Verdict.HOLDS if row.grid_below else Verdict.VIOLATED,
                oracle="closed-form",
                n=n_paths,
                parameter=parameter,
                note=f"grid maxima; doubling the grid adds {row.grid_doubling_gain:.4f}",
            ),
        )


def _simulate_bessel(config: ExperimentConfig, options: RunOptions) -> RunResult:
    grid = config.grid
    r = config.start_radius
    marks = _checkpoints(grid)
    sups, values_all = collect_bessel_sups(
        inverse_bessel_paths(grid, config.n_paths, config.seed, r, options),
        keep=[index for _, index in marks],
    )

    result = RunResult()
    for j, (t, _) in enumerate(marks):
        result.add(
            oracle_row(
                "bessel-mean",
                MCEstimate.from_samples(values_all[:, j]),
                inverse_bessel_mean(t, r),
                "closed-form",
                f"t={t:g}",
            )
        )

    # same step on twice the horizon
    long_grid = TimeGrid(2 * grid.horizon, 2 * grid.n_steps)
    long_sups, _ = collect_bessel_sups(
        inverse_bessel_paths(long_grid, config.n_paths, config.seed, r, options)
    )
    reference = exact_sup_samples(config.n_paths, config.seed, grid.horizon, r, options)
    tables = {}
    for horizon, drawn, ref in (
        (grid.horizon, sups, reference),
        (long_grid.horizon, long_sups, None),
    ):
        table = maximal_identity_table(
            drawn.bridge,
            horizon,
            start_radius=r,
            grid_sups=drawn.grid,
            coarse_sups=drawn.coarse,
            reference_sups=ref,
        )
        if "grid_doubling_gain" not in table:
            table["grid_doubling_gain"] = float("nan")
        tables[horizon] = table
        _bessel_tail_rows(result, table, horizon, config.n_paths)

    base = tables[grid.horizon]
    for row in base.itertuples(index=False):
        result.add(
            result_row(
                "exact-sampler-tail",
                row.exact_sampler,
                row.stderr,
                row.exact_horizon,
                oracle="closed-form",
                n=config.n_paths,
                parameter=f"T={grid.horizon:g},n={row.n:g}",
                note="reference draws by inverting the closed-form law",
            )
        )
    short = base["truncation_gap"].to_numpy()
    long = tables[long_grid.horizon]["truncation_gap"].to_numpy()
    result.add(
        expectation_row(
            "truncation-gap-shrinks",
            float(long.max()),
            bool((long < short).all()),
            True,
            "closed-form",
            note="1/(r n) minus the horizon law, doubled horizon",
        )
    )
    result.series["maximal_identity"] = pd.DataFrame(
        {
            "n": base["n"],
            "bridge_sample": base["empirical"],
            "grid_sample": base["grid"],
            "exact_sampler": base["exact_sampler"],
            "exact_horizon": base["exact_horizon"],
            "limit": base["limit"],
        }
    )
    capped = sups.capped + long_sups.capped
    if capped:
        result.summary.append(f"{capped} paths hit the value cap")
    return result


_SIMULATORS = {
    "rbergomi": _simulate_rbergomi,
    "gbm": _simulate_gbm,
    "affine": _simulate_affine,
    "bessel": _simulate_bessel,
}


def run_simulate(config: ExperimentConfig, options: RunOptions) -> RunResult:
    return _SIMULATORS[config.model](config, options)


def _bound_summary(report: BoundReport) -> str:
    return (
        f"{report.label}: E[sup] = {report.lhs.mean:.6f} +/- {report.lhs.stderr:.2g}, "
        f"bound = {report.rhs_value:.6f} ({report.verdict.value})"
    )


def run_sup_bound(config: ExperimentConfig, options: RunOptions) -> RunResult:
    p = config.rbergomi_params()
    result = RunResult()
    steps = [config.n_steps] + ([2 * config.n_steps] if config.refine else [])
    reports = []
    for n_steps in steps:
        report = rbergomi_sup_bound(
            p, config.horizon, config.n_paths, config.seed, n_steps, options
        )
        reports.append(report)
        parameter = f"n_steps={n_steps}"
        result.add(*bound_rows(report, parameter))
        result.add(martingale_row(report.extra["martingale"], parameter))
        result.summary += [_bound_summary(part) for part in report.reports()]

    if config.refine:
        coarse, fine = reports
        change = fine.lhs.mean - coarse.lhs.mean
        combined = float(np.hypot(fine.lhs.stderr, coarse.lhs.stderr))
        result.add(
            result_row(
                "grid-refinement",
                change,
                combined,
                0.0,
                direction="equal",
                verdict=oracle_verdict(change, combined, 0.0),
                oracle="refinement-mc",
                n=config.n_paths,
                parameter=f"n_steps={steps[0]}->{steps[1]}",
            )
        )
    result.series["sup_bound"] = pd.DataFrame(
        {
            "n_steps": steps,
            "expected_sup": [r.lhs.mean for r in reports],
            "bound": [r.rhs_value for r in reports],
            "variance_bound": [r.secondary.rhs_value for r in reports if r.secondary],
        }
    )
    return result


def run_measure_check(config: ExperimentConfig, options: RunOptions) -> RunResult:
    p = config.rbergomi_params()
    report = share_measure_check(
        p,
        config.horizon,
        config.n_paths,
        config.seed,
        config.n_steps,
        config.n_resamples,
        options,
    )
    level = Config.TOLERANCES["ks_level"]
    result = RunResult()
    result.add(
        result_row(
            "share-measure-ks",
            report.p_value,
            reference=level,
            direction="lower",
            verdict=Verdict.VIOLATED if report.rejects else Verdict.HOLDS,
            oracle="paired-bootstrap",
            n=report.n,
            note=f"statistic {report.statistic:.6g}; ess {report.ess:.0f}"
            + (f"; {report.warning}" if report.warning else ""),
        )
    )
    control = report.control
    if control is not None:
        if p.rho < 0:
            verdict: Union[Verdict, str] = (
                Verdict.HOLDS if control.rejects else Verdict.WITHIN_NOISE
            )
        else:
            verdict = ""
        result.add(
            result_row(
                "share-measure-control",
                control.p_value,
                reference=level,
                direction="upper" if p.rho < 0 else "",
                verdict=verdict,
                oracle="paired-bootstrap",
                n=control.n,
                note=f"unweighted Y_T against Y~_T; statistic {control.statistic:.6g}",
            )
        )
    if report.martingale is not None:
        result.add(martingale_row(report.martingale))
    if report.ecdf is not None:
        result.series["share_measure_ecdf"] = report.ecdf
    result.summary.append(
        f"weighted KS statistic = {report.statistic:.6g}, p-value = {report.p_value:.4f}"
    )
    return result


def _gbm_batches(config: ExperimentConfig, options: RunOptions, s0: float):
    batches = simulate_gbm(
        config.sigma, config.grid, config.n_paths, config.seed, s0, options
    )
    return list(batches)


def run_doob_check(config: ExperimentConfig, options: RunOptions) -> RunResult:
    batches = _gbm_batches(config, options, config.s0)
    report = doob_l1_check(batches, config.s0)
    result = RunResult()
    result.add(*bound_rows(report))
    log_mean = lognormal_xlogx_mean(config.sigma, config.horizon)
    reference = config.s0 * (log_mean + np.log(config.s0))
    result.add(
        oracle_row("xlogx-mean", report.extra["xlogx"], reference, "closed-form")
    )

    tails = tail_sums(np.concatenate([b.values.max(axis=1) for b in batches]))
    result.add(
        result_row(
            "sup-tail-sums",
            float(tails.partial_sums[-1]),
            float(tails.table["stderr"].iloc[-1]),
            oracle="geometric-cauchy",
            n=config.n_paths,
            note=f"divergent={tails.divergent}; tail exponent {tails.tail_exponent:.3f}",
        )
    )
    tail_columns = ["N", "partial_sum", "stderr", "tail_prob"]
    result.series["doob_tail_sums"] = tails.table[tail_columns]
    result.summary.append(_bound_summary(report))
    return result


def run_reverse_l1(config: ExperimentConfig, options: RunOptions) -> RunResult:
    batches = _gbm_batches(config, options, 1.0)
    sups = np.concatenate([b.values.max(axis=1) for b in batches])
    closing = np.concatenate([b.values[:, -1] for b in batches])
    report = reverse_l1_check(sups, closing, 1.0)
    closed = lognormal_xlogplus_mean(config.sigma, config.horizon)
    by_quad = lognormal_xlogplus_mean(config.sigma, config.horizon, method="quad")

    result = RunResult()
    result.add(*bound_rows(report))
    result.add(
        exact_row("xlogplus-quadrature", by_quad, closed, 1e-8, "quadrature"),
        oracle_row("xlogplus-mean", report.extra["xlogplus"], closed, "closed-form"),
    )
    grid = config.grid
    running = np.concatenate([np.maximum.accumulate(b.values, axis=1) for b in batches])
    result.series["reverse_l1"] = pd.DataFrame(
        {
            "t": grid.nodes,
            "sup_mean": running.mean(axis=0),
            "lower_bound": [
                1.0 + lognormal_xlogplus_mean(config.sigma, t) for t in grid.nodes
            ],
        }
    )
    result.summary.append(_bound_summary(report))
    return result


def _stein_row(F: QuantileModel) -> Dict[str, Any]:
    report = stein_check(F)
    expected = not F.name.startswith("pareto_tail")
    return expectation_row(
        "stein-xlogx",
        report.xlogx_integral,
        report.predicts_H_in_L1,
        expected,
        "truncation-ladder",
        note=f"predicts_H_in_L1={report.predicts_H_in_L1}",
    )


def run_hl_maximal(config: ExperimentConfig, options: RunOptions) -> RunResult:
    F = config.quantile_model()
    value = hl_maximal(F, config.t)
    result = RunResult()
    result.summary.append(f"{value:.12g}")

    points = np.linspace(0.005, 0.995, 100)
    curve = np.array([hl_maximal(F, t) for t in points])
    limit = hl_maximal(F, 1e-12)
    closed = HL_CLOSED_FORMS.get(config.dist)
    if closed is not None:
        formula, tolerance = closed
        result.add(
            exact_row(
                "hl-maximal",
                value,
                formula(config.t),
                tolerance,
                "closed-form",
                f"t={config.t:g}",
            ),
            exact_row(
                "hl-closed-form-grid",
                float(np.abs(curve - np.array([formula(t) for t in points])).max()),
                0.0,
                tolerance,
                "closed-form",
                n=points.size,
                note="max abs error over the evaluation grid",
            ),
            exact_row("hl-limit-at-zero", limit, F.mean, 1e-8, "closed-form"),
        )
    else:
        result.add(
            result_row(
                "hl-maximal", value, oracle="quadrature", parameter=f"t={config.t:g}"
            ),
            result_row(
                "hl-limit-at-zero",
                limit,
                reference=F.mean,
                oracle="quadrature",
                note="heavy tail integral",
            ),
        )
    result.add(_stein_row(F))
    result.series["hl_maximal"] = pd.DataFrame({"t": points, "H": curve})
    return result


def run_dubins_gilat(config: ExperimentConfig, options: RunOptions) -> RunResult:
    F = config.quantile_model()
    points = np.linspace(0.025, 0.975, 20)
    residuals = [
        abs(dg_martingale_identity(F, t1, t2))
        for t1 in points
        for t2 in points
        if t1 <= t2
    ]
    path = dg_path(F, config.s, TimeGrid(1.0, min(config.n_steps, 200)))
    supremum = dg_path_supremum(F, config.s)

    result = RunResult()
    result.add(
        exact_row(
            "dg-identity",
            float(max(residuals)),
            0.0,
            1e-8,
            "quadrature",
            n=len(residuals),
            note="max residual of E[X_t2 | U >= t1] = H_F(t1)",
        ),
        result_row(
            "dg-path-supremum",
            path.supremum,
            reference=supremum,
            direction="upper",
            verdict=(
                Verdict.HOLDS
                if path.supremum <= supremum + 1e-12
                else Verdict.VIOLATED
            ),
            oracle="quadrature",
            parameter=f"s={config.s:g}",
            note="grid maximum against H_F(s)",
        ),
        _stein_row(F),
    )
    result.series["dg_path"] = pd.DataFrame({"t": path.grid.nodes, "X": path.values})
    result.summary.append(f"max identity residual = {max(residuals):.3g}")
    return result


def run_stopped_lm(config: ExperimentConfig, options: RunOptions) -> RunResult:
    r = config.start_radius
    m0 = 1.0 / r
    c = class_c0_sequence()
    paths, levels = sample_stopped_construction(
        config.grid, config.n_paths, config.seed, c, options, start_radius=r
    )
    reference = exact_sup_samples(
        config.n_paths, config.seed, config.horizon, r, options
    )
    report = stopped_construction_report(paths, levels, c, reference_sups=reference)
    T = f"T={config.horizon:g}"

    result = RunResult()
    for row in report.tails.itertuples(index=False):
        result.add(
            result_row(
                "stopped-tail",
                row.empirical,
                row.stderr,
                row.oracle,
                direction="equal",
                verdict=oracle_verdict(row.empirical, row.stderr, row.oracle),
                oracle=row.provenance,
                n=config.n_paths,
                parameter=f"{T},n={row.n}",
                note="continuous suprema from the simulated paths",
            ),
            result_row(
                "stopped-tail-grid",
                row.grid,
                row.stderr,
                row.oracle,
                oracle=row.provenance,
                n=config.n_paths,
                parameter=f"{T},n={row.n}",
                note=(
                    "sigma at the first grid node; doubling the grid adds "
                    f"{getattr(row, 'grid_doubling_gain', float('nan')):.4f}"
                ),
            ),
            result_row(
                "stopped-tail-exact-sampler",
                row.exact_sampler,
                row.stderr,
                row.oracle,
                oracle=row.provenance,
                n=config.n_paths,
                parameter=f"{T},n={row.n}",
                note="reference draws by inverting the closed-form law",
            ),
        )
    result.add(
        oracle_row(
            "ui-capped",
            report.expectation_capped,
            m0,
            "closed-form",
            parameter=T,
            note=f"E[M^sigma_T], level capped at {report.level_cap:g}",
        ),
        result_row(
            "ui-uncapped",
            report.expectation_uncapped.mean,
            report.expectation_uncapped.stderr,
            m0,
            oracle="closed-form",
            n=report.expectation_uncapped.n,
            parameter=T,
            note=f"P[Theta > {report.level_cap:g}] = {report.mass_beyond_cap:.3g}",
        ),
        oracle_row(
            "bessel-terminal-mean",
            report.terminal_mean,
            inverse_bessel_mean(config.horizon, r),
            "closed-form",
            parameter=T,
        ),
        result_row(
            "stopped-terminal-grid",
            report.grid_expectation.mean,
            report.grid_expectation.stderr,
            m0,
            oracle="closed-form",
            n=report.grid_expectation.n,
            parameter=T,
            note="stopping on grid nodes",
        ),
        expectation_row(
            "h1-series",
            float(report.series["partial_sum"].iloc[-1]),
            report.series_divergent,
            True,
            "closed-form",
            parameter="N=" + "/".join(str(n) for n in report.series["N"]),
            note="sum (1/n)(1/c_n) by the geometric Cauchy test",
        ),
        exact_row("c1", float(c.c(1)), float(np.log(np.e + 1)), 1e-12, "closed-form"),
    )
    for name, tails in report.contrast.items():
        result.add(
            result_row(
                f"contrast-{name}",
                float(tails.partial_sums[-1]),
                float(tails.table["stderr"].iloc[-1]),
                oracle="geometric-cauchy",
                n=config.n_paths,
                note=f"divergent={tails.divergent}; tail exponent {tails.tail_exponent:.3f}",
            )
        )

    tail_columns = [
        column
        for column in ("n", "empirical", "oracle", "stderr", "grid", "exact_sampler")
        if column in report.tails
    ]
    result.series["stopped_tails"] = report.tails[tail_columns]
    result.series["stopped_series"] = report.series
    ladder = report.contrast["unstopped"].table["N"]
    result.series["stopped_contrast"] = pd.DataFrame(
        {"N": ladder, **{k: v.partial_sums for k, v in report.contrast.items()}}
    )
    result.summary += [
        f"E[M^sigma_T] (level cap {report.level_cap:g}) = "
        f"{report.expectation_capped.mean:.4f} +/- {report.expectation_capped.stderr:.2g}",
        f"H1 series divergent: {report.series_divergent}",
    ]
    return result


def run_affine_heston(config: ExperimentConfig, options: RunOptions) -> RunResult:
    p = config.affine_params()
    grid = config.grid
    report = affine_sup_bound(
        p, config.horizon, config.n_paths, config.seed, config.n_steps, options
    )
    result = RunResult()
    result.add(*bound_rows(report))
    result.add(martingale_row(report.extra["martingale"]))

    mean_curve = affine_mean_curve(p, grid)
    marks = _checkpoints(grid)
    cols = [index for _, index in marks]
    values = []
    y_sum = np.zeros(grid.n_steps + 1)
    for chunk in simulate_affine_sv(p, grid, config.n_paths, config.seed, options):
        values.append(chunk.Y.values[:, cols])
        y_sum += chunk.Y.values.sum(axis=0)
    values_all = np.concatenate(values)
    for j, (t, index) in enumerate(marks):
        result.add(
            oracle_row(
                "affine-mean",
                MCEstimate.from_samples(values_all[:, j]),
                float(mean_curve.values[index]),
                "resolvent-solve",
                f"t={t:g}",
            )
        )
    result.series["affine_mean_curve"] = pd.DataFrame(
        {
            "t": grid.nodes,
            "mc_mean": y_sum / config.n_paths,
            "resolvent": mean_curve.values,
        }
    )
    result.summary += [_bound_summary(part) for part in report.reports()]
    return result


RUNNERS: Dict[str, Callable[[ExperimentConfig, RunOptions], RunResult]] = {
    "kernel-check": run_kernel_check,
    "simulate": run_simulate,
    "sup-bound": run_sup_bound,
    "measure-check": run_measure_check,
    "doob-check": run_doob_check,
    "reverse-l1": run_reverse_l1,
    "hl-maximal": run_hl_maximal,
    "dubins-gilat": run_dubins_gilat,
    "stopped-lm": run_stopped_lm,
    "affine-heston": run_affine_heston,
}


# ==============================================================================
# Artifacts
# ==============================================================================


def git_describe() -> str:
    """git-describe style version of the checkout, or the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Config.ROOT_DIR.parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        )
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"
    return out.stdout.strip() or f"v{__version__}"


def write_series(path: Path, frame: pd.DataFrame) -> None:
    """Whitespace-separated columns under a '#' header line."""
    numeric = frame.select_dtypes(include=[np.number, bool]).astype(float)
    with open(path, "w") as f:
        f.write("# " + " ".join(numeric.columns) + "\n")
        numeric.to_csv(f, sep=" ", index=False, header=False, float_format="%.12g")


def read_series(path: Path) -> pd.DataFrame:
    with open(path) as f:
        names = f.readline().lstrip("#").split()
    return pd.read_csv(path, sep=r"\s+", skiprows=1, header=None, names=names)


def write_artifacts(
    config: ExperimentConfig, result: RunResult, manifest: RunManifest
) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.table(config.command).to_csv(out / "results.csv", index=False)
    if result.series:
        series_dir = out / "series"
        series_dir.mkdir(exist_ok=True)
        for name, frame in result.series.items():
            write_series(series_dir / f"{name}.dat", frame)
    (out / "manifest.txt").write_text(manifest.to_text())
    stale = out / "error.txt"
    if stale.exists():
        stale.unlink()
    return out


def write_error(
    output_dir: Union[str, Path], exc: BaseException, exit_code: int
) -> Path:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    message = " ".join(str(exc).split())
    path = out / "error.txt"
    path.write_text(
        f"type = {type(exc).__name__}\nmessage = {message}\nexit_code = {exit_code}\n"
    )
    return path


def run_experiment(config: ExperimentConfig, progress: bool = False) -> RunManifest:
    """Run one experiment and write manifest.txt, results.csv and series/*.dat.

    Returns:
        RunManifest whose ``exit_code`` is 2 when a verdict is violated, else 0

    Raises:
        VolsupError: Propagated from validation or the delegated ops
    """
    config.validate()
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    clock = time.perf_counter()
    options = RunOptions(n_workers=config.n_workers, progress=progress)
    logger.info("running %s with seed %d", config.command, config.seed)
    with tolerance_overrides(config.tolerances):
        result = RUNNERS[config.command](config, options)
    manifest = RunManifest(
        config=config.to_mapping(),
        version=git_describe(),
        seed=config.seed,
        started=started,
        wall_clock=time.perf_counter() - clock,
        verdicts=result.verdicts,
        exit_code=result.exit_code,
        summary=result.summary,
    )
    write_artifacts(config, result, manifest)
    return manifest


__all__ = [
    "COMMANDS",
    "ExperimentConfig",
    "RunManifest",
    "RunResult",
    "build_config",
    "load_config",
    "run_experiment",
]
