"""Command-line interface: one subcommand per check, plus ``run`` for config files.

Exit codes: 0 when every verdict holds or misses only within the noise band, 2
when a verdict is violated, 1 for usage and configuration errors, 3 for
numerical failures. Set ``tol_noise_band = 0`` to close the band.
"""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import click

from . import __version__
from .errors import VolsupError
from .experiment import MODELS, build_config, run_experiment, write_error
from .pathology import BUILTIN_MODELS
from .plotting import render_series

logger = logging.getLogger(__name__)


def _stack(*decorators):
    def apply(fn):
        for decorator in reversed(decorators):
            fn = decorator(fn)
        return fn

    return apply


# Flags mirror experiment file keys; unset flags leave the file or default value
COMMON = _stack(
    click.option("--n-paths", type=int, default=None, help="Monte Carlo paths"),
    click.option("--seed", type=int, default=None, help="Base seed"),
    click.option("--n-workers", type=int, default=None, help="Worker threads"),
    click.option(
        "--output-dir",
        type=click.Path(file_okay=False, path_type=Path),
        default=None,
        help="Directory for manifest.txt, results.csv and series/",
    ),
)
GRID = _stack(
    click.option("--horizon", type=float, default=None, help="Time horizon T"),
    click.option("--n-steps", type=int, default=None, help="Grid steps on [0, T]"),
)
KERNEL = _stack(
    click.option("--alpha", type=float, default=None, help="Kernel exponent"),
    click.option("--eta", type=float, default=None, help="Kernel scale"),
)
ROUGH = _stack(
    KERNEL,
    click.option("--rho", type=float, default=None, help="Price/vol correlation"),
    click.option("--v0", type=float, default=None, help="Flat forward variance"),
    click.option("--s0", type=float, default=None, help="Initial price"),
)
AFFINE = _stack(
    click.option("--a1", type=float, default=None, help="Diffusion coefficient of Y"),
    click.option("--b0", type=float, default=None, help="Drift intercept"),
    click.option("--b1", type=float, default=None, help="Drift slope"),
    click.option("--y0", type=float, default=None, help="Initial variance"),
)
DIST = _stack(
    click.option(
        "--dist",
        type=click.Choice(sorted(BUILTIN_MODELS)),
        default=None,
        help="Quantile model F",
    ),
    click.option("--tail-exponent", type=float, default=None, help="Pareto exponent"),
)
SIGMA = click.option("--sigma", type=float, default=None, help="GBM volatility")
OUTPUT = click.option(
    "--output-dir", type=click.Path(file_okay=False, path_type=Path), default=None
)


def _execute(
    command: Optional[str], overrides: Dict[str, Any], path: Optional[Path] = None
):
    ctx = click.get_current_context()
    progress = not (ctx.obj or {}).get("quiet", False)
    output_dir = overrides.get("output_dir")
    try:
        config = build_config(command, path, overrides)
        output_dir = config.output_dir
        manifest = run_experiment(config, progress=progress)
    except VolsupError as exc:
        click.echo(f"Error: {exc}", err=True)
        if output_dir is not None:
            write_error(output_dir, exc, exc.exit_code)
        ctx.exit(exc.exit_code)

    for line in manifest.summary:
        click.echo(line)
    violated = [k for k, v in manifest.verdicts.items() if v == "violated"]
    if violated:
        click.echo(f"violated: {', '.join(violated)}", err=True)
    click.echo(f"Results saved to {Path(config.output_dir) / 'results.csv'}", err=True)
    if manifest.exit_code:
        ctx.exit(manifest.exit_code)


@click.group()
@click.version_option(__version__, prog_name="volsup")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.option("--quiet", "-q", is_flag=True, help="No progress bars")
@click.pass_context
def cli(ctx, verbose, quiet):
    """Suprema of stochastic volatility prices and martingale pathologies."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    ctx.obj = {"quiet": quiet}


@cli.command("run")
@click.argument("config_file", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--seed", type=int, default=None)
@click.option("--n-workers", type=int, default=None)
@OUTPUT
def run(config_file, **overrides):
    """Run the experiment described by CONFIG_FILE."""
    _execute(None, overrides, path=config_file)


@cli.command("kernel-check")
@KERNEL
@click.option("--horizon", type=float, default=None)
@click.option("--eps-list", default=None, help="Comma-separated window lengths")
@OUTPUT
def kernel_check(**overrides):
    """Window integrals of the kernel and the fitted continuity exponent."""
    _execute("kernel-check", overrides)


@cli.command("simulate")
@click.option("--model", type=click.Choice(MODELS), default=None)
@ROUGH
@AFFINE
@SIGMA
@click.option("--start-radius", type=float, default=None)
@GRID
@COMMON
def simulate(**overrides):
    """Simulate a model and compare checkpoints with exact moments."""
    _execute("simulate", overrides)


@cli.command("sup-bound")
@ROUGH
@click.option("--refine/--no-refine", default=None, help="Repeat on a doubled grid")
@GRID
@COMMON
def sup_bound(**overrides):
    """E[sup S] against the share-measure bound for rough Bergomi."""
    _execute("sup-bound", overrides)


@cli.command("measure-check")
@ROUGH
@click.option("--n-resamples", type=int, default=None, help="Bootstrap resamples")
@GRID
@COMMON
def measure_check(**overrides):
    """Weighted KS test of the share-measure law of Y_T."""
    _execute("measure-check", overrides)


@cli.command("doob-check")
@SIGMA
@click.option("--s0", type=float, default=None)
@GRID
@COMMON
def doob_check(**overrides):
    """Doob's L1 inequality on geometric Brownian motion."""
    _execute("doob-check", overrides)


@cli.command("reverse-l1")
@SIGMA
@GRID
@COMMON
def reverse_l1(**overrides):
    """Reverse L1 inequality for geometric Brownian motion closed at T."""
    _execute("reverse-l1", overrides)


@cli.command("hl-maximal")
@DIST
@click.option("--t", type=float, default=None, help="Point in (0, 1)")
@OUTPUT
def hl_maximal(**overrides):
    """Hardy-Littlewood maximal function H_F(t) and Stein's criterion."""
    _execute("hl-maximal", overrides)


@cli.command("dubins-gilat")
@DIST
@click.option("--s", type=float, default=None, help="Sample point in (0, 1)")
@click.option("--n-steps", type=int, default=None)
@OUTPUT
def dubins_gilat(**overrides):
    """Dubins-Gilat martingale identity and a sample path."""
    _execute("dubins-gilat", overrides)


@cli.command("stopped-lm")
@click.option("--start-radius", type=float, default=None)
@GRID
@COMMON
def stopped_lm(**overrides):
    """Inverse Bessel local martingale stopped at a randomized level."""
    _execute("stopped-lm", overrides)


@cli.command("affine-heston")
@KERNEL
@click.option("--rho", type=float, default=None)
@click.option("--s0", type=float, default=None)
@AFFINE
@GRID
@COMMON
def affine_heston(**overrides):
    """Affine Volterra model: mean curve, martingale check and sup bound."""
    _execute("affine-heston", overrides)


@cli.command("plot")
@click.argument(
    "output_dir", type=click.Path(exists=True, file_okay=False, path_type=Path)
)
def plot(output_dir):
    """Render the series files of a run directory to PNG."""
    try:
        written = render_series(output_dir)
    except VolsupError as exc:
        click.echo(f"Error: {exc}", err=True)
        click.get_current_context().exit(exc.exit_code)
    for path in written:
        click.echo(str(path))


def main(argv: Optional[List[str]] = None) -> None:
    """Console entry point with the volsup exit-code contract."""
    try:
        code = cli.main(args=argv, prog_name="volsup", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        code = 1
    except click.ClickException as exc:
        exc.show()
        code = 1
    except VolsupError as exc:
        click.echo(f"Error: {exc}", err=True)
        code = exc.exit_code
    sys.exit(code if isinstance(code, int) else 0)


if __name__ == "__main__":
    main()
