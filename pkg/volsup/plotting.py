from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .errors import InputError  # noqa: E402
from .experiment import read_series  # noqa: E402

# Series whose x axis spans decades
LOG_X = {"kernel_windows", "doob_tail_sums", "stopped_series", "stopped_contrast"}


def setup_plotting():
    """Set up plotting style."""
    plt.style.use("default")
    plt.rcParams["figure.dpi"] = 150
    plt.rcParams["savefig.dpi"] = 150
    plt.rcParams["font.size"] = 11


def plot_series(frame: pd.DataFrame, name: str, output_path: Path) -> Path:
    """Plot every column of a series file against its first column."""
    if frame.shape[1] < 2:
        raise InputError(f"series {name} needs an x column and at least one y column")
    x = frame.columns[0]
    plt.figure(figsize=(8, 5))
    for column in frame.columns[1:]:
        plt.plot(frame[x], frame[column], label=column)
    if name in LOG_X:
        plt.xscale("log")
    plt.title(name.replace("_", " "))
    plt.xlabel(x)
    plt.legend()
    plt.grid(True, alpha=0.3)
    plt.tight_layout()
    plt.savefig(output_path)
    plt.close()
    return output_path


def render_series(output_dir: Path) -> List[Path]:
    """Render series/*.dat of a run directory to PNG files beside them.

    Raises:
        InputError: If the directory holds no series files
    """
    series_dir = Path(output_dir) / "series"
    files = sorted(series_dir.glob("*.dat"))
    if not files:
        raise InputError(f"no series files under {series_dir}")
    setup_plotting()
    return [
        plot_series(read_series(path), path.stem, path.with_suffix(".png"))
        for path in files
    ]
