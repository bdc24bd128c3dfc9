import os
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


def _env_int(name: str):
    value = os.getenv(name)
    if value is None or value.strip() == "":
        return None
    return int(value)


class Config:
    # Base paths
    ROOT_DIR = Path(__file__).parent
    DEFAULT_OUTPUT_DIR = Path("results")

    # Environment overrides; VOLSUP_SEED is read per run through env_seed()
    WORKERS = _env_int("VOLSUP_WORKERS") or os.cpu_count() or 1

    # Paths per RNG stream; fixes the chunk layout independently of workers
    CHUNK_SIZE = 1024

    # Default model and grid parameters
    DEFAULT_PARAMS = {
        "alpha": 0.7,
        "eta": 1.5,
        "rho": -0.7,
        "v0": 0.04,
        "s0": 1.0,
        "horizon": 1.0,
        "n_steps": 512,
        "n_paths": 10_000,
        "seed": 20240601,
        "sigma": 0.2,
    }

    # Affine Volterra (rough Heston) defaults
    AFFINE_PARAMS = {
        "alpha": 0.6,
        "eta": 1.0,
        "a1": 0.002,
        "b0": 0.02,
        "b1": -0.5,
        "y0": 0.04,
        "rho": -0.7,
    }

    TOLERANCES = {
        "quad_rtol": 1e-10,
        "fixed_point_tol": 1e-12,
        "fixed_point_max_iter": 50,
        "cholesky_jitter": 1e-12,
        "sigma_multiplier": 3.0,
        "noise_band": 2.0,
        "bootstrap_resamples": 999,
        "ess_floor": 100.0,
        "cauchy_ratio": 0.75,
        "level_cap": 1000.0,
        "sup_cap": 1e12,
        "ks_level": 0.01,
    }

    @staticmethod
    def env_seed():
        """VOLSUP_SEED as currently set, or None."""
        return _env_int("VOLSUP_SEED")
