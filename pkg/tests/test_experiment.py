"""Test experiment configs, result rows and run artifacts."""

import numpy as np
import pandas as pd
import pytest

from volsup.config import Config
from volsup.errors import ConfigError, DomainError
from volsup.experiment import (
    RESULT_COLUMNS,
    ExperimentConfig,
    RunManifest,
    RunResult,
    build_config,
    config_from_manifest,
    oracle_row,
    oracle_verdict,
    read_series,
    result_row,
    run_experiment,
    tolerance_overrides,
    write_error,
    write_series,
)
from volsup.sup_estimators import MCEstimate, Verdict


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("VOLSUP_SEED", raising=False)


def _write(path, text):
    path.write_text(text)
    return path


# ==============================================================================
# Config parsing
# ==============================================================================


class TestExperimentConfig:
    """Test coercion of raw key/value pairs."""

    def test_defaults(self):
        """Test the defaults of a bare command."""
        config = ExperimentConfig.from_mapping({"command": "sup-bound"})
        assert config.alpha == 0.7
        assert config.n_steps == 512
        assert config.seed == Config.DEFAULT_PARAMS["seed"]

    def test_coercion(self):
        """Test that strings become typed values."""
        config = ExperimentConfig.from_mapping(
            {
                "command": "kernel-check",
                "n_paths": "1e4",
                "refine": "yes",
                "eps_list": "0.5, 0.25,0.125",
                "output-dir": "out/run",
            }
        )
        assert config.n_paths == 10000
        assert config.refine is True
        assert config.eps_list == (0.5, 0.25, 0.125)
        assert str(config.output_dir) == "out/run"

    def test_unknown_key(self):
        """Test that unknown keys are rejected."""
        with pytest.raises(ConfigError, match="unknown key 'hurst'"):
            ExperimentConfig.from_mapping({"command": "sup-bound", "hurst": "0.1"})

    def test_unknown_tolerance(self):
        """Test that unknown tolerance keys are rejected."""
        with pytest.raises(ConfigError, match="unknown tolerance"):
            ExperimentConfig.from_mapping({"command": "sup-bound", "tol_magic": "1"})

    def test_tolerance_override(self):
        """Test that tol_* keys land in the tolerance overrides."""
        config = ExperimentConfig.from_mapping(
            {
                "command": "sup-bound",
                "tol_sigma_multiplier": "4",
                "tol_bootstrap_resamples": "99",
            }
        )
        assert config.tolerances == {"sigma_multiplier": 4.0, "bootstrap_resamples": 99}

    def test_invalid_integer(self):
        """Test that a fractional path count is a config error."""
        with pytest.raises(ConfigError, match="invalid value for n_paths"):
            ExperimentConfig.from_mapping({"command": "sup-bound", "n_paths": "1.5"})

    def test_missing_command(self):
        """Test that the command key is required."""
        with pytest.raises(ConfigError, match="command"):
            ExperimentConfig.from_mapping({"alpha": "0.7"})

    def test_unknown_command(self):
        """Test that the command must be known."""
        with pytest.raises(ConfigError, match="unknown command"):
            ExperimentConfig.from_mapping({"command": "price"})

    def test_affine_defaults(self):
        """Test that affine commands default to the affine parameters."""
        config = ExperimentConfig.from_mapping({"command": "affine-heston"})
        assert config.alpha == Config.AFFINE_PARAMS["alpha"]
        explicit = ExperimentConfig.from_mapping(
            {"command": "affine-heston", "alpha": "0.8"}
        )
        assert explicit.alpha == 0.8

    def test_mapping_round_trip(self):
        """Test that to_mapping feeds back into from_mapping."""
        config = ExperimentConfig.from_mapping(
            {
                "command": "hl-maximal",
                "t": "0.3",
                "tol_quad_rtol": "1e-9",
                "n_workers": "2",
            }
        )
        assert ExperimentConfig.from_mapping(config.to_mapping()) == config

    def test_validate_positive_rho(self):
        """Test that rough Bergomi commands refuse positive correlation."""
        config = ExperimentConfig.from_mapping({"command": "sup-bound", "rho": "0.3"})
        with pytest.raises(DomainError, match="rho must be ≤ 0"):
            config.validate()

    def test_validate_path_count(self):
        """Test that at least two paths are needed."""
        config = ExperimentConfig.from_mapping(
            {"command": "doob-check", "n_paths": "1"}
        )
        with pytest.raises(ConfigError, match="n_paths"):
            config.validate()

    def test_validate_eps_list(self):
        """Test that kernel checks need a decreasing eps list."""
        config = ExperimentConfig.from_mapping(
            {"command": "kernel-check", "eps_list": "0.1,0.2"}
        )
        with pytest.raises(ConfigError, match="eps_list"):
            config.validate()

    def test_validate_reverse_l1_start(self):
        """Test that the reverse L1 check starts at one."""
        config = ExperimentConfig.from_mapping({"command": "reverse-l1", "s0": "2"})
        with pytest.raises(DomainError, match="s0 = 1"):
            config.validate()


class TestBuildConfig:
    """Test the precedence of defaults, files, environment and flags."""

    def test_file_values(self, tmp_path):
        """Test that file values override defaults."""
        path = _write(tmp_path / "run.cfg", "command = hl-maximal\nt = 0.3\nseed = 5\n")
        config = build_config(path=path)
        assert (config.command, config.t, config.seed) == ("hl-maximal", 0.3, 5)

    def test_precedence(self, tmp_path, monkeypatch):
        """Test defaults < file < VOLSUP_SEED < flags."""
        path = _write(tmp_path / "run.cfg", "command = hl-maximal\nseed = 5\n")
        monkeypatch.setenv("VOLSUP_SEED", "9")
        assert build_config(path=path).seed == 9
        assert build_config(path=path, overrides={"seed": 11}).seed == 11
        assert build_config(path=path, overrides={"seed": None}).seed == 9

    def test_bad_env_seed(self, monkeypatch):
        """Test that a malformed VOLSUP_SEED is a config error."""
        monkeypatch.setenv("VOLSUP_SEED", "abc")
        with pytest.raises(ConfigError, match="VOLSUP_SEED"):
            build_config("hl-maximal")

    def test_missing_file(self, tmp_path):
        """Test that a missing file is a config error."""
        with pytest.raises(ConfigError, match="not found"):
            build_config(path=tmp_path / "missing.cfg")

    def test_command_mismatch(self, tmp_path):
        """Test that a file for another command is refused."""
        path = _write(tmp_path / "run.cfg", "command = doob-check\n")
        with pytest.raises(ConfigError, match="not 'hl-maximal'"):
            build_config("hl-maximal", path)

    def test_tolerance_overrides_restore(self):
        """Test that tolerance overrides last only for the block."""
        before = dict(Config.TOLERANCES)
        with tolerance_overrides({"sigma_multiplier": 5.0}):
            assert Config.TOLERANCES["sigma_multiplier"] == 5.0
        assert Config.TOLERANCES == before


# ==============================================================================
# Verdicts and rows
# ==============================================================================


class TestVerdicts:
    """Test two-sided oracle verdicts and run results."""

    @pytest.mark.parametrize(
        "reference, expected",
        [(1.25, Verdict.HOLDS), (1.45, Verdict.WITHIN_NOISE), (2.0, Verdict.VIOLATED)],
    )
    def test_oracle_bands(self, reference, expected):
        """Test the holds / within-noise / violated bands."""
        assert oracle_verdict(1.0, 0.1, reference) == expected

    def test_deterministic_tolerance(self):
        """Test that deterministic checks use the absolute tolerance."""
        assert oracle_verdict(1.0, 0.0, 1.0 + 1e-11, tolerance=1e-10) == Verdict.HOLDS
        assert oracle_verdict(1.0, 0.0, 1.0 + 1e-9, tolerance=1e-10) == Verdict.VIOLATED

    def test_noise_band_can_be_closed(self):
        """Test that a zero noise band turns a 4 stderr miss into a violation."""
        assert oracle_verdict(1.0, 0.1, 1.4) == Verdict.WITHIN_NOISE
        with tolerance_overrides({"noise_band": 0.0}):
            assert oracle_verdict(1.0, 0.1, 1.4) == Verdict.VIOLATED
            assert oracle_verdict(1.0, 0.1, 1.25) == Verdict.HOLDS

    def test_noise_band_exit_codes(self):
        """Test that only misses past the band change the exit code."""
        inside = RunResult()
        inside.add(oracle_row("m", MCEstimate(1.0, 0.1, 100), 1.4, "closed-form"))
        assert inside.verdicts == {"m": "violated-within-noise"}
        assert inside.exit_code == 0
        outside = RunResult()
        outside.add(oracle_row("m", MCEstimate(1.0, 0.1, 100), 1.6, "closed-form"))
        assert outside.exit_code == 2

    def test_run_result(self):
        """Test verdict keys and the exit code."""
        result = RunResult()
        result.add(
            result_row("a", 1.0, verdict=Verdict.HOLDS, parameter="t=0.5"),
            result_row("b", 2.0),
        )
        assert result.verdicts == {"a[t=0.5]": "holds"}
        assert result.exit_code == 0
        result.add(result_row("c", 3.0, verdict=Verdict.VIOLATED))
        assert result.exit_code == 2
        table = result.table("simulate")
        assert tuple(table.columns) == RESULT_COLUMNS
        assert (table["command"] == "simulate").all()

    def test_manifest_text(self, tmp_path):
        """Test the manifest layout and the config echo."""
        config = ExperimentConfig.from_mapping({"command": "hl-maximal", "t": "0.25"})
        manifest = RunManifest(
            config=config.to_mapping(),
            version="v0.1.0",
            seed=config.seed,
            started="2024-01-01T00:00:00+00:00",
            wall_clock=1.5,
            verdicts={"hl-maximal[t=0.25]": "holds"},
            exit_code=0,
        )
        text = manifest.to_text()
        assert "config.command = hl-maximal" in text
        assert "verdict.hl-maximal[t:0.25] = holds" in text
        path = _write(tmp_path / "manifest.txt", text)
        assert config_from_manifest(path) == config


# ==============================================================================
# Artifacts and runs
# ==============================================================================


class TestArtifacts:
    """Test series files and full runs."""

    def test_series_file(self, tmp_path):
        """Test the '#' header and the numeric body of a series file."""
        frame = pd.DataFrame(
            {"t": [0.0, 0.5], "value": [1.0, 2.5], "label": ["a", "b"]}
        )
        path = tmp_path / "curve.dat"
        write_series(path, frame)
        assert path.read_text().splitlines()[0] == "# t value"
        back = read_series(path)
        np.testing.assert_allclose(back["value"], [1.0, 2.5])

    def test_error_file(self, tmp_path):
        """Test the error report."""
        error = DomainError("rho must be ≤ 0,\n got 0.3")
        path = write_error(tmp_path / "out", error, 1)
        text = path.read_text()
        assert "type = DomainError" in text
        assert "message = rho must be ≤ 0, got 0.3" in text

    def test_hl_maximal_run(self, tmp_path):
        """Test a deterministic run end to end."""
        config = build_config(
            "hl-maximal", overrides={"output_dir": tmp_path, "dist": "uniform"}
        )
        manifest = run_experiment(config)
        assert manifest.exit_code == 0
        assert manifest.summary[0] == "0.75"
        results = pd.read_csv(tmp_path / "results.csv")
        assert set(results["verdict"].dropna()) == {"holds"}
        assert (tmp_path / "series" / "hl_maximal.dat").exists()
        assert "exit_code = 0" in (tmp_path / "manifest.txt").read_text()

    def test_kernel_check_run(self, tmp_path):
        """Test that the kernel check recovers alpha."""
        config = build_config("kernel-check", overrides={"output_dir": tmp_path})
        manifest = run_experiment(config)
        assert manifest.exit_code == 0
        assert manifest.summary[0] == "gamma_hat = 0.700000"

    def test_stale_error_removed(self, tmp_path):
        """Test that a successful run clears an old error report."""
        write_error(tmp_path, ValueError("old"), 1)
        run_experiment(build_config("hl-maximal", overrides={"output_dir": tmp_path}))
        assert not (tmp_path / "error.txt").exists()

    def test_gbm_simulation_run(self, tmp_path):
        """Test a small Monte Carlo run and its artifacts."""
        overrides = {
            "output_dir": tmp_path,
            "model": "gbm",
            "n_paths": 500,
            "n_steps": 16,
            "n_workers": 2,
        }
        manifest = run_experiment(build_config("simulate", overrides=overrides))
        expected = {"gbm-mean[t=0.25]", "gbm-mean[t=0.5]", "gbm-mean[t=1]"}
        assert expected <= set(manifest.verdicts)
        results = pd.read_csv(tmp_path / "results.csv")
        assert results["n"].max() == 500
        series = read_series(tmp_path / "series" / "gbm_mean_path.dat")
        assert len(series) == 17
