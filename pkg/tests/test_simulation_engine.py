"""Test chunked, seeded path simulation."""

import numpy as np
import pytest

from volsup.errors import UsageError
from volsup.path_types import PathBatch, SamplePath, TimeGrid, iter_batches
from volsup.simulation_engine import (
    PathSimulation,
    RunOptions,
    SimulationParams,
    StreamTag,
    chunk_rng,
    simulation,
)


def _normals(rng, size, index):
    return {"x": rng.standard_normal(size), "chunk": np.full(size, index)}


class TestSimulationParams:
    """Test parameter validation."""

    def test_rejects_zero_paths(self):
        """Test that at least one path is required."""
        with pytest.raises(UsageError, match="n_paths"):
            SimulationParams(n_paths=0, seed=1)

    def test_rejects_zero_chunk(self):
        """Test that chunks must hold at least one path."""
        with pytest.raises(UsageError, match="chunk_size"):
            SimulationParams(n_paths=10, seed=1, chunk_size=0)

    def test_workers_floor(self):
        """Test that a missing worker count falls back to one."""
        assert SimulationParams(n_paths=10, seed=1, n_workers=0).n_workers == 1


class TestPathSimulation:
    """Test the chunk layout and reproducibility."""

    def test_layout(self):
        """Test that the last chunk holds the remainder."""
        params = SimulationParams(n_paths=25, seed=1, chunk_size=10)
        sim = PathSimulation(params, StreamTag.GBM)
        assert sim.layout() == [(0, 10), (1, 10), (2, 5)]

    def test_chunk_rng_is_pure(self):
        """Test that a chunk generator depends only on (seed, stream, chunk)."""
        a = chunk_rng(5, StreamTag.DRIVER, 3).standard_normal(4)
        b = chunk_rng(5, StreamTag.DRIVER, 3).standard_normal(4)
        c = chunk_rng(5, StreamTag.GBM, 3).standard_normal(4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    @pytest.mark.parametrize("workers", [2, 4, 7])
    def test_worker_count_invariance(self, workers):
        """Test that results do not depend on the number of workers."""
        serial = simulation(
            5000, 42, StreamTag.GBM, RunOptions(n_workers=1, chunk_size=128)
        )
        threaded = simulation(
            5000, 42, StreamTag.GBM, RunOptions(n_workers=workers, chunk_size=128)
        )
        a = serial.collect(_normals)
        b = threaded.collect(_normals)
        np.testing.assert_array_equal(a["x"], b["x"])
        np.testing.assert_array_equal(a["chunk"], b["chunk"])

    def test_chunks_in_order(self):
        """Test that imap yields chunks in index order."""
        options = RunOptions(n_workers=3, chunk_size=64)
        sim = simulation(1000, 1, StreamTag.LEVEL, options)
        indices = [index for index in sim.imap(lambda rng, size, index: index)]
        assert indices == list(range(16))

    def test_collect_sizes(self):
        """Test that collect returns one entry per path."""
        sim = simulation(300, 1, StreamTag.BESSEL, RunOptions(chunk_size=128))
        out = sim.collect(_normals)
        assert out["x"].shape == (300,)
        assert out["chunk"].tolist() == [0] * 128 + [1] * 128 + [2] * 44

    def test_streams_differ(self):
        """Test that stream tags give independent samples."""
        a = simulation(50, 1, StreamTag.DRIVER).collect(_normals)["x"]
        b = simulation(50, 1, StreamTag.LEVEL).collect(_normals)["x"]
        assert not np.array_equal(a, b)


class TestPathTypes:
    """Test grids and path containers."""

    def test_grid_nodes(self):
        """Test uniform nodes and refinement."""
        grid = TimeGrid(2.0, 4)
        np.testing.assert_allclose(grid.nodes, [0.0, 0.5, 1.0, 1.5, 2.0])
        assert grid.refine().n_steps == 8

    def test_grid_validation(self):
        """Test that a positive horizon is required."""
        with pytest.raises(UsageError, match="horizon"):
            TimeGrid(0.0, 4)
        with pytest.raises(UsageError, match="n_steps"):
            TimeGrid(1.0, -1)

    def test_sample_path_shape(self):
        """Test that a path must have one value per node."""
        with pytest.raises(UsageError, match="grid needs 5"):
            SamplePath(TimeGrid(1.0, 4), np.zeros(4))

    def test_iter_batches(self):
        """Test that mixed path sources normalize to batches."""
        grid = TimeGrid(1.0, 2)
        sources = [PathBatch(grid, np.zeros((2, 3))), SamplePath(grid, np.ones(3))]
        batches = list(iter_batches(sources))
        assert [len(b) for b in batches] == [2, 1]
        assert len(list(iter_batches(np.ones((4, 3))))) == 1
