import io

import numpy as np
import pytest

import sconce as sc
from sconce.errors import GridMismatchError


class TestTimeGrid:
    def test_basic_properties(self):
        grid = sc.TimeGrid(2.0, 4)
        assert grid.step == 0.5
        np.testing.assert_allclose(grid.times, [0.0, 0.5, 1.0, 1.5, 2.0])

    def test_index_of_exact_and_snap(self):
        grid = sc.TimeGrid(1.0, 1000)
        assert grid.index_of(0.25) == 250
        assert grid.index_of(0.2503, snap=True) == 250
        with pytest.raises(ValueError):
            grid.index_of(0.2503)

    def test_validation(self):
        with pytest.raises(ValueError):
            sc.TimeGrid(0.0, 10)
        with pytest.raises(ValueError):
            sc.TimeGrid(1.0, 0)


class TestSamplePath:
    def test_deterministic(self, grid1000):
        a = sc.sample_path(grid1000, 42, 3)
        b = sc.sample_path(grid1000, 42, 3)
        assert np.array_equal(a.increments, b.increments)

    def test_distinct_indices_differ(self, grid1000):
        a = sc.sample_path(grid1000, 42, 0)
        b = sc.sample_path(grid1000, 42, 1)
        assert not np.array_equal(a.increments, b.increments)

    def test_batch_matches_single(self, grid1000):
        batch = sc.sample_increments(grid1000, 9, [5, 17, 200])
        for row, idx in zip(batch, (5, 17, 200)):
            assert np.array_equal(row, sc.sample_path(grid1000, 9, idx).increments)

    def test_terminal_statistics(self, grid1000):
        # mean of B(1) over 10^4 paths within 4 / sqrt(10^4); variance in [0.94, 1.06]
        term = np.array(
            [sc.sample_path(grid1000, 42, i).terminal for i in range(10_000)]
        )
        assert abs(term.mean()) <= 4.0 / np.sqrt(10_000)
        assert 0.94 <= term.var() <= 1.06

    def test_values_start_at_zero(self, grid1000):
        p = sc.sample_path(grid1000, 0, 0)
        assert p.values[0] == 0.0
        assert len(p.values) == grid1000.n_steps + 1


class TestShiftPath:
    def test_zero_shift_identity(self, grid1000):
        p = sc.sample_path(grid1000, 1, 0)
        q = sc.shift_path(p, sc.ShiftDirection(0.5, 0.0))
        assert np.array_equal(p.increments, q.increments)

    def test_full_horizon_shift_adds_t(self, grid1000):
        p = sc.sample_path(grid1000, 1, 0)
        q = sc.shift_path(p, sc.ShiftDirection(1.0, 1.0))
        np.testing.assert_allclose(q.values, p.values + grid1000.times, atol=1e-12)

    def test_shift_then_unshift_cancels(self, grid1000):
        p = sc.sample_path(grid1000, 1, 0)
        d = sc.ShiftDirection(0.37, 2.5e-3)
        q = sc.shift_path(sc.shift_path(p, d), sc.ShiftDirection(0.37, -2.5e-3))
        np.testing.assert_allclose(q.values, p.values, atol=1e-15)

    def test_off_grid_alpha_snaps_with_metadata(self, grid1000):
        p = sc.sample_path(grid1000, 1, 0)
        q = sc.shift_path(p, sc.ShiftDirection(0.25049, 1.0))
        assert q.meta["shift_alpha0_snapped"] == pytest.approx(0.25)

    def test_quadratic_variation_changes_at_order_epsilon(self, grid1000):
        p = sc.sample_path(grid1000, 4, 2)
        qv = np.sum(p.increments**2)
        for eps in (1e-2, 1e-3, 1e-4):
            q = sc.shift_path(p, sc.ShiftDirection(0.8, eps))
            assert abs(np.sum(q.increments**2) - qv) <= 5.0 * eps


class TestMixPaths:
    def test_theta_zero_returns_first(self, grid1000):
        a = sc.sample_path(grid1000, 2, 0)
        b = sc.sample_path(grid1000, 2, 1)
        mixed = sc.mix_paths(a, b, 0.0)
        assert np.array_equal(mixed.increments, a.increments)

    def test_large_theta_returns_second(self, grid1000):
        a = sc.sample_path(grid1000, 2, 0)
        b = sc.sample_path(grid1000, 2, 1)
        mixed = sc.mix_paths(a, b, 20.0)
        np.testing.assert_allclose(mixed.increments, b.increments, atol=1e-8)

    def test_variance_preserved(self):
        # over many pairs the mixed increment variance stays h
        grid = sc.TimeGrid(1.0, 10)
        h = grid.step
        for theta in (0.3, 1.0, 2.5):
            inc = sc.sample_increments(grid, 5, np.arange(5000))
            inc2 = sc.sample_increments(grid, 6, np.arange(5000))
            w = np.exp(-theta)
            mixed = w * inc + np.sqrt(1 - w * w) * inc2
            assert mixed.var() == pytest.approx(h, rel=0.05)

    def test_grid_mismatch_rejected(self):
        a = sc.sample_path(sc.TimeGrid(1.0, 10), 0, 0)
        b = sc.sample_path(sc.TimeGrid(1.0, 20), 0, 0)
        with pytest.raises(GridMismatchError):
            sc.mix_paths(a, b, 1.0)

    def test_negative_theta_rejected(self, grid1000):
        a = sc.sample_path(grid1000, 2, 0)
        with pytest.raises(ValueError):
            sc.mix_paths(a, a, -0.1)


def test_zero_path(grid1000):
    p = sc.zero_path(grid1000)
    assert np.all(p.values == 0.0)


def test_path_csv_dump():
    from sconce.paths import dump_path_csv

    grid = sc.TimeGrid(1.0, 4)
    p = sc.sample_path(grid, 0, 0)
    buf = io.StringIO()
    dump_path_csv(p, buf)
    lines = buf.getvalue().strip().split("\n")
    assert lines[0] == "k,t,B"
    assert len(lines) == grid.n_steps + 2
    # 17 significant digits round-trip
    k, t, b = lines[2].split(",")
    assert float(b) == p.values[1]


def test_increments_immutable(grid1000):
    p = sc.sample_path(grid1000, 0, 0)
    with pytest.raises(ValueError):
        p.increments[0] = 1.0
