from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ihfbsde.errors import ConfigurationError, ShapeError, ValidationError
from ihfbsde.model import MarkSpace, TimeGrid
from ihfbsde.noise import (
    NoiseSpec,
    compensated_integral,
    dump,
    generate,
    jump_increment,
    load,
    prefix_factory,
)


def test_no_drivers_gives_empty_arrays():
    nb = generate(NoiseSpec(0, MarkSpace.empty(), 4, TimeGrid(1.0, 10), 1))
    assert nb.dW.shape == (4, 10, 0) and nb.jumps.shape == (4, 10, 0, 0)
    assert nb.is_trivial()


def test_spec_validation():
    g = TimeGrid(1.0, 10)
    with pytest.raises(ValidationError):
        NoiseSpec(1, MarkSpace.empty(), 0, g, 1)
    with pytest.raises(ValidationError):
        NoiseSpec(-1, MarkSpace.empty(), 1, g, 1)
    with pytest.raises(ConfigurationError):
        generate(NoiseSpec(1, MarkSpace.empty(), 2 ** 16, TimeGrid(1.0, 2 ** 16), 1))


def test_generation_is_reproducible():
    spec = NoiseSpec(2, MarkSpace(np.array([[1.0, 0.5]])), 16, TimeGrid(1.0, 50), 42)
    a, b = generate(spec), generate(spec)
    assert np.array_equal(a.dW, b.dW) and np.array_equal(a.jumps, b.jumps)


def test_enlarging_paths_keeps_prefix():
    g = TimeGrid(1.0, 20)
    ms = MarkSpace.single(2.0)
    small = generate(NoiseSpec(1, ms, 8, g, 5))
    big = generate(NoiseSpec(1, ms, 16, g, 5))
    assert np.array_equal(small.dW, big.dW[:8]) and np.array_equal(small.jumps, big.jumps[:8])


def test_jump_rate():
    # 10^6 draws: the empirical rate has standard deviation sqrt(2 / (10^6 dt)) = 0.0045
    g = TimeGrid(10.0, 1000)
    nb = generate(NoiseSpec(0, MarkSpace.single(2.0), 1000, g, 0))
    rate = nb.jumps.sum() / (nb.M * g.t_max)
    assert rate == pytest.approx(2.0, abs=0.015)


def test_moments_and_martingale_means():
    g = TimeGrid(1.0, 100)
    nb = generate(NoiseSpec(2, MarkSpace.single(1.5), 2000, g, 3))
    n = nb.dW[..., 0].size
    assert abs(nb.dW.mean()) < 5 * np.sqrt(g.dt / nb.dW.size)
    assert nb.dW.var() == pytest.approx(g.dt, rel=0.02)
    comp = nb.compensated()
    assert abs(comp.mean()) < 5 * np.sqrt(1.5 * g.dt / comp.size)
    # independence of Brownian components and jump counts
    for a, b in ((nb.dW[..., 0], nb.dW[..., 1]), (nb.dW[..., 0], nb.jumps[..., 0, 0])):
        assert abs(np.corrcoef(a.ravel(), b.ravel())[0, 1]) < 5 / np.sqrt(n)


def test_adapted_integrand_has_zero_mean():
    g = TimeGrid(1.0, 100)
    nb = generate(NoiseSpec(1, MarkSpace.single(1.0), 4000, g, 8))
    W = nb.cumulative_brownian()[:, :-1, 0]
    vals = np.sum(np.tanh(W) * nb.dW[..., 0] + np.cos(W) * nb.compensated()[..., 0, 0], axis=1)
    assert abs(vals.mean()) < 5 * vals.std() / np.sqrt(vals.size)


def test_compensated_integral_examples():
    g = TimeGrid(1.0, 100)
    nb = generate(NoiseSpec(0, MarkSpace.single(2.0), 400, g, 1))
    r = np.ones((1, 1, 1))
    assert np.all(compensated_integral(np.zeros((1, 1, 1)), nb, 0, 0) == 0)
    p, k = np.argwhere(nb.jumps[..., 0, 0] == 0)[0]
    assert compensated_integral(r, nb, p, k)[0] == pytest.approx(-0.02)
    p, k = np.argwhere(nb.jumps[..., 0, 0] == 1)[0]
    assert compensated_integral(r, nb, p, k)[0] == pytest.approx(0.98)
    with pytest.raises(ShapeError):
        compensated_integral(np.ones((1, 2, 1)), nb, 0, 0)


def test_batch_jump_increment_matches_scalar():
    g = TimeGrid(1.0, 10)
    nb = generate(NoiseSpec(0, MarkSpace(np.array([[1.0, 3.0]])), 5, g, 2))
    r = np.random.default_rng(0).normal(size=(5, 2, 1, 2))
    batch = jump_increment(r, nb, 3)
    for p in range(5):
        assert np.allclose(batch[p], compensated_integral(r[p], nb, p, 3))


def test_prefix_factory_and_dump(tmp_path):
    spec = NoiseSpec(1, MarkSpace.single(1.0), 4, TimeGrid(2.0, 40), 9)
    full = generate(spec)
    short = prefix_factory(spec)(TimeGrid(1.0, 20))
    assert np.array_equal(short.dW, full.dW[:, :20])
    with pytest.raises(ConfigurationError):
        prefix_factory(spec)(TimeGrid(1.0, 30))
    dump(full, tmp_path / "nb.bin")
    back = load(tmp_path / "nb.bin")
    assert back.spec == full.spec and np.array_equal(back.dW, full.dW) and np.array_equal(back.jumps, full.jumps)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 63), M=st.integers(1, 6))
def test_paths_depend_only_on_seed_and_index(seed, M):
    g = TimeGrid(1.0, 5)
    ms = MarkSpace.single(1.0)
    a = generate(NoiseSpec(1, ms, M, g, seed))
    b = generate(NoiseSpec(1, ms, M + 3, g, seed))
    assert np.array_equal(a.dW, b.dW[:M])
