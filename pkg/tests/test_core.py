import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfdelay.core import (BoundaryData, DelaySpec, ParticleEnsemble, RandomSource, build_grid,
                          sample_brownian)
from mfdelay.errors import CapacityError, ConfigurationError


def test_grid_without_delay_window():
    g = build_grid(1.0, 0.0, 0.0, 0.01)
    assert g.n_nodes == 101
    assert g.idx0 == 0 and g.idx_T == 100
    assert g.times[0] == 0.0 and g.times[-1] == pytest.approx(1.0)


def test_grid_with_delay_and_tail():
    g = build_grid(1.0, 0.25, 0.25, 0.25)
    np.testing.assert_allclose(g.times, [-0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.25])
    assert g.delay_steps == 1
    assert g.idx0 == 1 and g.idx_T == 5 and g.idx_end == 6


def test_non_multiple_delay_rejected():
    with pytest.raises(ConfigurationError, match="delta"):
        build_grid(1.0, 0.0, 0.3, 0.25)


@pytest.mark.parametrize("kw", [dict(T=0.0, K=0.0, delta=0.0, dt=0.1),
                                dict(T=1.0, K=0.0, delta=0.0, dt=0.0),
                                dict(T=1.0, K=-0.1, delta=0.0, dt=0.1)])
def test_bad_grid_parameters(kw):
    with pytest.raises(ConfigurationError):
        build_grid(**kw)


def test_capacity_error():
    with pytest.raises(CapacityError):
        build_grid(1.0, 0.0, 0.0, 1e-8)


@given(D=st.integers(0, 5), nT=st.integers(1, 30), nK=st.integers(0, 8))
@settings(max_examples=60, deadline=None)
def test_anticipation_maps_stay_on_grid(D, nT, nK):
    dt = 0.125
    g = build_grid(nT * dt, nK * dt, D * dt, dt)
    for m in (g.delta_map, g.zeta_map):
        head = m[:g.idx_T + 1]
        assert np.all(head <= g.idx_end)
        assert np.all(head >= np.arange(g.idx_T + 1))


def test_time_dependent_offsets_and_clamp():
    g = build_grid(1.0, 0.5, 0.0, 0.25, zeta_fn=lambda t: 0.5)
    k = g.index(0.75)
    assert g.zeta_map[k] == g.index(1.25)
    assert g.zeta_map[g.idx_end] == g.idx_end


def test_substitution_constant_constant_shift_is_one():
    assert build_grid(1.0, 0.25, 0.25, 0.05).substitution_constant() == 1


def test_substitution_constant_clamped_map():
    # s + zeta(s) clamped at T sends the whole last half-unit to one node
    g = build_grid(1.0, 0.0, 0.0, 0.1, zeta_fn=lambda t: 0.5)
    assert g.substitution_constant() == 6


def test_delay_spec_bound_checked():
    spec = DelaySpec(0.0, zeta_fn=lambda t: 0.5, L_bound=2.0)
    with pytest.raises(ConfigurationError, match="L >="):
        spec.grid(1.0, 0.0, 0.1)
    assert DelaySpec(0.25, L_bound=1.0).grid(1.0, 0.25, 0.05).delay_steps == 5


def test_delay_spec_matches_indicator_maximisation():
    # sum_{t<=T} g(t + delta(t)) <= L sum g for all indicators g
    g = build_grid(1.0, 0.0, 0.0, 0.1, zeta_fn=lambda t: 0.5)
    L = g.substitution_constant()
    head = g.zeta_map[g.idx0:g.idx_T + 1]
    worst = max(int(np.sum(head == j)) for j in range(g.n_nodes))
    assert worst == L


# ---------------------------------------------------------------------------
# random numbers

def test_same_seed_bit_identical():
    a = RandomSource(7).child("x").normal_array((50, 3))
    b = RandomSource(7).child("x").normal_array((50, 3))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, RandomSource(8).child("x").normal_array((50, 3)))


def test_output_independent_of_request_batching():
    r = RandomSource(3)
    full = r.normal(np.arange(100)[:, None], np.arange(4)[None, :])
    part = r.normal(np.arange(40, 60)[:, None], np.arange(4)[None, :])
    assert np.array_equal(full[40:60], part)
    assert r.normal(57, 2) == full[57, 2]


def test_uniform_range():
    u = RandomSource(0).uniform_array((10_000,))
    assert u.min() > 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01


def test_substream_correlation_below_threshold():
    r = RandomSource(11)
    a = r.child("stream", 1).normal_array((1000,))
    b = r.child("stream", 2).normal_array((1000,))
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_subsample_distinct_sorted():
    idx = RandomSource(5).subsample(100, 30)
    assert len(set(idx.tolist())) == 30
    assert np.all(np.diff(idx) > 0)
    assert np.array_equal(RandomSource(5).subsample(10, 20), np.arange(10))


# ---------------------------------------------------------------------------
# Brownian ensembles

def test_brownian_same_seed_bit_identical():
    g = build_grid(1.0, 0.0, 0.0, 0.1)
    a = sample_brownian(g, 50, 2, RandomSource(1)).brownian_path()
    b = sample_brownian(g, 50, 2, RandomSource(1)).brownian_path()
    assert np.array_equal(a, b)


def test_brownian_step_variance_band():
    g = build_grid(1.0, 0.0, 0.0, 0.01)
    ens = sample_brownian(g, 100_000, 1, RandomSource(2))
    for s in (0, 50, 99):
        v = ens.increment(s).var()
        assert 0.0097 <= v <= 0.0103


def test_brownian_terminal_variance():
    g = build_grid(1.0, 0.0, 0.0, 0.01)
    ens = sample_brownian(g, 100_000, 1, RandomSource(3))
    total = sum(ens.increment(s) for s in range(ens.n_steps))
    assert abs(total.var() - 1.0) <= 0.02


def test_coarsened_ensemble_shares_path():
    fine = build_grid(1.0, 0.0, 0.0, 0.25 / 4)
    coarse = build_grid(1.0, 0.0, 0.0, 0.25)
    ens = sample_brownian(fine, 20, 1, RandomSource(4))
    c = ens.coarsen(coarse, 4)
    np.testing.assert_allclose(c.brownian_path()[:, -1], ens.brownian_path()[:, -1], atol=1e-12)
    with pytest.raises(ConfigurationError):
        ens.coarsen(coarse, 3)


def test_explicit_increments_shape_checked():
    g = build_grid(1.0, 0.0, 0.0, 0.5)
    with pytest.raises(ConfigurationError):
        ParticleEnsemble(g, 3, 1, RandomSource(0), increments=np.zeros((3, 5, 1)))
    e = ParticleEnsemble(g, 3, 1, RandomSource(0), increments=np.ones((3, 2, 1)))
    assert np.array_equal(e.brownian_path()[:, -1, 0], [2.0, 2.0, 2.0])


# ---------------------------------------------------------------------------
# boundary data

def test_boundary_constant_shapes():
    g = build_grid(1.0, 0.0, 0.25, 0.05)
    bd = BoundaryData.constant(g, [1.0, 2.0], control0=0.5)
    assert bd.initial.shape == (1, 6, 2)
    assert bd.control.shape == (1, 5, 1)
    bd.validate(g)


def test_boundary_wrong_window_rejected():
    g = build_grid(1.0, 0.25, 0.25, 0.05)
    with pytest.raises(ConfigurationError, match="terminal_y"):
        BoundaryData(terminal_y=np.zeros((1, 3, 1))).validate(g)
    with pytest.raises(ConfigurationError, match="not finite"):
        BoundaryData(initial=np.full((1, 6, 1), np.nan)).validate(g)
