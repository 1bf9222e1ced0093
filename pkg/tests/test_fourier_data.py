"""Tests for projecting boundary time series onto the orthonormal basis."""

import numpy as np
import pytest

from heatcoef.forward_sim import SpaceGrid, boundary_nodes
from heatcoef.fourier_data import (
    FourierBoundaryData,
    add_noise,
    dump_fourier_csv,
    load_fourier_csv,
    project,
    project_rate,
    project_series,
    projection_weights,
    segment_member_integrals,
)
from heatcoef.time_basis import TimeGrid, build_basis, composite_gauss_rule

T = 0.3


@pytest.fixture(scope="module")
def basis():
    return build_basis(T, 25)


def _fake_data(n_x=6, n_modes=3, seed=0):
    rng = np.random.default_rng(seed)
    grid = SpaceGrid(R=1.0, n=n_x)
    edges, ii, jj = boundary_nodes(n_x)
    xs = grid.coords
    nb = len(ii)
    return FourierBoundaryData(
        R=1.0, n_x=n_x, T=T, n_modes=n_modes, edges=edges, ii=ii, jj=jj,
        xx=xs[ii], yy=xs[jj],
        dirichlet_modes=rng.standard_normal((nb, n_modes)),
        neumann_modes=rng.standard_normal((nb, n_modes)),
    )


def test_constant_series_has_exactly_zero_rate(basis):
    # the rate projection integrates d/dt of the piecewise-linear series;
    # a constant series has zero increments, so every mode is exactly 0.0
    tgrid = TimeGrid(T=T, n_t=100)
    values = np.full((4, 100), 3.7)
    modes = project_rate(values, basis, tgrid)
    assert modes.shape == (4, 25)
    assert np.all(modes == 0.0)


def test_linear_series_projects_exactly(basis):
    # a + b t is its own piecewise-linear interpolant, so the projected
    # coefficients equal the true integrals int (a + b t) member_m dt
    tgrid = TimeGrid(T=T, n_t=50)
    a, b = 0.7, -2.1
    values = (a + b * tgrid.nodes)[None, :]
    got = project_series(values, basis, tgrid)[0]
    rule = composite_gauss_rule(T, n_sub=512, n_gl=8)
    vals = basis.evaluate(rule.nodes)
    want = (vals * rule.weights) @ (a + b * rule.nodes)
    assert np.abs(got - want).max() <= 1e-12


@pytest.mark.parametrize("k", [1, 2, 3])
def test_single_member_recovery(basis, k):
    # sampling member k densely and projecting recovers the unit vector;
    # measured errors 1.9e-9 (k=1), 4.4e-8 (k=2), 5.7e-7 (k=3) at 2000 nodes
    tgrid = TimeGrid(T=T, n_t=2000)
    values = basis.evaluate(tgrid.nodes)[k - 1][None, :]
    modes = project_series(values, basis, tgrid)[0]
    expect = np.zeros(25)
    expect[k - 1] = 1.0
    assert np.abs(modes - expect).max() <= 1e-6


def test_rate_projection_matches_true_derivative(basis):
    # for a gently varying series the by-parts rate projection approaches
    # the projection of the true derivative; exp(t) measured at 1.8e-5
    tgrid = TimeGrid(T=T, n_t=100)
    values = np.exp(tgrid.nodes)[None, :]
    got = project_rate(values, basis, tgrid)[0]
    rule = composite_gauss_rule(T, n_sub=512, n_gl=8)
    vals = basis.evaluate(rule.nodes)
    want = (vals * rule.weights) @ np.exp(rule.nodes)
    assert np.abs(got - want).max() <= 1e-4


def test_segment_integrals_sum_to_full_integral(basis):
    # summing the per-segment member integrals telescopes to int_0^T member
    tgrid = TimeGrid(T=T, n_t=37)
    seg = segment_member_integrals(basis, tgrid)
    assert seg.shape == (25, 36)
    rule = composite_gauss_rule(T, n_sub=512, n_gl=8)
    vals = basis.evaluate(rule.nodes)
    want = (vals * rule.weights) @ np.ones(len(rule.nodes))
    assert np.abs(seg.sum(axis=1) - want).max() <= 1e-12


def test_projection_weights_reproduce_constant(basis):
    tgrid = TimeGrid(T=T, n_t=64)
    w = projection_weights(basis, tgrid)
    assert w.shape == (25, 64)
    # weights applied to all-ones samples equal the members' plain integrals
    rule = composite_gauss_rule(T, n_sub=512, n_gl=8)
    vals = basis.evaluate(rule.nodes)
    want = (vals * rule.weights) @ np.ones(len(rule.nodes))
    assert np.abs(w.sum(axis=1) - want).max() <= 1e-12


def test_time_axis_mismatch_rejected(basis):
    tgrid = TimeGrid(T=0.4, n_t=30)
    with pytest.raises(ValueError):
        project_series(np.ones((2, 30)), basis, tgrid)


def test_sample_count_mismatch_rejected(basis):
    tgrid = TimeGrid(T=T, n_t=30)
    with pytest.raises(ValueError):
        project_series(np.ones((2, 31)), basis, tgrid)


def test_add_noise_deterministic_and_bounded():
    data = _fake_data()
    noisy1 = add_noise(data, 0.1, seed=42)
    noisy2 = add_noise(data, 0.1, seed=42)
    assert np.array_equal(noisy1.dirichlet_modes, noisy2.dirichlet_modes)
    assert np.array_equal(noisy1.neumann_modes, noisy2.neumann_modes)
    # multiplicative model: |noisy - clean| <= delta |clean| entrywise
    assert np.all(np.abs(noisy1.dirichlet_modes - data.dirichlet_modes)
                  <= 0.1 * np.abs(data.dirichlet_modes) + 1e-15)
    assert noisy1.delta == 0.1
    assert noisy1.seed == 42


def test_add_noise_zero_level_is_identity():
    data = _fake_data()
    clean = add_noise(data, 0.0, seed=7)
    assert np.array_equal(clean.dirichlet_modes, data.dirichlet_modes)
    assert np.array_equal(clean.neumann_modes, data.neumann_modes)


def test_add_noise_seeds_differ():
    data = _fake_data()
    a = add_noise(data, 0.1, seed=1)
    b = add_noise(data, 0.1, seed=2)
    assert not np.array_equal(a.dirichlet_modes, b.dirichlet_modes)


def test_add_noise_draws_independent_for_both_traces():
    data = _fake_data()
    noisy = add_noise(data, 0.1, seed=3)
    rel_f = noisy.dirichlet_modes / data.dirichlet_modes - 1.0
    rel_g = noisy.neumann_modes / data.neumann_modes - 1.0
    assert not np.allclose(rel_f, rel_g)


def test_add_noise_rejects_negative_level():
    with pytest.raises(ValueError):
        add_noise(_fake_data(), -0.1, seed=0)


def test_project_produces_expected_shapes(basis):
    from heatcoef.forward_sim import extract_cauchy, solve_forward
    fine = SpaceGrid(R=2.0, n=61)
    tgrid = TimeGrid(T=T, n_t=40)
    Xf, Yf = fine.meshgrid()
    u = solve_forward(np.zeros((61, 61)), 1.0 + 0.05 * Xf, fine, tgrid)
    series = extract_cauchy(u, fine, SpaceGrid(R=1.0, n=8), tgrid)
    data = project(series, basis)
    nb = 4 * 8 - 4
    assert data.dirichlet_modes.shape == (nb, 25)
    assert data.neumann_modes.shape == (nb, 25)
    assert data.delta == 0.0
    assert data.n_x == 8
    assert np.all(np.isfinite(data.dirichlet_modes))


def test_fourier_csv_roundtrip(tmp_path):
    data = _fake_data(n_x=7, n_modes=4)
    noisy = add_noise(data, 0.05, seed=11)
    path = tmp_path / "modes.csv"
    dump_fourier_csv(noisy, path)
    back = load_fourier_csv(path)
    assert back.n_x == noisy.n_x
    assert back.n_modes == noisy.n_modes
    assert back.delta == pytest.approx(noisy.delta)
    assert back.seed == noisy.seed
    assert np.array_equal(back.edges, noisy.edges)
    assert np.allclose(back.dirichlet_modes, noisy.dirichlet_modes,
                       rtol=0, atol=0)
    assert np.allclose(back.neumann_modes, noisy.neumann_modes,
                       rtol=0, atol=0)
