"""Tests for the sparse assembly of the coupled elliptic system."""

import numpy as np
import pytest
from scipy import sparse

from heatcoef.elliptic_system import (
    IndexMap,
    assemble_boundary,
    assemble_gradient,
    assemble_linear,
    assemble_nonlinear,
    build_blocks,
    update_nonlinear,
)
from heatcoef.forward_sim import SpaceGrid, apply_laplacian, boundary_nodes
from heatcoef.fourier_data import FourierBoundaryData
from heatcoef.time_basis import build_basis

T = 0.3


@pytest.fixture(scope="module")
def basis2():
    return build_basis(T, 2)


def _fake_data(grid, n_modes, seed=0):
    rng = np.random.default_rng(seed)
    edges, ii, jj = boundary_nodes(grid.n)
    xs = grid.coords
    nb = len(ii)
    return FourierBoundaryData(
        R=grid.R, n_x=grid.n, T=T, n_modes=n_modes, edges=edges, ii=ii,
        jj=jj, xx=xs[ii], yy=xs[jj],
        dirichlet_modes=rng.standard_normal((nb, n_modes)),
        neumann_modes=rng.standard_normal((nb, n_modes)),
    )


def test_index_map_roundtrip():
    imap = IndexMap(n_x=7, n_modes=3)
    assert imap.size == 7 * 7 * 3
    idx = imap.flat(2, 4, 1)
    assert idx == (2 * 7 + 4) * 3 + 1
    i, j, m = imap.unflat(idx)
    assert (i, j, m) == (2, 4, 1)
    # flattening matches C-order reshape of an (n, n, modes) array
    arr = np.arange(imap.size).reshape(7, 7, 3)
    assert arr[2, 4, 1] == idx


def test_linear_operator_rows(basis2):
    # every interior row applied to a random field reproduces the termwise
    # sum: 5-point laplacian - stiffness coupling - (lap f / f) diagonal
    rng = np.random.default_rng(3)
    grid = SpaceGrid(R=1.0, n=5)
    n, N = 5, 2
    f = 1.0 + 0.05 * rng.standard_normal((n, n))
    s = basis2.stiffness
    op = assemble_linear(f, s, grid, N)
    v = rng.standard_normal((n, n, N))
    out = (op @ v.ravel()).reshape(n, n, N)
    lap_f = apply_laplacian(f, grid.d)
    d2 = grid.d**2
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            for m in range(N):
                lap_v = (v[i + 1, j, m] + v[i - 1, j, m] + v[i, j + 1, m]
                         + v[i, j - 1, m] - 4 * v[i, j, m]) / d2
                coupling = -sum(s[m, k] * v[i, j, k] for k in range(N))
                expect = lap_v + coupling - lap_f[i, j] / f[i, j] * v[i, j, m]
                assert out[i, j, m] == pytest.approx(expect, abs=1e-12)


def test_linear_operator_boundary_rows_are_zero(basis2):
    grid = SpaceGrid(R=1.0, n=6)
    op = assemble_linear(np.ones((6, 6)), basis2.stiffness, grid, 2)
    v = np.arange(6 * 6 * 2, dtype=float)
    out = (op @ v).reshape(6, 6, 2)
    assert np.all(out[0, :, :] == 0)
    assert np.all(out[-1, :, :] == 0)
    assert np.all(out[:, 0, :] == 0)
    assert np.all(out[:, -1, :] == 0)


def test_nonlinear_with_zero_iterate_is_bitwise_linear(basis2):
    rng = np.random.default_rng(5)
    grid = SpaceGrid(R=1.0, n=8)
    f = 1.0 + 0.1 * rng.standard_normal((8, 8))
    lin = assemble_linear(f, basis2.stiffness, grid, 2)
    non = assemble_nonlinear(f, basis2.stiffness, grid, basis2.at_zero,
                             np.zeros((8, 8, 2)))
    assert np.array_equal(lin.indptr, non.indptr)
    assert np.array_equal(lin.indices, non.indices)
    assert np.array_equal(lin.data, non.data)


def test_nonlinear_coupling_values(basis2):
    # the frozen-iterate term adds member_n(0) * v_prev[m] / f at (m, n)
    rng = np.random.default_rng(6)
    grid = SpaceGrid(R=1.0, n=5)
    n, N = 5, 2
    f = 1.0 + 0.05 * rng.standard_normal((n, n))
    v_prev = rng.standard_normal((n, n, N))
    lin = assemble_linear(f, basis2.stiffness, grid, N)
    non = assemble_nonlinear(f, basis2.stiffness, grid, basis2.at_zero, v_prev)
    diff = (non - lin).toarray()
    imap = IndexMap(n, N)
    at0 = basis2.at_zero
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            for m in range(N):
                for k in range(N):
                    got = diff[imap.flat(i, j, m), imap.flat(i, j, k)]
                    expect = at0[k] * v_prev[i, j, m] / f[i, j]
                    assert got == pytest.approx(expect, rel=1e-13, abs=1e-15)


def test_nonlinear_rejects_bad_iterate_shape(basis2):
    grid = SpaceGrid(R=1.0, n=5)
    with pytest.raises(ValueError):
        assemble_nonlinear(np.ones((5, 5)), basis2.stiffness, grid,
                           basis2.at_zero, np.zeros((5, 5, 3)))


def test_vanishing_initial_state_rejected(basis2):
    grid = SpaceGrid(R=1.0, n=5)
    f = np.ones((5, 5))
    f[2, 2] = 0.0
    with pytest.raises(ValueError, match=r"\(2, 2\)"):
        assemble_linear(f, basis2.stiffness, grid, 2)


def test_boundary_operators(basis2):
    rng = np.random.default_rng(9)
    grid = SpaceGrid(R=1.0, n=6)
    data = _fake_data(grid, 2)
    d1, d2, fvec, gvec = assemble_boundary(data, grid)
    v = rng.standard_normal((6, 6, 2))
    trace = (d1 @ v.ravel()).reshape(6, 6, 2)
    ring = np.zeros((6, 6), dtype=bool)
    ring[0] = ring[-1] = True
    ring[:, 0] = ring[:, -1] = True
    assert np.allclose(trace[ring], v[ring], rtol=0, atol=0)
    assert np.all(trace[~ring] == 0)
    # the dirichlet data vector holds the mode coefficients at those rows
    fv = fvec.reshape(6, 6, 2)
    for b, (i, j) in enumerate(zip(data.ii, data.jj)):
        assert np.array_equal(fv[i, j], data.dirichlet_modes[b])
    # one-sided normal differences at non-corner nodes
    g = (d2 @ v.ravel()).reshape(6, 6, 2)
    assert np.allclose(g[0, 2], (v[0, 2] - v[1, 2]) / grid.d)
    assert np.allclose(g[-1, 3], (v[-1, 3] - v[-2, 3]) / grid.d)
    assert np.allclose(g[2, 0], (v[2, 0] - v[2, 1]) / grid.d)
    assert np.allclose(g[3, -1], (v[3, -1] - v[3, -2]) / grid.d)
    # corners carry no equations in either the operator or the data vector
    gv = gvec.reshape(6, 6, 2)
    for i, j in ((0, 0), (0, 5), (5, 0), (5, 5)):
        assert np.all(g[i, j] == 0)
        assert np.all(gv[i, j] == 0)


def test_boundary_rejects_mismatched_grid(basis2):
    grid = SpaceGrid(R=1.0, n=6)
    data = _fake_data(grid, 2)
    with pytest.raises(ValueError):
        assemble_boundary(data, SpaceGrid(R=1.0, n=7))
    with pytest.raises(ValueError):
        assemble_boundary(data, SpaceGrid(R=2.0, n=6))


def test_gradient_operators():
    rng = np.random.default_rng(11)
    grid = SpaceGrid(R=1.0, n=7)
    n, N = 7, 3
    dx, dy = assemble_gradient(grid, N)
    v = rng.standard_normal((n, n, N))
    gx = (dx @ v.ravel()).reshape(n, n, N)
    gy = (dy @ v.ravel()).reshape(n, n, N)
    assert np.allclose(gx[:-1], (v[1:] - v[:-1]) / grid.d, rtol=0, atol=1e-14)
    assert np.all(gx[-1] == 0)
    assert np.allclose(gy[:, :-1], (v[:, 1:] - v[:, :-1]) / grid.d,
                       rtol=0, atol=1e-14)
    assert np.all(gy[:, -1] == 0)


def test_build_blocks_weights_and_sizes(basis2):
    grid = SpaceGrid(R=1.0, n=6)
    data = _fake_data(grid, 2)
    blocks = build_blocks(np.ones((6, 6)), basis2.stiffness, basis2.at_zero,
                          grid, data, eps=1e-9)
    assert blocks.size == 6 * 6 * 2
    assert blocks.w_pde == pytest.approx(grid.d**2)
    assert blocks.w_bdy == pytest.approx(grid.d)
    assert blocks.eps == 1e-9
    assert blocks.interior_op.shape == (72, 72)


def test_update_nonlinear_only_touches_interior(basis2):
    rng = np.random.default_rng(13)
    grid = SpaceGrid(R=1.0, n=6)
    data = _fake_data(grid, 2)
    f = np.ones((6, 6))
    blocks = build_blocks(f, basis2.stiffness, basis2.at_zero, grid, data,
                          eps=1e-9)
    v_prev = rng.standard_normal((6, 6, 2))
    updated = update_nonlinear(blocks, f, basis2.stiffness, basis2.at_zero,
                               grid, v_prev)
    assert updated.dirichlet is blocks.dirichlet
    assert updated.grad_x is blocks.grad_x
    assert updated.data_dirichlet is blocks.data_dirichlet
    delta = (updated.interior_op - blocks.interior_op)
    assert delta.nnz > 0
