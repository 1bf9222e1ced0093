"""Sparse assembly of the coupled elliptic system for the mode fields.

After time compression the unknowns are N nodal fields v_m on the inner
square, one per basis mode, coupled through the stiffness matrix of the time
basis and (in the corrected iterations) through the previous iterate.  All
unknowns live in one flat vector indexed by

    flat = (i * n_x + j) * n_modes + m        (0-based i, j, m),

mode fastest, then y, then x; a (n_x, n_x, n_modes) array reshapes to it in
C order.  Assembled blocks (all CSR, square on the full vector; rows that do
not carry an equation are identically zero):

- interior_op: at interior nodes, the 5-point Laplacian of v_m minus the
  stiffness coupling sum_n stiffness[m, n] v_n minus (lap f / f) v_m; the
  corrected variant adds member_n(0) * v_prev_m / f at column (i, j, n).
- dirichlet: identity rows at every boundary node (corners once).
- neumann: outward one-sided normal difference (v_boundary - v_inward) / d
  at every non-corner boundary node; corners have no single outward normal,
  so they carry no Neumann row.
- grad_x / grad_y: forward differences, zero rows on the last line.
- data_dirichlet / data_neumann: projected boundary coefficients placed at
  the rows where the corresponding operator acts.

The plain and corrected interior assemblies share one code path: the plain
operator is the corrected one with all coupling values zero, so the two
matrices agree bitwise when the previous iterate vanishes (same triplet
order through the same duplicate summation).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

from .forward_sim import SpaceGrid, apply_laplacian, boundary_nodes
from .fourier_data import FourierBoundaryData

__all__ = [
    "IndexMap",
    "OperatorBlocks",
    "assemble_linear",
    "assemble_nonlinear",
    "assemble_boundary",
    "assemble_gradient",
    "build_blocks",
    "update_nonlinear",
]

_MIN_F = 1e-12


@dataclass(frozen=True)
class IndexMap:
    """Flattening of (i, j, m) node-mode triples into one vector index."""

    n_x: int
    n_modes: int

    @property
    def size(self) -> int:
        return self.n_x * self.n_x * self.n_modes

    def flat(self, i, j, m):
        return (np.asarray(i) * self.n_x + np.asarray(j)) * self.n_modes + np.asarray(m)

    def unflat(self, idx):
        idx = np.asarray(idx)
        m = idx % self.n_modes
        ij = idx // self.n_modes
        return ij // self.n_x, ij % self.n_x, m


def _check_f(f_field: np.ndarray):
    bad = np.abs(f_field) < _MIN_F
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(
            f"initial state vanishes at node ({i}, {j}) "
            f"(|f| < {_MIN_F}); cannot divide by it"
        )


def _interior_pattern(imap: IndexMap):
    """Row/col arrays of the per-node (m, n) coupling blocks, node-major.

    Returns (rows, cols, base) with rows/cols raveled over (node, m, n),
    n fastest, and base the flat index of mode 0 at each interior node.
    """
    n_x, N = imap.n_x, imap.n_modes
    ii, jj = np.meshgrid(np.arange(1, n_x - 1), np.arange(1, n_x - 1), indexing="ij")
    base = (ii.ravel() * n_x + jj.ravel()) * N
    mm, nn = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    rows = base[:, None, None] + mm[None, :, :]
    cols = base[:, None, None] + nn[None, :, :]
    return rows.ravel(), cols.ravel(), base


def _interior_coo(f_field, stiffness, grid: SpaceGrid, imap: IndexMap,
                  coupling_vals):
    """COO triplets of the interior operator, coupling values supplied.

    coupling_vals is raveled over (interior node, m, n), n fastest; pass
    zeros for the uncorrected operator.  Triplet order is fixed so that any
    two assemblies differing only in coupling_vals sum duplicates alike.
    """
    n_x, N = imap.n_x, imap.n_modes
    d = grid.d
    inv_d2 = 1.0 / (d * d)
    lap_f = apply_laplacian(f_field, d)
    ratio = (lap_f / f_field)[1:-1, 1:-1].ravel()

    rows_c, cols_c, base = _interior_pattern(imap)
    n_int = base.size
    vals_c = np.broadcast_to(-stiffness[None, :, :], (n_int, N, N)).ravel() \
        + coupling_vals

    marange = np.arange(N)
    rows_d = (base[:, None] + marange[None, :]).ravel()
    vals_d = np.broadcast_to((-4.0 * inv_d2 - ratio)[:, None], (n_int, N)).ravel()

    # 5-point neighbors: +-1 in i is +-n_x*N in flat space, +-1 in j is +-N
    offsets = (n_x * N, -n_x * N, N, -N)
    rows_nb = np.tile(rows_d, len(offsets))
    cols_nb = np.concatenate([rows_d + off for off in offsets])
    vals_nb = np.full(rows_nb.size, inv_d2)

    rows = np.concatenate([rows_c, rows_d, rows_nb])
    cols = np.concatenate([cols_c, rows_d, cols_nb])
    vals = np.concatenate([vals_c, vals_d, vals_nb])
    return rows, cols, vals


def _assemble_interior(f_field, stiffness, grid, coupling_vals, n_modes):
    f_field = np.asarray(f_field, dtype=float)
    _check_f(f_field)
    imap = IndexMap(grid.n, n_modes)
    rows, cols, vals = _interior_coo(f_field, np.asarray(stiffness, float),
                                     grid, imap, coupling_vals)
    op = sparse.coo_matrix((vals, (rows, cols)), shape=(imap.size, imap.size))
    return op.tocsr()


def assemble_linear(f_field, stiffness, grid: SpaceGrid, n_modes: int):
    """Uncorrected interior operator as CSR (boundary rows are zero)."""
    n_int = (grid.n - 2) ** 2
    zeros = np.zeros(n_int * n_modes * n_modes)
    return _assemble_interior(f_field, stiffness, grid, zeros, n_modes)


def _coupling_values(f_field, at_zero, v_prev):
    """Frozen-iterate coupling values aligned with _interior_pattern.

    Entry at row (i, j, m), column (i, j, n) is
        member_n(0) * v_prev[i, j, m] / f[i, j].
    """
    vp = v_prev[1:-1, 1:-1, :]
    f_int = np.asarray(f_field, float)[1:-1, 1:-1]
    block = vp[..., :, None] * (at_zero[None, None, None, :]
                                / f_int[..., None, None])
    return block.ravel()


def _coupling_matrices(f_field, at_zero, v_prev, imap: IndexMap):
    """The coupling as a product of two sparse factors, left @ right.

    Column j of left carries the previous iterate's modes at interior node
    j; row j of right carries member_n(0) / f at that node.  Their product
    reproduces _coupling_values entry for entry, which gives the solver a
    rank-per-node handle on the corrected system.
    """
    n_x, N = imap.n_x, imap.n_modes
    ii, jj = np.meshgrid(np.arange(1, n_x - 1), np.arange(1, n_x - 1),
                         indexing="ij")
    base = (ii.ravel() * n_x + jj.ravel()) * N
    n_nodes = base.size
    rows = (base[:, None] + np.arange(N)[None, :]).ravel()
    cols = np.repeat(np.arange(n_nodes), N)
    v_int = np.asarray(v_prev, float)[1:-1, 1:-1, :].reshape(n_nodes, N)
    left = sparse.csr_matrix((v_int.ravel(), (rows, cols)),
                             shape=(imap.size, n_nodes))
    f_int = np.asarray(f_field, float)[1:-1, 1:-1].ravel()
    right_vals = (np.asarray(at_zero, float)[None, :]
                  / f_int[:, None]).ravel()
    right = sparse.csr_matrix((right_vals, (cols, rows)),
                              shape=(n_nodes, imap.size))
    return left, right


def assemble_nonlinear(f_field, stiffness, grid: SpaceGrid, at_zero, v_prev):
    """Corrected interior operator: plain part plus the frozen coupling.

    v_prev has shape (n_x, n_x, n_modes); at_zero holds the basis members'
    values at time zero.  With v_prev = 0 the result equals assemble_linear
    bit for bit.
    """
    n_modes = len(at_zero)
    v_prev = np.asarray(v_prev, dtype=float)
    if v_prev.shape != (grid.n, grid.n, n_modes):
        raise ValueError(
            f"previous iterate must have shape {(grid.n, grid.n, n_modes)}, "
            f"got {v_prev.shape}"
        )
    vals_c = _coupling_values(f_field, np.asarray(at_zero, float), v_prev)
    return _assemble_interior(f_field, stiffness, grid, vals_c, n_modes)


def assemble_boundary(data: FourierBoundaryData, grid: SpaceGrid):
    """Dirichlet/Neumann operators and their data vectors.

    Validates that the data's node set matches the grid boundary in the
    canonical order.  Returns (dirichlet, neumann, data_dirichlet,
    data_neumann).
    """
    n_x = grid.n
    if data.n_x != n_x or abs(data.R - grid.R) > 1e-12 * max(1.0, grid.R):
        raise ValueError(
            f"data grid (R={data.R}, n={data.n_x}) does not match the "
            f"assembly grid (R={grid.R}, n={n_x})"
        )
    edges, ii, jj = boundary_nodes(n_x)
    if not (np.array_equal(edges, data.edges) and np.array_equal(ii, data.ii)
            and np.array_equal(jj, data.jj)):
        raise ValueError("boundary node ordering of the data does not match")

    N = data.n_modes
    imap = IndexMap(n_x, N)
    marange = np.arange(N)

    flat_b = (ii * n_x + jj) * N
    rows_dir = (flat_b[:, None] + marange[None, :]).ravel()
    dirichlet = sparse.coo_matrix(
        (np.ones(rows_dir.size), (rows_dir, rows_dir)),
        shape=(imap.size, imap.size),
    ).tocsr()
    data_dir = np.zeros(imap.size)
    data_dir[rows_dir] = data.dirichlet_modes.ravel()

    corner = ((ii == 0) | (ii == n_x - 1)) & ((jj == 0) | (jj == n_x - 1))
    keep = ~corner
    # one node inward, against the outward normal
    di = np.where(ii[keep] == 0, 1, np.where(ii[keep] == n_x - 1, -1, 0))
    dj = np.where(jj[keep] == 0, 1, np.where(jj[keep] == n_x - 1, -1, 0))
    base_b = flat_b[keep]
    base_in = ((ii[keep] + di) * n_x + (jj[keep] + dj)) * N
    rows_neu = (base_b[:, None] + marange[None, :]).ravel()
    cols_in = (base_in[:, None] + marange[None, :]).ravel()
    inv_d = 1.0 / grid.d
    neumann = sparse.coo_matrix(
        (
            np.concatenate([np.full(rows_neu.size, inv_d),
                            np.full(rows_neu.size, -inv_d)]),
            (np.concatenate([rows_neu, rows_neu]),
             np.concatenate([rows_neu, cols_in])),
        ),
        shape=(imap.size, imap.size),
    ).tocsr()
    data_neu = np.zeros(imap.size)
    data_neu[rows_neu] = data.neumann_modes[keep].ravel()
    return dirichlet, neumann, data_dir, data_neu


def assemble_gradient(grid: SpaceGrid, n_modes: int):
    """Forward-difference gradient operators (grad_x, grad_y) on all modes.

    Row (i, j, m) of grad_x holds (v[i+1, j, m] - v[i, j, m]) / d for
    i < n_x - 1 and is zero on the last x-line; grad_y likewise in j.
    """
    n_x = grid.n
    N = n_modes
    imap = IndexMap(n_x, N)
    inv_d = 1.0 / grid.d

    def one_axis(step_i, step_j):
        ni = n_x - 1 if step_i else n_x
        nj = n_x - 1 if step_j else n_x
        ii, jj, mm = np.meshgrid(
            np.arange(ni), np.arange(nj), np.arange(N), indexing="ij"
        )
        rows = imap.flat(ii, jj, mm).ravel()
        cols = imap.flat(ii + step_i, jj + step_j, mm).ravel()
        vals = np.concatenate([np.full(rows.size, -inv_d),
                               np.full(rows.size, inv_d)])
        return sparse.coo_matrix(
            (vals, (np.concatenate([rows, rows]),
                    np.concatenate([rows, cols]))),
            shape=(imap.size, imap.size),
        ).tocsr()

    return one_axis(1, 0), one_axis(0, 1)


@dataclass(frozen=True)
class OperatorBlocks:
    """Everything the regularized least-squares solve needs.

    Residual weights follow the grid: interior equations carry d^2, boundary
    equations carry d, and the regularization carries eps * d^2.
    """

    interior_op: sparse.csr_matrix
    dirichlet: sparse.csr_matrix
    neumann: sparse.csr_matrix
    grad_x: sparse.csr_matrix
    grad_y: sparse.csr_matrix
    data_dirichlet: np.ndarray
    data_neumann: np.ndarray
    d_x: float
    n_x: int
    n_modes: int
    eps: float
    # sparse factors of the iterate coupling (interior_op = uncoupled part
    # + couple_left @ couple_right); None when the system is uncoupled
    couple_left: sparse.csr_matrix | None = None
    couple_right: sparse.csr_matrix | None = None

    @property
    def w_pde(self) -> float:
        return self.d_x * self.d_x

    @property
    def w_bdy(self) -> float:
        return self.d_x

    @property
    def size(self) -> int:
        return self.n_x * self.n_x * self.n_modes


def build_blocks(f_field, stiffness, at_zero, grid: SpaceGrid,
                 data: FourierBoundaryData, eps: float,
                 v_prev=None) -> OperatorBlocks:
    """Assemble all blocks for one plain (v_prev None) or corrected solve."""
    if v_prev is None:
        interior = assemble_linear(f_field, stiffness, grid, len(at_zero))
        left = right = None
    else:
        interior = assemble_nonlinear(f_field, stiffness, grid, at_zero, v_prev)
        left, right = _optional_coupling(f_field, at_zero, v_prev, grid)
    dirichlet, neumann, data_dir, data_neu = assemble_boundary(data, grid)
    grad_x, grad_y = assemble_gradient(grid, len(at_zero))
    return OperatorBlocks(
        interior_op=interior,
        dirichlet=dirichlet,
        neumann=neumann,
        grad_x=grad_x,
        grad_y=grad_y,
        data_dirichlet=data_dir,
        data_neumann=data_neu,
        d_x=grid.d,
        n_x=grid.n,
        n_modes=len(at_zero),
        eps=eps,
        couple_left=left,
        couple_right=right,
    )


def _optional_coupling(f_field, at_zero, v_prev, grid: SpaceGrid):
    """Coupling factors for a nonzero iterate, (None, None) otherwise."""
    v_prev = np.asarray(v_prev, dtype=float)
    if not np.any(v_prev[1:-1, 1:-1, :]):
        return None, None
    imap = IndexMap(grid.n, len(at_zero))
    return _coupling_matrices(f_field, at_zero, v_prev, imap)


def update_nonlinear(blocks: OperatorBlocks, f_field, stiffness, at_zero,
                     grid: SpaceGrid, v_prev) -> OperatorBlocks:
    """Blocks for the next corrected step; only the interior operator moves."""
    interior = assemble_nonlinear(f_field, stiffness, grid, at_zero, v_prev)
    left, right = _optional_coupling(f_field, at_zero, v_prev, grid)
    return replace(blocks, interior_op=interior, couple_left=left,
                   couple_right=right)
