"""Forward heat-equation simulator and lateral Cauchy data extraction.

Simulates u_t = lap(u) + c(x) u on an enclosing square with time-independent
Dirichlet boundary values equal to the initial state, by implicit Euler with
a 5-point Laplacian (factor once, back-substitute per step).  Then samples u
(Dirichlet trace) and its outward normal derivative (Neumann trace) on the
boundary of a smaller concentric square.  The inner grid is deliberately not
nested in the simulation grid, so the extracted data carry honest
interpolation error instead of committing an inverse crime.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .time_basis import TimeGrid

__all__ = [
    "SpaceGrid",
    "apply_laplacian",
    "EDGE_NAMES",
    "boundary_nodes",
    "edge_normal_axis",
    "edge_normal_sign",
    "solve_forward",
    "extract_cauchy",
    "BoundaryTimeSeries",
    "dump_series_csv",
    "load_series_csv",
]


@dataclass(frozen=True)
class SpaceGrid:
    """Uniform tensor grid on the square (-R, R)^2; x_i = -R + i * d."""

    R: float
    n: int
    d: float = field(init=False)
    coords: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 3:
            raise ValueError(f"need at least 3 nodes per side, got {self.n}")
        if not (self.R > 0):
            raise ValueError(f"half-width must be positive, got {self.R}")
        object.__setattr__(self, "d", 2.0 * self.R / (self.n - 1))
        coords = np.linspace(-self.R, self.R, self.n)
        coords.flags.writeable = False
        object.__setattr__(self, "coords", coords)

    def meshgrid(self):
        return np.meshgrid(self.coords, self.coords, indexing="ij")


def apply_laplacian(field: np.ndarray, d: float) -> np.ndarray:
    """5-point Laplacian of a (n, n) field.

    Interior nodes use the centered stencil; along each edge the second
    difference of the adjacent interior line is replicated (exact for fields
    quadratic in the normal coordinate, and irrelevant for the constant or
    affine initial states used in practice).
    """
    f = np.asarray(field, dtype=float)
    fxx = np.empty_like(f)
    fxx[1:-1, :] = f[2:, :] - 2.0 * f[1:-1, :] + f[:-2, :]
    fxx[0, :] = fxx[1, :]
    fxx[-1, :] = fxx[-2, :]
    fyy = np.empty_like(f)
    fyy[:, 1:-1] = f[:, 2:] - 2.0 * f[:, 1:-1] + f[:, :-2]
    fyy[:, 0] = fyy[:, 1]
    fyy[:, -1] = fyy[:, -2]
    return (fxx + fyy) / (d * d)


# Boundary bookkeeping shared by the extractor and the inverse-side assembly.
EDGE_WEST, EDGE_EAST, EDGE_SOUTH, EDGE_NORTH = 0, 1, 2, 3
EDGE_NAMES = ("west", "east", "south", "north")


def boundary_nodes(n: int):
    """Canonical ordering of the boundary nodes of an n x n grid.

    Returns (edges, ii, jj) int arrays of length 4n - 4.  Corners belong to
    the west/east edges and appear exactly once.  Order: west (all j), east
    (all j), south (interior i), north (interior i).
    """
    edges, ii, jj = [], [], []
    js = np.arange(n)
    edges.append(np.full(n, EDGE_WEST)); ii.append(np.zeros(n, int)); jj.append(js)
    edges.append(np.full(n, EDGE_EAST)); ii.append(np.full(n, n - 1)); jj.append(js)
    ins = np.arange(1, n - 1)
    edges.append(np.full(n - 2, EDGE_SOUTH)); ii.append(ins); jj.append(np.zeros(n - 2, int))
    edges.append(np.full(n - 2, EDGE_NORTH)); ii.append(ins); jj.append(np.full(n - 2, n - 1))
    return (np.concatenate(edges), np.concatenate(ii), np.concatenate(jj))


def edge_normal_axis(edges: np.ndarray) -> np.ndarray:
    """0 where the outward normal is along x, 1 where along y."""
    return np.where((edges == EDGE_WEST) | (edges == EDGE_EAST), 0, 1)


def edge_normal_sign(edges: np.ndarray) -> np.ndarray:
    """Sign of the outward normal component along its axis."""
    return np.where((edges == EDGE_EAST) | (edges == EDGE_NORTH), 1.0, -1.0)


def solve_forward(c_field, f_field, grid: SpaceGrid, tgrid: TimeGrid, source=None):
    """Implicit-Euler evolution of u_t = lap(u) + c u, u(0) = f, u|edge = f|edge.

    c_field, f_field: (n, n) nodal fields on `grid`.  `source`, if given, is
    a callable source(X, Y, t) evaluated on the interior mesh and added to
    the right-hand side of the equation.  Returns the full history as an
    array of shape (n_t, n, n); row 0 is the initial state.
    """
    c = np.asarray(c_field, dtype=float)
    f = np.asarray(f_field, dtype=float)
    n = grid.n
    if c.shape != (n, n) or f.shape != (n, n):
        raise ValueError(
            f"fields must have shape ({n}, {n}); got {c.shape} and {f.shape}"
        )
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(f))):
        raise ValueError("coefficient and initial fields must be finite")

    ni = n - 2
    d = grid.d
    dt = tgrid.d_t
    one = np.ones(ni)
    lap1d = sparse.diags(
        [one[:-1], -2.0 * one, one[:-1]], offsets=[-1, 0, 1], format="csr"
    ) / (d * d)
    eye = sparse.identity(ni, format="csr")
    lap = sparse.kron(eye, lap1d, format="csr") + sparse.kron(lap1d, eye, format="csr")
    c_int = c[1:-1, 1:-1].ravel()
    A = sparse.identity(ni * ni, format="csr") - dt * (lap + sparse.diags(c_int))
    solver = splu(A.tocsc())

    # Dirichlet neighbors of interior nodes enter the right-hand side.
    bc = np.zeros((ni, ni))
    bc[0, :] += f[0, 1:-1]
    bc[-1, :] += f[-1, 1:-1]
    bc[:, 0] += f[1:-1, 0]
    bc[:, -1] += f[1:-1, -1]
    rhs_bc = (dt / (d * d)) * bc.ravel()

    if source is not None:
        X, Y = grid.meshgrid()
        Xi, Yi = X[1:-1, 1:-1], Y[1:-1, 1:-1]

    u = np.empty((tgrid.n_t, n, n))
    u[0] = f
    u_int = f[1:-1, 1:-1].ravel().copy()
    for l in range(1, tgrid.n_t):
        rhs = u_int + rhs_bc
        if source is not None:
            rhs = rhs + dt * np.asarray(source(Xi, Yi, tgrid.nodes[l]), float).ravel()
        u_int = solver.solve(rhs)
        u[l] = f  # boundary ring stays at the Dirichlet values
        u[l, 1:-1, 1:-1] = u_int.reshape(ni, ni)
    return u


class _BilinearSampler:
    """Bilinear interpolation of (n, n) nodal fields at fixed points."""

    def __init__(self, grid: SpaceGrid, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        lo, hi = grid.coords[0], grid.coords[-1]
        if x.min() < lo or x.max() > hi or y.min() < lo or y.max() > hi:
            raise ValueError("sample points fall outside the grid")
        i = np.clip(((x - lo) / grid.d).astype(int), 0, grid.n - 2)
        j = np.clip(((y - lo) / grid.d).astype(int), 0, grid.n - 2)
        fx = (x - grid.coords[i]) / grid.d
        fy = (y - grid.coords[j]) / grid.d
        self._i, self._j = i, j
        self._w00 = (1 - fx) * (1 - fy)
        self._w10 = fx * (1 - fy)
        self._w01 = (1 - fx) * fy
        self._w11 = fx * fy

    def __call__(self, field: np.ndarray) -> np.ndarray:
        i, j = self._i, self._j
        return (
            self._w00 * field[i, j]
            + self._w10 * field[i + 1, j]
            + self._w01 * field[i, j + 1]
            + self._w11 * field[i + 1, j + 1]
        )


@dataclass(frozen=True)
class BoundaryTimeSeries:
    """Dirichlet/Neumann traces on the target boundary over time.

    dirichlet/neumann have shape (n_boundary_nodes, n_t); node order follows
    boundary_nodes(grid.n).  Neumann values use the outward normal of each
    node's edge (corner nodes carry their west/east edge's normal).
    """

    grid: SpaceGrid
    tgrid: TimeGrid
    edges: np.ndarray
    ii: np.ndarray
    jj: np.ndarray
    xx: np.ndarray
    yy: np.ndarray
    dirichlet: np.ndarray
    neumann: np.ndarray


def extract_cauchy(u_stack, fine_grid: SpaceGrid, target_grid: SpaceGrid,
                   tgrid: TimeGrid) -> BoundaryTimeSeries:
    """Sample Cauchy data on the target boundary from a fine-grid history.

    The Dirichlet trace is bilinearly interpolated.  The Neumann trace is the
    appropriate component of the fine-grid gradient (central differences
    inside, one-sided at the fine edges, which the target never touches),
    bilinearly interpolated and signed by the outward normal.
    """
    u_stack = np.asarray(u_stack)
    if not (target_grid.R < fine_grid.R):
        raise ValueError(
            f"target half-width {target_grid.R} must lie strictly inside "
            f"the simulation half-width {fine_grid.R}"
        )
    if u_stack.shape != (tgrid.n_t, fine_grid.n, fine_grid.n):
        raise ValueError(f"history shape {u_stack.shape} does not match grids")

    edges, ii, jj = boundary_nodes(target_grid.n)
    xx = target_grid.coords[ii]
    yy = target_grid.coords[jj]
    sampler = _BilinearSampler(fine_grid, xx, yy)

    axis = edge_normal_axis(edges)
    sign = edge_normal_sign(edges)
    n_b = edges.size
    F = np.empty((n_b, tgrid.n_t))
    G = np.empty((n_b, tgrid.n_t))
    for l in range(tgrid.n_t):
        u = u_stack[l]
        F[:, l] = sampler(u)
        dux = np.gradient(u, fine_grid.d, axis=0)
        duy = np.gradient(u, fine_grid.d, axis=1)
        gx = sampler(dux)
        gy = sampler(duy)
        G[:, l] = sign * np.where(axis == 0, gx, gy)
    for a in (edges, ii, jj, xx, yy, F, G):
        a.flags.writeable = False
    return BoundaryTimeSeries(
        grid=target_grid, tgrid=tgrid, edges=edges, ii=ii, jj=jj,
        xx=xx, yy=yy, dirichlet=F, neumann=G,
    )


def dump_series_csv(series: BoundaryTimeSeries, path) -> None:
    """Long-format CSV: edge,node,x,y,t,dirichlet,neumann (+ header comment)."""
    n_b, n_t = series.dirichlet.shape
    with open(path, "w") as fh:
        fh.write(
            f"# R={series.grid.R} n={series.grid.n} T={series.tgrid.T} "
            f"n_t={series.tgrid.n_t}\n"
        )
        fh.write("edge,node,x,y,t,dirichlet,neumann\n")
        for b in range(n_b):
            name = EDGE_NAMES[series.edges[b]]
            x, y = series.xx[b], series.yy[b]
            for l in range(n_t):
                fh.write(
                    f"{name},{b},{x:.17g},{y:.17g},{series.tgrid.nodes[l]:.17g},"
                    f"{series.dirichlet[b, l]:.17g},{series.neumann[b, l]:.17g}\n"
                )


def load_series_csv(path) -> BoundaryTimeSeries:
    with open(path) as fh:
        head = fh.readline()
        if not head.startswith("#"):
            raise ValueError("missing header comment line")
        meta = dict(kv.split("=") for kv in head[1:].split())
        fh.readline()  # column names
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    grid = SpaceGrid(R=float(meta["R"]), n=int(meta["n"]))
    tgrid = TimeGrid(T=float(meta["T"]), n_t=int(meta["n_t"]))
    edges, ii, jj = boundary_nodes(grid.n)
    n_b = edges.size
    F = np.full((n_b, tgrid.n_t), np.nan)
    G = np.full((n_b, tgrid.n_t), np.nan)
    t_of = {f"{t:.17g}": l for l, t in enumerate(tgrid.nodes)}
    for name, b, x, y, t, fv, gv in rows:
        b = int(b)
        l = t_of[t]
        F[b, l] = float(fv)
        G[b, l] = float(gv)
    if np.isnan(F).any() or np.isnan(G).any():
        raise ValueError("series file does not cover every node/time pair")
    xx = grid.coords[ii]
    yy = grid.coords[jj]
    return BoundaryTimeSeries(
        grid=grid, tgrid=tgrid, edges=edges, ii=ii, jj=jj,
        xx=xx, yy=yy, dirichlet=F, neumann=G,
    )
