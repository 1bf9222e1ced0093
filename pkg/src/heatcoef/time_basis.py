"""Orthonormal exponential-polynomial time basis on [0, T].

The raw family is

    phi_k(t) = (t - T/2)**(k - 1) * exp(t - T/2),    k = 1, 2, ...

i.e. exp(t - T/2) times the powers of the shifted time variable.
Orthonormalizing the first N members in L2(0, T) gives a basis whose
derivative-overlap ("stiffness") matrix

    stiffness[m, n] = integral_0^T  b_n'(t) * b_m(t) dt

has unit diagonal and zero strict lower triangle, so every truncation of it
is invertible.  Derivatives stay inside the span because

    phi_k' = (k - 1) * phi_{k-1} + phi_k      (phi_0 := 0),

which is also the exact rule used to differentiate expansion coefficients;
nothing in this module differentiates numerically.

Numerical note: the raw powers become numerically dependent fast, and their
expansion coefficients grow so large that re-expanding a high-order member
through them cancels catastrophically (measured: ~2e-7 value and ~4e-5
derivative error by order 25 at T = 0.3, far above the 1e-10/1e-8 quality
this module must deliver).  The family is closed under multiplication by the
shifted time variable, so the orthonormalization walks that multiplication
recurrence (Lanczos ordering) with one reorthogonalization pass and keeps an
exact record of the removed components; evaluation at arbitrary times and
all derivatives replay that record instead of touching raw coefficients,
which keeps every mode at machine accuracy.

A finished TimeBasis is immutable and safe to share between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MAX_ORDER",
    "RankDeficiencyError",
    "TimeGrid",
    "QuadRule",
    "composite_gauss_rule",
    "build_raw_functions",
    "orthonormalize",
    "derivative_coeffs",
    "stiffness_matrix",
    "TimeBasis",
    "build_basis",
    "dump_basis_csv",
]

# Beyond this order the shifted powers leave double precision headroom for
# plausible T (underflow of (T/2)**k against exp(T/2) overflow).
MAX_ORDER = 64

_BREAKDOWN_RTOL = 1e-13


class RankDeficiencyError(RuntimeError):
    """Orthonormalization hit a numerically dependent member."""

    def __init__(self, index: int, norm: float):
        super().__init__(
            f"basis member {index} has near-zero residual norm {norm:.3e}; "
            "the sampled family is rank deficient at that order"
        )
        self.index = index
        self.norm = norm


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid t_l = l * d_t covering [0, T]."""

    T: float
    n_t: int
    d_t: float = field(init=False)
    nodes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_t < 2:
            raise ValueError(f"need at least two time nodes, got {self.n_t}")
        if not (self.T > 0):
            raise ValueError(f"final time must be positive, got {self.T}")
        object.__setattr__(self, "d_t", self.T / (self.n_t - 1))
        nodes = np.linspace(0.0, self.T, self.n_t)
        nodes.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)


@dataclass(frozen=True)
class QuadRule:
    """Composite Gauss-Legendre rule on [0, T]."""

    nodes: np.ndarray
    weights: np.ndarray

    def integrate(self, samples) -> float:
        return float(np.dot(np.asarray(samples), self.weights))


def composite_gauss_rule(T: float, n_sub: int = 256, n_gl: int = 8) -> QuadRule:
    """Gauss-Legendre rule with n_gl points on each of n_sub equal pieces of [0, T]."""
    if not (T > 0):
        raise ValueError(f"final time must be positive, got {T}")
    x, w = np.polynomial.legendre.leggauss(n_gl)
    edges = np.linspace(0.0, T, n_sub + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1:] - edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    nodes.flags.writeable = False
    weights.flags.writeable = False
    return QuadRule(nodes, weights)


def _as_times(times) -> np.ndarray:
    nodes = getattr(times, "nodes", times)
    return np.atleast_1d(np.asarray(nodes, dtype=float))


def build_raw_functions(T: float, order: int, times) -> np.ndarray:
    """Sample phi_1..phi_order at the given times; rows are members.

    `times` may be an array, a TimeGrid, or a QuadRule.
    """
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if order > MAX_ORDER:
        raise ValueError(
            f"order {order} exceeds {MAX_ORDER}; the shifted powers "
            "(t - T/2)**(k-1) lose double-precision headroom beyond that"
        )
    t = _as_times(times)
    s = t - 0.5 * T
    powers = s[None, :] ** np.arange(order)[:, None]
    return powers * np.exp(s)[None, :]


def orthonormalize(raw: np.ndarray, rule: QuadRule, T: float):
    """Gram-Schmidt orthonormalization of the raw family on a quadrature rule.

    Returns (coeffs, values, rec_proj, rec_next, first_coeff):

    - coeffs: lower-triangular matrix, row n holds the expansion of member n
      over phi_1..phi_{n+1};
    - values: member samples at rule.nodes, orthonormal in the discrete
      weighted inner product;
    - rec_proj / rec_next / first_coeff: exact bookkeeping of the
      multiplication recurrence, used for stable evaluation anywhere.

    The projections run along the multiplication-by-(t - T/2) recurrence that
    generates the family, with one reorthogonalization pass per member.  Rows
    of `raw` beyond the first only fix the requested order; the recurrence
    regenerates their span.  Raises RankDeficiencyError (1-based offending
    index) if a member's residual norm collapses, e.g. when the rule has too
    few nodes to support the order.
    """
    raw = np.asarray(raw, dtype=float)
    n, nq = raw.shape
    if nq != rule.nodes.size:
        raise ValueError(
            f"raw samples have {nq} columns but the rule has {rule.nodes.size} nodes"
        )
    w = rule.weights
    sigma = (2.0 * rule.nodes - T) / T  # shifted time variable scaled to [-1, 1]

    values = np.empty((n, nq))
    coeffs = np.zeros((n, n))
    rec_proj = np.zeros((n, n))
    rec_next = np.zeros(max(n - 1, 0))

    nrm0 = np.sqrt(np.dot(w, raw[0] * raw[0]))
    if not np.isfinite(nrm0) or nrm0 <= 0.0:
        raise RankDeficiencyError(1, nrm0)
    values[0] = raw[0] / nrm0
    coeffs[0, 0] = 1.0 / nrm0
    first_coeff = 1.0 / nrm0

    scale = 2.0 / T  # sigma * phi_k = scale * phi_{k+1}
    for k in range(n - 1):
        y = sigma * values[k]
        ref = np.sqrt(np.dot(w, y * y))
        cy = np.zeros(n)
        cy[1 : k + 2] = scale * coeffs[k, : k + 1]
        # Gram-Schmidt projection plus one reorthogonalization pass.
        for _ in range(2):
            r = values[: k + 1] @ (w * y)
            y -= r @ values[: k + 1]
            cy -= r @ coeffs[: k + 1]
            rec_proj[: k + 1, k] += r
        b = np.sqrt(np.dot(w, y * y))
        if not np.isfinite(b) or b <= _BREAKDOWN_RTOL * ref:
            raise RankDeficiencyError(k + 2, b)
        values[k + 1] = y / b
        coeffs[k + 1] = cy / b
        rec_next[k] = b

    return coeffs, values, rec_proj, rec_next, first_coeff


def derivative_coeffs(coeffs: np.ndarray) -> np.ndarray:
    """Expansion coefficients of the member derivatives over the raw family.

    Applies phi_k' = (k - 1) phi_{k-1} + phi_k exactly to each row.  The
    result is again lower triangular.  (Like `coeffs` itself, re-expanding
    high-order members through these coefficients is ill-conditioned; use
    TimeBasis.evaluate_derivative for accurate values.)
    """
    coeffs = np.asarray(coeffs)
    out = coeffs.copy()
    k = np.arange(1, coeffs.shape[1])
    out[:, :-1] += coeffs[:, 1:] * k[None, :]
    return out


def _evaluate_members(rec_proj, rec_next, first_coeff, T, times, with_derivative):
    t = _as_times(times)
    n = rec_proj.shape[0]
    s = t - 0.5 * T
    sigma = 2.0 * s / T
    e = np.exp(s)
    vals = np.empty((n, t.size))
    vals[0] = first_coeff * e
    dvals = None
    if with_derivative:
        dvals = np.empty((n, t.size))
        dvals[0] = vals[0]
    dsigma = 2.0 / T
    for k in range(n - 1):
        acc = sigma * vals[k] - rec_proj[: k + 1, k].T @ vals[: k + 1]
        vals[k + 1] = acc / rec_next[k]
        if with_derivative:
            dacc = (
                dsigma * vals[k]
                + sigma * dvals[k]
                - rec_proj[: k + 1, k].T @ dvals[: k + 1]
            )
            dvals[k + 1] = dacc / rec_next[k]
    return vals, dvals


def stiffness_matrix(values: np.ndarray, derivs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """stiffness[m, n] = discrete integral of member_n' * member_m."""
    return (values * weights[None, :]) @ derivs.T


@dataclass(frozen=True)
class TimeBasis:
    """Orthonormalized time basis with its quadrature rule and couplings.

    Immutable; all arrays are read-only views.
    """

    T: float
    n_modes: int
    coeffs: np.ndarray      # (N, N) lower triangular over the raw family
    values: np.ndarray      # (N, Q) member samples on the rule
    derivs: np.ndarray      # (N, Q) exact member derivative samples
    at_zero: np.ndarray     # member values at t = 0
    at_final: np.ndarray    # member values at t = T
    stiffness: np.ndarray   # (N, N) derivative-overlap matrix
    rule: QuadRule
    rec_proj: np.ndarray
    rec_next: np.ndarray
    first_coeff: float

    def evaluate(self, times) -> np.ndarray:
        """Member values at arbitrary times, shape (N, len(times))."""
        vals, _ = _evaluate_members(
            self.rec_proj, self.rec_next, self.first_coeff, self.T, times, False
        )
        return vals

    def evaluate_derivative(self, times) -> np.ndarray:
        """Exact member derivatives at arbitrary times, shape (N, len(times))."""
        _, dvals = _evaluate_members(
            self.rec_proj, self.rec_next, self.first_coeff, self.T, times, True
        )
        return dvals

    def evaluate_both(self, times):
        return _evaluate_members(
            self.rec_proj, self.rec_next, self.first_coeff, self.T, times, True
        )


def _freeze(*arrays):
    for a in arrays:
        a.flags.writeable = False


def build_basis(T: float, n_modes: int, n_sub: int = 256, n_gl: int = 8) -> TimeBasis:
    """Construct the orthonormal basis of the first n_modes raw members."""
    rule = composite_gauss_rule(T, n_sub=n_sub, n_gl=n_gl)
    raw = build_raw_functions(T, n_modes, rule)
    coeffs, values, rec_proj, rec_next, first_coeff = orthonormalize(raw, rule, T)
    _, derivs = _evaluate_members(rec_proj, rec_next, first_coeff, T, rule.nodes, True)
    stiff = stiffness_matrix(values, derivs, rule.weights)
    ends, dum = _evaluate_members(
        rec_proj, rec_next, first_coeff, T, np.array([0.0, T]), False
    )
    at_zero = np.ascontiguousarray(ends[:, 0])
    at_final = np.ascontiguousarray(ends[:, 1])
    _freeze(coeffs, values, derivs, stiff, at_zero, at_final, rec_proj, rec_next)
    return TimeBasis(
        T=T,
        n_modes=n_modes,
        coeffs=coeffs,
        values=values,
        derivs=derivs,
        at_zero=at_zero,
        at_final=at_final,
        stiffness=stiff,
        rule=rule,
        rec_proj=rec_proj,
        rec_next=rec_next,
        first_coeff=first_coeff,
    )


def dump_basis_csv(basis: TimeBasis, times, path) -> None:
    """Debug dump: member values at the given times, one column per member."""
    t = _as_times(times)
    vals = basis.evaluate(t)
    header = "t," + ",".join(f"mode{n}" for n in range(1, basis.n_modes + 1))
    table = np.column_stack([t, vals.T])
    np.savetxt(path, table, delimiter=",", header=header, comments="")
