"""Tests for the orthonormal time basis and its stiffness matrix."""

import math

import numpy as np
import pytest

from heatcoef.time_basis import (
    MAX_ORDER,
    QuadRule,
    TimeGrid,
    build_basis,
    build_raw_functions,
    composite_gauss_rule,
    dump_basis_csv,
    orthonormalize,
    stiffness_matrix,
)

T = 0.3


def test_time_grid_basics():
    tg = TimeGrid(T=T, n_t=100)
    assert tg.nodes.shape == (100,)
    assert tg.nodes[0] == 0.0
    assert tg.nodes[-1] == pytest.approx(T, abs=1e-15)
    assert tg.d_t == pytest.approx(T / 99)


@pytest.mark.parametrize("bad", [dict(T=T, n_t=1), dict(T=0.0, n_t=5),
                                 dict(T=-1.0, n_t=5)])
def test_time_grid_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        TimeGrid(**bad)


def test_quadrature_integrates_monomials_exactly():
    rule = composite_gauss_rule(T, n_sub=8, n_gl=8)
    for k in range(0, 12):
        got = rule.integrate(rule.nodes**k)
        assert got == pytest.approx(T ** (k + 1) / (k + 1), rel=1e-13)


def test_raw_functions_match_closed_form():
    times = np.linspace(0.0, T, 7)
    raw = build_raw_functions(T, 4, times)
    shifted = times - T / 2
    for k in range(4):
        expect = shifted**k * np.exp(shifted)
        assert np.allclose(raw[k], expect, rtol=0, atol=1e-15)


def test_raw_functions_reject_bad_order():
    with pytest.raises(ValueError):
        build_raw_functions(T, 0, np.linspace(0, T, 5))
    with pytest.raises(ValueError):
        build_raw_functions(T, MAX_ORDER + 1, np.linspace(0, T, 5))


def test_orthonormality_module_rule():
    basis = build_basis(T, 25)
    w = basis.rule.weights
    gram = (basis.values * w) @ basis.values.T
    assert np.abs(gram - np.eye(25)).max() <= 1e-10


def test_orthonormality_independent_rule():
    # re-integrate the same member values on a finer, independently built rule
    basis = build_basis(T, 25)
    fine = composite_gauss_rule(T, n_sub=1024, n_gl=10)
    vals = basis.evaluate(fine.nodes)
    gram = (vals * fine.weights) @ vals.T
    assert np.abs(gram - np.eye(25)).max() <= 1e-10


def test_stiffness_unit_upper_triangular():
    basis = build_basis(T, 25)
    s = basis.stiffness
    assert np.abs(np.diag(s) - 1.0).max() <= 1e-8
    lower = np.tril(s, k=-1)
    assert np.abs(lower).max() <= 1e-8


def test_stiffness_integration_by_parts_identity():
    # int psi_n' psi_m + int psi_m' psi_n telescopes to the boundary values,
    # independent of how the integrals were computed (measured ~3e-11)
    basis = build_basis(T, 25)
    s = basis.stiffness
    boundary = (np.outer(basis.at_final, basis.at_final)
                - np.outer(basis.at_zero, basis.at_zero))
    assert np.abs(s + s.T - boundary).max() <= 1e-9


def test_first_member_closed_form():
    # the first raw function e^(t - T/2) has norm sqrt(sinh(T)), so the
    # normalized member at t = 0 is e^(-T/2) / sqrt(sinh(T))
    basis = build_basis(T, 25)
    expect = math.exp(-T / 2) / math.sqrt(math.sinh(T))
    assert basis.at_zero[0] == pytest.approx(expect, abs=1e-12)
    assert basis.at_final[0] == pytest.approx(
        math.exp(T / 2) / math.sqrt(math.sinh(T)), abs=1e-12)


def test_quadrature_refinement_stability():
    coarse = build_basis(T, 25, n_sub=256)
    fine = build_basis(T, 25, n_sub=512)
    assert np.abs(coarse.stiffness - fine.stiffness).max() <= 1e-10


def test_evaluate_reproduces_rule_values():
    basis = build_basis(T, 10)
    vals = basis.evaluate(basis.rule.nodes)
    assert np.allclose(vals, basis.values, rtol=0, atol=1e-12)


def test_evaluate_derivative_matches_finite_differences():
    basis = build_basis(T, 10)
    times = np.linspace(0.02, T - 0.02, 9)
    h = 1e-6
    derivs = basis.evaluate_derivative(times)
    fd = (basis.evaluate(times + h) - basis.evaluate(times - h)) / (2 * h)
    assert np.abs(derivs - fd).max() <= 1e-6


def test_evaluate_both_consistency():
    basis = build_basis(T, 8)
    times = np.linspace(0.0, T, 11)
    vals, derivs = basis.evaluate_both(times)
    assert np.allclose(vals, basis.evaluate(times), rtol=0, atol=0)
    assert np.allclose(derivs, basis.evaluate_derivative(times), rtol=0, atol=0)


def test_endpoint_attributes_match_evaluation():
    basis = build_basis(T, 12)
    ends = basis.evaluate(np.array([0.0, T]))
    assert np.allclose(basis.at_zero, ends[:, 0], rtol=0, atol=1e-13)
    assert np.allclose(basis.at_final, ends[:, 1], rtol=0, atol=1e-13)


def test_stiffness_matrix_free_function_agrees():
    basis = build_basis(T, 6)
    s = stiffness_matrix(basis.values, basis.derivs, basis.rule.weights)
    assert np.array_equal(s, basis.stiffness)


def test_orthonormalize_rejects_low_rank_input():
    rule = composite_gauss_rule(T, n_sub=16, n_gl=4)
    raw = build_raw_functions(T, 3, rule)
    raw[2] = raw[1]  # duplicate direction
    from heatcoef.time_basis import RankDeficiencyError
    with pytest.raises(RankDeficiencyError):
        orthonormalize(raw, rule, T)


def test_dump_basis_csv_roundtrip(tmp_path):
    basis = build_basis(T, 5)
    times = np.linspace(0.0, T, 20)
    path = tmp_path / "basis.csv"
    dump_basis_csv(basis, times, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",") == ["t"] + [f"mode{k}" for k in range(1, 6)]
    assert len(lines) == 21
    back = np.loadtxt(path, delimiter=",", skiprows=1)
    assert np.allclose(back[:, 0], times)
    assert np.allclose(back[:, 1:], basis.evaluate(times).T, atol=1e-15)
