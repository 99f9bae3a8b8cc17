import ast
import inspect

import numpy as np
import pytest

import certilip.oracle as oracle_mod
from certilip.errors import ValidationError
from certilip.oracle import (
    finite_diff_gradient,
    jacobi_eigenvalues,
    oracle_ball_max_gradient,
    oracle_box_l1,
    oracle_box_linf,
    oracle_box_qp,
    oracle_spectral_norm,
)

from factories import random_kernel, random_linear, random_nn, random_problem


def test_oracle_shares_no_code_with_checked_modules():
    tree = ast.parse(inspect.getsource(oracle_mod))
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            imported.add(node.module)
    assert "attack" not in imported and "certify" not in imported
    assert not {m for m in imported if m and m.endswith(("attack", "certify"))}


def test_qp_examples():
    r = oracle_box_qp([3, 1], -2.0, [0.5, 0.5])
    np.testing.assert_allclose(r.certificate["delta"], [-0.5, -0.5], atol=1e-15)
    assert r.value == pytest.approx(np.sqrt(0.5), rel=1e-15)
    r = oracle_box_qp([2.0], -1.0, [0.9])
    np.testing.assert_allclose(r.certificate["delta"], [-0.5], atol=1e-15)
    assert not oracle_box_qp([1, 0], -2.0, [0.5, 0.5]).feasible


def test_l1_examples():
    r = oracle_box_l1([3, 1], -1.0, [0.5, 0.5])
    np.testing.assert_allclose(r.certificate["delta"], [-1 / 3, 0.0], atol=1e-15)
    assert oracle_box_l1([1, 1], 0.0, [0.5, 0.5]).value == 0.0
    assert not oracle_box_l1([1, -1], -1.2, [0.9, 0.9]).feasible


def test_linf_examples():
    assert oracle_box_linf([3, 1], -1.0, [0.5, 0.5]).value == pytest.approx(0.25, abs=1e-12)
    assert oracle_box_linf([1], -0.5, [0.5]).value == pytest.approx(0.5, abs=1e-12)
    assert oracle_box_linf([1, 1], 0.0, [0.2, 0.2]).value == 0.0


def test_certificates_reproduce_values():
    rng = np.random.default_rng(0)
    for _ in range(200):
        v, gap, x = random_problem(rng, int(rng.integers(1, 6)))
        for fn, p in ((oracle_box_qp, 2), (oracle_box_l1, 1)):
            r = fn(v, gap, x)
            if not r.feasible:
                continue
            delta = r.certificate["delta"]
            assert abs(np.linalg.norm(delta, ord=p) - r.value) <= 1e-12
            assert v @ delta <= gap + 1e-9 * max(1, abs(gap))
            assert np.all(x + delta >= -1e-12) and np.all(x + delta <= 1 + 1e-12)


def test_enumeration_guard():
    with pytest.raises(ValidationError):
        oracle_box_qp(np.ones(9), -1.0, np.full(9, 0.5))
    with pytest.raises(ValidationError):
        oracle_box_l1(np.ones(9), -1.0, np.full(9, 0.5))
    # the bisection oracle has no dimension cap
    assert oracle_box_linf(np.ones(50), -1.0, np.full(50, 0.5)).value == pytest.approx(0.02, abs=1e-12)


def test_ball_max_at_zero_radius():
    rng = np.random.default_rng(1)
    for m in (random_linear(rng), random_kernel(rng), random_nn(rng)):
        x = rng.random(m.n_features)
        exact = np.linalg.norm(m.input_gradient(x, 1) - m.input_gradient(x, 0))
        assert oracle_ball_max_gradient(m, x, 1, 0, 0.0, 50).value == pytest.approx(exact, rel=1e-12)


def test_ball_max_monotone_in_budget():
    rng = np.random.default_rng(2)
    m = random_nn(rng)
    x = rng.random(4)
    vals = [oracle_ball_max_gradient(m, x, 2, 0, 0.5, n, seed=3).value for n in (10, 100, 1000, 5000)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_ball_max_certificate_in_ball():
    rng = np.random.default_rng(4)
    m = random_kernel(rng)
    x = rng.random(3)
    r = oracle_ball_max_gradient(m, x, 1, 2, 0.3, 2000)
    assert np.linalg.norm(r.certificate - x) <= 0.3 + 1e-12
    g = m.input_gradient(r.certificate, 1) - m.input_gradient(r.certificate, 2)
    assert np.linalg.norm(g) == pytest.approx(r.value, rel=1e-12)
    with pytest.raises(ValidationError):
        oracle_ball_max_gradient(m, x, 1, 2, 0.3, 0)


def test_finite_differences():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    x = np.array([0.3, -0.7])
    g = finite_diff_gradient(lambda z: 0.5 * z @ A @ z, x, 1e-3)
    np.testing.assert_allclose(g, A @ x, atol=1e-10)
    with pytest.raises(ValidationError):
        finite_diff_gradient(lambda z: 0.0, x, 0.0)


def test_jacobi_eigenvalues():
    rng = np.random.default_rng(5)
    M = rng.standard_normal((8, 8))
    S = M + M.T
    np.testing.assert_allclose(jacobi_eigenvalues(S), np.linalg.eigvalsh(S), atol=1e-10)
    assert oracle_spectral_norm(np.diag([3.0, -4.0])).value == pytest.approx(4.0, rel=1e-14)
