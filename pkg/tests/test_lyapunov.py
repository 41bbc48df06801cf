# tests/test_lyapunov.py
from __future__ import annotations

import numpy as np
import pytest

from gridmin.errors import NotHurwitzError
from gridmin.lyapunov import (
    LyapunovProblem,
    check_hurwitz,
    lyapunov_residual,
    solve_lyapunov,
)


def _random_problem(rng: np.random.Generator, n: int = 7) -> LyapunovProblem:
    A = rng.normal(size=(n, n))
    A -= (np.max(np.linalg.eigvals(A).real) + 1.0) * np.eye(n)
    K = rng.normal(size=(n, 3))
    return LyapunovProblem(A, K @ K.T)


@pytest.mark.parametrize("method", ["schur", "kron"])
def test_residual_is_small(rng, method: str) -> None:
    prob = _random_problem(rng)

    X = solve_lyapunov(prob, method=method)

    bound = 1e-10 * max(1.0, np.linalg.norm(prob.Q))
    assert lyapunov_residual(prob.A, prob.Q, X) <= bound
    np.testing.assert_array_equal(X, X.T)


def test_methods_agree(rng) -> None:
    prob = _random_problem(rng)

    np.testing.assert_allclose(
        solve_lyapunov(prob, method="schur"),
        solve_lyapunov(prob, method="kron"),
        rtol=1e-8,
        atol=1e-10,
    )


def test_solution_is_positive_semidefinite(rng) -> None:
    X = solve_lyapunov(_random_problem(rng))

    assert np.linalg.eigvalsh(X).min() >= -1e-10


def test_scaled_identity_closed_form() -> None:
    # A = -c I gives X = Q / (2c)
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])

    X = solve_lyapunov(LyapunovProblem(-3.0 * np.eye(2), Q))

    np.testing.assert_allclose(X, Q / 6.0, rtol=1e-12)


def test_damped_oscillator_variance() -> None:
    # z'' + a z' + b z = s xi has stationary Var z = s^2 / (2 a b)
    a, b, s = 0.7, 3.0, 1.3
    A = np.array([[0.0, 1.0], [-b, -a]])
    K = np.array([[0.0], [s]])

    X = solve_lyapunov(LyapunovProblem(A, K @ K.T))

    assert X[0, 0] == pytest.approx(s**2 / (2.0 * a * b), rel=1e-12)
    assert X[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_not_hurwitz_is_rejected() -> None:
    A = np.array([[0.1, 1.0], [0.0, -1.0]])

    with pytest.raises(NotHurwitzError):
        check_hurwitz(A)
    with pytest.raises(NotHurwitzError):
        solve_lyapunov(LyapunovProblem(A, np.eye(2)))


def test_problem_validation() -> None:
    with pytest.raises(ValueError):
        LyapunovProblem(-np.eye(2), np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        LyapunovProblem(-np.eye(2), np.eye(3))
    with pytest.raises(ValueError):
        solve_lyapunov(LyapunovProblem(-np.eye(2), np.eye(2)), method="lu")


def _scaled_problem(rng: np.random.Generator, n: int) -> LyapunovProblem:
    A = rng.normal(size=(n, n)) / np.sqrt(n)
    A -= (np.max(np.linalg.eigvals(A).real) + 1.0) * np.eye(n)
    K = rng.normal(size=(n, max(1, n // 3)))
    return LyapunovProblem(A, K @ K.T)


def test_random_systems_up_to_dimension_30(rng) -> None:
    for n in rng.integers(2, 31, size=50):
        prob = _scaled_problem(rng, int(n))
        bound = 1e-10 * max(1.0, np.linalg.norm(prob.Q))

        X_schur = solve_lyapunov(prob, method="schur")
        X_kron = solve_lyapunov(prob, method="kron")

        assert lyapunov_residual(prob.A, prob.Q, X_schur) <= bound
        assert lyapunov_residual(prob.A, prob.Q, X_kron) <= bound
        assert np.linalg.norm(X_schur - X_kron) <= 1e-8 * np.linalg.norm(X_kron)


def test_reduced_two_ring_system(ctx) -> None:
    red = ctx.evaluate([23.0, 19.0, 24.0]).reduced
    prob = LyapunovProblem(red.J_d, red.K_d @ red.K_d.T)

    X_schur = solve_lyapunov(prob, method="schur")
    X_kron = solve_lyapunov(prob, method="kron")

    assert lyapunov_residual(prob.A, prob.Q, X_schur) <= 1e-10 * max(1.0, np.linalg.norm(prob.Q))
    assert np.linalg.norm(X_schur - X_kron) <= 1e-8 * np.linalg.norm(X_kron)


def test_solution_is_linear_in_q(rng) -> None:
    first = _scaled_problem(rng, 12)
    second = _scaled_problem(rng, 12)
    A = first.A
    Q2 = second.Q

    X1 = solve_lyapunov(first)
    X2 = solve_lyapunov(LyapunovProblem(A, Q2))
    X = solve_lyapunov(LyapunovProblem(A, 2.0 * first.Q - 0.5 * Q2))

    np.testing.assert_allclose(X, 2.0 * X1 - 0.5 * X2, rtol=0, atol=1e-9 * np.abs(X).max())
