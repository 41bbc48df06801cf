from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import linalg

from gridmin.errors import LyapunovResidualError, NotHurwitzError

logger = logging.getLogger(__name__)

HURWITZ_MARGIN = 1e-10
RESIDUAL_RTOL = 1e-10
SYMMETRY_RTOL = 1e-12
REFINEMENT_STEPS = 2


@dataclass(frozen=True, eq=False)
class LyapunovProblem:
    """A X + X A^T + Q = 0 with A Hurwitz and Q symmetric."""

    A: NDArray[np.float64]
    Q: NDArray[np.float64]

    def __post_init__(self) -> None:
        A = np.asarray(self.A, dtype=float)
        Q = np.asarray(self.Q, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or Q.shape != A.shape:
            raise ValueError(f"Incompatible shapes A {A.shape}, Q {Q.shape}")
        if np.linalg.norm(Q - Q.T) > SYMMETRY_RTOL * max(1.0, np.linalg.norm(Q)):
            raise ValueError("Right-hand side Q must be symmetric")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Q", Q)


def lyapunov_residual(A: NDArray, Q: NDArray, X: NDArray) -> float:
    return float(np.linalg.norm(A @ X + X @ A.T + Q, "fro"))


def check_hurwitz(A: NDArray, margin: float = HURWITZ_MARGIN) -> None:
    eigs = np.linalg.eigvals(A)
    worst = eigs[np.argmax(eigs.real)]
    if worst.real >= -margin:
        raise NotHurwitzError(complex(worst))


def _solve_kron(A: NDArray, Q: NDArray) -> NDArray:
    # row-major vec: vec(A X) = (A kron I) vec X, vec(X A^T) = (I kron A) vec X
    n = A.shape[0]
    eye = np.eye(n)
    K = np.kron(A, eye) + np.kron(eye, A)
    return np.linalg.solve(K, -Q.reshape(-1)).reshape(n, n)


def _solve_schur(A: NDArray, Q: NDArray) -> NDArray:
    # scipy solves A X + X A^H = Q
    return linalg.solve_continuous_lyapunov(A, -Q)


_SOLVERS = {"schur": _solve_schur, "kron": _solve_kron}


def solve_lyapunov(
    prob: LyapunovProblem,
    method: str = "schur",
    check_stability: bool = True,
    rtol: float = RESIDUAL_RTOL,
) -> NDArray[np.float64]:
    """
    Solve the continuous-time Lyapunov equation of ``prob``.

    :param prob: Problem with Hurwitz A and symmetric Q
    :param method: ``schur`` (Bartels-Stewart) or ``kron`` (dense vectorized solve)
    :param check_stability: Skip the Hurwitz test when the caller already did it for this A
    :param rtol: Residual bound relative to max(1, ||Q||_F)
    :return: Symmetric solution X
    """
    try:
        solver = _SOLVERS[method]
    except KeyError:
        raise ValueError(f"Unknown Lyapunov method '{method}'") from None

    A, Q = prob.A, prob.Q
    if check_stability:
        check_hurwitz(A)

    X = solver(A, Q)
    X = 0.5 * (X + X.T)

    bound = rtol * max(1.0, float(np.linalg.norm(Q, "fro")))
    residual = lyapunov_residual(A, Q, X)
    for _ in range(REFINEMENT_STEPS):
        if residual <= bound:
            break
        # correction E solves A E + E A^T + R = 0 for the current residual R
        R = A @ X + X @ A.T + Q
        X = X + solver(A, 0.5 * (R + R.T))
        X = 0.5 * (X + X.T)
        residual = lyapunov_residual(A, Q, X)
        logger.debug("Lyapunov refinement step, residual %.3e", residual)

    if residual > bound:
        raise LyapunovResidualError(residual, bound)
    return X
