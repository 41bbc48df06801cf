from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, TypeVar

import numpy as np
from numpy.typing import ArrayLike, NDArray

from gridmin.errors import DegenerateSpectrumError, VanishingSigmaError
from gridmin.lyapunov import LyapunovProblem, solve_lyapunov
from gridmin.network import PowerNetwork
from gridmin.objective import (
    EvaluationContext,
    LinearizedSystem,
    check_saturation,
    input_matrix,
    modal_damping,
    modal_decomposition,
    output_matrix,
    scaled_stiffness,
    system_matrix,
)

logger = logging.getLogger(__name__)

DELTA_FD = 1e-4
SPECTRAL_GAP = 1e-6
SIGMA_FLOOR = 1e-12
CASCADE_RTOL = 1e-9
RICHARDSON_RTOL = 1e-3

Triple = Tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]
T = TypeVar("T")


def _sym(X: NDArray) -> NDArray:
    return 0.5 * (X + X.T)


def _diag3(X: NDArray, Y: NDArray, Z: NDArray) -> NDArray:
    """diag(X Y Z^T) without forming the product."""
    return np.einsum("ij,jk,ik->i", X, Y, Z)


# ------------------------------------------------------------------ #
# Taylor coefficients of the building blocks along a direction mu
# ------------------------------------------------------------------ #
def _weight_coefficients(lin: LinearizedSystem, x: NDArray, mu: NDArray) -> Triple:
    a = lin.A_sync @ mu
    c = np.sqrt(1.0 - x**2)
    w0 = lin.weights * c
    w1 = lin.weights * (-x * a / c)
    w2 = lin.weights * (-(a**2) / (2.0 * c**3))
    return w0, w1, w2


def weight_expansion(lin: LinearizedSystem, p: ArrayLike, mu: ArrayLike) -> Triple:
    """
    W(p + d mu) = W0 + W1 d + W2 d^2 + O(d^3), as diagonal matrices.

    :param lin: Linearized system
    :param p: Supply vector
    :param mu: Direction (e_k or e_k + e_j in the derivative engine)
    """
    x = lin.sines(p)
    check_saturation(x)
    w0, w1, w2 = _weight_coefficients(lin, x, np.asarray(mu, dtype=float))
    return np.diag(w0), np.diag(w1), np.diag(w2)


def check_spectral_gap(eigenvalues: NDArray, gap: float = SPECTRAL_GAP) -> None:
    gaps = np.diff(eigenvalues)
    k = int(np.argmin(gaps))
    if gaps[k] < gap:
        cluster = [i + 1 for i in range(len(eigenvalues)) if abs(eigenvalues[i] - eigenvalues[k]) < gap]
        raise DegenerateSpectrumError(cluster, float(gaps[k]))


def align_eigenvectors(U_ref: NDArray, U: NDArray) -> NDArray:
    """
    Reorder and sign-flip the columns of ``U`` to follow ``U_ref``.

    Column j of the result is the column of ``U`` with the largest |inner
    product| against column j of ``U_ref``, flipped so that inner product is
    positive.
    """
    overlap = U_ref.T @ U
    perm = np.argmax(np.abs(overlap), axis=1)
    if len(set(perm.tolist())) != len(perm):
        dup = [int(j) + 1 for j in range(len(perm)) if (perm == perm[j]).sum() > 1]
        raise DegenerateSpectrumError(dup, 0.0)
    aligned = U[:, perm]
    signs = np.sign(np.einsum("ij,ij->j", U_ref, aligned))
    signs[signs == 0] = 1.0
    return aligned * signs


def _transform_coefficients(
    lin: LinearizedSystem, x: NDArray, U0: NDArray, mu: NDArray, delta_fd: float
) -> Tuple[NDArray, NDArray]:
    a = lin.A_sync @ mu
    shifted = []
    for sign in (1.0, -1.0):
        xs = x + sign * delta_fd * a
        check_saturation(xs)
        _, lam, U = modal_decomposition(lin, xs)
        shifted.append(align_eigenvectors(U0, U))
    U_plus, U_minus = shifted
    U1 = (U_plus - U_minus) / (2.0 * delta_fd)
    U2 = (U_plus - 2.0 * U0 + U_minus) / (2.0 * delta_fd**2)
    return U1, U2


def transform_expansion(
    net: PowerNetwork,
    lin: LinearizedSystem,
    p: ArrayLike,
    mu: ArrayLike,
    delta_fd: float = DELTA_FD,
) -> Triple:
    """
    Taylor coefficients of the orthonormal transformation U(p + d mu).

    Eigenvectors are not differentiated analytically; U(+-delta_fd) are computed
    exactly, aligned to U(0) and combined by central differences.
    """
    x = lin.sines(p)
    check_saturation(x)
    _, lam, U0 = modal_decomposition(lin, x)
    check_spectral_gap(lam)
    U1, U2 = _transform_coefficients(lin, x, U0, np.asarray(mu, dtype=float), delta_fd)
    return U0, U1, U2


def cascade_solve(
    J: Sequence[NDArray],
    K: Sequence[NDArray],
    method: str = "schur",
    Q0: Optional[NDArray] = None,
    order: int = 2,
) -> Tuple[NDArray, ...]:
    """
    Taylor coefficients Q0, Q1, Q2 of the perturbed Lyapunov solution.

    Every equation shares the system matrix J0, which is checked for
    stability once.

    :param J: (J0, J1, J2) system-matrix coefficients
    :param K: (K0, K1, K2) input-matrix coefficients
    :param Q0: Already known unperturbed solution
    :param order: 1 stops after Q1
    """
    J0, J1 = J[0], J[1]
    K0, K1 = K[0], K[1]
    if Q0 is None:
        Q0 = solve_lyapunov(LyapunovProblem(J0, K0 @ K0.T), method=method)

    rhs1 = _sym(Q0 @ J1.T + J1 @ Q0 + K0 @ K1.T + K1 @ K0.T)
    Q1 = solve_lyapunov(
        LyapunovProblem(J0, rhs1), method=method, check_stability=False, rtol=CASCADE_RTOL
    )
    if order < 2:
        return Q0, Q1

    J2, K2 = J[2], K[2]
    rhs2 = _sym(
        Q0 @ J2.T + J2 @ Q0 + Q1 @ J1.T + J1 @ Q1 + K0 @ K2.T + K1 @ K1.T + K2 @ K0.T
    )
    Q2 = solve_lyapunov(
        LyapunovProblem(J0, rhs2), method=method, check_stability=False, rtol=CASCADE_RTOL
    )
    return Q0, Q1, Q2


# ------------------------------------------------------------------ #
# Results
# ------------------------------------------------------------------ #
@dataclass(frozen=True, eq=False)
class DirectionExpansion:
    """Every Taylor coefficient computed for one direction ``mu``; V1 and V2 hold all edges."""

    mu: NDArray[np.float64]
    W: Tuple[NDArray, ...]
    U: Tuple[NDArray, ...]
    J: Tuple[NDArray, ...]
    K: Tuple[NDArray, ...]
    C: Tuple[NDArray, ...]
    Q: Tuple[NDArray, ...]
    V1: NDArray[np.float64]
    V2: Optional[NDArray[np.float64]]


@dataclass(frozen=True, eq=False)
class SigmaDerivativeBundle:
    """Gradient and Hessian of sigma and of the variance of one line (``edge`` is 1-based)."""

    edge: int
    sigma: float
    G1: NDArray[np.float64]
    H1: Optional[NDArray[np.float64]]
    G: NDArray[np.float64]
    H: Optional[NDArray[np.float64]]
    delta_fd: float
    expansions: Mapping[Tuple[int, ...], DirectionExpansion] = field(repr=False, default_factory=dict)


# ------------------------------------------------------------------ #
# Engine
# ------------------------------------------------------------------ #
class SigmaDerivativeEngine:
    """
    Derivatives of every sigma_k at a fixed supply vector.

    W0, U(0), the reduced matrices and Q0 do not depend on the
    direction and are computed once; each direction then yields the variance
    coefficients of all edges at the same time.

    :param ctx: Evaluation context
    :param p: Supply vector
    :param delta_fd: Step of the eigenvector differences (context default when omitted)
    """

    def __init__(self, ctx: EvaluationContext, p: ArrayLike, delta_fd: Optional[float] = None) -> None:
        self.ctx = ctx
        self.lin = ctx.lin
        self.delta_fd = delta_fd or ctx.delta_fd
        ev = ctx.evaluate(p)
        self.p = ev.p
        self.x = ev.x
        self.sigma = ev.sigma
        red = ev.reduced
        check_spectral_gap(red.eigenvalues)
        self.U0 = red.U_p
        self.S0 = scaled_stiffness(self.lin, red.W_of_p)
        self.J0, self.K0, self.C0, self.Q0 = red.J_d, red.K_d, red.C_d, ev.Q
        self._expansions: Dict[Tuple[int, ...], DirectionExpansion] = {}

    # a) one direction
    def expand(self, mu: NDArray, order: int = 2) -> DirectionExpansion:
        lin, U0, S0 = self.lin, self.U0, self.S0
        W = _weight_coefficients(lin, self.x, mu)
        U1, U2 = _transform_coefficients(lin, self.x, U0, mu, self.delta_fd)
        S1 = scaled_stiffness(lin, W[1])

        lam1 = U1.T @ S0 @ U0 + U0.T @ S1 @ U0 + U0.T @ S0 @ U1
        dmp1 = modal_damping(lin, U1, U0) + modal_damping(lin, U0, U1)
        J1 = system_matrix(lam1, dmp1, with_identity=False)
        K1 = input_matrix(lin, U1)
        C1 = output_matrix(lin, U1)

        J = [self.J0, J1]
        K = [self.K0, K1]
        C = [self.C0, C1]
        if order >= 2:
            S2 = scaled_stiffness(lin, W[2])
            lam2 = (
                U1.T @ S1 @ U0 + U1.T @ S0 @ U1 + U0.T @ S1 @ U1
                + U2.T @ S0 @ U0 + U0.T @ S2 @ U0 + U0.T @ S0 @ U2
            )
            dmp2 = modal_damping(lin, U1, U1) + modal_damping(lin, U2, U0) + modal_damping(lin, U0, U2)
            J.append(system_matrix(lam2, dmp2, with_identity=False))
            K.append(input_matrix(lin, U2))
            C.append(output_matrix(lin, U2))

        Q = cascade_solve(J, K, method=self.ctx.lyapunov_method, Q0=self.Q0, order=order)

        C0, C1 = C[0], C[1]
        Q0, Q1 = Q[0], Q[1]
        V1 = 2.0 * _diag3(C1, Q0, C0) + _diag3(C0, Q1, C0)
        V2 = None
        if order >= 2:
            C2, Q2 = C[2], Q[2]
            V2 = (
                2.0 * _diag3(C1, Q1, C0)
                + _diag3(C1, Q0, C1)
                + 2.0 * _diag3(C2, Q0, C0)
                + _diag3(C0, Q2, C0)
            )

        return DirectionExpansion(
            mu=mu,
            W=W,
            U=(U0, U1, U2),
            J=tuple(J),
            K=tuple(K),
            C=tuple(C),
            Q=tuple(Q),
            V1=V1,
            V2=V2,
        )

    def _map(self, fn: Callable[..., T], items: List) -> List[T]:
        if self.ctx.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.ctx.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    def _unit(self, *indices: int) -> NDArray:
        mu = np.zeros(self.lin.dim)
        mu[list(indices)] = 1.0
        return mu

    def _guard_sigma(self) -> None:
        k = int(np.argmin(self.sigma))
        if self.sigma[k] <= SIGMA_FLOOR:
            raise VanishingSigmaError(
                f"sigma of edge {k + 1} is {self.sigma[k]:.3e}; its derivatives are undefined"
            )

    # b) variance and sigma gradients of all edges
    def variance_gradients(self, order: int = 1) -> NDArray[np.float64]:
        """Matrix of shape (n_E, dim) with row k = grad V_k."""
        dim = self.lin.dim
        keys = [(k,) for k in range(dim) if (k,) not in self._expansions or order > 1]
        for key, expansion in zip(keys, self._map(lambda key: self.expand(self._unit(*key), order), keys)):
            self._expansions[key] = expansion
        return np.column_stack([self._expansions[(k,)].V1 for k in range(dim)])

    def gradients(self) -> NDArray[np.float64]:
        """Matrix of shape (n_E, dim) with row k = grad sigma_k."""
        self._guard_sigma()
        G = self.variance_gradients(order=1)
        G1 = G / (2.0 * self.sigma[:, None])
        if self.ctx.richardson_check:
            self._richardson(G1)
        return G1

    def _richardson(self, G1: NDArray) -> None:
        half = SigmaDerivativeEngine(self.ctx, self.p, delta_fd=self.delta_fd / 2.0)
        G_half = half.variance_gradients(order=1) / (2.0 * self.sigma[:, None])
        change = np.linalg.norm(G_half - G1) / max(np.linalg.norm(G1), SIGMA_FLOOR)
        if change > RICHARDSON_RTOL:
            logger.warning(
                "Halving delta_fd=%.1e moved the sigma gradients by %.2e (relative)",
                self.delta_fd,
                change,
            )

    # c) full second order
    def bundles(self) -> List[SigmaDerivativeBundle]:
        self._guard_sigma()
        dim = self.lin.dim
        n_E = self.lin.n_E

        diag_keys = [(k,) for k in range(dim) if self._expansions.get((k,)) is None or self._expansions[(k,)].V2 is None]
        pair_keys = [(k, j) for k in range(dim) for j in range(k + 1, dim) if (k, j) not in self._expansions]
        keys = diag_keys + pair_keys
        for key, expansion in zip(keys, self._map(lambda key: self.expand(self._unit(*key), 2), keys)):
            self._expansions[key] = expansion

        G = np.column_stack([self._expansions[(k,)].V1 for k in range(dim)])
        H = np.zeros((n_E, dim, dim))
        for k in range(dim):
            V2 = self._expansions[(k,)].V2
            assert V2 is not None
            H[:, k, k] = 2.0 * V2
        for k in range(dim):
            for j in range(k + 1, dim):
                V2 = self._expansions[(k, j)].V2
                assert V2 is not None
                H[:, k, j] = (2.0 * V2 - H[:, k, k] - H[:, j, j]) / 2.0
                H[:, j, k] = H[:, k, j]

        out = []
        for i in range(n_E):
            s = float(self.sigma[i])
            G1 = G[i] / (2.0 * s)
            H1 = (H[i] - 2.0 * np.outer(G1, G1)) / (2.0 * s)
            out.append(
                SigmaDerivativeBundle(
                    edge=i + 1,
                    sigma=s,
                    G1=G1,
                    H1=_sym(H1),
                    G=G[i],
                    H=H[i],
                    delta_fd=self.delta_fd,
                    expansions=self._expansions,
                )
            )
        return out

    def hessians(self) -> NDArray[np.float64]:
        """Array of shape (n_E, dim, dim) of sigma Hessians."""
        bundles = self.bundles()
        return np.stack([b.H1 for b in bundles])


def gradient_hessian_sigma(
    net: PowerNetwork,
    lin: LinearizedSystem,
    p: ArrayLike,
    i: int,
    delta_fd: float = DELTA_FD,
) -> SigmaDerivativeBundle:
    """
    Gradient and Hessian of sigma_i at p.

    :param i: 1-based edge index
    """
    ctx = EvaluationContext(net, r=1.0, lin=lin, delta_fd=delta_fd)
    return SigmaDerivativeEngine(ctx, p).bundles()[i - 1]
