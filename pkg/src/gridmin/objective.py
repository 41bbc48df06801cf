from __future__ import annotations

import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from gridmin.errors import DisconnectedNetworkError, NumericalError, SaturationError
from gridmin.lyapunov import LyapunovProblem, solve_lyapunov
from gridmin.network import PowerNetwork, incidence_matrix
from gridmin.polytope import SupplyPolytope, build_polytope

logger = logging.getLogger(__name__)

TOL_ZERO = 1e-10
TOL_MAX = 1e-9
SATURATION_MARGIN = 1e-9
ZERO_MODE_TOL = 1e-8


class CaseKind(str, Enum):
    CASE11 = "Case11"   # unique maximizer, nonzero mean term
    CASE12 = "Case12"   # unique maximizer, zero mean term
    CASE2 = "Case2"     # several maximizers


# ------------------------------------------------------------------ #
# Synchronous state
# ------------------------------------------------------------------ #
@dataclass(frozen=True, eq=False)
class LinearizedSystem:
    """
    Point-independent data of the linearized network.

    ``U0`` holds the eigenvectors of B W B^T as rows (ascending eigenvalues),
    so that U0^T diag(Lambda_dag) U0 is the pseudo-inverse. The sines of the
    synchronous phase differences are ``A_sync @ p + b_sync``.
    """

    B: NDArray[np.float64]
    weights: NDArray[np.float64]
    m_inv_sqrt: NDArray[np.float64]
    damping_ratio: NDArray[np.float64]
    noise: NDArray[np.float64]
    U0: NDArray[np.float64]
    Lambda_dag: NDArray[np.float64]
    E: NDArray[np.float64]
    A_sync: NDArray[np.float64]
    b_sync: NDArray[np.float64]

    @property
    def n_V(self) -> int:
        return self.B.shape[0]

    @property
    def n_E(self) -> int:
        return self.B.shape[1]

    @property
    def dim(self) -> int:
        return self.A_sync.shape[1]

    @property
    def laplacian_pinv(self) -> NDArray[np.float64]:
        return self.U0.T @ np.diag(self.Lambda_dag) @ self.U0

    def sines(self, p: ArrayLike) -> NDArray[np.float64]:
        return self.A_sync @ np.asarray(p, dtype=float) + self.b_sync


def build_linearization(net: PowerNetwork) -> LinearizedSystem:
    B = incidence_matrix(net)
    L = B @ np.diag(net.weights) @ B.T
    try:
        lam, V = np.linalg.eigh(L)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"Eigen-decomposition of the network Laplacian failed: {e}") from e

    zero = np.abs(lam) <= 1e-10 * lam[-1]
    if zero.sum() != 1:
        raise DisconnectedNetworkError(
            f"Laplacian has {int(zero.sum())} zero eigenvalues; expected exactly one"
        )
    U0 = V.T
    Lambda_dag = np.zeros_like(lam)
    Lambda_dag[1:] = 1.0 / lam[1:]

    # columns U_i - U_{n_plus}, i = 1..n_V without n_plus
    ref = net.n_plus - 1
    others = [i for i in range(net.n_V) if i != ref]
    E = U0[:, others] - U0[:, [ref]]

    T = B.T @ U0.T @ np.diag(Lambda_dag)
    dim = net.n_plus - 1
    A_sync = T @ E[:, :dim]
    b_sync = T @ E[:, dim:] @ (-net.p_demand)

    return LinearizedSystem(
        B=B,
        weights=net.weights,
        m_inv_sqrt=1.0 / np.sqrt(net.inertias),
        damping_ratio=net.dampings / net.inertias,
        noise=net.noise,
        U0=U0,
        Lambda_dag=Lambda_dag,
        E=E,
        A_sync=A_sync,
        b_sync=b_sync,
    )


def check_saturation(x: NDArray, margin: float = SATURATION_MARGIN) -> None:
    k = int(np.argmax(np.abs(x)))
    if abs(x[k]) >= 1.0 - margin:
        raise SaturationError(edge=k + 1, value=float(x[k]))


# ------------------------------------------------------------------ #
# Reduced Hurwitz state space
# ------------------------------------------------------------------ #
def scaled_stiffness(lin: LinearizedSystem, edge_weights: NDArray) -> NDArray[np.float64]:
    """M^{-1/2} B diag(edge_weights) B^T M^{-1/2}."""
    S = (lin.B * edge_weights) @ lin.B.T
    return lin.m_inv_sqrt[:, None] * S * lin.m_inv_sqrt[None, :]


def system_matrix(
    stiffness: NDArray, damping: NDArray, with_identity: bool = True
) -> NDArray[np.float64]:
    """
    [[0, I[1:, :]], [-stiffness[:, 1:], -damping]] of size 2n-1.

    ``stiffness`` and ``damping`` are expressed in the modal basis; the first
    mode (the zero mode) is removed from the position block.
    """
    n = damping.shape[0]
    J = np.zeros((2 * n - 1, 2 * n - 1))
    if with_identity:
        J[: n - 1, n - 1 :] = np.eye(n)[1:, :]
    J[n - 1 :, : n - 1] = -stiffness[:, 1:]
    J[n - 1 :, n - 1 :] = -damping
    return J


def input_matrix(lin: LinearizedSystem, U: NDArray) -> NDArray[np.float64]:
    n = U.shape[0]
    K = np.zeros((2 * n - 1, n))
    K[n - 1 :, :] = U.T * (lin.m_inv_sqrt * lin.noise)[None, :]
    return K


def output_matrix(lin: LinearizedSystem, U: NDArray) -> NDArray[np.float64]:
    n = U.shape[0]
    C = np.zeros((lin.n_E, 2 * n - 1))
    C[:, : n - 1] = (lin.B.T @ (lin.m_inv_sqrt[:, None] * U))[:, 1:]
    return C


def modal_damping(lin: LinearizedSystem, U: NDArray, V: Optional[NDArray] = None) -> NDArray[np.float64]:
    """U^T M^{-1} D V (V defaults to U)."""
    V = U if V is None else V
    return U.T @ (lin.damping_ratio[:, None] * V)


def _orient_columns(U: NDArray) -> NDArray:
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


@dataclass(frozen=True, eq=False)
class ReducedSystem:
    x: NDArray[np.float64]
    W_of_p: NDArray[np.float64]
    eigenvalues: NDArray[np.float64]
    U_p: NDArray[np.float64]
    J_d: NDArray[np.float64]
    K_d: NDArray[np.float64]
    C_d: NDArray[np.float64]

    @property
    def state_dim(self) -> int:
        return self.J_d.shape[0]


def modal_decomposition(lin: LinearizedSystem, x: NDArray) -> Tuple[NDArray, NDArray, NDArray]:
    """Edge weights W(p), ascending eigenvalues and oriented eigenvectors at sines ``x``."""
    w_p = lin.weights * np.sqrt(1.0 - x**2)
    lam, U = np.linalg.eigh(scaled_stiffness(lin, w_p))
    if abs(lam[0]) > ZERO_MODE_TOL * max(1.0, lam[-1]):
        raise NumericalError(f"First stiffness eigenvalue {lam[0]:.3e} is not zero")
    return w_p, lam, _orient_columns(U)


def reduce_system(net: PowerNetwork, lin: LinearizedSystem, p: ArrayLike) -> ReducedSystem:
    """
    Reduced state space (J_d, K_d, C_d) at supply vector ``p``.

    :param net: Power network the linearization was built from
    :param lin: Linearized system
    :param p: Supply decision vector
    :return: ReducedSystem with Hurwitz J_d
    """
    x = lin.sines(p)
    check_saturation(x)
    w_p, lam, U = modal_decomposition(lin, x)
    J = system_matrix(np.diag(lam), modal_damping(lin, U))
    return ReducedSystem(
        x=x,
        W_of_p=w_p,
        eigenvalues=lam,
        U_p=U,
        J_d=J,
        K_d=input_matrix(lin, U),
        C_d=output_matrix(lin, U),
    )


# ------------------------------------------------------------------ #
# Objective
# ------------------------------------------------------------------ #
@dataclass(frozen=True, eq=False)
class ObjectiveEvaluation:
    """Per-edge terms of the control objective at one supply vector. Edge indices are 0-based."""

    p: NDArray[np.float64]
    x: NDArray[np.float64]
    m: NDArray[np.float64]
    sigma: NDArray[np.float64]
    variance: NDArray[np.float64]
    f_k: NDArray[np.float64]
    f: float
    I_max: Tuple[int, ...]
    case: CaseKind
    r: float
    reduced: ReducedSystem = field(repr=False)
    Q: NDArray[np.float64] = field(repr=False)

    def to_dict(self, net: PowerNetwork) -> Dict[str, Any]:
        edges: List[Dict[str, Any]] = []
        for k, (i, j) in enumerate(net.edges):
            edges.append({
                "edge": k + 1,
                "from": i,
                "to": j,
                "sine": float(self.x[k]),
                "m": float(self.m[k]),
                "sigma": float(self.sigma[k]),
                "f_k": float(self.f_k[k]),
            })
        return {
            "f": float(self.f),
            "r": float(self.r),
            "case": self.case.value,
            "I_max": [k + 1 for k in self.I_max],
            "edges": edges,
        }


def evaluate_objective(
    net: PowerNetwork,
    lin: LinearizedSystem,
    p: ArrayLike,
    r: float,
    tol_zero: float = TOL_ZERO,
    tol_max: float = TOL_MAX,
    lyapunov_method: str = "schur",
) -> ObjectiveEvaluation:
    """
    f(p) = max_k arcsin|A p + b|_k + r sigma_k.

    :param tol_zero: Absolute threshold below which a mean term counts as zero
    :param tol_max: Relative tolerance for membership in the maximizer set
    """
    p = np.array(p, dtype=float)
    red = reduce_system(net, lin, p)
    Q = solve_lyapunov(LyapunovProblem(red.J_d, red.K_d @ red.K_d.T), method=lyapunov_method)

    variance = np.einsum("ij,jk,ik->i", red.C_d, Q, red.C_d)
    sigma = np.sqrt(np.maximum(variance, 0.0))
    m = np.arcsin(np.abs(red.x))
    f_k = m + r * sigma
    f = float(f_k.max())
    I_max = tuple(int(k) for k in np.flatnonzero(f_k >= f - tol_max * max(1.0, abs(f))))

    if len(I_max) > 1:
        case = CaseKind.CASE2
    elif abs(red.x[I_max[0]]) <= tol_zero:
        case = CaseKind.CASE12
    else:
        case = CaseKind.CASE11

    return ObjectiveEvaluation(
        p=p,
        x=red.x,
        m=m,
        sigma=sigma,
        variance=variance,
        f_k=f_k,
        f=f,
        I_max=I_max,
        case=case,
        r=float(r),
        reduced=red,
        Q=Q,
    )


class EvaluationContext:
    """
    Immutable inputs shared by every evaluation, plus a small per-point memo.

    :param net: Power network
    :param r: Risk weight
    :param poly: Supply polytope (built from ``net`` when omitted)
    :param lin: Linearized system (built from ``net`` when omitted)
    """

    CACHE_SIZE = 512

    def __init__(
        self,
        net: PowerNetwork,
        r: float,
        poly: Optional[SupplyPolytope] = None,
        lin: Optional[LinearizedSystem] = None,
        tol_zero: float = TOL_ZERO,
        tol_max: float = TOL_MAX,
        delta_fd: float = 1e-4,
        theta: float = 0.5,
        lyapunov_method: str = "schur",
        richardson_check: bool = False,
        workers: int = 1,
    ) -> None:
        if r < 0:
            raise ValueError("Risk weight r must be nonnegative")
        self.net = net
        self.r = float(r)
        self.poly = poly or build_polytope(net)
        self.lin = lin or build_linearization(net)
        self.tol_zero = tol_zero
        self.tol_max = tol_max
        self.delta_fd = delta_fd
        self.theta = theta
        self.lyapunov_method = lyapunov_method
        self.richardson_check = richardson_check
        self.workers = workers
        self._cache: "OrderedDict[bytes, ObjectiveEvaluation]" = OrderedDict()
        self._lock = threading.Lock()

    @property
    def dim(self) -> int:
        return self.poly.dim

    @property
    def noiseless(self) -> bool:
        return self.r == 0.0 or not np.any(self.net.noise)

    def with_r(self, r: float) -> "EvaluationContext":
        return EvaluationContext(
            self.net,
            r,
            poly=self.poly,
            lin=self.lin,
            tol_zero=self.tol_zero,
            tol_max=self.tol_max,
            delta_fd=self.delta_fd,
            theta=self.theta,
            lyapunov_method=self.lyapunov_method,
            richardson_check=self.richardson_check,
            workers=self.workers,
        )

    def sines(self, p: ArrayLike) -> NDArray[np.float64]:
        return self.lin.sines(p)

    def evaluate(self, p: ArrayLike) -> ObjectiveEvaluation:
        p = self.poly.require(p)
        key = p.tobytes()
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit
        ev = evaluate_objective(
            self.net,
            self.lin,
            p,
            self.r,
            tol_zero=self.tol_zero,
            tol_max=self.tol_max,
            lyapunov_method=self.lyapunov_method,
        )
        with self._lock:
            self._cache[key] = ev
            if len(self._cache) > self.CACHE_SIZE:
                self._cache.popitem(last=False)
        return ev

    def f(self, p: ArrayLike) -> float:
        return self.evaluate(p).f


def empirical_lipschitz(ctx: EvaluationContext, rng: np.random.Generator, n_pairs: int = 200) -> float:
    """max |f(a) - f(b)| / ||a - b|| over random feasible pairs."""
    pts = ctx.poly.sample(rng, 2 * n_pairs)
    best = 0.0
    for a, b in zip(pts[:n_pairs], pts[n_pairs:]):
        dist = float(np.linalg.norm(a - b))
        if dist == 0.0:
            continue
        try:
            ratio = abs(ctx.f(a) - ctx.f(b)) / dist
        except SaturationError:
            continue
        best = max(best, ratio)
    logger.info("Empirical Lipschitz bound over %d pairs: %.6g", n_pairs, best)
    return best
