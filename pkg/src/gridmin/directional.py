from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from gridmin.errors import InfeasiblePointError
from gridmin.objective import CaseKind, EvaluationContext, ObjectiveEvaluation
from gridmin.polytope import MEMBERSHIP_TOL
from gridmin.sigma_derivatives import SigmaDerivativeEngine

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CaseLabel:
    """
    Nondifferentiability class of a point.

    ``k_or_set`` is the maximizing edge (Case11 / Case12) or the whole
    maximizer set (Case2); ``zero_edges`` lists maximizers whose mean term
    vanishes. Indices are 0-based.
    """

    kind: CaseKind
    k_or_set: Union[int, Tuple[int, ...]]
    zero_edges: Tuple[int, ...]


@dataclass(frozen=True, eq=False)
class Subgradient:
    g: NDArray[np.float64]
    theta: float
    source_edge: int


def classify(ev: ObjectiveEvaluation, tol_zero: Optional[float] = None) -> CaseLabel:
    tol = 1e-10 if tol_zero is None else tol_zero
    zero = tuple(k for k in ev.I_max if abs(ev.x[k]) <= tol)
    if len(ev.I_max) > 1:
        return CaseLabel(CaseKind.CASE2, tuple(ev.I_max), zero)
    k = ev.I_max[0]
    kind = CaseKind.CASE12 if zero else CaseKind.CASE11
    return CaseLabel(kind, k, zero)


class DirectionalModel:
    """
    First and second order model of f around a fixed supply vector.

    The evaluation, the per-edge mean-term rows and the sigma gradients are
    computed once; Hessians only on first use. Direction arguments are not
    checked for feasibility here (see the module-level functions).

    ``active`` is the edge set the first and second order max runs over; it
    starts as the maximizer set and is widened by :meth:`near_active`.

    :param ctx: Evaluation context
    :param p: Supply vector
    """

    def __init__(self, ctx: EvaluationContext, p: ArrayLike) -> None:
        self.ctx = ctx
        self.ev = ctx.evaluate(p)
        self.p = self.ev.p
        self.label = classify(self.ev, ctx.tol_zero)
        self.active: Tuple[int, ...] = tuple(self.ev.I_max)
        self.rows = ctx.lin.A_sync
        self._engine: Optional[SigmaDerivativeEngine] = None
        self._grad_sigma: Optional[NDArray] = None
        self._hess_sigma: Optional[NDArray] = None

    # ------------------------------------------------------------------ #
    # sigma derivatives (zero when the sigma term is switched off)
    # ------------------------------------------------------------------ #
    @property
    def engine(self) -> SigmaDerivativeEngine:
        if self._engine is None:
            self._engine = SigmaDerivativeEngine(self.ctx, self.p)
        return self._engine

    @property
    def grad_sigma(self) -> NDArray[np.float64]:
        if self._grad_sigma is None:
            if self.ctx.noiseless:
                self._grad_sigma = np.zeros_like(self.rows)
            else:
                self._grad_sigma = self.engine.gradients()
        return self._grad_sigma

    @property
    def hess_sigma(self) -> NDArray[np.float64]:
        if self._hess_sigma is None:
            dim = self.ctx.dim
            if self.ctx.noiseless:
                self._hess_sigma = np.zeros((self.ctx.lin.n_E, dim, dim))
            else:
                self._hess_sigma = self.engine.hessians()
        return self._hess_sigma

    def near_active(self, width: float) -> "DirectionalModel":
        """
        Model whose max runs over every edge with f_k >= f - width.

        Shares the sigma derivatives with this model; returns ``self`` when the
        set does not grow.
        """
        near = np.flatnonzero(self.ev.f_k >= self.ev.f - width).tolist()
        active = tuple(sorted(set(self.ev.I_max) | set(near)))
        if active == self.active:
            return self
        _ = self.grad_sigma  # computed here so the copy shares it
        out = copy.copy(self)
        out.active = active
        return out

    def _is_zero(self, k: int) -> bool:
        return abs(self.ev.x[k]) <= self.ctx.tol_zero

    def mean_gradient(self, k: int) -> NDArray[np.float64]:
        """Gradient of arcsin|x_k| where x_k != 0."""
        x = self.ev.x[k]
        return np.sign(x) / np.sqrt(1.0 - x**2) * self.rows[k]

    def edge_gradient(self, k: int) -> NDArray[np.float64]:
        return self.mean_gradient(k) + self.ctx.r * self.grad_sigma[k]

    # ------------------------------------------------------------------ #
    # a) first order
    # ------------------------------------------------------------------ #
    def edge_directional_derivative(self, k: int, v: NDArray) -> float:
        sigma_part = self.ctx.r * float(self.grad_sigma[k] @ v)
        if self._is_zero(k):
            return abs(float(self.rows[k] @ v)) + sigma_part
        return float(self.mean_gradient(k) @ v) + sigma_part

    def _edge_derivatives(self, v: NDArray) -> NDArray[np.float64]:
        return np.array([self.edge_directional_derivative(k, v) for k in self.active])

    def fprime(self, v: ArrayLike) -> float:
        v = np.asarray(v, dtype=float)
        return float(self._edge_derivatives(v).max())

    # ------------------------------------------------------------------ #
    # b) second order
    # ------------------------------------------------------------------ #
    def edge_second_derivative(self, k: int, v: NDArray) -> float:
        curvature = self.ctx.r * float(v @ self.hess_sigma[k] @ v)
        if self._is_zero(k):
            return curvature
        x = self.ev.x[k]
        a = float(self.rows[k] @ v)
        return abs(x) / (1.0 - x**2) ** 1.5 * a**2 + curvature

    def fsecond(self, v: ArrayLike) -> float:
        """f'' such that f(p + t v) = f + t f' + t^2 f'' / 2 + o(t^2)."""
        v = np.asarray(v, dtype=float)
        firsts = self._edge_derivatives(v)
        top = firsts.max()
        tol = self.ctx.tol_max * max(1.0, abs(top))
        active = [k for k, d in zip(self.active, firsts) if d >= top - tol]
        return max(self.edge_second_derivative(k, v) for k in active)

    # ------------------------------------------------------------------ #
    # c) generalized gradients
    # ------------------------------------------------------------------ #
    def edge_subgradient(self, k: int, theta: float, v: Optional[NDArray] = None) -> NDArray[np.float64]:
        """
        Generalized gradient of f_k. With a zero mean term the branch follows the
        sign of A(k) v when ``v`` is given and nonzero along A(k), otherwise theta.
        """
        sigma_part = self.ctx.r * self.grad_sigma[k]
        if not self._is_zero(k):
            return self.mean_gradient(k) + sigma_part
        row = self.rows[k]
        if v is not None:
            a = float(row @ v)
            if a != 0.0:
                return np.sign(a) * row + sigma_part
        return (2.0 * theta - 1.0) * row + sigma_part

    def subgradient(self, theta: Optional[float] = None) -> Subgradient:
        theta = self.ctx.theta if theta is None else theta
        k = min(self.ev.I_max)
        return Subgradient(g=self.edge_subgradient(k, theta), theta=theta, source_edge=k)

    def subgradient_of_fprime(self, v: NDArray, theta: Optional[float] = None) -> NDArray[np.float64]:
        """A subgradient of the convex function v -> f'(p, v)."""
        theta = self.ctx.theta if theta is None else theta
        firsts = self._edge_derivatives(v)
        k = self.active[int(np.argmax(firsts))]
        return self.edge_subgradient(k, theta, v)


# ------------------------------------------------------------------ #
# Public operations
# ------------------------------------------------------------------ #
def _require_direction(ctx: EvaluationContext, p: NDArray, v: NDArray) -> None:
    ok, slacks = ctx.poly.contains(p + v, MEMBERSHIP_TOL)
    if not ok:
        raise InfeasiblePointError(
            "p + v leaves the supply polytope; directional formulas need a feasible segment",
            slacks=slacks.tolist(),
        )


def first_directional_derivative(ctx: EvaluationContext, p: ArrayLike, v: ArrayLike) -> float:
    """
    f'(p, v), the max over the maximizer set of the per-edge one-sided derivatives.

    :param ctx: Evaluation context
    :param p: Feasible supply vector
    :param v: Direction with p + v feasible
    """
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    _require_direction(ctx, p, v)
    return DirectionalModel(ctx, p).fprime(v)


def second_directional_derivative(ctx: EvaluationContext, p: ArrayLike, v: ArrayLike) -> float:
    """
    Second directional derivative f''(p, v) itself (not half of it).

    Over several maximizers the max is taken over the edges that also attain
    the first-order max along v.
    """
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    _require_direction(ctx, p, v)
    return DirectionalModel(ctx, p).fsecond(v)


def generalized_subgradient(
    ctx: EvaluationContext, p: ArrayLike, theta: Optional[float] = None
) -> Subgradient:
    """
    One element of the generalized gradient of f at p: the generalized gradient
    of the lowest-indexed maximizing edge.
    """
    return DirectionalModel(ctx, p).subgradient(theta)
