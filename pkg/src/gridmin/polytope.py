from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import linprog

from gridmin.errors import DimensionMismatchError, InfeasiblePointError, NumericalError
from gridmin.network import PowerNetwork

logger = logging.getLogger(__name__)

MEMBERSHIP_TOL = 1e-9
KKT_TOL = 1e-10
INTERIOR_SLACK = 1e-6


@dataclass(frozen=True, eq=False)
class SupplyPolytope:
    """
    Feasible supply decisions {p >= 0 : b1 <= A1 p, p <= b2, sum(p) <= p_sum_demand}.

    ``A1`` is the lower-triangular matrix of ones, so ``(A1 p)(i)`` is the
    cumulative supply of the first i nodes; ``b1(i)`` is what the demand still
    needs after the remaining nodes run at capacity. The last supply node is not
    a decision variable: it covers ``p_sum_demand - sum(p)``, which the last
    row keeps nonnegative.
    """

    A1: NDArray[np.float64]
    b1: NDArray[np.float64]
    b2: NDArray[np.float64]
    p_sum_demand: float
    p_max_last: float

    @property
    def dim(self) -> int:
        return len(self.b2)

    # ------------------------------------------------------------------ #
    # Stacked inequality form G p <= h
    # ------------------------------------------------------------------ #
    def constraints(self) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        eye = np.eye(self.dim)
        G = np.vstack([-eye, eye, -self.A1, np.ones((1, self.dim))])
        h = np.concatenate([np.zeros(self.dim), self.b2, -self.b1, [self.p_sum_demand]])
        return G, h

    def _check_dim(self, p: ArrayLike, name: str = "p") -> NDArray[np.float64]:
        p = np.asarray(p, dtype=float)
        if p.shape != (self.dim,):
            raise DimensionMismatchError(
                f"{name} has shape {p.shape}, expected ({self.dim},)"
            )
        return p

    def slacks(self, p: ArrayLike) -> NDArray[np.float64]:
        G, h = self.constraints()
        return h - G @ self._check_dim(p)

    def contains(self, p: ArrayLike, tol: float = MEMBERSHIP_TOL) -> Tuple[bool, NDArray[np.float64]]:
        """
        :param p: Decision vector
        :param tol: Absolute violation allowed on each constraint
        :return: (membership, per-constraint slacks ordered as -p<=0, p<=b2, -A1 p<=-b1, sum(p)<=p_sum_demand)
        """
        s = self.slacks(p)
        return bool(np.all(s >= -tol)), s

    def require(self, p: ArrayLike, what: str = "point", tol: float = MEMBERSHIP_TOL) -> NDArray[np.float64]:
        p = self._check_dim(p, what)
        ok, s = self.contains(p, tol)
        if not ok:
            raise InfeasiblePointError(
                f"{what} {np.array2string(p, precision=6)} is outside the supply polytope "
                f"(worst slack {s.min():.3e})",
                slacks=s.tolist(),
            )
        return p

    def last_supply(self, p: ArrayLike) -> float:
        return float(self.p_sum_demand - np.sum(p))

    # ------------------------------------------------------------------ #
    # Reference points
    # ------------------------------------------------------------------ #
    def proportional_dispatch(self) -> NDArray[np.float64]:
        """Every supply node runs at the same fraction of its capacity; always feasible."""
        total = self.b2.sum() + self.p_max_last
        return self.b2 * (self.p_sum_demand / total)

    def box_centroid(self) -> NDArray[np.float64]:
        return self.b2 / 2.0

    def chebyshev_center(self) -> Tuple[NDArray[np.float64], float]:
        G, h = self.constraints()
        norms = np.linalg.norm(G, axis=1)
        c = np.zeros(self.dim + 1)
        c[-1] = -1.0
        A_ub = np.hstack([G, norms[:, None]])
        res = linprog(
            c,
            A_ub=A_ub,
            b_ub=h,
            bounds=[(None, None)] * self.dim + [(0, None)],
            method="highs",
        )
        if not res.success:
            raise NumericalError(f"Chebyshev center LP failed: {res.message}")
        return res.x[: self.dim], float(res.x[-1])

    def interior_start(self) -> NDArray[np.float64]:
        """
        The ``auto`` start: box centroid projected into the polytope, pulled toward
        the Chebyshev center until every slack exceeds INTERIOR_SLACK.
        """
        x = self.project(self.box_centroid())
        if self.slacks(x).min() > INTERIOR_SLACK:
            return x

        center, radius = self.chebyshev_center()
        if radius <= INTERIOR_SLACK:
            logger.warning(
                "Supply polytope has no interior (radius %.3e); starting on its boundary", radius
            )
            return x
        for t in np.linspace(0.05, 1.0, 20):
            y = (1.0 - t) * x + t * center
            if self.slacks(y).min() > INTERIOR_SLACK:
                return y
        return center

    def sample(self, rng: np.random.Generator, n: int, max_batches: int = 1000) -> NDArray[np.float64]:
        """Uniform feasible samples by rejection from the capacity box."""
        out = []
        G, h = self.constraints()
        for _ in range(max_batches):
            cand = rng.uniform(0.0, 1.0, size=(max(4 * n, 64), self.dim)) * self.b2
            ok = np.all(cand @ G.T <= h, axis=1)
            out.extend(cand[ok])
            if len(out) >= n:
                return np.array(out[:n])
        raise NumericalError("Rejection sampling could not find enough feasible points")

    # ------------------------------------------------------------------ #
    # Euclidean projection (primal active-set method)
    # ------------------------------------------------------------------ #
    def project(self, y: ArrayLike, max_iter: Optional[int] = None) -> NDArray[np.float64]:
        """
        Solve min 1/2 ||x - y||^2 s.t. G x <= h.

        Starts from the proportional dispatch point with an empty working set,
        keeps every iterate feasible, adds the blocking constraint of each step
        and drops the constraint with the most negative multiplier once the
        equality-constrained subproblem is solved.

        :param y: Point to project
        :return: Projection of y onto the polytope
        """
        y = self._check_dim(y, "y")
        G, h = self.constraints()
        if np.all(G @ y <= h + KKT_TOL):
            return y.copy()

        n = self.dim
        m = len(h)
        x = self.proportional_dispatch()
        working: list = []
        max_iter = max_iter or 10 * (m + n)

        for _ in range(max_iter):
            G_w = G[working]
            k = len(working)
            KKT = np.block([
                [np.eye(n), G_w.T],
                [G_w, np.zeros((k, k))],
            ])
            rhs = np.concatenate([y - x, np.zeros(k)])
            sol = np.linalg.solve(KKT, rhs)
            d, lam = sol[:n], sol[n:]

            if np.linalg.norm(d) <= KKT_TOL:
                if k == 0 or lam.min() >= -KKT_TOL:
                    return x
                working.pop(int(np.argmin(lam)))
                continue

            # ratio test over constraints outside the working set
            step = 1.0
            blocking = None
            rates = G @ d
            for i in range(m):
                if i in working or rates[i] <= KKT_TOL:
                    continue
                t = max(h[i] - G[i] @ x, 0.0) / rates[i]
                if t < step:
                    step, blocking = t, i
            x = x + step * d
            if blocking is not None:
                working.append(blocking)

        raise NumericalError("Active-set projection did not terminate")

    def max_step_to_boundary(self, p: ArrayLike, d: ArrayLike) -> float:
        """
        Largest t with p + t d still feasible (ratio test over all facets).

        :param p: Feasible point
        :param d: Nonzero direction
        :return: t* >= 0
        """
        p = self._check_dim(p)
        d = self._check_dim(d, "d")
        if not np.any(d):
            raise ValueError("Direction must be nonzero")
        G, h = self.constraints()
        rates = G @ d
        slack = np.maximum(h - G @ p, 0.0)
        hits = rates > 1e-14
        if not np.any(hits):
            raise NumericalError("Direction never leaves the polytope; polytope must be bounded")
        return float(np.min(slack[hits] / rates[hits]))


def build_polytope(net: PowerNetwork) -> SupplyPolytope:
    dim = net.n_plus - 1
    A1 = np.tril(np.ones((dim, dim)))
    # capacity of supply nodes i+1..n_plus (1-based), for i = 1..dim
    tail_capacity = np.array([net.p_max[i:].sum() for i in range(1, net.n_plus)])
    b1 = net.p_sum_demand - tail_capacity
    b2 = np.array(net.p_max[:dim], dtype=float)
    return SupplyPolytope(
        A1=A1,
        b1=b1,
        b2=b2,
        p_sum_demand=net.p_sum_demand,
        p_max_last=float(net.p_max[-1]),
    )
