from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray

from gridmin.directional import DirectionalModel, generalized_subgradient
from gridmin.errors import (
    ConfigError,
    FlatRegionError,
    IterationLimitError,
    SaturationError,
)
from gridmin.network import PowerNetwork
from gridmin.objective import CaseKind, EvaluationContext
from gridmin.polytope import INTERIOR_SLACK

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CURVATURE_TOL = 1e-9
FLAT_WINDOW = 20
FLAT_RANGE = 1e-14

# stop reasons that count as regular termination of the descent
STOP_RULE_REASONS = ("eps", "stationary", "positive-curvature")


# ------------------------------------------------------------------ #
# Configuration
# ------------------------------------------------------------------ #
@dataclass(frozen=True)
class OptimizerConfig:
    r: float = 1.0
    alpha: float = 0.3
    beta: float = 0.5
    gamma: float = 0.5
    inner_iters: int = 600
    inner_step_scale: Optional[float] = None
    init_iters: int = 300
    init_phase1_exp: float = 0.5
    init_phase2_exp: float = 1.1
    init_step_scale: float = 1.0
    eps_stop: float = 1e-6
    eps_active: float = 1e-3
    eps_active_max: float = 1e-1
    stall_limit: int = 3
    xi: float = 0.5
    xi_vote: bool = False
    max_iters: int = 500
    max_halvings: int = 60
    delta_fd: float = 1e-4
    richardson_check: bool = False
    theta: float = 0.5
    tol_zero: float = 1e-10
    tol_max: float = 1e-9
    tol_fprime: float = 1e-10
    lyapunov_method: str = "schur"
    workers: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.r >= 0, "r must be nonnegative"),
            (0 < self.alpha < 0.5, "alpha must lie in (0, 0.5)"),
            (0 < self.beta < 1, "beta must lie in (0, 1)"),
            (0 < self.gamma < 1, "gamma must lie in (0, 1)"),
            (self.inner_iters >= 1, "inner_iters must be positive"),
            (self.inner_step_scale is None or self.inner_step_scale > 0, "inner_step_scale must be positive"),
            (self.init_iters >= 0, "init_iters must be nonnegative"),
            (self.init_phase1_exp > 0 and self.init_phase2_exp > 0, "init step exponents must be positive"),
            (self.init_step_scale > 0, "init_step_scale must be positive"),
            (self.eps_stop > 0, "eps_stop must be positive"),
            (0 <= self.eps_active <= self.eps_active_max, "eps_active must lie in [0, eps_active_max]"),
            (self.stall_limit >= 0, "stall_limit must be nonnegative"),
            (0 < self.xi < 1, "xi must lie in (0, 1)"),
            (self.max_iters >= 1, "max_iters must be positive"),
            (self.max_halvings >= 1, "max_halvings must be positive"),
            (self.delta_fd > 0, "delta_fd must be positive"),
            (0 <= self.theta <= 1, "theta must lie in [0, 1]"),
            (self.lyapunov_method in ("schur", "kron"), "lyapunov_method must be schur or kron"),
            (self.workers >= 1, "workers must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any], **overrides: Any) -> "OptimizerConfig":
        """Build from a settings dictionary; ``overrides`` that are None are ignored."""
        names = {f.name for f in fields(cls)}
        values = {k: v for k, v in settings.items() if k in names}
        values.update({k: v for k, v in overrides.items() if v is not None and k in names})
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def context(self, net: PowerNetwork) -> EvaluationContext:
        return EvaluationContext(
            net,
            self.r,
            tol_zero=self.tol_zero,
            tol_max=self.tol_max,
            delta_fd=self.delta_fd,
            theta=self.theta,
            lyapunov_method=self.lyapunov_method,
            richardson_check=self.richardson_check,
            workers=self.workers,
        )


# ------------------------------------------------------------------ #
# Trace
# ------------------------------------------------------------------ #
@dataclass(frozen=True)
class TraceRecord:
    iter: int
    phase: str
    p: Tuple[float, ...]
    f: float
    fprime: float
    t: float
    case: str
    f_min: float
    wall_time: float


@dataclass
class IterationTrace:
    """
    Iterates of one run. ``phase`` is ``init-1``, ``init-2`` or ``descent``;
    wall times are kept in memory but never written, so trace files are
    reproducible.
    """

    dim: int
    records: List[TraceRecord] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def append(
        self,
        phase: str,
        p: NDArray,
        f: float,
        case: CaseKind,
        fprime: float = math.nan,
        t: float = math.nan,
        f_min: Optional[float] = None,
    ) -> TraceRecord:
        record = TraceRecord(
            iter=len(self.records),
            phase=phase,
            p=tuple(float(v) for v in p),
            f=float(f),
            fprime=float(fprime),
            t=float(t),
            case=case.value,
            f_min=float(f if f_min is None else f_min),
            wall_time=time.perf_counter() - self._t0,
        )
        self.records.append(record)
        return record

    def phase_records(self, phase: str) -> List[TraceRecord]:
        return [r for r in self.records if r.phase == phase]

    def f_values(self, phase: Optional[str] = None) -> NDArray[np.float64]:
        recs = self.records if phase is None else self.phase_records(phase)
        return np.array([r.f for r in recs])

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for rec in self.records:
            row: Dict[str, Any] = {"iter": rec.iter, "phase": rec.phase}
            for i, value in enumerate(rec.p, start=1):
                row[f"p{i}"] = value
            row.update({"f": rec.f, "fprime": rec.fprime, "t": rec.t, "case": rec.case})
            rows.append(row)
        columns = ["iter", "phase"] + [f"p{i}" for i in range(1, self.dim + 1)] + ["f", "fprime", "t", "case"]
        return pd.DataFrame(rows, columns=columns)

    def to_csv(self, path: PathLike) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g", na_rep="")


# ------------------------------------------------------------------ #
# a) Direction finding
# ------------------------------------------------------------------ #
def _find_direction(model: DirectionalModel, cfg: OptimizerConfig) -> Tuple[NDArray, float, bool]:
    """
    Projected subgradient minimization of v -> f'(p, v) over {v : p + v feasible}.

    :return: (v, f'(p, v), True when only a zero-derivative segment was found)
    """
    poly = model.ctx.poly
    p = model.p
    scale = cfg.inner_step_scale or float(np.linalg.norm(poly.b2))
    tol = cfg.tol_fprime

    v = np.zeros_like(p)
    best_v, best = v.copy(), 0.0
    segment_v: Optional[NDArray] = None

    for j in range(1, cfg.inner_iters + 1):
        g = model.subgradient_of_fprime(v, cfg.theta)
        norm_g = float(np.linalg.norm(g))
        if norm_g <= 1e-15:
            break
        v = poly.project(p + v - (scale / j**cfg.gamma) * g / norm_g) - p
        value = model.fprime(v)
        if value < best:
            best, best_v = value, v.copy()
        if abs(value) <= tol and np.any(v):
            if segment_v is None or np.linalg.norm(v) < np.linalg.norm(segment_v):
                segment_v = v.copy()

    if model.label.kind is CaseKind.CASE11 and len(model.active) == 1:
        grad = model.edge_gradient(model.active[0])
        norm_grad = float(np.linalg.norm(grad))
        if norm_grad > 0:
            d = -grad / norm_grad
            t_star = poly.max_step_to_boundary(p, d)
            if t_star > 0:
                candidate = poly.project(p + t_star * d) - p
                value = model.fprime(candidate)
                if value < best:
                    best, best_v = value, candidate

    if best < -tol:
        return best_v, best, False
    if segment_v is not None:
        logger.warning(
            "Inner minimum 0 is attained along a nonzero direction; using the shortest one (norm %.3e)",
            np.linalg.norm(segment_v),
        )
        return segment_v, model.fprime(segment_v), True
    return np.zeros_like(p), 0.0, False


def steepest_direction(
    ctx: EvaluationContext, p: ArrayLike, cfg: OptimizerConfig
) -> Tuple[NDArray[np.float64], float]:
    """
    :return: (v*, f'(p, v*)); f'(p, v*) <= 0 since v = 0 is always admissible
    """
    v, fprime, _ = _find_direction(DirectionalModel(ctx, p), cfg)
    return v, fprime


def _descent_direction(
    model: DirectionalModel, cfg: OptimizerConfig, width: float
) -> Tuple[DirectionalModel, NDArray, float, bool]:
    """
    Direction search over near-active edge sets, widest first.

    The width shrinks tenfold until its model has a descent direction; below
    tol_max the exact maximizer set is used, whatever it returns.

    :return: (model used, v, its f'(p, v), segment flag)
    """
    floor = cfg.tol_max * max(1.0, abs(model.ev.f))
    tried: Set[Tuple[int, ...]] = set()
    while True:
        near = model.near_active(width) if width > floor else model
        if near is model or near.active not in tried:
            v, fprime, on_segment = _find_direction(near, cfg)
            if near is model or fprime < -cfg.tol_fprime:
                return near, v, fprime, on_segment
            tried.add(near.active)
        width /= 10.0


# ------------------------------------------------------------------ #
# b) Line search
# ------------------------------------------------------------------ #
def armijo_backtracking(
    phi: Callable[[float], float],
    f0: float,
    fprime: float,
    alpha: float,
    beta: float,
    max_halvings: int,
) -> Tuple[float, int]:
    """
    Largest t = beta^m, m <= max_halvings, with phi(t) <= f0 + alpha t fprime.

    ``phi`` may return inf for rejected trial points.
    """
    t = 1.0
    for m in range(max_halvings + 1):
        if phi(t) <= f0 + alpha * t * fprime:
            return t, m
        t *= beta
    raise IterationLimitError(f"Armijo line search failed after {max_halvings} halvings")


def line_search(
    ctx: EvaluationContext, p: ArrayLike, v: ArrayLike, fprime: float, cfg: OptimizerConfig
) -> float:
    """
    Backtracking along v from t = 1.

    :param fprime: f'(p, v), must be negative
    :return: Accepted step length t
    """
    if not fprime < 0:
        raise ValueError(f"Line search needs a descent direction, got f'(p, v) = {fprime}")
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    f0 = ctx.f(p)

    def phi(t: float) -> float:
        try:
            return ctx.f(p + t * v)
        except SaturationError as e:
            logger.debug("Trial step t=%.3e saturates edge %d", t, e.edge)
            return math.inf

    t, halvings = armijo_backtracking(phi, f0, fprime, cfg.alpha, cfg.beta, cfg.max_halvings)
    logger.debug("Line search accepted t=%.6g after %d halvings", t, halvings)
    return t


# ------------------------------------------------------------------ #
# c) Steepest descent
# ------------------------------------------------------------------ #
def _trial_curvature(ctx: EvaluationContext, p: NDArray, v: NDArray, cfg: OptimizerConfig) -> float:
    """f''(p + xi v, v); the trial direction is shortened so it stays inside the polytope."""
    xis = (0.25, 0.5, 0.75) if cfg.xi_vote else (cfg.xi,)
    values = []
    for xi in xis:
        s = 1.0 - xi
        model = DirectionalModel(ctx, p + xi * v)
        values.append(model.fsecond(s * v) / s**2)
    return float(np.median(values))


def convergence_rate(f_values: Sequence[float]) -> Optional[float]:
    """
    Smallest c with |f_k - f*| <= c^k |f_0 - f*|, f* the last value.
    """
    fs = np.asarray(f_values, dtype=float)
    if len(fs) < 3:
        return None
    gaps = np.abs(fs - fs[-1])
    if gaps[0] == 0:
        return None
    ratios = [
        (gaps[k] / gaps[0]) ** (1.0 / k) for k in range(1, len(fs) - 1) if gaps[k] > 0
    ]
    return max(ratios) if ratios else None


def _check_flat(history: List[float], v: NDArray) -> None:
    if len(history) >= FLAT_WINDOW and np.any(v):
        window = history[-FLAT_WINDOW:]
        if max(window) - min(window) < FLAT_RANGE:
            raise FlatRegionError(
                f"Objective constant to {FLAT_RANGE:g} over the last {FLAT_WINDOW} iterates "
                "with a nonzero direction"
            )


def steepest_descent(
    ctx: EvaluationContext,
    p0: ArrayLike,
    cfg: OptimizerConfig,
    trace: Optional[IterationTrace] = None,
) -> Tuple[NDArray[np.float64], IterationTrace]:
    """
    Steepest descent with directional derivatives and Armijo backtracking.

    Directions are computed over the edges within ``eps_active`` of the max
    (see :func:`_descent_direction`), so near-tied lines count as maximizers.
    Stops when the best direction is zero, when a zero-derivative direction
    has positive curvature at the trial point, or when one step decreases f
    by at most ``eps_stop``. A small decrease caused by an edge outside the
    searched set overtaking does not stop the run; the set is widened
    instead, at most ``stall_limit`` times in a row.

    :param ctx: Evaluation context
    :param p0: Feasible start
    :param cfg: Optimizer configuration
    :param trace: Trace to extend (a new one when omitted)
    :return: (last iterate, trace)
    """
    poly = ctx.poly
    p = poly.require(p0, "start").copy()
    if poly.slacks(p).min() <= INTERIOR_SLACK:
        logger.warning("Descent starts on the boundary of the supply polytope")
    trace = trace if trace is not None else IterationTrace(ctx.dim)

    ev = ctx.evaluate(p)
    f = ev.f
    trace.append("descent", p, f, ev.case)
    history = [f]
    stop_reason = None
    width = cfg.eps_active
    stalls = 0

    try:
        for i in range(1, cfg.max_iters + 1):
            used, v, fprime, on_segment = _descent_direction(DirectionalModel(ctx, p), cfg, width)

            if not np.any(v):
                stop_reason = "stationary"
                break

            if fprime >= -cfg.tol_fprime:
                curvature = _trial_curvature(ctx, p, v, cfg)
                logger.info("Zero-derivative direction found, trial curvature %.6g", curvature)
                if curvature > CURVATURE_TOL:
                    stop_reason = "positive-curvature"
                    break
                if curvature < -CURVATURE_TOL:
                    q = p + v
                    fq = ctx.f(q)
                    if fq < f:
                        p, f = q, fq
                        ev = ctx.evaluate(p)
                        trace.append("descent", p, f, ev.case, fprime=fprime, t=1.0)
                        history.append(f)
                        continue
                    logger.warning("Inflection step does not decrease f; stopping at the current point")
                    stop_reason = "inflection-no-decrease"
                    break
                logger.warning("Trial curvature is zero; treating the point as a local minimizer")
                stop_reason = "zero-curvature"
                break

            t = line_search(ctx, p, v, fprime, cfg)
            q = p + t * v
            fq = ctx.f(q)
            decrease = f - fq
            p, f = q, fq
            ev = ctx.evaluate(p)
            trace.append("descent", p, f, ev.case, fprime=fprime, t=t)
            history.append(f)
            logger.info("descent %d: f=%.10f f'=%.3e t=%.4g case=%s", i, f, fprime, t, ev.case.value)

            _check_flat(history, v)
            if decrease > cfg.eps_stop:
                width, stalls = cfg.eps_active, 0
                continue
            overtaken = not set(ev.I_max) <= set(used.active)
            if overtaken and stalls < cfg.stall_limit:
                stalls += 1
                width = min(10.0 * max(width, cfg.tol_max), cfg.eps_active_max)
                logger.info("Step cut short by edge(s) %s; widening the active set to %.1e",
                            sorted(set(ev.I_max) - set(used.active)), width)
                continue
            stop_reason = "eps"
            break
        else:
            raise IterationLimitError(
                f"Steepest descent did not stop within {cfg.max_iters} iterations",
                last_point=p,
                trace=trace,
            )
    except SaturationError as e:
        e.last_point = p
        raise

    rate = convergence_rate(history)
    trace.summary.update({"stop_reason": stop_reason, "convergence_rate": rate})
    logger.info(
        "Descent stopped (%s) at f=%.10f after %d iterations; empirical rate %s",
        stop_reason,
        f,
        len(history) - 1,
        "n/a" if rate is None else f"{rate:.4f}",
    )
    return p, trace


# ------------------------------------------------------------------ #
# d) Projected generalized subgradient initialization
# ------------------------------------------------------------------ #
def init_subgradient(
    ctx: EvaluationContext,
    p0: ArrayLike,
    cfg: OptimizerConfig,
    trace: Optional[IterationTrace] = None,
) -> Tuple[NDArray[np.float64], IterationTrace]:
    """
    Two phases of p <- P(p - c g / k^e): exponent ``init_phase1_exp`` from p0,
    then ``init_phase2_exp`` restarted from the best phase-1 point.

    :return: (best visited point, trace)
    """
    poly = ctx.poly
    p = poly.require(p0, "start").copy()
    trace = trace if trace is not None else IterationTrace(ctx.dim)

    ev = ctx.evaluate(p)
    best_p, best_f = p.copy(), ev.f
    trace.append("init-1", p, ev.f, ev.case, f_min=best_f)

    phases = (("init-1", cfg.init_phase1_exp), ("init-2", cfg.init_phase2_exp))
    try:
        for phase, exponent in phases:
            p = best_p.copy()
            for k in range(1, cfg.init_iters + 1):
                g = generalized_subgradient(ctx, p, cfg.theta).g
                p = poly.project(p - cfg.init_step_scale * g / k**exponent)
                ev = ctx.evaluate(p)
                if ev.f < best_f:
                    best_p, best_f = p.copy(), ev.f
                trace.append(phase, p, ev.f, ev.case, f_min=best_f)
                if k % 50 == 0:
                    logger.info("%s %d: f=%.10f f_min=%.10f", phase, k, ev.f, best_f)
    except SaturationError as e:
        e.last_point = p
        raise

    trace.summary["init_f_min"] = best_f
    return best_p, trace


def two_step(
    ctx: EvaluationContext, p0: ArrayLike, cfg: OptimizerConfig
) -> Tuple[NDArray[np.float64], IterationTrace]:
    """Initialization phases followed by steepest descent from the best point found."""
    p_init, trace = init_subgradient(ctx, p0, cfg)
    logger.info("Initialization finished at f=%.10f", trace.summary["init_f_min"])
    return steepest_descent(ctx, p_init, cfg, trace=trace)


# ------------------------------------------------------------------ #
# e) Risk-weight calibration
# ------------------------------------------------------------------ #
def calibrate_risk_weight(
    ctx: EvaluationContext,
    starts: Sequence[ArrayLike],
    cfg: OptimizerConfig,
    r_values: Sequence[float] = (0.5, 1.0, 2.0, 3.0, 5.0),
    target: float = 1.0244,
) -> pd.DataFrame:
    """
    Run the two-step method from every start for every r.

    One row per r: the minima per start, the error of the first minimum
    against ``target``, the spread of the minima and the largest distance
    between minimizers.
    """
    rows = []
    for r in r_values:
        run_ctx = ctx.with_r(r)
        run_cfg = replace(cfg, r=r)
        minima, points, reasons = [], [], []
        for start in starts:
            p_star, trace = two_step(run_ctx, start, run_cfg)
            minima.append(run_ctx.f(p_star))
            points.append(p_star)
            reasons.append(trace.summary.get("stop_reason"))
        distance = max(
            (float(np.linalg.norm(a - b)) for i, a in enumerate(points) for b in points[i + 1 :]),
            default=0.0,
        )
        row: Dict[str, Any] = {"r": r}
        for j, (f_star, p_star) in enumerate(zip(minima, points), start=1):
            row[f"f_{j}"] = f_star
            row[f"p_{j}"] = " ".join(f"{v:.6f}" for v in p_star)
        row.update({
            "abs_err": abs(minima[0] - target),
            "spread": max(minima) - min(minima),
            "distance": distance,
            "stop_reasons": " ".join(str(s) for s in reasons),
        })
        rows.append(row)
        logger.info("r=%g: minima %s, distance %.4f", r, ["%.6f" % m for m in minima], distance)
    return pd.DataFrame(rows)


def calibration_summary(
    table: pd.DataFrame,
    target_tol: float = 5e-2,
    spread_tol: float = 2e-3,
    min_distance: float = 1.0,
) -> Dict[str, Any]:
    """
    Verdict on a calibration table.

    At the r whose first minimum is closest to the target, the runs must
    reach minima within ``spread_tol`` of each other, at minimizers more than
    ``min_distance`` apart, and every run must end by a stop rule. When no r
    lands within ``target_tol`` only distinct minimizers at some r are
    required.
    """
    best = table.loc[table["abs_err"].idxmin()]
    calibrated = bool(best["abs_err"] <= target_tol)
    reasons = str(best["stop_reasons"]).split()
    if calibrated:
        passed = (
            best["spread"] <= spread_tol
            and best["distance"] > min_distance
            and all(reason in STOP_RULE_REASONS for reason in reasons)
        )
    else:
        passed = bool((table["distance"] > min_distance).any())
    return {
        "r": float(best["r"]),
        "abs_err": float(best["abs_err"]),
        "spread": float(best["spread"]),
        "distance": float(best["distance"]),
        "stop_reasons": reasons,
        "calibrated": calibrated,
        "passed": bool(passed),
    }
