from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from gridmin.errors import ConfigError, GridminError, InputError
from gridmin.io import (
    format_vector,
    parse_vector,
    read_result_point,
    result_document,
    write_json,
)
from gridmin.network import load_network
from gridmin.objective import EvaluationContext
from gridmin.optimizer import (
    IterationTrace,
    OptimizerConfig,
    calibrate_risk_weight,
    calibration_summary,
    init_subgradient,
    steepest_descent,
    two_step,
)
from gridmin.settings import load_settings
from gridmin.sigma_derivatives import SigmaDerivativeEngine

logger = logging.getLogger(__name__)

METHODS = ("evaluate", "gradient", "init", "descend", "two-step", "project", "calibrate")

EXIT_OK = 0
EXIT_INPUT = InputError.exit_code


@dataclass
class RunConfig:
    """
    One CLI invocation.

    ``start`` is ``auto`` (interior start of the polytope), ``random`` (seeded
    feasible sample) or an explicit vector, which is projected into the
    polytope when it lies outside.
    """

    method: str
    network: str
    r: float
    optimizer: OptimizerConfig
    start: Union[str, NDArray[np.float64]] = "auto"
    start_from: Optional[str] = None
    point: Optional[NDArray[np.float64]] = None
    starts: List[NDArray[np.float64]] = field(default_factory=list)
    r_values: Tuple[float, ...] = (0.5, 1.0, 2.0, 3.0, 5.0)
    target: float = 1.0244
    trace_out: Optional[str] = None
    result_out: Optional[str] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"Unknown method '{self.method}'; choose from {', '.join(METHODS)}")
        if not self.r > 0:
            raise ConfigError(f"r must be positive, got {self.r}")
        if self.method == "project" and self.point is None:
            raise ConfigError("The project method needs --point")


# ------------------------------------------------------------------ #
# Argument parsing
# ------------------------------------------------------------------ #
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridmin",
        description="Evaluate and minimize the risk-weighted phase-angle objective of a power network.",
    )
    parser.add_argument("method", choices=METHODS)
    parser.add_argument("--network", required=True, metavar="FILE",
                        help="network JSON file or bundled:<name>")
    parser.add_argument("--r", type=float, default=None, help="risk weight of the deviation term")
    parser.add_argument("--start", default=None,
                        help="'auto', 'random' or comma separated decision vector")
    parser.add_argument("--start-from", default=None, metavar="RESULT",
                        help="start at p_s of an earlier result document")
    parser.add_argument("--point", default=None, help="vector to project (project method)")
    parser.add_argument("--starts", default=None,
                        help="starts for calibrate, separated by ';' (e.g. '23,19,24;19,19,19')")
    parser.add_argument("--r-values", default=None, help="comma separated r values for calibrate")
    parser.add_argument("--target", type=float, default=1.0244, help="reference minimum for calibrate")
    parser.add_argument("--alpha", type=float, default=None)
    parser.add_argument("--beta", type=float, default=None)
    parser.add_argument("--gamma", type=float, default=None)
    parser.add_argument("--eps", type=float, default=None, dest="eps_stop")
    parser.add_argument("--eps-active", type=float, default=None,
                        help="edges within this of the max count as maximizers in descent")
    parser.add_argument("--xi", type=float, default=None)
    parser.add_argument("--max-iters", type=int, default=None)
    parser.add_argument("--inner-iters", type=int, default=None)
    parser.add_argument("--init-iters", type=int, default=None)
    parser.add_argument("--delta-fd", type=float, default=None)
    parser.add_argument("--trace-out", default=None, metavar="FILE")
    parser.add_argument("--result-out", default=None, metavar="FILE")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--settings", default=None, metavar="FILE", help="explicit settings.json")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true")
    verbosity.add_argument("--quiet", "-q", action="store_true")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    settings = load_settings(args.settings)
    opt = OptimizerConfig.from_settings(
        settings,
        r=args.r,
        alpha=args.alpha,
        beta=args.beta,
        gamma=args.gamma,
        eps_stop=args.eps_stop,
        eps_active=args.eps_active,
        xi=args.xi,
        max_iters=args.max_iters,
        inner_iters=args.inner_iters,
        init_iters=args.init_iters,
        delta_fd=args.delta_fd,
        seed=args.seed,
    )

    start: Union[str, NDArray[np.float64]] = "auto"
    if args.start is not None:
        start = args.start if args.start in ("auto", "random") else parse_vector(args.start)

    starts = [parse_vector(s) for s in args.starts.split(";")] if args.starts else []
    r_values = tuple(parse_vector(args.r_values)) if args.r_values else (0.5, 1.0, 2.0, 3.0, 5.0)

    return RunConfig(
        method=args.method,
        network=args.network,
        r=opt.r,
        optimizer=opt,
        start=start,
        start_from=args.start_from,
        point=parse_vector(args.point) if args.point else None,
        starts=starts,
        r_values=r_values,
        target=args.target,
        trace_out=args.trace_out,
        result_out=args.result_out,
        seed=opt.seed,
    )


# ------------------------------------------------------------------ #
# Running
# ------------------------------------------------------------------ #
def resolve_start(config: RunConfig, ctx: EvaluationContext) -> NDArray[np.float64]:
    poly = ctx.poly
    if config.start_from is not None:
        return poly.require(read_result_point(config.start_from), "start")
    if isinstance(config.start, str):
        if config.start == "auto":
            return poly.interior_start()
        if config.start == "random":
            return poly.sample(np.random.default_rng(config.seed), 1)[0]
        raise ConfigError(f"Unknown start '{config.start}'")

    p = np.asarray(config.start, dtype=float)
    projected = poly.project(p)
    if np.linalg.norm(projected - p) > 1e-9:
        logger.warning("Start %s is infeasible; using its projection %s", format_vector(p), format_vector(projected))
    return projected


def _emit(doc: Dict[str, Any], path: Optional[str]) -> None:
    if path:
        write_json(doc, path)
        logger.info("Wrote %s", path)
    else:
        print(json.dumps(doc, indent=2))


def _execute(config: RunConfig) -> None:
    net = load_network(config.network)
    ctx = config.optimizer.context(net)
    cfg = config.optimizer

    if config.method == "project":
        assert config.point is not None
        x = ctx.poly.project(config.point)
        _, slacks = ctx.poly.contains(x)
        _emit(
            {"point": config.point.tolist(), "projection": x.tolist(), "slacks": slacks.tolist()},
            config.result_out,
        )
        return

    if config.method == "calibrate":
        starts = config.starts or [resolve_start(config, ctx)]
        table = calibrate_risk_weight(ctx, starts, cfg, r_values=config.r_values, target=config.target)
        verdict = calibration_summary(table)
        logger.info(
            "Best r=%g with |f* - target| = %.3e, spread %.3e, distance %.4f (%s)",
            verdict["r"],
            verdict["abs_err"],
            verdict["spread"],
            verdict["distance"],
            "passed" if verdict["passed"] else "failed",
        )
        if config.result_out:
            table.to_csv(config.result_out, index=False, float_format="%.10g")
        else:
            print(table.to_string(index=False))
        return

    p0 = resolve_start(config, ctx)

    if config.method == "gradient":
        engine = SigmaDerivativeEngine(ctx, p0)
        edges = [
            {
                "edge": b.edge,
                "sigma": b.sigma,
                "gradient": b.G1.tolist(),
                "hessian": b.H1.tolist() if b.H1 is not None else None,
            }
            for b in engine.bundles()
        ]
        _emit({"p_s": p0.tolist(), "edges": edges}, config.result_out)
        return

    trace: Optional[IterationTrace] = None
    if config.method == "evaluate":
        p_star = p0
    elif config.method == "init":
        p_star, trace = init_subgradient(ctx, p0, cfg)
    elif config.method == "descend":
        p_star, trace = steepest_descent(ctx, p0, cfg)
    else:
        p_star, trace = two_step(ctx, p0, cfg)

    ev = ctx.evaluate(p_star)
    doc = result_document(net, ev, config.method, trace.summary if trace else None)
    if trace is not None and config.trace_out:
        trace.to_csv(config.trace_out)
        logger.info("Wrote trace %s", config.trace_out)
    _emit(doc, config.result_out)


def run(config: RunConfig) -> int:
    """
    Execute one run; artifacts are written only when it succeeds.

    :return: Process exit code
    """
    try:
        _execute(config)
    except GridminError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except (FileNotFoundError, ValueError) as e:
        logger.error("%s", e)
        return EXIT_INPUT
    return EXIT_OK


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="[%(name)s] %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        config = config_from_args(args)
    except GridminError as e:
        logger.error("%s", e)
        return e.exit_code
    except (FileNotFoundError, ValueError) as e:
        logger.error("%s", e)
        return EXIT_INPUT
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
