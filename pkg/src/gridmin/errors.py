from __future__ import annotations

from typing import Any, Optional, Sequence


class GridminError(Exception):
    """Base class for every error raised by the library. ``exit_code`` is used by the CLI."""

    exit_code = 1


# ------------------------------------------------------------------ #
# Input errors (exit code 2)
# ------------------------------------------------------------------ #
class InputError(GridminError):
    exit_code = 2


class NetworkSchemaError(InputError):
    pass


class DisconnectedNetworkError(InputError):
    pass


class SupplyDeficitError(InputError):
    pass


class ConfigError(InputError):
    pass


class DimensionMismatchError(InputError, ValueError):
    pass


class InfeasiblePointError(InputError):
    def __init__(self, message: str, slacks: Optional[Sequence[float]] = None) -> None:
        super().__init__(message)
        self.slacks = slacks


# ------------------------------------------------------------------ #
# Evaluation errors
# ------------------------------------------------------------------ #
class SaturationError(GridminError):
    """A line reached |sin| >= 1 - margin; ``edge`` is 1-based."""

    exit_code = 3

    def __init__(self, edge: int, value: float, last_point: Any = None) -> None:
        super().__init__(
            f"Edge {edge} saturates: |sin of phase difference| = {abs(value):.12g}"
        )
        self.edge = edge
        self.value = value
        self.last_point = last_point


class DegenerateSpectrumError(GridminError):
    exit_code = 4

    def __init__(self, cluster: Sequence[int], gap: float) -> None:
        super().__init__(
            f"Eigenvalues {list(cluster)} are clustered (gap {gap:.3e}); "
            "eigenvector differences are ill-posed"
        )
        self.cluster = tuple(cluster)
        self.gap = gap


class IterationLimitError(GridminError):
    exit_code = 5

    def __init__(self, message: str, last_point: Any = None, trace: Any = None) -> None:
        super().__init__(message)
        self.last_point = last_point
        self.trace = trace


# ------------------------------------------------------------------ #
# Numerical failures (exit code 6)
# ------------------------------------------------------------------ #
class NumericalError(GridminError):
    exit_code = 6


class NotHurwitzError(NumericalError):
    def __init__(self, eigenvalue: complex) -> None:
        super().__init__(
            f"System matrix is not Hurwitz: eigenvalue {eigenvalue:.6g} has real part "
            f"{eigenvalue.real:.3e}"
        )
        self.eigenvalue = eigenvalue


class LyapunovResidualError(NumericalError):
    def __init__(self, residual: float, bound: float) -> None:
        super().__init__(
            f"Lyapunov residual {residual:.3e} exceeds the tolerance {bound:.3e}"
        )
        self.residual = residual
        self.bound = bound


class FlatRegionError(NumericalError):
    pass


class VanishingSigmaError(NumericalError):
    pass
