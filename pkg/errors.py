"""
Exception hierarchy shared by all stochastic-kg modules
"""

from typing import Optional


class StochasticKGError(Exception):
    """Base class for every error raised by the library"""


class NodeSingularity(StochasticKGError):
    """Wave function vanishes at an evaluation point, so the drift diverges"""

    def __init__(self, count: int, epsilon: float):
        self.count = count
        self.epsilon = epsilon
        super().__init__(f"|phi| < {epsilon:g} at {count} point(s): interference node")


class IncompatiblePair(StochasticKGError):
    """Wave function model cannot be evaluated together with the given potential"""


class OffShellMomentum(StochasticKGError, ValueError):
    """Four-momentum violates p.p = m0^2 c^2"""


class PathAbortError(StochasticKGError):
    """Too many sample paths ran into nodes of the wave function"""

    def __init__(self, aborted: int, total: int, limit: float):
        self.aborted = aborted
        self.total = total
        self.limit = limit
        super().__init__(
            f"{aborted} of {total} paths aborted at nodes (limit {limit:.1%})")


class InsufficientSlices(StochasticKGError):
    """Density grid has too few tau slices for the requested operator"""


class AllBinsMasked(StochasticKGError):
    """Every bin was masked before a log-density operation"""


class AxesMismatch(StochasticKGError):
    """Two grids or current fields were built on different axes"""


class ConfigError(StochasticKGError):
    """Base class for scenario configuration problems"""


class ParseError(ConfigError):
    """Malformed scenario document or unknown key"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(ConfigError):
    """Scenario value rejected; `field` holds the dotted key path"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
