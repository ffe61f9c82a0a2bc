"""Exception types raised by the estimators."""

from __future__ import annotations


class PanelError(Exception):
    """Base class for all package errors."""


class PanelStructureError(PanelError, ValueError):
    """Malformed panel: duplicate cells, empty input, bad stratum map."""


class RankDeficient(PanelError):
    """A moment matrix needed for estimation is singular.

    Parameters
    ----------
    message : str
    columns : sequence of str, optional
        Names of the regressors implicated in the deficiency.
    equation : str, optional
    """

    def __init__(self, message, columns=(), equation=None):
        self.columns = tuple(columns)
        self.equation = equation
        parts = [message]
        if equation is not None:
            parts.append(f"equation {equation}")
        if self.columns:
            parts.append("columns: " + ", ".join(self.columns))
        parts.append("(Within regressors must exclude the intercept)")
        super().__init__("; ".join(parts))


class DegenerateStratum(PanelError):
    """A stratum-level estimator has a nonpositive denominator."""

    def __init__(self, message, stratum=None, equation=None):
        self.stratum = stratum
        self.equation = equation
        where = []
        if stratum is not None:
            where.append(f"stratum {stratum}")
        if equation is not None:
            where.append(f"equation pair {equation}")
        super().__init__(message + (f" ({', '.join(where)})" if where else ""))


class NotPD(PanelError):
    """A covariance matrix that must be positive definite is not."""

    def __init__(self, message, stratum=None, duration=None):
        self.stratum = stratum
        self.duration = duration
        where = []
        if stratum is not None:
            where.append(f"stratum {stratum}")
        if duration is not None:
            where.append(f"duration {duration}")
        super().__init__(message + (f" ({', '.join(where)})" if where else ""))
