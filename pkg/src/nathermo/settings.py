"""Numerical tolerances shared by every module.

Values live in one frozen dataclass. A run can swap them out with
:func:`override_tolerances`, which is scoped to the current context so that
concurrent sweeps never see each other's settings.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class Tolerances:
    hermitian: float = 1e-12          # ||M - M^dag||_max at construction
    unitary: float = 1e-10            # ||U^dag U - 1||_max
    degeneracy: float = 1e-10         # eigenvalues closer than this are grouped
    prob_floor: float = 1e-15         # probabilities below are zeros in logs
    neg_prob: float = 1e-12           # allowed negative round-off in probabilities
    v_element: float = 1e-12          # relative threshold on <j nu|V|i mu>
    overflow: float = 700.0           # max |Re(scale) * eigenvalue| in exponentials
    jacobi_sweeps: int = 100          # eigensolver iteration cap
    approximate_mass: float = 1e-9    # excluded mass above which results are approximate


DEFAULT_TOLERANCES = Tolerances()

_current: contextvars.ContextVar[Tolerances] = contextvars.ContextVar(
    "nathermo_tolerances", default=DEFAULT_TOLERANCES
)


def current_tolerances() -> Tolerances:
    return _current.get()


@contextlib.contextmanager
def override_tolerances(**changes):
    """Temporarily replace selected tolerance values.

    >>> with override_tolerances(v_element=1e-10):
    ...     current_tolerances().v_element
    1e-10
    """
    token = _current.set(replace(_current.get(), **changes))
    try:
        yield _current.get()
    finally:
        _current.reset(token)
