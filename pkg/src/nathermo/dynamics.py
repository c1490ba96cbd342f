"""Driving protocols, time-ordered propagators and conservation diagnostics.

The joint generator is G(t) = H(t) (x) 1 + 1 (x) H^R + V with the system
factor first. Time dependence enters through ``DrivenTerm`` objects, each a
fixed operator times a scalar schedule, so a whole slice grid can be
assembled with array arithmetic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .linalg import (
    ConvergenceError,
    DimensionError,
    HermitianOperator,
    UnitaryOperator,
    commutator,
    expm_hermitian,
    max_norm,
    tensor,
)
from .settings import current_tolerances

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinearRamp:
    """g(t) = g0 (1 - t/tau) + g_tau t/tau on [0, tau]."""

    g0: float
    g_tau: float
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"ramp duration must be positive, got {self.tau}")

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        slack = 1e-12 * self.tau
        if np.any(t_arr < -slack) or np.any(t_arr > self.tau + slack):
            raise ValueError(f"time {t} outside [0, {self.tau}]")
        s = t_arr / self.tau
        out = self.g0 * (1.0 - s) + self.g_tau * s
        return float(out) if out.ndim == 0 else out

    def mirrored(self) -> LinearRamp:
        return LinearRamp(self.g_tau, self.g0, self.tau)


def linear_ramp(g0: float, g_tau: float, tau: float) -> LinearRamp:
    return LinearRamp(float(g0), float(g_tau), float(tau))


@dataclass(frozen=True, eq=False)
class DrivenTerm:
    operator: HermitianOperator
    schedule: Callable  # vectorised: accepts float or ndarray of times


@dataclass(frozen=True, eq=False)
class Protocol:
    """A finite-duration protocol on system (x) reservoir.

    H(t) = system_hamiltonian + sum_d schedule_d(t) operator_d and
    A_k(t) = system_charges[k] + sum over charge_drive entries for k.
    """

    duration: float
    system_hamiltonian: HermitianOperator
    reservoir_hamiltonian: HermitianOperator
    interaction: HermitianOperator
    system_charges: tuple[HermitianOperator, ...]
    reservoir_charges: tuple[HermitianOperator, ...]
    drive: tuple[DrivenTerm, ...] = ()
    charge_drive: tuple[tuple[int, DrivenTerm], ...] = ()
    ramp: LinearRamp | None = None

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("protocol duration must be positive")
        object.__setattr__(self, "system_charges", tuple(self.system_charges))
        object.__setattr__(self, "reservoir_charges", tuple(self.reservoir_charges))
        object.__setattr__(self, "drive", tuple(self.drive))
        object.__setattr__(self, "charge_drive", tuple(self.charge_drive))
        ds, dr = self.system_hamiltonian.dim, self.reservoir_hamiltonian.dim
        if self.interaction.dim != ds * dr:
            raise DimensionError(
                f"interaction dim {self.interaction.dim} != {ds} x {dr}"
            )
        if len(self.system_charges) != len(self.reservoir_charges):
            raise ValueError("system and reservoir charge lists differ in length")
        for c in self.system_charges:
            if c.dim != ds:
                raise DimensionError(f"system charge {c.label!r} has dim {c.dim}")
        for c in self.reservoir_charges:
            if c.dim != dr:
                raise DimensionError(f"reservoir charge {c.label!r} has dim {c.dim}")
        for d in self.drive:
            if d.operator.dim != ds:
                raise DimensionError("drive operator must act on the system")
        for k, d in self.charge_drive:
            if not 0 <= k < len(self.system_charges) or d.operator.dim != ds:
                raise DimensionError(f"bad charge drive for charge index {k}")

    @property
    def dims(self) -> tuple[int, int]:
        return self.system_hamiltonian.dim, self.reservoir_hamiltonian.dim

    @property
    def n_charges(self) -> int:
        return len(self.system_charges)

    @property
    def is_driven(self) -> bool:
        return bool(self.drive or self.charge_drive)

    def hamiltonian_at(self, t: float) -> HermitianOperator:
        m = self.system_hamiltonian.matrix.copy()
        for d in self.drive:
            m = m + float(d.schedule(t)) * d.operator.matrix
        return HermitianOperator(m, f"H({t:g})")

    def charges_at(self, t: float) -> tuple[HermitianOperator, ...]:
        out = []
        for k, base in enumerate(self.system_charges):
            m = base.matrix
            for kk, d in self.charge_drive:
                if kk == k:
                    m = m + float(d.schedule(t)) * d.operator.matrix
            out.append(HermitianOperator(m, f"{base.label}({t:g})"))
        return tuple(out)

    def _static_generator(self) -> np.ndarray:
        ds, dr = self.dims
        return (
            tensor(self.system_hamiltonian.matrix, np.eye(dr))
            + tensor(np.eye(ds), self.reservoir_hamiltonian.matrix)
            + self.interaction.matrix
        )

    def generator_at(self, t: float) -> HermitianOperator:
        return HermitianOperator(self.generator_grid(np.array([t]))[0], f"G({t:g})")

    def generator_grid(self, times: np.ndarray) -> np.ndarray:
        """Joint generators G(t) stacked along a leading axis."""
        _, dr = self.dims
        G = np.broadcast_to(self._static_generator(), (len(times),) + (self.interaction.dim,) * 2)
        G = G.copy()
        for d in self.drive:
            f = np.broadcast_to(np.asarray(d.schedule(times), dtype=float), times.shape)
            G += f[:, None, None] * tensor(d.operator.matrix, np.eye(dr))[None]
        return G

    def mirrored(self) -> Protocol:
        """The same protocol with every schedule run backwards in time."""
        tau = self.duration

        def flip(term):
            return DrivenTerm(term.operator, lambda t, f=term.schedule: f(tau - np.asarray(t)))

        return Protocol(
            tau,
            self.system_hamiltonian,
            self.reservoir_hamiltonian,
            self.interaction,
            self.system_charges,
            self.reservoir_charges,
            tuple(flip(d) for d in self.drive),
            tuple((k, flip(d)) for k, d in self.charge_drive),
            self.ramp.mirrored() if self.ramp else None,
        )


@dataclass(frozen=True)
class PropagatorConfig:
    slices: int = 2048
    target_error: float = 1e-9
    max_slices: int = 2**20

    def __post_init__(self):
        if self.slices < 1:
            raise ValueError("slices must be >= 1")
        if self.max_slices < self.slices:
            raise ValueError("max_slices must be >= slices")


@dataclass
class PropagatorResult:
    unitary: UnitaryOperator
    slices: int
    error_estimate: float
    history: list = field(default_factory=list)


def _batched_expm(G: np.ndarray, scale: complex) -> np.ndarray:
    # slice exponentials through LAPACK eigh; every slice is small and Hermitian
    w, v = np.linalg.eigh(G)
    return (v * np.exp(scale * w)[:, None, :]) @ np.conj(np.swapaxes(v, 1, 2))


def _ordered_product(S: np.ndarray) -> np.ndarray:
    """S[-1] @ ... @ S[0] by pairwise reduction (later slices act on the left)."""
    eye = np.eye(S.shape[-1], dtype=S.dtype)[None]
    while len(S) > 1:
        if len(S) % 2:
            S = np.concatenate([S, eye])
        S = S[1::2] @ S[0::2]
    return S[0]


def nearest_unitary(m: np.ndarray) -> np.ndarray:
    """Unitary polar factor; removes rounding drift accumulated over many slices."""
    w, _, vh = np.linalg.svd(m)
    return w @ vh


def midpoint_product(
    p: Protocol, n_slices: int, t0: float = 0.0, t1: float | None = None, sign: float = -1.0
) -> np.ndarray:
    """prod_{k=N..1} exp(sign*i G(t_k + dt/2) dt) over [t0, t1]."""
    t1 = p.duration if t1 is None else t1
    dt = (t1 - t0) / n_slices
    times = t0 + (np.arange(n_slices) + 0.5) * dt
    # midpoints stay inside [t0, t1] by construction
    slices = _batched_expm(p.generator_grid(times), sign * 1j * dt)
    return _ordered_product(slices)


def propagate_detailed(
    p: Protocol,
    cfg: PropagatorConfig | None = None,
    t0: float = 0.0,
    t1: float | None = None,
    sign: float = -1.0,
) -> PropagatorResult:
    cfg = cfg or PropagatorConfig()
    t1 = p.duration if t1 is None else t1
    if not p.drive:
        G = HermitianOperator(p._static_generator())
        U = expm_hermitian(G, sign * 1j * (t1 - t0))
        return PropagatorResult(UnitaryOperator(U), 1, 0.0)

    n = cfg.slices
    prev = midpoint_product(p, n, t0, t1, sign)
    history = []
    while True:
        if 2 * n > cfg.max_slices:
            raise ConvergenceError(
                f"propagator not converged at {n} slices "
                f"(last successive difference {history[-1][1] if history else float('nan'):.3e})"
            )
        n *= 2
        cur = midpoint_product(p, n, t0, t1, sign)
        err = max_norm(cur - prev)
        history.append((n, err))
        log.debug("propagate: %d slices, successive difference %.3e", n, err)
        if err < cfg.target_error:
            return PropagatorResult(UnitaryOperator(nearest_unitary(cur)), n, err, history)
        prev = cur


def propagate(p: Protocol, cfg: PropagatorConfig | None = None) -> UnitaryOperator:
    """Joint evolution operator U(tau, 0)."""
    return propagate_detailed(p, cfg).unitary


def reverse_propagate(p: Protocol, cfg: PropagatorConfig | None = None) -> UnitaryOperator:
    """Backward evolution along the mirrored schedule; equals U(tau, 0)^dagger."""
    return propagate_detailed(p.mirrored(), cfg, sign=+1.0).unitary


def conservation_residual(p: Protocol, t_samples: Sequence[float]) -> np.ndarray:
    """Table r[k, s] = ||[V, A_k(t_s) (x) 1 + 1 (x) A^R_k]||_max.

    Nonzero entries are reported as warnings; driven models are allowed to
    break per-charge conservation.
    """
    ds, dr = p.dims
    V = p.interaction.matrix
    out = np.zeros((p.n_charges, len(t_samples)))
    for s, t in enumerate(t_samples):
        charges = p.charges_at(t)
        for k, (a, ar) in enumerate(zip(charges, p.reservoir_charges)):
            total = tensor(a.matrix, np.eye(dr)) + tensor(np.eye(ds), ar.matrix)
            out[k, s] = max_norm(commutator(V, total))
    if np.any(out > 1e-10):
        log.warning("charge conservation violated: max residual %.3e", out.max())
    return out
