"""Two-qubit Heisenberg example: builders and theta sweeps.

System and reservoir are single spins coupled by V = J sigma . sigma^R.
The system generator is H = omega (cos(theta) sigma_z + sin(theta) sigma_x)/2
at inverse temperature beta, the reservoir generator H^R = omega sigma^R_z/2 at
beta^R. The three Pauli operators on each side are the charges, so the
affinities are lambda = beta omega (sin theta, 0, cos theta)/2 and
lambda^R = (0, 0, beta^R omega/2).

In the driven variant the z charge is A_z(t) = g(t) sigma_z with a linear
ramp g and fixed affinity, and the generator becomes
H(t) = omega (g(t) cos(theta) sigma_z + sin(theta) sigma_x)/2.
"""

from __future__ import annotations

import contextvars
import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .dynamics import DrivenTerm, PropagatorConfig, Protocol, linear_ramp
from .flucts import FTReport, ft_report
from .linalg import PAULI, HermitianOperator, tensor
from .trajectories import EnsembleOptions, JointSetup, build_joint_setup, enumerate_ensemble

log = logging.getLogger(__name__)

CHARGE_NAMES = ("x", "y", "z")


@dataclass(frozen=True)
class HeisenbergParams:
    J: float = 1.0
    omega: float = 1.0
    beta: float = 1.0
    beta_r: float = 0.5
    theta: float = 0.0
    tau: float = math.pi
    g0: float = 10.0
    g_tau: float = 0.1
    slices: int = 2048
    target_error: float = 1e-9

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not (self.beta > 0 and self.beta_r > 0):
            raise ValueError("beta and beta_r must be positive")
        if self.slices < 1:
            raise ValueError("slices must be >= 1")

    @property
    def propagator_config(self) -> PropagatorConfig:
        return PropagatorConfig(slices=self.slices, target_error=self.target_error)

    def affinities(self) -> np.ndarray:
        s, c = math.sin(self.theta), math.cos(self.theta)
        return self.beta * self.omega / 2 * np.array([s, 0.0, c])

    def reservoir_affinities(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.beta_r * self.omega / 2])


def _pauli_ops(prefix: str) -> tuple[HermitianOperator, ...]:
    return tuple(HermitianOperator(PAULI[a], f"{prefix}{a.lower()}") for a in "XYZ")


def _coupling(J: float) -> HermitianOperator:
    m = sum(tensor(PAULI[a], PAULI[a]) for a in "XYZ")
    return HermitianOperator(J * m, "V")


def _base_protocol(p: HeisenbergParams, drive=(), charge_drive=(), ramp=None) -> Protocol:
    s, c = math.sin(p.theta), math.cos(p.theta)
    if drive:
        H = HermitianOperator(p.omega / 2 * s * PAULI["X"], "H")
    else:
        H = HermitianOperator(p.omega / 2 * (c * PAULI["Z"] + s * PAULI["X"]), "H")
    HR = HermitianOperator(p.omega / 2 * PAULI["Z"], "H_R")
    return Protocol(
        p.tau,
        H,
        HR,
        _coupling(p.J),
        _pauli_ops("s"),
        _pauli_ops("r"),
        drive,
        charge_drive,
        ramp,
    )


def build_exchange_model(p: HeisenbergParams) -> JointSetup:
    protocol = _base_protocol(p)
    return build_joint_setup(
        protocol,
        p.affinities(),
        p.reservoir_affinities(),
        cfg=p.propagator_config,
        charge_names=CHARGE_NAMES,
    )


def build_driven_model(p: HeisenbergParams) -> JointSetup:
    ramp = linear_ramp(p.g0, p.g_tau, p.tau)
    c = math.cos(p.theta)
    h_drive = DrivenTerm(HermitianOperator(p.omega / 2 * c * PAULI["Z"], "H_z"), ramp)
    # A_z(t) = sigma_z + (g(t) - 1) sigma_z, exact at g = 1
    a_drive = DrivenTerm(
        HermitianOperator(PAULI["Z"], "sz"), lambda t, g=ramp: np.asarray(g(t)) - 1.0
    )
    protocol = _base_protocol(p, drive=(h_drive,), charge_drive=((2, a_drive),), ramp=ramp)
    return build_joint_setup(
        protocol,
        p.affinities(),
        p.reservoir_affinities(),
        cfg=p.propagator_config,
        charge_names=CHARGE_NAMES,
    )


def default_grid(points: int = 65, lo: float = 0.0, hi: float = math.pi) -> np.ndarray:
    if points < 1:
        raise ValueError("points must be >= 1")
    if points == 1:
        return np.array([lo])
    return np.linspace(lo, hi, points)


FLAGS = (
    "literal-eq5",
    "force-epsilon-zero",
    "mn-basis-variant",
    "printed-epsilon",
    "exclude-singular",
)


def options_from_flags(flags: Iterable[str]) -> EnsembleOptions:
    flags = set(flags)
    unknown = flags - set(FLAGS)
    if unknown:
        raise ValueError(f"unknown diagnostic flag(s): {', '.join(sorted(unknown))}")
    return EnsembleOptions(
        reverse_reading="literal" if "literal-eq5" in flags else "j",
        delta_a_basis="mn" if "mn-basis-variant" in flags else "ij",
        epsilon_convention="printed" if "printed-epsilon" in flags else "derived",
        singular="exclude" if "exclude-singular" in flags else "continue",
    )


def evaluate_setup(setup: JointSetup, mode: str, flags: Sequence[str] = ()) -> FTReport:
    ens = enumerate_ensemble(setup, options_from_flags(flags))
    return ft_report(ens, mode=mode, omit_epsilon="force-epsilon-zero" in flags)


def _columns(mode: str) -> list[str]:
    cols = ["theta"]
    cols += [f"E_{k}" for k in CHARGE_NAMES] + [f"Q_{k}" for k in CHARGE_NAMES]
    if mode == "work":
        cols += [f"W_{k}" for k in CHARGE_NAMES]
    cols += ["Sigma", "Sigma_z"]
    if mode == "exchange":
        cols += ["ft_exchange"]
    else:
        cols += ["ft_work"]
    cols += ["ft_normalization", "detailed_residual_max", "excluded_mass", "error"]
    return cols


@dataclass
class SweepRow:
    theta: float
    report: FTReport | None
    error: str = ""


@dataclass
class SweepTable:
    mode: str
    rows: list[SweepRow] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return _columns(self.mode)

    @property
    def failed(self) -> list[SweepRow]:
        return [r for r in self.rows if r.error]

    def values(self, row: SweepRow) -> dict[str, float]:
        nan = float("nan")
        out = {c: nan for c in self.columns if c != "error"}
        out["theta"] = row.theta
        rep = row.report
        if rep is None:
            return out
        for k, name in enumerate(CHARGE_NAMES):
            out[f"E_{name}"] = rep.averages["E"][k]
            out[f"Q_{name}"] = rep.averages["Q"][k]
            if self.mode == "work":
                out[f"W_{name}"] = rep.averages["W"][k]
        out["Sigma"] = rep.sigma
        out["Sigma_z"] = rep.sigma_per_charge[2]
        if self.mode == "exchange":
            out["ft_exchange"] = rep.ft_exchange
        else:
            out["ft_work"] = rep.ft_work
        out["ft_normalization"] = rep.ft_normalization
        out["detailed_residual_max"] = rep.max_detailed_residual
        out["excluded_mass"] = rep.excluded_mass
        return out

    def column(self, name: str) -> np.ndarray:
        return np.array([self.values(r)[name] for r in self.rows])

    def write_csv(self, fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        cols = self.columns
        writer.writerow(cols)
        for r in self.rows:
            vals = self.values(r)
            line = ["" if v is None else f"{v:.17g}" for v in (vals[c] for c in cols[:-1])]
            writer.writerow(line + [r.error])

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def _row(mode: str, theta: float, p: HeisenbergParams, flags: Sequence[str]) -> SweepRow:
    try:
        q = replace(p, theta=float(theta))
        setup = build_exchange_model(q) if mode == "exchange" else build_driven_model(q)
        return SweepRow(float(theta), evaluate_setup(setup, mode, flags))
    except (ArithmeticError, ValueError) as exc:
        log.warning("theta=%g failed: %s", theta, exc)
        return SweepRow(float(theta), None, f"{type(exc).__name__}: {exc}")


def run_sweep(
    mode: str,
    grid: Sequence[float],
    p: HeisenbergParams | None = None,
    flags: Sequence[str] = (),
    workers: int = 1,
    row_fn=None,
) -> SweepTable:
    """Evaluate every theta independently; failed rows carry an error marker.

    ``row_fn(mode, theta, flags)`` replaces the Heisenberg row builder, which
    is how custom models reuse this driver.
    """
    if mode not in ("exchange", "work"):
        raise ValueError(f"mode must be 'exchange' or 'work', got {mode!r}")
    options_from_flags(flags)  # validate before doing any work
    p = p or HeisenbergParams()
    if row_fn is None:
        def row_fn(m, t, f):
            return _row(m, t, p, f)

    def task(t):
        return contextvars.copy_context().run(row_fn, mode, t, tuple(flags))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(task, grid))
    else:
        rows = [task(t) for t in grid]
    return SweepTable(mode, rows)


WORK_FT_VARIANTS = {
    "j_ij": (),
    "j_mn": ("mn-basis-variant",),
    "literal_ij": ("literal-eq5",),
    "literal_mn": ("literal-eq5", "mn-basis-variant"),
}


@dataclass
class VariantReport:
    """Decomposition-route work FT values per theta for each construction variant."""

    grid: list[float]
    values: dict[str, list[float]]
    normalization: dict[str, list[float]]

    def deviation(self, name: str) -> float:
        return float(np.nanmax(np.abs(np.asarray(self.values[name]) - 1.0)))

    @property
    def best_variant(self) -> str:
        return min(self.values, key=lambda k: (self.deviation(k), k))

    def to_dict(self) -> dict:
        return {
            "grid": list(self.grid),
            "values": self.values,
            "normalization": self.normalization,
            "max_deviation": {k: self.deviation(k) for k in self.values},
            "best_variant": self.best_variant,
        }


def work_ft_variant_report(
    grid: Sequence[float],
    p: HeisenbergParams | None = None,
    builder: Callable[[float], JointSetup] | None = None,
) -> VariantReport:
    """Evaluate every variant on the driven model, or on ``builder(theta)`` if given."""
    from .flucts import integral_work_ft

    p = p or HeisenbergParams()
    values = {k: [] for k in WORK_FT_VARIANTS}
    norms = {k: [] for k in WORK_FT_VARIANTS}
    for theta in grid:
        if builder is not None:
            setup = builder(float(theta))
        else:
            setup = build_driven_model(replace(p, theta=float(theta)))
        for name, flags in WORK_FT_VARIANTS.items():
            res = integral_work_ft(enumerate_ensemble(setup, options_from_flags(flags)))
            values[name].append(res.decomposition)
            norms[name].append(res.normalization)
    return VariantReport([float(t) for t in grid], values, norms)
