"""Ensemble estimators: fluctuation theorems, averages and entropy production.

All exponential averages are taken in log space with a max shift, over the
records with P(Gamma) > 0. Two routes are kept wherever a relation can be
checked in more than one way, so that disagreements show up as numbers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .gge import athermality, noneq_free_entropy, rel_entropy_coherence
from .settings import current_tolerances
from .trajectories import PathEnsemble

EXCHANGE_MODES = ("identity", "formula", "omit")


class DrivenSetupError(ValueError):
    pass


def log_mean_exp(weights: np.ndarray, exponents: np.ndarray) -> float:
    """ln sum_r weights_r exp(exponents_r) over weights_r > 0, overflow-safe."""
    keep = weights > 0
    if not keep.any():
        return float("-inf")
    x = np.log(weights[keep]) + exponents[keep]
    top = float(np.max(x))
    return top + float(np.log(np.sum(np.exp(x - top))))


def _mean_exp(weights, exponents) -> float:
    return float(np.exp(log_mean_exp(weights, exponents)))


def integral_exchange_ft(ens: PathEnsemble, epsilon_mode: str = "identity") -> float:
    """<exp(-lambda.eps - dlambda.q)> for an undriven setup.

    ``identity`` substitutes lambda.eps = lambda.(da - q) on every record,
    ``formula`` uses the ratio values of eps (invalid records dropped), and
    ``omit`` sets eps to zero.
    """
    setup = ens.setup
    if setup.is_driven:
        raise DrivenSetupError("exchange relation needs A^0 = A^tau; use integral_work_ft")
    if epsilon_mode not in EXCHANGE_MODES:
        raise ValueError(f"epsilon_mode must be one of {EXCHANGE_MODES}")
    lam, dlam = setup.affinities, setup.delta_affinities
    heat_term = ens.q @ dlam
    P = ens.p_forward
    if epsilon_mode == "identity":
        x = -(ens.delta_a - ens.q) @ lam - heat_term
    elif epsilon_mode == "formula":
        ok = ens.record_valid
        P = np.where(ok, P, 0.0)
        x = -np.where(ok[:, None], ens.epsilon, 0.0) @ lam - heat_term
    else:
        x = -heat_term
    return _mean_exp(P, x)


class WorkFT(NamedTuple):
    decomposition: float
    normalization: float
    excluded_mass: float


def _free_entropy_shift(ens: PathEnsemble) -> float:
    s = ens.setup
    return s.reference_final.massieu - s.reference_initial.massieu


def _work_exponent(ens: PathEnsemble, omit_epsilon: bool = False):
    """lambda.(w + eps) + dlambda.q - dF^r - dc - dd, and the records where it is defined."""
    s = ens.setup
    lam, dlam = s.affinities, s.delta_affinities
    ok = ens.log_valid.copy()
    if omit_epsilon:
        ok &= ens.record_valid
        first = np.where(ok[:, None], ens.w, 0.0) @ lam
    else:
        # w + eps = da - q by construction, so this is defined on every record
        first = (ens.delta_a - ens.q) @ lam
    dc = np.where(ok, ens.delta_c, 0.0)
    dd = np.where(ok, ens.delta_d, 0.0)
    expo = first + ens.q @ dlam - _free_entropy_shift(ens) - dc - dd
    return expo, ok


def integral_work_ft(ens: PathEnsemble, omit_epsilon: bool = False) -> WorkFT:
    expo, ok = _work_exponent(ens, omit_epsilon)
    P = ens.p_forward
    dec = _mean_exp(np.where(ok, P, 0.0), -expo)
    # <exp(-ln P/P^dagger)> over P > 0 is the reverse mass on that support
    norm = float(np.sum(ens.p_reverse[P > 0]))
    return WorkFT(dec, norm, float(np.sum(P[~ok])))


def detailed_residuals(ens: PathEnsemble, mode: str = "exchange") -> tuple[float, np.ndarray]:
    """delta(Gamma) = ln(P/P^dagger) - exponent; NaN where not evaluated.

    Exchange mode uses the exponent lambda.eps + dlambda.q with the ratio
    values of eps, work mode the full detailed-relation exponent.
    """
    s = ens.setup
    floor = current_tolerances().prob_floor
    P, Pr = ens.p_forward, ens.p_reverse
    ok = (P > floor) & (Pr > floor)
    if mode == "exchange":
        ok &= ens.record_valid
        expo = np.where(ok[:, None], ens.epsilon, 0.0) @ s.affinities + ens.q @ s.delta_affinities
    elif mode == "work":
        expo, defined = _work_exponent(ens)
        ok &= defined
    else:
        raise ValueError("mode must be 'exchange' or 'work'")
    table = np.full(len(P), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        table[ok] = np.log(P[ok] / Pr[ok]) - expo[ok]
    max_abs = float(np.max(np.abs(table[ok]))) if ok.any() else 0.0
    return max_abs, table


@dataclass
class Averages:
    W: np.ndarray
    E: np.ndarray
    Q: np.ndarray
    delta_C: float
    delta_D: float
    delta_F_r: float
    delta_F_neq: float
    delta_C_endpoint: float
    delta_D_endpoint: float
    excluded_mass: float

    @property
    def coherence_gap(self) -> float:
        return self.delta_C - self.delta_C_endpoint

    @property
    def athermality_gap(self) -> float:
        return self.delta_D - self.delta_D_endpoint


def ensemble_averages(ens: PathEnsemble) -> Averages:
    s = ens.setup
    P = ens.p_forward
    ok = ens.record_valid
    Pv = np.where(ok, P, 0.0)
    W = Pv @ np.where(ok[:, None], ens.w, 0.0)
    E = Pv @ np.where(ok[:, None], ens.epsilon, 0.0)
    Q = P @ ens.q
    Pl = np.where(ens.log_valid, P, 0.0)
    dC = float(Pl @ np.where(ens.log_valid, ens.delta_c, 0.0))
    dD = float(Pl @ np.where(ens.log_valid, ens.delta_d, 0.0))
    c0 = rel_entropy_coherence(s.system_initial, s.reference_initial)
    ct = rel_entropy_coherence(s.system_final_reference, s.reference_final)
    d0 = athermality(s.system_initial, s.reference_initial)
    dt = athermality(s.system_final_reference, s.reference_final)
    dF = noneq_free_entropy(s.system_final_reference, s.reference_final) - noneq_free_entropy(
        s.system_initial, s.reference_initial
    )
    return Averages(
        W=W,
        E=E,
        Q=Q,
        delta_C=dC,
        delta_D=dD,
        delta_F_r=_free_entropy_shift(ens),
        delta_F_neq=float(dF),
        delta_C_endpoint=float(ct - c0),
        delta_D_endpoint=float(dt - d0),
        excluded_mass=ens.excluded_mass,
    )


def kl_entropy_production(ens: PathEnsemble) -> float:
    """sum_Gamma P ln(P/P^dagger) over records with P > 0."""
    P, Pr = ens.p_forward, ens.p_reverse
    keep = P > 0
    if np.any(Pr[keep] <= 0):
        return float("inf")
    return float(np.sum(P[keep] * np.log(P[keep] / Pr[keep])))


class EntropyProduction(NamedTuple):
    sigma: float
    per_charge: np.ndarray
    second_law_gap: float
    kl: float


def entropy_production(ens: PathEnsemble, avg: Averages | None = None) -> EntropyProduction:
    s = ens.setup
    avg = avg or ensemble_averages(ens)
    lam, dlam = s.affinities, s.delta_affinities
    per = lam * (avg.W + avg.E) + dlam * avg.Q
    if s.is_driven:
        sigma = float(per.sum() - avg.delta_F_neq)
    else:
        per = lam * avg.E + dlam * avg.Q
        sigma = float(per.sum())
    gap = float(
        lam @ (avg.W + avg.E) + dlam @ avg.Q - (avg.delta_F_r + avg.delta_C + avg.delta_D)
    )
    return EntropyProduction(sigma, per, gap, kl_entropy_production(ens))


def _system_massieu_route(ens: PathEnsemble) -> float:
    """<exp(-lambda.(da - q) - dlambda.q + dF)> with dF the system Massieu change."""
    s = ens.setup
    dF = s.system_final_reference.massieu - s.system_initial.massieu
    x = -(ens.delta_a - ens.q) @ s.affinities - ens.q @ s.delta_affinities + dF
    return _mean_exp(ens.p_forward, x)


@dataclass
class FTReport:
    ft_exchange: float | None
    ft_work: float
    ft_normalization: float
    max_detailed_residual: float
    averages: dict
    sigma: float
    sigma_per_charge: list
    excluded_mass: float
    mode_flags: dict
    approximate: bool = False
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return jsonable(asdict(self))

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def jsonable(obj):
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def ft_report(ens: PathEnsemble, mode: str | None = None, omit_epsilon: bool = False) -> FTReport:
    """Every estimator for one ensemble.

    ``mode`` selects which detailed residual is headline ("exchange" or
    "work"); by default it follows whether the setup is driven.
    ``omit_epsilon`` drops the non-Abelian term from the integral estimators.
    """
    s = ens.setup
    mode = mode or ("work" if s.is_driven else "exchange")
    avg = ensemble_averages(ens)
    ep = entropy_production(ens, avg)
    work = integral_work_ft(ens, omit_epsilon)
    ft_ex = None
    diag = {}
    if not s.is_driven:
        ft_ex = integral_exchange_ft(ens, "omit" if omit_epsilon else "identity")
        diag["ft_exchange_formula"] = integral_exchange_ft(ens, "formula")
        diag["ft_exchange_without_epsilon"] = integral_exchange_ft(ens, "omit")
        diag["detailed_residual_work"] = detailed_residuals(ens, "work")[0]
    else:
        diag["detailed_residual_exchange"] = detailed_residuals(ens, "exchange")[0]
    headline = detailed_residuals(ens, "exchange" if mode == "exchange" and not s.is_driven else "work")[0]
    diag.update(
        ft_work_system_massieu=_system_massieu_route(ens),
        kl_entropy_production=ep.kl,
        second_law_gap=ep.second_law_gap,
        delta_C_endpoint=avg.delta_C_endpoint,
        delta_D_endpoint=avg.delta_D_endpoint,
        coherence_gap=avg.coherence_gap,
        athermality_gap=avg.athermality_gap,
        log_excluded_mass=work.excluded_mass,
        max_epsilon_imag=float(np.nanmax(np.abs(ens.epsilon_imag))) if ens.record_valid.any() else 0.0,
    )
    excluded = ens.excluded_mass
    opts = ens.options
    return FTReport(
        ft_exchange=ft_ex,
        ft_work=work.decomposition,
        ft_normalization=work.normalization,
        max_detailed_residual=headline,
        averages={
            "W": avg.W,
            "E": avg.E,
            "Q": avg.Q,
            "delta_C": avg.delta_C,
            "delta_D": avg.delta_D,
            "delta_F_r": avg.delta_F_r,
            "delta_F_neq": avg.delta_F_neq,
        },
        sigma=ep.sigma,
        sigma_per_charge=list(ep.per_charge),
        excluded_mass=excluded,
        mode_flags={
            "mode": mode,
            "reverse_reading": opts.reverse_reading,
            "delta_a_basis": opts.delta_a_basis,
            "epsilon_convention": opts.epsilon_convention,
            "singular": opts.singular,
            "omit_epsilon": omit_epsilon,
        },
        approximate=bool(max(excluded, work.excluded_mass) > current_tolerances().approximate_mass),
        diagnostics=diag,
    )
