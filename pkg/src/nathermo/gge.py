"""Generalized Gibbs ensembles and the information functionals built on them.

Conventions: natural logarithms, k_B = hbar = 1. A state is
rho = exp(F - sum_k lambda_k A_k) with Massieu potential
F = -ln Tr exp(-sum_k lambda_k A_k).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import (
    DimensionError,
    HermitianOperator,
    RangeError,
    SpectralDecomposition,
    spectral_decompose,
)
from .settings import current_tolerances


class RankError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ChargeSet:
    charges: tuple[HermitianOperator, ...]
    affinities: np.ndarray
    label: str = ""

    def __post_init__(self):
        charges = tuple(self.charges)
        aff = np.asarray(self.affinities, dtype=float).copy()
        if aff.ndim != 1 or len(aff) != len(charges) or not charges:
            raise ValueError(
                f"{len(charges)} charges but affinities of shape {aff.shape}"
            )
        if len({c.dim for c in charges}) != 1:
            raise DimensionError("all charges must share one dimension")
        aff.flags.writeable = False
        object.__setattr__(self, "charges", charges)
        object.__setattr__(self, "affinities", aff)

    @property
    def dim(self) -> int:
        return self.charges[0].dim

    def contraction(self) -> HermitianOperator:
        m = sum(l * c.matrix for l, c in zip(self.affinities, self.charges))
        return HermitianOperator(m, f"lambda.A[{self.label}]")


@dataclass(frozen=True, eq=False)
class ProbabilityVector:
    probs: np.ndarray
    basis_label: str = ""

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float).copy()
        tol = current_tolerances()
        if p.min() < -tol.neg_prob or abs(p.sum() - 1.0) > 1e-10:
            raise ValueError(f"not a probability vector: min {p.min():.3e}, sum {p.sum():.15f}")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return len(self.probs)

    def __getitem__(self, k):
        return self.probs[k]


@dataclass(frozen=True, eq=False)
class GibbsState:
    """A generalized Gibbs state.

    ``spectrum`` is the decomposition of the contraction lambda.A, ascending,
    so ``probs`` (the density eigenvalues, same order) are descending. All
    measurement bases downstream are read from this one decomposition.
    """

    density: np.ndarray
    massieu: float
    spectrum: SpectralDecomposition
    probs: np.ndarray
    source: ChargeSet

    @property
    def dim(self) -> int:
        return self.spectrum.dim

    @property
    def eigenvectors(self) -> np.ndarray:
        return self.spectrum.eigenvectors

    def vector(self, k: int) -> np.ndarray:
        return self.spectrum.eigenvectors[:, k]


def _shifted_log_partition(eigenvalues: np.ndarray) -> tuple[float, np.ndarray]:
    # log-sum-exp with the minimum eigenvalue factored out
    e0 = float(eigenvalues.min())
    shifted = eigenvalues - e0
    if shifted.max() > current_tolerances().overflow:
        raise RangeError(
            f"spread of lambda.A eigenvalues ({shifted.max():.1f}) exceeds the overflow guard"
        )
    weights = np.exp(-shifted)
    return e0 - np.log(weights.sum()), weights


def massieu_potential(cs: ChargeSet) -> float:
    sd = spectral_decompose(cs.contraction())
    return float(_shifted_log_partition(sd.eigenvalues)[0])


def build_gibbs_state(cs: ChargeSet) -> GibbsState:
    sd = spectral_decompose(cs.contraction())
    F, weights = _shifted_log_partition(sd.eigenvalues)
    probs = weights / weights.sum()
    probs.flags.writeable = False
    density = sd.reconstruct(probs)
    density.flags.writeable = False
    return GibbsState(density, float(F), sd, probs, cs)


def entropy(p) -> float:
    """Shannon entropy in nats; entries below the probability floor count as 0."""
    p = np.asarray(p, dtype=float)
    p = p[p > current_tolerances().prob_floor]
    return float(-np.sum(p * np.log(p)))


def von_neumann_entropy(state: GibbsState) -> float:
    return entropy(state.probs)


def _check_dims(state: GibbsState, reference: GibbsState):
    if state.dim != reference.dim:
        raise DimensionError(f"state dim {state.dim} != reference dim {reference.dim}")


def dephased_distribution(state: GibbsState, reference: GibbsState) -> ProbabilityVector:
    """Populations of ``state`` in the eigenbasis of ``reference`` (reference order)."""
    _check_dims(state, reference)
    basis = reference.eigenvectors
    pd = np.real(np.einsum("im,ij,jm->m", basis.conj(), state.density, basis))
    return ProbabilityVector(pd, f"eig[{reference.source.label}]")


def rel_entropy_coherence(state: GibbsState, reference: GibbsState) -> float:
    """S(p^d) - S(state): relative entropy of coherence in the reference basis."""
    pd = dephased_distribution(state, reference)
    return entropy(pd.probs) - von_neumann_entropy(state)


def athermality(state: GibbsState, reference: GibbsState) -> float:
    """KL divergence of the dephased populations from the reference populations."""
    pd = dephased_distribution(state, reference).probs
    pr = reference.probs
    floor = current_tolerances().prob_floor
    if pr.min() < floor:
        raise RankError(f"reference eigenvalue {pr.min():.3e} below {floor:g}")
    keep = pd > floor
    return float(np.sum(pd[keep] * np.log(pd[keep] / pr[keep])))


def noneq_free_entropy(state: GibbsState, reference: GibbsState) -> float:
    return (
        reference.massieu
        + rel_entropy_coherence(state, reference)
        + athermality(state, reference)
    )


def conditional_matrix(target: GibbsState, given: GibbsState) -> np.ndarray:
    """Born conditionals c[m, i] = |<m_target|i_given>|^2."""
    _check_dims(target, given)
    return np.abs(target.eigenvectors.conj().T @ given.eigenvectors) ** 2


def charge_set(charges: Sequence[HermitianOperator], affinities, label: str = "") -> ChargeSet:
    return ChargeSet(tuple(charges), np.asarray(affinities, dtype=float), label)
