"""Trajectory lattice of the two-time conditional measurement scheme.

A trajectory is Gamma = (i, mu, m, j, nu, n):

* i, j   system eigenstates of pi^0 and pi^tau (the instantaneous generalized
  Gibbs states with the system affinities),
* mu, nu reservoir eigenstates of rho^R,
* m, n   eigenstates of the reference states pi^{r,0}, pi^{r,tau} (system
  charges, reservoir affinities).

Every quantity has a per-trajectory function that builds the operators
literally (used by tests and small dumps) and a vectorised path in
:func:`enumerate_ensemble` that fills the whole lattice at once.

Non-Abelian term. With S = (A^0 + A^tau)/2 the charge-conservation identity
[V, A^t + A^R] = 0 gives, for every record with <j nu|V|i mu> != 0,

    eps = <j nu| V O^0 - O^tau V |i mu> / <j nu|V|i mu>
          + (<j|dA|j> + <i|dA|i>) / 2,
    O^tau = S (1 - P_j) + A^R (1 - P_nu),
    O^0   = (1 - P_i) S + (1 - P_mu) A^R,

which makes  da - q - eps = 0  exactly. The closely related form that
appears in print (opposite overall sign, each projector on the other side
of A^0, dA entering with a minus sign) is kept as ``convention="printed"``
for comparison; it does not satisfy the identity.

Records where <j nu|V|i mu> vanishes are 0/0 points of the ratio. Every
power V^p commutes with the same conserved totals, so the ratio is
continued with the lowest power whose matrix element is nonzero
(``singular="continue"``). ``singular="exclude"`` flags them instead.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .dynamics import PropagatorConfig, Protocol, propagate
from .gge import (
    GibbsState,
    build_gibbs_state,
    charge_set,
    conditional_matrix,
    dephased_distribution,
)
from .linalg import HermitianOperator, UnitaryOperator, max_norm, tensor
from .settings import current_tolerances

READINGS = ("j", "literal")
BASES = ("ij", "mn")
CONVENTIONS = ("derived", "printed")
SINGULAR_POLICIES = ("continue", "exclude")


class Trajectory(NamedTuple):
    i: int
    mu: int
    m: int
    j: int
    nu: int
    n: int


@dataclass(frozen=True)
class EnsembleOptions:
    """Switches for the ambiguous parts of the construction.

    reverse_reading: "j" starts the reversed path from p^tau_j; "literal"
        uses p^tau_i as printed.
    delta_a_basis: "ij" evaluates the charge change in the (i, j)
        eigenbases; "mn" in the reference bases (m, n).
    epsilon_convention: "derived" or "printed" (see module docstring).
    singular: "continue" or "exclude" for records with <j nu|V|i mu> = 0.
    """

    reverse_reading: str = "j"
    delta_a_basis: str = "ij"
    epsilon_convention: str = "derived"
    singular: str = "continue"

    def __post_init__(self):
        for name, allowed in (
            ("reverse_reading", READINGS),
            ("delta_a_basis", BASES),
            ("epsilon_convention", CONVENTIONS),
            ("singular", SINGULAR_POLICIES),
        ):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}")


@dataclass(frozen=True, eq=False)
class JointSetup:
    system_initial: GibbsState
    system_final_reference: GibbsState
    reservoir: GibbsState
    reference_initial: GibbsState
    reference_final: GibbsState
    protocol: Protocol
    propagator: UnitaryOperator
    charge_names: tuple[str, ...] = ()

    def __post_init__(self):
        ds, dr = self.dims
        for s in (self.system_final_reference, self.reference_initial, self.reference_final):
            if s.dim != ds:
                raise ValueError("system-space states must share one dimension")
        if self.propagator.dim != ds * dr:
            raise ValueError(f"propagator dim {self.propagator.dim} != {ds}*{dr}")
        if not np.array_equal(
            self.system_initial.source.affinities, self.system_final_reference.source.affinities
        ):
            raise ValueError("initial and final system states must share affinities")
        if not self.charge_names:
            names = tuple(str(k) for k in range(len(self.affinities)))
            object.__setattr__(self, "charge_names", names)

    @property
    def dims(self) -> tuple[int, int]:
        return self.system_initial.dim, self.reservoir.dim

    @property
    def n_charges(self) -> int:
        return len(self.affinities)

    @property
    def affinities(self) -> np.ndarray:
        return self.system_initial.source.affinities

    @property
    def reservoir_affinities(self) -> np.ndarray:
        return self.reservoir.source.affinities

    @property
    def delta_affinities(self) -> np.ndarray:
        return self.affinities - self.reservoir_affinities

    @property
    def charges_initial(self) -> tuple[HermitianOperator, ...]:
        return self.system_initial.source.charges

    @property
    def charges_final(self) -> tuple[HermitianOperator, ...]:
        return self.system_final_reference.source.charges

    @property
    def reservoir_charges(self) -> tuple[HermitianOperator, ...]:
        return self.reservoir.source.charges

    @property
    def interaction(self) -> np.ndarray:
        return self.protocol.interaction.matrix

    @property
    def is_driven(self) -> bool:
        """True when some charge differs between the protocol endpoints."""
        return any(
            max_norm(a.matrix - b.matrix) > 0
            for a, b in zip(self.charges_initial, self.charges_final)
        )

    @property
    def lattice_shape(self) -> tuple[int, ...]:
        ds, dr = self.dims
        return (ds, dr, ds, ds, dr, ds)


def build_joint_setup(
    protocol: Protocol,
    affinities,
    reservoir_affinities,
    propagator: UnitaryOperator | None = None,
    cfg: PropagatorConfig | None = None,
    charge_names: Sequence[str] = (),
) -> JointSetup:
    A0 = protocol.charges_at(0.0)
    At = protocol.charges_at(protocol.duration)
    AR = protocol.reservoir_charges
    lam = np.asarray(affinities, dtype=float)
    lam_r = np.asarray(reservoir_affinities, dtype=float)
    if propagator is None:
        propagator = propagate(protocol, cfg)
    return JointSetup(
        system_initial=build_gibbs_state(charge_set(A0, lam, "system t=0")),
        system_final_reference=build_gibbs_state(charge_set(At, lam, "system t=tau")),
        reservoir=build_gibbs_state(charge_set(AR, lam_r, "reservoir")),
        reference_initial=build_gibbs_state(charge_set(A0, lam_r, "reference t=0")),
        reference_final=build_gibbs_state(charge_set(At, lam_r, "reference t=tau")),
        protocol=protocol,
        propagator=propagator,
        charge_names=tuple(charge_names),
    )


# ---------------------------------------------------------------------------
# per-trajectory quantities (literal route)


def _joint_ket(setup: JointSetup, system_state: GibbsState, s: int, r: int) -> np.ndarray:
    return np.kron(system_state.vector(s), setup.reservoir.vector(r))


def transition_amplitude(setup: JointSetup, g: Trajectory) -> complex:
    """<j^tau, nu| U |i^0, mu>."""
    bra = _joint_ket(setup, setup.system_final_reference, g.j, g.nu)
    ket = _joint_ket(setup, setup.system_initial, g.i, g.mu)
    return complex(np.vdot(bra, setup.propagator.matrix @ ket))


def _born(a: np.ndarray, b: np.ndarray) -> float:
    return float(abs(np.vdot(a, b)) ** 2)


def forward_probability(setup: JointSetup, g: Trajectory) -> float:
    p0 = setup.system_initial.probs[g.i]
    pr = setup.reservoir.probs[g.mu]
    c0 = _born(setup.reference_initial.vector(g.m), setup.system_initial.vector(g.i))
    ct = _born(setup.reference_final.vector(g.n), setup.system_final_reference.vector(g.j))
    return float(p0 * pr * c0 * abs(transition_amplitude(setup, g)) ** 2 * ct)


def reverse_probability(setup: JointSetup, g: Trajectory, reading: str = "j") -> float:
    """P^dagger(Gamma^dagger); ``reading="literal"`` weights by p^tau_i."""
    if reading not in READINGS:
        raise ValueError(f"reading must be one of {READINGS}")
    start = g.j if reading == "j" else g.i
    pt = setup.system_final_reference.probs[start]
    pr = setup.reservoir.probs[g.nu]
    bra = _joint_ket(setup, setup.system_initial, g.i, g.mu)
    ket = _joint_ket(setup, setup.system_final_reference, g.j, g.nu)
    back = abs(np.vdot(bra, setup.propagator.matrix.conj().T @ ket)) ** 2
    c0 = _born(setup.reference_initial.vector(g.m), setup.system_initial.vector(g.i))
    ct = _born(setup.reference_final.vector(g.n), setup.system_final_reference.vector(g.j))
    return float(pt * pr * ct * back * c0)


def charge_change(setup: JointSetup, g: Trajectory, basis: str = "ij") -> np.ndarray:
    """da_k = <j^tau|A_k^tau|j^tau> - <i^0|A_k^0|i^0> (or with n, m reference states)."""
    if basis == "ij":
        end, start = setup.system_final_reference.vector(g.j), setup.system_initial.vector(g.i)
    elif basis == "mn":
        end, start = setup.reference_final.vector(g.n), setup.reference_initial.vector(g.m)
    else:
        raise ValueError(f"basis must be one of {BASES}")
    return np.array(
        [
            at.expectation(end) - a0.expectation(start)
            for a0, at in zip(setup.charges_initial, setup.charges_final)
        ]
    )


def heat(setup: JointSetup, g: Trajectory) -> np.ndarray:
    """q_k = <mu|A^R_k|mu> - <nu|A^R_k|nu>; positive when the reservoir loses charge."""
    mu, nu = setup.reservoir.vector(g.mu), setup.reservoir.vector(g.nu)
    return np.array([ar.expectation(mu) - ar.expectation(nu) for ar in setup.reservoir_charges])


@dataclass(frozen=True, eq=False)
class EpsilonKernel:
    O_tau: np.ndarray
    O_0: np.ndarray
    convention: str


def _embeddings(setup: JointSetup):
    ds, dr = setup.dims
    es, er = np.eye(ds), np.eye(dr)
    sys = lambda a: tensor(a, er)  # noqa: E731
    res = lambda a: tensor(es, a)  # noqa: E731
    return sys, res


def epsilon_kernel(
    setup: JointSetup, g: Trajectory, k: int, convention: str = "derived"
) -> EpsilonKernel:
    """The endpoint operators O^tau and O^0 of charge k on the joint space."""
    sys, res = _embeddings(setup)
    one = np.eye(setup.propagator.dim)
    vj = setup.system_final_reference.vector(g.j)
    vi = setup.system_initial.vector(g.i)
    Pj = sys(np.outer(vj, vj.conj()))
    Pi = sys(np.outer(vi, vi.conj()))
    Pnu = res(np.outer(setup.reservoir.vector(g.nu), setup.reservoir.vector(g.nu).conj()))
    Pmu = res(np.outer(setup.reservoir.vector(g.mu), setup.reservoir.vector(g.mu).conj()))
    A0 = sys(setup.charges_initial[k].matrix)
    At = sys(setup.charges_final[k].matrix)
    AR = res(setup.reservoir_charges[k].matrix)
    if convention == "derived":
        S = 0.5 * (A0 + At)
        O_tau = S @ (one - Pj) + AR @ (one - Pnu)
        O_0 = (one - Pi) @ S + (one - Pmu) @ AR
    elif convention == "printed":
        O_tau = 0.5 * (At @ (one - Pj) + (one - Pj) @ A0) + AR @ (one - Pnu)
        O_0 = 0.5 * (At @ (one - Pi) + (one - Pi) @ A0) + (one - Pmu) @ AR
    else:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    return EpsilonKernel(O_tau, O_0, convention)


class EpsilonValue(NamedTuple):
    value: np.ndarray     # real part, NaN where invalid
    valid: np.ndarray     # per-component flags
    imag: np.ndarray      # imaginary part of the ratio (diagnostic)
    power: int            # power of V used in the ratio; 0 if unresolved


def _coupling_powers(V: np.ndarray, policy: str) -> list[np.ndarray]:
    if policy == "exclude":
        return [V]
    powers, P = [], np.eye(V.shape[0], dtype=complex)
    for _ in range(V.shape[0]):
        P = P @ V
        powers.append(P)
    return powers


def epsilon(
    setup: JointSetup,
    g: Trajectory,
    convention: str = "derived",
    singular: str = "continue",
) -> EpsilonValue:
    """Non-Abelian contribution for one trajectory, from explicit operators."""
    K = setup.n_charges
    bra = _joint_ket(setup, setup.system_final_reference, g.j, g.nu)
    ket = _joint_ket(setup, setup.system_initial, g.i, g.mu)
    vj = setup.system_final_reference.vector(g.j)
    vi = setup.system_initial.vector(g.i)
    thr = current_tolerances().v_element
    kernels = [epsilon_kernel(setup, g, k, convention) for k in range(K)]
    for p, Vp in enumerate(_coupling_powers(setup.interaction, singular), start=1):
        denom = np.vdot(bra, Vp @ ket)
        if abs(denom) <= thr * max_norm(Vp):
            continue
        vals, imag = np.empty(K), np.empty(K)
        for k, ker in enumerate(kernels):
            num = np.vdot(bra, (ker.O_tau @ Vp - Vp @ ker.O_0) @ ket)
            dA = setup.charges_final[k].matrix - setup.charges_initial[k].matrix
            dAj = float(np.real(np.vdot(vj, dA @ vj)))
            dAi = float(np.real(np.vdot(vi, dA @ vi)))
            if convention == "derived":
                ratio = -num / denom
                shift = 0.5 * (dAj + dAi)
            else:
                ratio = num / denom
                shift = -0.5 * (dAj - dAi)
            vals[k] = ratio.real + shift
            imag[k] = ratio.imag
        return EpsilonValue(vals, np.ones(K, bool), imag, p)
    nan = np.full(K, np.nan)
    return EpsilonValue(nan, np.zeros(K, bool), nan.copy(), 0)


def work_remainder(
    setup: JointSetup, g: Trajectory, options: EnsembleOptions | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """w = da - q - eps; NaN where eps is invalid."""
    options = options or EnsembleOptions()
    eps = epsilon(setup, g, options.epsilon_convention, options.singular)
    w = charge_change(setup, g, options.delta_a_basis) - heat(setup, g) - eps.value
    return w, eps.valid


def coherence_increments(setup: JointSetup, g: Trajectory) -> tuple[float, float, bool]:
    """Stochastic changes (dc, dd) of relative entropy of coherence and athermality."""
    p0 = setup.system_initial.probs[g.i]
    pt = setup.system_final_reference.probs[g.j]
    pd0 = dephased_distribution(setup.system_initial, setup.reference_initial).probs[g.m]
    pdt = dephased_distribution(setup.system_final_reference, setup.reference_final).probs[g.n]
    r0 = setup.reference_initial.probs[g.m]
    rt = setup.reference_final.probs[g.n]
    if min(p0, pt, pd0, pdt, r0, rt) <= current_tolerances().prob_floor:
        return float("nan"), float("nan"), False
    dc = np.log(pt / pdt) - np.log(p0 / pd0)
    dd = np.log(pdt / rt) - np.log(pd0 / r0)
    return float(dc), float(dd), True


# ---------------------------------------------------------------------------
# whole-lattice enumeration


@dataclass(frozen=True)
class TrajectoryRecord:
    trajectory: Trajectory
    p_forward: float
    p_reverse: float
    delta_a: np.ndarray
    q: np.ndarray
    epsilon: np.ndarray
    epsilon_valid: np.ndarray
    w: np.ndarray
    delta_c: float
    delta_d: float
    v_element_magnitude: float


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Column-oriented store of the full trajectory lattice.

    Row r corresponds to ``np.unravel_index(r, setup.lattice_shape)``, i.e.
    the lattice is ordered with n varying fastest and i slowest.
    """

    setup: JointSetup
    options: EnsembleOptions
    index: np.ndarray
    p_forward: np.ndarray
    p_reverse: np.ndarray
    delta_a: np.ndarray
    q: np.ndarray
    epsilon: np.ndarray
    epsilon_imag: np.ndarray
    epsilon_valid: np.ndarray
    epsilon_power: np.ndarray
    w: np.ndarray
    delta_c: np.ndarray
    delta_d: np.ndarray
    log_valid: np.ndarray
    v_element_magnitude: np.ndarray
    _records: list = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.p_forward)

    @property
    def record_valid(self) -> np.ndarray:
        return np.all(self.epsilon_valid, axis=1)

    @property
    def excluded_mass(self) -> float:
        return float(np.sum(self.p_forward[~self.record_valid]))

    @property
    def log_excluded_mass(self) -> float:
        """Forward probability on records whose dc/dd need a log of ~0."""
        return float(np.sum(self.p_forward[~self.log_valid]))

    def trajectory(self, r: int) -> Trajectory:
        return Trajectory(*(int(x) for x in self.index[r]))

    def record(self, r: int) -> TrajectoryRecord:
        return TrajectoryRecord(
            self.trajectory(r),
            float(self.p_forward[r]),
            float(self.p_reverse[r]),
            self.delta_a[r],
            self.q[r],
            self.epsilon[r],
            self.epsilon_valid[r],
            self.w[r],
            float(self.delta_c[r]),
            float(self.delta_d[r]),
            float(self.v_element_magnitude[r]),
        )

    @property
    def records(self) -> list[TrajectoryRecord]:
        if self._records is None:
            object.__setattr__(self, "_records", [self.record(r) for r in range(len(self))])
        return self._records

    def csv_header(self) -> list[str]:
        names = self.setup.charge_names
        cols = ["i", "mu", "m", "j", "nu", "n", "p_fwd", "p_rev"]
        for prefix in ("da", "q", "eps", "w"):
            cols += [f"{prefix}_{k}" for k in names]
        return cols + ["dc", "dd", "eps_valid"]

    def write_csv(self, fh) -> None:
        fmt = "{:.17g}".format
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(self.csv_header())
        valid = self.record_valid
        for r in range(len(self)):
            row = [str(int(x)) for x in self.index[r]]
            row += [fmt(self.p_forward[r]), fmt(self.p_reverse[r])]
            for arr in (self.delta_a, self.q, self.epsilon, self.w):
                row += [fmt(x) for x in arr[r]]
            row += [fmt(self.delta_c[r]), fmt(self.delta_d[r])]
            row.append("true" if valid[r] else "false")
            writer.writerow(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def _diag_expectations(ops: Sequence[HermitianOperator], basis: np.ndarray) -> np.ndarray:
    """e[k, a] = <a|O_k|a> for the columns a of ``basis``."""
    return np.array(
        [np.real(np.einsum("ia,ij,ja->a", basis.conj(), o.matrix, basis)) for o in ops]
    )


def _epsilon_lattice(setup: JointSetup, options: EnsembleOptions):
    """eps[k, i, mu, j, nu] with validity, imaginary part and resolving power."""
    ds, dr = setup.dims
    K = setup.n_charges
    sys, res = _embeddings(setup)
    v0 = setup.system_initial.eigenvectors
    vt = setup.system_final_reference.eigenvectors
    vR = setup.reservoir.eigenvectors
    B_in = np.kron(v0, vR)
    B_out = np.kron(vt, vR)

    def elems(X):
        # M[j, nu, i, mu] = <j^tau nu| X |i^0 mu>
        return (B_out.conj().T @ X @ B_in).reshape(ds, dr, ds, dr)

    A0 = [a.matrix for a in setup.charges_initial]
    At = [a.matrix for a in setup.charges_final]
    AR = [a.matrix for a in setup.reservoir_charges]
    aR = _diag_expectations(setup.reservoir_charges, vR)                  # [k, mu]
    a0_i = _diag_expectations(setup.charges_initial, v0)                  # <i^0|A^0|i^0>
    at_j = _diag_expectations(setup.charges_final, vt)                    # <j^tau|A^tau|j^tau>
    at_i = _diag_expectations(setup.charges_final, v0)                    # <i^0|A^tau|i^0>
    a0_j = _diag_expectations(setup.charges_initial, vt)                  # <j^tau|A^0|j^tau>
    dA_j = at_j - a0_j
    dA_i = at_i - a0_i

    shape = (K, ds, dr, ds, dr)
    eps = np.full(shape, np.nan)
    imag = np.full(shape, np.nan)
    power = np.zeros((ds, dr, ds, dr), dtype=int)
    todo = np.ones((ds, dr, ds, dr), dtype=bool)
    thr = current_tolerances().v_element

    # axes of the 4-index arrays below: [j, nu, i, mu]
    J = (slice(None), None, None, None)
    NU = (None, slice(None), None, None)
    I = (None, None, slice(None), None)
    MU = (None, None, None, slice(None))

    for p, Vp in enumerate(_coupling_powers(setup.interaction, options.singular), start=1):
        if not todo.any():
            break
        d = elems(Vp)
        ok = todo & (np.abs(d) > thr * max_norm(Vp))
        if not ok.any():
            continue
        safe = np.where(ok, d, 1.0)
        for k in range(K):
            arn = aR[k][NU]
            arm = aR[k][MU]
            if options.epsilon_convention == "derived":
                S = 0.5 * (sys(A0[k]) + sys(At[k]))
                s_j = 0.5 * (a0_j[k] + at_j[k])
                s_i = 0.5 * (a0_i[k] + at_i[k])
                num = (
                    elems(S @ Vp - Vp @ S)
                    + elems(res(AR[k]) @ Vp - Vp @ res(AR[k]))
                    - (s_j[J] - s_i[I] + arn - arm) * d
                )
                ratio = -num / safe
                shift = 0.5 * (dA_j[k][J] + dA_i[k][I])
            else:
                num = (
                    0.5 * (elems(sys(At[k]) @ Vp) - at_j[k][J] * d)
                    + elems(res(AR[k]) @ Vp) - arn * d
                    - 0.5 * (elems(Vp @ sys(A0[k])) - a0_i[k][I] * d)
                    - elems(Vp @ res(AR[k])) + arm * d
                )
                ratio = num / safe
                shift = -0.5 * (dA_j[k][J] - dA_i[k][I])
            eps[k] = np.where(ok, ratio.real + shift, eps[k])
            imag[k] = np.where(ok, ratio.imag, imag[k])
        power[ok] = p
        todo &= ~ok
    # reorder [k, j, nu, i, mu] -> [k, i, mu, j, nu]
    eps = eps.transpose(0, 3, 4, 1, 2)
    imag = imag.transpose(0, 3, 4, 1, 2)
    power = power.transpose(2, 3, 0, 1)
    v1 = np.abs(elems(setup.interaction)).transpose(2, 3, 0, 1)
    return eps, imag, power, v1


def enumerate_ensemble(setup: JointSetup, options: EnsembleOptions | None = None) -> PathEnsemble:
    options = options or EnsembleOptions()
    ds, dr = setup.dims
    K = setup.n_charges
    tol = current_tolerances()

    p0 = setup.system_initial.probs
    pt = setup.system_final_reference.probs
    pR = setup.reservoir.probs
    r0 = setup.reference_initial.probs
    rt = setup.reference_final.probs
    c0 = conditional_matrix(setup.reference_initial, setup.system_initial)        # [m, i]
    ct = conditional_matrix(setup.reference_final, setup.system_final_reference)  # [n, j]
    pd0 = dephased_distribution(setup.system_initial, setup.reference_initial).probs
    pdt = dephased_distribution(setup.system_final_reference, setup.reference_final).probs

    B_in = np.kron(setup.system_initial.eigenvectors, setup.reservoir.eigenvectors)
    B_out = np.kron(setup.system_final_reference.eigenvectors, setup.reservoir.eigenvectors)
    U = setup.propagator.matrix
    fwd = np.abs(B_out.conj().T @ U @ B_in) ** 2                      # [(j nu), (i mu)]
    bwd = np.abs(B_in.conj().T @ U.conj().T @ B_out) ** 2             # [(i mu), (j nu)]
    T = fwd.reshape(ds, dr, ds, dr).transpose(2, 3, 0, 1)             # [i, mu, j, nu]
    Tb = bwd.reshape(ds, dr, ds, dr)                                  # [i, mu, j, nu]

    # lattice axes: i, mu, m, j, nu, n
    P = np.einsum("i,u,mi,iujv,nj->iumjvn", p0, pR, c0, T, ct)
    start = pt[None, None, None, :, None, None] if options.reverse_reading == "j" \
        else pt[:, None, None, None, None, None]
    Pr = start * np.einsum("v,nj,iujv,mi->iumjvn", pR, ct, Tb, c0)

    shape = setup.lattice_shape
    N = int(np.prod(shape))
    index = np.array(np.unravel_index(np.arange(N), shape)).T
    ii, uu, mm, jj, vv, nn = index.T

    if options.delta_a_basis == "ij":
        a_start = _diag_expectations(setup.charges_initial, setup.system_initial.eigenvectors)
        a_end = _diag_expectations(setup.charges_final, setup.system_final_reference.eigenvectors)
        delta_a = (a_end[:, jj] - a_start[:, ii]).T
    else:
        a_start = _diag_expectations(setup.charges_initial, setup.reference_initial.eigenvectors)
        a_end = _diag_expectations(setup.charges_final, setup.reference_final.eigenvectors)
        delta_a = (a_end[:, nn] - a_start[:, mm]).T
    aR = _diag_expectations(setup.reservoir_charges, setup.reservoir.eigenvectors)
    q = (aR[:, uu] - aR[:, vv]).T

    eps4, imag4, power4, v4 = _epsilon_lattice(setup, options)
    eps = eps4[:, ii, uu, jj, vv].T
    eps_imag = imag4[:, ii, uu, jj, vv].T
    eps_power = power4[ii, uu, jj, vv]
    eps_valid = np.repeat((eps_power > 0)[:, None], K, axis=1)
    v_mag = v4[ii, uu, jj, vv]
    w = delta_a - q - eps

    floor = tol.prob_floor
    log_valid = (
        (p0[ii] > floor) & (pt[jj] > floor) & (pd0[mm] > floor)
        & (pdt[nn] > floor) & (r0[mm] > floor) & (rt[nn] > floor)
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        dc = np.log(pt[jj] / pdt[nn]) - np.log(p0[ii] / pd0[mm])
        dd = np.log(pdt[nn] / rt[nn]) - np.log(pd0[mm] / r0[mm])
    dc = np.where(log_valid, dc, np.nan)
    dd = np.where(log_valid, dd, np.nan)

    return PathEnsemble(
        setup=setup,
        options=options,
        index=index,
        p_forward=P.reshape(N),
        p_reverse=Pr.reshape(N),
        delta_a=delta_a,
        q=q,
        epsilon=eps,
        epsilon_imag=eps_imag,
        epsilon_valid=eps_valid,
        epsilon_power=eps_power,
        w=w,
        delta_c=dc,
        delta_d=dd,
        log_valid=log_valid,
        v_element_magnitude=v_mag,
    )


def with_options(ens: PathEnsemble, **changes) -> PathEnsemble:
    """Re-enumerate the same setup under modified options (no new propagation)."""
    return enumerate_ensemble(ens.setup, replace(ens.options, **changes))


# ---------------------------------------------------------------------------
# degeneracy diagnostic


def _rotate_degenerate(state: GibbsState, rng: np.random.Generator) -> GibbsState:
    from .linalg import SpectralDecomposition

    sd = state.spectrum
    w, vecs = sd.eigenvalues, sd.eigenvectors.copy()
    tol = current_tolerances().degeneracy
    start = 0
    while start < len(w):
        stop = start + 1
        while stop < len(w) and w[stop] - w[stop - 1] <= tol:
            stop += 1
        g = stop - start
        if g > 1:
            z = rng.normal(size=(g, g)) + 1j * rng.normal(size=(g, g))
            qmat, _ = np.linalg.qr(z)
            vecs[:, start:stop] = vecs[:, start:stop] @ qmat
        start = stop
    return replace(state, spectrum=SpectralDecomposition(w, vecs))


def degeneracy_spread(
    setup: JointSetup,
    draws: int = 8,
    seed: int = 0,
    options: EnsembleOptions | None = None,
) -> dict[str, float]:
    """Spread of ensemble averages under random rotations of degenerate eigenspaces.

    Zero spread means the rank-1 projector choice does not matter for the
    reported averages.
    """
    rng = np.random.default_rng(seed)
    base = enumerate_ensemble(setup, options)

    def summary(ens):
        P = ens.p_forward
        ok = ens.record_valid
        return np.concatenate([P[ok] @ ens.epsilon[ok], P @ ens.q, [np.sum(ens.p_reverse)]])

    ref = summary(base)
    spread = np.zeros_like(ref)
    for _ in range(draws):
        rotated = replace(
            setup,
            system_initial=_rotate_degenerate(setup.system_initial, rng),
            system_final_reference=_rotate_degenerate(setup.system_final_reference, rng),
            reservoir=_rotate_degenerate(setup.reservoir, rng),
            reference_initial=_rotate_degenerate(setup.reference_initial, rng),
            reference_final=_rotate_degenerate(setup.reference_final, rng),
        )
        spread = np.maximum(spread, np.abs(summary(enumerate_ensemble(rotated, options)) - ref))
    K = setup.n_charges
    return {
        "epsilon_average": float(spread[:K].max()),
        "heat_average": float(spread[K:2 * K].max()),
        "reverse_normalization": float(spread[-1]),
    }
