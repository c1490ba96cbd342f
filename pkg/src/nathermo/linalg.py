"""Dense complex operator algebra for small Hilbert spaces (dim <= 64).

Matrices are plain ``numpy`` complex128 arrays. The eigensolver is a cyclic
two-sided Jacobi method for Hermitian matrices, vectorised over a leading
batch axis so that many small generators (propagator slices) can be
diagonalised in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .settings import current_tolerances


class DimensionError(ValueError):
    pass


class NotHermitianError(ValueError):
    pass


class NotUnitaryError(ValueError):
    pass


class ConvergenceError(ArithmeticError):
    pass


class RangeError(OverflowError):
    pass


PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def as_matrix(a) -> np.ndarray:
    """Return ``a`` as a square complex128 array (no copy if already one)."""
    if isinstance(a, HermitianOperator | UnitaryOperator):
        a = a.matrix
    m = np.asarray(a, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    return m


def max_norm(a) -> float:
    return float(np.max(np.abs(a))) if np.size(a) else 0.0


def matrices_close(a, b, atol: float) -> bool:
    """Entrywise equality within an explicit absolute tolerance."""
    a, b = as_matrix(a), as_matrix(b)
    return a.shape == b.shape and max_norm(a - b) <= atol


@dataclass(frozen=True, eq=False)
class HermitianOperator:
    matrix: np.ndarray
    label: str = ""

    def __post_init__(self):
        m = as_matrix(self.matrix).copy()
        dev = max_norm(m - m.conj().T)
        if dev > current_tolerances().hermitian:
            raise NotHermitianError(
                f"operator {self.label!r} is not Hermitian (max deviation {dev:.3e})"
            )
        # store the exactly-Hermitian part so downstream algebra is symmetric
        m = 0.5 * (m + m.conj().T)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def __add__(self, other: HermitianOperator) -> HermitianOperator:
        return HermitianOperator(self.matrix + other.matrix, f"{self.label}+{other.label}")

    def scaled(self, c: float, label: str | None = None) -> HermitianOperator:
        return HermitianOperator(float(c) * self.matrix, label or f"{c}*{self.label}")

    def expectation(self, vec: np.ndarray) -> float:
        return float(np.real(np.vdot(vec, self.matrix @ vec)))


@dataclass(frozen=True, eq=False)
class UnitaryOperator:
    matrix: np.ndarray

    def __post_init__(self):
        m = as_matrix(self.matrix).copy()
        dev = max_norm(m.conj().T @ m - np.eye(m.shape[0]))
        if dev > current_tolerances().unitary:
            raise NotUnitaryError(f"matrix is not unitary (max deviation {dev:.3e})")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def dagger(self) -> UnitaryOperator:
        return UnitaryOperator(self.matrix.conj().T)


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Ascending eigenvalues with orthonormal eigenvectors stored as columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    _projectors: list = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return len(self.eigenvalues)

    def vector(self, k: int) -> np.ndarray:
        return self.eigenvectors[:, k]

    @property
    def projectors(self) -> list[np.ndarray]:
        if self._projectors is None:
            projs = [np.outer(v, v.conj()) for v in self.eigenvectors.T]
            object.__setattr__(self, "_projectors", projs)
        return self._projectors

    def reconstruct(self, values=None) -> np.ndarray:
        """Return sum_k f_k |k><k| with f = eigenvalues unless given."""
        f = self.eigenvalues if values is None else np.asarray(values)
        return (self.eigenvectors * f) @ self.eigenvectors.conj().T


def tensor(a, b) -> np.ndarray:
    """Kronecker product with the first factor as the slow index."""
    return np.kron(as_matrix(a), as_matrix(b))


def commutator(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise DimensionError(f"commutator of {a.shape} and {b.shape} matrices")
    return a @ b - b @ a


def jacobi_eigh(a, max_sweeps: int | None = None):
    """Diagonalise Hermitian matrices by cyclic Jacobi rotations.

    ``a`` has shape ``(..., n, n)``. Returns ``(eigenvalues, eigenvectors)``
    with ascending eigenvalues along the last axis; eigenvectors are columns.
    Each sweep visits the pairs (p, q), p < q, in row order, so the result is
    a deterministic function of the input.
    """
    if max_sweeps is None:
        max_sweeps = current_tolerances().jacobi_sweeps
    a = np.asarray(a, dtype=complex)
    batch_shape, n = a.shape[:-2], a.shape[-1]
    A = a.reshape((-1, n, n)).copy()
    V = np.broadcast_to(np.eye(n, dtype=complex), A.shape).copy()
    pairs = [(p, q) for p in range(n) for q in range(p + 1, n)]
    offmask = ~np.eye(n, dtype=bool)
    eps = np.finfo(float).eps

    for _ in range(max_sweeps + 1):
        total = np.sqrt(np.sum(np.abs(A) ** 2, axis=(1, 2)))
        off = np.sqrt(np.sum(np.abs(A[:, offmask]) ** 2, axis=1))
        if np.all(off <= eps * total):
            break
        for p, q in pairs:
            apq = A[:, p, q]
            r = np.abs(apq)
            if not np.any(r):
                continue
            phase = np.where(r > 0, apq / np.where(r > 0, r, 1.0), 1.0)
            theta = 0.5 * np.arctan2(2.0 * r, (A[:, q, q] - A[:, p, p]).real)
            c = np.cos(theta)[:, None]
            s = np.sin(theta)[:, None]
            e = phase[:, None]
            ec = e.conj()

            cp, cq = A[:, :, p].copy(), A[:, :, q].copy()
            A[:, :, p] = c * cp - s * ec * cq
            A[:, :, q] = s * cp + c * ec * cq
            rp, rq = A[:, p, :].copy(), A[:, q, :].copy()
            A[:, p, :] = c * rp - s * e * rq
            A[:, q, :] = s * rp + c * e * rq
            A[:, p, q] = 0.0
            A[:, q, p] = 0.0

            vp, vq = V[:, :, p].copy(), V[:, :, q].copy()
            V[:, :, p] = c * vp - s * ec * vq
            V[:, :, q] = s * vp + c * ec * vq
    else:
        worst = float(np.max(off / np.where(total > 0, total, 1.0)))
        raise ConvergenceError(
            f"Jacobi eigensolver did not converge in {max_sweeps} sweeps "
            f"(relative off-diagonal norm {worst:.3e})"
        )

    w = np.real(np.diagonal(A, axis1=1, axis2=2))
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    return w.reshape(batch_shape + (n,)), V.reshape(batch_shape + (n, n))


def _fix_phase(v: np.ndarray) -> np.ndarray:
    # largest component (first one on near-ties) made real and positive
    mags = np.abs(v)
    k = int(np.argmax(mags >= mags.max() - 1e-12))
    return v * (abs(v[k]) / v[k])


def _pivoted_basis(vecs: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal basis of span(vecs).

    Projects the canonical basis onto the subspace and orthogonalises the
    projected columns with column pivoting. The result depends on the
    subspace only, not on the particular ``vecs`` spanning it.
    """
    g = vecs.shape[1]
    cols = vecs @ vecs.conj().T
    basis = []
    for _ in range(g):
        norms = np.linalg.norm(cols, axis=0)
        k = int(np.argmax(norms >= norms.max() * (1 - 1e-12)))
        b = cols[:, k] / norms[k]
        b = b * (abs(b[k]) / b[k])
        basis.append(b)
        cols = cols - np.outer(b, b.conj() @ cols)
    return np.array(basis).T


def spectral_decompose(a, max_sweeps: int | None = None) -> SpectralDecomposition:
    """Eigen-decomposition with a reproducible basis.

    Eigenvalues within the degeneracy tolerance are grouped; each group's
    basis comes from :func:`_pivoted_basis`, and non-degenerate vectors get
    a fixed phase.
    """
    m = as_matrix(a)
    if not isinstance(a, HermitianOperator):
        HermitianOperator(m)  # validates
    w, v = jacobi_eigh(m, max_sweeps)
    tol = current_tolerances().degeneracy
    vecs = np.empty_like(v)
    start = 0
    n = len(w)
    while start < n:
        stop = start + 1
        while stop < n and w[stop] - w[stop - 1] <= tol:
            stop += 1
        if stop - start == 1:
            vecs[:, start] = _fix_phase(v[:, start])
        else:
            vecs[:, start:stop] = _pivoted_basis(v[:, start:stop])
        start = stop
    w.flags.writeable = False
    vecs.flags.writeable = False
    return SpectralDecomposition(w, vecs)


def _check_range(eigenvalues, scale: complex):
    worst = float(np.max(np.abs(np.real(scale) * eigenvalues)))
    if worst > current_tolerances().overflow:
        raise RangeError(
            f"exponent {worst:.1f} exceeds the overflow guard "
            f"{current_tolerances().overflow:.0f}"
        )


def expm_hermitian(a, scale: complex) -> np.ndarray:
    """exp(scale * A) for Hermitian A and real or purely imaginary scale."""
    scale = complex(scale)
    if scale.real != 0 and scale.imag != 0:
        raise ValueError("scale must be real or purely imaginary")
    sd = spectral_decompose(a)
    _check_range(sd.eigenvalues, scale)
    return sd.reconstruct(np.exp(scale * sd.eigenvalues))


def expm_hermitian_batch(mats, scale: complex) -> np.ndarray:
    """Batched exp(scale * A_b); no basis canonicalisation is needed here."""
    w, v = jacobi_eigh(mats)
    _check_range(w, scale)
    return (v * np.exp(scale * w)[..., None, :]) @ np.conj(np.swapaxes(v, -1, -2))
