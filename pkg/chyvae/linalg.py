"""
Dense symmetric-positive-definite kernels.

Everything here is float64 and row-major. Covariance matrices travel as
:class:`SpdMatrix` and their Cholesky factors as :class:`LowerTriangular`;
both are thin validated wrappers around read-only NumPy arrays.
"""
from typing import Union

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

from .errors import DimensionMismatch, NotPositiveDefinite

SYMMETRY_RTOL = 1e-12


def _frozen(values: ArrayLike) -> NDArray[np.float64]:
    array = np.array(values, dtype=np.float64)
    array.setflags(write=False)
    return array


class SpdMatrix:
    """
    A dense symmetric positive-definite matrix.

    Symmetry is checked on construction (relative tolerance 1e-12 against the
    largest entry). Positive definiteness is established by :func:`cholesky`,
    which raises :class:`NotPositiveDefinite` on a non-positive pivot.
    """

    __slots__ = ("array",)

    def __init__(self, values: ArrayLike):
        array = _frozen(values)
        if array.ndim != 2 or array.shape[0] != array.shape[1] or array.shape[0] < 1:
            raise DimensionMismatch(f"expected a non-empty square matrix, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise NotPositiveDefinite("matrix has non-finite entries")
        scale = max(float(np.max(np.abs(array))), np.finfo(np.float64).tiny)
        if float(np.max(np.abs(array - array.T))) > SYMMETRY_RTOL * scale:
            raise NotPositiveDefinite("matrix is not symmetric")
        self.array = array

    @classmethod
    def symmetrized(cls, values: ArrayLike) -> "SpdMatrix":
        """Wrap a matrix that is symmetric up to rounding, averaging it with its transpose."""
        array = np.asarray(values, dtype=np.float64)
        return cls(0.5 * (array + array.T))

    @classmethod
    def identity(cls, dim: int) -> "SpdMatrix":
        return cls(np.eye(dim))

    @classmethod
    def diag(cls, values: ArrayLike) -> "SpdMatrix":
        return cls(np.diag(np.asarray(values, dtype=np.float64)))

    @property
    def dim(self) -> int:
        return self.array.shape[0]

    def __repr__(self) -> str:
        return f"SpdMatrix(dim={self.dim}, array={self.array.tolist()!r})"


class LowerTriangular:
    """
    A lower-triangular matrix with a strictly positive diagonal.

    Entries above the diagonal must be exactly zero.
    """

    __slots__ = ("array",)

    def __init__(self, values: ArrayLike):
        array = _frozen(values)
        if array.ndim != 2 or array.shape[0] != array.shape[1] or array.shape[0] < 1:
            raise DimensionMismatch(f"expected a non-empty square matrix, got shape {array.shape}")
        if np.any(np.triu(array, k=1) != 0.0):
            raise DimensionMismatch("entries above the diagonal must be zero")
        if not np.all(np.diag(array) > 0.0):
            raise NotPositiveDefinite("diagonal entries must be strictly positive")
        self.array = array

    @property
    def dim(self) -> int:
        return self.array.shape[0]

    def to_spd(self) -> SpdMatrix:
        """Return K·Kᵀ."""
        return SpdMatrix.symmetrized(self.array @ self.array.T)

    def __repr__(self) -> str:
        return f"LowerTriangular(dim={self.dim}, array={self.array.tolist()!r})"


MatrixLike = Union[SpdMatrix, ArrayLike]


def as_spd(matrix: MatrixLike) -> SpdMatrix:
    return matrix if isinstance(matrix, SpdMatrix) else SpdMatrix(matrix)


def cholesky(matrix: MatrixLike) -> LowerTriangular:
    """
    Lower Cholesky factor K with K·Kᵀ = S.

    Raises:
        NotPositiveDefinite: if any pivot is not strictly positive.
    """
    spd = as_spd(matrix)
    try:
        factor = scipy.linalg.cholesky(spd.array, lower=True)
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefinite(f"Cholesky failed: {e}") from e
    if not np.all(np.diag(factor) > 0.0):
        raise NotPositiveDefinite("Cholesky produced a non-positive pivot")
    return LowerTriangular(factor)


def log_det_spd(matrix: MatrixLike) -> float:
    """log|S| = 2·Σᵢ log Kᵢᵢ of the Cholesky factor K."""
    factor = cholesky(matrix)
    return 2.0 * float(np.sum(np.log(np.diag(factor.array))))


def spd_inverse(matrix: MatrixLike) -> SpdMatrix:
    spd = as_spd(matrix)
    factor = cholesky(spd)
    inverse = scipy.linalg.cho_solve((factor.array, True), np.eye(spd.dim))
    return SpdMatrix.symmetrized(inverse)


def _as_vector(z: ArrayLike, dim: int) -> NDArray[np.float64]:
    vector = np.asarray(z, dtype=np.float64)
    if vector.shape != (dim,):
        raise DimensionMismatch(f"expected a vector of length {dim}, got shape {vector.shape}")
    return vector


def rank1_logdet(logdet_psi: float, psi_inv: MatrixLike, z: ArrayLike) -> float:
    """
    log|Ψ + zzᵀ| from log|Ψ| and Ψ⁻¹ by the matrix-determinant lemma.

    The argument 1 + zᵀΨ⁻¹z is at least 1 for any SPD Ψ.
    """
    inverse = as_spd(psi_inv)
    vector = _as_vector(z, inverse.dim)
    quad = float(vector @ inverse.array @ vector)
    return float(logdet_psi) + float(np.log1p(quad))


def rank1_inverse(psi_inv: MatrixLike, z: ArrayLike) -> SpdMatrix:
    """(Ψ + zzᵀ)⁻¹ = Ψ⁻¹ − (Ψ⁻¹z)(Ψ⁻¹z)ᵀ / (1 + zᵀΨ⁻¹z)  (Sherman–Morrison)."""
    inverse = as_spd(psi_inv)
    vector = _as_vector(z, inverse.dim)
    u = inverse.array @ vector
    return SpdMatrix.symmetrized(inverse.array - np.outer(u, u) / (1.0 + float(vector @ u)))


def block_diag(*matrices: MatrixLike) -> SpdMatrix:
    return SpdMatrix(scipy.linalg.block_diag(*(as_spd(m).array for m in matrices)))


def trace_product(a: MatrixLike, b: MatrixLike) -> float:
    """Tr(A·B)."""
    left = a.array if isinstance(a, SpdMatrix) else np.asarray(a, dtype=np.float64)
    right = b.array if isinstance(b, SpdMatrix) else np.asarray(b, dtype=np.float64)
    if left.shape != right.T.shape:
        raise DimensionMismatch(f"cannot form Tr(A·B) for shapes {left.shape} and {right.shape}")
    return float(np.einsum("ij,ji->", left, right))
