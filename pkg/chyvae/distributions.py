"""
Multivariate normal and (inverse-)Wishart toolkit.

Densities, closed-form KL divergences and expectations, Bartlett sampling and
the conjugate update Σ | z ~ W⁻¹(Ψ + zzᵀ, ν + 1). All samplers draw from an
explicit :class:`RngStream`; nothing touches global random state.
"""
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.linalg
import scipy.special
from numpy.typing import ArrayLike, NDArray

from .errors import DimensionMismatch, DomainError, NotPositiveDefinite
from .linalg import (
    LowerTriangular,
    MatrixLike,
    SpdMatrix,
    as_spd,
    cholesky,
    log_det_spd,
    rank1_inverse,
    rank1_logdet,
    spd_inverse,
    trace_product,
)

LOG_2 = float(np.log(2.0))
LOG_2PI = float(np.log(2.0 * np.pi))

SeedKey = Union[int, tuple[int, ...]]


# =============================================================================
# Random streams
# =============================================================================

class RngStream:
    """
    A reproducible stream of random draws.

    Backed by NumPy's counter-based Philox bit generator keyed through a
    ``SeedSequence`` built from the 64-bit seed and a tuple of spawn keys.
    A stream is single-owner; use :meth:`child` to derive independent
    streams for concurrent or per-item work.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        if any(int(k) < 0 for k in key):
            raise DomainError(f"stream keys must be non-negative, got {key}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def child(self, *keys: int) -> "RngStream":
        """A fresh stream determined only by (seed, key + keys)."""
        return RngStream(self.seed, self.key + tuple(keys))

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, size=None):
        return self.generator.random(size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def standard_gamma(self, shape, size=None):
        return self.generator.standard_gamma(shape, size)

    def permutation(self, n: int) -> NDArray[np.int64]:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"


# =============================================================================
# Parameter sets
# =============================================================================

@dataclass(frozen=True)
class HyperpriorParams:
    """
    Inverse-Wishart hyperprior W⁻¹(Ψ, ν) with cached Ψ⁻¹ and log|Ψ|.
    """

    psi: SpdMatrix
    nu: float
    psi_inv: SpdMatrix
    logdet_psi: float

    @property
    def dim(self) -> int:
        return self.psi.dim

    @classmethod
    def from_psi(cls, psi: MatrixLike, nu: float) -> "HyperpriorParams":
        scale = as_spd(psi)
        nu = float(nu)
        if not nu > scale.dim - 1:
            raise DomainError(f"degrees of freedom must exceed p - 1 = {scale.dim - 1}, got {nu}")
        return cls(psi=scale, nu=nu, psi_inv=spd_inverse(scale), logdet_psi=log_det_spd(scale))

    @classmethod
    def from_sigma0(cls, sigma0: MatrixLike, nu: float) -> "HyperpriorParams":
        """
        Build the hyperprior whose mean is Σ₀, i.e. Ψ = (ν − p − 1)·Σ₀.

        Requires ν > p + 1 so that the mean exists.
        """
        target = as_spd(sigma0)
        p = target.dim
        if not float(nu) > p + 1:
            raise DomainError(f"nu must exceed p + 1 = {p + 1} to place the mean at sigma0, got {nu}")
        return cls.from_psi((float(nu) - p - 1) * target.array, nu)


@dataclass(frozen=True)
class PosteriorIwParams:
    """Conjugate posterior W⁻¹(Φ, λ) kept as (log|Φ|, Φ⁻¹, λ)."""

    phi_logdet: float
    phi_inv: SpdMatrix
    lam: float


# =============================================================================
# Special functions
# =============================================================================

def _check_mv_domain(p: int, a: float) -> None:
    if p < 1:
        raise DomainError(f"dimension must be positive, got {p}")
    if not a > (p - 1) / 2.0:
        raise DomainError(f"argument must exceed (p - 1)/2 = {(p - 1) / 2.0}, got {a}")


def mv_gamma_ln(p: int, a: float) -> float:
    """log Γₚ(a) = (p(p−1)/4)·log π + Σⱼ log Γ(a + (1−j)/2)."""
    _check_mv_domain(p, a)
    return float(scipy.special.multigammaln(a, p))


def mv_digamma(p: int, a: float) -> float:
    """ψₚ(a) = Σⱼ ψ(a + (1−j)/2), the derivative of :func:`mv_gamma_ln` in a."""
    _check_mv_domain(p, a)
    j = np.arange(1, p + 1)
    return float(np.sum(scipy.special.digamma(a + (1.0 - j) / 2.0)))


# =============================================================================
# Multivariate normal
# =============================================================================

def gaussian_reparam(
    mu: ArrayLike,
    chol: Union[LowerTriangular, ArrayLike],
    eps: ArrayLike,
) -> NDArray[np.float64]:
    """z = μ + L·ε."""
    mean = np.asarray(mu, dtype=np.float64)
    factor = chol.array if isinstance(chol, LowerTriangular) else np.asarray(chol, dtype=np.float64)
    noise = np.asarray(eps, dtype=np.float64)
    p = mean.shape[0]
    if mean.shape != (p,) or factor.shape != (p, p) or noise.shape != (p,):
        raise DimensionMismatch(
            f"reparameterization shapes disagree: mu {mean.shape}, chol {factor.shape}, eps {noise.shape}"
        )
    return mean + factor @ noise


def gaussian_kl(mu1: ArrayLike, sigma1: MatrixLike, mu0: ArrayLike, sigma0: MatrixLike) -> float:
    """KL(N(μ₁, Σ₁) ‖ N(μ₀, Σ₀))."""
    s1 = as_spd(sigma1)
    s0 = as_spd(sigma0)
    m1 = np.asarray(mu1, dtype=np.float64)
    m0 = np.asarray(mu0, dtype=np.float64)
    p = s0.dim
    if s1.dim != p or m1.shape != (p,) or m0.shape != (p,):
        raise DimensionMismatch("gaussian_kl arguments must share dimension p")
    k0 = cholesky(s0).array
    diff = m0 - m1
    solved = scipy.linalg.cho_solve((k0, True), np.column_stack([s1.array, diff]))
    trace = float(np.trace(solved[:, :p]))
    maha = float(diff @ solved[:, p])
    return 0.5 * (log_det_spd(s0) - log_det_spd(s1) - p + trace + maha)


def mvn_log_pdf(z: ArrayLike, sigma: MatrixLike) -> float:
    """log N(z | 0, Σ)."""
    cov = as_spd(sigma)
    vector = np.asarray(z, dtype=np.float64)
    if vector.shape != (cov.dim,):
        raise DimensionMismatch(f"expected a vector of length {cov.dim}, got shape {vector.shape}")
    factor = cholesky(cov).array
    white = scipy.linalg.solve_triangular(factor, vector, lower=True)
    return -0.5 * (cov.dim * LOG_2PI + 2.0 * float(np.sum(np.log(np.diag(factor)))) + float(white @ white))


# =============================================================================
# Inverse-Wishart density, moments and KL
# =============================================================================

def _iw_log_pdf_array(xs: NDArray, psi: NDArray, logdet_psi: float, nu: float) -> NDArray:
    """Inverse-Wishart log density for a stack of matrices with shape (..., p, p)."""
    p = psi.shape[0]
    factors = np.linalg.cholesky(xs)
    logdet_x = 2.0 * np.sum(np.log(np.diagonal(factors, axis1=-2, axis2=-1)), axis=-1)
    solved = np.linalg.solve(xs, np.broadcast_to(psi, xs.shape))
    trace = np.trace(solved, axis1=-2, axis2=-1)
    return (
        0.5 * nu * logdet_psi
        - 0.5 * nu * p * LOG_2
        - mv_gamma_ln(p, 0.5 * nu)
        - 0.5 * (nu + p + 1) * logdet_x
        - 0.5 * trace
    )


def iw_log_pdf(x: MatrixLike, hp: HyperpriorParams) -> float:
    """
    log W⁻¹(X | Ψ, ν) =
    (ν/2)log|Ψ| − (νp/2)log 2 − log Γₚ(ν/2) − ((ν+p+1)/2)log|X| − ½Tr(ΨX⁻¹)
    """
    matrix = as_spd(x)
    if matrix.dim != hp.dim:
        raise DimensionMismatch(f"expected a {hp.dim}x{hp.dim} matrix, got dim {matrix.dim}")
    p = hp.dim
    return (
        0.5 * hp.nu * hp.logdet_psi
        - 0.5 * hp.nu * p * LOG_2
        - mv_gamma_ln(p, 0.5 * hp.nu)
        - 0.5 * (hp.nu + p + 1) * log_det_spd(matrix)
        - 0.5 * trace_product(hp.psi, spd_inverse(matrix))
    )


def iw_log_pdf_many(xs: NDArray, hp: HyperpriorParams) -> NDArray[np.float64]:
    """Vectorised :func:`iw_log_pdf` over an (n, p, p) stack."""
    stack = np.asarray(xs, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[1:] != (hp.dim, hp.dim):
        raise DimensionMismatch(f"expected shape (n, {hp.dim}, {hp.dim}), got {stack.shape}")
    try:
        return _iw_log_pdf_array(stack, hp.psi.array, hp.logdet_psi, hp.nu)
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefinite(f"sample stack is not positive definite: {e}") from e


def iw_mean(hp: HyperpriorParams) -> SpdMatrix:
    """E[X] = Ψ / (ν − p − 1), defined for ν > p + 1."""
    p = hp.dim
    if not hp.nu > p + 1:
        raise DomainError(f"the mean requires nu > p + 1 = {p + 1}, got {hp.nu}")
    return SpdMatrix(hp.psi.array / (hp.nu - p - 1))


def iw_expected_logdet(hp: HyperpriorParams) -> float:
    """E[log|X|] = log(|Ψ| / 2ᵖ) − ψₚ(ν/2)."""
    return hp.logdet_psi - hp.dim * LOG_2 - mv_digamma(hp.dim, 0.5 * hp.nu)


def iw_expected_inverse(hp: HyperpriorParams) -> SpdMatrix:
    """E[X⁻¹] = ν·Ψ⁻¹."""
    return SpdMatrix(hp.nu * hp.psi_inv.array)


def _iw_kl_from_parts(phi_logdet: float, phi_inv: SpdMatrix, lam: float, hp: HyperpriorParams) -> float:
    p = hp.dim
    if phi_inv.dim != p:
        raise DimensionMismatch(f"posterior dimension {phi_inv.dim} differs from hyperprior dimension {p}")
    if not lam > p - 1:
        raise DomainError(f"posterior degrees of freedom must exceed p - 1 = {p - 1}, got {lam}")
    nu = hp.nu
    logdet_ratio = hp.logdet_psi - phi_logdet
    trace = trace_product(hp.psi, phi_inv)
    return (
        -0.5 * nu * logdet_ratio
        + 0.5 * lam * (trace - p)
        + mv_gamma_ln(p, 0.5 * nu)
        - mv_gamma_ln(p, 0.5 * lam)
        + 0.5 * (lam - nu) * mv_digamma(p, 0.5 * lam)
    )


def iw_kl(q_phi: MatrixLike, q_lambda: float, hp: HyperpriorParams) -> float:
    """
    KL(W⁻¹(Φ, λ) ‖ W⁻¹(Ψ, ν)) =
    −(ν/2)log|ΨΦ⁻¹| + (λ/2)(Tr(ΨΦ⁻¹) − p) + log(Γₚ(ν/2)/Γₚ(λ/2)) + ((λ−ν)/2)ψₚ(λ/2)
    """
    phi = as_spd(q_phi)
    return _iw_kl_from_parts(log_det_spd(phi), spd_inverse(phi), float(q_lambda), hp)


def iw_kl_posterior(posterior: PosteriorIwParams, hp: HyperpriorParams) -> float:
    """:func:`iw_kl` for a conjugate posterior kept in (log|Φ|, Φ⁻¹, λ) form."""
    return _iw_kl_from_parts(posterior.phi_logdet, posterior.phi_inv, posterior.lam, hp)


def conjugate_posterior(hp: HyperpriorParams, z: ArrayLike) -> PosteriorIwParams:
    """Σ | z ~ W⁻¹(Φ = Ψ + zzᵀ, λ = ν + 1), via the rank-1 identities."""
    return PosteriorIwParams(
        phi_logdet=rank1_logdet(hp.logdet_psi, hp.psi_inv, z),
        phi_inv=rank1_inverse(hp.psi_inv, z),
        lam=hp.nu + 1.0,
    )


# =============================================================================
# Scalar inverse-gamma oracles (the p = 1 case)
# =============================================================================

def inverse_gamma_log_pdf(x: float, alpha: float, beta: float) -> float:
    return float(
        alpha * np.log(beta) - scipy.special.gammaln(alpha) - (alpha + 1.0) * np.log(x) - beta / x
    )


def inverse_gamma_kl(alpha_q: float, beta_q: float, alpha_p: float, beta_p: float) -> float:
    """KL(IG(α_q, β_q) ‖ IG(α_p, β_p))."""
    return float(
        (alpha_q - alpha_p) * scipy.special.digamma(alpha_q)
        - scipy.special.gammaln(alpha_q)
        + scipy.special.gammaln(alpha_p)
        + alpha_p * (np.log(beta_q) - np.log(beta_p))
        + alpha_q * (beta_p - beta_q) / beta_q
    )


# =============================================================================
# Samplers
# =============================================================================

def chi_square_sample(k: float, rng: RngStream, size: Optional[int] = None):
    """
    χ²(k) draw(s) as 2·Gamma(k/2, 1).

    NumPy's gamma sampler is Marsaglia–Tsang, which handles the non-integer
    degrees of freedom the Bartlett diagonal takes.
    """
    if not k > 0:
        raise DomainError(f"chi-square degrees of freedom must be positive, got {k}")
    draw = 2.0 * rng.standard_gamma(0.5 * k, size)
    return float(draw) if size is None else draw


def _bartlett_factor(p: int, nu: float, rng: RngStream, n: int) -> NDArray[np.float64]:
    """Stack of n Bartlett matrices B: Bᵢᵢ² ~ χ²(ν−i+1), strictly lower entries ~ N(0, 1)."""
    dof = nu - np.arange(p)
    diag = np.sqrt(2.0 * rng.standard_gamma(0.5 * dof, (n, p)))
    lower = np.tril(rng.normal((n, p, p)), k=-1)
    rows = np.arange(p)
    lower[:, rows, rows] = diag
    return lower


def wishart_sample_bartlett(scale: MatrixLike, nu: float, rng: RngStream) -> SpdMatrix:
    """X = V·B·Bᵀ·Vᵀ ~ W(S, ν) with V = cholesky(S)."""
    spd = as_spd(scale)
    if not nu > spd.dim - 1:
        raise DomainError(f"degrees of freedom must exceed p - 1 = {spd.dim - 1}, got {nu}")
    a = cholesky(spd).array @ _bartlett_factor(spd.dim, float(nu), rng, 1)[0]
    return SpdMatrix.symmetrized(a @ a.T)


def iw_sample_bartlett_many(hp: HyperpriorParams, rng: RngStream, n: int) -> NDArray[np.float64]:
    """
    n independent draws from W⁻¹(Ψ, ν) as an (n, p, p) array.

    Each draw inverts a Wishart sample W(Ψ⁻¹, ν) built by the Bartlett
    decomposition: with A = V·B (V = cholesky(Ψ⁻¹)), X⁻¹ = A⁻ᵀ·A⁻¹.
    """
    if n < 1:
        raise DomainError(f"sample count must be positive, got {n}")
    v = cholesky(hp.psi_inv).array
    a = np.matmul(v, _bartlett_factor(hp.dim, hp.nu, rng, n))
    a_inv = np.linalg.inv(a)
    samples = np.matmul(np.swapaxes(a_inv, -1, -2), a_inv)
    return 0.5 * (samples + np.swapaxes(samples, -1, -2))


def iw_sample_bartlett(hp: HyperpriorParams, rng: RngStream) -> SpdMatrix:
    """A single draw from W⁻¹(Ψ, ν)."""
    return SpdMatrix(iw_sample_bartlett_many(hp, rng, 1)[0])
