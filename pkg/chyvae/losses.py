"""
Closed-form training objectives.

The CHyVAE evidence lower bound per example is

    recon + ½log|Σ̃| − ((1+ν)/2)·log|Φ|
          − ((1+ν)/2)·Tr((Σ̃ + μ̃μ̃ᵀ)Φ⁻¹) − ((1+ν)/2)·Tr(ΨΦ⁻¹),   Φ = Ψ + zzᵀ

split into the Gaussian term ½[−log|Σ̃| + log|Φ| + λTr(Φ⁻¹(Σ̃+μ̃μ̃ᵀ))] and the
inverse-Wishart term (ν/2)log|Φ| + (λ/2)Tr(ΨΦ⁻¹), λ = ν + 1. Φ never gets
factorised: log|Φ| and Φ⁻¹ come from the rank-1 identities. log|Σ̃| is
2·Σ log L̃ᵢᵢ, i.e. it ignores the 10⁻⁴ jitter that the trace terms see.

Values are batch means; maximise ``total`` (minimise ``-total``).
"""
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import (
    LOG_2,
    HyperpriorParams,
    RngStream,
    conjugate_posterior,
    iw_kl_posterior,
    iw_log_pdf_many,
    iw_sample_bartlett_many,
    mv_digamma,
    mv_gamma_ln,
)
from .errors import DimensionMismatch, DomainError
from .linalg import log_det_spd, spd_inverse, trace_product
from .nn import LatentBatch, LatentPosterior

Posteriors = Union[LatentBatch, LatentPosterior]


@dataclass
class ElboBreakdown:
    """
    Batch-mean ELBO components.

    recon is the Bernoulli log-likelihood (≤ 0); total = recon − gaussian_term − iw_term.
    """

    recon: Tensor
    gaussian_term: Tensor
    iw_term: Tensor
    total: Tensor
    input_dim: int

    @property
    def recon_error(self) -> float:
        """Per-example reconstruction error, −recon."""
        return -self.recon.item()

    @property
    def recon_per_pixel(self) -> float:
        return self.recon_error / self.input_dim

    def as_row(self, step: int) -> dict[str, float]:
        return {
            "step": step,
            "recon_sum": self.recon_error,
            "recon_per_pixel": self.recon_per_pixel,
            "gaussian_term": self.gaussian_term.item(),
            "iw_term": self.iw_term.item(),
            "total": self.total.item(),
        }


def _rows(x: Union[Tensor, ArrayLike]) -> Tensor:
    tensor = x if isinstance(x, Tensor) else ad.constant(x)
    if tensor.values.ndim == 1:
        tensor = ad.reshape(tensor, (1,) + tensor.shape)
    return tensor


def _split(posteriors: Posteriors, z: Union[Tensor, ArrayLike]) -> tuple[list[LatentPosterior], list[Tensor]]:
    latent = z if isinstance(z, Tensor) else ad.constant(z)
    if isinstance(posteriors, LatentPosterior):
        if latent.shape != posteriors.mu.shape:
            raise DimensionMismatch(f"z shape {latent.shape} differs from mu shape {posteriors.mu.shape}")
        return [posteriors], [latent]
    if latent.shape != posteriors.mu.shape:
        raise DimensionMismatch(f"z shape {latent.shape} differs from mu shape {posteriors.mu.shape}")
    return list(posteriors), [ad.slice(latent, i) for i in range(len(posteriors))]


def _mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return ad.scalar_mul(total, 1.0 / len(terms))


def bernoulli_recon(x: Union[Tensor, ArrayLike], x_hat: Tensor) -> Tensor:
    """
    Σⱼ [xⱼ log x̂ⱼ + (1−xⱼ) log(1−x̂ⱼ)] summed over every entry.

    Raises:
        DomainError: if x̂ touches 0 or 1.
    """
    target = x if isinstance(x, Tensor) else ad.constant(x)
    if target.shape != x_hat.shape:
        raise DimensionMismatch(f"x shape {target.shape} differs from x_hat shape {x_hat.shape}")
    if np.any(x_hat.values <= 0.0) or np.any(x_hat.values >= 1.0):
        raise DomainError("x_hat must lie strictly inside (0, 1)")
    ones = ad.constant(np.ones(x_hat.shape))
    on = ad.elementwise_mul(target, ad.log(x_hat))
    off = ad.elementwise_mul(ones - target, ad.log(ones - x_hat))
    return ad.sum(on + off)


# =============================================================================
# CHyVAE
# =============================================================================

@dataclass
class _Rank1Terms:
    phi_logdet: Tensor
    phi_inv: Tensor


def rank1_terms(z: Tensor, hp: HyperpriorParams) -> _Rank1Terms:
    """Differentiable log|Ψ + zzᵀ| and (Ψ + zzᵀ)⁻¹ for one latent vector."""
    psi_inv = ad.constant(hp.psi_inv.array)
    u = ad.matvec(psi_inv, z)
    log_c = ad.log(ad.constant(1.0) + ad.dot(z, u))
    inv_c = ad.exp(ad.neg(log_c))
    return _Rank1Terms(
        phi_logdet=log_c + ad.constant(hp.logdet_psi),
        phi_inv=psi_inv - ad.scalar_mul(ad.outer(u, u), inv_c),
    )


def _logdet_from_chol(chol: Tensor) -> Tensor:
    return ad.scalar_mul(ad.sum(ad.log(ad.diagonal(chol))), 2.0)


def _chyvae_example(posterior: LatentPosterior, z: Tensor, hp: HyperpriorParams) -> tuple[Tensor, Tensor]:
    lam = hp.nu + 1.0
    phi = rank1_terms(z, hp)
    moment = posterior.sigma + ad.outer(posterior.mu, posterior.mu)
    trace_moment = ad.sum(ad.elementwise_mul(moment, phi.phi_inv))
    trace_psi = ad.sum(ad.elementwise_mul(ad.constant(hp.psi.array), phi.phi_inv))
    gaussian = ad.scalar_mul(
        ad.neg(_logdet_from_chol(posterior.chol)) + phi.phi_logdet + ad.scalar_mul(trace_moment, lam),
        0.5,
    )
    iw = ad.scalar_mul(phi.phi_logdet, 0.5 * hp.nu) + ad.scalar_mul(trace_psi, 0.5 * lam)
    return gaussian, iw


def chyvae_loss(
    x: Union[Tensor, ArrayLike],
    posterior: Posteriors,
    z: Union[Tensor, ArrayLike],
    hp: HyperpriorParams,
    x_hat: Tensor,
) -> ElboBreakdown:
    """Constant-free CHyVAE ELBO, batch-averaged and differentiable in (μ̃, L̃, z, x̂)."""
    posteriors, zs = _split(posterior, z)
    rows = _rows(x)
    x_hat_rows = _rows(x_hat)
    if rows.shape[0] != len(posteriors):
        raise DimensionMismatch(f"{rows.shape[0]} inputs but {len(posteriors)} posteriors")
    if posteriors[0].mu.shape != (hp.dim,):
        raise DimensionMismatch(f"latent size {posteriors[0].mu.shape} differs from hyperprior dimension {hp.dim}")
    gaussians, iws = zip(*(_chyvae_example(q, z_i, hp) for q, z_i in zip(posteriors, zs)))
    recon = ad.scalar_mul(bernoulli_recon(rows, x_hat_rows), 1.0 / len(posteriors))
    gaussian_term = _mean(list(gaussians))
    iw_term = _mean(list(iws))
    total = recon - gaussian_term - iw_term
    return ElboBreakdown(recon, gaussian_term, iw_term, total, input_dim=rows.shape[1])


def chyvae_loss_dense(
    mu: ArrayLike,
    chol: ArrayLike,
    sigma: ArrayLike,
    z: ArrayLike,
    hp: HyperpriorParams,
) -> tuple[float, float]:
    """
    Reference (gaussian_term, iw_term) for one example, forming Φ explicitly.

    Uses :func:`spd_inverse` and :func:`log_det_spd` on Φ = Ψ + zzᵀ instead
    of the rank-1 identities.
    """
    mean = np.asarray(mu, dtype=np.float64)
    vector = np.asarray(z, dtype=np.float64)
    phi = hp.psi.array + np.outer(vector, vector)
    phi_inv = spd_inverse(phi)
    phi_logdet = log_det_spd(phi)
    lam = hp.nu + 1.0
    logdet_sigma = 2.0 * float(np.sum(np.log(np.diag(np.asarray(chol, dtype=np.float64)))))
    moment = np.asarray(sigma, dtype=np.float64) + np.outer(mean, mean)
    gaussian = 0.5 * (-logdet_sigma + phi_logdet + lam * trace_product(phi_inv, moment))
    iw = 0.5 * hp.nu * phi_logdet + 0.5 * lam * trace_product(hp.psi, phi_inv)
    return gaussian, iw


@dataclass
class ExactElbo:
    """
    Constant-inclusive ELBO terms for one example with Monte-Carlo cross-checks.

    Each MC estimate is a (mean, standard error) pair.
    """

    recon: float
    gaussian_analytic: float
    iw_analytic: float
    gaussian_mc: Optional[tuple[float, float]]
    iw_mc: Optional[tuple[float, float]]

    @property
    def total(self) -> float:
        return self.recon - self.gaussian_analytic - self.iw_analytic


def gaussian_term_constant(hp: HyperpriorParams) -> float:
    """½[−p − p·log 2 − ψₚ(λ/2)], the part of the Gaussian term training drops."""
    p = hp.dim
    return 0.5 * (-p - p * LOG_2 - mv_digamma(p, 0.5 * (hp.nu + 1.0)))


def gaussian_term_mc(
    mu: ArrayLike,
    chol: ArrayLike,
    sigma: ArrayLike,
    z: ArrayLike,
    hp: HyperpriorParams,
    n: int,
    rng: RngStream,
) -> tuple[float, float]:
    """
    E over Σ ~ W⁻¹(Φ, λ) of KL(N(μ̃, Σ̃) ‖ N(0, Σ)) by Bartlett sampling.

    log|Σ̃| is taken as 2·Σ log L̃ᵢᵢ, matching the analytic form.
    """
    mean = np.asarray(mu, dtype=np.float64)
    vector = np.asarray(z, dtype=np.float64)
    posterior_hp = HyperpriorParams.from_psi(hp.psi.array + np.outer(vector, vector), hp.nu + 1.0)
    draws = iw_sample_bartlett_many(posterior_hp, rng, n)
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(np.asarray(chol, dtype=np.float64)))))
    moment = np.asarray(sigma, dtype=np.float64) + np.outer(mean, mean)
    logdet_draws = 2.0 * np.sum(np.log(np.diagonal(np.linalg.cholesky(draws), axis1=-2, axis2=-1)), axis=-1)
    traces = np.trace(np.linalg.solve(draws, np.broadcast_to(moment, draws.shape)), axis1=-2, axis2=-1)
    values = 0.5 * (logdet_draws - logdet_q - hp.dim + traces)
    return float(np.mean(values)), float(np.std(values, ddof=1) / np.sqrt(n))


def iw_term_mc(z: ArrayLike, hp: HyperpriorParams, n: int, rng: RngStream) -> tuple[float, float]:
    """E_q[log q(Σ) − log p(Σ)] with q = W⁻¹(Ψ + zzᵀ, ν + 1), p = W⁻¹(Ψ, ν)."""
    vector = np.asarray(z, dtype=np.float64)
    posterior_hp = HyperpriorParams.from_psi(hp.psi.array + np.outer(vector, vector), hp.nu + 1.0)
    draws = iw_sample_bartlett_many(posterior_hp, rng, n)
    values = iw_log_pdf_many(draws, posterior_hp) - iw_log_pdf_many(draws, hp)
    return float(np.mean(values)), float(np.std(values, ddof=1) / np.sqrt(n))


def chyvae_elbo_exact(
    x: ArrayLike,
    posterior: LatentPosterior,
    z: ArrayLike,
    hp: HyperpriorParams,
    x_hat: ArrayLike,
    mc_samples: int = 0,
    rng: Optional[RngStream] = None,
) -> ExactElbo:
    """
    Validation form of the CHyVAE ELBO with every constant kept.

    With ``mc_samples > 0`` both KL terms are also estimated by sampling
    from the conjugate posterior; ``rng`` is then required.
    """
    mu = posterior.mu.values
    chol = posterior.chol.values
    sigma = posterior.sigma.values
    vector = np.asarray(z.values if isinstance(z, Tensor) else z, dtype=np.float64)
    reconstruction = np.asarray(x_hat.values if isinstance(x_hat, Tensor) else x_hat, dtype=np.float64)
    recon = bernoulli_recon(np.asarray(x, dtype=np.float64), ad.constant(reconstruction)).item()
    gaussian_free, _ = chyvae_loss_dense(mu, chol, sigma, vector, hp)
    gaussian = gaussian_free + gaussian_term_constant(hp)
    iw = iw_kl_posterior(conjugate_posterior(hp, vector), hp)
    gaussian_mc = iw_mc = None
    if mc_samples > 0:
        if rng is None:
            raise DomainError("Monte-Carlo estimates need an RngStream")
        gaussian_mc = gaussian_term_mc(mu, chol, sigma, vector, hp, mc_samples, rng.child(0))
        iw_mc = iw_term_mc(vector, hp, mc_samples, rng.child(1))
    return ExactElbo(recon, gaussian, iw, gaussian_mc, iw_mc)


def chyvae_exact_constant(hp: HyperpriorParams) -> float:
    """Constant-inclusive minus constant-free per-example ELBO; depends on (Ψ, ν) only."""
    p = hp.dim
    lam = hp.nu + 1.0
    iw_constant = (
        -0.5 * hp.nu * hp.logdet_psi
        - 0.5 * p * lam
        + mv_gamma_ln(p, 0.5 * hp.nu)
        - mv_gamma_ln(p, 0.5 * lam)
        + 0.5 * (lam - hp.nu) * mv_digamma(p, 0.5 * lam)
    )
    return -(gaussian_term_constant(hp) + iw_constant)


# =============================================================================
# β-VAE
# =============================================================================

def beta_vae_loss(
    x: Union[Tensor, ArrayLike],
    posterior: Posteriors,
    z: Union[Tensor, ArrayLike],
    beta: float,
    x_hat: Tensor,
) -> ElboBreakdown:
    """
    recon − β·KL(N(μ̃, diag σ̃²) ‖ N(0, I)), batch-averaged.

    σ̃ is the diagonal of L̃; gaussian_term holds β·KL and iw_term is 0.
    z is not used by the closed form; it is accepted so both objectives share
    one call shape.
    """
    posteriors, _ = _split(posterior, z)
    rows = _rows(x)
    x_hat_rows = _rows(x_hat)
    if rows.shape[0] != len(posteriors):
        raise DimensionMismatch(f"{rows.shape[0]} inputs but {len(posteriors)} posteriors")
    kls = []
    for q in posteriors:
        if np.any(np.tril(q.chol.values, k=-1) != 0.0):
            raise DimensionMismatch("beta_vae_loss needs a diagonal-mode posterior")
        sd = ad.diagonal(q.chol)
        p = sd.shape[0]
        inner = (
            ad.sum(ad.elementwise_mul(sd, sd))
            + ad.dot(q.mu, q.mu)
            - ad.constant(float(p))
            - ad.scalar_mul(ad.sum(ad.log(sd)), 2.0)
        )
        kls.append(ad.scalar_mul(inner, 0.5))
    recon = ad.scalar_mul(bernoulli_recon(rows, x_hat_rows), 1.0 / len(posteriors))
    gaussian_term = ad.scalar_mul(_mean(kls), float(beta))
    iw_term = ad.constant(0.0)
    total = recon - gaussian_term - iw_term
    return ElboBreakdown(recon, gaussian_term, iw_term, total, input_dim=rows.shape[1])
