"""
Numerical self-checks: closed forms against Monte-Carlo estimates,
analytic gradients against finite differences, and the metric and dataset
against constructed oracles.

Each check is registered under a name and runs at level "quick" (reduced
sample sizes) or "full" (10⁵-sample Monte Carlo).
"""
import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import CorrConfig, EllipseGenerator, factor_correlations
from .distributions import (
    HyperpriorParams,
    RngStream,
    conjugate_posterior,
    inverse_gamma_kl,
    iw_kl,
    iw_kl_posterior,
    iw_log_pdf_many,
    iw_mean,
    iw_sample_bartlett_many,
    mvn_log_pdf,
)
from .errors import ConfigurationError
from .linalg import SpdMatrix, log_det_spd, rank1_inverse, rank1_logdet, spd_inverse
from .losses import chyvae_loss, chyvae_loss_dense, gaussian_term_constant, gaussian_term_mc, iw_term_mc
from .metric import (
    MetricConfig,
    factor_value_encoder,
    metric_score,
    noise_encoder,
    permuted_encoder,
    scaled_encoder,
)
from .nn import ModelConfig, ModelParams, decoder_forward, encoder_forward, init_params, reparameterize

logger = logging.getLogger(__name__)

LEVELS = ("quick", "full")
TAMPER_OFFSET = 0.5
MC_SE_LIMIT = 3.0


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass(frozen=True)
class CheckContext:
    level: str
    seed: int = 0
    tamper_kl_constant: bool = False

    @property
    def full(self) -> bool:
        return self.level == "full"

    @property
    def mc_samples(self) -> int:
        return 100_000 if self.full else 20_000

    @property
    def kl_offset(self) -> float:
        return TAMPER_OFFSET if self.tamper_kl_constant else 0.0


CheckFn = Callable[[CheckContext], tuple[bool, str]]
REGISTRY: dict[str, CheckFn] = {}


def register(name: str) -> Callable[[CheckFn], CheckFn]:
    def wrap(fn: CheckFn) -> CheckFn:
        REGISTRY[name] = fn
        return fn

    return wrap


def random_spd(rng: RngStream, p: int, ridge: float = 0.5) -> np.ndarray:
    """A well-conditioned random SPD matrix, A·Aᵀ/p + ridge·I."""
    a = rng.normal((p, p))
    return a @ a.T / p + ridge * np.eye(p)


def random_lower(rng: RngStream, p: int) -> np.ndarray:
    """A random lower-triangular matrix with diagonal in [0.3, 1.3)."""
    chol = np.tril(rng.normal((p, p)) * 0.3, k=-1)
    chol[np.diag_indices(p)] = 0.3 + rng.uniform(p)
    return chol


# =============================================================================
# Closed forms
# =============================================================================

@register("rank1-identities")
def check_rank1(ctx: CheckContext) -> tuple[bool, str]:
    root = RngStream(ctx.seed).child(1)
    instances = 1000 if ctx.full else 200
    worst = 0.0
    for i in range(instances):
        rng = root.child(i)
        p = int(rng.integers(2, 11))
        psi = random_spd(rng, p)
        z = rng.normal(p)
        psi_inv = spd_inverse(psi)
        dense = psi + np.outer(z, z)
        worst = max(
            worst,
            abs(rank1_logdet(log_det_spd(psi), psi_inv, z) - log_det_spd(dense)),
            float(np.max(np.abs(rank1_inverse(psi_inv, z).array - spd_inverse(dense).array))),
        )
    return worst < 1e-9, f"max deviation {worst:.2e} over {instances} instances"


def _mc_instances(ctx: CheckContext, key: int):
    root = RngStream(ctx.seed).child(key)
    for i in range(20 if ctx.full else 5):
        rng = root.child(i)
        p = 3
        nu = float(p + 2 + 20 * rng.uniform())
        hp = HyperpriorParams.from_psi(random_spd(rng, p), nu)
        yield rng, hp


@register("gaussian-term-mc")
def check_gaussian_term(ctx: CheckContext) -> tuple[bool, str]:
    worst = 0.0
    for rng, hp in _mc_instances(ctx, 2):
        p = hp.dim
        mu, chol, z = rng.normal(p), random_lower(rng, p), rng.normal(p)
        sigma = chol @ chol.T
        analytic = chyvae_loss_dense(mu, chol, sigma, z, hp)[0] + gaussian_term_constant(hp) + ctx.kl_offset
        mean, se = gaussian_term_mc(mu, chol, sigma, z, hp, ctx.mc_samples, rng.child(0))
        worst = max(worst, abs(analytic - mean) / se)
    return worst <= MC_SE_LIMIT, f"max |analytic - MC| = {worst:.2f} SE"


@register("iw-kl-mc")
def check_iw_kl(ctx: CheckContext) -> tuple[bool, str]:
    worst = 0.0
    for rng, hp in _mc_instances(ctx, 3):
        z = rng.normal(hp.dim)
        analytic = iw_kl_posterior(conjugate_posterior(hp, z), hp) + ctx.kl_offset
        mean, se = iw_term_mc(z, hp, ctx.mc_samples, rng.child(0))
        worst = max(worst, abs(analytic - mean) / se)
    return worst <= MC_SE_LIMIT, f"max |analytic - MC| = {worst:.2f} SE"


@register("iw-kl-scalar")
def check_iw_kl_scalar(ctx: CheckContext) -> tuple[bool, str]:
    root = RngStream(ctx.seed).child(4)
    worst = 0.0
    for i in range(50):
        rng = root.child(i)
        psi, phi = 0.1 + 3.0 * rng.uniform(2)
        nu = 0.5 + 10.0 * rng.uniform()
        lam = 0.5 + 10.0 * rng.uniform()
        matrix = iw_kl([[phi]], lam, HyperpriorParams.from_psi([[psi]], nu)) + ctx.kl_offset
        scalar = inverse_gamma_kl(lam / 2.0, phi / 2.0, nu / 2.0, psi / 2.0)
        worst = max(worst, abs(matrix - scalar))
    return worst < 1e-10, f"max |IW - inverse-gamma| = {worst:.2e}"


@register("conjugacy")
def check_conjugacy(ctx: CheckContext) -> tuple[bool, str]:
    root = RngStream(ctx.seed).child(5)
    worst = 0.0
    for i in range(20):
        rng = root.child(i)
        hp = HyperpriorParams.from_psi(random_spd(rng, 3), 8.0 + 10.0 * rng.uniform())
        z = rng.normal(3)
        posterior = HyperpriorParams.from_psi(hp.psi.array + np.outer(z, z), hp.nu + 1.0)
        sigmas = iw_sample_bartlett_many(hp, rng.child(0), 100)
        likelihood = np.array([mvn_log_pdf(z, s) for s in sigmas])
        gaps = likelihood + iw_log_pdf_many(sigmas, hp) - iw_log_pdf_many(sigmas, posterior)
        worst = max(worst, float(np.var(gaps)))
    return worst < 1e-16, f"max variance of the log-evidence {worst:.2e}"


# =============================================================================
# Samplers
# =============================================================================

@register("iw-sampler-mean")
def check_sampler_mean(ctx: CheckContext) -> tuple[bool, str]:
    rng = RngStream(ctx.seed).child(6)
    hp = HyperpriorParams.from_psi(random_spd(rng, 3), 10.0)
    target = iw_mean(hp).array
    draws = iw_sample_bartlett_many(hp, rng.child(0), ctx.mc_samples)
    rel = float(np.linalg.norm(draws.mean(axis=0) - target) / np.linalg.norm(target))
    return rel < 0.02, f"relative Frobenius error {rel:.4f}"


@register("iw-concentration")
def check_concentration(ctx: CheckContext) -> tuple[bool, str]:
    """Samples of W⁻¹(ν·I, ν) crowd around I as ν grows."""
    rng = RngStream(ctx.seed).child(7)
    p = 10
    n = 2000 if ctx.full else 300
    medians = []
    for j, nu in enumerate((10.0, 100.0, 1000.0)):
        hp = HyperpriorParams.from_psi(nu * np.eye(p), nu)
        draws = iw_sample_bartlett_many(hp, rng.child(j), n)
        medians.append(float(np.median(np.linalg.norm(draws - np.eye(p), axis=(1, 2)))))
    ok = medians[0] > medians[1] > medians[2]
    return ok, "median ||S - I||_F: " + ", ".join(f"{m:.3f}" for m in medians)


# =============================================================================
# Gradients
# =============================================================================

@register("loss-gradients")
def check_gradients(ctx: CheckContext) -> tuple[bool, str]:
    rng = RngStream(ctx.seed).child(8)
    config = ModelConfig(input_dim=16, latent_dim=3, hidden=(8, 8))
    params = init_params(config, rng.child(0))
    x = rng.uniform((4, 16))
    eps = rng.normal((4, 3))
    hp = HyperpriorParams.from_sigma0(SpdMatrix.identity(3), 10.0)
    names = list(params)

    def objective(model: ModelParams) -> ad.Tensor:
        latents = encoder_forward(model, x)
        z = reparameterize(latents, eps)
        return chyvae_loss(x, latents, z, hp, decoder_forward(model, z)).total

    with ad.Tape() as tape:
        loss = objective(params)
    leaf_grads = tape.backward(loss)
    analytic = [leaf_grads[params[n]] for n in names]
    numeric = ad.numeric_gradient(
        lambda arrays: objective(ModelParams.from_arrays(config, dict(zip(names, arrays)))).item(),
        [params[n].values for n in names],
    )
    bad = sum(
        int(np.sum(np.abs(a - f) > 1e-6 + 1e-4 * np.abs(f))) for a, f in zip(analytic, numeric)
    )
    return bad == 0, f"{bad} of {sum(a.size for a in analytic)} entries outside tolerance"


# =============================================================================
# Metric and dataset
# =============================================================================

@register("metric-oracles")
def check_metric(ctx: CheckContext) -> tuple[bool, str]:
    cfg = MetricConfig(L=50, M=1000, B=200, N=200) if ctx.full else MetricConfig(L=20, M=200, B=60, N=60)
    rng = RngStream(ctx.seed).child(9)
    exact = metric_score(factor_value_encoder, cfg, rng)
    scaled = metric_score(scaled_encoder(factor_value_encoder, [0.5, 3.0, 7.0, 0.1]), cfg, rng)
    permuted = metric_score(permuted_encoder([2, 0, 3, 1]), cfg, rng)
    noise = metric_score(noise_encoder(4, ctx.seed), MetricConfig(L=20, M=200, B=200, N=200), rng.child(1))
    ok = exact == 1.0 and scaled == exact and permuted == exact and 0.10 <= noise <= 0.40
    return ok, f"exact {exact:.3f}, rescaled {scaled:.3f}, permuted {permuted:.3f}, noise {noise:.3f}"


@register("dataset-correlations")
def check_dataset(ctx: CheckContext) -> tuple[bool, str]:
    n = 50_000 if ctx.full else 10_000
    rng = RngStream(ctx.seed).child(10)
    corr = factor_correlations(EllipseGenerator(CorrConfig(0.7, 0.7)).sample_batch(n, rng.child(0)).indices)
    cross = float(np.max(np.abs(corr[:2, 2:])))
    independent = factor_correlations(EllipseGenerator(CorrConfig(0.0, 0.0)).sample_batch(n, rng.child(1)).indices)
    off = float(np.max(np.abs(independent - np.eye(4))))
    ok = corr[0, 1] > 0.3 and corr[2, 3] > 0.3 and cross < 0.05 and off < 0.05
    return ok, f"corr(x,y) {corr[0, 1]:.3f}, corr(s,o) {corr[2, 3]:.3f}, cross {cross:.3f}, rho=0 max {off:.3f}"


def run_checks(
    level: str = "quick",
    only: tuple[str, ...] = (),
    seed: int = 0,
    tamper_kl_constant: bool = False,
) -> list[CheckResult]:
    """Run the registered checks, in registration order, optionally filtered by name."""
    if level not in LEVELS:
        raise ConfigurationError(f"level must be one of {LEVELS}, got {level!r}.")
    unknown = set(only) - set(REGISTRY)
    if unknown:
        raise ConfigurationError(f"unknown checks: {', '.join(sorted(unknown))}.")
    ctx = CheckContext(level=level, seed=seed, tamper_kl_constant=tamper_kl_constant)
    results = []
    for name, fn in REGISTRY.items():
        if only and name not in only:
            continue
        started = time.perf_counter()
        passed, detail = fn(ctx)
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - started))
        logger.info("%s: %s (%s)", name, "PASS" if passed else "FAIL", detail)
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max((len(r.name) for r in results), default=4)
    lines = [f"{'check':<{width}}  result  seconds  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}  {r.detail}")
    return "\n".join(lines)
