from .data import (
    CorrConfig,
    EllipseDataset,
    EllipseGenerator,
    FactorBatch,
    FactorSpec,
    fixed_factor_batch,
    generate_dataset,
    read_dataset,
    render_ellipse,
    sample_factors,
    write_dataset,
)
from .distributions import (
    HyperpriorParams,
    RngStream,
    gaussian_kl,
    gaussian_reparam,
    iw_kl,
    iw_log_pdf,
    iw_mean,
    iw_sample_bartlett,
    mv_digamma,
    mv_gamma_ln,
)
from .errors import (
    ChyvaeError,
    ConfigurationError,
    DimensionMismatch,
    DomainError,
    FormatError,
    IoError,
    NonFiniteGradient,
    NotPositiveDefinite,
    NotScalar,
)
from .linalg import LowerTriangular, SpdMatrix, cholesky, log_det_spd, rank1_inverse, rank1_logdet, spd_inverse
from .losses import ElboBreakdown, beta_vae_loss, bernoulli_recon, chyvae_loss
from .metric import MetricConfig, MetricResult, VoteMatrix, collect_pair, metric_score, normalization_stds
from .nn import (
    AdamConfig,
    LatentPosterior,
    ModelConfig,
    ModelParams,
    adam_step,
    decoder_forward,
    encoder_forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .trainer import TrainConfig, resume, sample_images, train, train_restarts, traverse

__all__ = [
    "AdamConfig",
    "ChyvaeError",
    "ConfigurationError",
    "CorrConfig",
    "DimensionMismatch",
    "DomainError",
    "ElboBreakdown",
    "EllipseDataset",
    "EllipseGenerator",
    "FactorBatch",
    "FactorSpec",
    "FormatError",
    "HyperpriorParams",
    "IoError",
    "LatentPosterior",
    "LowerTriangular",
    "MetricConfig",
    "MetricResult",
    "ModelConfig",
    "ModelParams",
    "NonFiniteGradient",
    "NotPositiveDefinite",
    "NotScalar",
    "RngStream",
    "SpdMatrix",
    "TrainConfig",
    "VoteMatrix",
    "adam_step",
    "bernoulli_recon",
    "beta_vae_loss",
    "cholesky",
    "chyvae_loss",
    "collect_pair",
    "decoder_forward",
    "encoder_forward",
    "fixed_factor_batch",
    "gaussian_kl",
    "gaussian_reparam",
    "generate_dataset",
    "init_params",
    "iw_kl",
    "iw_log_pdf",
    "iw_mean",
    "iw_sample_bartlett",
    "load_checkpoint",
    "log_det_spd",
    "metric_score",
    "mv_digamma",
    "mv_gamma_ln",
    "normalization_stds",
    "rank1_inverse",
    "rank1_logdet",
    "read_dataset",
    "render_ellipse",
    "resume",
    "sample_factors",
    "sample_images",
    "save_checkpoint",
    "spd_inverse",
    "train",
    "train_restarts",
    "traverse",
    "write_dataset",
]
