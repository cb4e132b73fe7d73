"""
Training loop: batches → encode → reparameterise → decode → loss → backward → Adam.

Every random draw of a run is taken from a child stream keyed by the run seed
and the step, so a run resumed from a checkpoint replays the same batches and
noise as an uninterrupted one.
"""
import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from tqdm import tqdm

from . import autodiff as ad
from .data import CorrConfig, EllipseDataset, EllipseGenerator, FactorSpec, generate_dataset, read_dataset
from .distributions import HyperpriorParams, RngStream, iw_sample_bartlett_many
from .errors import ConfigurationError, DimensionMismatch, DomainError, IoError, NonFiniteGradient
from .linalg import SpdMatrix
from .losses import ElboBreakdown, beta_vae_loss, chyvae_loss
from .metric import MetricConfig, MetricResult, evaluate_metric, model_encoder
from .nn import (
    AdamConfig,
    AdamState,
    LatentBatch,
    ModelConfig,
    ModelParams,
    adam_step,
    decode,
    decoder_forward,
    encode_means,
    encoder_forward,
    init_params,
    load_checkpoint,
    reparameterize,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

MODELS = ("chyvae", "betavae")
LOG_COLUMNS = ("step", "recon_sum", "recon_per_pixel", "gaussian_term", "iw_term", "total")
SAMPLE_MODES = ("bartlett", "standard_normal")

# child-stream keys under the run seed
_INIT, _SHUFFLE, _NOISE, _METRIC = 0, 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    """
    A training run.

    ``nu`` applies to model "chyvae" and ``beta`` to "betavae". Ψ is rebuilt
    from (ν, Σ₀) as (ν − p − 1)Σ₀, so ν must exceed p + 1. Without
    ``data_path`` the run generates ``dataset_size`` CorrelatedEllipses
    images from the run seed.
    """

    model: str = "chyvae"
    nu: Optional[float] = None
    beta: Optional[float] = None
    sigma0: Optional[SpdMatrix] = None
    latent_dim: int = 10
    hidden: tuple[int, ...] = (512, 256)
    batch_size: int = 50
    steps: int = 5000
    eval_interval: int = 500
    metric_interval: int = 0
    seed: int = 0
    data_path: Optional[str] = None
    dataset_size: int = 20_000
    height: int = 32
    width: int = 32
    rho_pos: float = 0.7
    rho_so: float = 0.7
    lr: float = 1e-4
    out_dir: Optional[str] = None
    metric: MetricConfig = field(default_factory=MetricConfig)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.model not in MODELS:
            raise ConfigurationError(f"model must be one of {MODELS}, got {self.model!r}.")
        p = self.latent_dim
        if self.model == "chyvae":
            if self.nu is None:
                raise ConfigurationError("nu is required for the chyvae model.")
            if not self.nu > p + 1:
                raise ConfigurationError(f"nu must exceed latent_dim + 1 = {p + 1}, got {self.nu}.")
            if self.sigma0 is not None and self.sigma0.dim != p:
                raise ConfigurationError(f"sigma0 must be {p}x{p}, got {self.sigma0.dim}x{self.sigma0.dim}.")
        elif self.beta is None or not self.beta > 0:
            raise ConfigurationError("beta must be positive for the betavae model.")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError("batch_size must be positive and steps non-negative.")
        if self.eval_interval < 1 or self.metric_interval < 0:
            raise ConfigurationError("eval_interval must be positive and metric_interval non-negative.")
        if self.data_path is None and self.dataset_size < 1:
            raise ConfigurationError("dataset_size must be positive.")
        CorrConfig(self.rho_pos, self.rho_so)

    def hyperprior(self) -> Optional[HyperpriorParams]:
        if self.model != "chyvae":
            return None
        sigma0 = self.sigma0 if self.sigma0 is not None else SpdMatrix.identity(self.latent_dim)
        return HyperpriorParams.from_sigma0(sigma0, self.nu)

    def model_config(self, input_dim: int) -> ModelConfig:
        mode = "chyvae" if self.model == "chyvae" else "diagonal"
        return ModelConfig(input_dim=input_dim, latent_dim=self.latent_dim, hidden=self.hidden, mode=mode)

    def adam_config(self) -> AdamConfig:
        return AdamConfig(lr=self.lr)

    def to_dict(self) -> dict:
        echo = asdict(self)
        echo["sigma0"] = None if self.sigma0 is None else self.sigma0.array.tolist()
        echo["hidden"] = list(self.hidden)
        return echo


@dataclass
class TrainResult:
    params: ModelParams
    adam: AdamState
    log: list[dict[str, float]] = field(default_factory=list)
    metrics: list[dict[str, float]] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def load_training_data(config: TrainConfig) -> EllipseDataset:
    if config.data_path is not None:
        return read_dataset(config.data_path)
    logger.info("generating %d training images", config.dataset_size)
    return generate_dataset(
        config.dataset_size,
        CorrConfig(config.rho_pos, config.rho_so),
        FactorSpec.default(),
        config.height,
        config.width,
        config.seed,
    )


class BatchSchedule:
    """Rows of each step's batch, walking a fresh seeded permutation per epoch."""

    def __init__(self, n: int, batch_size: int, root: RngStream):
        self.n = n
        self.batch_size = batch_size
        self.root = root
        self._cached: tuple[int, NDArray[np.int64]] = (-1, np.empty(0, dtype=np.int64))

    def permutation(self, epoch: int) -> NDArray[np.int64]:
        if self._cached[0] != epoch:
            self._cached = (epoch, self.root.child(_SHUFFLE, epoch).permutation(self.n))
        return self._cached[1]

    def rows(self, step: int) -> NDArray[np.int64]:
        positions = np.arange(step * self.batch_size, (step + 1) * self.batch_size)
        epochs, offsets = np.divmod(positions, self.n)
        out = np.empty(self.batch_size, dtype=np.int64)
        for epoch in np.unique(epochs):
            mask = epochs == epoch
            out[mask] = self.permutation(int(epoch))[offsets[mask]]
        return out


LossFn = Callable[[NDArray[np.float64], LatentBatch, ad.Tensor, ad.Tensor], ElboBreakdown]


def loss_function(config: TrainConfig) -> LossFn:
    if config.model == "chyvae":
        hp = config.hyperprior()
        return lambda x, latents, z, x_hat: chyvae_loss(x, latents, z, hp, x_hat)
    return lambda x, latents, z, x_hat: beta_vae_loss(x, latents, z, config.beta, x_hat)


def train_step(
    params: ModelParams,
    adam: AdamState,
    x: NDArray[np.float64],
    eps: NDArray[np.float64],
    loss_fn: LossFn,
    adam_config: AdamConfig,
) -> tuple[ModelParams, AdamState, ElboBreakdown]:
    """One optimisation step maximising the ELBO; the breakdown is evaluated before the update."""
    with ad.Tape() as tape:
        latents = encoder_forward(params, x)
        z = reparameterize(latents, eps)
        x_hat = decoder_forward(params, z)
        try:
            breakdown = loss_fn(x, latents, z, x_hat)
        except DomainError as e:
            raise NonFiniteGradient(f"loss is not finite at Adam step {adam.step}: {e}") from e
        objective = ad.neg(breakdown.total)
    if not np.isfinite(breakdown.total.item()):
        raise NonFiniteGradient(f"loss is not finite at Adam step {adam.step}")
    leaf_grads = tape.backward(objective)
    grads = {name: leaf_grads.get(tensor, np.zeros_like(tensor.values)) for name, tensor in params.items()}
    new_params, new_adam = adam_step(params, grads, adam, adam_config)
    return new_params, new_adam, breakdown


class _CsvLog:
    """CSV sink; on resume, rows with ``step >= keep_below`` are dropped before appending."""

    def __init__(self, path: Optional[Path], columns: tuple[str, ...], keep_below: Optional[int] = None):
        self._file = None
        self._writer = None
        if path is None:
            return
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            kept = _read_rows_below(path, keep_below) if keep_below is not None and path.exists() else None
            self._file = path.open("w", newline="")
        except OSError as e:
            raise IoError(f"cannot open log {path}: {e}") from e
        self._writer = csv.DictWriter(self._file, fieldnames=columns)
        self._writer.writeheader()
        for row in kept or ():
            self._writer.writerow(row)
        self._file.flush()

    def write(self, row: dict) -> None:
        if self._writer is not None:
            self._writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()


def _read_rows_below(path: Path, keep_below: int) -> list[dict]:
    with path.open(newline="") as f:
        return [row for row in csv.DictReader(f) if int(row["step"]) < keep_below]


def _run(
    config: TrainConfig,
    dataset: EllipseDataset,
    params: ModelParams,
    adam: AdamState,
    progress: bool,
) -> TrainResult:
    out_dir = Path(config.out_dir) if config.out_dir else None
    root = RngStream(config.seed)
    schedule = BatchSchedule(len(dataset), config.batch_size, root)
    loss_fn = loss_function(config)
    adam_config = config.adam_config()
    generator = EllipseGenerator(CorrConfig(config.rho_pos, config.rho_so), dataset.spec, dataset.height, dataset.width)
    resumed = adam.step > 0
    log = _CsvLog(
        out_dir / "train_log.csv" if out_dir else None, LOG_COLUMNS, keep_below=adam.step if resumed else None
    )
    metric_log = _CsvLog(
        out_dir / "metrics.csv" if out_dir and config.metric_interval else None,
        ("step", "score"),
        keep_below=adam.step + 1 if resumed else None,
    )
    result = TrainResult(params=params, adam=adam)
    meta = {"train": config.to_dict(), "image": [dataset.height, dataset.width]}
    try:
        for step in tqdm(range(adam.step, config.steps), initial=adam.step, total=config.steps, disable=not progress):
            x = dataset.batch(schedule.rows(step))
            eps = root.child(_NOISE, step).normal((config.batch_size, config.latent_dim))
            try:
                params, adam, breakdown = train_step(params, adam, x, eps, loss_fn, adam_config)
            except NonFiniteGradient:
                logger.error("non-finite loss or gradient at step %d, halting", step)
                raise
            row = breakdown.as_row(step)
            result.log.append(row)
            log.write(row)
            done = step + 1
            if done % config.eval_interval == 0 or done == config.steps:
                logger.info(
                    "step %d recon/pixel %.5f gaussian %.4f iw %.4f total %.4f",
                    step, row["recon_per_pixel"], row["gaussian_term"], row["iw_term"], row["total"],
                )
                if out_dir is not None:
                    result.checkpoints.append(
                        save_checkpoint(out_dir / "checkpoints" / f"step_{done:06d}.chvk", params, adam, meta)
                    )
            if config.metric_interval and done % config.metric_interval == 0:
                scored = evaluate_metric(model_encoder(params), config.metric, root.child(_METRIC, done), generator)
                entry = {"step": done, "score": scored.score}
                result.metrics.append(entry)
                metric_log.write(entry)
    finally:
        log.close()
        metric_log.close()
    if out_dir is not None:
        result.checkpoints.append(save_checkpoint(out_dir / "final.chvk", params, adam, meta))
    result.params, result.adam = params, adam
    return result


def train(config: TrainConfig, dataset: Optional[EllipseDataset] = None, progress: bool = False) -> TrainResult:
    """
    Run ``config.steps`` optimisation steps from a seeded initialisation.

    Raises:
        NonFiniteGradient: if the loss or a gradient stops being finite
        IoError: if the dataset or an output file cannot be accessed
    """
    data = dataset if dataset is not None else load_training_data(config)
    model_config = config.model_config(data.height * data.width)
    params = init_params(model_config, RngStream(config.seed).child(_INIT))
    return _run(config, data, params, AdamState.zeros_like(params), progress)


def resume(
    checkpoint_path: Union[str, Path],
    config: TrainConfig,
    dataset: Optional[EllipseDataset] = None,
    progress: bool = False,
) -> TrainResult:
    """Continue a run from a checkpoint; the continuation equals the uninterrupted run."""
    checkpoint = load_checkpoint(checkpoint_path)
    data = dataset if dataset is not None else load_training_data(config)
    expected = config.model_config(data.height * data.width)
    if checkpoint.params.config != expected:
        raise ConfigurationError("checkpoint model does not match the training configuration.")
    if checkpoint.adam.step > config.steps:
        raise ConfigurationError(f"checkpoint is at step {checkpoint.adam.step}, past steps={config.steps}.")
    logger.info("resuming from step %d", checkpoint.adam.step)
    return _run(config, data, checkpoint.params, checkpoint.adam, progress)


@dataclass
class RestartSummary:
    trained_scores: list[float]
    untrained_scores: list[float]
    final_recon_per_pixel: list[float]
    initial_recon_per_pixel: list[float]

    @property
    def median_trained(self) -> float:
        return float(np.median(self.trained_scores))

    @property
    def median_untrained(self) -> float:
        return float(np.median(self.untrained_scores))


def train_restarts(config: TrainConfig, restarts: int, dataset: Optional[EllipseDataset] = None) -> RestartSummary:
    """Train with seeds seed, seed+1, … and score each run before and after training."""
    if restarts < 1:
        raise ConfigurationError("restarts must be at least 1.")
    data = dataset if dataset is not None else load_training_data(config)
    generator = EllipseGenerator(CorrConfig(config.rho_pos, config.rho_so), data.spec, data.height, data.width)
    summary = RestartSummary([], [], [], [])
    for i in range(restarts):
        run_config = replace(config, seed=config.seed + i, out_dir=None)
        root = RngStream(run_config.seed)
        initial = init_params(run_config.model_config(data.height * data.width), root.child(_INIT))
        untrained = evaluate_metric(model_encoder(initial), run_config.metric, root.child(_METRIC, 0), generator)
        result = train(run_config, data)
        trained: MetricResult = evaluate_metric(
            model_encoder(result.params), run_config.metric, root.child(_METRIC, run_config.steps), generator
        )
        summary.untrained_scores.append(untrained.score)
        summary.trained_scores.append(trained.score)
        if result.log:
            summary.initial_recon_per_pixel.append(result.log[0]["recon_per_pixel"])
            summary.final_recon_per_pixel.append(result.log[-1]["recon_per_pixel"])
        logger.info("restart %d: score %.3f (untrained %.3f)", i, trained.score, untrained.score)
    return summary


# =============================================================================
# Traversals and samples
# =============================================================================

def image_shape(config: ModelConfig, height: Optional[int] = None, width: Optional[int] = None) -> tuple[int, int]:
    """Image size for a model; square when not given."""
    if height is None and width is None:
        height = width = int(round(np.sqrt(config.input_dim)))
    elif height is None or width is None:
        raise DimensionMismatch("give both height and width, or neither")
    if height * width != config.input_dim:
        raise DimensionMismatch(f"{height}x{width} images do not match input size {config.input_dim}")
    return height, width


def traverse(
    params: ModelParams,
    base_image: ArrayLike,
    dim: int,
    grid: ArrayLike,
) -> NDArray[np.float64]:
    """
    Decode μ̃(base_image) with dimension ``dim`` swept over ``grid``.

    Returns:
        An (H, len(grid)·W) strip of decoder means in (0, 1)
    """
    image = np.asarray(base_image, dtype=np.float64)
    if image.ndim != 2:
        raise DomainError(f"base image must be 2-D, got shape {image.shape}")
    p = params.config.latent_dim
    if not 0 <= dim < p:
        raise DomainError(f"dimension {dim} outside latent size {p}")
    values = np.asarray(grid, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise DomainError("traversal grid is empty")
    height, width = image.shape
    image_shape(params.config, height, width)
    mu = encode_means(params, image.reshape(1, -1))[0]
    codes = np.tile(mu, (values.size, 1))
    codes[:, dim] = values
    tiles = decode(params, codes).reshape(values.size, height, width)
    return np.concatenate(list(tiles), axis=1)


def sample_latents(hp: Optional[HyperpriorParams], p: int, n: int, mode: str, rng: RngStream) -> NDArray[np.float64]:
    """bartlett: Σ ~ W⁻¹(Ψ, ν) then z ~ N(0, Σ); standard_normal: z ~ N(0, I)."""
    if mode not in SAMPLE_MODES:
        raise DomainError(f"sample mode must be one of {SAMPLE_MODES}, got {mode!r}")
    eps = rng.child(1).normal((n, p))
    if mode == "standard_normal":
        return eps
    if hp is None:
        raise DomainError("bartlett sampling needs a hyperprior")
    if hp.dim != p:
        raise DimensionMismatch(f"hyperprior dimension {hp.dim} differs from latent size {p}")
    chols = np.linalg.cholesky(iw_sample_bartlett_many(hp, rng.child(0), n))
    return np.einsum("nij,nj->ni", chols, eps)


def sample_images(
    params: ModelParams,
    hp: Optional[HyperpriorParams],
    n: int,
    mode: str,
    rng: RngStream,
    height: Optional[int] = None,
    width: Optional[int] = None,
) -> NDArray[np.float64]:
    """n decoded images of shape (n, H, W) with values in (0, 1)."""
    h, w = image_shape(params.config, height, width)
    z = sample_latents(hp, params.config.latent_dim, n, mode, rng)
    return decode(params, z).reshape(n, h, w)
