"""
Majority-vote disentanglement metric.

For each vote pair a factor k is drawn, a batch with factor k pinned is
encoded, every latent dimension is divided by its empirical standard
deviation over random images, and the dimension of least variance is the
vote. The p×K vote matrix yields a majority classifier whose accuracy on
fresh pairs is the score. The encoded representation is the posterior mean.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from .data import FACTOR_NAMES, NUM_FACTORS, EllipseGenerator, FactorBatch
from .distributions import RngStream
from .errors import ConfigurationError, DimensionMismatch, IoError
from .nn import ModelParams, encode_means

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8

EncodeMean = Callable[[FactorBatch], NDArray[np.float64]]


@dataclass(frozen=True)
class MetricConfig:
    """Batch size per pinned factor, normalisation sample count, vote pairs and test pairs."""

    L: int = 50
    M: int = 1000
    B: int = 200
    N: int = 200

    def __post_init__(self):
        for name in ("L", "M", "B", "N"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be at least 1.")
        if self.M < 2:
            raise ConfigurationError("M must be at least 2 to estimate a standard deviation.")


@dataclass
class VoteMatrix:
    """counts[i, j] is the number of vote pairs with minimum-variance dimension i and pinned factor j."""

    counts: NDArray[np.int64]

    @classmethod
    def zeros(cls, p: int, k: int = NUM_FACTORS) -> "VoteMatrix":
        return cls(np.zeros((p, k), dtype=np.int64))

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[int, int]], p: int, k: int = NUM_FACTORS) -> "VoteMatrix":
        votes = cls.zeros(p, k)
        for d, factor in pairs:
            votes.counts[d, factor] += 1
        return votes

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def classifier(self) -> NDArray[np.int64]:
        """Majority factor per latent dimension; ties go to the lowest factor index."""
        return np.argmax(self.counts, axis=1)

    def accuracy(self, pairs: Sequence[tuple[int, int]]) -> float:
        if not pairs:
            return 0.0
        predicted = self.classifier()
        return float(np.mean([predicted[d] == factor for d, factor in pairs]))

    def to_csv(self, path: Union[str, Path], factor_names: Sequence[str] = FACTOR_NAMES) -> Path:
        """One row per latent dimension, annotated with the factor it was voted for."""
        if len(factor_names) != self.counts.shape[1]:
            raise DimensionMismatch(f"{len(factor_names)} factor names for {self.counts.shape[1]} factors")
        target = Path(path)
        predicted = self.classifier()
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            with target.open("w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["latent", *factor_names, "voted_factor"])
                for i, row in enumerate(self.counts):
                    label = factor_names[predicted[i]] if row.sum() > 0 else ""
                    writer.writerow([i, *row.tolist(), label])
        except OSError as e:
            raise IoError(f"cannot write vote matrix {target}: {e}") from e
        return target


@dataclass
class MetricResult:
    score: float
    votes: VoteMatrix
    stds: NDArray[np.float64]
    train_pairs: list[tuple[int, int]] = field(default_factory=list)
    test_pairs: list[tuple[int, int]] = field(default_factory=list)


def normalization_stds(
    encode_mean: EncodeMean,
    sampler: Callable[[int, RngStream], FactorBatch],
    M: int,
    rng: RngStream,
) -> NDArray[np.float64]:
    """Per-dimension standard deviation of encoded means over M random images, floored at 1e-8."""
    if M < 2:
        raise ConfigurationError("M must be at least 2 to estimate a standard deviation.")
    codes = np.asarray(encode_mean(sampler(M, rng)), dtype=np.float64)
    return np.maximum(codes.std(axis=0, ddof=1), STD_FLOOR)


def collect_pair(
    k: int,
    encode_mean: EncodeMean,
    stds: NDArray[np.float64],
    L: int,
    generator: EllipseGenerator,
    rng: RngStream,
) -> tuple[int, int]:
    """One (d, k) vote: d is the lowest-index dimension of least normalised variance."""
    fixed = int(rng.integers(0, generator.spec.cardinalities[k]))
    batch = generator.fixed_factor_batch(k, L, fixed, rng)
    codes = np.asarray(encode_mean(batch), dtype=np.float64)
    if codes.shape[1:] != stds.shape:
        raise DimensionMismatch(f"encoder width {codes.shape[1:]} differs from {stds.shape}")
    variances = np.var(codes / stds, axis=0)
    return int(np.argmin(variances)), k


def _pairs(
    count: int,
    encode_mean: EncodeMean,
    stds: NDArray[np.float64],
    cfg: MetricConfig,
    generator: EllipseGenerator,
    rng: RngStream,
) -> list[tuple[int, int]]:
    pairs = []
    for b in range(count):
        stream = rng.child(b)
        k = int(stream.integers(0, NUM_FACTORS))
        pairs.append(collect_pair(k, encode_mean, stds, cfg.L, generator, stream))
    return pairs


def evaluate_metric(
    encode_mean: EncodeMean,
    cfg: MetricConfig,
    rng: RngStream,
    generator: Optional[EllipseGenerator] = None,
) -> MetricResult:
    """Votes from B pairs, then accuracy of the majority classifier on N fresh pairs."""
    generator = generator or EllipseGenerator()
    stds = normalization_stds(encode_mean, generator.sample_batch, cfg.M, rng.child(0))
    train_pairs = _pairs(cfg.B, encode_mean, stds, cfg, generator, rng.child(1))
    votes = VoteMatrix.from_pairs(train_pairs, p=stds.shape[0])
    test_pairs = _pairs(cfg.N, encode_mean, stds, cfg, generator, rng.child(2))
    score = votes.accuracy(test_pairs)
    logger.info("disentanglement score %.4f (B=%d, N=%d)", score, cfg.B, cfg.N)
    return MetricResult(score=score, votes=votes, stds=stds, train_pairs=train_pairs, test_pairs=test_pairs)


def metric_score(
    encode_mean: EncodeMean,
    cfg: MetricConfig,
    rng: RngStream,
    generator: Optional[EllipseGenerator] = None,
) -> float:
    return evaluate_metric(encode_mean, cfg, rng, generator).score


def write_score_csv(result: MetricResult, path: Union[str, Path]) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["score", "train_pairs", "test_pairs"])
            writer.writerow([repr(result.score), len(result.train_pairs), len(result.test_pairs)])
    except OSError as e:
        raise IoError(f"cannot write metric scores {target}: {e}") from e
    return target


# =============================================================================
# Encoders
# =============================================================================

def model_encoder(params: ModelParams) -> EncodeMean:
    """Posterior means of a trained model."""
    return lambda batch: encode_means(params, batch.images)


def factor_value_encoder(batch: FactorBatch) -> NDArray[np.float64]:
    """Dimension j carries factor j's value exactly."""
    return batch.values()


def permuted_encoder(permutation: Sequence[int]) -> EncodeMean:
    """Dimension permutation[j] carries factor j's value."""
    order = np.asarray(permutation, dtype=np.int64)
    if sorted(order.tolist()) != list(range(NUM_FACTORS)):
        raise DimensionMismatch(f"{order.tolist()} is not a permutation of {NUM_FACTORS} factors")

    def encode(batch: FactorBatch) -> NDArray[np.float64]:
        values = batch.values()
        out = np.empty_like(values)
        out[:, order] = values
        return out

    return encode


def scaled_encoder(encode_mean: EncodeMean, scales: Sequence[float]) -> EncodeMean:
    factors = np.asarray(scales, dtype=np.float64)
    return lambda batch: np.asarray(encode_mean(batch)) * factors


def noise_encoder(p: int, seed: int) -> EncodeMean:
    """Standard-normal codes independent of the image; successive calls draw successive blocks."""
    calls = iter(range(1 << 62))
    root = RngStream(seed)
    return lambda batch: root.child(next(calls)).normal((len(batch), p))
