"""
Tests for the majority-vote disentanglement metric and its oracle encoders.
"""
import csv

import numpy as np
import pytest

from chyvae.data import FACTOR_NAMES, NUM_FACTORS, CorrConfig, EllipseGenerator, FactorSpec
from chyvae.distributions import RngStream
from chyvae.errors import ConfigurationError, DimensionMismatch
from chyvae.metric import (
    STD_FLOOR,
    MetricConfig,
    VoteMatrix,
    collect_pair,
    evaluate_metric,
    factor_value_encoder,
    metric_score,
    model_encoder,
    noise_encoder,
    normalization_stds,
    permuted_encoder,
    scaled_encoder,
    write_score_csv,
)

from .conftest import small_model
from .test_utils import MC_SE_LIMIT

SMALL = MetricConfig(L=20, M=500, B=40, N=40)


@pytest.fixture
def uncorrelated():
    return EllipseGenerator(CorrConfig(0.0, 0.0), FactorSpec.default())


# =============================================================================
# Configuration and vote matrix
# =============================================================================

@pytest.mark.parametrize("kwargs", [{"L": 0}, {"M": 1}, {"B": 0}, {"N": -3}])
def test_metric_config_rejects_invalid(kwargs):
    """Test that sizes below their minimum raise ConfigurationError."""
    with pytest.raises(ConfigurationError):
        MetricConfig(**kwargs)


def test_vote_matrix_counts_and_classifier():
    """Test counting, column sums and the majority classifier."""
    pairs = [(0, 1), (0, 1), (0, 2), (1, 3), (2, 0), (2, 0)]
    votes = VoteMatrix.from_pairs(pairs, p=3)
    assert votes.total == len(pairs)
    np.testing.assert_array_equal(votes.counts.sum(axis=0), [2, 2, 1, 1])
    np.testing.assert_array_equal(votes.classifier(), [1, 3, 0])
    assert votes.accuracy([(0, 1), (1, 3), (2, 1), (0, 2)]) == 0.5


def test_vote_matrix_ties_go_to_lowest_factor():
    """Test argmax tie-breaking, including an empty row."""
    votes = VoteMatrix.from_pairs([(0, 2), (0, 1)], p=2)
    np.testing.assert_array_equal(votes.classifier(), [1, 0])


def test_vote_matrix_empty_test_set():
    """Test that no test pairs score 0."""
    assert VoteMatrix.zeros(3).accuracy([]) == 0.0


def test_vote_matrix_csv(tmp_path):
    """Test the annotated vote matrix CSV."""
    votes = VoteMatrix.from_pairs([(0, 3), (0, 3), (2, 1)], p=3)
    path = votes.to_csv(tmp_path / "votes.csv")
    with path.open() as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["latent", *FACTOR_NAMES, "voted_factor"]
    assert rows[1] == ["0", "0", "0", "0", "2", "orientation"]
    assert rows[2][-1] == ""
    assert rows[3][-1] == "y_position"


def test_vote_matrix_csv_name_count(tmp_path):
    """Test that the factor-name count must match the columns."""
    with pytest.raises(DimensionMismatch):
        VoteMatrix.zeros(2).to_csv(tmp_path / "votes.csv", factor_names=("a", "b"))


# =============================================================================
# Normalisation
# =============================================================================

def test_constant_encoder_hits_floor(generator):
    """Test that constant codes give the 1e-8 floor in every dimension."""
    stds = normalization_stds(lambda batch: np.ones((len(batch), 5)), generator.sample_batch, 50, RngStream(0))
    np.testing.assert_array_equal(stds, np.full(5, STD_FLOOR))


def test_factor_value_stds_match_population(generator):
    """Test that factor-value stds agree with a large independent sample within 3 SE."""
    M = 5000
    stds = normalization_stds(factor_value_encoder, generator.sample_batch, M, RngStream(1))
    reference = generator.sample_batch(200_000, RngStream(2)).values().std(axis=0)
    assert np.all(np.abs(stds - reference) <= MC_SE_LIMIT * reference / np.sqrt(2 * M))


def test_normalization_needs_two_samples(generator):
    """Test that M < 2 is refused."""
    with pytest.raises(ConfigurationError):
        normalization_stds(factor_value_encoder, generator.sample_batch, 1, RngStream(0))


# =============================================================================
# Vote pairs
# =============================================================================

def test_exact_oracle_votes_for_pinned_factor(generator):
    """Test d = k for every factor when dimension j is factor j."""
    stds = normalization_stds(factor_value_encoder, generator.sample_batch, 500, RngStream(3))
    for k in range(NUM_FACTORS):
        assert collect_pair(k, factor_value_encoder, stds, 30, generator, RngStream(4).child(k)) == (k, k)


def test_permuted_oracle_votes_for_permuted_dimension(generator):
    """Test d = π(k) when dimension π(j) carries factor j."""
    perm = [2, 0, 3, 1]
    encoder = permuted_encoder(perm)
    stds = normalization_stds(encoder, generator.sample_batch, 500, RngStream(5))
    for k in range(NUM_FACTORS):
        assert collect_pair(k, encoder, stds, 30, generator, RngStream(6).child(k)) == (perm[k], k)


def test_permuted_encoder_requires_permutation():
    """Test that a non-permutation is refused."""
    with pytest.raises(DimensionMismatch):
        permuted_encoder([0, 0, 1, 2])


def test_noise_votes_are_spread(uncorrelated):
    """Test that no single dimension wins more than 60% of 800 noise pairs."""
    result = evaluate_metric(noise_encoder(10, 7), MetricConfig(L=10, M=200, B=800, N=10), RngStream(8), uncorrelated)
    per_dimension = result.votes.counts.sum(axis=1)
    assert per_dimension.max() <= 0.6 * 800


def test_collect_pair_width_mismatch(generator):
    """Test that codes wider than the normaliser are refused."""
    with pytest.raises(DimensionMismatch):
        collect_pair(0, factor_value_encoder, np.ones(3), 10, generator, RngStream(0))


# =============================================================================
# Scores
# =============================================================================

def test_exact_oracle_scores_one(generator):
    """Test the exact-factor oracle scores 1.0."""
    assert metric_score(factor_value_encoder, SMALL, RngStream(9), generator) == 1.0


def test_permuted_oracle_scores_one(generator):
    """Test that the permuted oracle also scores 1.0."""
    assert metric_score(permuted_encoder([3, 2, 1, 0]), SMALL, RngStream(10), generator) == 1.0


def test_noise_scores_near_chance(uncorrelated):
    """Test that a noise encoder lands in [0.10, 0.40] at B = N = 800."""
    cfg = MetricConfig(L=10, M=200, B=800, N=800)
    score = metric_score(noise_encoder(10, 11), cfg, RngStream(12), uncorrelated)
    assert 0.10 <= score <= 0.40


def test_score_is_invariant_to_positive_rescaling(generator):
    """Test equal scores under a random positive per-dimension scaling with the same seeds."""
    scales = np.exp(RngStream(13).normal(6))
    base = metric_score(noise_encoder(6, 14), SMALL, RngStream(15), generator)
    scaled = metric_score(scaled_encoder(noise_encoder(6, 14), scales), SMALL, RngStream(15), generator)
    assert base == scaled


def test_score_is_invariant_to_dimension_permutation(generator):
    """Test equal scores when latent dimensions are permuted, with the same seeds."""
    order = np.array([4, 0, 5, 2, 1, 3])
    inner = noise_encoder(6, 16)
    permuted_noise = noise_encoder(6, 16)
    base = evaluate_metric(inner, SMALL, RngStream(17), generator)
    moved = evaluate_metric(lambda batch: permuted_noise(batch)[:, order], SMALL, RngStream(17), generator)
    assert base.score == moved.score
    np.testing.assert_array_equal(moved.votes.counts, base.votes.counts[order])


def test_evaluate_metric_bookkeeping(generator):
    """Test pair counts, the vote total and a score in [0, 1]."""
    result = evaluate_metric(noise_encoder(5, 18), SMALL, RngStream(19), generator)
    assert result.votes.total == SMALL.B
    assert len(result.train_pairs) == SMALL.B
    assert len(result.test_pairs) == SMALL.N
    assert 0.0 <= result.score <= 1.0
    column_sums = result.votes.counts.sum(axis=0)
    assert column_sums.tolist() == [sum(1 for _, k in result.train_pairs if k == j) for j in range(NUM_FACTORS)]


def test_metric_is_deterministic(generator):
    """Test that the same seed reproduces the same result."""
    first = evaluate_metric(factor_value_encoder, SMALL, RngStream(20), generator)
    second = evaluate_metric(factor_value_encoder, SMALL, RngStream(20), generator)
    assert first.train_pairs == second.train_pairs
    assert first.test_pairs == second.test_pairs


def test_model_encoder_runs_on_images():
    """Test that a model's posterior means feed the metric and give a valid score."""
    generator = EllipseGenerator(CorrConfig(), FactorSpec.default(), 16, 16)
    params = small_model(input_dim=256, latent_dim=4)
    cfg = MetricConfig(L=5, M=20, B=8, N=8)
    result = evaluate_metric(model_encoder(params), cfg, RngStream(21), generator)
    assert result.stds.shape == (4,)
    assert 0.0 <= result.score <= 1.0


def test_write_score_csv(tmp_path, generator):
    """Test the score CSV layout."""
    result = evaluate_metric(factor_value_encoder, SMALL, RngStream(22), generator)
    with write_score_csv(result, tmp_path / "score.csv").open() as f:
        rows = list(csv.reader(f))
    assert rows == [["score", "train_pairs", "test_pairs"], ["1.0", "40", "40"]]
