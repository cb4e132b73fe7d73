"""
Tests for the CorrelatedEllipses generator, renderer and CELD file format.
"""
import struct

import numpy as np
import pytest

from chyvae.data import (
    DATASET_MAGIC,
    LIT_THRESHOLD,
    MAX_SEMI_MAJOR,
    NUM_FACTORS,
    CorrConfig,
    EllipseDataset,
    EllipseGenerator,
    FactorSpec,
    bin_latent,
    dataset_bytes,
    factor_correlations,
    fixed_factor_batch,
    generate_dataset,
    read_dataset,
    render_ellipse,
    sample_factors,
    write_dataset,
)
from chyvae.distributions import RngStream
from chyvae.errors import ConfigurationError, DomainError, FormatError, IoError

from .test_utils import centroid

SPEC = FactorSpec.default()
HEADER_SIZE = 4 + struct.calcsize("<HIIIH") + 2 * NUM_FACTORS

# =============================================================================
# Factor tables and sampling
# =============================================================================

def test_default_tables():
    """Test the table sizes and ranges."""
    assert SPEC.cardinalities == (32, 32, 6, 40)
    assert SPEC.tables[2][0] == 0.5 and SPEC.tables[2][-1] == 1.0
    assert SPEC.tables[3][20] == pytest.approx(np.pi)


def test_factor_spec_rejects_bad_tables():
    """Test that non-increasing or missing tables are configuration errors."""
    with pytest.raises(ConfigurationError):
        FactorSpec((np.linspace(0, 1, 4),) * 3)
    with pytest.raises(ConfigurationError):
        FactorSpec((np.array([0.0, 0.0, 1.0]),) + SPEC.tables[1:])


def test_corr_config_range():
    """Test that |ρ| ≥ 1 is refused."""
    with pytest.raises(ConfigurationError):
        CorrConfig(rho_pos=1.0)
    with pytest.raises(ConfigurationError):
        CorrConfig(rho_so=-1.5)


def test_bin_latent_clips_to_extreme_bins():
    """Test that draws beyond ±1 land in the first and last bins."""
    np.testing.assert_array_equal(bin_latent(np.full(4, -2.0), SPEC), [0, 0, 0, 0])
    np.testing.assert_array_equal(bin_latent(np.full(4, 2.0), SPEC), [31, 31, 5, 39])


def test_sample_factors_in_range(rng):
    """Test that single draws respect the cardinalities."""
    for i in range(100):
        idx = sample_factors(CorrConfig(), SPEC, rng.child(i))
        assert idx.shape == (NUM_FACTORS,)
        assert np.all(idx >= 0) and np.all(idx < np.array(SPEC.cardinalities))


def test_uncorrelated_config_gives_independent_bins():
    """Test |corr| < 0.05 for every factor pair at ρ = 0 over 50,000 draws."""
    batch = EllipseGenerator(CorrConfig(0.0, 0.0), SPEC).sample_batch(50_000, RngStream(3))
    corr = factor_correlations(batch.indices)
    assert np.all(np.abs(corr[~np.eye(NUM_FACTORS, dtype=bool)]) < 0.05)


def test_block_correlation_structure():
    """Test strong within-block and negligible cross-block correlation at ρ = 0.7."""
    batch = EllipseGenerator(CorrConfig(0.7, 0.7), SPEC).sample_batch(50_000, RngStream(4))
    corr = factor_correlations(batch.indices)
    assert corr[0, 1] > 0.3
    assert corr[2, 3] > 0.3
    for i in (0, 1):
        for j in (2, 3):
            assert abs(corr[i, j]) < 0.05


def test_every_bin_is_reachable():
    """Test that each bin of each factor is hit at n = 50,000."""
    indices = EllipseGenerator(CorrConfig(), SPEC).sample_batch(50_000, RngStream(5)).indices
    for k, card in enumerate(SPEC.cardinalities):
        assert np.all(np.bincount(indices[:, k], minlength=card) > 0)


# =============================================================================
# Rendering
# =============================================================================

def _lit(image):
    return int(np.count_nonzero(image >= LIT_THRESHOLD))


def test_render_shape_and_dtype():
    """Test an (H, W) uint8 grid."""
    image = render_ellipse([10, 20, 3, 7], SPEC, 24, 32)
    assert image.shape == (24, 32)
    assert image.dtype == np.uint8


def test_half_turn_gives_identical_image():
    """Test that orientation index 20 (θ = π) renders exactly like index 0."""
    for x, y, s in [(0, 0, 0), (15, 7, 3), (31, 31, 5)]:
        upright = render_ellipse([x, y, s, 0], SPEC, 32, 32)
        np.testing.assert_array_equal(upright, render_ellipse([x, y, s, 20], SPEC, 32, 32))


def test_quarter_turn_changes_image():
    """Test that θ = π/2 differs from θ = 0 for a 2:1 ellipse."""
    upright = render_ellipse([16, 16, 5, 0], SPEC, 32, 32)
    assert not np.array_equal(upright, render_ellipse([16, 16, 5, 10], SPEC, 32, 32))


def test_scale_increases_lit_pixels():
    """Test that the minimum scale lights strictly fewer pixels than the maximum."""
    for x, y, o in [(0, 0, 0), (16, 16, 7), (31, 5, 33)]:
        assert _lit(render_ellipse([x, y, 0, o], SPEC, 32, 32)) < _lit(render_ellipse([x, y, 5, o], SPEC, 32, 32))


def test_one_x_bin_shifts_centroid():
    """Test that the next x bin moves the centroid right by one table step of the usable width ± 0.5."""
    width = 32
    margin = MAX_SEMI_MAJOR * width
    step = (width - 2 * margin) * (SPEC.tables[0][1] - SPEC.tables[0][0])
    for x in (0, 10, 30):
        _, left = centroid(render_ellipse([x, 16, 2, 5], SPEC, width, width))
        _, right = centroid(render_ellipse([x + 1, 16, 2, 5], SPEC, width, width))
        assert right - left == pytest.approx(step, abs=0.5)


def test_images_are_never_blank_or_full(rng):
    """Test that every image has a pixel above 0 and a pixel below 255."""
    batch = EllipseGenerator(CorrConfig(), SPEC, 16, 16).sample_batch(200, rng)
    images = batch.images
    assert np.all(images.max(axis=1) > 0.0)
    assert np.all(images.min(axis=1) < 1.0)


def test_render_rejects_bad_input():
    """Test that out-of-range indices and tiny images raise DomainError."""
    with pytest.raises(DomainError):
        render_ellipse([32, 0, 0, 0], SPEC, 32, 32)
    with pytest.raises(DomainError):
        render_ellipse([0, 0, 0, 0], SPEC, 3, 32)
    with pytest.raises(DomainError):
        render_ellipse([0, 0, 0], SPEC, 32, 32)


# =============================================================================
# Fixed-factor batches
# =============================================================================

def test_fixed_factor_pins_only_factor_k(generator):
    """Test zero variance in the pinned factor and broad coverage of the others."""
    batch = generator.fixed_factor_batch(0, 200, 16, RngStream(6))
    assert len(batch) == 200
    assert np.var(batch.indices[:, 0]) == 0.0
    assert np.all(batch.indices[:, 0] == 16)
    assert len(np.unique(batch.indices[:, 1])) > 20
    assert len(np.unique(batch.indices[:, 3])) > 20


def test_fixed_scale_gives_constant_intensity():
    """Test that pinning scale keeps the total intensity within 2% at 64×64."""
    batch = fixed_factor_batch(2, 50, 5, CorrConfig(), SPEC, RngStream(7), height=64, width=64)
    totals = batch.images.sum(axis=1)
    assert np.max(np.abs(totals - totals.mean())) <= 0.02 * totals.mean()


def test_fixed_factor_batch_is_deterministic(generator):
    """Test that the same stream gives the same batch."""
    first = generator.fixed_factor_batch(3, 20, 4, RngStream(8))
    second = generator.fixed_factor_batch(3, 20, 4, RngStream(8))
    np.testing.assert_array_equal(first.indices, second.indices)


@pytest.mark.parametrize("k,L,value", [(4, 10, 0), (-1, 10, 0), (2, 10, 6), (0, 0, 3)])
def test_fixed_factor_batch_errors(k, L, value):
    """Test that bad factor, value or size arguments raise DomainError."""
    with pytest.raises(DomainError):
        fixed_factor_batch(k, L, value, CorrConfig(), SPEC, RngStream(0))


# =============================================================================
# Datasets and the CELD format
# =============================================================================

def test_generate_dataset_is_deterministic():
    """Test that n = 1 with a fixed seed serialises to identical bytes twice."""
    first = generate_dataset(1, CorrConfig(), SPEC, 16, 16, seed=42)
    second = generate_dataset(1, CorrConfig(), SPEC, 16, 16, seed=42)
    assert dataset_bytes(first) == dataset_bytes(second)


def test_generate_dataset_is_partitionable():
    """Test that a prefix of a larger dataset equals the smaller dataset."""
    small = generate_dataset(3, CorrConfig(), SPEC, 16, 16, seed=9)
    large = generate_dataset(6, CorrConfig(), SPEC, 16, 16, seed=9)
    np.testing.assert_array_equal(large.indices[:3], small.indices)
    np.testing.assert_array_equal(large.images[:3], small.images)


def test_generate_dataset_rejects_empty():
    """Test that n = 0 is refused."""
    with pytest.raises(DomainError):
        generate_dataset(0, CorrConfig(), SPEC, 16, 16, seed=0)


def test_dataset_round_trip(tmp_path):
    """Test that write then read reproduces a 100-sample set and its bytes."""
    dataset = generate_dataset(100, CorrConfig(), SPEC, 16, 16, seed=1)
    path = write_dataset(dataset, tmp_path / "sub" / "ellipses.celd")
    loaded = read_dataset(path)
    assert (loaded.height, loaded.width, len(loaded)) == (16, 16, 100)
    np.testing.assert_array_equal(loaded.indices, dataset.indices)
    np.testing.assert_array_equal(loaded.images, dataset.images)
    for ours, theirs in zip(loaded.spec.tables, SPEC.tables):
        np.testing.assert_array_equal(ours, theirs)
    assert dataset_bytes(loaded) == path.read_bytes()


def test_dataset_unit_images(tiny_dataset):
    """Test that images_unit and batch normalise to [0, 1] and flatten."""
    unit = tiny_dataset.images_unit()
    assert unit.shape == (40, 256)
    assert unit.min() >= 0.0 and unit.max() <= 1.0
    np.testing.assert_array_equal(tiny_dataset.batch([3, 1]), unit[[3, 1]])


def test_dataset_rejects_mismatched_images():
    """Test that images disagreeing with the header are refused."""
    with pytest.raises(FormatError):
        EllipseDataset(4, 4, SPEC, np.zeros((2, 4), dtype=np.int64), np.zeros((2, 4, 5), dtype=np.uint8))


@pytest.fixture
def celd_bytes(tiny_dataset):
    return bytearray(dataset_bytes(tiny_dataset))


def _read(tmp_path, data):
    path = tmp_path / "corrupt.celd"
    path.write_bytes(bytes(data))
    return read_dataset(path)


def test_read_rejects_bad_magic(tmp_path, celd_bytes):
    """Test a wrong magic."""
    celd_bytes[:4] = b"NOPE"
    with pytest.raises(FormatError):
        _read(tmp_path, celd_bytes)


def test_read_rejects_bad_version(tmp_path, celd_bytes):
    """Test an unknown version."""
    celd_bytes[4:6] = struct.pack("<H", 7)
    with pytest.raises(FormatError):
        _read(tmp_path, celd_bytes)


def test_read_rejects_truncation(tmp_path, celd_bytes):
    """Test that a file shorter than its header implies is refused."""
    with pytest.raises(FormatError):
        _read(tmp_path, celd_bytes[:-1])
    with pytest.raises(FormatError):
        _read(tmp_path, celd_bytes[:10])


def test_read_rejects_trailing_bytes(tmp_path, celd_bytes):
    """Test that extra bytes are refused."""
    with pytest.raises(FormatError):
        _read(tmp_path, celd_bytes + b"\x00")


def test_read_rejects_invalid_tables(tmp_path, celd_bytes):
    """Test that a non-increasing factor table is refused."""
    celd_bytes[HEADER_SIZE + 8:HEADER_SIZE + 16] = celd_bytes[HEADER_SIZE:HEADER_SIZE + 8]
    with pytest.raises(FormatError):
        _read(tmp_path, celd_bytes)


def test_read_rejects_out_of_range_index(tmp_path, celd_bytes):
    """Test that a record index beyond its cardinality is refused."""
    records = HEADER_SIZE + 8 * sum(SPEC.cardinalities)
    celd_bytes[records:records + 2] = struct.pack("<H", 999)
    with pytest.raises(FormatError):
        _read(tmp_path, celd_bytes)


def test_read_missing_file(tmp_path):
    """Test that an absent path is an I/O error."""
    with pytest.raises(IoError):
        read_dataset(tmp_path / "absent.celd")


def test_magic_constant():
    """Test the on-disk magic."""
    assert dataset_bytes(generate_dataset(1, CorrConfig(), SPEC, 4, 4, seed=0))[:4] == DATASET_MAGIC
