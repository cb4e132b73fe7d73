"""
CorrelatedEllipses: a procedural dataset of single filled ellipses whose
generative factors (x-position, y-position, scale, orientation) are drawn
with a block-diagonal correlation structure.

A factor vector is produced by sampling y ~ N(0, block-diag Σ), clipping to
[-1, 1], rescaling to [0, 1] and binning each coordinate into equal-width
bins over its factor table.
"""
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .distributions import RngStream
from .errors import ConfigurationError, DomainError, FormatError, IoError
from .linalg import SpdMatrix, block_diag, cholesky

logger = logging.getLogger(__name__)

FACTOR_NAMES = ("x_position", "y_position", "scale", "orientation")
NUM_FACTORS = len(FACTOR_NAMES)

SUPERSAMPLE = 4
AXIS_RATIO = 0.5
MAX_SEMI_MAJOR = 0.2
LIT_THRESHOLD = 128

DATASET_MAGIC = b"CELD"
DATASET_VERSION = 1


# =============================================================================
# Factor tables and correlation structure
# =============================================================================

@dataclass(frozen=True)
class FactorSpec:
    """
    Value tables for the four factors, in FACTOR_NAMES order.

    Orientation uses 40 values over [0, 2π) because 0 and 2π describe the
    same ellipse.
    """

    tables: tuple[NDArray[np.float64], ...]

    def __post_init__(self):
        tables = tuple(np.array(t, dtype=np.float64) for t in self.tables)
        if len(tables) != NUM_FACTORS:
            raise ConfigurationError(f"expected {NUM_FACTORS} factor tables, got {len(tables)}.")
        for name, table in zip(FACTOR_NAMES, tables):
            if table.ndim != 1 or table.size < 1:
                raise ConfigurationError(f"{name} table must be a non-empty vector.")
            if table.size > 1 and not np.all(np.diff(table) > 0):
                raise ConfigurationError(f"{name} table must be strictly increasing.")
            table.setflags(write=False)
        object.__setattr__(self, "tables", tables)

    @classmethod
    def default(cls) -> "FactorSpec":
        return cls(
            tables=(
                np.linspace(0.0, 1.0, 32),
                np.linspace(0.0, 1.0, 32),
                np.linspace(0.5, 1.0, 6),
                np.linspace(0.0, 2.0 * np.pi, 40, endpoint=False),
            )
        )

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(t.size for t in self.tables)

    def check_indices(self, indices: ArrayLike) -> NDArray[np.int64]:
        idx = np.asarray(indices)
        if idx.shape[-1:] != (NUM_FACTORS,) or not np.issubdtype(idx.dtype, np.integer):
            raise DomainError(f"expected integer factor indices of length {NUM_FACTORS}, got {idx.shape}")
        idx = idx.astype(np.int64)
        if np.any(idx < 0) or np.any(idx >= np.array(self.cardinalities)):
            raise DomainError(f"factor indices {idx.tolist()} exceed cardinalities {self.cardinalities}")
        return idx

    def values_of(self, indices: ArrayLike) -> NDArray[np.float64]:
        """Factor values for (..., 4) indices."""
        idx = self.check_indices(indices)
        return np.stack([self.tables[k][idx[..., k]] for k in range(NUM_FACTORS)], axis=-1)


@dataclass(frozen=True)
class CorrConfig:
    """Correlations of the (x, y) block and the (scale, orientation) block."""

    rho_pos: float = 0.7
    rho_so: float = 0.7

    def __post_init__(self):
        for name in ("rho_pos", "rho_so"):
            if not -1.0 < float(getattr(self, name)) < 1.0:
                raise ConfigurationError(f"{name} must lie strictly inside (-1, 1).")

    def covariance(self) -> SpdMatrix:
        return block_diag(
            [[1.0, self.rho_pos], [self.rho_pos, 1.0]],
            [[1.0, self.rho_so], [self.rho_so, 1.0]],
        )


def bin_latent(y: ArrayLike, spec: FactorSpec) -> NDArray[np.int64]:
    """Clip (..., 4) Gaussian draws to [-1, 1], map to [0, 1] and floor-bin per factor."""
    unit = (np.clip(np.asarray(y, dtype=np.float64), -1.0, 1.0) + 1.0) / 2.0
    cards = np.array(spec.cardinalities)
    return np.minimum(np.floor(unit * cards).astype(np.int64), cards - 1)


def _sample_factor_array(cfg: CorrConfig, spec: FactorSpec, rng: RngStream, n: int) -> NDArray[np.int64]:
    chol = cholesky(cfg.covariance()).array
    y = rng.normal((n, NUM_FACTORS)) @ chol.T
    return bin_latent(y, spec)


def sample_factors(cfg: CorrConfig, spec: FactorSpec, rng: RngStream) -> NDArray[np.int64]:
    """One correlated factor-index vector of length 4."""
    return _sample_factor_array(cfg, spec, rng, 1)[0]


def factor_correlations(indices: ArrayLike) -> NDArray[np.float64]:
    """Pearson correlation matrix of binned factor indices, one row per sample."""
    return np.corrcoef(np.asarray(indices, dtype=np.float64), rowvar=False)


# =============================================================================
# Rendering
# =============================================================================

def _render_one(values: NDArray[np.float64], height: int, width: int) -> NDArray[np.uint8]:
    x, y, scale, theta = values
    semi_major_max = MAX_SEMI_MAJOR * min(height, width)
    margin = semi_major_max
    cx = margin + x * (width - 2.0 * margin)
    cy = margin + y * (height - 2.0 * margin)
    a = scale * semi_major_max
    b = AXIS_RATIO * a
    offsets = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    px = (np.arange(width)[:, None] + offsets[None, :]).reshape(-1)
    py = (np.arange(height)[:, None] + offsets[None, :]).reshape(-1)
    dx = px[None, :] - cx
    dy = py[:, None] - cy
    angle = np.mod(theta, np.pi)
    c, s = np.cos(angle), np.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    coverage = inside.reshape(height, SUPERSAMPLE, width, SUPERSAMPLE).mean(axis=(1, 3))
    return np.rint(coverage * 255.0).astype(np.uint8)


def render_ellipse(indices: ArrayLike, spec: FactorSpec, height: int, width: int) -> NDArray[np.uint8]:
    """
    Rasterise one ellipse into an (H, W) uint8 grid.

    The centre maps [0, 1]² into the image inset by a margin equal to the
    largest semi-major axis; the semi-major axis is scale × 0.2·min(H, W)
    with a fixed 2:1 axis ratio; pixels are 4×4 supersampled.
    """
    if height < 4 or width < 4:
        raise DomainError(f"image must be at least 4x4, got {height}x{width}")
    return _render_one(spec.values_of(indices), height, width)


# =============================================================================
# Batches
# =============================================================================

@dataclass
class FactorBatch:
    """Factor indices with lazily rendered, [0, 1]-normalised, flattened images."""

    indices: NDArray[np.int64]
    spec: FactorSpec
    height: int
    width: int

    def __len__(self) -> int:
        return self.indices.shape[0]

    def values(self) -> NDArray[np.float64]:
        return self.spec.values_of(self.indices)

    @cached_property
    def images(self) -> NDArray[np.float64]:
        values = self.values()
        out = np.empty((len(self), self.height * self.width))
        for i, row in enumerate(values):
            out[i] = _render_one(row, self.height, self.width).reshape(-1) / 255.0
        return out


def fixed_factor_batch(
    k: int,
    L: int,
    fixed_value_index: int,
    cfg: CorrConfig,
    spec: FactorSpec,
    rng: RngStream,
    height: int = 32,
    width: int = 32,
) -> FactorBatch:
    """
    L samples with factor k pinned to ``fixed_value_index``.

    The other factors follow the correlated sampler conditioned, by rejection,
    on factor k landing in the pinned bin.
    """
    if not 0 <= k < NUM_FACTORS:
        raise DomainError(f"factor index must lie in [0, {NUM_FACTORS}), got {k}")
    if not 0 <= fixed_value_index < spec.cardinalities[k]:
        raise DomainError(f"value index {fixed_value_index} outside factor {FACTOR_NAMES[k]}")
    if L < 1:
        raise DomainError(f"batch size must be positive, got {L}")
    accepted: list[NDArray[np.int64]] = []
    have = 0
    chunk = max(8 * L, 256)
    for _ in range(10_000):
        draws = _sample_factor_array(cfg, spec, rng, chunk)
        keep = draws[draws[:, k] == fixed_value_index]
        accepted.append(keep)
        have += keep.shape[0]
        if have >= L:
            return FactorBatch(np.concatenate(accepted)[:L], spec, height, width)
    raise DomainError(f"could not fill a batch pinned at {FACTOR_NAMES[k]}={fixed_value_index}")


@dataclass(frozen=True)
class EllipseGenerator:
    """A configured CorrelatedEllipses source."""

    cfg: CorrConfig = field(default_factory=CorrConfig)
    spec: FactorSpec = field(default_factory=FactorSpec.default)
    height: int = 32
    width: int = 32

    def sample_batch(self, n: int, rng: RngStream) -> FactorBatch:
        return FactorBatch(_sample_factor_array(self.cfg, self.spec, rng, n), self.spec, self.height, self.width)

    def fixed_factor_batch(self, k: int, L: int, fixed_value_index: int, rng: RngStream) -> FactorBatch:
        return fixed_factor_batch(k, L, fixed_value_index, self.cfg, self.spec, rng, self.height, self.width)


# =============================================================================
# Datasets and the CELD file format
# =============================================================================

@dataclass
class EllipseDataset:
    """Factor indices (n, 4) and 8-bit images (n, H, W)."""

    height: int
    width: int
    spec: FactorSpec
    indices: NDArray[np.int64]
    images: NDArray[np.uint8]

    def __post_init__(self):
        self.indices = self.spec.check_indices(self.indices)
        if self.images.dtype != np.uint8 or self.images.shape != (self.indices.shape[0], self.height, self.width):
            raise FormatError("image array does not match the dataset header")

    def __len__(self) -> int:
        return self.indices.shape[0]

    def images_unit(self) -> NDArray[np.float64]:
        """Images as float64 in [0, 1], flattened to (n, H·W)."""
        return self.images.reshape(len(self), -1).astype(np.float64) / 255.0

    def batch(self, rows: ArrayLike) -> NDArray[np.float64]:
        selected = np.asarray(rows)
        return self.images[selected].reshape(selected.shape[0], -1).astype(np.float64) / 255.0


def generate_dataset(
    n: int,
    cfg: CorrConfig,
    spec: FactorSpec,
    height: int,
    width: int,
    seed: int,
) -> EllipseDataset:
    """Sample i draws its factors from the stream (seed, i), so any partition yields identical data."""
    if n < 1:
        raise DomainError(f"dataset size must be positive, got {n}")
    root = RngStream(seed)
    indices = np.empty((n, NUM_FACTORS), dtype=np.int64)
    images = np.empty((n, height, width), dtype=np.uint8)
    for i in range(n):
        indices[i] = sample_factors(cfg, spec, root.child(i))
        images[i] = render_ellipse(indices[i], spec, height, width)
        if (i + 1) % 10_000 == 0:
            logger.info("rendered %d/%d ellipses", i + 1, n)
    return EllipseDataset(height, width, spec, indices, images)


def _record_dtype(height: int, width: int) -> np.dtype:
    return np.dtype([("indices", "<u2", (NUM_FACTORS,)), ("pixels", "u1", (height * width,))])


def dataset_bytes(dataset: EllipseDataset) -> bytes:
    cards = dataset.spec.cardinalities
    header = DATASET_MAGIC + struct.pack(
        f"<HIIIH{NUM_FACTORS}H", DATASET_VERSION, dataset.height, dataset.width, len(dataset), NUM_FACTORS, *cards
    )
    tables = b"".join(np.asarray(t, dtype="<f8").tobytes() for t in dataset.spec.tables)
    records = np.empty(len(dataset), dtype=_record_dtype(dataset.height, dataset.width))
    records["indices"] = dataset.indices
    records["pixels"] = dataset.images.reshape(len(dataset), -1)
    return header + tables + records.tobytes()


def write_dataset(dataset: EllipseDataset, path: Union[str, Path]) -> Path:
    """
    Write the CELD format: magic, u16 version, u32 H, W, n, u16 K, u16
    cardinalities, float64 factor tables, then per-sample records of u16
    factor indices and u8 pixels. Little-endian throughout.
    """
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(dataset_bytes(dataset))
    except OSError as e:
        raise IoError(f"cannot write dataset {target}: {e}") from e
    logger.info("wrote %d images to %s", len(dataset), target)
    return target


def read_dataset(path: Union[str, Path]) -> EllipseDataset:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read dataset {path}: {e}") from e
    fixed = struct.calcsize("<HIIIH")
    if len(data) < 4 + fixed or data[:4] != DATASET_MAGIC:
        raise FormatError("not a CELD dataset (bad magic)")
    version, height, width, n, k = struct.unpack_from("<HIIIH", data, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported CELD version {version}")
    if k != NUM_FACTORS or height < 1 or width < 1:
        raise FormatError(f"unsupported header: K={k}, H={height}, W={width}")
    offset = 4 + fixed
    if len(data) < offset + 2 * k:
        raise FormatError("CELD header is truncated")
    cards = struct.unpack_from(f"<{k}H", data, offset)
    offset += 2 * k
    record = _record_dtype(height, width)
    expected = offset + 8 * sum(cards) + n * record.itemsize
    if len(data) != expected:
        raise FormatError(f"CELD file has {len(data)} bytes, header implies {expected}")
    tables = []
    for card in cards:
        tables.append(np.frombuffer(data, dtype="<f8", count=card, offset=offset).astype(np.float64))
        offset += 8 * card
    try:
        spec = FactorSpec(tuple(tables))
    except ConfigurationError as e:
        raise FormatError(f"CELD factor tables are invalid: {e}") from e
    records = np.frombuffer(data, dtype=record, count=n, offset=offset)
    try:
        return EllipseDataset(
            height=height,
            width=width,
            spec=spec,
            indices=records["indices"].astype(np.int64),
            images=records["pixels"].reshape(n, height, width).copy(),
        )
    except DomainError as e:
        raise FormatError(f"CELD records are invalid: {e}") from e
