"""
Encoder/decoder networks, Glorot initialisation, Adam and checkpoints.

The backbone is a dense MLP: D → hidden... → heads for the encoder and the
mirror image for the decoder. In ``chyvae`` mode the encoder emits μ̃ and a
p²-wide head turned into L̃ by :func:`autodiff.lower_triangular_assemble`;
in ``diagonal`` mode (the β-VAE baseline) it emits μ̃ and a softplus σ head.
"""
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import RngStream
from .errors import ConfigurationError, DimensionMismatch, FormatError, IoError, NonFiniteGradient
from .linalg import SpdMatrix

MODES = ("chyvae", "diagonal")
SIGMA_JITTER = 1e-4

CHECKPOINT_MAGIC = b"CHVK"
CHECKPOINT_VERSION = 1


# =============================================================================
# Configuration
# =============================================================================

@dataclass(frozen=True)
class ModelConfig:
    """
    Layer sizes of the encoder/decoder pair.

    input_dim: flattened image size D
    latent_dim: latent size p
    hidden: encoder hidden widths, outermost first; the decoder mirrors them
    mode: "chyvae" (full Cholesky head) or "diagonal" (β-VAE σ head)
    """

    input_dim: int
    latent_dim: int = 10
    hidden: tuple[int, ...] = (512, 256)
    mode: str = "chyvae"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise ConfigurationError("input_dim must be positive.")
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be positive.")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigurationError("hidden must list at least one positive width.")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}.")

    @property
    def cov_head_dim(self) -> int:
        return self.latent_dim ** 2 if self.mode == "chyvae" else self.latent_dim

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """(name, shape) of every parameter in checkpoint order."""
        shapes: list[tuple[str, tuple[int, ...]]] = []
        widths = (self.input_dim,) + self.hidden
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes += [(f"enc_{i}_w", (fan_in, fan_out)), (f"enc_{i}_b", (fan_out,))]
        last = self.hidden[-1]
        shapes += [("enc_mu_w", (last, self.latent_dim)), ("enc_mu_b", (self.latent_dim,))]
        shapes += [("enc_cov_w", (last, self.cov_head_dim)), ("enc_cov_b", (self.cov_head_dim,))]
        widths = (self.latent_dim,) + tuple(reversed(self.hidden))
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes += [(f"dec_{i}_w", (fan_in, fan_out)), (f"dec_{i}_b", (fan_out,))]
        shapes += [("dec_out_w", (self.hidden[0], self.input_dim)), ("dec_out_b", (self.input_dim,))]
        return shapes


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive.")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("beta1 and beta2 must lie in [0, 1).")
        if not self.eps > 0:
            raise ConfigurationError("eps must be positive.")


# =============================================================================
# Parameters and optimizer state
# =============================================================================

class ModelParams:
    """Named parameter tensors (encoder φ, decoder θ) in a fixed order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = config.layer_shapes()
        if [name for name, _ in expected] != list(tensors):
            raise DimensionMismatch("parameter names do not match the model configuration")
        for name, shape in expected:
            if tensors[name].shape != shape:
                raise DimensionMismatch(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.config = config
        self.tensors = tensors

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, ArrayLike]) -> "ModelParams":
        tensors = {name: Tensor(arrays[name], requires_grad=True, name=name) for name, _ in config.layer_shapes()}
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict[str, NDArray[np.float64]]:
        return {name: t.values for name, t in self.tensors.items()}


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    v: dict[str, NDArray[np.float64]] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            step=0,
            m={name: np.zeros_like(t.values) for name, t in params.items()},
            v={name: np.zeros_like(t.values) for name, t in params.items()},
        )


def init_params(config: ModelConfig, rng: RngStream) -> ModelParams:
    """Glorot-uniform weights, zero biases, drawn in checkpoint order."""
    arrays = {}
    for name, shape in config.layer_shapes():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = (2.0 * rng.uniform(shape) - 1.0) * limit
    return ModelParams.from_arrays(config, arrays)


def adam_step(
    params: ModelParams,
    grads: dict[str, ArrayLike],
    state: AdamState,
    config: AdamConfig,
) -> tuple[ModelParams, AdamState]:
    """
    One bias-corrected Adam update.

    Returns new parameters and a new state; the inputs are left untouched.

    Raises:
        NonFiniteGradient: if any gradient entry is NaN or Inf.
    """
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradient(f"gradient of {name} is not finite")
    t = state.step + 1
    new_arrays, new_m, new_v = {}, {}, {}
    for name, tensor in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * g * g
        m_hat = m / (1.0 - config.beta1 ** t)
        v_hat = v / (1.0 - config.beta2 ** t)
        new_arrays[name] = tensor.values - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        new_m[name], new_v[name] = m, v
    return ModelParams.from_arrays(params.config, new_arrays), AdamState(step=t, m=new_m, v=new_v)


# =============================================================================
# Forward passes
# =============================================================================

@dataclass
class LatentPosterior:
    """q(z|x) = N(μ̃, Σ̃) for one example, with Σ̃ = L̃L̃ᵀ + 10⁻⁴I."""

    mu: Tensor
    chol: Tensor
    sigma: Tensor

    def sigma_matrix(self) -> SpdMatrix:
        return SpdMatrix.symmetrized(self.sigma.values)


@dataclass
class LatentBatch:
    """Encoder output for a batch: mu (B, p), chol (B, p, p), sigma (B, p, p)."""

    mu: Tensor
    chol: Tensor
    sigma: Tensor

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, i: int) -> LatentPosterior:
        return LatentPosterior(
            mu=ad.slice(self.mu, i),
            chol=ad.slice(self.chol, i),
            sigma=ad.slice(self.sigma, i),
        )

    def __iter__(self) -> Iterator[LatentPosterior]:
        return (self[i] for i in range(len(self)))


def _as_batch(x: Union[Tensor, ArrayLike], width: int) -> Tensor:
    tensor = x if isinstance(x, Tensor) else ad.constant(x)
    if tensor.values.ndim == 1:
        tensor = ad.reshape(tensor, (1,) + tensor.shape)
    if tensor.values.ndim != 2 or tensor.shape[1] != width:
        raise DimensionMismatch(f"expected inputs of width {width}, got shape {tensor.shape}")
    return tensor


def _dense(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ad.matmul(x, params[f"{prefix}_w"]) + ad.repeat_rows(params[f"{prefix}_b"], x.shape[0])


def _diagonal_scatter(p: int) -> NDArray[np.float64]:
    scatter = np.zeros((p, p * p))
    scatter[np.arange(p), np.arange(p) * (p + 1)] = 1.0
    return scatter


def encoder_forward(
    params: ModelParams,
    x: Union[Tensor, ArrayLike],
    mode: Optional[str] = None,
) -> LatentBatch:
    """
    Encode a batch (B, D), or a single vector (D,) as a batch of one.

    The mode defaults to the configured one; the checkpointed head width
    must agree with it.
    """
    config = params.config
    mode = mode or config.mode
    if mode != config.mode:
        raise DimensionMismatch(f"parameters were built for mode {config.mode!r}, not {mode!r}")
    h = _as_batch(x, config.input_dim)
    for i in range(len(config.hidden)):
        h = ad.relu(_dense(h, params, f"enc_{i}"))
    p = config.latent_dim
    n = h.shape[0]
    mu = _dense(h, params, "enc_mu")
    head = _dense(h, params, "enc_cov")
    if mode == "diagonal":
        head = ad.matmul(head, ad.constant(_diagonal_scatter(p)))
    chol = ad.lower_triangular_assemble(head)
    jitter = ad.constant(np.broadcast_to(SIGMA_JITTER * np.eye(p), (n, p, p)))
    sigma = ad.matmul(chol, ad.transpose(chol)) + jitter
    return LatentBatch(mu=mu, chol=chol, sigma=sigma)


def reparameterize(latents: LatentBatch, eps: ArrayLike) -> Tensor:
    """z = μ̃ + L̃ε row by row; eps has shape (B, p)."""
    noise = ad.constant(eps)
    if noise.shape != latents.mu.shape:
        raise DimensionMismatch(f"eps shape {noise.shape} differs from mu shape {latents.mu.shape}")
    return latents.mu + ad.matvec(latents.chol, noise)


def decoder_logits(params: ModelParams, z: Union[Tensor, ArrayLike]) -> Tensor:
    config = params.config
    h = _as_batch(z, config.latent_dim)
    for i in range(len(config.hidden)):
        h = ad.relu(_dense(h, params, f"dec_{i}"))
    return _dense(h, params, "dec_out")


def decoder_forward(params: ModelParams, z: Union[Tensor, ArrayLike]) -> Tensor:
    """x̂ = sigmoid(logits), one row per latent row."""
    return ad.sigmoid(decoder_logits(params, z))


def encode_means(params: ModelParams, images: ArrayLike, chunk: int = 1000) -> NDArray[np.float64]:
    """Posterior means μ̃ for an (n, D) array, evaluated outside any tape."""
    data = np.asarray(images, dtype=np.float64)
    if data.ndim == 1:
        data = data[None, :]
    parts = [
        encoder_forward(params, data[start:start + chunk]).mu.values
        for start in range(0, data.shape[0], chunk)
    ]
    return np.concatenate(parts, axis=0)


def decode(params: ModelParams, z: ArrayLike) -> NDArray[np.float64]:
    """Decoder means for an (n, p) array, evaluated outside any tape."""
    return decoder_forward(params, np.asarray(z, dtype=np.float64)).values


# =============================================================================
# Checkpoints
# =============================================================================

@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState
    meta: dict[str, Any]


def _pack_blob(name: str, array: NDArray) -> bytes:
    encoded = name.encode("utf-8")
    header = struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f8").tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> tuple[str, NDArray[np.float64]]:
        (name_len,) = self.unpack("<H")
        name = self.take(name_len).decode("utf-8")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        array = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, array


def save_checkpoint(
    path: Union[str, Path],
    params: ModelParams,
    adam: AdamState,
    meta: Optional[dict[str, Any]] = None,
) -> Path:
    """
    Write a checkpoint.

    Layout (little-endian): magic "CHVK", u16 version, u32 JSON length, JSON
    config echo, u64 Adam step, u32 blob count, then named float64 blobs:
    parameters in configuration order followed by Adam first and second
    moments.
    """
    echo = json.dumps({"model": asdict(params.config), "meta": meta or {}}, sort_keys=True).encode("utf-8")
    names = list(params)
    blobs = [_pack_blob(n, params[n].values) for n in names]
    blobs += [_pack_blob(f"adam.m.{n}", adam.m[n]) for n in names]
    blobs += [_pack_blob(f"adam.v.{n}", adam.v[n]) for n in names]
    payload = b"".join(
        [
            CHECKPOINT_MAGIC,
            struct.pack("<HI", CHECKPOINT_VERSION, len(echo)),
            echo,
            struct.pack("<QI", adam.step, len(blobs)),
            *blobs,
        ]
    )
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(payload)
    except OSError as e:
        raise IoError(f"cannot write checkpoint {target}: {e}") from e
    return target


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    reader = _Reader(data)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, echo_len = reader.unpack("<HI")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        echo = json.loads(reader.take(echo_len).decode("utf-8"))
        config = ModelConfig(**{**echo["model"], "hidden": tuple(echo["model"]["hidden"])})
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"checkpoint config echo is unreadable: {e}") from e
    step, count = reader.unpack("<QI")
    blobs = dict(reader.blob() for _ in range(count))
    if reader.offset != len(data):
        raise FormatError("checkpoint has trailing bytes")
    names = [name for name, _ in config.layer_shapes()]
    try:
        params = ModelParams.from_arrays(config, {n: blobs[n] for n in names})
        adam = AdamState(
            step=step,
            m={n: blobs[f"adam.m.{n}"] for n in names},
            v={n: blobs[f"adam.v.{n}"] for n in names},
        )
    except (KeyError, DimensionMismatch) as e:
        raise FormatError(f"checkpoint blobs do not match the configuration: {e}") from e
    return Checkpoint(params=params, adam=adam, meta=echo.get("meta", {}))
