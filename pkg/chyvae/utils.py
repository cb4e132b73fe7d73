import hashlib
import logging
import sys
from pathlib import Path
from typing import Optional, TextIO, Union

import numpy as np
from numpy.typing import ArrayLike

from .errors import ChyvaeError, ConfigurationError, DomainError, IoError

logger = logging.getLogger(__name__)


def exit_status(error: ChyvaeError, stream: Optional[TextIO] = None) -> int:
    """
    Report an error on stderr and return the process exit code for it.

    Args:
        error: The library error that ended the command
        stream: Where to write the one-line message (default: stderr)

    Note: Only the first line reaches the terminal; the traceback goes to the
    debug log so ``--verbose`` runs keep it.
    """
    out = stream or sys.stderr
    print(f"error: {error.get_error_code()}: {error.get_error_description()}", file=out)
    logger.debug("command failed", exc_info=error)
    return error.get_exit_code()


def git_blob_hash(path: Union[str, Path]) -> str:
    """
    SHA-1 of a file under git's blob framing ("blob <size>\\0" + content).

    Returns:
        The 40-character hex digest ``git hash-object`` prints for the file
    """
    try:
        content = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot hash {path}: {e}") from e
    digest = hashlib.sha1(f"blob {len(content)}\0".encode("ascii"))
    digest.update(content)
    return digest.hexdigest()


def to_gray8(image: ArrayLike) -> np.ndarray:
    """Map values in [0, 1] to uint8 with round-half-to-even; uint8 input passes through."""
    values = np.asarray(image)
    if values.ndim != 2:
        raise DomainError(f"a grayscale image must be 2-D, got shape {values.shape}")
    if values.dtype == np.uint8:
        return values
    return np.rint(np.clip(values.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def pgm_bytes(image: ArrayLike) -> bytes:
    gray = to_gray8(image)
    height, width = gray.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + np.ascontiguousarray(gray).tobytes()


def write_pgm(path: Union[str, Path], image: ArrayLike) -> Path:
    """Write an 8-bit binary PGM (P5); float inputs are taken to lie in [0, 1]."""
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(pgm_bytes(image))
    except OSError as e:
        raise IoError(f"cannot write image {target}: {e}") from e
    return target


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read image {path}: {e}") from e
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise IoError(f"{path} is not an 8-bit P5 image")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=width * height).reshape(height, width)


def parse_grid(text: str) -> np.ndarray:
    """
    Parse a traversal grid.

    Accepts ``start:stop:count`` (inclusive, evenly spaced) or a comma list.
    """
    try:
        if ":" in text:
            start, stop, count = text.split(":")
            n = int(count)
            if n < 1:
                raise ValueError("count must be positive")
            return np.linspace(float(start), float(stop), n)
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigurationError(f"invalid grid {text!r}: {e}") from e
    if not values:
        raise ConfigurationError(f"invalid grid {text!r}: no values")
    return np.asarray(values)


def load_config_file(path: Union[str, Path]) -> dict[str, str]:
    """
    Read a flat ``key value`` file.

    Blank lines and ``#`` comments are skipped; keys are normalised to the
    argparse destination spelling (``rho-pos`` -> ``rho_pos``).
    """
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise IoError(f"cannot read config file {path}: {e}") from e
    entries: dict[str, str] = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition(" ")
        if not value.strip():
            raise ConfigurationError(f"{path}:{number}: expected 'key value'")
        entries[key.lstrip("-").replace("-", "_")] = value.strip()
    return entries
