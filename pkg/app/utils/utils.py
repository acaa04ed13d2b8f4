import hashlib
import os
import tempfile
from typing import Iterable

import numpy as np

from app.exception.exce import ConfigError

# bump when the meaning of a stream changes; old task files then regenerate differently
RNG_VERSION = 1


def _purpose_key(purpose: str) -> int:
    return int.from_bytes(hashlib.sha256(purpose.encode("utf-8")).digest()[:4], "big")


def rng_stream(seed: int, purpose: str) -> np.random.Generator:
    """named random stream

    Each consumer (concepts, noise, augmentation, init, ...) draws from its own
    stream, so adding a consumer never perturbs the numbers another one sees.

    Args:
        seed: experiment seed, non-negative.
        purpose: stream name, e.g. "concepts" or "augment".

    Returns:
        A PCG64 generator keyed by (seed, RNG_VERSION, purpose).
    """
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    sequence = np.random.SeedSequence(
        entropy=seed, spawn_key=(RNG_VERSION, _purpose_key(purpose))
    )
    return np.random.Generator(np.random.PCG64(sequence))


def params_digest(arrays: Iterable[np.ndarray]) -> str:
    """sha256 over the raw bytes (and shapes) of the given arrays"""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode("ascii"))
        h.update(a.tobytes())
    return h.hexdigest()


def ensure_writable(directory: str) -> None:
    """create `directory` if needed and check that files can be written into it"""
    try:
        os.makedirs(directory, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=directory, prefix=".writable-", delete=True):
            pass
    except OSError as e:
        raise ConfigError(f"output directory {directory!r} is not writable: {e}") from e
