"""
Toy VLM encoders: one affine layer followed by L2 normalization.

The image encoder is trained during adaptation and has an EMA ("momentum")
copy; the text encoder is frozen once pretraining is done.
"""

import json
from dataclasses import dataclass
from enum import Enum
from typing import Dict

import numpy as np
from loguru import logger
from pydantic import ValidationError

from app.exception.exce import CorruptFile, DimMismatch, FormatVersionMismatch, ShapeMismatch
from app.schemas.checkpoint_schema import CHECKPOINT_VERSION, EncoderCheckpoint
from app.utils.linalg import FeatureVec, Matrix, Vec, as_matrix, as_vec, l2_normalize, l2_normalize_rows
from app.utils.utils import params_digest


class Role(str, Enum):
    image = "image"
    text = "text"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LinearEncoder:
    weight: Matrix  # out_dim x in_dim
    bias: Vec  # out_dim
    role: Role

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))
        object.__setattr__(self, "role", Role(self.role))
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatch(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not match"
            )
        if self.out_dim < 2:
            raise ShapeMismatch(f"out_dim must be >= 2, got {self.out_dim}")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ShapeMismatch("encoder parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def params(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def with_params(self, weight: Matrix, bias: Vec) -> "LinearEncoder":
        return LinearEncoder(weight=weight, bias=bias, role=self.role)

    def fingerprint(self) -> str:
        return params_digest([self.weight, self.bias])


@dataclass(frozen=True)
class EncoderGradient:
    d_weight: Matrix
    d_bias: Vec

    def as_params(self) -> Dict[str, np.ndarray]:
        return {"weight": self.d_weight, "bias": self.d_bias}


@dataclass(frozen=True)
class MomentumEncoder:
    shadow: LinearEncoder
    momentum: float

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ShapeMismatch(f"momentum must lie in [0, 1), got {self.momentum}")

    @classmethod
    def from_online(cls, online: LinearEncoder, momentum: float) -> "MomentumEncoder":
        return cls(shadow=online.with_params(online.weight, online.bias), momentum=momentum)


def init_encoder(in_dim: int, out_dim: int, role: Role, rng: np.random.Generator) -> LinearEncoder:
    """fan-in uniform weights, zero bias"""
    bound = 1.0 / np.sqrt(in_dim)
    weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return LinearEncoder(weight=weight, bias=np.zeros(out_dim), role=role)


def _check_input(enc: LinearEncoder, x: np.ndarray) -> None:
    if x.shape[-1] != enc.in_dim:
        raise DimMismatch(f"{enc.role.value} encoder expects dim {enc.in_dim}, got {x.shape[-1]}")


def encode(enc: LinearEncoder, x: Vec) -> FeatureVec:
    x = as_vec(x)
    _check_input(enc, x)
    return l2_normalize(enc.weight @ x + enc.bias)


def encode_batch(enc: LinearEncoder, xs: Matrix) -> Matrix:
    """Row-wise `encode`; output row i belongs to input row i."""
    xs = as_matrix(xs)
    _check_input(enc, xs)
    return l2_normalize_rows(xs @ enc.weight.T + enc.bias)[0]


def encode_backward(enc: LinearEncoder, x: Vec, upstream: FeatureVec) -> EncoderGradient:
    x = as_vec(x)
    return encode_backward_batch(enc, x[None, :], np.asarray(upstream, dtype=np.float64)[None, :])


def encode_backward_batch(enc: LinearEncoder, xs: Matrix, upstream: Matrix) -> EncoderGradient:
    """Gradient of a loss summed over rows, given d loss / d output features.

    With u = Wx + b and n = |u|, d loss / d u = (I - u_hat u_hat^T) / n . upstream.
    """
    xs = as_matrix(xs)
    upstream = np.asarray(upstream, dtype=np.float64)
    _check_input(enc, xs)
    if upstream.shape != (xs.shape[0], enc.out_dim):
        raise DimMismatch(
            f"upstream shape {upstream.shape} != ({xs.shape[0]}, {enc.out_dim})"
        )
    u_hat, norms = l2_normalize_rows(xs @ enc.weight.T + enc.bias)
    radial = np.einsum("ij,ij->i", upstream, u_hat)
    du = (upstream - radial[:, None] * u_hat) / norms[:, None]
    return EncoderGradient(d_weight=du.T @ xs, d_bias=du.sum(axis=0))


def momentum_update(m: MomentumEncoder, online: LinearEncoder) -> MomentumEncoder:
    """shadow <- rho * shadow + (1 - rho) * online, entrywise"""
    shadow = m.shadow
    if shadow.weight.shape != online.weight.shape:
        raise DimMismatch(f"shadow {shadow.weight.shape} vs online {online.weight.shape}")
    rho = m.momentum
    weight = rho * shadow.weight + (1.0 - rho) * online.weight
    bias = rho * shadow.bias + (1.0 - rho) * online.bias
    return MomentumEncoder(shadow=shadow.with_params(weight, bias), momentum=rho)


def save_checkpoint(enc: LinearEncoder, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(checkpoint_text(enc))
    logger.debug(f"saved {enc.role.value} encoder to {path}")


def checkpoint_text(enc: LinearEncoder) -> str:
    record = EncoderCheckpoint(
        role=enc.role.value,
        in_dim=enc.in_dim,
        out_dim=enc.out_dim,
        weight=[float(v).hex() for v in enc.weight.ravel()],
        bias=[float(v).hex() for v in enc.bias],
    )
    return record.model_dump_json(indent=1) + "\n"


def load_checkpoint(path: str) -> LinearEncoder:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, ValueError) as e:
        raise CorruptFile(f"cannot read checkpoint {path}: {e}") from e
    if isinstance(raw, dict) and raw.get("format_version", CHECKPOINT_VERSION) != CHECKPOINT_VERSION:
        raise FormatVersionMismatch(
            f"checkpoint version {raw.get('format_version')} != {CHECKPOINT_VERSION}"
        )
    try:
        record = EncoderCheckpoint.model_validate(raw)
        weight = np.array([float.fromhex(v) for v in record.weight], dtype=np.float64)
        bias = np.array([float.fromhex(v) for v in record.bias], dtype=np.float64)
        weight = weight.reshape(record.out_dim, record.in_dim)
        return LinearEncoder(weight=weight, bias=bias, role=Role(record.role))
    except (ValidationError, ValueError, ShapeMismatch) as e:
        raise CorruptFile(f"malformed checkpoint {path}: {e}") from e
