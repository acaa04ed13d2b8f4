"""
Seeded generator of synthetic open-vocabulary adaptation tasks.

A task has M class concepts; source image/text pairs are rendered from the
concepts through fixed linear maps, target images through a rotated and
offset image map. Each class comes with a canonical name prompt plus K
prompt variants, some of which are replaced by junk ("failed generations").
"""

import hashlib
import struct
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence

import numpy as np
from loguru import logger
from pydantic import ValidationError

from app.exception.exce import (
    CorruptFile,
    DimMismatch,
    FormatVersionMismatch,
    ResampleExhausted,
    SpecError,
)
from app.schemas.task_schema import TaskSpec
from app.utils.linalg import Matrix, Vec, as_vec
from app.utils.utils import rng_stream

TASK_MAGIC = b"PESTTASK"
TASK_FORMAT_VERSION = 1
MAX_CONCEPT_COHERENCE = 0.3
MAX_RESAMPLE_TRIES = 1000

_HEADER = struct.Struct(">8sHI")
_PAYLOAD_HEADER = struct.Struct(">Q32s")
_NATIVE = {"<f8": np.float64, "<i8": np.int64, "u1": bool}


@dataclass(frozen=True)
class UnlabelledTarget:
    """What the adaptation loop may see of the target domain."""

    images: Matrix

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class ClassPrompts:
    """The target vocabulary as raw text inputs."""

    canonical: Matrix  # M x input_dim, one name prompt per class
    variants: np.ndarray  # M x K x input_dim

    @property
    def num_classes(self) -> int:
        return self.canonical.shape[0]


class LabelEvaluator:
    """Scores predictions against hidden target labels without handing them out."""

    __slots__ = ("_labels",)

    def __init__(self, labels: np.ndarray):
        labels = np.array(labels, dtype=np.int64, copy=True)
        labels.setflags(write=False)
        self._labels = labels

    def accuracy(self, predictions: np.ndarray) -> float:
        truth = self._labels
        predictions = np.asarray(predictions)
        if predictions.shape != truth.shape:
            raise DimMismatch(f"{predictions.shape[0]} predictions for {truth.shape[0]} samples")
        if truth.size == 0:
            return 0.0
        return float(np.count_nonzero(predictions == truth)) / truth.size


@dataclass(frozen=True)
class SyntheticTask:
    spec: TaskSpec
    concepts: Matrix
    render_image: Matrix  # source image map, input_dim x concept_dim
    render_text: Matrix
    target_render: Matrix
    source_images: Matrix
    source_texts: Matrix
    source_labels: np.ndarray
    target_images: Matrix
    target_labels: np.ndarray  # hidden; evaluation only
    class_names: Matrix
    prompts: np.ndarray
    prompt_failed: np.ndarray

    def unlabelled_target(self) -> UnlabelledTarget:
        return UnlabelledTarget(images=self.target_images)

    def class_prompts(self) -> ClassPrompts:
        return ClassPrompts(canonical=self.class_names, variants=self.prompts)

    def evaluator(self) -> LabelEvaluator:
        return LabelEvaluator(self.target_labels)

    def source_evaluator(self) -> LabelEvaluator:
        return LabelEvaluator(self.source_labels)


class AugmentKind(str, Enum):
    jitter = "jitter"
    random_mask = "random_mask"
    random_scale = "random_scale"


@dataclass(frozen=True)
class AugmentOp:
    kind: AugmentKind
    sigma: float = 0.0
    fraction: float = 0.0
    low: float = 1.0
    high: float = 1.0

    @classmethod
    def jitter(cls, sigma: float) -> "AugmentOp":
        return cls(AugmentKind.jitter, sigma=sigma)

    @classmethod
    def random_mask(cls, fraction: float) -> "AugmentOp":
        return cls(AugmentKind.random_mask, fraction=fraction)

    @classmethod
    def random_scale(cls, low: float, high: float) -> "AugmentOp":
        return cls(AugmentKind.random_scale, low=low, high=high)


def augment(x: Vec, op: AugmentOp, rng: np.random.Generator) -> Vec:
    x = as_vec(x)
    if op.kind is AugmentKind.jitter:
        return x + op.sigma * rng.standard_normal(x.shape[0])
    if op.kind is AugmentKind.random_mask:
        count = int(round(op.fraction * x.shape[0]))
        out = x.copy()
        out[rng.permutation(x.shape[0])[:count]] = 0.0
        return out
    return x * rng.uniform(op.low, op.high)


def augment_views(
    images: Matrix, ops: Sequence[AugmentOp], k: int, rng: np.random.Generator
) -> Matrix:
    """k views per image, each the composition of `ops`; rows are image-major."""
    views = np.empty((images.shape[0] * k, images.shape[1]), dtype=np.float64)
    row = 0
    for x in images:
        for _ in range(k):
            v = x
            for op in ops:
                v = augment(v, op, rng)
            views[row] = v
            row += 1
    return views


def _sample_concepts(num: int, dim: int, rng: np.random.Generator) -> Matrix:
    accepted: List[np.ndarray] = []
    for m in range(num):
        for _ in range(MAX_RESAMPLE_TRIES):
            c = rng.standard_normal(dim)
            c /= np.linalg.norm(c)
            if all(abs(float(c @ a)) <= MAX_CONCEPT_COHERENCE for a in accepted):
                accepted.append(c)
                break
        else:
            raise ResampleExhausted(
                f"could not place concept {m} of {num} in {dim} dims with "
                f"|cos| <= {MAX_CONCEPT_COHERENCE} after {MAX_RESAMPLE_TRIES} tries"
            )
    return np.stack(accepted)


def _rotation(dim: int, strength: float, rng: np.random.Generator) -> Matrix:
    # Cayley transform of a skew matrix with spectral norm 2: largest angle 2*atan(strength)
    g = rng.standard_normal((dim, dim))
    skew = g - g.T
    skew *= 2.0 / np.linalg.norm(skew, 2)
    half = 0.5 * strength * skew
    eye = np.eye(dim)
    return np.linalg.solve(eye - half, eye + half)


def generate_task(spec: TaskSpec) -> SyntheticTask:
    try:
        spec = TaskSpec.model_validate(spec.model_dump())
    except ValidationError as e:
        raise SpecError(str(e)) from e

    m, d, n_in = spec.num_classes, spec.concept_dim, spec.input_dim
    k = spec.k_text_prompts
    seed = spec.seed

    concepts = _sample_concepts(m, d, rng_stream(seed, "concepts"))

    render_rng = rng_stream(seed, "render")
    render_image = render_rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_in, d))
    render_text = render_rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_in, d))

    shift_rng = rng_stream(seed, "shift")
    rotation = _rotation(n_in, spec.shift_strength, shift_rng)
    offset = shift_rng.normal(0.0, 0.5 / np.sqrt(d), size=(n_in, d))
    target_render = rotation @ render_image + spec.shift_strength * offset

    source_rng = rng_stream(seed, "source-noise")
    source_labels = np.repeat(np.arange(m, dtype=np.int64), spec.source_pairs_per_class)
    source_concepts = concepts[source_labels]
    source_images = source_concepts @ render_image.T + source_rng.normal(
        0.0, spec.image_noise_sigma, size=(source_labels.size, n_in)
    )
    source_texts = source_concepts @ render_text.T + source_rng.normal(
        0.0, spec.text_noise_sigma, size=(source_labels.size, n_in)
    )

    target_rng = rng_stream(seed, "target-noise")
    target_labels = np.repeat(np.arange(m, dtype=np.int64), spec.target_images_per_class)
    target_labels = target_labels[rng_stream(seed, "target-order").permutation(target_labels.size)]
    target_images = concepts[target_labels] @ target_render.T + target_rng.normal(
        0.0, spec.image_noise_sigma, size=(target_labels.size, n_in)
    )

    name_rng = rng_stream(seed, "class-names")
    class_names = concepts @ render_text.T + name_rng.normal(
        0.0, spec.text_noise_sigma, size=(m, n_in)
    )

    # every draw happens whatever p_fail is, so clean prompts do not depend on it
    prompt_rng = rng_stream(seed, "prompts")
    clean = (concepts @ render_text.T)[:, None, :] + prompt_rng.normal(
        0.0, spec.text_noise_sigma, size=(m, k, n_in)
    )
    junk = prompt_rng.standard_normal((m, k, n_in))
    junk /= np.linalg.norm(junk, axis=-1, keepdims=True)
    prompt_failed = prompt_rng.random((m, k)) < spec.prompt_failure_rate
    prompts = np.where(prompt_failed[:, :, None], junk, clean)

    logger.debug(
        f"generated task: M={m} source={source_labels.size} target={target_labels.size} "
        f"failed prompts={int(prompt_failed.sum())}/{m * k}"
    )
    return SyntheticTask(
        spec=spec,
        concepts=concepts,
        render_image=render_image,
        render_text=render_text,
        target_render=target_render,
        source_images=source_images,
        source_texts=source_texts,
        source_labels=source_labels,
        target_images=target_images,
        target_labels=target_labels,
        class_names=class_names,
        prompts=prompts,
        prompt_failed=prompt_failed,
    )


def _layout(spec: TaskSpec):
    m, d, n_in, k = spec.num_classes, spec.concept_dim, spec.input_dim, spec.k_text_prompts
    ns = m * spec.source_pairs_per_class
    nt = m * spec.target_images_per_class
    return [
        ("concepts", "<f8", (m, d)),
        ("render_image", "<f8", (n_in, d)),
        ("render_text", "<f8", (n_in, d)),
        ("target_render", "<f8", (n_in, d)),
        ("source_images", "<f8", (ns, n_in)),
        ("source_texts", "<f8", (ns, n_in)),
        ("source_labels", "<i8", (ns,)),
        ("target_images", "<f8", (nt, n_in)),
        ("target_labels", "<i8", (nt,)),
        ("class_names", "<f8", (m, n_in)),
        ("prompts", "<f8", (m, k, n_in)),
        ("prompt_failed", "u1", (m, k)),
    ]


def task_bytes(task: SyntheticTask) -> bytes:
    """magic | version | spec json | payload length + sha256 | payload"""
    spec_json = task.spec.model_dump_json().encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(getattr(task, name), dtype=dtype).tobytes()
        for name, dtype, _ in _layout(task.spec)
    )
    return b"".join(
        [
            _HEADER.pack(TASK_MAGIC, TASK_FORMAT_VERSION, len(spec_json)),
            spec_json,
            _PAYLOAD_HEADER.pack(len(payload), hashlib.sha256(payload).digest()),
            payload,
        ]
    )


def serialize_task(task: SyntheticTask, path: str) -> None:
    with open(path, "wb") as f:
        f.write(task_bytes(task))
    logger.info(f"task written to {path}")


def parse_task(blob: bytes) -> SyntheticTask:
    if len(blob) < _HEADER.size:
        raise CorruptFile("task file shorter than its header")
    magic, version, spec_len = _HEADER.unpack_from(blob, 0)
    if magic != TASK_MAGIC:
        raise CorruptFile("not a task file (bad magic bytes)")
    if version != TASK_FORMAT_VERSION:
        raise FormatVersionMismatch(f"task format {version}, expected {TASK_FORMAT_VERSION}")

    pos = _HEADER.size
    if len(blob) < pos + spec_len + _PAYLOAD_HEADER.size:
        raise CorruptFile("task file truncated in header")
    try:
        spec = TaskSpec.model_validate_json(blob[pos : pos + spec_len])
    except (ValidationError, SpecError) as e:
        raise CorruptFile(f"bad task spec in file: {e}") from e
    pos += spec_len

    payload_len, digest = _PAYLOAD_HEADER.unpack_from(blob, pos)
    pos += _PAYLOAD_HEADER.size
    payload = blob[pos:]
    if len(payload) != payload_len:
        raise CorruptFile(f"payload has {len(payload)} bytes, header says {payload_len}")
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptFile("payload checksum mismatch")

    fields = {}
    offset = 0
    for name, dtype, shape in _layout(spec):
        count = int(np.prod(shape))
        itemsize = np.dtype(dtype).itemsize
        if offset + count * itemsize > payload_len:
            raise CorruptFile(f"payload too short for {name}")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(shape)
        fields[name] = arr.astype(_NATIVE[dtype])
        offset += count * itemsize
    if offset != payload_len:
        raise CorruptFile(f"payload has {payload_len - offset} trailing bytes")
    return SyntheticTask(spec=spec, **fields)


def load_task(path: str) -> SyntheticTask:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CorruptFile(f"cannot read task file {path}: {e}") from e
    return parse_task(blob)
