"""
Bidirectional image-text contrastive pretraining of the toy VLM.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from tqdm import tqdm

from app.config.config import settings
from app.exception.exce import ConfigError, DimMismatch
from app.schemas.config_schema import PretrainConfig
from app.schemas.metrics_schema import PretrainRow, pretrain_frame
from app.service.encoder import LinearEncoder, Role, encode_backward_batch, encode_batch, init_encoder
from app.service.optim import AdamWState, CosineSchedule, adamw_apply, lr_at
from app.service.synthbench import SyntheticTask
from app.utils.linalg import FeatureVec, Matrix, softmax_cross_entropy_rows
from app.utils.utils import rng_stream


@dataclass(frozen=True)
class PairBatch:
    images: Matrix
    texts: Matrix

    def __post_init__(self):
        if self.images.shape[0] != self.texts.shape[0]:
            raise DimMismatch(f"{self.images.shape[0]} images vs {self.texts.shape[0]} texts")
        if self.images.shape[0] < 2:
            raise DimMismatch("a contrastive batch needs at least 2 pairs")


@dataclass(frozen=True)
class PretrainResult:
    image_encoder: LinearEncoder
    text_encoder: LinearEncoder
    metrics: pd.DataFrame
    source_zero_shot_acc: float


def contrastive_loss(
    z_image: Sequence[FeatureVec], z_text: Sequence[FeatureVec], tau: float
) -> Tuple[float, Matrix, Matrix]:
    """Mean over pairs of image->text plus text->image cross-entropy on S / tau.

    Returns (loss, d loss / d z_image, d loss / d z_text).
    """
    zi = np.asarray(z_image, dtype=np.float64)
    zt = np.asarray(z_text, dtype=np.float64)
    if zi.ndim != 2 or zi.shape != zt.shape:
        raise DimMismatch(f"image features {zi.shape} vs text features {zt.shape}")
    n = zi.shape[0]
    if n < 2:
        raise DimMismatch("contrastive_loss needs N >= 2 pairs")

    sims = zi @ zt.T
    targets = np.arange(n)
    loss_i2t, grad_rows = softmax_cross_entropy_rows(sims, targets, tau)
    loss_t2i, grad_cols = softmax_cross_entropy_rows(sims.T, targets, tau)

    loss = float(np.sum(loss_i2t + loss_t2i)) / n
    d_sims = (grad_rows + grad_cols.T) / n
    return loss, d_sims @ zt, d_sims.T @ zi


def zero_shot_accuracy(
    image_encoder: LinearEncoder, class_features: Matrix, images: Matrix, evaluator
) -> float:
    predictions = np.argmax(encode_batch(image_encoder, images) @ class_features.T, axis=1)
    return evaluator.accuracy(predictions)


def source_loss(
    image_enc: LinearEncoder, text_enc: LinearEncoder, images: Matrix, texts: Matrix, tau: float
) -> float:
    """Contrastive loss over every source pair at once; no minibatch sampling noise."""
    return contrastive_loss(encode_batch(image_enc, images), encode_batch(text_enc, texts), tau)[0]


def pretrain_vlm(task: SyntheticTask, cfg: PretrainConfig, seed: int) -> PretrainResult:
    if cfg.epochs < 1:
        raise ConfigError(f"pretrain epochs must be >= 1, got {cfg.epochs}")
    images, texts = task.source_images, task.source_texts
    n = images.shape[0]
    if n < 2:
        raise ConfigError("pretraining needs at least 2 source pairs")

    init_rng = rng_stream(seed, "init")
    image_enc = init_encoder(images.shape[1], cfg.embed_dim, Role.image, init_rng)
    text_enc = init_encoder(texts.shape[1], cfg.embed_dim, Role.text, init_rng)
    order_rng = rng_stream(seed, "pretrain-order")

    batch_size = min(cfg.batch_size, n)
    # a trailing batch of one pair has no negatives; fold it into the previous one
    starts = list(range(0, n, batch_size))
    if n - starts[-1] < 2:
        starts.pop()
    bounds = list(zip(starts, starts[1:] + [n]))

    hyper = dict(weight_decay=cfg.weight_decay, base_lr=cfg.lr)
    image_opt = AdamWState.zeros_like(image_enc.params(), **hyper)
    text_opt = AdamWState.zeros_like(text_enc.params(), **hyper)
    schedule = CosineSchedule(base_lr=cfg.lr, total_steps=cfg.epochs * len(bounds))
    source_eval = task.source_evaluator()

    rows: List[PretrainRow] = []
    step = 0
    logger.info(f"pretraining on {n} pairs for {cfg.epochs} epochs ({len(bounds)} batches/epoch)")
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="pretrain", disable=not settings.SHOW_PROGRESS):
        order = order_rng.permutation(n)
        losses = []
        for lo, hi in bounds:
            idx = order[lo:hi]
            batch = PairBatch(images=images[idx], texts=texts[idx])
            zi = encode_batch(image_enc, batch.images)
            zt = encode_batch(text_enc, batch.texts)
            loss, d_zi, d_zt = contrastive_loss(zi, zt, cfg.temperature)
            losses.append(loss)

            lr = lr_at(schedule, step)
            grad_i = encode_backward_batch(image_enc, batch.images, d_zi)
            grad_t = encode_backward_batch(text_enc, batch.texts, d_zt)
            params, image_opt = adamw_apply(image_opt, image_enc.params(), grad_i.as_params(), lr)
            image_enc = image_enc.with_params(**params)
            params, text_opt = adamw_apply(text_opt, text_enc.params(), grad_t.as_params(), lr)
            text_enc = text_enc.with_params(**params)
            step += 1

        class_features = encode_batch(text_enc, task.class_names)
        acc = zero_shot_accuracy(image_enc, class_features, images, source_eval)
        row = PretrainRow(
            epoch=epoch,
            loss=source_loss(image_enc, text_enc, images, texts, cfg.temperature),
            batch_loss=float(np.mean(losses)),
            source_zero_shot_acc=acc,
        )
        rows.append(row)
        logger.debug(
            f"pretrain epoch {epoch}: loss={row.loss:.4f} batch_loss={row.batch_loss:.4f} source_acc={acc:.4f}"
        )

    final_acc = rows[-1].source_zero_shot_acc
    logger.info(f"pretraining done: loss={rows[-1].loss:.4f} source zero-shot acc={final_acc:.4f}")
    return PretrainResult(
        image_encoder=image_enc,
        text_encoder=text_enc,
        metrics=pretrain_frame(rows),
        source_zero_shot_acc=final_acc,
    )
