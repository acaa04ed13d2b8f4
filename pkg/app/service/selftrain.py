"""
Zero-shot inference, vanilla self-training and centroid-prompted self-training.

`adapt` is the unsupervised adaptation loop. It sees target images and the
class vocabulary only; accuracy is reported through an `Evaluator` that keeps
the ground truth to itself. The text encoder is never updated.
"""

from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from tqdm import tqdm

from app.config.config import settings
from app.exception.exce import AdaptationError, ConfigError, DimMismatch, VectorError
from app.schemas.config_schema import AdaptConfig, Mode
from app.schemas.metrics_schema import MetricsRow, PseudoLabel, RunMetrics
from app.service.encoder import (
    LinearEncoder,
    MomentumEncoder,
    encode_backward_batch,
    encode_batch,
    momentum_update,
)
from app.service.ensemble import (
    CentroidBank,
    baseline_majority_vote,
    class_centroids,
    init_fused,
    latest_fusion,
    temporal_update,
    vision_ensemble,
)
from app.service.optim import AdamWState, CosineSchedule, adamw_apply, lr_at
from app.service.synthbench import AugmentOp, ClassPrompts, UnlabelledTarget, augment_views
from app.utils.linalg import FeatureVec, Matrix, check_dims, softmax_cross_entropy_rows
from app.utils.utils import rng_stream

Labels = Union[Sequence[PseudoLabel], np.ndarray]


class Evaluator(Protocol):
    def accuracy(self, predictions: np.ndarray) -> float:
        ...


@dataclass(frozen=True)
class AdaptResult:
    image_encoder: LinearEncoder
    metrics: RunMetrics
    text_features: Matrix
    bank: Optional[CentroidBank] = None


def zero_shot_scores(z_image: FeatureVec, text_feats: Matrix) -> np.ndarray:
    z_image = np.asarray(z_image, dtype=np.float64)
    text_feats = np.asarray(text_feats, dtype=np.float64)
    check_dims(z_image, text_feats, "image feature vs text features")
    return text_feats @ z_image


def st_pseudo_labels(z_images: Matrix, text_feats: Matrix) -> Tuple[np.ndarray, np.ndarray]:
    """argmax_m z . z^T_m per row (ties -> lowest index); returns (labels, scores)."""
    check_dims(z_images, text_feats, "image features vs text features")
    sims = np.asarray(z_images) @ np.asarray(text_feats).T
    labels = np.argmax(sims, axis=1)
    return labels, sims[np.arange(sims.shape[0]), labels]


def st_pseudo_label(z_image: FeatureVec, text_feats: Matrix, sample_index: int = 0) -> PseudoLabel:
    labels, scores = st_pseudo_labels(np.asarray(z_image)[None, :], text_feats)
    return PseudoLabel(sample_index=sample_index, label=int(labels[0]), score=float(scores[0]))


def pest_scores(
    z_images: Matrix, text_feats: Matrix, fused: Matrix, raw_product: bool = False
) -> Tuple[np.ndarray, np.ndarray]:
    """(text-centroid score x fused-centroid score, text sims), both N x M"""
    check_dims(z_images, text_feats, "image features vs text features")
    check_dims(z_images, fused, "image features vs fused centroids")
    if np.shape(text_feats) != np.shape(fused):
        raise DimMismatch(f"text {np.shape(text_feats)} vs fused {np.shape(fused)}")
    text_sims = np.asarray(z_images) @ np.asarray(text_feats).T
    fused_sims = np.asarray(z_images) @ np.asarray(fused).T
    if raw_product:
        return text_sims * fused_sims, text_sims
    return np.maximum(text_sims, 0.0) * np.maximum(fused_sims, 0.0), text_sims


def pest_pseudo_labels(
    z_images: Matrix, text_feats: Matrix, fused: Matrix, raw_product: bool = False
) -> Tuple[np.ndarray, np.ndarray]:
    """Centroid-prompted labels; ties -> higher text similarity, then lowest index."""
    scores, text_sims = pest_scores(z_images, text_feats, fused, raw_product)
    index_key = -np.broadcast_to(np.arange(scores.shape[1]), scores.shape)
    labels = np.lexsort((index_key, text_sims, scores), axis=-1)[:, -1]
    return labels, scores[np.arange(scores.shape[0]), labels]


def pest_pseudo_label(
    z_image: FeatureVec,
    text_feats: Matrix,
    fused: Matrix,
    raw_product: bool = False,
    sample_index: int = 0,
) -> PseudoLabel:
    labels, scores = pest_pseudo_labels(np.asarray(z_image)[None, :], text_feats, fused, raw_product)
    return PseudoLabel(sample_index=sample_index, label=int(labels[0]), score=float(scores[0]))


def vote_pseudo_labels(z_images: Matrix, prompt_feats: np.ndarray) -> np.ndarray:
    """Every prompt variant k classifies on its own; the plurality label wins."""
    num_classes, k, _ = prompt_feats.shape
    labels = np.empty(z_images.shape[0], dtype=np.int64)
    per_prompt = [st_pseudo_labels(z_images, prompt_feats[:, j, :]) for j in range(k)]
    for n in range(z_images.shape[0]):
        labels[n] = baseline_majority_vote(
            [int(p[0][n]) for p in per_prompt], [float(p[1][n]) for p in per_prompt], num_classes
        )
    return labels


def _label_array(labels: Labels) -> np.ndarray:
    if isinstance(labels, np.ndarray):
        return labels.astype(np.int64)
    return np.array([p.label for p in labels], dtype=np.int64)


def pest_loss(
    z_images: Matrix, text_feats: Matrix, labels: Labels, tau: float
) -> Tuple[float, Matrix]:
    """Mean cross-entropy of (z . z^T_m) / tau at the pseudo labels.

    The gradient is returned for the image features only; text features are constants.
    """
    z_images = np.asarray(z_images, dtype=np.float64)
    text_feats = np.asarray(text_feats, dtype=np.float64)
    check_dims(z_images, text_feats, "image features vs text features")
    logits = z_images @ text_feats.T
    losses, grad_logits = softmax_cross_entropy_rows(logits, _label_array(labels), tau)
    n = z_images.shape[0]
    return float(np.sum(losses)) / n, (grad_logits / n) @ text_feats


def class_text_features(
    text_encoder: LinearEncoder, prompts: ClassPrompts, mode: Mode, raw_weights: bool = False
) -> Matrix:
    """Per-class text classifier of a mode."""
    if mode.uses_lpe:
        method = "language"
    elif mode in (Mode.baseline_uniform, Mode.baseline_vote):
        method = "uniform"
    elif mode is Mode.baseline_weighted:
        method = "weighted"
    else:
        return encode_batch(text_encoder, prompts.canonical)
    return class_centroids(prompt_features(text_encoder, prompts), method, raw_weights=raw_weights)


def prompt_features(text_encoder: LinearEncoder, prompts: ClassPrompts) -> np.ndarray:
    m, k, n_in = prompts.variants.shape
    flat = encode_batch(text_encoder, prompts.variants.reshape(m * k, n_in))
    return flat.reshape(m, k, -1)


def predict(
    image_encoder: LinearEncoder,
    text_feats: Matrix,
    images: Matrix,
    prompt_feats: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Nearest class feature, or a per-prompt plurality vote when `prompt_feats` is given."""
    z = encode_batch(image_encoder, images)
    if prompt_feats is not None:
        return vote_pseudo_labels(z, prompt_feats)
    return st_pseudo_labels(z, text_feats)[0]


def evaluate(
    image_encoder: LinearEncoder,
    text_feats: Matrix,
    target: UnlabelledTarget,
    evaluator: Evaluator,
    prompt_feats: Optional[np.ndarray] = None,
) -> float:
    """Top-1 accuracy on un-augmented target images."""
    return evaluator.accuracy(predict(image_encoder, text_feats, target.images, prompt_feats))


def _classifier_name(mode: Mode) -> str:
    if mode.uses_lpe:
        return "language ensemble"
    if mode in (Mode.zero_shot, Mode.st, Mode.st_vpe):
        return "canonical prompt"
    return mode.value.replace("baseline_", "") + " prompt fusion"


def _view_ops(cfg: AdaptConfig) -> List[AugmentOp]:
    return [
        AugmentOp.jitter(cfg.aug_jitter),
        AugmentOp.random_scale(cfg.aug_scale_low, cfg.aug_scale_high),
        AugmentOp.random_mask(cfg.aug_mask),
    ]


def _cold_start(
    momentum: MomentumEncoder, target: UnlabelledTarget, text_feats: Matrix, lam: float
) -> CentroidBank:
    """One un-augmented pass of the momentum encoder seeds the image centroids."""
    feats = encode_batch(momentum.shadow, target.images)
    labels, _ = st_pseudo_labels(feats, text_feats)
    image = vision_ensemble(feats, labels, text_feats.shape[0])
    bank = CentroidBank(text=text_feats, image=image, fused=None, lam=lam)
    return init_fused(bank, fallback_to_text=True)


def adapt(
    target: UnlabelledTarget,
    prompts: ClassPrompts,
    image_encoder: LinearEncoder,
    text_encoder: LinearEncoder,
    cfg: AdaptConfig,
    evaluator: Evaluator,
    seed: int = 42,
    run_name: Optional[str] = None,
) -> AdaptResult:
    mode = cfg.mode
    if cfg.epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {cfg.epochs}")
    if image_encoder.out_dim != text_encoder.out_dim:
        raise DimMismatch(
            f"image embed dim {image_encoder.out_dim} != text embed dim {text_encoder.out_dim}"
        )
    run_name = run_name or mode.value
    images = target.images
    n = images.shape[0]
    num_classes = prompts.num_classes

    text_feats = class_text_features(text_encoder, prompts, mode, raw_weights=cfg.eq4_raw_weights)
    prompt_feats = prompt_features(text_encoder, prompts) if mode is Mode.baseline_vote else None
    logger.info(
        f"[{run_name}] adapting {n} target images, mode={mode.value}, "
        f"text classifier={_classifier_name(mode)}"
    )

    batches_per_epoch = -(-n // cfg.batch_size)
    schedule = CosineSchedule(
        base_lr=cfg.lr, total_steps=cfg.epochs * batches_per_epoch, min_lr=cfg.min_lr
    )
    metrics = RunMetrics(run=run_name, mode=mode.value)

    # epoch 0: the pretrained model; its pseudo labels are the zero-shot predictions
    zero_shot_labels = predict(image_encoder, text_feats, images, prompt_feats)
    initial_loss, _ = pest_loss(encode_batch(image_encoder, images), text_feats, zero_shot_labels, cfg.tau)
    initial_acc = evaluator.accuracy(zero_shot_labels)
    metrics.append(
        MetricsRow(
            epoch=0,
            target_accuracy=initial_acc,
            pseudo_label_accuracy=initial_acc,
            mean_loss=initial_loss,
            lr=lr_at(schedule, 0),
        )
    )
    logger.info(f"[{run_name}] epoch 0: zero-shot target accuracy {initial_acc:.4f}")
    if mode is Mode.zero_shot:
        return AdaptResult(image_encoder=image_encoder, metrics=metrics, text_features=text_feats)

    online = image_encoder
    fuse = temporal_update if mode.temporal else latest_fusion
    momentum = MomentumEncoder.from_online(online, cfg.momentum)
    bank = None
    if mode.uses_vpe:
        try:
            bank = _cold_start(momentum, target, text_feats, cfg.lam)
        except VectorError as e:
            raise AdaptationError(0, 0, e) from e

    opt = AdamWState.zeros_like(online.params(), weight_decay=cfg.weight_decay, base_lr=cfg.lr)
    aug_rng = rng_stream(seed, "augment")
    order_rng = rng_stream(seed, "adapt-order")
    ops = _view_ops(cfg)
    step = 0
    lr = lr_at(schedule, 0)

    for epoch in tqdm(range(1, cfg.epochs + 1), desc=run_name, disable=not settings.SHOW_PROGRESS):
        order = order_rng.permutation(n)
        epoch_labels = np.empty(n, dtype=np.int64)
        losses = []
        for batch, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            x = images[idx]
            try:
                if bank is not None:
                    views = augment_views(x, ops, cfg.k_views, aug_rng)
                    view_feats = encode_batch(momentum.shadow, views)
                    view_labels, _ = st_pseudo_labels(view_feats, text_feats)
                    new_image = vision_ensemble(view_feats, view_labels, num_classes)
                    bank = fuse(bank, new_image)

                z = encode_batch(online, x)
                if bank is not None:
                    labels, _ = pest_pseudo_labels(z, text_feats, bank.fused, cfg.eq7_raw_product)
                elif prompt_feats is not None:
                    labels = vote_pseudo_labels(z, prompt_feats)
                else:
                    labels, _ = st_pseudo_labels(z, text_feats)

                loss, d_z = pest_loss(z, text_feats, labels, cfg.tau)
                grad = encode_backward_batch(online, x, d_z)
                lr = lr_at(schedule, step)
                params, opt = adamw_apply(opt, online.params(), grad.as_params(), lr)
                online = online.with_params(**params)
                momentum = momentum_update(momentum, online)
            except VectorError as e:
                raise AdaptationError(epoch, batch, e) from e
            step += 1
            epoch_labels[idx] = labels
            losses.append(loss * idx.size)
            logger.debug(f"[{run_name}] epoch {epoch} batch {batch}: loss={loss:.4f} lr={lr:.3e}")

        row = MetricsRow(
            epoch=epoch,
            target_accuracy=evaluate(online, text_feats, target, evaluator, prompt_feats),
            pseudo_label_accuracy=evaluator.accuracy(epoch_labels),
            mean_loss=float(np.sum(losses)) / n,
            lr=lr,
        )
        metrics.append(row)
        logger.info(
            f"[{run_name}] epoch {epoch}: target_acc={row.target_accuracy:.4f} "
            f"pseudo_acc={row.pseudo_label_accuracy:.4f} loss={row.mean_loss:.4f}"
        )

    return AdaptResult(image_encoder=online, metrics=metrics, text_features=text_feats, bank=bank)
