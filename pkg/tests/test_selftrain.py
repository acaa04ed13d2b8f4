import inspect
import math

import numpy as np
import pytest

import app.service.selftrain as selftrain
from app.exception.exce import AdaptationError, ConfigError, DimMismatch, ZeroNorm
from app.schemas.config_schema import AdaptConfig, Mode
from app.service.encoder import encode_batch
from app.service.synthbench import ClassPrompts, SyntheticTask, UnlabelledTarget
from app.service.selftrain import (
    adapt,
    class_text_features,
    evaluate,
    pest_loss,
    pest_pseudo_label,
    pest_pseudo_labels,
    st_pseudo_label,
    st_pseudo_labels,
    vote_pseudo_labels,
    zero_shot_scores,
)
from tests.conftest import numeric_grad, rel_error

E1 = np.array([1.0, 0.0])
E2 = np.array([0.0, 1.0])


def _run(task, pretrained, cfg, seed=7):
    return adapt(
        task.unlabelled_target(),
        task.class_prompts(),
        pretrained.image_encoder,
        pretrained.text_encoder,
        cfg,
        task.evaluator(),
        seed=seed,
    )


class TestScores:
    def test_zero_shot_self_match(self):
        text = np.stack([E1, E2])
        scores = zero_shot_scores(E1, text)
        assert scores[0] == 1.0
        assert np.argmax(scores) == 0

    def test_zero_shot_orthogonal(self):
        text = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_array_equal(zero_shot_scores(np.array([1.0, 0.0, 0.0]), text), 0.0)

    def test_zero_shot_dims(self):
        with pytest.raises(DimMismatch):
            zero_shot_scores(np.ones(3), np.ones((2, 2)))


class TestPseudoLabels:
    def test_st_argmax(self):
        text = np.array([[0.9, 0.0], [0.2, 0.0]])
        label = st_pseudo_label(E1, text, sample_index=5)
        assert (label.sample_index, label.label) == (5, 0)
        assert label.score == pytest.approx(0.9)

    def test_st_tie_goes_to_lowest(self):
        text = np.array([[0.5, 0.0], [0.5, 0.0]])
        assert st_pseudo_label(E1, text).label == 0

    def test_pest_product(self):
        text = np.array([[0.9, 0.0], [0.2, 0.0]])
        fused = np.array([[0.5, 0.0], [0.8, 0.0]])
        label = pest_pseudo_label(E1, text, fused)
        assert label.label == 0
        assert label.score == pytest.approx(0.45)

    def test_pest_tie_goes_to_text_similarity(self):
        text = np.array([[0.4, 0.0], [0.8, 0.0]])
        fused = np.array([[0.8, 0.0], [0.4, 0.0]])
        assert pest_pseudo_label(E1, text, fused).label == 1

    def test_pest_full_tie_goes_to_lowest(self):
        text = np.array([[0.5, 0.0], [0.5, 0.0], [0.1, 0.0]])
        fused = np.array([[0.5, 0.0], [0.5, 0.0], [0.1, 0.0]])
        assert pest_pseudo_label(E1, text, fused).label == 0

    def test_pest_clamps_negative_pairs(self):
        text = np.array([[-0.5, 0.0], [0.1, 0.0]])
        fused = np.array([[-0.9, 0.0], [0.2, 0.0]])
        assert pest_pseudo_label(E1, text, fused).label == 1
        assert pest_pseudo_label(E1, text, fused, raw_product=True).label == 0

    def test_pest_equals_st_when_fused_is_text(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(50, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        text = rng.normal(size=(5, 4))
        text /= np.linalg.norm(text, axis=1, keepdims=True)
        st, st_scores = st_pseudo_labels(z, text)
        pest, _ = pest_pseudo_labels(z, text, text)
        positive = st_scores >= 0
        np.testing.assert_array_equal(pest[positive], st[positive])

    def test_pest_equals_st_when_fused_sims_are_constant(self):
        # every fused centroid sits at the same positive angle to z
        z = np.array([[1.0, 0.0, 0.0]])
        text = np.array([[0.3, 0.9, 0.0], [0.7, 0.1, 0.0], [0.5, 0.0, 0.5]])
        fused = np.array([[0.6, 0.8, 0.0], [0.6, 0.0, 0.8], [0.6, -0.8, 0.0]])
        assert pest_pseudo_labels(z, text, fused)[0][0] == st_pseudo_labels(z, text)[0][0]

    def test_pest_shape_mismatch(self):
        with pytest.raises(DimMismatch):
            pest_pseudo_labels(np.ones((1, 2)), np.ones((3, 2)), np.ones((2, 2)))

    def test_vote(self):
        # class 0 wins on two of three prompt variants
        prompt_feats = np.stack(
            [np.stack([E1, E1, E2]), np.stack([E2, E2, E1])]
        )
        labels = vote_pseudo_labels(np.array([[1.0, 0.1]]), prompt_feats)
        assert labels.tolist() == [0]


class TestPestLoss:
    def test_closed_form(self):
        loss, _ = pest_loss(E1[None, :], np.stack([E1, E2]), np.array([0]), 1.0)
        assert loss == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-12)
        assert loss == pytest.approx(0.313262, abs=1e-6)

    def test_sharp_temperature(self):
        loss, _ = pest_loss(E1[None, :], np.stack([E1, E2]), np.array([0]), 1e-3)
        assert loss < 1e-300

    def test_accepts_pseudo_label_records(self):
        labels = [st_pseudo_label(E1, np.stack([E1, E2]))]
        loss, _ = pest_loss(E1[None, :], np.stack([E1, E2]), labels, 1.0)
        assert loss == pytest.approx(0.313262, abs=1e-6)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(3, 4))
        text = rng.normal(size=(5, 4))
        labels = np.array([0, 3, 4])
        _, grad = pest_loss(z, text, labels, 0.5)
        numeric = numeric_grad(lambda m: pest_loss(m, text, labels, 0.5)[0], z)
        assert rel_error(grad, numeric) <= 1e-5


class TestClassTextFeatures:
    def test_routing(self, small_task, pretrained):
        prompts = small_task.class_prompts()
        enc = pretrained.text_encoder
        canonical = class_text_features(enc, prompts, Mode.st)
        np.testing.assert_array_equal(canonical, encode_batch(enc, prompts.canonical))
        np.testing.assert_array_equal(class_text_features(enc, prompts, Mode.st_vpe), canonical)
        lpe = class_text_features(enc, prompts, Mode.pest)
        assert lpe.shape == canonical.shape
        assert not np.allclose(lpe, canonical)
        np.testing.assert_array_equal(class_text_features(enc, prompts, Mode.st_lpe), lpe)
        uniform = class_text_features(enc, prompts, Mode.baseline_uniform)
        np.testing.assert_allclose(np.linalg.norm(uniform, axis=1), 1.0)


class TestAdapt:
    def test_zero_shot_returns_encoder_unchanged(self, small_task, pretrained, adapt_cfg):
        result = _run(small_task, pretrained, adapt_cfg(Mode.zero_shot))
        assert result.image_encoder is pretrained.image_encoder
        assert len(result.metrics.rows) == 1
        assert result.bank is None

    def test_epochs_zero(self):
        with pytest.raises(ConfigError):
            AdaptConfig(epochs=0)
        with pytest.raises(ConfigError):
            adapt(None, None, None, None, AdaptConfig.model_construct(epochs=0, mode=Mode.pest), None)

    @pytest.mark.parametrize("mode", [m for m in Mode if m is not Mode.zero_shot])
    def test_every_mode_runs(self, small_task, pretrained, adapt_cfg, mode):
        text_before = pretrained.text_encoder.fingerprint()
        result = _run(small_task, pretrained, adapt_cfg(mode, epochs=1))
        assert pretrained.text_encoder.fingerprint() == text_before
        assert [r.epoch for r in result.metrics.rows] == [0, 1]
        assert result.image_encoder.fingerprint() != pretrained.image_encoder.fingerprint()
        assert (result.bank is not None) == mode.uses_vpe

    def test_epoch_zero_is_zero_shot(self, small_task, pretrained, adapt_cfg):
        result = _run(small_task, pretrained, adapt_cfg(Mode.st, epochs=1))
        first = result.metrics.rows[0]
        text = class_text_features(pretrained.text_encoder, small_task.class_prompts(), Mode.st)
        acc = evaluate(pretrained.image_encoder, text, small_task.unlabelled_target(), small_task.evaluator())
        assert first.target_accuracy == acc
        assert first.pseudo_label_accuracy == acc

    def test_deterministic(self, small_task, pretrained, adapt_cfg):
        a = _run(small_task, pretrained, adapt_cfg(Mode.pest))
        b = _run(small_task, pretrained, adapt_cfg(Mode.pest))
        assert a.metrics.to_frame().to_csv(index=False) == b.metrics.to_frame().to_csv(index=False)
        assert a.image_encoder.fingerprint() == b.image_encoder.fingerprint()

    def test_metrics_columns(self, small_task, pretrained, adapt_cfg):
        frame = _run(small_task, pretrained, adapt_cfg(Mode.pest)).metrics.to_frame()
        assert list(frame.columns) == ["epoch", "mode", "target_accuracy", "pseudo_label_accuracy", "mean_loss", "lr"]
        assert frame["mode"].eq("pest").all()
        assert frame["target_accuracy"].between(0.0, 1.0).all()
        assert (frame["mean_loss"] >= 0.0).all()

    def test_bank_centroids_are_unit(self, small_task, pretrained, adapt_cfg):
        bank = _run(small_task, pretrained, adapt_cfg(Mode.pest)).bank
        np.testing.assert_allclose(np.linalg.norm(bank.fused, axis=1), 1.0, atol=1e-12)

    def test_non_temporal_vpe_fuses_latest_centroid(self, small_task, pretrained, adapt_cfg):
        bank = _run(small_task, pretrained, adapt_cfg(Mode.st_vpe, lam=0.9)).bank
        for m, image in enumerate(bank.image):
            if image is None:
                continue
            fused = image + bank.text[m]
            np.testing.assert_allclose(bank.fused[m], fused / np.linalg.norm(fused), atol=1e-12)

    def test_vote_baseline_is_evaluated_by_vote(self, small_task, pretrained, adapt_cfg):
        result = _run(small_task, pretrained, adapt_cfg(Mode.baseline_vote, epochs=1))
        prompts = small_task.class_prompts()
        text = class_text_features(pretrained.text_encoder, prompts, Mode.baseline_vote)
        feats = selftrain.prompt_features(pretrained.text_encoder, prompts)
        acc = evaluate(
            pretrained.image_encoder, text, small_task.unlabelled_target(), small_task.evaluator(), feats
        )
        assert result.metrics.rows[0].target_accuracy == acc

    def test_numeric_failure_carries_position(self, small_task, pretrained, adapt_cfg, monkeypatch):
        real = selftrain.pest_loss
        calls = []

        def failing(*args, **kwargs):
            calls.append(1)
            if len(calls) > 1:
                raise ZeroNorm("injected")
            return real(*args, **kwargs)

        monkeypatch.setattr(selftrain, "pest_loss", failing)
        with pytest.raises(AdaptationError) as info:
            _run(small_task, pretrained, adapt_cfg(Mode.st))
        assert (info.value.epoch, info.value.batch) == (1, 0)
        assert isinstance(info.value.cause, ZeroNorm)

    def test_embed_dims_must_agree(self, small_task, pretrained, adapt_cfg):
        text = pretrained.text_encoder
        narrow = text.with_params(text.weight[:3], text.bias[:3])
        with pytest.raises(DimMismatch):
            adapt(
                small_task.unlabelled_target(),
                small_task.class_prompts(),
                pretrained.image_encoder,
                narrow,
                adapt_cfg(),
                small_task.evaluator(),
            )


class TestFirewall:
    def test_adapt_signature_has_no_labelled_inputs(self):
        params = inspect.signature(adapt).parameters
        assert params["target"].annotation is UnlabelledTarget
        assert params["prompts"].annotation is ClassPrompts
        assert all(p.annotation is not SyntheticTask for p in params.values())
        assert not any("label" in name for name in params)
