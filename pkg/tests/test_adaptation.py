"""Pipeline pieces: metric, source training, estimation, adaptation loop."""

import numpy as np
import pytest

from protoadapt import autodiff as ad
from protoadapt.adaptation import (
    ExperimentConfig,
    adapt_source_free,
    estimate_stage,
    evaluate_miou,
    pixel_embeddings,
    run_experiment,
    train_source,
    wasserstein_estimates,
)
from protoadapt.datasets import DomainSpec, gen_blobs, gen_grid_seg
from protoadapt.rng import Rng


def blob_config(**kw):
    base = dict(
        source_steps=300,
        adapt_steps=20,
        lr=3e-3,
        batch_source=16,
        batch_target=16,
        pseudo_batch=64,
        num_projections=25,
        tau_fit=0.5,
        tau_filter=0.5,
        encoder_hidden=(32, 16),
        neighborhood=False,
        seed=0,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def blob_splits(seed=0, n=300, shifted_target=True):
    spec = DomainSpec(kind="blobs", K=3, n_images=n, seed=seed)
    xs, ys = gen_blobs(spec, shifted=False)
    tgt_spec = DomainSpec(kind="blobs", K=3, n_images=n, seed=seed + 1)
    xt, _ = gen_blobs(tgt_spec, shifted=shifted_target)
    ev_spec = DomainSpec(kind="blobs", K=3, n_images=120, seed=seed + 2)
    xe, ye = gen_blobs(ev_spec, shifted=shifted_target)
    return xs, ys, xt, xe, ye


class TestMiou:
    def miou_of_maps(self, true, pred, K):
        # reimplementation oracle via per-class confusion counts
        ious = []
        for j in range(K):
            tp = np.sum((true == j) & (pred == j))
            fp = np.sum((true != j) & (pred == j))
            fn = np.sum((true == j) & (pred != j))
            if tp + fp + fn == 0:
                continue
            ious.append(tp / (tp + fp + fn))
        return float(np.mean(ious))

    def train_tiny(self):
        xs, ys, *_ = blob_splits()
        model, _ = train_source(blob_config(), xs, ys)
        return model

    def test_perfect_predictions_give_one(self):
        xs, ys, *_ = blob_splits()
        model, _ = train_source(blob_config(source_steps=600), xs, ys)
        from protoadapt.adaptation import predict_labels

        pred = predict_labels(model, xs)
        if not np.array_equal(pred, ys):
            pytest.skip("blob model did not reach 100% training accuracy")
        _, miou = evaluate_miou(model, xs, ys)
        assert miou == pytest.approx(1.0)

    def test_matches_confusion_matrix_oracle(self):
        model = self.train_tiny()
        xs, ys, *_ = blob_splits(seed=5)
        from protoadapt.adaptation import predict_labels

        pred = predict_labels(model, xs)
        iou, miou = evaluate_miou(model, xs, ys)
        assert miou == pytest.approx(
            self.miou_of_maps(ys.reshape(-1), pred.reshape(-1), model.K), abs=1e-12
        )

    def test_hand_case_half_overlap(self):
        # direct check of the arithmetic on a handmade confusion pattern:
        # class 0: tp=1 fp=2 fn=1 -> IoU 1/4; class 1: tp=0 -> IoU 0
        true = np.array([0, 0, 1, 1])
        pred = np.array([0, 1, 0, 0])
        assert self.miou_of_maps(true, pred, 2) == pytest.approx(0.125)
        # and evaluate_miou agrees when a model reproduces that pattern —
        # covered by the confusion-matrix oracle test above.


class TestTrainSource:
    def test_zero_steps_returns_init(self):
        xs, ys, *_ = blob_splits()
        cfg = blob_config(source_steps=0)
        model, losses = train_source(cfg, xs, ys)
        assert losses == []
        ref = ad.init_model(
            xs.shape[-1],
            3,
            embed_dim=cfg.embed_dim,
            encoder_hidden=cfg.encoder_hidden,
            rng=Rng(cfg.seed),
            neighborhood=cfg.neighborhood,
        )
        for a, b in zip(model.parameters(), ref.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_blobs_accuracy(self):
        xs, ys, *_ = blob_splits()
        model, losses = train_source(blob_config(source_steps=600), xs, ys)
        from protoadapt.adaptation import predict_labels

        acc = (predict_labels(model, xs) == ys).mean()
        assert acc >= 0.98
        assert losses[-1] < losses[0]

    def test_determinism(self):
        xs, ys, *_ = blob_splits()
        m1, l1 = train_source(blob_config(), xs, ys)
        m2, l2 = train_source(blob_config(), xs, ys)
        assert l1 == l2
        for a, b in zip(m1.parameters(), m2.parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_empty_source_rejected(self):
        with pytest.raises(ValueError):
            train_source(blob_config(), np.zeros((0, 1, 1, 3)), np.zeros((0, 1, 1)))


class TestEstimateStage:
    def test_counts_and_distances(self):
        xs, ys, *_ = blob_splits()
        cfg = blob_config(source_steps=600)
        model, _ = train_source(cfg, xs, ys)
        gmm, info = estimate_stage(model, xs, ys, cfg)
        assert gmm.K == 3
        assert info.n_pixels == xs.shape[0]
        assert info.support_counts.sum() > 0.8 * xs.shape[0]
        assert info.w_sp_exact >= 0 and info.w_sp_sliced >= 0
        assert 0.0 <= info.e_source <= 0.05

    def test_gmm_means_near_class_means(self):
        xs, ys, *_ = blob_splits()
        cfg = blob_config(source_steps=600)
        model, _ = train_source(cfg, xs, ys)
        gmm, _ = estimate_stage(model, xs, ys, cfg)
        emb = pixel_embeddings(model, xs)
        flat = ys.reshape(-1)
        for j in range(3):
            cls_mean = emb[flat == j].mean(axis=0)
            # confident-correct filtering keeps most points; means are close
            assert np.linalg.norm(gmm.mu[j] - cls_mean) < 0.5 * (
                np.linalg.norm(cls_mean) + 1.0
            )

    def test_pseudo_vs_source_distance_within_noise(self):
        # when pseudo draws mimic the source cloud, w_sp is small relative
        # to inter-class scale
        xs, ys, *_ = blob_splits()
        cfg = blob_config(source_steps=600)
        model, _ = train_source(cfg, xs, ys)
        _, info = estimate_stage(model, xs, ys, cfg)
        emb = pixel_embeddings(model, xs)
        spread = float(np.var(emb, axis=0).sum())
        assert info.w_sp_exact < 0.25 * spread


class TestWassersteinEstimates:
    def test_identical_clouds_near_zero(self):
        a = np.random.default_rng(0).normal(size=(200, 3))
        exact, sliced = wasserstein_estimates(a, a.copy(), Rng(1))
        # subsample pairs differ, so this is small but nonzero; the cloud's
        # own spread (~3) sets the scale
        assert 0 <= exact < 1.5 and 0 <= sliced < 1.5

    def test_translation_sensitivity(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(200, 3))
        b = a + 5.0
        exact, sliced = wasserstein_estimates(a, b, Rng(2))
        assert exact > 50 and sliced > 10

    def test_sliced_resampling_consistency(self):
        # two independent draws of the sliced estimate agree within a few SE
        rng = np.random.default_rng(2)
        a = rng.normal(size=(500, 3))
        b = rng.normal(size=(500, 3)) + 1.0
        vals = [wasserstein_estimates(a, b, Rng(10 + i))[1] for i in range(10)]
        se = np.std(vals) / np.sqrt(len(vals))
        assert abs(vals[0] - np.mean(vals)) < 5 * max(se, 1e-6) + 0.05 * np.mean(vals)


class TestAdaptation:
    def setup_run(self, **kw):
        cfg = blob_config(source_steps=600, **kw)
        xs, ys, xt, xe, ye = blob_splits()
        model, _ = train_source(cfg, xs, ys)
        gmm, info = estimate_stage(model, xs, ys, cfg)
        return cfg, model, gmm, xt

    def test_input_model_untouched(self):
        cfg, model, gmm, xt = self.setup_run()
        before = [p.data.copy() for p in model.parameters()]
        adapted, _ = adapt_source_free(model, gmm, xt, cfg)
        for p, b in zip(model.parameters(), before):
            np.testing.assert_array_equal(p.data, b)
        assert any(
            not np.array_equal(p.data, b)
            for p, b in zip(adapted.parameters(), before)
        )

    def test_report_record_count_and_decomposition(self):
        cfg, model, gmm, xt = self.setup_run(adapt_steps=15)
        _, report = adapt_source_free(model, gmm, xt, cfg)
        assert len(report.steps) == 15
        for step, ce, swd, total in report.steps:
            assert total == pytest.approx(ce + cfg.lambda_ * swd, abs=1e-5)
            assert ce >= 0 and swd >= 0

    def test_lambda_zero_pure_pseudo_ce(self):
        cfg, model, gmm, xt = self.setup_run(lambda_=0.0, adapt_steps=10)
        _, report = adapt_source_free(model, gmm, xt, cfg)
        for _, ce, swd, total in report.steps:
            assert total == pytest.approx(ce, abs=1e-6)

    def test_freeze_classifier(self):
        cfg, model, gmm, xt = self.setup_run(freeze_classifier=True, adapt_steps=10)
        adapted, _ = adapt_source_free(model, gmm, xt, cfg)
        ncls = len(model.classifier_layers)
        for (w1, b1), (w2, b2) in zip(model.classifier_layers, adapted.classifier_layers):
            np.testing.assert_array_equal(w1.data, w2.data)
            np.testing.assert_array_equal(b1.data, b2.data)
        changed = any(
            not np.array_equal(a[0].data, b[0].data)
            for a, b in zip(model.encoder_layers, adapted.encoder_layers)
        )
        assert changed

    def test_determinism(self):
        cfg, model, gmm, xt = self.setup_run(adapt_steps=10)
        m1, r1 = adapt_source_free(model, gmm, xt, cfg)
        m2, r2 = adapt_source_free(model, gmm, xt, cfg)
        assert r1.steps == r2.steps
        for a, b in zip(m1.parameters(), m2.parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_adapt_lr_override_limits_movement(self):
        cfg, model, gmm, xt = self.setup_run(adapt_steps=10)
        cfg2 = blob_config(source_steps=600, adapt_steps=10, adapt_lr=1e-5)
        m1, _ = adapt_source_free(model, gmm, xt, cfg)
        m2, _ = adapt_source_free(model, gmm, xt, cfg2)

        def displacement(adapted):
            return sum(
                float(np.abs(a.data - b.data).sum())
                for a, b in zip(adapted.parameters(), model.parameters())
            )

        # the tiny override moves parameters far less than the default lr
        assert displacement(m2) < 0.05 * displacement(m1)


class TestRunExperiment:
    def test_blobs_shifted_improves(self):
        cfg = blob_config(source_steps=600, adapt_steps=60, adapt_lr=1e-3)
        xs, ys, xt, xe, ye = blob_splits()
        res = run_experiment(cfg, xs, ys, xt, xe, ye)
        assert res.post_miou >= res.pre_miou - 0.02
        d = res.report.diagnostics.as_dict()
        for key, value in d.items():
            if key.startswith("w_") and np.isfinite(value):
                assert value >= 0.0, key
        assert np.isfinite(res.report.diagnostics.w_tp_pre_sliced)
        assert np.isfinite(res.report.diagnostics.w_tp_post_sliced)
        assert res.report.kept_fraction > 0.0

    def test_source_target_identity_distance_consistency(self):
        # with target == source, pre-adaptation target/pseudo distance should
        # be statistically the same as the stored source/pseudo distance
        cfg = blob_config(source_steps=600, adapt_steps=1)
        xs, ys, *_ = blob_splits()
        model, _ = train_source(cfg, xs, ys)
        gmm, info = estimate_stage(model, xs, ys, cfg)
        emb = pixel_embeddings(model, xs)
        from protoadapt.gmm import generate_pseudo_dataset

        n_pseudo = min(4096, emb.shape[0])  # same draw size as estimate_stage
        vals = []
        for i in range(10):
            pseudo = generate_pseudo_dataset(
                gmm, ad.classifier_probs_fn(model), n_pseudo, cfg.tau_filter, Rng(50 + i)
            )
            exact, _ = wasserstein_estimates(emb, pseudo.Z, Rng(80 + i))
            vals.append(exact)
        spread = np.std(vals)
        assert abs(info.w_sp_exact - np.mean(vals)) <= 4 * spread + 0.1 * np.mean(vals)
