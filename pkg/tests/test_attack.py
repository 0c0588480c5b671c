from dataclasses import replace

import numpy as np
import pytest
from gradcheck import check_gradients

from pointca import autodiff as ad
from pointca import campaign as cp
from pointca.attack import (
    LAMBDA_PRESETS,
    AttackConfig,
    AttackPair,
    attack_pair,
    budget_violation,
    classification_noise_baseline,
    geometry_loss,
    latent_loss,
    pair_seed,
    random_noise_baseline,
    run_pointca,
    transfer_evaluate,
)
from pointca.data import build_pair_manifest
from pointca.errors import InvalidConfig, ModelUntrained
from pointca.geometry import PointCloud, build_neighbor_profile
from pointca.metrics import chamfer
from pointca.models import Classifier, CompletionModel


@pytest.fixture(scope="module")
def tiny():
    m = CompletionModel(n_out=64, enc_hidden=16, feat=16, dec_hidden=32, seed=0)
    m.trained = True
    return m


@pytest.fixture(scope="module")
def clouds():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(48, 3)) * [1.0, 0.5, 0.2]
    tgt_gt = rng.normal(size=(64, 3))
    tgt_partial = tgt_gt[:40]
    return PointCloud(src), PointCloud(tgt_gt, kind="complete"), PointCloud(tgt_partial)


class TestConfig:
    def test_step_schedule(self):
        cfg = AttackConfig(base_step=0.01, decay_rate=0.7, decay_step=20)
        steps = [cfg.step_size(q) for q in range(200)]
        assert steps[0] == steps[19] == 0.01
        assert steps[20] == pytest.approx(0.007)
        assert all(b <= a for a, b in zip(steps, steps[1:]))
        assert len(set(steps)) == 10
        for q in range(200):
            assert steps[q] == steps[(q // 20) * 20]

    @pytest.mark.parametrize("kw", [dict(mode="blackbox"), dict(iterations=-1), dict(base_step=0.0),
                                    dict(decay_rate=0.0), dict(decay_rate=1.5), dict(decay_step=0),
                                    dict(lam=-1.0), dict(budget_kind="linf"), dict(latent_terms="x"),
                                    dict(k=1), dict(eta=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfig):
            AttackConfig(**kw).validate()

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(InvalidConfig):
            AttackConfig.from_dict({"eta": 2.0, "etaa": 3.0})
        assert AttackConfig.from_dict({"eta": 2.0}).eta == 2.0

    def test_lambda_presets(self):
        assert LAMBDA_PRESETS == {"PCN": 1000.0, "RFA": 20.0, "GRNet": 0.05, "VRCNet": 20.0}

    def test_pair_seed_depends_on_id_only(self):
        assert pair_seed(0, "a__b") == pair_seed(0, "a__b")
        assert pair_seed(0, "a__b") != pair_seed(0, "a__c")
        assert pair_seed(0, "a__b") != pair_seed(1, "a__b")


class TestLosses:
    def test_geometry_loss_matches_metric(self, tiny, clouds):
        src, tgt, _ = clouds
        loss = geometry_loss(tiny, ad.Tensor(src.points), tgt).item()
        assert abs(loss - chamfer(tiny.predict(src.points), tgt)) <= 1e-9

    def test_geometry_loss_zero_at_own_output(self, tiny, clouds):
        src = clouds[0]
        assert geometry_loss(tiny, ad.Tensor(src.points), tiny.predict(src.points)).item() == 0.0

    def test_geometry_loss_gradient(self, tiny, clouds):
        src, tgt, _ = clouds
        rng = np.random.default_rng(3)
        assert check_gradients(lambda t: geometry_loss(tiny, t[0], tgt), [src.points[:12]], rng) < 1e-4

    def test_latent_loss_zero_on_target(self, tiny, clouds):
        _, _, tp = clouds
        assert latent_loss(tiny, ad.Tensor(tp.points), tp, lam=20.0).item() == pytest.approx(0.0, abs=1e-12)

    def test_latent_terms(self, tiny, clouds):
        src, _, tp = clouds
        x = ad.Tensor(src.points)
        f_adv = tiny.encode(src.points).values
        f_tgt = tiny.encode(tp.points).values
        l2 = np.linalg.norm(f_adv - f_tgt)
        kl = ad.differentiable_kl(f_tgt, f_adv).item()
        assert latent_loss(tiny, x, tp, lam=0.0).item() == pytest.approx(l2, rel=1e-12)
        assert latent_loss(tiny, x, tp, lam=7.0, terms="l2").item() == pytest.approx(l2, rel=1e-12)
        assert latent_loss(tiny, x, tp, terms="kl").item() == pytest.approx(kl, rel=1e-12)
        assert latent_loss(tiny, x, tp, lam=7.0).item() == pytest.approx(l2 + 7.0 * kl, rel=1e-12)
        assert latent_loss(tiny, x, tp, lam=7.0).item() >= 0


class TestRunPointca:
    @pytest.mark.parametrize("kind", ["adaptive", "pointwise_l2", "channelwise_linf"])
    def test_budget_holds_after_every_iteration(self, tiny, clouds, kind):
        src, tgt, _ = clouds
        cfg = AttackConfig(iterations=30, eta=1.5, budget_kind=kind, eps=0.05, base_step=0.05, decay_step=5)
        seen = []

        def check(q, adv, delta, profile):
            assert budget_violation(delta, cfg, profile) <= 1e-9
            np.testing.assert_array_equal(adv, src.points + delta)
            seen.append(q)

        res = run_pointca(tiny, src, tgt, cfg, on_step=check)
        assert seen == list(range(30))
        assert len(res.loss_trace) == 30
        assert budget_violation(res.adversarial.points - src.points, cfg, res.extra["profile"]) <= 1e-9

    def test_profile_is_built_once_from_clean_cloud(self, tiny, clouds):
        src, tgt, _ = clouds
        cfg = AttackConfig(iterations=10, eta=2.5)
        profiles = []
        run_pointca(tiny, src, tgt, cfg, on_step=lambda q, a, d, p: profiles.append(p))
        clean = build_neighbor_profile(src, cfg.k, cfg.t, cfg.eta)
        assert all(p is profiles[0] for p in profiles)
        assert np.array_equal(profiles[-1].epsilon, clean.epsilon)

    def test_zero_iterations_returns_clipped_init(self, tiny, clouds):
        src, tgt, _ = clouds
        cfg = AttackConfig(iterations=0, eta=0.5, init_noise_scale=0.5, seed=4)
        res = run_pointca(tiny, src, tgt, cfg)
        rng = np.random.default_rng(4)
        init = rng.uniform(-0.5, 0.5, size=src.points.shape)
        eps = build_neighbor_profile(src, 8, 3.0, 0.5).epsilon
        norms = np.linalg.norm(init, axis=1)
        expected = init * np.minimum(1.0, eps / norms)[:, None]
        np.testing.assert_allclose(res.adversarial.points - src.points, expected, atol=1e-12)
        assert res.loss_trace == []

    def test_vanishing_budget_leaves_source_unchanged(self, tiny, clouds):
        src, tgt, _ = clouds
        res = run_pointca(tiny, src, tgt, AttackConfig(iterations=5, eta=1e-12))
        assert np.abs(res.adversarial.points - src.points).max() < 1e-9
        assert chamfer(tiny.predict(res.adversarial.points), tgt) == pytest.approx(
            chamfer(tiny.predict(src.points), tgt), abs=1e-8)

    def test_deterministic(self, tiny, clouds):
        src, tgt, _ = clouds
        cfg = AttackConfig(iterations=10, seed=3)
        a = run_pointca(tiny, src, tgt, cfg)
        b = run_pointca(tiny, src, tgt, cfg)
        assert a.adversarial.points.tobytes() == b.adversarial.points.tobytes()
        assert a.loss_trace == b.loss_trace

    def test_latent_mode_runs(self, tiny, clouds):
        src, _, tp = clouds
        res = run_pointca(tiny, src, tp, AttackConfig(mode="latent", iterations=15))
        assert len(res.loss_trace) == 15
        assert res.loss_trace[-1] <= res.loss_trace[0]

    def test_untrained_model_rejected(self, clouds):
        src, tgt, _ = clouds
        with pytest.raises(ModelUntrained):
            run_pointca(CompletionModel(n_out=16, enc_hidden=4, feat=4, dec_hidden=4), src, tgt, AttackConfig())

    def test_config_echo(self, tiny, clouds):
        src, tgt, _ = clouds
        cfg = AttackConfig(iterations=2)
        assert run_pointca(tiny, src, tgt, cfg).config_echo == cfg


class TestBaselines:
    def test_random_noise(self, clouds):
        src = clouds[0]
        cfg = AttackConfig(eta=1.5, seed=8)
        a = random_noise_baseline(src, cfg)
        b = random_noise_baseline(src, cfg)
        assert a.adversarial.points.tobytes() == b.adversarial.points.tobytes()
        assert budget_violation(a.adversarial.points - src.points, cfg, a.extra["profile"]) <= 1e-9
        c = random_noise_baseline(src, replace(cfg, seed=9))
        assert c.adversarial.points.tobytes() != a.adversarial.points.tobytes()

    def test_classification_baseline_budget(self, clouds):
        clf = Classifier(n_classes=3, enc_hidden=8, feat=8, head_hidden=8)
        clf.trained = True
        cfg = AttackConfig(iterations=5, eta=1.5)
        res = classification_noise_baseline(clf, clouds[0], 0, cfg)
        assert res.extra["goal_class"] in (1, 2)
        assert budget_violation(res.adversarial.points - clouds[0].points, cfg, res.extra["profile"]) <= 1e-9

    def test_classification_baseline_needs_trained_classifier(self, clouds):
        with pytest.raises(ModelUntrained):
            classification_noise_baseline(Classifier(n_classes=2), clouds[0], 0, AttackConfig())


@pytest.mark.slow
class TestOnTrainedModel:
    def test_loss_trend(self, completion_model, pairs):
        cfg = AttackConfig(iterations=60)
        decreased = [
            (lambda r: r.loss_trace[-1] < r.loss_trace[0])(
                run_pointca(completion_model, p.source_partial, p.target_gt, replace(cfg, seed=pair_seed(0, p.pair_id))))
            for p in pairs[:20]
        ]
        assert np.mean(decreased) >= 0.95

    def test_classification_baseline_fools_classifier(self, classifier, pairs):
        fooled = []
        seen = set()
        for p in pairs:
            if p.source_partial.points.tobytes() in seen:
                continue
            seen.add(p.source_partial.points.tobytes())
            truth = classifier.class_names.index(p.source_class)
            if classifier.predict(p.source_partial.points) != truth:
                continue
            res = classification_noise_baseline(classifier, p.source_partial, truth,
                                                AttackConfig(eta=5.0, seed=pair_seed(0, p.pair_id)))
            fooled.append(res.extra["predicted"] != truth)
            if len(fooled) == 15:
                break
        print(f"\nclassification baseline fooling rate {np.mean(fooled):.2f} over {len(fooled)} sources")
        assert np.mean(fooled) >= 0.8

    def test_attack_pair_and_self_transfer(self, completion_model, pairs):
        cfg = AttackConfig(iterations=20)
        subset = pairs[:3]
        results = [attack_pair(completion_model, p, replace(cfg, seed=pair_seed(0, p.pair_id))) for p in subset]
        mean_t_re = float(np.mean([r.metrics.t_re_cd for r in results]))
        assert transfer_evaluate(results, subset, completion_model) == mean_t_re
        for r, p in zip(results, subset):
            assert r.metrics.t_nre_cd == pytest.approx(r.metrics.t_re_cd / p.t_nre_denominator)
            assert r.metrics.t_re_emd > 0

    def test_random_method_scored(self, completion_model, pairs):
        p = pairs[0]
        res = attack_pair(completion_model, p, AttackConfig(), method="random", with_emd=False)
        assert res.metrics.t_re_emd == 0.0
        assert res.metrics.perturbation_budget_cd > 0
        with pytest.raises(InvalidConfig):
            attack_pair(completion_model, p, AttackConfig(), method="bogus")

    def test_toy_lambda_default_is_grid_best(self, completion_model, samples, dataset_root, tmp_path):
        # tuned on training-split pairs so the evaluation pairs stay untouched
        man = build_pair_manifest(samples, seed=1, limit=20, split="train", root=dataset_root)
        tuning = cp.load_pairs(man)
        cp.attach_denominators(man, tuning, completion_model)
        grid = (0.05, 1.0, 20.0, 1000.0)
        paths = cp.sweep(completion_model, tuning, AttackConfig(mode="latent"), "lam", grid, tmp_path)
        meds = {v: np.median([float(r["t_nre_cd"]) for r in cp.read_rows(p, cp.CAMPAIGN_COLUMNS)])
                for v, p in paths.items()}
        assert min(meds, key=meds.get) == AttackConfig().lam == LAMBDA_PRESETS["RFA"]

    def test_untrained_transfer_rejected(self, pairs):
        with pytest.raises(ModelUntrained):
            transfer_evaluate([], [], CompletionModel(n_out=8, enc_hidden=4, feat=4, dec_hidden=4))


def test_attack_pair_dataclass_defaults():
    p = AttackPair("x", PointCloud(np.zeros((3, 3))), PointCloud(np.zeros((3, 3))), PointCloud(np.zeros((3, 3))),
                   PointCloud(np.zeros((3, 3))))
    assert p.t_nre_denominator is None and p.s_nre_denominator is None
