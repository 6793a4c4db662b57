import math

import numpy as np
import pytest
import torch

from ropscreen.structure import MSAQNet
from ropscreen.training import (BalancedBagSampler, FusionMetaLearner, PlusMILClassifier, StructureClassifier,
                                cosine_lr, select_best_epoch)

SIZE = 64


@pytest.fixture(scope="module")
def toy_images():
    rng = np.random.default_rng(0)
    X = rng.random((24, SIZE, SIZE, 3)).astype(np.float32) * 0.2
    y = np.arange(24) % 4
    for i, c in enumerate(y):
        X[i, :, c * 16:(c + 1) * 16] += 0.6  # class-coded bright band
    return X, y, rng.normal(size=(24, 3)).astype(np.float32)


@pytest.fixture(scope="module")
def fitted(toy_images):
    X, y, x = toy_images
    return StructureClassifier(epochs=7, batch_size=8, warmup_freeze_epochs=5, augment=False,
                               lr_backbone=1e-3).fit(X, y, x, eval_set=(X, y, x))


class TestSchedule:
    def test_cosine_endpoints(self):
        assert cosine_lr(1e-3, 0, 100) == 1e-3
        assert cosine_lr(1e-3, 100, 100) == 0.0
        assert cosine_lr(1e-3, 100, 100, floor=1e-5) == pytest.approx(1e-5, abs=1e-18)
        assert cosine_lr(1.0, 50, 100) == pytest.approx(0.5, abs=1e-12)

    def test_head_rate_at_start(self):
        est = StructureClassifier()
        model = MSAQNet(input_size=SIZE)
        opt = est._build_optimizer(model)
        est._set_lrs(opt, 0, 300)
        rates = {g["name"]: g["lr"] for g in opt.param_groups}
        assert rates == {"head": 1e-3, "backbone": 1e-6}

    def test_update_norm_ratio_follows_group_rates(self):
        torch.manual_seed(0)
        est = StructureClassifier(weight_decay=0.0)
        model = MSAQNet(input_size=SIZE)
        opt = est._build_optimizer(model)
        before = [p.detach().clone() for p in model.parameters()]
        out = model(torch.rand(4, 3, SIZE, SIZE), torch.randn(4, 3))
        torch.nn.functional.cross_entropy(out.main_logits, torch.tensor([0, 1, 2, 3])).backward()
        opt.step()
        delta = {id(p): (p.detach() - b).abs().max().item() for p, b in zip(model.parameters(), before)}
        head = max(delta[id(p)] for p in model.head_parameters())
        back = max(delta[id(p)] for p in model.backbone_parameters())
        assert back / head == pytest.approx(1e-3, rel=0.05)


class TestStructureTraining:
    def test_backbone_frozen_through_warmup(self, fitted):
        digests = [d["backbone"] for d in fitted.param_digests_]
        assert len(set(digests[:5])) == 1
        assert digests[5] != digests[4]
        heads = [d["head"] for d in fitted.param_digests_]
        assert heads[0] != heads[1]

    def test_selection_rederived_from_history(self, fitted):
        assert select_best_epoch(fitted.history_) == fitted.best_epoch_
        assert len(fitted.history_) == 7

    def test_outputs(self, fitted, toy_images):
        X, _, x = toy_images
        proba = fitted.predict_proba(X[:5], x[:5])
        assert proba.shape == (5, 4)
        np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-9)

    def test_same_seed_same_trajectory(self, toy_images):
        X, y, x = toy_images
        runs = [StructureClassifier(epochs=2, batch_size=8, seed=3).fit(X[:12], y[:12], x[:12]) for _ in range(2)]
        assert [h["train_loss"] for h in runs[0].history_] == [h["train_loss"] for h in runs[1].history_]
        assert runs[0].param_digests_ == runs[1].param_digests_

    def test_length_mismatch(self, toy_images):
        X, y, x = toy_images
        with pytest.raises(ValueError):
            StructureClassifier(epochs=1).fit(X, y[:-1], x)


def test_select_best_epoch_tie_rules():
    hist = [{"epoch": 1, "clinical_score": 0.8, "val_loss": 0.5},
            {"epoch": 2, "clinical_score": 0.9, "val_loss": 0.7},
            {"epoch": 3, "clinical_score": 0.9, "val_loss": 0.4},
            {"epoch": 4, "clinical_score": 0.9, "val_loss": 0.4},
            {"epoch": 5, "clinical_score": None, "val_loss": None}]
    assert select_best_epoch(hist) == 3
    assert select_best_epoch([{"epoch": 1, "clinical_score": None}]) is None


class TestSampler:
    def test_balanced_fraction(self):
        labels = np.zeros(200, bool)
        labels[:15] = True
        draws = BalancedBagSampler(labels, 0.5, seed=0).draw(10_000)
        assert 0.48 <= labels[draws].mean() <= 0.52

    def test_same_seed_same_sequence(self):
        labels = np.arange(30) % 7 == 0
        a = BalancedBagSampler(labels, seed=4)
        b = BalancedBagSampler(labels, seed=4)
        for _ in range(3):
            np.testing.assert_array_equal(a.draw(16), b.draw(16))

    @pytest.mark.parametrize("p", [0.0, 1.0])
    def test_probability_range(self, p):
        with pytest.raises(ValueError):
            BalancedBagSampler([True, False], p)

    def test_no_positives_aborts(self):
        with pytest.raises(ValueError, match="no positive"):
            BalancedBagSampler(np.zeros(5, bool))
        with pytest.raises(ValueError, match="no positive"):
            PlusMILClassifier(epochs=1).fit(np.zeros((3, 2, 4, 32, 32), np.float32), [0, 0, 0])


def test_texture_fit_records_history_and_default_batch():
    assert PlusMILClassifier().batch_size == 4
    rng = np.random.default_rng(0)
    bags = rng.random((8, 3, 4, 32, 32)).astype(np.float32)
    y = np.array([1, 0, 0, 1, 0, 0, 1, 0], bool)
    bags[y, :, 3] += 1.0
    est = PlusMILClassifier(epochs=2, lr_backbone=1e-3).fit(bags, y, eval_set=(bags, y))
    assert est.w_pos_ == pytest.approx(5 / 3)
    assert select_best_epoch(est.history_) == est.best_epoch_
    logits, attn = est.forward_bags(bags)
    assert logits.shape == (8,) and attn.shape == (8, 3)
    np.testing.assert_allclose(attn.sum(1), 1.0, atol=1e-6)


def test_fusion_meta_learner_deterministic():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(40, 8))
    yd, yp = rng.integers(0, 4, 40), rng.integers(0, 2, 40)
    a = FusionMetaLearner(epochs=5, seed=1).fit(Z, yd, yp)
    b = FusionMetaLearner(epochs=5, seed=1).fit(Z, yd, yp)
    assert a.loss_curve_ == b.loss_curve_
    assert FusionMetaLearner().get_params()["epochs"] == 80 and FusionMetaLearner().lr == 1e-2
    diag, plus = a.predict_proba(Z)
    np.testing.assert_allclose(diag.sum(1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        a.fit(Z[:, :7], yd, yp)
    assert math.isfinite(a.loss_curve_[-1])
