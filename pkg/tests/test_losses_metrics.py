import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch.nn import functional as F

from oracles import auc_pairs, central_difference, kappa_textbook, relative_error
from ropscreen.losses import (FocalConfig, deep_supervision_loss, focal_loss, joint_fusion_loss, positive_weight,
                              weighted_bce)
from ropscreen.metrics import (EvalReport, auc_rank, binary_report, clinical_score, cohen_kappa, compute_metrics,
                               confusion_matrix)

LN2 = math.log(2.0)


class TestFocal:
    def test_severe_half_probability(self):
        p = torch.tensor([[0.2, 0.2, 0.5, 0.1]])
        assert focal_loss(p, torch.tensor([2])).item() == pytest.approx(5 * 0.25 * LN2, abs=1e-6)
        assert focal_loss(p, torch.tensor([2])).item() == pytest.approx(0.86643, abs=1e-5)

    def test_perfect_prediction_is_zero(self):
        assert focal_loss(torch.tensor([[0.0, 1.0, 0.0, 0.0]]), torch.tensor([1])).item() == 0.0

    def test_zero_probability_is_clamped(self):
        loss = focal_loss(torch.tensor([[1.0, 0.0, 0.0, 0.0]]), torch.tensor([3]))
        assert loss.item() == pytest.approx(-math.log(1e-8), rel=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_gamma_zero_unit_alpha_is_cross_entropy(self, seed):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(9, 4, generator=g, dtype=torch.float64) * 3
        y = torch.randint(4, (9,), generator=g)
        cfg = FocalConfig(0.0, (1.0, 1.0, 1.0, 1.0))
        ours = focal_loss(torch.softmax(logits, -1), y, cfg)
        assert abs(ours.item() - F.cross_entropy(logits, y).item()) < 1e-9

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FocalConfig(-1.0)
        with pytest.raises(ValueError):
            FocalConfig(2.0, (1.0, 0.0, 1.0, 1.0))
        with pytest.raises(ValueError):
            focal_loss(torch.full((1, 3), 1 / 3), torch.tensor([0]))


class TestDeepSupervision:
    def test_equal_heads_give_1_4(self):
        logits = torch.randn(5, 4)
        y = torch.randint(4, (5,))
        ell = focal_loss(torch.softmax(logits, -1), y)
        total = deep_supervision_loss(logits, [logits, logits], y)
        assert total.item() == pytest.approx(1.4 * ell.item(), rel=1e-6)

    def test_no_aux_or_zero_lambda(self):
        logits, y = torch.randn(5, 4), torch.randint(4, (5,))
        main = focal_loss(torch.softmax(logits, -1), y)
        assert deep_supervision_loss(logits, None, y).item() == main.item()
        assert deep_supervision_loss(logits, [torch.randn(5, 4)] * 2, y, lam=0.0).item() == main.item()
        perfect = torch.nn.functional.one_hot(y, 4).float() * 100
        assert deep_supervision_loss(logits, [perfect, perfect], y).item() == pytest.approx(main.item(), abs=1e-7)


class TestBCE:
    def test_hand_values(self):
        assert weighted_bce(torch.tensor([0.0]), torch.tensor([0])).item() == pytest.approx(LN2, abs=1e-7)
        assert weighted_bce(torch.tensor([0.0]), torch.tensor([1]), 3.0).item() == pytest.approx(3 * LN2, abs=1e-6)
        assert weighted_bce(torch.tensor([200.0]), torch.tensor([1])).item() == 0.0
        assert math.isfinite(weighted_bce(torch.tensor([-500.0]), torch.tensor([1])).item())

    def test_positive_weight(self):
        assert positive_weight([1, 0, 0, 0]) == 3.0
        with pytest.raises(ValueError):
            positive_weight([0, 0])
        with pytest.raises(ValueError):
            weighted_bce(torch.zeros(1), torch.zeros(1), 0.0)


class TestJoint:
    def test_components_add(self):
        diag = torch.tensor([[100.0, 0.0, 0.0, 0.0]])
        assert joint_fusion_loss(diag, torch.tensor([0]), torch.tensor([0.0]), torch.tensor([1.0])).item() \
            == pytest.approx(LN2, abs=1e-6)
        assert joint_fusion_loss(diag, torch.tensor([0]), torch.tensor([100.0]), torch.tensor([1.0])).item() \
            == pytest.approx(0.0, abs=1e-6)
        d, yd = torch.randn(3, 4), torch.randint(4, (3,))
        p, yp = torch.randn(3), torch.randint(2, (3,)).float()
        expected = F.cross_entropy(d, yd) + F.binary_cross_entropy_with_logits(p, yp)
        assert joint_fusion_loss(d, yd, p, yp).item() == pytest.approx(expected.item(), abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    y = torch.tensor(rng.integers(0, 4, 6))
    yb = torch.tensor(rng.integers(0, 2, 6))
    z0, b0 = rng.normal(size=(6, 4)), rng.normal(size=6)

    def focal_np(z):
        with torch.no_grad():
            return float(focal_loss(torch.softmax(torch.as_tensor(z), -1), y))

    def bce_np(b):
        with torch.no_grad():
            return float(weighted_bce(torch.as_tensor(b), yb, 2.5))

    z = torch.tensor(z0, requires_grad=True)
    focal_loss(torch.softmax(z, -1), y).backward()
    assert relative_error(z.grad.numpy(), central_difference(focal_np, z0, eps=1e-5)) < 1e-6
    b = torch.tensor(b0, requires_grad=True)
    weighted_bce(b, yb, 2.5).backward()
    assert relative_error(b.grad.numpy(), central_difference(bce_np, b0, eps=1e-5)) < 1e-6


class TestMetrics:
    def test_clinical_score(self):
        assert clinical_score(1.0, 1.0) == 1.0 and clinical_score(0.0, 0.0) == 0.0
        assert clinical_score(0.922, 0.803) == pytest.approx(0.8625, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_clinical_score_bounds(self, a, b):
        assert 0.0 <= clinical_score(a, b) <= 1.0

    def test_auc_example(self):
        assert auc_rank([1, 1, 0, 1, 0, 0], [0.9, 0.8, 0.7, 0.6, 0.5, 0.4]) == pytest.approx(8 / 9, abs=1e-12)

    def test_auc_matches_pair_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            n = int(rng.integers(2, 13))
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = rng.integers(0, 5, n) / 4.0  # coarse grid forces ties
            assert auc_rank(labels, scores) == pytest.approx(auc_pairs(labels, scores), abs=1e-12)

    def test_kappa_matches_textbook(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            y = rng.integers(0, 4, 30)
            p = np.where(rng.random(30) < 0.6, y, rng.integers(0, 4, 30))
            cm = confusion_matrix(y, p, 4)
            assert cohen_kappa(cm) == pytest.approx(kappa_textbook(cm), abs=1e-12)

    def test_kappa_at_chance(self):
        cm = np.array([[10, 10], [10, 10]])
        assert cohen_kappa(cm) == 0.0

    def test_perfect_predictions(self):
        y = np.array([0, 1, 2, 3, 2, 1])
        scores = np.eye(4)[y]
        rep = compute_metrics(y, y, scores, n_classes=4)
        assert rep.kappa == 1.0 and rep.macro_f1 == 1.0 and rep.macro_auc == 1.0 and rep.clinical_score == 1.0
        assert all(v == 1.0 for v in rep.sensitivity + rep.specificity + rep.precision)

    def test_absent_class_reported_as_none(self):
        y = np.array([0, 0, 1, 1, 2])
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            rep = compute_metrics(y, y, n_classes=4)
        assert any("absent" in str(x.message) for x in w)
        assert rep.f1[3] is None and rep.macro_f1 == 1.0

    def test_per_class_against_hand_counts(self):
        y = [0, 0, 1, 1, 2, 2, 3, 3]
        p = [0, 1, 1, 1, 2, 0, 3, 2]
        rep = compute_metrics(y, p, n_classes=4)
        assert rep.sensitivity == [0.5, 1.0, 0.5, 0.5]
        assert rep.precision[1] == pytest.approx(2 / 3, abs=1e-12)
        assert rep.f1[0] == pytest.approx(0.5, abs=1e-12)  # tp 1, fp 1, fn 1
        assert rep.clinical_score == pytest.approx(0.5 * (rep.macro_f1 + 0.5), abs=1e-12)

    def test_binary_report_and_serialization(self):
        rep = binary_report([0, 0, 1, 1], [0.1, 0.6, 0.7, 0.9])
        assert rep.target_class == 1 and rep.sensitivity[1] == 1.0
        assert rep.auc[1] == 1.0
        back = EvalReport.from_dict(__import__("json").loads(rep.to_json()))
        assert back == rep
