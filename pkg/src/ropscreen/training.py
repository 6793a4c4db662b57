"""Estimators for the three training stages and their shared optimization plumbing."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import random
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .fusion import FUSION_DIM, FusionMLP
from .losses import FocalConfig, deep_supervision_loss, joint_fusion_loss, positive_weight, weighted_bce
from .metrics import EvalReport, binary_report, compute_metrics
from .structure import MSAQNet, StructureOutput
from .texture import VascuMIL

log = logging.getLogger(__name__)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    """Single-cycle cosine annealing from ``base`` at step 0 to ``floor`` at step ``total``."""
    if total <= 0:
        return base
    t = min(max(step, 0), total)
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * t / total))


def parameter_digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _gather(X, idx) -> np.ndarray:
    if isinstance(X, np.ndarray):
        return X[np.asarray(idx)]
    return np.stack([np.asarray(X[int(i)]) for i in idx])


def _to_tensor(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


def _rotate(x: torch.Tensor, degrees: torch.Tensor) -> torch.Tensor:
    theta = degrees * math.pi / 180.0
    cos, sin = torch.cos(theta), torch.sin(theta)
    zero = torch.zeros_like(cos)
    mat = torch.stack([torch.stack([cos, -sin, zero], -1), torch.stack([sin, cos, zero], -1)], 1)
    grid = torch.nn.functional.affine_grid(mat, list(x.shape), align_corners=False)
    return torch.nn.functional.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def augment_images(x: torch.Tensor, gen: torch.Generator, max_degrees: float = 15.0) -> torch.Tensor:
    """Random horizontal/vertical flips and rotation in ``[-max_degrees, max_degrees]``."""
    b = x.shape[0]
    hf = torch.rand(b, generator=gen) < 0.5
    vf = torch.rand(b, generator=gen) < 0.5
    deg = (torch.rand(b, generator=gen) * 2 - 1) * max_degrees
    x = torch.where(hf[:, None, None, None], x.flip(-1), x)
    x = torch.where(vf[:, None, None, None], x.flip(-2), x)
    return _rotate(x, deg) if max_degrees > 0 else x


def augment_patches(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Independent flips per patch; ``x`` is ``(B, N, C, p, p)``."""
    shape = x.shape[:2]
    hf = (torch.rand(shape, generator=gen) < 0.5)[..., None, None, None]
    vf = (torch.rand(shape, generator=gen) < 0.5)[..., None, None, None]
    x = torch.where(hf, x.flip(-1), x)
    return torch.where(vf, x.flip(-2), x)


class BalancedBagSampler:
    """Draws positive bags with a fixed probability regardless of their base rate."""

    def __init__(self, labels, positive_probability: float = 0.5, seed: int = 0):
        if not 0.0 < positive_probability < 1.0:
            raise ValueError("positive_probability must lie in (0, 1)")
        labels = np.asarray(labels).astype(bool)
        self.positives = np.flatnonzero(labels)
        self.negatives = np.flatnonzero(~labels)
        if self.positives.size == 0:
            raise ValueError("no positive bags in the training fold; cannot balance the sampler")
        if self.negatives.size == 0:
            raise ValueError("no negative bags in the training fold; cannot balance the sampler")
        self.p = positive_probability
        self.rng = np.random.default_rng(seed)

    def draw(self, n: int) -> np.ndarray:
        pick_pos = self.rng.random(n) < self.p
        pos = self.rng.choice(self.positives, n)
        neg = self.rng.choice(self.negatives, n)
        return np.where(pick_pos, pos, neg)


class _StreamEstimator(BaseEstimator, ClassifierMixin):
    """Shared two-group AdamW loop with backbone warm-up freeze and checkpoint selection."""

    def _build_optimizer(self, model):
        return torch.optim.AdamW([
            {"params": model.head_parameters(), "lr": self.lr_head, "name": "head"},
            {"params": model.backbone_parameters(), "lr": self.lr_backbone, "name": "backbone"},
        ], weight_decay=self.weight_decay)

    def _set_lrs(self, opt, step: int, total: int) -> None:
        for g in opt.param_groups:
            base = self.lr_head if g["name"] == "head" else self.lr_backbone
            g["lr"] = cosine_lr(base, step, total)

    @staticmethod
    def _set_backbone_trainable(model, flag: bool) -> None:
        for p in model.backbone_parameters():
            p.requires_grad_(flag)

    def _step(self, model, opt, loss, epoch, step):
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss ({loss.item()}) at epoch {epoch}, step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if self.grad_clip:
            torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.grad is not None], self.grad_clip)
        opt.step()

    def _record_epoch(self, epoch, losses, report: EvalReport | None, model, val_loss: float | None = None):
        cs = report.clinical_score if report is not None else None
        self.history_.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "clinical_score": cs,
            "val_loss": val_loss,
            "report": report.to_dict() if report is not None else None,
        })
        self.param_digests_.append({
            "epoch": epoch,
            "backbone": parameter_digest(model.backbone_parameters()),
            "head": parameter_digest(model.head_parameters()),
        })
        if self.verbose:
            log.info("epoch %d loss %.4f cs %s", epoch, self.history_[-1]["train_loss"], cs)
        key = None if cs is None else (cs, -val_loss if val_loss is not None else 0.0)
        if key is None or self._best_key is None or key > self._best_key:
            self._best_key = key
            self.best_epoch_ = epoch
            self._best_state = copy.deepcopy(model.state_dict())

    def _finish(self, model):
        model.load_state_dict(self._best_state)
        model.eval()
        del self._best_state
        self.model_ = model
        return self


class StructureClassifier(_StreamEstimator):
    """Four-class broad-diagnosis classifier over 3-channel structure images.

    ``X`` is an indexable of ``(H, W, 3)`` float images in [0, 1] (a numpy
    array or any sequence-like store); the clinical vectors ride along as
    ``x_tab`` ``(n, 3)``.
    """

    def __init__(self, backbone="tiny", pretrained=False, epochs=30, batch_size=16, lr_head=1e-3,
                 lr_backbone=1e-6, warmup_freeze_epochs=5, weight_decay=1e-4, grad_clip=5.0,
                 aux_lambda=0.2, gamma_focus=2.0, alpha_weights=(0.5, 1.0, 5.0, 1.0), use_metadata=True,
                 augment=True, metadata_noise=0.0, metadata_dropout=0.0, freeze_affine=False, seed=0,
                 verbose=False):
        self.backbone = backbone
        self.pretrained = pretrained
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_head = lr_head
        self.lr_backbone = lr_backbone
        self.warmup_freeze_epochs = warmup_freeze_epochs
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.aux_lambda = aux_lambda
        self.gamma_focus = gamma_focus
        self.alpha_weights = alpha_weights
        self.use_metadata = use_metadata
        self.augment = augment
        self.metadata_noise = metadata_noise
        self.metadata_dropout = metadata_dropout
        self.freeze_affine = freeze_affine
        self.seed = seed
        self.verbose = verbose

    def _new_model(self, input_size: int) -> MSAQNet:
        return MSAQNet(self.backbone, self.pretrained, input_size=input_size,
                       use_metadata=self.use_metadata, freeze_affine=self.freeze_affine)

    @staticmethod
    def _images(batch: np.ndarray) -> torch.Tensor:
        if batch.ndim != 4 or batch.shape[-1] != 3:
            raise ValueError(f"expected (B, H, W, 3) images, got {batch.shape}")
        return _to_tensor(batch).permute(0, 3, 1, 2).contiguous()

    def fit(self, X, y, x_tab, eval_set=None):
        y = np.asarray(y, dtype=np.int64)
        x_tab = np.asarray(x_tab, dtype=np.float32)
        n = len(y)
        if len(X) != n or x_tab.shape != (n, 3):
            raise ValueError("X, y and x_tab disagree in length, or x_tab is not (n, 3)")
        torch.manual_seed(self.seed)
        gen = torch.Generator().manual_seed(self.seed)
        model = self._new_model(int(np.asarray(X[0]).shape[0]))
        opt = self._build_optimizer(model)
        focal = FocalConfig(self.gamma_focus, tuple(self.alpha_weights))
        steps = math.ceil(n / self.batch_size)
        total = steps * self.epochs
        self.classes_ = np.arange(4)
        self.history_, self.param_digests_ = [], []
        self.best_epoch_, self._best_key = None, None
        step = 0
        for epoch in range(1, self.epochs + 1):
            self._set_backbone_trainable(model, epoch > self.warmup_freeze_epochs)
            model.train()
            order = torch.randperm(n, generator=gen).numpy()
            losses = []
            for s in range(steps):
                idx = order[s * self.batch_size:(s + 1) * self.batch_size]
                xb = self._images(_gather(X, idx))
                if self.augment:
                    xb = augment_images(xb, gen)
                tb = torch.from_numpy(x_tab[idx])
                if self.metadata_noise > 0:
                    tb = tb + self.metadata_noise * torch.randn(tb.shape, generator=gen)
                if self.metadata_dropout > 0:
                    tb = tb * (torch.rand(len(tb), 1, generator=gen) >= self.metadata_dropout)
                self._set_lrs(opt, step, total)
                out = model(xb, tb)
                loss = deep_supervision_loss(out.main_logits, out.aux_logits, torch.from_numpy(y[idx]),
                                             self.aux_lambda, focal)
                self._step(model, opt, loss, epoch, s)
                losses.append(loss.item())
                step += 1
            report = val_loss = None
            if eval_set is not None:
                self.model_ = model
                report, val_loss = self._evaluate(*eval_set)
            self._record_epoch(epoch, losses, report, model, val_loss)
        self._set_backbone_trainable(model, True)
        return self._finish(model)

    def _evaluate(self, X, y, x_tab) -> tuple[EvalReport, float]:
        """Validation report and unweighted cross-entropy (the tie-breaker between equal scores)."""
        y = np.asarray(y)
        probs = _softmax(self.decision_function(X, x_tab))
        nll = float(-np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300))))
        return compute_metrics(y, probs.argmax(1), probs, n_classes=4, target_class=2), nll

    @torch.no_grad()
    def forward_output(self, X, x_tab, batch_size: int = 32) -> list[StructureOutput]:
        check_is_fitted(self, "model_")
        was = self.model_.training
        self.model_.eval()
        x_tab = np.asarray(x_tab, dtype=np.float32).reshape(-1, 3)
        outs = []
        for i in range(0, len(x_tab), batch_size):
            idx = np.arange(i, min(i + batch_size, len(x_tab)))
            outs.append(self.model_(self._images(_gather(X, idx)), torch.from_numpy(x_tab[idx])))
        self.model_.train(was)
        return outs

    def decision_function(self, X, x_tab, batch_size: int = 32) -> np.ndarray:
        outs = self.forward_output(X, x_tab, batch_size)
        return torch.cat([o.main_logits for o in outs]).double().numpy()

    def predict_proba(self, X, x_tab) -> np.ndarray:
        return _softmax(self.decision_function(X, x_tab))

    def predict(self, X, x_tab) -> np.ndarray:
        return self.decision_function(X, x_tab).argmax(1)


class PlusMILClassifier(_StreamEstimator):
    """Bag-level plus classifier. ``bags`` is an indexable of ``(N, C, p, p)`` arrays."""

    def __init__(self, backbone="tiny", pretrained=False, epochs=30, batch_size=4, lr_head=1e-3,
                 lr_backbone=1e-6, warmup_freeze_epochs=0, weight_decay=1e-4, grad_clip=5.0,
                 positive_probability=0.5, dropout=0.2, augment=True, freeze_affine=False,
                 phi_activation="gelu", seed=0, verbose=False):
        self.backbone = backbone
        self.pretrained = pretrained
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_head = lr_head
        self.lr_backbone = lr_backbone
        self.warmup_freeze_epochs = warmup_freeze_epochs
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.positive_probability = positive_probability
        self.dropout = dropout
        self.augment = augment
        self.freeze_affine = freeze_affine
        self.phi_activation = phi_activation
        self.seed = seed
        self.verbose = verbose

    def _new_model(self, in_channels: int) -> VascuMIL:
        return VascuMIL(self.backbone, self.pretrained, in_channels=in_channels, dropout=self.dropout,
                        freeze_affine=self.freeze_affine, phi_activation=self.phi_activation)

    def fit(self, bags, y, eval_set=None):
        y = np.asarray(y).astype(bool)
        if len(bags) != len(y):
            raise ValueError("bags and y disagree in length")
        sampler = BalancedBagSampler(y, self.positive_probability, self.seed)
        self.w_pos_ = positive_weight(y)
        torch.manual_seed(self.seed)
        gen = torch.Generator().manual_seed(self.seed + 1)
        self.in_channels_ = int(np.asarray(bags[0]).shape[1])
        model = self._new_model(self.in_channels_)
        opt = self._build_optimizer(model)
        steps = math.ceil(len(y) / self.batch_size)
        total = steps * self.epochs
        self.classes_ = np.array([False, True])
        self.history_, self.param_digests_ = [], []
        self.best_epoch_, self._best_key = None, None
        step = 0
        for epoch in range(1, self.epochs + 1):
            self._set_backbone_trainable(model, epoch > self.warmup_freeze_epochs)
            model.train()
            losses = []
            for s in range(steps):
                idx = sampler.draw(self.batch_size)
                xb = _to_tensor(_gather(bags, idx))
                if self.augment:
                    xb = augment_patches(xb, gen)
                self._set_lrs(opt, step, total)
                logits, _ = model(xb)
                loss = weighted_bce(logits, torch.from_numpy(y[idx].astype(np.float32)), self.w_pos_)
                self._step(model, opt, loss, epoch, s)
                losses.append(loss.item())
                step += 1
            report = val_loss = None
            if eval_set is not None:
                self.model_ = model
                yv = np.asarray(eval_set[1]).astype(int)
                z = self.decision_function(eval_set[0])
                report = binary_report(yv, _sigmoid(z))
                val_loss = float(np.mean(np.logaddexp(0.0, np.where(yv == 1, -z, z))))
            self._record_epoch(epoch, losses, report, model, val_loss)
        self._set_backbone_trainable(model, True)
        return self._finish(model)

    @torch.no_grad()
    def forward_bags(self, bags, batch_size: int = 4):
        """Logits ``(n,)`` and attention ``(n, N)`` in eval mode."""
        check_is_fitted(self, "model_")
        was = self.model_.training
        self.model_.eval()
        logits, attn = [], []
        for i in range(0, len(bags), batch_size):
            idx = np.arange(i, min(i + batch_size, len(bags)))
            lg, a = self.model_(_to_tensor(_gather(bags, idx)))
            logits.append(lg)
            attn.append(a)
        self.model_.train(was)
        return torch.cat(logits).double().numpy(), torch.cat(attn).double().numpy()

    def decision_function(self, bags) -> np.ndarray:
        return self.forward_bags(bags)[0]

    def predict_proba(self, bags) -> np.ndarray:
        p = _sigmoid(self.decision_function(bags))
        return np.stack([1 - p, p], axis=1)

    def predict(self, bags) -> np.ndarray:
        return self.decision_function(bags) > 0


class FusionMetaLearner(BaseEstimator, ClassifierMixin):
    """Shallow two-headed MLP over 8-wide logit bundles, trained with CE + BCE."""

    def __init__(self, hidden=32, epochs=80, batch_size=32, lr=1e-2, weight_decay=1e-4, seed=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, Z, y_diag, y_plus):
        Z = np.asarray(Z, dtype=np.float32)
        if Z.ndim != 2 or Z.shape[1] != FUSION_DIM:
            raise ValueError(f"expected (n, {FUSION_DIM}) fusion vectors, got {Z.shape}")
        yd = torch.from_numpy(np.asarray(y_diag, dtype=np.int64))
        yp = torch.from_numpy(np.asarray(y_plus, dtype=np.float32))
        Zt = torch.from_numpy(Z)
        torch.manual_seed(self.seed)
        gen = torch.Generator().manual_seed(self.seed)
        model = FusionMLP(FUSION_DIM, self.hidden)
        opt = torch.optim.AdamW(model.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        n = len(Z)
        steps = math.ceil(n / self.batch_size)
        total = steps * self.epochs
        self.loss_curve_ = []
        step = 0
        model.train()
        for epoch in range(self.epochs):
            order = torch.randperm(n, generator=gen)
            running = []
            for s in range(steps):
                idx = order[s * self.batch_size:(s + 1) * self.batch_size]
                for g in opt.param_groups:
                    g["lr"] = cosine_lr(self.lr, step, total)
                diag, plus = model(Zt[idx])
                loss = joint_fusion_loss(diag, yd[idx], plus, yp[idx])
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"non-finite fusion loss at epoch {epoch + 1}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                running.append(loss.item())
                step += 1
            self.loss_curve_.append(float(np.mean(running)))
        model.eval()
        self.model_ = model
        self.classes_ = np.arange(4)
        return self

    @torch.no_grad()
    def predict_proba(self, Z):
        """``(diag posterior (n, 4), plus posterior (n,))``."""
        check_is_fitted(self, "model_")
        diag, plus = self.model_.predict_proba(torch.as_tensor(np.asarray(Z, dtype=np.float32)))
        return diag.double().numpy(), plus.double().numpy()

    def predict(self, Z):
        diag, plus = self.predict_proba(Z)
        return diag.argmax(1), plus >= 0.5


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def select_best_epoch(history: Sequence[dict]) -> int | None:
    """Re-derive the selected epoch from saved per-epoch records.

    Highest clinical score wins; equal scores go to the lower validation loss,
    then to the earlier epoch.
    """
    best, best_key = None, None
    for rec in history:
        cs = rec.get("clinical_score")
        if cs is None:
            continue
        vl = rec.get("val_loss")
        key = (cs, -vl if vl is not None else 0.0)
        if best_key is None or key > best_key:
            best, best_key = rec["epoch"], key
    return best
