"""Run-directory orchestration for the staged pipeline.

Layout under ``run_dir``::

    config.yaml              resolved configuration
    split.json               patient-exclusive split
    cache/index.jsonl        one record per image (labels, metadata, cached array files)
    cache/structure/*.npy    structure-resolution images
    cache/bags/*.npy         texture bags (N, 4, p, p) float16
    structure/fold{k}.pt     checkpoints, with fold{k}_history.jsonl per-epoch reports
    texture/fold{k}.pt
    logits.jsonl             logit bundles with provenance
    fusion/model.pt          final meta-learner; fusion/validation.json
    eval/report.json         held-out test reports
"""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path

import numpy as np
import torch

from . import io
from .config import RunConfig, save_config
from .data import (CLASS_NAMES, ImageItem, MetadataScaler, SplitAssignment, build_bag, check_patient_exclusive,
                   flatten, load_cohort, make_splits)
from .fusion import build_fusion_vector
from .metrics import binary_report, compute_metrics
from .preprocess import preprocess_image
from .training import (FusionMetaLearner, PlusMILClassifier, StructureClassifier, _sigmoid, _softmax,
                       seed_everything)
from .vesselness import VesselnessConfig, compute_vmap

log = logging.getLogger(__name__)


class MissingInputError(FileNotFoundError):
    """A stage's prerequisite artifact is absent."""


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"missing {path} ({hint})")
    return path


def image_key(image_id: str) -> str:
    return image_id.replace("/", "__").rsplit(".", 1)[0]


def image_seed(seed: int, image_id: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{image_id}".encode()).digest()[:4], "little")


def vessel_config(cfg: RunConfig) -> VesselnessConfig:
    v = cfg.vesselness
    return VesselnessConfig(tuple(float(s) for s in v.scales), float(v.beta),
                            None if v.c is None else float(v.c), bool(v.dark_vessels))


def _preprocess(cfg: RunConfig, raw, target: int, source_id: str):
    p = cfg.preprocess
    return preprocess_image(raw, target, source_id=source_id, threshold=p.threshold, gamma=p.gamma,
                            clahe_clip=p.clahe_clip, clahe_tiles=tuple(p.clahe_tiles), clahe_mode=p.clahe_mode)


def texture_inputs(cfg: RunConfig, raw, source_id: str = ""):
    """Cleaned texture image, its vessel map and the bag built from them."""
    clean = _preprocess(cfg, raw, cfg.preprocess.texture_size, source_id)
    vcfg = vessel_config(cfg)
    vmap = compute_vmap(clean.pixels, vcfg, clean.mask)
    vmap_fn = (lambda rgb: compute_vmap(rgb, vcfg).values) if cfg.vesselness.mode == "patch" else None
    bag = build_bag(clean.pixels, vmap.values, cfg.bags.n_patches, cfg.bags.patch_size,
                    seed=image_seed(cfg.seed, source_id), stride=cfg.bags.stride, vmap_fn=vmap_fn)
    return clean, vmap, bag


class NpyStore:
    """Indexable view over per-item ``.npy`` files, optionally sliced to the first ``channels``."""

    def __init__(self, paths, channels: int | None = None):
        self.paths = [Path(p) for p in paths]
        self.channels = channels
        self._arrays = None

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        a = self._arrays[i] if self._arrays is not None else np.load(self.paths[i])
        return a[:, : self.channels] if self.channels is not None else a

    def preload(self, max_bytes: float = 2e9) -> "NpyStore":
        """Hold everything in memory when it fits the budget."""
        if self.paths:
            first = np.load(self.paths[0], mmap_mode="r")
            if first.nbytes * len(self.paths) <= max_bytes:
                self._arrays = [np.load(p) for p in self.paths]
        return self


class Run:
    """Accessors for one run directory."""

    def __init__(self, cfg: RunConfig, run_dir: str | Path | None = None):
        self.cfg = cfg
        self.root = Path(run_dir or cfg.run_dir)

    # -- paths
    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def ckpt(self, stream: str, fold: int) -> Path:
        return self.path(stream, f"fold{fold}.pt")

    def save_config(self) -> None:
        save_config(self.cfg, self.path("config.yaml"))

    # -- split
    def make_split(self) -> SplitAssignment:
        patients = load_cohort(self.cfg.data_root)
        split = make_splits(patients, self.cfg.seed, self.cfg.splits.n_folds, self.cfg.splits.test_fraction)
        check_patient_exclusive(split, [p.patient_id for p in patients])
        io.write_json(self.path("split.json"), split.to_dict())
        return split

    def split(self) -> SplitAssignment:
        return SplitAssignment.from_dict(io.read_json(_require(self.path("split.json"), "run `split` first")))

    # -- cache
    def _cache_digest(self) -> str:
        return hashlib.sha256(io.dumps({
            "cfg": self.cfg.digest("preprocess", "vesselness", "bags"),
            "seed": self.cfg.seed, "data_root": str(Path(self.cfg.data_root).resolve()),
        }).encode()).hexdigest()[:16]

    def build_cache(self) -> list[dict]:
        index_path = self.path("cache", "index.jsonl")
        digest = self._cache_digest()
        stamp = self.path("cache", "digest.txt")
        if index_path.exists() and stamp.exists() and stamp.read_text().strip() == digest:
            return list(io.read_jsonl(index_path))
        items = flatten(load_cohort(self.cfg.data_root))
        records = []
        for item in items:
            records.append(self._cache_item(item))
        io.write_jsonl(index_path, records)
        stamp.write_text(digest + "\n")
        return records

    def _cache_item(self, item: ImageItem) -> dict:
        raw = io.read_rgb(item.path)
        key = image_key(item.image_id)
        s = _preprocess(self.cfg, raw, self.cfg.preprocess.structure_size, item.image_id)
        spath = self.path("cache", "structure", f"{key}.npy")
        spath.parent.mkdir(parents=True, exist_ok=True)
        np.save(spath, s.pixels.astype(np.float32))
        _, vmap, bag = texture_inputs(self.cfg, raw, item.image_id)
        bpath = self.path("cache", "bags", f"{key}.npy")
        bpath.parent.mkdir(parents=True, exist_ok=True)
        np.save(bpath, bag.patches.astype(np.float16))
        return {
            "image_id": item.image_id, "patient_id": item.patient_id, "source": str(item.path), "label": item.label,
            "plus": item.plus, "raw_meta": [None if np.isnan(v) else v for v in item.raw_meta],
            "structure_file": str(spath.relative_to(self.root)), "bag_file": str(bpath.relative_to(self.root)),
            "coords": [list(c) for c in bag.coords], "fallback": bag.fallback,
            "pad_record": list(s.pad_record), "vmap_c": vmap.c_values,
        }

    def index(self) -> list[dict]:
        return list(io.read_jsonl(_require(self.path("cache", "index.jsonl"), "run a training stage to build it")))

    # -- per-subset data
    def subset(self, records, patients) -> list[dict]:
        keep = set(patients)
        return [r for r in records if r["patient_id"] in keep]

    def raw_meta(self, records) -> np.ndarray:
        return np.array([[np.nan if v is None else v for v in r["raw_meta"]] for r in records], dtype=np.float64)

    def structure_X(self, records) -> NpyStore:
        return NpyStore([self.path(r["structure_file"]) for r in records]).preload()

    def bags_X(self, records) -> NpyStore:
        ch = None if self.cfg.texture.use_vmap else 3
        return NpyStore([self.path(r["bag_file"]) for r in records], ch).preload()

    # -- stream estimators
    def structure_estimator(self, fold: int) -> StructureClassifier:
        s = self.cfg.structure
        return StructureClassifier(
            backbone=s.backbone, pretrained=s.pretrained, epochs=s.epochs, batch_size=s.batch_size,
            lr_head=s.lr_head, lr_backbone=s.lr_backbone, warmup_freeze_epochs=s.warmup_freeze_epochs,
            weight_decay=s.weight_decay, grad_clip=s.grad_clip, aux_lambda=s.aux_lambda,
            gamma_focus=s.gamma_focus, alpha_weights=tuple(s.alpha_weights), use_metadata=s.use_metadata,
            augment=s.augment, metadata_noise=s.metadata_noise,
            metadata_dropout=s.metadata_dropout, freeze_affine=s.freeze_affine,
            seed=self.cfg.seed * 100 + fold)

    def texture_estimator(self, fold: int) -> PlusMILClassifier:
        t = self.cfg.texture
        return PlusMILClassifier(
            backbone=t.backbone, pretrained=t.pretrained, epochs=t.epochs, batch_size=t.batch_size,
            lr_head=t.lr_head, lr_backbone=t.lr_backbone, warmup_freeze_epochs=t.warmup_freeze_epochs,
            weight_decay=t.weight_decay, grad_clip=t.grad_clip, positive_probability=t.positive_probability,
            dropout=t.dropout, augment=t.augment, freeze_affine=t.freeze_affine,
            phi_activation=t.phi_activation, seed=self.cfg.seed * 100 + fold)

    def _folds(self, folds):
        n = self.cfg.splits.n_folds
        return list(range(n)) if folds is None else list(folds)

    def train_structure(self, folds=None) -> list[int]:
        seed_everything(self.cfg.seed, self.cfg.deterministic)
        split, records = self.split(), self.build_cache()
        best = []
        for k in self._folds(folds):
            train_ids, val_ids = split.folds[k]
            tr, va = self.subset(records, train_ids), self.subset(records, val_ids)
            scaler = MetadataScaler().fit(self.raw_meta(tr))
            est = self.structure_estimator(k)
            est.fit(self.structure_X(tr), [r["label"] for r in tr], scaler.transform(self.raw_meta(tr)),
                    eval_set=(self.structure_X(va), [r["label"] for r in va],
                              scaler.transform(self.raw_meta(va))))
            self._save_stream("structure", k, est, scaler)
            best.append(est.best_epoch_)
        return best

    def train_texture(self, folds=None) -> list[int]:
        seed_everything(self.cfg.seed, self.cfg.deterministic)
        split, records = self.split(), self.build_cache()
        best = []
        for k in self._folds(folds):
            train_ids, val_ids = split.folds[k]
            tr, va = self.subset(records, train_ids), self.subset(records, val_ids)
            scaler = MetadataScaler().fit(self.raw_meta(tr))
            est = self.texture_estimator(k)
            try:
                est.fit(self.bags_X(tr), [r["plus"] for r in tr],
                        eval_set=(self.bags_X(va), [r["plus"] for r in va]))
            except ValueError as exc:
                raise ValueError(f"texture fold {k}: {exc}") from None
            self._save_stream("texture", k, est, scaler)
            best.append(est.best_epoch_)
        return best

    def _save_stream(self, stream: str, fold: int, est, scaler: MetadataScaler) -> None:
        path = self.ckpt(stream, fold)
        path.parent.mkdir(parents=True, exist_ok=True)
        extra = {"in_channels": est.in_channels_} if stream == "texture" else {
            "input_size": est.model_.input_size}
        torch.save({"params": est.get_params(), "state_dict": est.model_.state_dict(),
                    "best_epoch": est.best_epoch_, "scaler": scaler.to_dict(), **extra}, path)
        io.write_jsonl(self.path(stream, f"fold{fold}_history.jsonl"), est.history_)

    def load_stream(self, stream: str, fold: int):
        """Rebuild a fitted estimator and its fold scaler from a checkpoint."""
        path = _require(self.ckpt(stream, fold), f"run `train-{stream}` first")
        ck = torch.load(path, map_location="cpu", weights_only=False)
        if stream == "structure":
            est = StructureClassifier(**ck["params"])
            model = est._new_model(ck["input_size"])
        else:
            est = PlusMILClassifier(**ck["params"])
            est.in_channels_ = ck["in_channels"]
            model = est._new_model(ck["in_channels"])
        model.load_state_dict(ck["state_dict"])
        model.eval()
        est.model_, est.best_epoch_ = model, ck["best_epoch"]
        return est, MetadataScaler.from_dict(ck["scaler"])

    # -- stacking
    def cache_logits(self) -> list[dict]:
        split, records = self.split(), self.index()
        n_folds = len(split.folds)
        pool_scaler = MetadataScaler().fit(self.raw_meta(self.subset(records, split.pool)))
        io.write_json(self.path("pool_scaler.json"), pool_scaler.to_dict())
        test = self.subset(records, split.test_patients)
        test_struct = np.zeros((len(test), 4))
        test_tex = np.zeros(len(test))
        bundles = []
        for k in range(n_folds):
            s_est, s_scaler = self.load_stream("structure", k)
            t_est, _ = self.load_stream("texture", k)
            va = self.subset(records, split.folds[k][1])
            ls = s_est.decision_function(self.structure_X(va), s_scaler.transform(self.raw_meta(va)))
            lt = t_est.decision_function(self.bags_X(va))
            xt = pool_scaler.transform(self.raw_meta(va))
            for r, a, b, x in zip(va, ls, lt, xt):
                bundles.append(self._bundle(r, a, b, x, "oof", k, [f"structure/fold{k}.pt", f"texture/fold{k}.pt"]))
            if test:
                test_struct += s_est.decision_function(self.structure_X(test), s_scaler.transform(self.raw_meta(test)))
                test_tex += t_est.decision_function(self.bags_X(test))
        xt = pool_scaler.transform(self.raw_meta(test)) if test else []
        sources = [f"{s}/fold{k}.pt" for k in range(n_folds) for s in ("structure", "texture")]
        for r, a, b, x in zip(test, test_struct / n_folds, test_tex / n_folds, xt):
            bundles.append(self._bundle(r, a, b, x, "test", None, sources))
        bundles.sort(key=lambda b: (b["role"], b["image_id"]))
        io.write_jsonl(self.path("logits.jsonl"), bundles)
        return bundles

    @staticmethod
    def _bundle(r, l_struct, l_tex, x_tab, role, fold, sources) -> dict:
        return {"image_id": r["image_id"], "patient_id": r["patient_id"], "role": role, "fold": fold,
                "sources": sources, "l_struct": [float(v) for v in l_struct], "l_tex": float(l_tex),
                "x_tab": [float(v) for v in x_tab], "label": r["label"], "plus": r["plus"]}

    def bundles(self, role: str | None = None) -> list[dict]:
        recs = list(io.read_jsonl(_require(self.path("logits.jsonl"), "run `cache-logits` first")))
        return [b for b in recs if role is None or b["role"] == role]

    def check_oof_hygiene(self, bundles) -> None:
        split = self.split()
        for b in bundles:
            if b["role"] != "oof":
                raise AssertionError(f"{b['image_id']}: non-OOF bundle offered to fusion training")
            if b["patient_id"] not in set(split.folds[b["fold"]][1]):
                raise AssertionError(f"{b['image_id']}: logits come from a model that trained on it")

    @staticmethod
    def fusion_arrays(bundles):
        Z = np.stack([build_fusion_vector(np.array(b["l_struct"]), np.array([b["l_tex"]]), np.array(b["x_tab"]))
                      for b in bundles])
        return Z, np.array([b["label"] for b in bundles]), np.array([b["plus"] for b in bundles], dtype=bool)

    def fusion_estimator(self, seed_offset: int = 0) -> FusionMetaLearner:
        f = self.cfg.fusion
        return FusionMetaLearner(hidden=f.hidden, epochs=f.epochs, batch_size=f.batch_size, lr=f.lr,
                                 weight_decay=f.weight_decay, seed=self.cfg.seed * 100 + seed_offset)

    def train_fusion(self) -> dict:
        """Cross-fitted validation over the OOF cache, then a final fit on all of it."""
        seed_everything(self.cfg.seed, self.cfg.deterministic)
        oof = self.bundles("oof")
        if not oof:
            raise MissingInputError("logit cache holds no out-of-fold bundles")
        self.check_oof_hygiene(oof)
        Z, y, plus = self.fusion_arrays(oof)
        folds = np.array([b["fold"] for b in oof])
        diag_p = np.zeros((len(oof), 4))
        plus_p = np.zeros(len(oof))
        for k in np.unique(folds):
            tr, va = folds != k, folds == k
            est = self.fusion_estimator(int(k)).fit(Z[tr], y[tr], plus[tr])
            diag_p[va], plus_p[va] = est.predict_proba(Z[va])
        struct_p = _softmax(np.array([b["l_struct"] for b in oof]))
        tex_p = _sigmoid(np.array([b["l_tex"] for b in oof]))
        validation = {
            "structure": self._diag_report(y, struct_p),
            "texture": binary_report(plus.astype(int), tex_p).to_dict(),
            "fusion_diagnosis": self._diag_report(y, diag_p),
            "fusion_plus": binary_report(plus.astype(int), plus_p).to_dict(),
        }
        io.write_json(self.path("fusion", "validation.json"), validation)
        final = self.fusion_estimator(len(np.unique(folds))).fit(Z, y, plus)
        torch.save({"params": final.get_params(), "state_dict": final.model_.state_dict()},
                   self.path("fusion", "model.pt"))
        return validation

    @staticmethod
    def _diag_report(y, probs) -> dict:
        return compute_metrics(y, probs.argmax(1), probs, n_classes=4, target_class=2,
                               class_names=CLASS_NAMES).to_dict()

    def load_fusion(self) -> FusionMetaLearner:
        ck = torch.load(_require(self.path("fusion", "model.pt"), "run `train-fusion` first"),
                        map_location="cpu", weights_only=False)
        est = FusionMetaLearner(**ck["params"])
        from .fusion import FusionMLP
        est.model_ = FusionMLP(hidden=est.hidden)
        est.model_.load_state_dict(ck["state_dict"])
        est.model_.eval()
        est.classes_ = np.arange(4)
        return est

    def evaluate(self) -> dict:
        fusion = self.load_fusion()
        test = self.bundles("test")
        if not test:
            raise MissingInputError("logit cache holds no test bundles")
        Z, y, plus = self.fusion_arrays(test)
        diag_p, plus_p = fusion.predict_proba(Z)
        report = {
            "n_images": len(test),
            "n_patients": len({b["patient_id"] for b in test}),
            "structure": self._diag_report(y, _softmax(np.array([b["l_struct"] for b in test]))),
            "texture": binary_report(plus.astype(int), _sigmoid(np.array([b["l_tex"] for b in test]))).to_dict(),
            "fusion_diagnosis": self._diag_report(y, diag_p),
            "fusion_plus": binary_report(plus.astype(int), plus_p).to_dict(),
        }
        io.write_json(self.path("eval", "report.json"), report)
        return report

    # -- glass-box artifacts
    def explain(self, n_images: int | None = None, fold: int = 0) -> list[dict]:
        """Overlays, threat maps and counterfactual reports for held-out images."""
        from . import explain as ex
        e = self.cfg.explain
        split, records = self.split(), self.index()
        s_est, s_scaler = self.load_stream("structure", fold)
        t_est, _ = self.load_stream("texture", fold)
        chosen = self.subset(records, split.test_patients)[: n_images or e.n_images]
        out_dir = self.path("explain")
        summary = []
        for r in chosen:
            image = np.load(self.path(r["structure_file"]))
            x = s_scaler.transform(self.raw_meta([r]))[0]
            x_alt = x + np.array([e.ga_shift, 0.0, 0.0])
            report = ex.counterfactual_query(s_est, image, x, x_alt)
            files = ex.write_counterfactual(out_dir, r["image_id"], image, report, e.blend_alpha, e.colormap)
            out = s_est.forward_output(image[None], x[None])[0]
            for s in range(len(out.attention_maps)):
                ov = ex.render_structure_heatmap(out, image, s, alpha=e.blend_alpha, cmap=e.colormap)
                files.append(ex.write_overlay(out_dir, r["image_id"], ov, x))
            clean, _, bag = texture_inputs(self.cfg, io.read_rgb(self._source_path(r)), r["image_id"])
            patches = bag.patches if self.cfg.texture.use_vmap else bag.patches[:, :3]
            _, attn = t_est.forward_bags(patches[None])
            tmap = ex.render_threat_map(bag.coords, bag.patch_size, attn[0], clean.pixels, e.blend_alpha, e.colormap)
            files.append(ex.write_threat_map(out_dir, r["image_id"], tmap))
            summary.append({"image_id": r["image_id"], "divergence": report.divergence,
                            "files": [str(f.relative_to(self.root)) for f in files]})
        io.write_json(self.path("explain", "summary.json"), summary)
        return summary

    def _source_path(self, record: dict) -> Path:
        return Path(record["source"])
