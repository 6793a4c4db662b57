"""Cohort ingestion, label taxonomy, metadata scaling, patient-exclusive splits and MIL bags."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.model_selection import KFold, StratifiedKFold
from sklearn.utils.validation import check_is_fitted

from . import io
from ._validation import check_clinical

log = logging.getLogger(__name__)

CLASS_NAMES = ("normal", "mild_treated", "severe", "other")
N_CLASSES = 4
SEVERE = 2

# DG code -> broad class.
TAXONOMY = {0: 0, 1: 1, 2: 1, 9: 1, 3: 2, 4: 2, 5: 2, 6: 2, 7: 2, 8: 2, 10: 3, 11: 3, 12: 3, 13: 3}

MANIFEST_NAME = "manifest.jsonl"
MANIFEST_FIELDS = ("patient_id", "ga_weeks", "bw_grams", "image_file", "pa_weeks", "dg_code", "plus")


class ManifestError(ValueError):
    pass


def remap_diagnosis(dg_code: int) -> int:
    """Collapse a DG code (0-13) into one of the four broad classes."""
    if isinstance(dg_code, bool) or int(dg_code) != dg_code:
        raise ValueError(f"dg_code must be an integer, got {dg_code!r}")
    try:
        return TAXONOMY[int(dg_code)]
    except KeyError:
        raise ValueError(f"dg_code {dg_code} outside [0, 13]") from None


@dataclass
class ImageRecord:
    path: Path
    pa_weeks: float
    dg_code: int
    plus: bool

    @property
    def broad_class(self) -> int:
        return remap_diagnosis(self.dg_code)


@dataclass
class PatientRecord:
    patient_id: str
    gestational_age: float
    birth_weight: float
    images: list[ImageRecord] = field(default_factory=list)

    @property
    def worst_class(self) -> int:
        return max(im.broad_class for im in self.images)

    @property
    def has_plus(self) -> bool:
        return any(im.plus for im in self.images)


@dataclass
class ImageItem:
    """One image flattened with its patient's metadata; the unit the streams consume."""

    image_id: str
    patient_id: str
    path: Path
    raw_meta: tuple[float, float, float]
    label: int
    plus: bool


def _number(value, name: str, where: str) -> float:
    if value is None:
        return math.nan
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ManifestError(f"{where}: field {name!r} is not numeric ({value!r})") from None


def _check_range(value: float, lo: float, hi: float, name: str, where: str) -> None:
    if not math.isnan(value) and not lo < value < hi:
        raise ManifestError(f"{where}: {name}={value} outside ({lo}, {hi})")


def read_manifest(path: str | Path) -> PatientRecord:
    """Parse one patient's manifest. Null metadata is kept as NaN."""
    path = Path(path)
    patient = None
    for lineno, rec in enumerate(io.read_jsonl(path), 1):
        where = f"{path}:{lineno}"
        missing = [k for k in MANIFEST_FIELDS if k not in rec]
        if missing:
            raise ManifestError(f"{where}: missing field(s) {missing}")
        extra = sorted(set(rec) - set(MANIFEST_FIELDS))
        if extra:
            raise ManifestError(f"{where}: unknown field(s) {extra}")
        ga = _number(rec["ga_weeks"], "ga_weeks", where)
        bw = _number(rec["bw_grams"], "bw_grams", where)
        pa = _number(rec["pa_weeks"], "pa_weeks", where)
        _check_range(ga, 20.0, 45.0, "ga_weeks", where)
        _check_range(bw, 300.0, 6000.0, "bw_grams", where)
        try:
            dg = int(rec["dg_code"])
            remap_diagnosis(dg)
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"{where}: {exc}") from None
        if not isinstance(rec["plus"], (bool, int)) or rec["plus"] not in (0, 1):
            raise ManifestError(f"{where}: plus must be a boolean")
        pid = str(rec["patient_id"])
        if patient is None:
            patient = PatientRecord(pid, ga, bw)
        elif pid != patient.patient_id:
            raise ManifestError(f"{where}: patient_id {pid!r} differs from {patient.patient_id!r}")
        elif not (np.isclose(ga, patient.gestational_age, equal_nan=True)
                  and np.isclose(bw, patient.birth_weight, equal_nan=True)):
            raise ManifestError(f"{where}: inconsistent GA/BW for patient {pid}")
        patient.images.append(ImageRecord(path.parent / rec["image_file"], pa, dg, bool(rec["plus"])))
    if patient is None:
        raise ManifestError(f"{path}: empty manifest")
    return patient


def write_manifest(patient_dir: str | Path, patient: PatientRecord) -> Path:
    patient_dir = Path(patient_dir)
    recs = [{
        "patient_id": patient.patient_id,
        "ga_weeks": None if math.isnan(patient.gestational_age) else patient.gestational_age,
        "bw_grams": None if math.isnan(patient.birth_weight) else patient.birth_weight,
        "image_file": Path(im.path).name,
        "pa_weeks": None if math.isnan(im.pa_weeks) else im.pa_weeks,
        "dg_code": int(im.dg_code),
        "plus": bool(im.plus),
    } for im in patient.images]
    io.write_jsonl(patient_dir / MANIFEST_NAME, recs)
    return patient_dir / MANIFEST_NAME


def load_cohort(root: str | Path) -> list[PatientRecord]:
    """Read every ``<root>/<patient>/manifest.jsonl``; patients sorted by id."""
    root = Path(root)
    paths = sorted(root.glob(f"*/{MANIFEST_NAME}"))
    if not paths:
        raise FileNotFoundError(f"no patient manifests under {root}")
    patients = [read_manifest(p) for p in paths]
    ids = [p.patient_id for p in patients]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate patient ids across manifests")
    return sorted(patients, key=lambda p: p.patient_id)


def flatten(patients: Sequence[PatientRecord]) -> list[ImageItem]:
    items = []
    for p in patients:
        for im in p.images:
            items.append(ImageItem(f"{p.patient_id}/{Path(im.path).name}", p.patient_id, Path(im.path),
                                   (p.gestational_age, p.birth_weight, im.pa_weeks),
                                   im.broad_class, im.plus))
    return items


class MetadataScaler(BaseEstimator, TransformerMixin):
    """Per-feature z-scoring of (GA, BW, PA), fitted on training rows only."""

    def fit(self, X, y=None):
        X = check_clinical(X)
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        if np.any(self.scale_ <= 0):
            raise ValueError("a clinical feature has zero variance in the training split")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        return (check_clinical(X) - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self)
        return np.asarray(X, dtype=np.float64) * self.scale_ + self.mean_

    def to_dict(self) -> dict:
        check_is_fitted(self)
        return {"mean": self.mean_.tolist(), "scale": self.scale_.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MetadataScaler":
        s = cls()
        s.mean_ = np.asarray(d["mean"], dtype=np.float64)
        s.scale_ = np.asarray(d["scale"], dtype=np.float64)
        s.n_features_in_ = len(s.mean_)
        return s


def normalize_metadata(raw, mean, std) -> np.ndarray:
    """Functional z-score with explicit statistics."""
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("std must be positive")
    x = check_clinical(raw, n_features=len(std))
    out = (x - np.asarray(mean, dtype=np.float64)) / std
    return out[0] if np.ndim(raw) == 1 else out


# ----------------------------------------------------------------------------- splits

@dataclass
class SplitAssignment:
    test_patients: list[str]
    folds: list[tuple[list[str], list[str]]]
    seed: int = 0

    def fold_of(self, patient_id: str) -> int | None:
        """Index of the fold that validates ``patient_id`` (None for test patients)."""
        for k, (_, val) in enumerate(self.folds):
            if patient_id in val:
                return k
        return None

    @property
    def pool(self) -> list[str]:
        return sorted(p for _, val in self.folds for p in val)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "test": list(self.test_patients),
                "folds": [{"train": list(t), "val": list(v)} for t, v in self.folds]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitAssignment":
        return cls(list(d["test"]), [(list(f["train"]), list(f["val"])) for f in d["folds"]], d.get("seed", 0))


def _largest_remainder(weights: Sequence[float], total: int) -> list[int]:
    weights = np.asarray(weights, dtype=np.float64)
    if total <= 0 or weights.sum() <= 0:
        return [0] * len(weights)
    raw = weights / weights.sum() * total
    base = np.floor(raw).astype(int)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[: total - base.sum()]:
        base[i] += 1
    return base.tolist()


def _allocate_test(groups: dict[int, list[str]], n_test: int) -> dict[int, int]:
    """Per-class test quota: one per class when affordable, the rest proportional."""
    classes = sorted(groups)
    quota = {c: 0 for c in classes}
    eligible = [c for c in classes if len(groups[c]) >= 2]
    if n_test >= len(eligible):
        for c in eligible:
            quota[c] = 1
    remaining = n_test - sum(quota.values())
    while remaining > 0:
        spare = [len(groups[c]) - 1 - quota[c] if c in eligible else len(groups[c]) - quota[c] for c in classes]
        if sum(max(s, 0) for s in spare) == 0:
            spare = [len(groups[c]) - quota[c] for c in classes]
        extra = _largest_remainder([max(s, 0) for s in spare], min(remaining, sum(max(s, 0) for s in spare)))
        for c, e in zip(classes, extra):
            quota[c] += e
        remaining = n_test - sum(quota.values())
    return quota


def n_test_patients(n_patients: int, test_fraction: float = 1.0 / 11.0) -> int:
    return max(1, int(math.floor(n_patients * test_fraction + 0.5)))


def make_splits(patients: Sequence[PatientRecord], seed: int = 0, n_folds: int = 5,
                test_fraction: float = 1.0 / 11.0) -> SplitAssignment:
    """Patient-exclusive held-out test set plus ``n_folds`` stratified folds.

    Patients are stratified on their worst broad class and plus presence. The
    held-out set takes one patient per class where that class has at least
    two patients, with the remainder allocated proportionally.
    """
    if len(patients) < 10:
        raise ValueError("at least 10 patients are required")
    ids = [p.patient_id for p in patients]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids")
    rng = np.random.default_rng(seed)
    ordered = sorted(patients, key=lambda p: p.patient_id)
    key = {p.patient_id: (p.worst_class, p.has_plus) for p in ordered}

    by_class: dict[int, list[str]] = {}
    for p in ordered:
        by_class.setdefault(p.worst_class, []).append(p.patient_id)
    quota = _allocate_test(by_class, n_test_patients(len(ordered), test_fraction))
    test: list[str] = []
    for c in sorted(by_class):
        members = by_class[c]
        sub = {flag: [m for m in members if key[m][1] == flag] for flag in (False, True)}
        take = _largest_remainder([len(sub[False]), len(sub[True])], quota[c])
        for flag, k in zip((False, True), take):
            pool = list(sub[flag])
            rng.shuffle(pool)
            test.extend(pool[:k])
    test = sorted(test)

    rest = [p for p in ordered if p.patient_id not in set(test)]
    rest_ids = np.array([p.patient_id for p in rest])
    folds = _stratified_folds(rest_ids, [key[i] for i in rest_ids], n_folds, seed)
    return SplitAssignment(test, folds, seed)


def _stratified_folds(ids: np.ndarray, keys, n_folds: int, seed: int):
    full = np.array([f"{c}-{int(f)}" for c, f in keys])
    coarse = np.array([str(c) for c, _ in keys])
    splitter = None
    for labels in (full, coarse):
        counts = np.unique(labels, return_counts=True)[1]
        if counts.max() >= n_folds:
            if counts.min() < n_folds:
                warnings.warn(f"a stratum has fewer than {n_folds} patients; stratification is best-effort",
                              UserWarning, stacklevel=3)
            splitter = (StratifiedKFold(n_folds, shuffle=True, random_state=seed), labels)
            break
    if splitter is None:
        warnings.warn("too few patients per stratum; falling back to unstratified folds", UserWarning, stacklevel=3)
        splitter = (KFold(n_folds, shuffle=True, random_state=seed), None)
    cv, labels = splitter
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        parts = list(cv.split(ids, labels))
    return [(sorted(ids[tr].tolist()), sorted(ids[va].tolist())) for tr, va in parts]


def check_patient_exclusive(split: SplitAssignment, all_patients: Sequence[str] | None = None) -> None:
    """Raise AssertionError on any patient-level overlap."""
    test = set(split.test_patients)
    seen_val: set[str] = set()
    for k, (train, val) in enumerate(split.folds):
        tr, va = set(train), set(val)
        if tr & va:
            raise AssertionError(f"fold {k}: train/val overlap {sorted(tr & va)}")
        if test & (tr | va):
            raise AssertionError(f"fold {k}: test leakage {sorted(test & (tr | va))}")
        if seen_val & va:
            raise AssertionError(f"fold {k}: patient validated twice {sorted(seen_val & va)}")
        seen_val |= va
        if tr | va != set(split.pool):
            raise AssertionError(f"fold {k}: does not cover the training pool")
    if all_patients is not None and test | seen_val != set(all_patients):
        raise AssertionError("split does not cover every patient")


# ----------------------------------------------------------------------------- bags

@dataclass
class InstanceBag:
    patches: np.ndarray  # (N, C, p, p)
    coords: list[tuple[int, int]]
    patch_size: int
    label: bool = False
    fallback: bool = False


def window_grid(height: int, width: int, patch_size: int, stride: int) -> list[tuple[int, int]]:
    ys = list(range(0, height - patch_size + 1, stride))
    xs = list(range(0, width - patch_size + 1, stride))
    if ys[-1] != height - patch_size:
        ys.append(height - patch_size)
    if xs[-1] != width - patch_size:
        xs.append(width - patch_size)
    return [(y, x) for y in ys for x in xs]


def window_masses(vmap: np.ndarray, coords, patch_size: int) -> np.ndarray:
    ii = np.pad(np.cumsum(np.cumsum(np.asarray(vmap, dtype=np.float64), 0), 1), ((1, 0), (1, 0)))
    p = patch_size
    return np.array([ii[y + p, x + p] - ii[y, x + p] - ii[y + p, x] + ii[y, x] for y, x in coords])


def select_windows(vmap: np.ndarray, n_patches: int, patch_size: int, stride: int | None = None,
                   seed: int = 0) -> tuple[list[tuple[int, int]], bool]:
    """Top windows by vessel mass (ties by coordinates); seeded grid sample if the map is empty.

    Returns the window corners and whether the fallback was used. When the grid
    holds fewer windows than requested, windows repeat in ranked order.
    """
    h, w = vmap.shape
    if h < patch_size or w < patch_size:
        raise ValueError(f"image {h}x{w} is smaller than patch size {patch_size}")
    stride = stride or max(1, patch_size // 2)
    grid = window_grid(h, w, patch_size, stride)
    mass = window_masses(vmap, grid, patch_size)
    fallback = not np.isfinite(mass).all() or mass.max() <= 1e-12
    if fallback:
        rng = np.random.default_rng(seed)
        order = sorted(rng.permutation(len(grid))[: min(n_patches, len(grid))].tolist())
    else:
        order = sorted(range(len(grid)), key=lambda i: (-mass[i], grid[i]))
    ranked = [grid[i] for i in order]
    chosen = [ranked[k % len(ranked)] for k in range(n_patches)]
    return chosen, fallback


def extract_patches(image: np.ndarray, vmap: np.ndarray | None, coords, patch_size: int) -> np.ndarray:
    """Cut ``(N, C, p, p)`` float32 patches; VMAP appended as channel 4 when given."""
    chw = np.moveaxis(np.asarray(image, dtype=np.float32), -1, 0)
    if vmap is not None:
        chw = np.concatenate([chw, np.asarray(vmap, dtype=np.float32)[None]], axis=0)
    return np.stack([chw[:, y:y + patch_size, x:x + patch_size] for y, x in coords])


def build_bag(texture_image: np.ndarray, vmap: np.ndarray, n_patches: int = 24, patch_size: int = 224,
              seed: int = 0, stride: int | None = None, label: bool = False,
              vmap_fn=None) -> InstanceBag:
    """Bag of four-channel patches from one texture-resolution image.

    ``vmap_fn`` switches to patch-wise mode: the VMAP channel is recomputed on
    each RGB crop instead of being cut from the whole-image map.
    """
    texture_image = np.asarray(texture_image)
    if texture_image.shape[:2] != np.shape(vmap):
        raise ValueError("image and vmap are not aligned")
    coords, fallback = select_windows(vmap, n_patches, patch_size, stride, seed)
    if vmap_fn is None:
        patches = extract_patches(texture_image, vmap, coords, patch_size)
    else:
        rgb = extract_patches(texture_image, None, coords, patch_size)
        vm = np.stack([vmap_fn(np.moveaxis(r, 0, -1))[None] for r in rgb]).astype(np.float32)
        patches = np.concatenate([rgb, vm], axis=1)
    return InstanceBag(patches, coords, patch_size, bool(label), fallback)


def build_pooled_bag(images: Sequence[np.ndarray], vmaps: Sequence[np.ndarray], n_patches: int = 24,
                     patch_size: int = 224, seed: int = 0, label: bool = False) -> InstanceBag:
    """Experimental: one bag drawn across several images of an examination.

    Each image contributes its ranked windows; the bag takes the globally
    heaviest ones. Coordinates carry the image index as a third component.
    """
    cands = []
    for idx, (img, vm) in enumerate(zip(images, vmaps)):
        grid = window_grid(*vm.shape, patch_size, max(1, patch_size // 2))
        for (y, x), m in zip(grid, window_masses(vm, grid, patch_size)):
            cands.append((-m, idx, y, x))
    cands.sort()
    chosen = [cands[k % len(cands)] for k in range(n_patches)]
    if all(c[0] == 0 for c in chosen):
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(cands))
        chosen = [cands[perm[k % len(perm)]] for k in range(n_patches)]
    patches = np.stack([extract_patches(images[i], vmaps[i], [(y, x)], patch_size)[0] for _, i, y, x in chosen])
    return InstanceBag(patches, [(y, x, i) for _, i, y, x in chosen], patch_size, bool(label))
