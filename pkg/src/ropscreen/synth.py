"""Procedural fundus-like images with controllable ridge and vessel-tortuosity labels.

Not photorealistic. Structural classes differ by ridge arcs and haemorrhage
spots; plus disease is encoded by vessel tortuosity and dilation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from . import io
from .data import ImageRecord, PatientRecord, _largest_remainder, write_manifest

# Tortuosity amplitudes are fractions of the image height.
PLUS_TORTUOSITY_MIN = 0.014
NONPLUS_TORTUOSITY_MAX = 0.006

DG_GROUPS = {0: (0,), 1: (1, 2, 9), 2: (3, 4, 5, 6, 7, 8), 3: (10, 11, 12, 13)}
GA_RANGES = {0: (32.0, 40.0), 1: (28.0, 35.0), 2: (24.0, 29.0), 3: (28.0, 38.0)}

_FUNDUS = np.array([0.78, 0.36, 0.18])
_VESSEL = np.array([0.50, 0.10, 0.06])
_RIDGE = np.array([0.98, 0.88, 0.78])
_BLEED = np.array([0.42, 0.04, 0.03])
_DISC = np.array([0.98, 0.86, 0.55])


@dataclass
class SynthesisSpec:
    broad_class: int
    plus: bool
    seed: int
    size: tuple[int, int] = (480, 640)
    ridge_radius: float = 0.0      # fraction of aperture radius
    ridge_width: float = 0.0       # fraction of image height
    ridge_contrast: float = 0.0    # blend weight in [0, 1]
    ridge_span: tuple[float, float] = (0.0, 0.0)  # degrees
    n_branches: int = 8
    base_curvature: float = 0.0
    tortuosity_amp: float = 0.0    # fraction of image height
    tortuosity_freq: float = 3.0   # cycles per branch
    vessel_width: float = 0.010    # fraction of image height
    vessel_contrast: float = 0.65
    n_bleeds: int = 0
    noise: float = 0.015
    metadata: tuple[float, float, float] = (34.0, 2200.0, 38.0)

    def __post_init__(self):
        if self.broad_class not in DG_GROUPS:
            raise ValueError("broad_class must be 0-3")
        if self.plus and self.tortuosity_amp < PLUS_TORTUOSITY_MIN:
            raise ValueError(f"plus requires tortuosity_amp >= {PLUS_TORTUOSITY_MIN}")
        if self.broad_class == 2 and not (self.ridge_contrast > 0 and self.ridge_width > 0):
            raise ValueError("class 2 (severe) requires a ridge")

    @classmethod
    def sample(cls, broad_class: int, plus: bool, seed: int, size=(480, 640),
               metadata: tuple[float, float, float] | None = None) -> "SynthesisSpec":
        """Draw class-conditional parameters under ``seed``."""
        rng = np.random.default_rng([seed, 7919])
        kw = dict(n_branches=int(rng.integers(6, 10)), base_curvature=float(rng.uniform(-0.8, 0.8)),
                  tortuosity_freq=float(rng.uniform(3.0, 5.0)), noise=float(rng.uniform(0.008, 0.02)))
        if plus:
            kw.update(tortuosity_amp=float(rng.uniform(0.016, 0.024)), vessel_width=float(rng.uniform(0.014, 0.018)),
                      vessel_contrast=float(rng.uniform(0.8, 0.9)), tortuosity_freq=float(rng.uniform(5.0, 7.0)))
        else:
            kw.update(tortuosity_amp=float(rng.uniform(0.0, NONPLUS_TORTUOSITY_MAX)),
                      vessel_width=float(rng.uniform(0.008, 0.011)), vessel_contrast=float(rng.uniform(0.55, 0.7)))
        start = float(rng.uniform(0.0, 360.0))
        if broad_class == 1:
            kw.update(ridge_radius=float(rng.uniform(0.55, 0.8)), ridge_width=float(rng.uniform(0.013, 0.017)),
                      ridge_contrast=float(rng.uniform(0.65, 0.8)), ridge_span=(start, start + float(rng.uniform(140, 220))))
        elif broad_class == 2:
            kw.update(ridge_radius=float(rng.uniform(0.55, 0.8)), ridge_width=float(rng.uniform(0.028, 0.04)),
                      ridge_contrast=float(rng.uniform(0.85, 1.0)), ridge_span=(start, start + float(rng.uniform(180, 300))))
        elif broad_class == 3:
            kw.update(n_bleeds=int(rng.integers(5, 10)))
        if metadata is None:
            metadata = sample_metadata(broad_class, rng)
        return cls(broad_class=broad_class, plus=plus, seed=seed, size=tuple(size), metadata=metadata, **kw)


def sample_metadata(broad_class: int, rng: np.random.Generator) -> tuple[float, float, float]:
    lo, hi = GA_RANGES[broad_class]
    ga = float(rng.uniform(lo, hi))
    bw = float(np.clip(650.0 + (ga - 24.0) * 170.0 + rng.normal(0.0, 120.0), 350.0, 5900.0))
    pa = float(min(ga + rng.uniform(2.0, 8.0), 60.0))
    return round(ga, 2), round(bw, 1), round(pa, 2)


@dataclass
class FundusSample:
    image: np.ndarray                 # H x W x 3 uint8
    broad_class: int
    plus: bool
    dg_code: int
    metadata: tuple[float, float, float]
    spec: SynthesisSpec
    geometry: dict = field(default_factory=dict)


def _branch_path(origin, angle, length, curvature, amp, freq, phase, n=160):
    s = np.linspace(0.0, 1.0, n)
    theta = angle + curvature * s
    step = length / (n - 1)
    xy = np.cumsum(np.stack([np.cos(theta), np.sin(theta)], 1) * step, axis=0) + origin
    normal = np.stack([-np.sin(theta), np.cos(theta)], 1)
    wiggle = np.sin(2 * np.pi * freq * s + phase) + 0.35 * np.sin(2 * np.pi * 2.3 * freq * s + 1.7 * phase)
    # Taper the wiggle in near the optic disc so branches leave it cleanly.
    return xy + normal * (amp * np.minimum(1.0, 6.0 * s) * wiggle)[:, None]


def _stroke(layer: np.ndarray, pts: np.ndarray, width: float) -> None:
    cv2.polylines(layer, [np.round(pts * 16).astype(np.int32)], False, 1.0,
                  thickness=max(1, int(round(width))), lineType=cv2.LINE_8, shift=4)


def generate(spec: SynthesisSpec) -> FundusSample:
    """Render one sample; byte-identical for identical specs."""
    rng = np.random.default_rng([spec.seed, 104729])
    h, w = spec.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    radius = 0.47 * min(h, w)
    r = np.hypot(yy - cy, xx - cx) / radius
    aperture = r <= 1.0

    shade = 1.0 - 0.35 * r ** 2 + rng.uniform(-0.05, 0.05)
    img = _FUNDUS[None, None, :] * shade[..., None]

    side = 1.0 if rng.random() < 0.5 else -1.0
    disc = np.array([cx + side * 0.32 * radius, cy + rng.uniform(-0.05, 0.05) * radius])

    vessels = np.zeros((h, w), np.float32)
    centerlines = []
    amp = spec.tortuosity_amp * h
    base = rng.uniform(0, 2 * np.pi)
    for k in range(spec.n_branches):
        ang = base + 2 * np.pi * k / spec.n_branches + rng.uniform(-0.2, 0.2)
        length = radius * rng.uniform(0.9, 1.3)
        curv = spec.base_curvature * rng.uniform(0.5, 1.0)
        pts = _branch_path(disc, ang, length, curv, amp, spec.tortuosity_freq, rng.uniform(0, 2 * np.pi))
        _stroke(vessels, pts, spec.vessel_width * h)
        centerlines.append(pts)
        j = int(len(pts) * rng.uniform(0.3, 0.5))
        child = _branch_path(pts[j], ang + rng.choice([-0.6, 0.6]), length * 0.5, curv, amp * 0.8,
                             spec.tortuosity_freq * 0.6, rng.uniform(0, 2 * np.pi), n=80)
        _stroke(vessels, child, 0.7 * spec.vessel_width * h)
        centerlines.append(child)
    vessels = cv2.GaussianBlur(vessels, (0, 0), max(0.5, 0.15 * spec.vessel_width * h))
    v = np.clip(vessels, 0, 1)[..., None] * spec.vessel_contrast
    img = img * (1 - v) + _VESSEL * shade[..., None] * v

    ridge_geom = None
    if spec.ridge_contrast > 0 and spec.ridge_width > 0:
        ridge = np.zeros((h, w), np.float32)
        axes = (int(round(spec.ridge_radius * radius)),) * 2
        center = (int(round(cx)), int(round(cy)))
        cv2.ellipse(ridge, center, axes, 0.0, spec.ridge_span[0], spec.ridge_span[1], 1.0,
                    thickness=max(1, int(round(spec.ridge_width * h))), lineType=cv2.LINE_8)
        ridge = cv2.GaussianBlur(ridge, (0, 0), max(0.5, 0.3 * spec.ridge_width * h))
        ridge = np.clip(ridge / max(ridge.max(), 1e-6), 0, 1)[..., None] * spec.ridge_contrast
        img = img * (1 - ridge) + _RIDGE * ridge
        ridge_geom = {"center": [cx, cy], "radius_px": spec.ridge_radius * radius, "span_deg": list(spec.ridge_span)}

    for _ in range(spec.n_bleeds):
        rr = radius * np.sqrt(rng.uniform(0.05, 0.7))
        th = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0.02, 0.045) * h
        blob = np.exp(-((xx - cx - rr * np.cos(th)) ** 2 + (yy - cy - rr * np.sin(th)) ** 2) / (2 * rad ** 2))
        b = (0.9 * np.clip(1.6 * blob, 0, 1))[..., None]
        img = img * (1 - b) + _BLEED * b

    disc_r = 0.09 * radius
    d = np.exp(-((xx - disc[0]) ** 2 + (yy - disc[1]) ** 2) / (2 * disc_r ** 2))[..., None]
    img = img * (1 - 0.85 * d) + _DISC * 0.85 * d

    img = img + rng.normal(0.0, spec.noise, img.shape)
    img = np.clip(img, 0.0, 1.0) * aperture[..., None]
    u8 = np.round(img * 255.0).astype(np.uint8)

    dg = int(rng.choice(DG_GROUPS[spec.broad_class]))
    geometry = {"aperture_center": [cx, cy], "aperture_radius_px": radius, "disc": disc.tolist(),
                "ridge": ridge_geom, "centerlines": centerlines}
    return FundusSample(u8, spec.broad_class, spec.plus, dg, spec.metadata, spec, geometry)


def class_counts(n_patients: int, mix: Sequence[float]) -> list[int]:
    mix = np.asarray(mix, dtype=np.float64)
    if len(mix) != 4 or np.any(mix < 0) or mix.sum() <= 0:
        raise ValueError("class mix must be four non-negative weights")
    return _largest_remainder(mix, n_patients)


def generate_cohort(out_dir: str | Path, n_patients: int = 40, mix=(0.5, 0.15, 0.2, 0.15), seed: int = 0,
                    size=(480, 640), images_per_patient=(4, 12), plus_rate=(0.0, 0.2, 0.75, 0.0)) -> list[PatientRecord]:
    """Write a cohort in the manifest layout: ``<out>/<patient>/{manifest,synthesis}.jsonl`` + PNGs.

    ``plus_rate`` is the per-class fraction of patients with plus disease;
    within such a patient each image is plus with probability 0.8 (at least one).
    """
    if n_patients < 10:
        raise ValueError("n_patients must be at least 10")
    lo, hi = images_per_patient
    if not 1 <= lo <= hi:
        raise ValueError("invalid images_per_patient range")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    counts = class_counts(n_patients, mix)
    classes = np.concatenate([np.full(c, k) for k, c in enumerate(counts)]).astype(int)
    plus_patient = np.zeros(n_patients, bool)
    for k in range(4):
        idx = np.flatnonzero(classes == k)
        n_plus = int(math.floor(plus_rate[k] * len(idx) + 0.5))
        plus_patient[rng.permutation(idx)[:n_plus]] = True
    order = rng.permutation(n_patients)
    patients = []
    for pid_num, i in enumerate(order):
        pid = f"P{pid_num:03d}"
        cls_ = int(classes[i])
        meta_rng = np.random.default_rng([seed, pid_num, 1])
        ga, bw, _ = sample_metadata(cls_, meta_rng)
        n_img = int(meta_rng.integers(lo, hi + 1))
        plus_flags = np.zeros(n_img, bool)
        if plus_patient[i]:
            plus_flags = meta_rng.random(n_img) < 0.8
            if not plus_flags.any():
                plus_flags[meta_rng.integers(n_img)] = True
        record = PatientRecord(pid, ga, bw)
        synth_rows = []
        pdir = out_dir / pid
        for j in range(n_img):
            pa = round(min(ga + 1.5 + 1.2 * j + float(meta_rng.uniform(0, 0.8)), 60.0), 2)
            img_seed = int(np.random.default_rng([seed, pid_num, j, 2]).integers(2 ** 31))
            spec = SynthesisSpec.sample(cls_, bool(plus_flags[j]), img_seed, size, (ga, bw, pa))
            sample = generate(spec)
            name = f"img_{j:02d}.png"
            io.write_rgb(pdir / name, sample.image)
            record.images.append(ImageRecord(pdir / name, pa, sample.dg_code, bool(plus_flags[j])))
            synth_rows.append({"image_file": name, **_spec_record(spec)})
        write_manifest(pdir, record)
        io.write_jsonl(pdir / "synthesis.jsonl", synth_rows)
        patients.append(record)
    return sorted(patients, key=lambda p: p.patient_id)


def _spec_record(spec: SynthesisSpec) -> dict:
    d = asdict(spec)
    d["size"] = list(spec.size)
    d["ridge_span"] = list(spec.ridge_span)
    d["metadata"] = list(spec.metadata)
    return d


def spec_from_record(rec: dict) -> SynthesisSpec:
    d = {k: v for k, v in rec.items() if k != "image_file"}
    d["size"] = tuple(d["size"])
    d["ridge_span"] = tuple(d["ridge_span"])
    d["metadata"] = tuple(d["metadata"])
    return SynthesisSpec(**d)


def with_plus(spec: SynthesisSpec, plus: bool) -> SynthesisSpec:
    """Counterpart spec differing only in the plus-controlling vessel parameters."""
    if plus:
        return replace(spec, plus=True, tortuosity_amp=max(spec.tortuosity_amp, 0.02),
                       vessel_width=max(spec.vessel_width, 0.016), vessel_contrast=max(spec.vessel_contrast, 0.85))
    return replace(spec, plus=False, tortuosity_amp=min(spec.tortuosity_amp, 0.003),
                   vessel_width=min(spec.vessel_width, 0.0095), vessel_contrast=min(spec.vessel_contrast, 0.62))
