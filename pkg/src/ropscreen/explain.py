"""Attention overlays, vascular threat maps and counterfactual metadata queries."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np
import torch
from torch.nn import functional as F

from . import io
from .structure import MSAQNet, StructureOutput

_TINY = 1e-30


def max_normalize(heat: np.ndarray) -> np.ndarray:
    """Divide by the maximum; an all-zero field passes through unchanged."""
    heat = np.asarray(heat, dtype=np.float64)
    m = heat.max(initial=0.0)
    return heat / m if m > 0 else np.zeros_like(heat)


def upsample(field2d: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.as_tensor(np.asarray(field2d, dtype=np.float64))[None, None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()


def blend(base: np.ndarray, heat: np.ndarray, alpha: float = 0.45, cmap: str = "jet") -> np.ndarray:
    colors = matplotlib.colormaps[cmap](np.clip(heat, 0.0, 1.0))[..., :3]
    return np.clip((1.0 - alpha) * np.asarray(base, dtype=np.float64) + alpha * colors, 0.0, 1.0)


@dataclass
class HeatmapOverlay:
    base: np.ndarray
    heat: np.ndarray          # normalized to [0, 1], image resolution
    native: np.ndarray        # the softmax map at feature resolution
    scale: int
    alpha: float
    cmap: str
    rgb: np.ndarray = field(repr=False, default=None)


def render_structure_heatmap(output: StructureOutput, image: np.ndarray, scale: int = 0, index: int = 0,
                             alpha: float = 0.45, cmap: str = "jet") -> HeatmapOverlay:
    """Upsample one scale's attention map to the image, max-normalize, color and blend.

    Scale 0 is the finest pyramid level.
    """
    native = output.attention_maps[scale][index].detach().double().cpu().numpy()
    image = np.asarray(image, dtype=np.float64)
    heat = max_normalize(upsample(native, image.shape[:2]))
    return HeatmapOverlay(image, heat, native, scale, alpha, cmap, blend(image, heat, alpha, cmap))


@dataclass
class ThreatMap:
    base: np.ndarray
    field: np.ndarray         # mean of covering windows' weights; 0 where uncovered
    coverage: np.ndarray      # number of windows covering each pixel
    alpha: float
    cmap: str
    rgb: np.ndarray = field(repr=False, default=None)


def render_threat_map(coords, patch_size: int, weights, image: np.ndarray, alpha: float = 0.45,
                      cmap: str = "jet") -> ThreatMap:
    """Paint each window with its attention weight; overlapping windows average."""
    if coords is None or len(coords) == 0:
        raise ValueError("bag has no patch provenance; cannot place attention weights")
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(coords) != len(weights):
        raise ValueError(f"{len(coords)} windows but {len(weights)} weights")
    image = np.asarray(image, dtype=np.float64)
    total = np.zeros(image.shape[:2])
    count = np.zeros(image.shape[:2])
    for (y, x, *_), a in zip(coords, weights):
        total[y:y + patch_size, x:x + patch_size] += a
        count[y:y + patch_size, x:x + patch_size] += 1
    fld = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return ThreatMap(image, fld, count, alpha, cmap, blend(image, max_normalize(fld), alpha, cmap))


def symmetric_kl(p: np.ndarray, q: np.ndarray) -> float:
    """``KL(p||q) + KL(q||p) = sum (p - q)(log p - log q)``; exactly 0 when p == q."""
    p = np.maximum(np.asarray(p, dtype=np.float64).ravel(), _TINY)
    q = np.maximum(np.asarray(q, dtype=np.float64).ravel(), _TINY)
    return float(np.sum((p - q) * (np.log(p) - np.log(q))))


@dataclass
class CounterfactualReport:
    x_tab: list[float]
    x_tab_alt: list[float]
    maps: list[np.ndarray] = field(repr=False)
    maps_alt: list[np.ndarray] = field(repr=False)
    divergence: list[float]

    def to_dict(self) -> dict:
        return {"x_tab": self.x_tab, "x_tab_alt": self.x_tab_alt, "divergence": self.divergence,
                "measure": "symmetrized KL over the spatial attention distribution",
                "map_shapes": [list(m.shape) for m in self.maps]}


def _as_model(model) -> MSAQNet:
    return getattr(model, "model_", model)


@torch.no_grad()
def attention_maps(model, image: np.ndarray, x_tab) -> list[np.ndarray]:
    """Per-scale attention maps for one ``(H, W, 3)`` image, computed in eval mode."""
    net = _as_model(model)
    was = net.training
    net.eval()
    try:
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
        t = torch.as_tensor(np.asarray(x_tab, dtype=np.float32).reshape(1, 3))
        out = net(x, t)
    finally:
        net.train(was)
    return [a[0].double().numpy() for a in out.attention_maps]


def counterfactual_query(model, image: np.ndarray, x_tab, x_tab_alt) -> CounterfactualReport:
    """Two forward passes differing only in the clinical vector; divergence per scale."""
    maps = attention_maps(model, image, x_tab)
    maps_alt = attention_maps(model, image, x_tab_alt)
    div = [symmetric_kl(a, b) for a, b in zip(maps, maps_alt)]
    return CounterfactualReport([float(v) for v in np.ravel(x_tab)], [float(v) for v in np.ravel(x_tab_alt)],
                                maps, maps_alt, div)


def metadata_hash(x_tab) -> str:
    return hashlib.sha256(io.dumps([round(float(v), 9) for v in np.ravel(x_tab)]).encode()).hexdigest()[:10]


def _safe(image_id: str) -> str:
    return image_id.replace("/", "__").rsplit(".", 1)[0]


def write_counterfactual(out_dir: str | Path, image_id: str, image: np.ndarray, report: CounterfactualReport,
                         alpha: float = 0.45, cmap: str = "jet") -> list[Path]:
    """Side-by-side overlays per scale plus the JSON report."""
    out_dir = Path(out_dir)
    stem = f"{_safe(image_id)}_{metadata_hash(report.x_tab)}_vs_{metadata_hash(report.x_tab_alt)}"
    written = []
    image = np.asarray(image, dtype=np.float64)
    for s, (a, b) in enumerate(zip(report.maps, report.maps_alt)):
        left = blend(image, max_normalize(upsample(a, image.shape[:2])), alpha, cmap)
        right = blend(image, max_normalize(upsample(b, image.shape[:2])), alpha, cmap)
        gap = np.ones((image.shape[0], 4, 3))
        path = out_dir / f"{stem}_scale{s}.png"
        io.write_rgb(path, np.concatenate([left, gap, right], axis=1))
        written.append(path)
    path = out_dir / f"{stem}.json"
    io.write_json(path, {"image_id": image_id, **report.to_dict()})
    written.append(path)
    return written


def write_overlay(out_dir: str | Path, image_id: str, overlay: HeatmapOverlay, x_tab) -> Path:
    path = Path(out_dir) / f"{_safe(image_id)}_scale{overlay.scale}_{metadata_hash(x_tab)}.png"
    io.write_rgb(path, overlay.rgb)
    return path


def write_threat_map(out_dir: str | Path, image_id: str, tmap: ThreatMap) -> Path:
    path = Path(out_dir) / f"{_safe(image_id)}_threat.png"
    io.write_rgb(path, tmap.rgb)
    return path
