"""Fundus cleaning: aperture masking, gamma/CLAHE enhancement, letterboxed resizing.

Order of operations is threshold -> erode -> mask -> gamma -> CLAHE -> letterbox -> resize.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from . import io
from ._validation import DegenerateImageError, check_rgb_image, check_unit_image

STRUCTURE_SIZE = 384
TEXTURE_SIZE = 768

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class CleanFundusImage:
    """Masked, enhanced image at a working resolution.

    ``pad_record`` is ``(top, bottom, left, right)`` in source pixels added to
    square the frame before resampling.
    """

    pixels: np.ndarray
    mask: np.ndarray
    resolution_tag: str
    pad_record: tuple[int, int, int, int] = (0, 0, 0, 0)
    source_id: str = ""
    params: dict = field(default_factory=dict)


def luminance(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ _LUMA


def compute_aperture_mask(img, threshold: float = 10.0) -> np.ndarray:
    """Foreground mask: luminance above ``threshold`` eroded by a 3x3 square.

    Pixels outside the frame count as background, so the border ring of a
    full-frame mask is always eroded away.
    """
    img = check_rgb_image(img, min_size=1)
    if not 0.0 <= threshold <= 255.0:
        raise ValueError("threshold must lie in [0, 255]")
    raw = luminance(img) > threshold
    mask = ndimage.binary_erosion(raw, structure=np.ones((3, 3), bool), border_value=0)
    if not mask.any():
        raise DegenerateImageError("aperture mask is empty after erosion")
    return mask


def apply_mask(pixels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if pixels.ndim == 3:
        return pixels * mask[..., None]
    return pixels * mask


def gamma_correct(pixels: np.ndarray, gamma: float = 1.5) -> np.ndarray:
    """Power-law transfer ``out = in ** gamma`` on [0, 1] data."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return np.power(pixels, gamma)


def apply_clahe(pixels: np.ndarray, clip: float = 2.0, tiles: tuple[int, int] = (8, 8),
                mode: str = "lightness") -> np.ndarray:
    """CLAHE on [0, 1] RGB floats, on the L channel of CIELAB or on each RGB channel.

    The equalization itself runs on 8-bit data, as OpenCV's CLAHE does.
    """
    clahe = cv2.createCLAHE(clipLimit=float(clip), tileGridSize=(int(tiles[1]), int(tiles[0])))
    u8 = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    if mode == "lightness":
        lab = cv2.cvtColor(u8, cv2.COLOR_RGB2LAB)
        lab[..., 0] = clahe.apply(np.ascontiguousarray(lab[..., 0]))
        out = cv2.cvtColor(lab, cv2.COLOR_LAB2RGB)
    elif mode == "rgb":
        out = np.stack([clahe.apply(np.ascontiguousarray(u8[..., c])) for c in range(3)], axis=-1)
    else:
        raise ValueError(f"unknown CLAHE mode {mode!r}")
    return out.astype(np.float64) / 255.0


def enhance(pixels, mask: np.ndarray, gamma: float = 1.5, clahe_clip: float = 2.0,
            clahe_tiles: tuple[int, int] = (8, 8), clahe_mode: str = "lightness") -> np.ndarray:
    """Gamma then CLAHE inside the aperture; background forced to exactly 0."""
    pixels = check_unit_image(pixels)
    if mask.shape != pixels.shape[:2]:
        raise ValueError("mask is not aligned with the image")
    out = gamma_correct(apply_mask(pixels, mask), gamma)
    out = apply_clahe(out, clahe_clip, clahe_tiles, clahe_mode)
    return apply_mask(out, mask)


def letterbox(pixels: np.ndarray) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Zero-pad the short side so the frame becomes square, content centred."""
    h, w = pixels.shape[:2]
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    pad = (top, side - h - top, left, side - w - left)
    width = [(pad[0], pad[1]), (pad[2], pad[3])] + [(0, 0)] * (pixels.ndim - 2)
    return np.pad(pixels, width, mode="constant"), pad


def resize_preserve_geometry(img: CleanFundusImage, target: int) -> CleanFundusImage:
    """Letterbox to a square then resample to ``target x target``.

    Downsampling uses area averaging (anti-aliased), upsampling bilinear. The
    mask follows with nearest-neighbour sampling and is re-applied, so the
    background stays exactly zero.
    """
    if target < 1:
        raise ValueError("target size must be positive")
    boxed, pad = letterbox(img.pixels)
    mask, _ = letterbox(img.mask.astype(np.uint8))
    side = boxed.shape[0]
    if side != target:
        interp = cv2.INTER_AREA if target < side else cv2.INTER_LINEAR
        boxed = cv2.resize(boxed.astype(np.float32), (target, target), interpolation=interp).astype(np.float64)
        mask = cv2.resize(mask, (target, target), interpolation=cv2.INTER_NEAREST)
    mask = mask.astype(bool)
    pixels = np.clip(apply_mask(boxed, mask), 0.0, 1.0)
    tag = {STRUCTURE_SIZE: "structure_384", TEXTURE_SIZE: "texture_768"}.get(target, f"custom_{target}")
    return CleanFundusImage(pixels=pixels, mask=mask, resolution_tag=tag, pad_record=pad,
                            source_id=img.source_id, params=dict(img.params, target=target))


def preprocess_image(raw, target: int, *, source_id: str = "", threshold: float = 10.0,
                     gamma: float = 1.5, clahe_clip: float = 2.0, clahe_tiles=(8, 8),
                     clahe_mode: str = "lightness") -> CleanFundusImage:
    """Full cleaning pipeline for one raw capture."""
    raw = check_rgb_image(raw)
    mask = compute_aperture_mask(raw, threshold)
    pixels = enhance(np.asarray(raw, dtype=np.float64) / 255.0, mask, gamma, clahe_clip,
                     tuple(clahe_tiles), clahe_mode)
    params = dict(threshold=threshold, gamma=gamma, clahe_clip=clahe_clip,
                  clahe_tiles=list(clahe_tiles), clahe_mode=clahe_mode)
    clean = CleanFundusImage(pixels=pixels, mask=mask, resolution_tag="native",
                             source_id=source_id, params=params)
    return resize_preserve_geometry(clean, target)


class FundusPreprocessor(BaseEstimator, TransformerMixin):
    """Stateless transformer mapping raw RGB captures to cleaned float images.

    ``transform`` accepts a sequence of ``H x W x 3`` uint8 arrays (sizes may
    differ) and returns an ``(n, target, target, 3)`` float array.
    """

    def __init__(self, target=STRUCTURE_SIZE, threshold=10.0, gamma=1.5, clahe_clip=2.0,
                 clahe_tiles=(8, 8), clahe_mode="lightness"):
        self.target = target
        self.threshold = threshold
        self.gamma = gamma
        self.clahe_clip = clahe_clip
        self.clahe_tiles = clahe_tiles
        self.clahe_mode = clahe_mode

    def fit(self, X=None, y=None):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        self.n_features_in_ = 3
        return self

    def transform_one(self, raw, source_id: str = "") -> CleanFundusImage:
        return preprocess_image(raw, int(self.target), source_id=source_id, threshold=self.threshold,
                                gamma=self.gamma, clahe_clip=self.clahe_clip,
                                clahe_tiles=self.clahe_tiles, clahe_mode=self.clahe_mode)

    def transform(self, X):
        return np.stack([self.transform_one(x).pixels for x in X])

    def __sklearn_is_fitted__(self):
        return True


def write_processed(out_dir: str | Path, clean: CleanFundusImage) -> Path:
    """Emit the PNG and append its sidecar record to ``sidecar.jsonl``."""
    out_dir = Path(out_dir)
    name = f"{Path(clean.source_id).stem or 'image'}_{clean.resolution_tag}.png"
    io.write_rgb(out_dir / name, clean.pixels)
    io.append_jsonl(out_dir / "sidecar.jsonl", {
        "source_id": clean.source_id, "file": name, "resolution_tag": clean.resolution_tag,
        "pad_record": list(clean.pad_record), "parameters": clean.params,
    })
    return out_dir / name
