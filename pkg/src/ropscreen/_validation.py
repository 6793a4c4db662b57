"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


class DegenerateImageError(ValueError):
    """Raised when an image has no usable retinal foreground."""


class MissingMetadataError(ValueError):
    """Raised when a clinical feature is absent; nothing is imputed."""


def check_rgb_image(img, *, min_size: int = 64) -> np.ndarray:
    """Validate a raw ``H x W x 3`` capture with intensities in [0, 255]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    h, w = img.shape[:2]
    if h < min_size or w < min_size:
        raise ValueError(f"image {h}x{w} is smaller than {min_size}x{min_size}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0 or img.max() > 255:
        raise ValueError("raw intensities must lie in [0, 255]")
    return img


def check_unit_image(img) -> np.ndarray:
    """Validate a float image normalized to [0, 1] (``H x W`` or ``H x W x C``)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ValueError(f"expected a 2-D or 3-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img


def check_clinical(x_tab, *, n_features: int = 3) -> np.ndarray:
    """Return clinical rows as a float ``(n, n_features)`` array.

    NaN entries mean missing metadata and raise :class:`MissingMetadataError`.
    """
    arr = np.asarray(x_tab, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != n_features:
        raise ValueError(f"expected clinical rows of width {n_features}, got shape {arr.shape}")
    if np.isnan(arr).any():
        rows, cols = np.nonzero(np.isnan(arr))
        raise MissingMetadataError(f"missing clinical feature(s) at columns {sorted(set(cols.tolist()))} "
                                   f"in {len(set(rows.tolist()))} row(s)")
    return check_array(arr, dtype=np.float64)


def check_labels(y, *, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes - 1}]")
    return y.astype(np.int64)
