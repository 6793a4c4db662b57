"""Multiscale Hessian (Frangi) vesselness and four-channel tensor assembly."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin


@dataclass(frozen=True)
class VesselnessConfig:
    """Filter settings.

    ``c=None`` selects the adaptive structureness constant: half the largest
    Hessian Frobenius norm over the image, per scale. ``dark_vessels`` inverts
    the input first so dark tubes become bright ridges.
    """

    scales: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0)
    beta: float = 0.5
    c: float | None = None
    dark_vessels: bool = True

    def __post_init__(self):
        if len(self.scales) == 0:
            raise ValueError("at least one scale is required")
        if any(not s > 0 for s in self.scales):
            raise ValueError("scales must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.c is not None and not self.c > 0:
            raise ValueError("c must be positive")


@dataclass
class HessianEigen:
    lambda1: np.ndarray
    lambda2: np.ndarray
    frobenius: np.ndarray


@dataclass
class VesselnessMap:
    values: np.ndarray
    c_values: list[float] = field(default_factory=list)
    best_scale: np.ndarray | None = None


_FLAT = 1e-12


def derivative_kernels(sigma: float, truncate: float = 4.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sampled Gaussian correlation kernels of order 0, 1 and 2.

    Moments are corrected after truncation: the smoothing kernel sums to 1,
    the derivative kernels sum to 0 (constants give exactly no response) and
    respond with exactly 1 to ``x`` and ``x**2 / 2`` respectively.
    """
    r = int(truncate * sigma + 0.5)
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    d1 = x * g
    d1 /= np.sum(d1 * x)
    d2 = (x * x / sigma ** 4 - 1.0 / sigma ** 2) * g
    d2 -= g * d2.sum()
    d2 /= np.sum(d2 * x * x / 2.0)
    return g, d1, d2


def hessian(image: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scale-normalized (sigma**2) Gaussian second derivatives (Hrr, Hrc, Hcc)."""
    image = np.asarray(image, dtype=np.float64)
    g, d1, d2 = derivative_kernels(sigma)

    def sep(k_rows, k_cols):
        tmp = ndimage.correlate1d(image, k_rows, axis=0, mode="reflect")
        return ndimage.correlate1d(tmp, k_cols, axis=1, mode="reflect")

    s2 = sigma * sigma
    return sep(d2, g) * s2, sep(d1, d1) * s2, sep(g, d2) * s2


def eig2x2_sorted(a: np.ndarray, b: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues of the symmetric matrix [[a, b], [b, d]], ordered so |l1| <= |l2|."""
    mean = 0.5 * (a + d)
    rad = np.sqrt((0.5 * (a - d)) ** 2 + b * b)
    e1, e2 = mean + rad, mean - rad
    swap = np.abs(e1) > np.abs(e2)
    return np.where(swap, e2, e1), np.where(swap, e1, e2)


def hessian_eigen(green: np.ndarray, sigma: float) -> HessianEigen:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    hrr, hrc, hcc = hessian(green, sigma)
    l1, l2 = eig2x2_sorted(hrr, hrc, hcc)
    return HessianEigen(l1, l2, np.sqrt(hrr ** 2 + 2.0 * hrc ** 2 + hcc ** 2))


def vesselness_response(l1: np.ndarray, l2: np.ndarray, beta: float, c: float) -> np.ndarray:
    """Single-scale response; zero where l2 > 0 and where l2 == 0."""
    out = np.zeros_like(l2, dtype=np.float64)
    if not c > 0:
        return out
    ok = l2 < 0
    rb2 = (l1[ok] / l2[ok]) ** 2
    s2 = l1[ok] ** 2 + l2[ok] ** 2
    out[ok] = np.exp(-rb2 / (2.0 * beta * beta)) * (1.0 - np.exp(-s2 / (2.0 * c * c)))
    return out


def frangi_vesselness(green: np.ndarray, cfg: VesselnessConfig = VesselnessConfig(),
                      *, return_scales: bool = False):
    """Max-over-scales vesselness of a single-channel image.

    With ``return_scales=True`` a list of single-scale responses is also returned.
    """
    img = np.asarray(green, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("vesselness expects a single-channel image")
    if cfg.dark_vessels:
        img = 1.0 - img
    out = np.zeros_like(img)
    best = np.zeros(img.shape, dtype=np.int64)
    c_values, per_scale = [], []
    for k, sigma in enumerate(cfg.scales):
        eig = hessian_eigen(img, sigma)
        c = cfg.c if cfg.c is not None else 0.5 * float(eig.frobenius.max())
        if cfg.c is None and c <= _FLAT:
            c = 0.0  # no structure at this scale, only rounding noise
        c_values.append(c)
        resp = vesselness_response(eig.lambda1, eig.lambda2, cfg.beta, c)
        per_scale.append(resp)
        better = resp > out
        best[better] = k
        out = np.maximum(out, resp)
    vmap = VesselnessMap(np.clip(out, 0.0, 1.0), c_values, best)
    if return_scales:
        return vmap, per_scale
    return vmap


def compute_vmap(rgb: np.ndarray, cfg: VesselnessConfig = VesselnessConfig(),
                 mask: np.ndarray | None = None) -> VesselnessMap:
    """Vesselness of the green channel of a cleaned RGB image.

    Outside the aperture the green channel is filled with the foreground mean
    before filtering, and responses within ``2 * max(scales)`` of the aperture
    rim are suppressed.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    green = rgb[..., 1].copy()
    if mask is None:
        mask = rgb.max(axis=-1) > 0
    if mask.any() and not mask.all():
        green[~mask] = green[mask].mean()
    vmap = frangi_vesselness(green, cfg)
    if not mask.all():
        r = int(np.ceil(2 * max(cfg.scales)))
        inner = ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool), iterations=r, border_value=0)
        vmap.values = vmap.values * inner
    return vmap


def build_4channel(rgb: np.ndarray, vmap: np.ndarray) -> np.ndarray:
    """Depth-wise concatenation (R, G, B, VMAP) of a ``3 x h x w`` tensor and an ``h x w`` map."""
    rgb = np.asarray(rgb)
    vmap = np.asarray(vmap)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected a 3 x h x w RGB tensor, got {rgb.shape}")
    if vmap.shape != rgb.shape[1:]:
        raise ValueError(f"vmap shape {vmap.shape} does not match RGB spatial shape {rgb.shape[1:]}")
    return np.concatenate([rgb, vmap[None].astype(rgb.dtype, copy=False)], axis=0)


class VesselnessFilter(BaseEstimator, TransformerMixin):
    """Transformer wrapper: RGB images in, vesselness maps out."""

    def __init__(self, scales=(1.0, 2.0, 3.0, 4.0), beta=0.5, c=None, dark_vessels=True):
        self.scales = scales
        self.beta = beta
        self.c = c
        self.dark_vessels = dark_vessels

    def _config(self) -> VesselnessConfig:
        return VesselnessConfig(tuple(float(s) for s in self.scales), float(self.beta),
                                None if self.c is None else float(self.c), bool(self.dark_vessels))

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X):
        cfg = getattr(self, "config_", None) or self._config()
        return np.stack([compute_vmap(x, cfg).values for x in X])
