"""Global HOG features, response-map local descriptors and their Jacobian.

Images are 2-D float arrays ``(height, width)`` with intensities in [0, 1].

Local descriptors follow a simplified SIFT layout (4x4 spatial cells times
8 signed orientation bins).  Orientation responses are blurred once per
image and turned into summed-area tables so that any cell histogram costs
four lookups.  Blurred responses are quantized to a 2**-16 grid before
integration, which makes every rectangle query exact in float64 regardless
of summation order.  Dataset-level caches keep the same tables as wrapped
uint32 counts of that quantum: rectangle differences taken modulo 2**32 are
exact whenever the true rectangle sum is below 2**32 quanta.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument
from .shapes import as_points

ORIENTATION_BINS = 8
SPATIAL_BINS = 4
DESCRIPTOR_DIM = SPATIAL_BINS * SPATIAL_BINS * ORIENTATION_BINS
NORM_FLOOR = 1e-6
QUANTUM = 2.0 ** -16


def _check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise InvalidArgument(f"expected a non-empty 2-D grayscale image, got shape {img.shape}")
    return img


def resize_bilinear(img, size: int) -> np.ndarray:
    """Resample to ``size x size`` with pixel-center aligned bilinear interpolation."""
    img = _check_image(img)
    h, w = img.shape
    if (h, w) == (size, size):
        return img.copy()

    def coords(n_src):
        c = (np.arange(size) + 0.5) * (n_src / size) - 0.5
        c = np.clip(c, 0, n_src - 1)
        lo = np.floor(c).astype(np.intp)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(h)
    x0, x1, fx = coords(w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def image_gradients(img) -> tuple[np.ndarray, np.ndarray]:
    """Centered [-1, 0, 1] differences with replicated borders."""
    p = np.pad(_check_image(img), 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return gx, gy


# ---------------------------------------------------------------------------
# HOG


@dataclass(frozen=True)
class HogConfig:
    resize_to: int = 64
    block_size: int = 16
    block_stride: int = 8
    cell_size: int = 8
    num_bins: int = 9

    def __post_init__(self):
        for name in ("resize_to", "block_size", "block_stride", "cell_size", "num_bins"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"HogConfig.{name} must be positive")
        if self.block_size % self.cell_size:
            raise InvalidArgument("block_size must be divisible by cell_size")
        if self.block_size > self.resize_to or (self.resize_to - self.block_size) % self.block_stride:
            raise InvalidArgument("blocks must tile the resized image exactly")

    @property
    def blocks_per_side(self) -> int:
        return (self.resize_to - self.block_size) // self.block_stride + 1

    @property
    def dim(self) -> int:
        cells = self.block_size // self.cell_size
        return self.blocks_per_side ** 2 * cells ** 2 * self.num_bins


def _cell_histograms(img: np.ndarray, cfg: HogConfig) -> np.ndarray:
    gx, gy = image_gradients(img)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    pos = theta / (np.pi / cfg.num_bins) - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.intp) % cfg.num_bins
    hi = (lo + 1) % cfg.num_bins

    n_cells = cfg.resize_to // cfg.cell_size
    size = n_cells * cfg.cell_size
    rows = np.arange(size) // cfg.cell_size
    cell_idx = (rows[:, None] * n_cells + rows[None, :])
    hist = np.zeros(n_cells * n_cells * cfg.num_bins)
    np.add.at(hist, (cell_idx * cfg.num_bins + lo[:size, :size]).ravel(),
              (mag * (1 - frac))[:size, :size].ravel())
    np.add.at(hist, (cell_idx * cfg.num_bins + hi[:size, :size]).ravel(),
              (mag * frac)[:size, :size].ravel())
    return hist.reshape(n_cells, n_cells, cfg.num_bins)


def l2_hys(v: np.ndarray, clip: float = 0.2, eps: float = 1e-5) -> np.ndarray:
    v = v / np.sqrt((v ** 2).sum(axis=-1, keepdims=True) + eps ** 2)
    v = np.minimum(v, clip)
    return v / np.sqrt((v ** 2).sum(axis=-1, keepdims=True) + eps ** 2)


def extract_global(img, cfg: HogConfig = HogConfig()) -> np.ndarray:
    """HOG descriptor of the whole image after resampling to ``cfg.resize_to``."""
    img = resize_bilinear(img, cfg.resize_to)
    cells = _cell_histograms(img, cfg)
    per_block = cfg.block_size // cfg.cell_size
    step = cfg.block_stride // cfg.cell_size if cfg.block_stride % cfg.cell_size == 0 else None
    blocks = []
    for by in range(cfg.blocks_per_side):
        for bx in range(cfg.blocks_per_side):
            if step is None:
                raise InvalidArgument("block_stride must be a multiple of cell_size")
            cy, cx = by * step, bx * step
            blocks.append(cells[cy:cy + per_block, cx:cx + per_block].ravel())
    return l2_hys(np.asarray(blocks)).ravel()


# ---------------------------------------------------------------------------
# Response maps


def blurred_responses(img, sigma: float) -> np.ndarray:
    """Eight quantized, Gaussian-blurred signed orientation response maps ``(8, H, W)``."""
    if not sigma > 0:
        raise InvalidArgument("blur sigma must be positive")
    gx, gy = image_gradients(img)
    mag = np.hypot(gx, gy) / 2.0
    pos = np.mod(np.arctan2(gy, gx), 2 * np.pi) / (2 * np.pi / ORIENTATION_BINS)
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.intp) % ORIENTATION_BINS
    hi = (lo + 1) % ORIENTATION_BINS
    maps = np.zeros((ORIENTATION_BINS,) + mag.shape)
    for k in range(ORIENTATION_BINS):
        maps[k] = np.where(lo == k, mag * (1 - frac), 0.0) + np.where(hi == k, mag * frac, 0.0)
    maps = ndimage.gaussian_filter(maps, sigma=(0, sigma, sigma), mode="constant")
    return np.round(maps / QUANTUM) * QUANTUM


def integral_maps(blurred: np.ndarray) -> np.ndarray:
    """Summed-area tables with a zero leading row and column, ``(..., H+1, W+1)``."""
    blurred = np.asarray(blurred, dtype=np.float64)
    out = np.zeros(blurred.shape[:-2] + (blurred.shape[-2] + 1, blurred.shape[-1] + 1))
    out[..., 1:, 1:] = blurred.cumsum(axis=-2).cumsum(axis=-1)
    return out


@dataclass(frozen=True)
class ResponseMaps:
    integrals: np.ndarray  # (8, H+1, W+1)
    blur_sigma: float

    @property
    def height(self) -> int:
        return self.integrals.shape[1] - 1

    @property
    def width(self) -> int:
        return self.integrals.shape[2] - 1

    @classmethod
    def from_blurred(cls, blurred: np.ndarray, blur_sigma: float = 0.0) -> "ResponseMaps":
        return cls(integral_maps(blurred), blur_sigma)

    def box_sum(self, y0: int, x0: int, y1: int, x1: int) -> np.ndarray:
        """Per-orientation sum over rows ``[y0, y1)`` and columns ``[x0, x1)``.

        The rectangle is clipped to the image; outside area contributes zero.
        """
        y0, y1 = (min(max(v, 0), self.height) for v in (y0, y1))
        x0, x1 = (min(max(v, 0), self.width) for v in (x0, x1))
        I = self.integrals
        return I[:, y1, x1] - I[:, y0, x1] - I[:, y1, x0] + I[:, y0, x0]


def build_response_maps(img, sigma: float) -> ResponseMaps:
    return ResponseMaps(integral_maps(blurred_responses(img, sigma)), float(sigma))


# ---------------------------------------------------------------------------
# Local descriptors


@dataclass(frozen=True)
class LocalDescriptorConfig:
    patch_size: int = 32
    epsilon: float = 2.0
    blur_sigma: float | None = None  # None -> patch_size / 8
    spatial_bins: int = field(default=SPATIAL_BINS, init=False)
    orientation_bins: int = field(default=ORIENTATION_BINS, init=False)

    def __post_init__(self):
        if self.patch_size < SPATIAL_BINS or self.patch_size % SPATIAL_BINS:
            raise InvalidArgument("patch_size must be a positive multiple of 4")
        if not self.epsilon > 0:
            raise InvalidArgument("epsilon must be positive")
        if self.blur_sigma is not None and not self.blur_sigma > 0:
            raise InvalidArgument("blur_sigma must be positive")

    @property
    def sigma(self) -> float:
        return float(self.blur_sigma) if self.blur_sigma is not None else self.patch_size / 8.0

    @property
    def dim(self) -> int:
        return DESCRIPTOR_DIM


def descriptors_at(integrals: np.ndarray, points: np.ndarray, patch_size: int, rows=None) -> np.ndarray:
    """Normalized 128-d descriptors for a batch of points.

    integrals: ``(M, 8, H+1, W+1)`` float64 tables or wrapped uint32 tables;
    points: ``(N, K, 2)`` as (x, y); ``rows`` selects the table of each of the
    N samples (default: identity, M == N).
    Returns ``(N, K, 128)`` ordered as (cell row, cell column, orientation).
    """
    _, _, hp1, wp1 = integrals.shape
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    cx = np.floor(points[..., 0] + 0.5).astype(np.int64)
    cy = np.floor(points[..., 1] + 0.5).astype(np.int64)
    cell = patch_size // SPATIAL_BINS
    offsets = np.arange(SPATIAL_BINS + 1) * cell - patch_size // 2
    xs = np.clip(cx[..., None] + offsets, 0, wp1 - 1)
    ys = np.clip(cy[..., None] + offsets, 0, hp1 - 1)
    rows = np.arange(n) if rows is None else np.asarray(rows)
    # advanced indices around a slice: result is (N, K, 5, 5, 8)
    c = integrals[rows[:, None, None, None], :, ys[:, :, :, None], xs[:, :, None, :]]
    cells = c[:, :, 1:, 1:] - c[:, :, :-1, 1:] - c[:, :, 1:, :-1] + c[:, :, :-1, :-1]
    if cells.dtype == np.uint32:
        cells = cells.astype(np.float64) * QUANTUM
    d = cells.reshape(cells.shape[:2] + (DESCRIPTOR_DIM,))
    norm = np.sqrt((d ** 2).sum(axis=-1, keepdims=True))
    return d / np.maximum(norm, NORM_FLOOR)


def extract_local_batch(integrals: np.ndarray, shapes: np.ndarray, cfg: LocalDescriptorConfig,
                        rows=None) -> np.ndarray:
    """Concatenated per-landmark descriptors ``(N, 128P)`` for shapes ``(N, 2P)``."""
    pts = as_points(shapes)
    d = descriptors_at(integrals, pts, cfg.patch_size, rows)
    return d.reshape(d.shape[0], -1)


def local_jacobian_batch(integrals: np.ndarray, shapes: np.ndarray, cfg: LocalDescriptorConfig,
                         rows=None) -> np.ndarray:
    """Central-difference descriptor Jacobian blocks ``(N, P, 128, 2)``.

    Block ``[n, p]`` holds d(descriptor of landmark p)/d(x_p, y_p); all
    cross-landmark entries of the full Jacobian are structurally zero.
    """
    pts = as_points(shapes)
    n, P, _ = pts.shape
    e = cfg.epsilon
    steps = np.array([[e, 0.0], [-e, 0.0], [0.0, e], [0.0, -e]])
    probe = (pts[:, :, None, :] + steps).reshape(n, 4 * P, 2)
    d = descriptors_at(integrals, probe, cfg.patch_size, rows).reshape(n, P, 4, DESCRIPTOR_DIM)
    jac = np.empty((n, P, DESCRIPTOR_DIM, 2))
    jac[..., 0] = (d[:, :, 0] - d[:, :, 1]) / (2 * e)
    jac[..., 1] = (d[:, :, 2] - d[:, :, 3]) / (2 * e)
    return jac


def extract_local(maps: ResponseMaps, s, cfg: LocalDescriptorConfig) -> np.ndarray:
    return extract_local_batch(maps.integrals[None], np.asarray(s, dtype=np.float64)[None], cfg)[0]


def local_jacobian(maps: ResponseMaps, s, cfg: LocalDescriptorConfig) -> np.ndarray:
    """Jacobian blocks ``(P, 128, 2)`` of :func:`extract_local` at shape ``s``."""
    return local_jacobian_batch(maps.integrals[None], np.asarray(s, dtype=np.float64)[None], cfg)[0]


def assemble_jacobian(blocks: np.ndarray) -> np.ndarray:
    """Dense block-diagonal ``(dP, 2P)`` matrix from ``(P, d, 2)`` blocks."""
    P, d, _ = blocks.shape
    full = np.zeros((P * d, 2 * P))
    for p in range(P):
        full[p * d:(p + 1) * d, 2 * p:2 * p + 2] = blocks[p]
    return full


# ---------------------------------------------------------------------------
# Dataset-level caches


def wrapped_tables(blurred: np.ndarray) -> np.ndarray:
    """Summed-area tables of quantized maps as uint32 counts modulo 2**32."""
    counts = np.round(np.asarray(blurred, dtype=np.float64) / QUANTUM).astype(np.int64)
    out = np.zeros(counts.shape[:-2] + (counts.shape[-2] + 1, counts.shape[-1] + 1), dtype=np.int64)
    out[..., 1:, 1:] = counts.cumsum(axis=-2).cumsum(axis=-1)
    return (out & 0xFFFFFFFF).astype(np.uint32)


class MapBank:
    """Summed-area tables for many images, one stack per blur sigma.

    Tables are wrapped uint32 (see module docstring) and padded with zeros
    to the largest image, so out-of-image regions contribute nothing.
    """

    def __init__(self, images: Sequence[np.ndarray], sigmas: Sequence[float]):
        self.sigmas = sorted({float(s) for s in sigmas})
        self.count = len(images)
        h = max((np.shape(im)[0] for im in images), default=1)
        w = max((np.shape(im)[1] for im in images), default=1)
        self.height, self.width = h, w
        self.tables = {}
        for sigma in self.sigmas:
            tables = np.zeros((len(images), ORIENTATION_BINS, h + 1, w + 1), dtype=np.uint32)
            for i, im in enumerate(images):
                b = blurred_responses(im, sigma)
                padded = np.zeros((ORIENTATION_BINS, h, w))
                padded[:, :b.shape[1], :b.shape[2]] = b
                tables[i] = wrapped_tables(padded)
            self.tables[sigma] = tables


class ResponseMapFeatures:
    """Shape-indexed feature provider used by the cascade for a subset of a bank."""

    def __init__(self, bank: MapBank, local_cfgs: Sequence[LocalDescriptorConfig], idx=None):
        self.bank = bank
        self.local_cfgs = list(local_cfgs)
        self.idx = np.arange(bank.count) if idx is None else np.asarray(idx)

    def extract(self, t: int, shapes: np.ndarray) -> np.ndarray:
        cfg = self.local_cfgs[t - 1]
        return extract_local_batch(self.bank.tables[cfg.sigma], shapes, cfg, self.idx)

    def jacobian(self, t: int, shapes: np.ndarray) -> np.ndarray:
        cfg = self.local_cfgs[t - 1]
        return local_jacobian_batch(self.bank.tables[cfg.sigma], shapes, cfg, self.idx)


class SingleImageFeatures:
    """Feature provider for one image, building maps lazily per blur sigma."""

    def __init__(self, img, local_cfgs: Sequence[LocalDescriptorConfig]):
        self.img = _check_image(img)
        self.local_cfgs = list(local_cfgs)
        self._maps: dict[float, np.ndarray] = {}

    def _integrals(self, t: int) -> np.ndarray:
        sigma = self.local_cfgs[t - 1].sigma
        if sigma not in self._maps:
            self._maps[sigma] = build_response_maps(self.img, sigma).integrals[None]
        return self._maps[sigma]

    def extract(self, t: int, shapes: np.ndarray) -> np.ndarray:
        return extract_local_batch(self._integrals(t), shapes, self.local_cfgs[t - 1])

    def jacobian(self, t: int, shapes: np.ndarray) -> np.ndarray:
        return local_jacobian_batch(self._integrals(t), shapes, self.local_cfgs[t - 1])
