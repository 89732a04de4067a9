"""K-interpolation generators for input mixup, cutmix and a simplified puzzle-mix mask prior.

Convention: ``mix(a, b, lam) = (1 - lam) * a + lam * b``, i.e. lam weights the
second sample. Manifold mixing at hidden layers lives in :mod:`multimix.tinynet`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

from multimix.rand_dist import Rng


class ShapeError(ValueError):
    pass


@dataclass
class Sample:
    features: np.ndarray
    label: np.ndarray
    ident: int = 0
    # (H, W, C) for images, None for plain vectors
    shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).ravel()
        self.label = np.asarray(self.label, dtype=np.float64)
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if np.any(self.label < 0) or abs(self.label.sum() - 1.0) > 1e-9:
            raise ValueError("label must be a probability vector")
        if self.shape is not None:
            self.shape = tuple(int(s) for s in self.shape)
            if int(np.prod(self.shape)) != self.features.size:
                raise ShapeError(f"shape {self.shape} does not match {self.features.size} features")

    @classmethod
    def image(cls, pixels, label, ident=0) -> "Sample":
        px = np.asarray(pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ShapeError("image must be (H, W) or (H, W, C)")
        return cls(px.ravel(), label, ident, px.shape)

    def pixels(self) -> np.ndarray:
        if self.shape is None:
            raise ShapeError("sample is not an image")
        return self.features.reshape(self.shape)


@dataclass
class MixedSample:
    features: np.ndarray
    label: np.ndarray
    src_a: int
    src_b: int
    lam: float  # effective label weight of the second sample
    kind: str
    k: int
    shape: tuple[int, int, int] | None = None
    # extra geometry for previews: box (x0, y0, x1, y1) for cutmix, cell mask for puzzle
    info: dict = field(default_factory=dict)

    def pixels(self) -> np.ndarray:
        if self.shape is None:
            raise ShapeError("mixed sample is not an image")
        return self.features.reshape(self.shape)


def mix(a, b, lam):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot mix shapes {a.shape} and {b.shape}")
    return (1.0 - lam) * a + lam * b


def _check_pair(a: Sample, b: Sample, image=False):
    if a.features.shape != b.features.shape or a.label.shape != b.label.shape:
        raise ShapeError("pair members must have matching feature and label sizes")
    if image:
        if a.shape is None or b.shape is None:
            raise ShapeError("this mixer needs image samples")
        if a.shape != b.shape:
            raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")


def _check_seq(seq):
    seq = np.atleast_1d(np.asarray(seq, dtype=np.float64))
    if seq.size == 0:
        raise ValueError("weight sequence must be non-empty")
    return seq


def _mixed(a, b, features, lam, kind, k, info=None):
    return MixedSample(features, mix(a.label, b.label, lam), a.ident, b.ident,
                       float(lam), kind, k, a.shape, info or {})


def input_multimix(pair: tuple[Sample, Sample], seq) -> list[MixedSample]:
    a, b = pair
    _check_pair(a, b)
    return [_mixed(a, b, mix(a.features, b.features, lam), lam, "input", k)
            for k, lam in enumerate(_check_seq(seq))]


def _round(v):
    return int(np.floor(v + 0.5))


def cut_box(lam, center, width, height):
    """Clipped integer box ``(x0, y0, x1, y1)`` (half-open) of extents W*sqrt(lam), H*sqrt(lam)."""
    cx, cy = center
    rw = width * np.sqrt(lam)
    rh = height * np.sqrt(lam)
    x0 = min(max(_round(cx - rw / 2), 0), width)
    x1 = min(max(_round(cx + rw / 2), 0), width)
    y0 = min(max(_round(cy - rh / 2), 0), height)
    y1 = min(max(_round(cy + rh / 2), 0), height)
    return x0, y0, x1, y1


def cut_multimix(pair: tuple[Sample, Sample], seq, rng: Rng | None = None,
                 center=None) -> list[MixedSample]:
    """K cutmix samples whose boxes share one random center (so they are nested).

    The label weight is the clipped box area over W*H, which is exactly the
    fraction of pixels taken from the second image.
    """
    a, b = pair
    _check_pair(a, b, image=True)
    h, w, _ = a.shape
    if center is None:
        if rng is None:
            raise ValueError("need an rng or an explicit center")
        center = (rng.uniform(0, w), rng.uniform(0, h))
    pa, pb = a.pixels(), b.pixels()
    out = []
    for k, lam in enumerate(_check_seq(seq)):
        x0, y0, x1, y1 = cut_box(lam, center, w, h)
        px = pa.copy()
        px[y0:y1, x0:x1] = pb[y0:y1, x0:x1]
        lam_eff = (x1 - x0) * (y1 - y0) / (w * h)
        out.append(_mixed(a, b, px.ravel(), lam_eff, "cut", k,
                          {"box": (x0, y0, x1, y1), "center": tuple(center), "lam": float(lam)}))
    return out


def cell_bounds(n_pixels, n_cells):
    """Cell edges along one axis; the last cell absorbs the remainder."""
    if not 1 <= n_cells <= n_pixels:
        raise ShapeError(f"cannot split {n_pixels} pixels into {n_cells} cells")
    step = n_pixels // n_cells
    edges = [i * step for i in range(n_cells)] + [n_pixels]
    return edges


def mask_prior(lam, d):
    """P(m = t/d) = C(d, t) lam^t (1 - lam)^(d - t) for t = 0..d."""
    return np.array([comb(d, t) * lam**t * (1 - lam) ** (d - t) for t in range(d + 1)])


def sample_mask(rng: Rng, lam, d, grid) -> np.ndarray:
    """(gh, gw) array of cell mask values in {0, 1/d, ..., 1}."""
    gw, gh = grid
    return rng.binomial(d, lam, size=(gh, gw)) / d


def expand_mask(cells, height, width) -> np.ndarray:
    gh, gw = cells.shape
    ys = cell_bounds(height, gh)
    xs = cell_bounds(width, gw)
    full = np.empty((height, width))
    for i in range(gh):
        for j in range(gw):
            full[ys[i]:ys[i + 1], xs[j]:xs[j + 1]] = cells[i, j]
    return full


def puzzle_multimix(pair: tuple[Sample, Sample], seq, rng: Rng, d: int = 2,
                    grid=(4, 4)) -> list[MixedSample]:
    """K puzzle-style masks, one per weight, with identity transport and no saliency term.

    Each cell value is Binomial(d, lam_k) / d; pixels take (1 - m) * A + m * B from
    their cell, and the label weight is the plain mean of the cell values.
    """
    a, b = pair
    _check_pair(a, b, image=True)
    if int(d) < 1:
        raise ValueError("d must be a positive integer")
    h, w, _ = a.shape
    cell_bounds(w, grid[0])
    cell_bounds(h, grid[1])
    pa, pb = a.pixels(), b.pixels()
    out = []
    for k, lam in enumerate(_check_seq(seq)):
        cells = sample_mask(rng, lam, d, grid)
        m = expand_mask(cells, h, w)[:, :, None]
        px = (1.0 - m) * pa + m * pb
        out.append(_mixed(a, b, px.ravel(), cells.mean(), "puzzle", k,
                          {"cells": cells, "lam": float(lam)}))
    return out


def mixup(pair: tuple[Sample, Sample], lam) -> MixedSample:
    """Single-interpolation input mixup."""
    a, b = pair
    _check_pair(a, b)
    return _mixed(a, b, mix(a.features, b.features, lam), lam, "input", 0)


def cutmix(pair: tuple[Sample, Sample], lam, rng: Rng) -> MixedSample:
    """Single-box cutmix, drawing its center from ``rng`` the same way the K-box version does."""
    a, b = pair
    _check_pair(a, b, image=True)
    h, w, _ = a.shape
    center = (rng.uniform(0, w), rng.uniform(0, h))
    x0, y0, x1, y1 = cut_box(lam, center, w, h)
    mask = np.zeros((h, w, 1))
    mask[y0:y1, x0:x1] = 1.0
    px = np.where(mask > 0, b.pixels(), a.pixels())
    return _mixed(a, b, px.ravel(), mask.mean(), "cut", 0,
                  {"box": (x0, y0, x1, y1), "center": center, "lam": float(lam)})


def puzzle_mix(pair: tuple[Sample, Sample], lam, rng: Rng, d: int = 2, grid=(4, 4)) -> MixedSample:
    """Single mask from the binomial prior (identity transport)."""
    a, b = pair
    _check_pair(a, b, image=True)
    h, w, _ = a.shape
    cells = sample_mask(rng, lam, d, grid)
    m = expand_mask(cells, h, w)[:, :, None]
    return _mixed(a, b, (a.pixels() + m * (b.pixels() - a.pixels())).ravel(), cells.mean(),
                  "puzzle", 0, {"cells": cells, "lam": float(lam)})


def preview_to_image(mixed: MixedSample | Sample) -> np.ndarray:
    """uint8 (H, W, C) raster, values clamped to [0, 1] then scaled to 0..255."""
    px = mixed.pixels()
    return np.round(np.clip(px, 0.0, 1.0) * 255.0).astype(np.uint8)
