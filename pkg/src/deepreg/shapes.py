"""Landmark shapes and the inter-pupil normalized error.

A shape is a flat float array ``[x1, y1, ..., xP, yP]`` in pixel units.
The origin is the center of the top-left pixel, x grows rightward and
y downward.  Batches of shapes are ``(N, 2P)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometry, InvalidArgument


def as_points(s: np.ndarray) -> np.ndarray:
    """View a shape (or batch of shapes) as ``(..., P, 2)`` points."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] % 2:
        raise InvalidArgument(f"shape length {s.shape[-1]} is odd")
    return s.reshape(s.shape[:-1] + (s.shape[-1] // 2, 2))


def as_shape(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points.reshape(points.shape[:-2] + (-1,))


@dataclass(frozen=True)
class LandmarkLayout:
    """Landmark count, mirror pairing and the eye subsets used for normalization."""

    P: int
    flip_permutation: tuple[int, ...]
    left_eye: tuple[int, ...]
    right_eye: tuple[int, ...]

    def __post_init__(self):
        perm = tuple(int(i) for i in self.flip_permutation)
        object.__setattr__(self, "flip_permutation", perm)
        object.__setattr__(self, "left_eye", tuple(int(i) for i in self.left_eye))
        object.__setattr__(self, "right_eye", tuple(int(i) for i in self.right_eye))
        if self.P < 1:
            raise InvalidArgument("P must be positive")
        if sorted(perm) != list(range(self.P)):
            raise InvalidArgument("flip_permutation is not a permutation of 0..P-1")
        if any(perm[perm[i]] != i for i in range(self.P)):
            raise InvalidArgument("flip_permutation is not an involution")
        if not self.left_eye or not self.right_eye:
            raise InvalidArgument("eye index subsets must be non-empty")
        if set(self.left_eye) & set(self.right_eye):
            raise InvalidArgument("eye index subsets must be disjoint")
        for i in self.left_eye + self.right_eye:
            if not 0 <= i < self.P:
                raise InvalidArgument(f"eye index {i} out of range for P={self.P}")


def ibug68_layout() -> LandmarkLayout:
    """The 68-point iBUG/300-W markup; eye centers are means of the six eye points."""
    perm = list(range(68))

    def pair(a, b):
        perm[a], perm[b] = b, a

    for i in range(8):
        pair(i, 16 - i)
    for i in range(5):
        pair(17 + i, 26 - i)
    pair(31, 35)
    pair(32, 34)
    for a, b in [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]:
        pair(a, b)
    for a, b in [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]:
        pair(a, b)
    for a, b in [(60, 64), (61, 63), (65, 67)]:
        pair(a, b)
    return LandmarkLayout(68, tuple(perm), tuple(range(36, 42)), tuple(range(42, 48)))


def _check_pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise InvalidArgument(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.shape[-1] == 0 or pred.shape[-1] % 2:
        raise InvalidArgument(f"invalid shape length {pred.shape[-1]}")
    return pred, truth


def normalized_error(pred, truth, d_pupils: float) -> float:
    """Mean point-to-point distance divided by the inter-pupil distance."""
    pred, truth = _check_pair(pred, truth)
    if pred.ndim != 1:
        raise InvalidArgument("normalized_error expects single shapes; use normalized_errors")
    if not d_pupils > 0:
        raise InvalidArgument(f"d_pupils must be positive, got {d_pupils}")
    diff = as_points(pred) - as_points(truth)
    dist = np.hypot(diff[..., 0], diff[..., 1])
    return float(dist.mean() / d_pupils)


def normalized_errors(pred, truth, d_pupils) -> np.ndarray:
    """Vectorized :func:`normalized_error` over ``(N, 2P)`` batches."""
    pred, truth = _check_pair(np.atleast_2d(pred), np.atleast_2d(truth))
    d = np.broadcast_to(np.asarray(d_pupils, dtype=np.float64), pred.shape[:1])
    if np.any(~(d > 0)):
        raise InvalidArgument("d_pupils must be positive")
    diff = as_points(pred) - as_points(truth)
    dist = np.hypot(diff[..., 0], diff[..., 1])
    return dist.mean(axis=-1) / d


def eye_centers(truth, layout: LandmarkLayout) -> tuple[np.ndarray, np.ndarray]:
    pts = as_points(truth)
    if pts.shape[-2] != layout.P:
        raise InvalidArgument(f"shape has {pts.shape[-2]} landmarks, layout expects {layout.P}")
    left = pts[..., list(layout.left_eye), :].mean(axis=-2)
    right = pts[..., list(layout.right_eye), :].mean(axis=-2)
    return left, right


def interpupil_distance(truth, layout: LandmarkLayout) -> float:
    left, right = eye_centers(truth, layout)
    d = float(np.hypot(*(left - right)))
    if not d > 0:
        raise DegenerateGeometry("eye centers coincide")
    return d


def mean_shape(shapes: Sequence[np.ndarray]) -> np.ndarray:
    if len(shapes) == 0:
        raise InvalidArgument("mean_shape of an empty list")
    arr = np.asarray([np.asarray(s, dtype=np.float64) for s in shapes])
    if arr.ndim != 2:
        raise InvalidArgument("shapes must share a common length")
    return arr.mean(axis=0)


def flip_shape(s, image_width: int, layout: LandmarkLayout) -> np.ndarray:
    """Mirror a shape horizontally inside an image ``image_width`` pixels wide."""
    pts = as_points(s)
    if pts.shape[-2] != layout.P:
        raise InvalidArgument(f"shape has {pts.shape[-2]} landmarks, layout expects {layout.P}")
    out = pts[..., list(layout.flip_permutation), :].copy()
    out[..., 0] = (image_width - 1) - out[..., 0]
    return as_shape(out)
