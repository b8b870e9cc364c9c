"""Datasets (synthetic and on-disk) and the binary model format."""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .cascade import CascadeModel, LocalStage
from .errors import CorruptModel, DataError, DegenerateGeometry, InvalidArgument, UnsupportedFormat
from .features import HogConfig, LocalDescriptorConfig
from .shapes import LandmarkLayout, as_points, interpupil_distance

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".pgm", ".ppm")


@dataclass
class FaceSample:
    image: np.ndarray
    truth: np.ndarray
    d_pupils: float
    source_id: str


# ---------------------------------------------------------------------------
# Synthetic data

_FACE5 = np.array([[-8.0, -6.0], [8.0, -6.0], [0.0, 2.0], [-6.0, 8.0], [6.0, 8.0]])


def base_polygon(P: int, radius: float = 10.0) -> np.ndarray:
    """Mirror-symmetric template points ``(P, 2)`` centered on the origin."""
    if P == 5:
        return _FACE5.copy()
    if P < 3:
        raise InvalidArgument("synthetic layouts need P >= 3")
    theta = -np.pi / 2 + 2 * np.pi * np.arange(P) / P
    return radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def synthetic_layout(P: int) -> LandmarkLayout:
    if P == 5:
        return LandmarkLayout(5, (1, 0, 2, 4, 3), (0,), (1,))
    if P < 3:
        raise InvalidArgument("synthetic layouts need P >= 3")
    perm = tuple((P - k) % P for k in range(P))
    return LandmarkLayout(P, perm, (1,), (P - 1,))


@dataclass(frozen=True)
class SyntheticConfig:
    P: int = 5
    image_size: int = 64
    sample_count: int = 100
    rotation_range: float = 0.3       # radians, uniform +-
    scale_min: float = 0.85
    scale_max: float = 1.15
    translation_range: float = 2.5    # pixels, uniform +-
    jitter_sigma: float = 1.0
    blob_sigma: float = 2.0
    blob_contrast: float = 0.6
    contrast_jitter: float = 0.2
    background: float = 0.2
    noise_sigma: float = 0.03
    margin: float = 16.0
    seed: int = 0

    def __post_init__(self):
        if self.sample_count < 0 or self.image_size < 1:
            raise InvalidArgument("sample_count and image_size must be non-negative/positive")
        if self.scale_min <= 0 or self.scale_max < self.scale_min:
            raise InvalidArgument("invalid scale range")
        reach = np.sqrt((base_polygon(self.P) ** 2).sum(axis=1)).max() * self.scale_max
        half = (self.image_size - 1) / 2
        if reach + self.translation_range * math.sqrt(2) > half - self.margin:
            raise InvalidArgument(
                f"template (reach {reach:.1f}px + translation) does not fit inside the "
                f"{self.margin}px margin of a {self.image_size}px image")


def _render(points: np.ndarray, cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.full((n, n), cfg.background)
    contrast = cfg.blob_contrast * (1 + cfg.contrast_jitter * rng.uniform(-1, 1, len(points)))
    for (x, y), c in zip(points, contrast):
        img += c * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * cfg.blob_sigma ** 2))
    img += cfg.noise_sigma * rng.standard_normal((n, n))
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(cfg: SyntheticConfig) -> list[FaceSample]:
    """Blob images over noise with exact landmark truth; a pure function of ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    layout = synthetic_layout(cfg.P)
    base = base_polygon(cfg.P)
    center = (cfg.image_size - 1) / 2
    lo, hi = cfg.margin, cfg.image_size - 1 - cfg.margin
    samples = []
    for i in range(cfg.sample_count):
        for _ in range(1000):
            angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
            scale = rng.uniform(cfg.scale_min, cfg.scale_max)
            shift = rng.uniform(-cfg.translation_range, cfg.translation_range, 2)
            rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
            pts = scale * base @ rot.T + center + shift
            pts = pts + cfg.jitter_sigma * rng.standard_normal(pts.shape)
            if pts.min() >= lo and pts.max() <= hi:
                break
        else:
            raise InvalidArgument("could not place landmarks inside the margin")
        truth = pts.reshape(-1)
        img = _render(pts, cfg, rng)
        samples.append(FaceSample(img, truth, interpupil_distance(truth, layout), f"synth_{i:05d}"))
    return samples


# ---------------------------------------------------------------------------
# pts annotations


def format_pts(s) -> str:
    pts = as_points(s)
    lines = ["version: 1", f"n_points: {len(pts)}", "{"]
    lines += [f"{x:.6f} {y:.6f}" for x, y in pts]
    lines.append("}")
    return "\n".join(lines) + "\n"


def parse_pts(text: str, name: str = "<string>") -> np.ndarray:
    """Parse ``version`` / ``n_points`` / ``{ x y ... }`` annotation text."""
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    n_points = None
    i = 0
    while i < len(lines) and lines[i] != "{":
        key, sep, value = lines[i].partition(":")
        if not sep:
            raise DataError(f"{name}: unexpected header line {lines[i]!r}")
        key = key.strip().lower()
        if key == "n_points":
            try:
                n_points = int(value)
            except ValueError:
                raise DataError(f"{name}: bad n_points {value.strip()!r}") from None
        elif key != "version":
            raise DataError(f"{name}: unknown header key {key!r}")
        i += 1
    if n_points is None or n_points < 1:
        raise DataError(f"{name}: missing n_points")
    if i == len(lines) or "}" not in lines[i + 1:]:
        raise DataError(f"{name}: missing braces around the point block")
    end = lines.index("}", i + 1)
    body = lines[i + 1:end]
    if lines[end + 1:]:
        raise DataError(f"{name}: trailing content after closing brace")
    if len(body) != n_points:
        raise DataError(f"{name}: n_points is {n_points} but {len(body)} coordinate lines found")
    coords = []
    for ln in body:
        parts = ln.split()
        if len(parts) != 2:
            raise DataError(f"{name}: bad coordinate line {ln!r}")
        try:
            coords.extend(float(v) for v in parts)
        except ValueError:
            raise DataError(f"{name}: bad coordinate line {ln!r}") from None
    s = np.asarray(coords)
    if not np.all(np.isfinite(s)):
        raise DataError(f"{name}: non-finite coordinate")
    return s


def write_pts(path, s) -> None:
    Path(path).write_text(format_pts(s))


def read_pts(path) -> np.ndarray:
    path = Path(path)
    return parse_pts(path.read_text(), path.name)


# ---------------------------------------------------------------------------
# Images and datasets


def read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I", "F"):
            arr = np.asarray(im.convert("F"), dtype=np.float64)
            return arr / (65535.0 if im.mode in ("I;16", "I") else 255.0)
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return rgb @ np.array([0.299, 0.587, 0.114])


def write_gray(path, img) -> None:
    arr = np.round(np.clip(np.asarray(img), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_dataset(image_dir, annotation_dir, layout: LandmarkLayout):
    """Load images with matching ``<stem>.pts`` files.

    Returns ``(samples, report)`` where ``report`` lists ``(source_id, reason)``
    for every rejected image.  Raises :class:`DataError` if images exist but
    none is usable.
    """
    image_dir, annotation_dir = Path(image_dir), Path(annotation_dir)
    for d in (image_dir, annotation_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    samples, report = [], []
    for path in files:
        ann = annotation_dir / (path.stem + ".pts")
        if not ann.exists():
            report.append((path.stem, f"missing annotation {ann.name}"))
            continue
        try:
            truth = read_pts(ann)
        except DataError as e:
            report.append((path.stem, str(e)))
            continue
        if len(truth) != 2 * layout.P:
            report.append((path.stem, f"{ann.name}: {len(truth) // 2} points, layout expects {layout.P}"))
            continue
        try:
            d = interpupil_distance(truth, layout)
        except DegenerateGeometry as e:
            report.append((path.stem, f"{ann.name}: {e}"))
            continue
        try:
            img = read_gray(path)
        except OSError as e:
            report.append((path.stem, f"unreadable image: {e}"))
            continue
        samples.append(FaceSample(img, truth, d, path.stem))
    if files and not samples:
        raise DataError(f"no valid samples in {image_dir} ({len(report)} rejected)")
    return samples, report


def save_dataset(samples, out_dir) -> None:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_gray(out_dir / "images" / f"{s.source_id}.png", s.image)
        write_pts(out_dir / "annotations" / f"{s.source_id}.pts", s.truth)


# ---------------------------------------------------------------------------
# Model files
#
# Little-endian layout, version 1:
#   b"DRCM" | u32 version | u32 P | u32 T | f64 dropout_rate | u32 flags
#   HogConfig: 5 x u32 (resize_to, block_size, block_stride, cell_size, num_bins)
#   per stage: u32 patch_size | f64 epsilon | f64 blur_sigma (0 = default)
#   layout: P x u32 flip permutation | u32 n | n x u32 left eye | u32 m | m x u32 right eye
#   matrices, each u32 rows | u32 cols | rows*cols f64 row-major:
#     W0, b0 (2P x 1), mean_shape (2P x 1)  -- 0 x 0 when absent
#     then W_t, b_t for t = 1..T
# flags: bit 0 = global layer present, bit 1 = mean shape present.

MAGIC = b"DRCM"
FORMAT_VERSION = 1


def _pack_matrix(buf: io.BytesIO, m) -> None:
    if m is None:
        buf.write(struct.pack("<II", 0, 0))
        return
    m = np.asarray(m, dtype="<f8")
    if m.ndim == 1:
        m = m[:, None]
    buf.write(struct.pack("<II", *m.shape))
    buf.write(np.ascontiguousarray(m).tobytes())


def model_to_bytes(model: CascadeModel) -> bytes:
    buf = io.BytesIO()
    flags = (1 if model.has_global else 0) | (2 if model.mean_shape is not None else 0)
    buf.write(MAGIC)
    buf.write(struct.pack("<IIIdI", FORMAT_VERSION, model.P, model.T, model.dropout_rate, flags))
    h = model.hog_cfg
    buf.write(struct.pack("<5I", h.resize_to, h.block_size, h.block_stride, h.cell_size, h.num_bins))
    for st in model.stages:
        c = st.cfg
        buf.write(struct.pack("<Idd", c.patch_size, c.epsilon, c.blur_sigma or 0.0))
    lay = model.layout
    buf.write(struct.pack(f"<{lay.P}I", *lay.flip_permutation))
    for eye in (lay.left_eye, lay.right_eye):
        buf.write(struct.pack(f"<I{len(eye)}I", len(eye), *eye))
    _pack_matrix(buf, model.W0)
    _pack_matrix(buf, model.b0)
    _pack_matrix(buf, model.mean_shape)
    for st in model.stages:
        _pack_matrix(buf, st.W)
        _pack_matrix(buf, st.b)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CorruptModel("model file is truncated")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def matrix(self, shape=None):
        rows, cols = self.take("<II")
        if rows == 0 and cols == 0:
            return None
        n = rows * cols
        if self.pos + 8 * n > len(self.data):
            raise CorruptModel("model file is truncated mid-matrix")
        m = np.frombuffer(self.data, dtype="<f8", count=n, offset=self.pos).astype(np.float64)
        self.pos += 8 * n
        m = m.reshape(rows, cols)
        if shape is not None and m.shape != shape:
            raise CorruptModel(f"matrix has shape {m.shape}, expected {shape}")
        return m


def model_from_bytes(data: bytes) -> CascadeModel:
    if len(data) < len(MAGIC) and MAGIC.startswith(data):
        raise CorruptModel("model file is truncated")
    if data[:4] != MAGIC:
        raise UnsupportedFormat("not a cascade model file (bad magic)")
    r = _Reader(data)
    r.pos = 4
    version, P, T, dropout, flags = r.take("<IIIdI")
    if version != FORMAT_VERSION:
        raise UnsupportedFormat(f"unsupported model format version {version}")
    if P == 0 or P > 100000 or T > 10000 or flags > 3:
        raise CorruptModel("implausible header values")
    try:
        hog = HogConfig(*r.take("<5I"))
        cfgs = []
        for _ in range(T):
            patch, eps, sigma = r.take("<Idd")
            cfgs.append(LocalDescriptorConfig(patch, eps, sigma if sigma > 0 else None))
        perm = r.take(f"<{P}I")
        eyes = []
        for _ in range(2):
            (k,) = r.take("<I")
            if k > P:
                raise CorruptModel("eye subset larger than P")
            eyes.append(r.take(f"<{k}I"))
        layout = LandmarkLayout(P, perm, eyes[0], eyes[1])
        n = 2 * P
        W0 = r.matrix((n, hog.dim)) if flags & 1 else r.matrix()
        b0 = r.matrix((n, 1)) if flags & 1 else r.matrix()
        mean = r.matrix((n, 1)) if flags & 2 else r.matrix()
        if (W0 is None) == bool(flags & 1) or (mean is None) == bool(flags & 2):
            raise CorruptModel("matrix presence disagrees with header flags")
        stages = []
        for c in cfgs:
            W = r.matrix((n, 128 * P))
            b = r.matrix((n, 1))
            if W is None or b is None:
                raise CorruptModel("missing stage matrix")
            stages.append(LocalStage(W, b[:, 0], c))
        if r.pos != len(data):
            raise CorruptModel("trailing bytes after model payload")
        return CascadeModel(layout, hog, stages, W0,
                            None if b0 is None else b0[:, 0], dropout,
                            None if mean is None else mean[:, 0])
    except CorruptModel:
        raise
    except (InvalidArgument, ValueError) as e:
        raise CorruptModel(f"model violates invariants: {e}") from None


def save_model(model: CascadeModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> CascadeModel:
    return model_from_bytes(Path(path).read_bytes())
