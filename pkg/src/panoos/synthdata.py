"""Synthetic panoramic scenes and the portable raster file formats.

A scene is a stack of horizontal class bands (class 0 on top, class K-1 at
the bottom) with wavy, horizontally periodic boundaries. Each pixel carries a
``feature_dim`` vector: the mean of its class plus Gaussian noise whose scale
grows toward the left and right borders like equirectangular stretching.
Boundary rows are labelled ``IGNORE``.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, FormatError, NumericDomainError

OUTLIER = 254
IGNORE = 255
STRIDES = (4, 8, 16, 32)

_POOL_OFFSETS = {"inlier": 0, "bank": 1, "eval": 2}


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 256
    num_classes: int = 6
    feature_dim: int = 16
    snr: float = 1.0
    distortion: float = 0.5
    boundary_jitter: float = 3.0
    outlier_blend: float = 0.5
    world_seed: int = 0

    def validate(self):
        if self.height <= 0 or self.width <= 0 or self.height % 32 or self.width % 32:
            raise ContractError(f"scene size {self.height}x{self.width} must be positive multiples of 32")
        if self.num_classes < 2:
            raise ContractError("need at least two inlier classes")
        if self.num_classes > OUTLIER:
            raise ContractError("too many classes for 8-bit labels")
        if self.feature_dim < 1 or self.snr <= 0 or self.distortion < 0:
            raise ContractError("feature_dim, snr must be positive and distortion non-negative")
        return self


@dataclass
class SceneSample:
    """Full-resolution features ``(D, H, W)`` and an 8-bit label raster ``(H, W)``."""

    features: np.ndarray
    labels: np.ndarray
    name: str = ""

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def pyramid(self, strides=STRIDES):
        """Average-pooled feature rasters, one per stride (the frozen image encoder)."""
        d, h, w = self.features.shape
        out = {}
        for s in strides:
            if h % s or w % s:
                raise ContractError(f"scene {h}x{w} is not divisible by stride {s}")
            out[s] = self.features.reshape(d, h // s, s, w // s, s).mean(axis=(2, 4))
        return out

    def copy(self):
        return SceneSample(self.features.copy(), self.labels.copy(), self.name)


@dataclass
class OutlierPatch:
    features: np.ndarray
    mask: np.ndarray = field(repr=False)


def distortion_field(width: int, gamma: float) -> np.ndarray:
    """Per-column noise multiplier ``1 + gamma * |2w/W - 1|``."""
    w = np.arange(width, dtype=np.float64)
    return 1.0 + gamma * np.abs(2.0 * w / width - 1.0)


def class_means(cfg: SceneConfig, pool: str = "inlier", count: int | None = None) -> np.ndarray:
    """Seeded class mean vectors shared by every scene of one world.

    Outlier pools blend a random inlier mean with a fresh direction so that
    outliers sit near, but not on, known classes.
    """
    rng = np.random.default_rng([cfg.world_seed, _POOL_OFFSETS[pool]])
    count = cfg.num_classes if count is None else count
    fresh = rng.standard_normal((count, cfg.feature_dim))
    if pool == "inlier":
        return fresh
    inl = class_means(cfg, "inlier")
    anchors = inl[rng.integers(0, cfg.num_classes, size=count)]
    return cfg.outlier_blend * anchors + (1.0 - cfg.outlier_blend) * fresh


def _band_labels(cfg: SceneConfig, rng) -> np.ndarray:
    h, w, k = cfg.height, cfg.width, cfg.num_classes
    frac = rng.dirichlet(np.full(k, 4.0))
    edges = np.cumsum(frac)[:-1] * h
    cols = np.arange(w) / w * 2 * np.pi
    rows = np.arange(h)[:, None]
    labels = np.zeros((h, w), dtype=np.int64)
    boundary = np.zeros((h, w), dtype=bool)
    for e in edges:
        amp = rng.uniform(0.3, 1.0, size=2) * cfg.boundary_jitter
        phase = rng.uniform(0, 2 * np.pi, size=2)
        line = e + amp[0] * np.sin(cols + phase[0]) + amp[1] * np.sin(2 * cols + phase[1])
        line = np.clip(np.rint(line), 0, h - 1)
        labels += rows >= line[None, :]
        boundary |= rows == line[None, :]
    return labels, boundary


def generate_scene(cfg: SceneConfig, seed: int) -> SceneSample:
    """Pure function of ``(cfg, seed)``; bit-identical on repeat calls."""
    cfg.validate()
    rng = np.random.default_rng([cfg.world_seed, 1000, seed])
    labels, boundary = _band_labels(cfg, rng)
    means = class_means(cfg)
    noise = rng.standard_normal((cfg.feature_dim, cfg.height, cfg.width))
    scale = distortion_field(cfg.width, cfg.distortion) / cfg.snr
    feats = means[labels].transpose(2, 0, 1) + noise * scale[None, None, :]
    out = labels.astype(np.uint8)
    out[boundary] = IGNORE
    return SceneSample(feats, out, name=f"scene_{seed:05d}")


def make_outlier_bank(cfg: SceneConfig, count: int, seed: int, pool: str = "bank") -> list:
    """Elliptical feature patches drawn from classes disjoint from the inliers."""
    cfg.validate()
    if count < 1:
        raise ContractError("outlier bank needs at least one entry")
    rng = np.random.default_rng([cfg.world_seed, 2000 + _POOL_OFFSETS[pool], seed])
    means = class_means(cfg, pool, count=max(4, cfg.num_classes))
    bank = []
    for _ in range(count):
        h = int(rng.integers(max(2, cfg.height // 8), cfg.height // 2 + 1))
        w = int(rng.integers(max(2, cfg.height // 8), cfg.width // 4 + 1))
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2, (w - 1) / 2
        mask = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
        mu = means[rng.integers(0, len(means))]
        feats = mu[:, None, None] + rng.standard_normal((cfg.feature_dim, h, w)) / cfg.snr
        bank.append(OutlierPatch(feats, mask))
    return bank


# -- raster files -------------------------------------------------------------

_KINDS = {
    "score": (b"POSM", np.dtype("<f4")),
    "label": (b"POSL", np.dtype("u1")),
    "embedding": (b"POSE", np.dtype("<f8")),
}
_HEADER_RE = re.compile(rb"^(POS[MLE]) (\d{1,9}) (\d{1,9})\n")
_MAX_ELEMENTS = 1 << 31


def raster_bytes(array: np.ndarray, kind: str) -> bytes:
    magic, dtype = _KINDS[kind]
    array = np.asarray(array)
    if array.ndim != 2:
        raise ContractError(f"raster must be 2-D, got shape {array.shape}")
    if kind != "label" and not np.all(np.isfinite(array)):
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(array))[0])
        raise NumericDomainError(f"refusing to write non-finite value at index {idx}")
    if kind == "label" and (array.min(initial=0) < 0 or array.max(initial=0) > 255):
        raise ContractError("label values must fit in 8 bits")
    header = b"%s %d %d\n" % (magic, array.shape[0], array.shape[1])
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def parse_raster(blob: bytes, kind: str) -> np.ndarray:
    magic, dtype = _KINDS[kind]
    m = _HEADER_RE.match(blob[:32])
    if m is None:
        raise FormatError("malformed raster header", 0)
    if m.group(1) != magic:
        raise FormatError(f"expected magic {magic.decode()}, found {m.group(1).decode()}", 0)
    rows, cols = int(m.group(2)), int(m.group(3))
    offset = m.end()
    if rows * cols > _MAX_ELEMENTS:
        raise FormatError(f"raster dimensions {rows}x{cols} overflow", len(m.group(1)) + 1)
    need = rows * cols * dtype.itemsize
    have = len(blob) - offset
    if have < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {have}", len(blob))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after payload", offset + need)
    return np.frombuffer(blob, dtype=dtype, count=rows * cols, offset=offset).reshape(rows, cols).copy()


def write_raster(path, array, kind: str):
    data = raster_bytes(array, kind)
    with open(path, "wb") as fh:
        fh.write(data)


def read_raster(path, kind: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_raster(fh.read(), kind)


def write_scene(directory, scene: SceneSample):
    """Write features as a POSE matrix (one row per pixel) and labels as POSL."""
    d, h, w = scene.features.shape
    feat_name = f"{scene.name}.feat.pose"
    label_name = f"{scene.name}.label.posl"
    write_raster(os.path.join(directory, feat_name), scene.features.reshape(d, h * w).T, "embedding")
    write_raster(os.path.join(directory, label_name), scene.labels, "label")
    return feat_name, label_name


def read_scene(feature_path, label_path) -> SceneSample:
    labels = read_raster(label_path, "label")
    flat = read_raster(feature_path, "embedding")
    h, w = labels.shape
    if flat.shape[0] != h * w:
        raise FormatError(f"{feature_path}: {flat.shape[0]} pixels but label raster is {h}x{w}", 0)
    name = os.path.basename(label_path).split(".")[0]
    return SceneSample(flat.T.reshape(-1, h, w).copy(), labels, name=name)


def write_manifest(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for feat, label in pairs:
            fh.write(f"{feat} {label}\n")


def read_manifest(path) -> list:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected '<feature-file> <label-file>'", 0)
            pairs.append((parts[0], parts[1]))
    return pairs


def load_dataset(directory, manifest="manifest.txt") -> list:
    mpath = manifest if os.path.isabs(manifest) else os.path.join(directory, manifest)
    root = os.path.dirname(mpath)
    return [read_scene(os.path.join(root, f), os.path.join(root, l)) for f, l in read_manifest(mpath)]


def with_labels(scene: SceneSample, labels: np.ndarray) -> SceneSample:
    return replace(scene, labels=labels)
