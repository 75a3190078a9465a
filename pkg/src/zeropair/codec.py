"""Conversion of depth and semantic maps to and from 3-channel images.

Every domain is handled by one network, so depth maps are pushed through a
colormap and label maps through a fixed palette. Images live either in the
file domain (uint8 in [0, 255]) or the network domain (float in [-1, 1]).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._tables import CITYSCAPES_COLORS, CITYSCAPES_NAMES, TOY_COLORS, TOY_NAMES, VIRIDIS_64
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or min(labels.shape) < 1:
            raise InputError(f"label map must be a non-empty 2-D grid, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise InputError(f"labels must be integers, got {labels.dtype}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise InputError(f"labels outside [0, {self.num_classes})")
        object.__setattr__(self, "labels", labels.astype(np.int64, copy=False))

    @property
    def shape(self):
        return self.labels.shape


@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray
    near: float = 0.0
    far: float = 1.0

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.ndim != 2 or min(depth.shape) < 1:
            raise InputError(f"depth map must be a non-empty 2-D grid, got shape {depth.shape}")
        if not self.near < self.far:
            raise ConfigError(f"near ({self.near}) must be below far ({self.far})")
        if not np.all(np.isfinite(depth)) or depth.min() < 0.0 or depth.max() > 1.0:
            raise InputError("normalized depth must lie in [0, 1]")
        object.__setattr__(self, "depth", depth)

    @property
    def shape(self):
        return self.depth.shape


@dataclass(frozen=True)
class RgbImage:
    """H x W x 3 pixels. ``network`` selects float [-1, 1] over uint8 [0, 255]."""

    pixels: np.ndarray
    network: bool = False

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InputError(f"expected H x W x 3 pixels, got shape {px.shape}")
        if self.network:
            px = px.astype(np.float32, copy=False)
            if px.size and (px.min() < -1.0 or px.max() > 1.0):
                raise InputError("network-domain pixels must lie in [-1, 1]")
        else:
            if np.issubdtype(px.dtype, np.floating):
                raise InputError("file-domain pixels must be integers")
            if px.size and (px.min() < 0 or px.max() > 255):
                raise InputError("file-domain pixels must lie in [0, 255]")
            px = px.astype(np.uint8, copy=False)
        object.__setattr__(self, "pixels", px)

    def to_network(self) -> "RgbImage":
        if self.network:
            return self
        return RgbImage(self.pixels.astype(np.float32) / 127.5 - 1.0, network=True)

    def to_file(self) -> "RgbImage":
        if not self.network:
            return self
        return RgbImage(np.rint(_network_to_file_float(self.pixels)).astype(np.uint8))


def _network_to_file_float(px: np.ndarray) -> np.ndarray:
    return (np.clip(px.astype(np.float64), -1.0, 1.0) + 1.0) * 127.5


def _color_table(colors, what: str) -> np.ndarray:
    table = np.asarray(colors, dtype=np.int64).reshape(-1, 3)
    if len(table) and (table.min() < 0 or table.max() > 255):
        raise ConfigError(f"{what} entries must be 8-bit RGB triples")
    if len({tuple(c) for c in table.tolist()}) != len(table):
        raise ConfigError(f"{what} entries must be pairwise distinct")
    return table


@dataclass(frozen=True)
class Palette:
    colors: tuple
    names: tuple = field(default=())

    def __post_init__(self):
        table = _color_table(self.colors, "palette")
        object.__setattr__(self, "colors", tuple(tuple(c) for c in table.tolist()))
        if not self.names:
            object.__setattr__(self, "names", tuple(f"class_{i}" for i in range(len(table))))
        elif len(self.names) != len(table):
            raise ConfigError("palette names and colors differ in length")

    def __len__(self):
        return len(self.colors)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def cityscapes(cls) -> "Palette":
        return cls(CITYSCAPES_COLORS, CITYSCAPES_NAMES)

    @classmethod
    def toy(cls, n_classes: int = 5) -> "Palette":
        if not 1 <= n_classes <= len(TOY_COLORS):
            raise ConfigError(f"toy palette has {len(TOY_COLORS)} classes, asked for {n_classes}")
        return cls(TOY_COLORS[:n_classes], TOY_NAMES[:n_classes])


@dataclass(frozen=True)
class Colormap:
    stops: tuple

    def __post_init__(self):
        table = _color_table(self.stops, "colormap")
        if len(table) < 2:
            raise ConfigError("a colormap needs at least two stops")
        object.__setattr__(self, "stops", tuple(tuple(c) for c in table.tolist()))

    def __len__(self):
        return len(self.stops)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.stops, dtype=np.float64)

    @classmethod
    def viridis(cls) -> "Colormap":
        return cls(VIRIDIS_64)


def load_color_table(path) -> list[tuple[int, int, int]]:
    """Read one ``R G B`` triple per line; blank lines and ``#`` comments are skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ConfigError(f"{path}:{lineno}: expected 'R G B', got {line!r}")
        rows.append(tuple(int(p) for p in parts))
    return rows


def save_color_table(path, colors) -> None:
    Path(path).write_text("".join(f"{r} {g} {b}\n" for r, g, b in colors))


def nearest_color_index(pixels: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Index of the closest table row per pixel (squared RGB distance, lowest index on ties)."""
    flat = pixels.reshape(-1, 3).astype(np.float64)
    best = np.zeros(len(flat), dtype=np.int64)
    best_d = np.full(len(flat), np.inf)
    # strict "<" keeps the earlier index on ties
    for k, color in enumerate(table):
        d = ((flat - color) ** 2).sum(axis=1)
        closer = d < best_d
        best[closer] = k
        best_d[closer] = d[closer]
    return best.reshape(pixels.shape[:-1])


def _file_pixels(img: RgbImage) -> np.ndarray:
    if img.network:
        return _network_to_file_float(img.pixels)
    return img.pixels.astype(np.float64)


def encode_semantic(m: LabelMap, p: Palette) -> RgbImage:
    if m.num_classes != len(p):
        raise ConfigError(f"label map has {m.num_classes} classes, palette has {len(p)}")
    table = np.asarray(p.colors, dtype=np.uint8)
    return RgbImage(table[m.labels])


def decode_semantic_nn(img: RgbImage, p: Palette) -> LabelMap:
    if len(p) == 0:
        raise ConfigError("empty palette")
    return LabelMap(nearest_color_index(_file_pixels(img), p.array), len(p))


def encode_depth(d: DepthMap, cm: Colormap) -> RgbImage:
    depth = np.asarray(d.depth, dtype=np.float64)
    if depth.min() < 0.0 or depth.max() > 1.0:
        raise InputError("depth values must lie in [0, 1]")
    k = np.floor(depth * (len(cm) - 1) + 0.5).astype(np.int64)
    return RgbImage(np.asarray(cm.stops, dtype=np.uint8)[k])


def decode_depth(img: RgbImage, cm: Colormap, near: float = 0.0, far: float = 1.0) -> DepthMap:
    if len(cm) == 0:
        raise ConfigError("empty colormap")
    k = nearest_color_index(_file_pixels(img), cm.array)
    return DepthMap(k / (len(cm) - 1), near, far)


def read_png(path) -> RgbImage:
    with Image.open(path) as im:
        return RgbImage(np.asarray(im.convert("RGB")))


def write_png(path, img: RgbImage) -> None:
    Image.fromarray(img.to_file().pixels).save(path)
