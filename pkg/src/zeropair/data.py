"""Zero-pair splits, batch ordering, folder ingestion and the procedural toy scenes."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .codec import (Colormap, DepthMap, LabelMap, Palette, RgbImage, encode_depth,
                    encode_semantic, nearest_color_index)
from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

SPLIT_TAGS = ("RD", "RS", "TEST_DS")
_REQUIRED = {"RD": ("rgb", "depth"), "RS": ("rgb", "semantics"), "TEST_DS": ("depth", "semantics")}


def derive_seed(seed: int, purpose: str) -> int:
    """Stable 63-bit sub-seed for one purpose string."""
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class PairedSample:
    id: str
    rgb: RgbImage | None = None
    depth: DepthMap | None = None
    semantics: LabelMap | None = None
    split_tag: str | None = None

    def restricted(self, tag: str) -> "PairedSample":
        """Copy carrying only the modalities a split is allowed to see."""
        keep = _REQUIRED[tag]
        for name in keep:
            if getattr(self, name) is None:
                raise InputError(f"sample {self.id} lacks {name} required by split {tag}")
        return PairedSample(
            self.id,
            self.rgb if "rgb" in keep else None,
            self.depth if "depth" in keep else None,
            self.semantics if "semantics" in keep else None,
            tag,
        )


@dataclass(frozen=True)
class SplitSpec:
    n_rd: int
    n_rs: int
    n_test: int
    seed: int = 0

    def __post_init__(self):
        if min(self.n_rd, self.n_rs, self.n_test) < 0:
            raise ConfigError("split sizes must be non-negative")


def make_zero_pair_splits(ids, spec: SplitSpec) -> tuple[list[str], list[str], list[str]]:
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("sample ids must be unique")
    need = spec.n_rd + spec.n_rs + spec.n_test
    if need > len(ids):
        raise ConfigError(f"split needs {need} ids, only {len(ids)} available")
    order = np.random.default_rng(spec.seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    rd = shuffled[:spec.n_rd]
    rs = shuffled[spec.n_rd:spec.n_rd + spec.n_rs]
    test = shuffled[spec.n_rd + spec.n_rs:need]
    return rd, rs, test


def write_split_manifest(path, splits: dict, source: dict | None = None) -> None:
    payload = {"splits": {tag: list(splits[tag]) for tag in SPLIT_TAGS}}
    if source is not None:
        payload["source"] = source
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_split_manifest(path) -> dict:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read split manifest {path}: {exc}") from exc
    splits = payload.get("splits", {})
    if set(splits) != set(SPLIT_TAGS):
        raise ConfigError(f"split manifest must list {SPLIT_TAGS}")
    seen = set()
    for tag in SPLIT_TAGS:
        overlap = seen & set(splits[tag])
        if overlap:
            raise ConfigError(f"ids appear in more than one split: {sorted(overlap)[:5]}")
        seen |= set(splits[tag])
    return payload


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def iterate_batches(split, batch_size: int, seed: int, epoch: int):
    """Yield lists of samples in a fixed order for (seed, epoch); the partial tail is dropped."""
    split = list(split)
    if not split:
        raise ConfigError("cannot batch an empty split")
    if batch_size > len(split):
        raise ConfigError(f"batch_size {batch_size} exceeds split size {len(split)}")
    order = epoch_order(len(split), seed, epoch)
    for start in range(0, len(split) - batch_size + 1, batch_size):
        yield [split[i] for i in order[start:start + batch_size]]


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of the ``step``-th batch in the epoch sequence produced by iterate_batches."""
    per_epoch = n // batch_size
    if per_epoch == 0:
        raise ConfigError(f"batch_size {batch_size} exceeds split size {n}")
    epoch, j = divmod(step, per_epoch)
    return epoch_order(n, seed, epoch)[j * batch_size:(j + 1) * batch_size]


# ---------------------------------------------------------------------------
# toy scenes

TOY_GROUND, TOY_SKY, TOY_BOX, TOY_DISC, TOY_POLE = range(5)

# normalized depth band per class; bands are disjoint so depth alone fixes the class layer
TOY_DEPTH_BANDS = {
    TOY_SKY: (1.0, 1.0),
    TOY_GROUND: (0.55, 0.85),
    TOY_BOX: (0.38, 0.50),
    TOY_DISC: (0.20, 0.32),
    TOY_POLE: (0.05, 0.15),
}

_TOY_RGB = {
    TOY_GROUND: (112, 104, 88),
    TOY_SKY: (150, 192, 235),
    TOY_BOX: (190, 120, 70),
    TOY_DISC: (60, 150, 110),
    TOY_POLE: (210, 200, 90),
}


def toy_depth_layer(depth: np.ndarray) -> np.ndarray:
    """Class whose depth band contains each value (-1 outside every band)."""
    out = np.full(np.shape(depth), -1, dtype=np.int64)
    for cls, (lo, hi) in TOY_DEPTH_BANDS.items():
        out[(depth >= lo - 1e-9) & (depth <= hi + 1e-9)] = cls
    return out


@dataclass
class ToyShape:
    cls: int
    kind: str
    depth: float  # nearest point of the surface
    box: tuple[int, int, int, int]  # top, left, bottom, right (exclusive)
    color: tuple[int, int, int]
    span: float = 0.0  # depth added across the surface, kept inside the class band


@dataclass
class ToyLayout:
    size: int
    n_classes: int
    horizon: int
    shapes: list[ToyShape] = field(default_factory=list)


def layout_toy_scene(seed: int, size: int = 64, n_classes: int = 5) -> ToyLayout:
    if size < 32:
        raise ConfigError("toy scenes need size >= 32")
    if not 2 <= n_classes <= len(TOY_DEPTH_BANDS):
        raise ConfigError(f"toy scenes support 2..{len(TOY_DEPTH_BANDS)} classes")
    rng = np.random.default_rng(seed)
    horizon = int(rng.integers(int(0.3 * size), int(0.55 * size)))
    shape_classes = [c for c in (TOY_BOX, TOY_DISC, TOY_POLE) if c < n_classes] or [TOY_GROUND]
    layout = ToyLayout(size, n_classes, horizon)
    for _ in range(int(rng.integers(3, 9))):
        cls = int(rng.choice(shape_classes))
        lo, hi = TOY_DEPTH_BANDS[cls]
        span = float(rng.uniform(0.4, 1.0)) * (hi - lo)
        depth = float(rng.uniform(lo, hi - span))
        # nearer objects are drawn larger
        scale = 1.0 - 0.6 * depth
        if cls == TOY_POLE:
            kind, h, w = "rect", int(size * rng.uniform(0.35, 0.6) * scale), max(2, size // 16)
        elif cls == TOY_DISC:
            kind = "disc"
            h = w = max(4, int(size * rng.uniform(0.15, 0.3) * scale) * 2 // 2)
        else:
            kind = "rect"
            h = int(size * rng.uniform(0.15, 0.35) * scale) + 3
            w = int(size * rng.uniform(0.15, 0.4) * scale) + 3
        bottom = int(rng.integers(horizon + 2, size + 1))
        top = max(0, bottom - h)
        left = int(rng.integers(0, max(1, size - w)))
        base = np.array(_TOY_RGB[cls], dtype=np.float64)
        color = tuple(int(c) for c in np.clip(base + rng.integers(-35, 36, 3), 0, 255))
        layout.shapes.append(ToyShape(cls, kind, depth, (top, left, bottom, left + w), color,
                                      span))
    # painter's order: far to near
    layout.shapes.sort(key=lambda s: -s.depth)
    return layout


def _shape_mask(shape: ToyShape, size: int) -> np.ndarray:
    top, left, bottom, right = shape.box
    mask = np.zeros((size, size), dtype=bool)
    if shape.kind == "disc":
        yy, xx = np.mgrid[0:size, 0:size]
        cy, cx = (top + bottom - 1) / 2, (left + right - 1) / 2
        r = (bottom - top) / 2
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        mask[top:bottom, left:right] = True
    return mask


def _shape_depth(shape: ToyShape, size: int) -> np.ndarray:
    """Surface depth over the whole canvas: slanted boxes, bulging discs, round poles."""
    top, left, bottom, right = shape.box
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, half_w = (left + right - 1) / 2, max(1.0, (right - left) / 2)
    if shape.kind == "disc":
        cy = (top + bottom - 1) / 2
        t = ((yy - cy) ** 2 + (xx - cx) ** 2) / max(1.0, (bottom - top) / 2) ** 2
    elif shape.cls == TOY_POLE:
        t = ((xx - cx) / half_w) ** 2
    else:
        t = (xx - left) / max(1, right - left - 1)
    return shape.depth + shape.span * np.clip(t, 0.0, 1.0)


def render_toy_scene(layout: ToyLayout, seed: int) -> tuple[RgbImage, DepthMap, LabelMap]:
    size, horizon = layout.size, layout.horizon
    rows = np.arange(size, dtype=np.float64)[:, None] * np.ones((1, size))
    labels = np.where(rows < horizon, TOY_SKY, TOY_GROUND).astype(np.int64)
    g_lo, g_hi = TOY_DEPTH_BANDS[TOY_GROUND]
    ground_t = (size - 1 - rows) / max(1, size - 1 - horizon)
    depth = np.where(labels == TOY_SKY, 1.0, g_lo + (g_hi - g_lo) * np.clip(ground_t, 0, 1))
    color = np.zeros((size, size, 3))
    color[labels == TOY_SKY] = _TOY_RGB[TOY_SKY]
    color[labels == TOY_GROUND] = _TOY_RGB[TOY_GROUND]
    for shape in layout.shapes:
        mask = _shape_mask(shape, size)
        labels[mask] = shape.cls
        depth[mask] = _shape_depth(shape, size)[mask]
        color[mask] = shape.color
    rng = np.random.default_rng([seed, 1])
    shading = 1.0 - 0.55 * depth
    sky = labels == TOY_SKY
    shading[sky] = 0.75 + 0.25 * rows[sky] / max(1, horizon)
    rgb = color * shading[..., None] + rng.normal(0.0, 4.0, color.shape)
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return RgbImage(rgb), DepthMap(depth), LabelMap(labels, layout.n_classes)


def generate_toy_scene(seed: int, size: int = 64, n_classes: int = 5):
    """Mutually consistent (RgbImage, DepthMap, LabelMap) triple for one seed."""
    return render_toy_scene(layout_toy_scene(seed, size, n_classes), seed)


def toy_id(index: int) -> str:
    return f"toy-{index:05d}"


def toy_samples(n_scenes: int, size: int = 64, n_classes: int = 5, seed: int = 0):
    out = []
    for i in range(n_scenes):
        rgb, depth, labels = generate_toy_scene(derive_seed(seed, toy_id(i)), size, n_classes)
        out.append(PairedSample(toy_id(i), rgb, depth, labels))
    return out


# ---------------------------------------------------------------------------
# folder ingestion

@dataclass(frozen=True)
class FolderLayout:
    rgb_dir: str = "rgb"
    depth_dir: str = "depth"
    semantics_dir: str = "semantics"
    depth_scale: float = 1.0 / 65535.0  # metric units per raw 16-bit step
    near: float = 0.0
    far: float = 1.0
    require: tuple = ("rgb", "depth", "semantics")


def _stems(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.glob("*.png"))}


def read_depth_png(path, layout: FolderLayout) -> DepthMap:
    with Image.open(path) as im:
        raw = np.asarray(im).astype(np.float64)
    if raw.ndim != 2:
        raise InputError(f"{path}: depth PNG must be single-channel")
    metric = raw * layout.depth_scale
    depth = np.clip((metric - layout.near) / (layout.far - layout.near), 0.0, 1.0)
    return DepthMap(depth, layout.near, layout.far)


def write_depth_png(path, d: DepthMap) -> None:
    raw = np.rint(d.depth * 65535.0).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_semantic_png(path, palette: Palette) -> tuple[LabelMap, int]:
    """Labels from a palette-indexed or RGB PNG, plus the count of off-palette pixels."""
    with Image.open(path) as im:
        if im.mode == "P":
            idx = np.asarray(im).astype(np.int64)
            if idx.max() >= len(palette):
                raise InputError(f"{path}: index {idx.max()} outside palette")
            return LabelMap(idx, len(palette)), 0
        px = np.asarray(im.convert("RGB")).astype(np.int64)
    labels = nearest_color_index(px, palette.array)
    exact = (np.asarray(palette.colors)[labels] == px).all(axis=-1)
    return LabelMap(labels, len(palette)), int((~exact).sum())


def ingest_folder(root, layout: FolderLayout | None = None, palette: Palette | None = None):
    layout = layout or FolderLayout()
    palette = palette or Palette.cityscapes()
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset folder {root} does not exist")
    dirs = {"rgb": root / layout.rgb_dir, "depth": root / layout.depth_dir,
            "semantics": root / layout.semantics_dir}
    files = {name: _stems(d) for name, d in dirs.items()}
    stems = sorted(set().union(*(set(f) for f in files.values())))
    samples = []
    for stem in stems:
        missing = [m for m in layout.require if stem not in files[m]]
        if missing:
            log.warning("skipping %s: missing %s", stem, ", ".join(missing))
            continue
        rgb = depth = sem = None
        if stem in files["rgb"]:
            with Image.open(files["rgb"][stem]) as im:
                rgb = RgbImage(np.asarray(im.convert("RGB")))
        if stem in files["depth"]:
            depth = read_depth_png(files["depth"][stem], layout)
        if stem in files["semantics"]:
            sem, off = read_semantic_png(files["semantics"][stem], palette)
            if off:
                log.warning("%s: %d pixels off-palette, resolved to nearest class", stem, off)
        samples.append(PairedSample(stem, rgb, depth, sem))
    return samples


def write_sample_folder(root, samples, palette: Palette, cm: Colormap | None = None) -> None:
    """Write samples in the folder layout read by ingest_folder."""
    root = Path(root)
    for sub in ("rgb", "depth", "semantics"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        if s.rgb is not None:
            Image.fromarray(s.rgb.to_file().pixels).save(root / "rgb" / f"{s.id}.png")
        if s.depth is not None:
            write_depth_png(root / "depth" / f"{s.id}.png", s.depth)
        if s.semantics is not None:
            Image.fromarray(encode_semantic(s.semantics, palette).pixels).save(
                root / "semantics" / f"{s.id}.png")


# ---------------------------------------------------------------------------
# tensors for training

def image_tensor(img: RgbImage, size: int | None = None) -> torch.Tensor:
    """3 x H x W float tensor in [-1, 1], area-resized to ``size`` when given."""
    t = torch.from_numpy(np.ascontiguousarray(img.to_network().pixels)).permute(2, 0, 1)
    if size is not None and tuple(t.shape[1:]) != (size, size):
        t = F.interpolate(t[None], size=(size, size), mode="area")[0].clamp(-1, 1)
    return t.contiguous()


def resize_depth(d: DepthMap, size: int) -> DepthMap:
    if d.shape == (size, size):
        return d
    t = torch.from_numpy(d.depth)[None, None]
    out = F.interpolate(t, size=(size, size), mode="area")[0, 0].numpy()
    return DepthMap(np.clip(out, 0.0, 1.0), d.near, d.far)


def resize_labels(m: LabelMap, size: int) -> LabelMap:
    h, w = m.shape
    if (h, w) == (size, size):
        return m
    rows = np.arange(size) * h // size
    cols = np.arange(size) * w // size
    return LabelMap(m.labels[np.ix_(rows, cols)], m.num_classes)


@dataclass
class ZeroPairData:
    """The three splits as stacked network-domain tensors."""

    rd_rgb: torch.Tensor
    rd_depth: torch.Tensor
    rs_rgb: torch.Tensor
    rs_sem: torch.Tensor
    test_ids: list[str]
    test_depth: torch.Tensor
    test_labels: list[LabelMap]
    palette: Palette
    colormap: Colormap


def build_tensors(samples, splits: dict, size: int, palette: Palette,
                  cm: Colormap | None = None) -> ZeroPairData:
    cm = cm or Colormap.viridis()
    by_id = {s.id: s for s in samples}
    missing = [i for tag in SPLIT_TAGS for i in splits[tag] if i not in by_id]
    if missing:
        raise ConfigError(f"{len(missing)} split ids not found in dataset, e.g. {missing[0]}")

    def depth_img(d):
        return image_tensor(encode_depth(resize_depth(d, size), cm))

    def sem_img(m):
        return image_tensor(encode_semantic(resize_labels(m, size), palette))

    rd = [by_id[i].restricted("RD") for i in splits["RD"]]
    rs = [by_id[i].restricted("RS") for i in splits["RS"]]
    test = [by_id[i].restricted("TEST_DS") for i in splits["TEST_DS"]]
    empty = torch.zeros(0, 3, size, size)

    def stack(xs):
        return torch.stack(xs) if xs else empty

    return ZeroPairData(
        rd_rgb=stack([image_tensor(s.rgb, size) for s in rd]),
        rd_depth=stack([depth_img(s.depth) for s in rd]),
        rs_rgb=stack([image_tensor(s.rgb, size) for s in rs]),
        rs_sem=stack([sem_img(s.semantics) for s in rs]),
        test_ids=[s.id for s in test],
        test_depth=stack([depth_img(s.depth) for s in test]),
        test_labels=[s.semantics for s in test],
        palette=palette,
        colormap=cm,
    )
