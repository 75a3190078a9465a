"""TOML run configuration with [model], [loss], [train] and [data] sections."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .codec import Colormap, Palette, load_color_table
from .data import (FolderLayout, SplitSpec, build_tensors, derive_seed, ingest_folder,
                   make_zero_pair_splits, read_split_manifest, toy_samples)
from .errors import ConfigError
from .losses import HyperParams
from .model import ConditionMode, NetworkConfig


@dataclass
class DataConfig:
    source: str = "toy"  # "toy" or "folder"
    root: str | None = None
    split_manifest: str | None = None
    palette: str = "toy"  # "toy", "cityscapes" or a path to an R G B table
    n_classes: int = 5
    toy_size: int = 64
    n_rd: int = 200
    n_rs: int = 200
    n_test: int = 50
    seed: int = 0
    near: float = 0.0
    far: float = 1.0
    depth_scale: float = 1.0 / 65535.0


@dataclass
class TrainSettings:
    seed: int = 0
    out_dir: str = "runs/default"
    pseudo: bool = True
    pseudo_every: int = 1
    pseudo_start: int = 0
    freeze: str = "ds_rows"  # or "decoder"
    invariance: bool = True
    checkpoint_every: int = 0  # 0 -> every 10% of total_iters
    threads: int = 1

    def __post_init__(self):
        if self.freeze not in ("ds_rows", "decoder"):
            raise ConfigError(f"freeze must be 'ds_rows' or 'decoder', got {self.freeze!r}")
        if self.pseudo_every < 1 or self.pseudo_start < 0:
            raise ConfigError("pseudo_every must be >= 1 and pseudo_start >= 0")
        if self.checkpoint_every < 0 or self.threads < 1:
            raise ConfigError("checkpoint_every must be >= 0 and threads >= 1")


@dataclass
class RunConfig:
    model: NetworkConfig = field(default_factory=NetworkConfig)
    loss: HyperParams = field(default_factory=HyperParams)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def checkpoint_every(self) -> int:
        return self.train.checkpoint_every or max(1, self.loss.total_iters // 10)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "loss": self.loss.to_dict(),
            "train": asdict(self.train),
            "data": asdict(self.data),
        }

    def hash(self) -> str:
        """Digest of everything that shapes the run, excluding where outputs go."""
        d = self.to_dict()
        d["train"] = {k: v for k, v in d["train"].items() if k != "out_dir"}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **sections) -> "RunConfig":
        """Replace fields per section, e.g. ``with_overrides(train={"seed": 3})``."""
        out = self
        for section, values in sections.items():
            if values:
                out = replace(out, **{section: replace(getattr(out, section), **values)})
        return out


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    unknown = set(raw) - {"model", "loss", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    model = _build(NetworkConfig, dict(raw.get("model", {})), "model")
    loss_vals = dict(raw.get("loss", {}))
    loss_vals.setdefault("image_size", model.image_size)
    loss = _build(HyperParams, loss_vals, "loss")
    if loss.image_size != model.image_size:
        raise ConfigError("[loss].image_size disagrees with [model].image_size")
    train = _build(TrainSettings, dict(raw.get("train", {})), "train")
    data = _build(DataConfig, dict(raw.get("data", {})), "data")
    return RunConfig(model, loss, train, data)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def set_mode(cfg: RunConfig, mode) -> RunConfig:
    return replace(cfg, model=replace(cfg.model, mode=ConditionMode(mode)))


def resolve_palette(spec: str, n_classes: int | None = None) -> Palette:
    if spec == "toy":
        return Palette.toy(n_classes or 5)
    if spec == "cityscapes":
        return Palette.cityscapes()
    return Palette(tuple(load_color_table(spec)))


def load_samples(data: DataConfig):
    """All samples named by the data section, plus the palette they are encoded with."""
    palette = resolve_palette(data.palette, data.n_classes)
    if data.source == "toy":
        n = data.n_rd + data.n_rs + data.n_test
        return toy_samples(n, data.toy_size, data.n_classes, data.seed), palette
    if data.source == "folder":
        if not data.root:
            raise ConfigError("[data].root is required for folder datasets")
        layout = FolderLayout(near=data.near, far=data.far, depth_scale=data.depth_scale,
                              require=())
        samples = ingest_folder(data.root, layout, palette)
        if not samples:
            raise ConfigError(f"no samples found under {data.root}")
        return samples, palette
    raise ConfigError(f"unknown data source {data.source!r}")


def resolve_splits(data: DataConfig, samples) -> dict:
    if data.split_manifest:
        return read_split_manifest(data.split_manifest)["splits"]
    spec = SplitSpec(data.n_rd, data.n_rs, data.n_test, derive_seed(data.seed, "splits"))
    rd, rs, test = make_zero_pair_splits([s.id for s in samples], spec)
    return {"RD": rd, "RS": rs, "TEST_DS": test}


def load_data(cfg: RunConfig):
    samples, palette = load_samples(cfg.data)
    splits = resolve_splits(cfg.data, samples)
    return build_tensors(samples, splits, cfg.model.image_size, palette, Colormap.viridis())
