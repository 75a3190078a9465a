"""Depth-to-semantics evaluation: confusion counts, per-class IoU, mean IoU, pixel accuracy."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .codec import LabelMap, Palette, RgbImage, decode_semantic_nn, encode_semantic
from .errors import InputError
from .model import Domain, Networks

log = logging.getLogger(__name__)


def upsample_nn(m: LabelMap, height: int, width: int) -> LabelMap:
    h, w = m.shape
    if height < h or width < w:
        raise InputError(f"cannot upsample {h}x{w} to smaller {height}x{width}")
    rows = np.arange(height) * h // height
    cols = np.arange(width) * w // width
    return LabelMap(m.labels[np.ix_(rows, cols)], m.num_classes)


def confusion_counts(pred: LabelMap, gt: LabelMap) -> np.ndarray:
    """counts[g, p]: pixels with ground truth g predicted as p."""
    if pred.shape != gt.shape:
        raise InputError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if pred.num_classes != gt.num_classes:
        raise InputError("prediction and ground truth use different class counts")
    c = gt.num_classes
    flat = gt.labels.ravel() * c + pred.labels.ravel()
    return np.bincount(flat, minlength=c * c).reshape(c, c).astype(np.int64)


def iou_per_class(counts: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both prediction and ground truth."""
    counts = np.asarray(counts)
    tp = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=1) + counts.sum(axis=0) - tp
    out = np.full(len(tp), np.nan)
    np.divide(tp, union, out=out, where=union > 0)
    return out


def pixel_accuracy(counts: np.ndarray) -> float:
    total = int(np.asarray(counts).sum())
    if total == 0:
        raise InputError("no pixels were evaluated")
    return float(np.trace(counts)) / total


@dataclass
class EvalReport:
    per_class_iou: list  # None for classes absent from the ground truth
    mean_iou: float
    pixel_accuracy: float
    n_images: int
    class_names: list
    confusion: list
    n_skipped: int = 0

    @classmethod
    def from_counts(cls, counts, names, n_images, n_skipped=0) -> "EvalReport":
        counts = np.asarray(counts, dtype=np.int64)
        iou = iou_per_class(counts)
        present = counts.sum(axis=1) > 0
        per_class = [float(v) if p else None for v, p in zip(iou, present)]
        miou = float(np.mean(iou[present])) if present.any() else float("nan")
        return cls(per_class, miou, pixel_accuracy(counts), n_images, list(names),
                   counts.tolist(), n_skipped)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        """One row: a column per class IoU, then mIoU and Pixel Acc., all in percent."""
        header = list(self.class_names) + ["mIoU", "Pixel Acc."]
        cells = ["-" if v is None else f"{100 * v:.1f}" for v in self.per_class_iou]
        cells += [f"{100 * self.mean_iou:.1f}", f"{100 * self.pixel_accuracy:.1f}"]
        widths = [max(len(h), len(c)) for h, c in zip(header, cells)]
        line = " | ".join(h.rjust(w) for h, w in zip(header, widths))
        row = " | ".join(c.rjust(w) for c, w in zip(cells, widths))
        return f"{line}\n{'-' * len(line)}\n{row}\n"


def evaluate_predictions(preds, gts, palette: Palette) -> EvalReport:
    """Aggregate confusion counts over the whole set before computing metrics."""
    c = len(palette)
    counts = np.zeros((c, c), dtype=np.int64)
    n, skipped = 0, 0
    for pred, gt in zip(preds, gts):
        if gt is None:
            skipped += 1
            continue
        if pred.shape != gt.shape:
            pred = upsample_nn(pred, *gt.shape)
        counts += confusion_counts(pred, gt)
        n += 1
    if skipped:
        log.warning("%d test samples had no ground truth and were skipped", skipped)
    return EvalReport.from_counts(counts, palette.names, n, skipped)


@torch.no_grad()
def translate_batch(nets: Networks, x: torch.Tensor, source, target, batch_size: int = 16):
    nets.eval()
    outs = [nets.translate(x[i:i + batch_size], source, target)
            for i in range(0, len(x), batch_size)]
    return torch.cat(outs) if outs else x.new_zeros((0, 3) + tuple(x.shape[2:]))


def to_rgb_images(t: torch.Tensor) -> list[RgbImage]:
    px = t.clamp(-1, 1).permute(0, 2, 3, 1).cpu().numpy()
    return [RgbImage(p, network=True) for p in px]


def predict_d2s(nets: Networks, depth: torch.Tensor, palette: Palette) -> list[LabelMap]:
    out = translate_batch(nets, depth, Domain.D, Domain.S)
    return [decode_semantic_nn(img, palette) for img in to_rgb_images(out)]


def evaluate_d2s(nets: Networks, test_depth: torch.Tensor, test_labels, palette: Palette,
                 dump_dir=None, test_ids=None) -> EvalReport:
    """Translate each depth image with the (D -> S) condition, decode, upsample, score."""
    preds = predict_d2s(nets, test_depth, palette)
    report = evaluate_predictions(preds, test_labels, palette)
    if dump_dir is not None:
        dump_triptychs(dump_dir, test_depth, preds, test_labels, palette, test_ids)
    return report


def dump_triptychs(out_dir, depth: torch.Tensor, preds, gts, palette: Palette, ids=None):
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    depth_imgs = to_rgb_images(depth)
    for k, (d, pred, gt) in enumerate(zip(depth_imgs, preds, gts)):
        name = ids[k] if ids else f"{k:05d}"
        panels = [d.to_file().pixels, encode_semantic(pred, palette).pixels]
        if gt is not None:
            g = gt
            if g.shape != pred.shape:
                h, w = pred.shape
                rows = np.arange(h) * g.shape[0] // h
                cols = np.arange(w) * g.shape[1] // w
                g = LabelMap(g.labels[np.ix_(rows, cols)], g.num_classes)
            panels.append(encode_semantic(g, palette).pixels)
        Image.fromarray(np.concatenate(panels, axis=1)).save(out_dir / f"{name}.png")


def random_label_baseline(test_labels, palette: Palette, seed: int = 0) -> EvalReport:
    """Uniformly random predictions at ground-truth resolution."""
    rng = np.random.default_rng(seed)
    preds = [LabelMap(rng.integers(0, len(palette), gt.shape), len(palette)) for gt in test_labels]
    return evaluate_predictions(preds, test_labels, palette)

