"""Training objectives. Every reduction is a mean over batch and spatial axes."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError


@dataclass
class HyperParams:
    lambda_l1: float = 10.0
    lambda_idt: float = 5.0
    lambda_r: float = 1.0
    lambda_d: float = 1.0
    lambda_s: float = 1.0
    lambda_cls: float = 1.0
    base_lr: float = 2e-4
    total_iters: int = 240_000
    batch_size: int = 1
    image_size: int = 256
    beta1: float = 0.5
    beta2: float = 0.999

    def __post_init__(self):
        for name in ("lambda_l1", "lambda_idt", "lambda_r", "lambda_d", "lambda_s", "lambda_cls"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.total_iters < 2 or self.total_iters % 2:
            raise ConfigError("total_iters must be a positive even number")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    def domain_weight(self, domain) -> float:
        return (self.lambda_r, self.lambda_d, self.lambda_s)[int(domain)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    gan_g: float = 0.0
    gan_d: float = 0.0
    l1: float = 0.0
    idt: float = 0.0
    cls: float = 0.0
    pseudo: float = 0.0
    total: float = 0.0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> list[float]:
        vals = (getattr(self, name) for name in self.columns())
        return [float(v.detach()) if torch.is_tensor(v) else float(v) for v in vals]


def _same_shape(a, b):
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_recon(pred, target, lambda_dom: float = 1.0):
    _same_shape(pred, target)
    return lambda_dom * (pred - target).abs().mean()


def identity_loss(gen_out_same_domain, input_img, lambda_dom: float = 1.0):
    """L1 between an input and its translation into its own domain."""
    return l1_recon(gen_out_same_domain, input_img, lambda_dom)


def _nonempty(*scores):
    for s in scores:
        if s.numel() == 0:
            raise InputError("score batch is empty")


def ralsgan_d(real_scores, fake_scores):
    """Relativistic average least-squares critic loss with targets +1 / -1."""
    _nonempty(real_scores, fake_scores)
    return (((real_scores - fake_scores.mean() - 1) ** 2).mean()
            + ((fake_scores - real_scores.mean() + 1) ** 2).mean())


def ralsgan_g(real_scores, fake_scores):
    _nonempty(real_scores, fake_scores)
    return (((fake_scores - real_scores.mean() - 1) ** 2).mean()
            + ((real_scores - fake_scores.mean() + 1) ** 2).mean())


def domain_cls_loss(logits, true_domain):
    """Mean softmax cross-entropy; ``true_domain`` is one ordinal or a per-sample tensor."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    n = logits.shape[1]
    if isinstance(true_domain, torch.Tensor):
        target = true_domain.long().reshape(-1)
        if target.shape[0] != logits.shape[0]:
            raise InputError("one domain label per logit row required")
    else:
        target = torch.full((logits.shape[0],), int(true_domain), dtype=torch.long)
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n):
        raise InputError(f"domain label outside [0, {n})")
    return F.cross_entropy(logits, target)


def pseudo_pair_loss(sem_from_rgb, sem_from_depth):
    _same_shape(sem_from_rgb, sem_from_depth)
    return (sem_from_rgb - sem_from_depth).abs().mean()


def total_loss(parts: LossReport, hp: HyperParams, step_type: str = "supervised"):
    """Generator objective: GAN + weighted L1 + weighted identity, plus step-specific terms.

    Works on floats or on tensors, so the value that is backpropagated and the
    value that is logged come from the same expression.
    """
    if step_type == "supervised":
        return parts.gan_g + hp.lambda_l1 * parts.l1 + hp.lambda_idt * parts.idt
    if step_type == "invariance":
        return parts.cls
    if step_type == "pseudo":
        return parts.pseudo
    raise ConfigError(f"unknown step type {step_type!r}")
