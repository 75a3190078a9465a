"""Networks: shared encoder, condition-normalized decoder, patch critics, domain classifier."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError


class Domain(enum.IntEnum):
    R = 0
    D = 1
    S = 2

    @classmethod
    def parse(cls, value) -> "Domain":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise InputError(f"unknown domain {value!r}") from None


class ConditionMode(str, enum.Enum):
    OUTPUT_ONLY = "dcn0"
    INPUT_OUTPUT = "dcn"


@dataclass(frozen=True)
class ConditionRegistry:
    """Maps a (source, target) domain pair to a row of every CBN table."""

    mode: ConditionMode
    n_domains: int = 3

    def __post_init__(self):
        object.__setattr__(self, "mode", ConditionMode(self.mode))
        if self.n_domains < 1:
            raise ConfigError("n_domains must be positive")

    @property
    def size(self) -> int:
        if self.mode is ConditionMode.OUTPUT_ONLY:
            return self.n_domains
        return self.n_domains * self.n_domains

    def index(self, source, target) -> int:
        s, t = int(source), int(target)
        for d in (s, t):
            if not 0 <= d < self.n_domains:
                raise InputError(f"domain ordinal {d} outside [0, {self.n_domains})")
        if self.mode is ConditionMode.OUTPUT_ONLY:
            return t
        return s * self.n_domains + t


def condition_index(reg: ConditionRegistry, source, target) -> int:
    return reg.index(source, target)


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 256
    base_channels: int = 64
    n_resnet_blocks_total: int = 9
    encoder_blocks: int = 4
    n_domains: int = 3
    mode: ConditionMode = ConditionMode.INPUT_OUTPUT
    disc_channels: int | None = None
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "mode", ConditionMode(self.mode))
        if not 0 < self.encoder_blocks < self.n_resnet_blocks_total:
            raise ConfigError("need 0 < encoder_blocks < n_resnet_blocks_total")
        if self.image_size < 4 or self.image_size % 4:
            raise ConfigError("image_size must be a positive multiple of 4")
        if self.base_channels < 1 or self.n_domains < 1:
            raise ConfigError("base_channels and n_domains must be positive")

    @property
    def latent_channels(self) -> int:
        return self.base_channels * 4

    @property
    def decoder_blocks(self) -> int:
        return self.n_resnet_blocks_total - self.encoder_blocks

    def registry(self) -> ConditionRegistry:
        return ConditionRegistry(self.mode, self.n_domains)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


def cbn_forward(x, idx, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5, track_stats=True):
    """Batch normalization with the affine rows picked per condition.

    ``idx`` is one condition index for the whole batch or a length-N tensor
    of per-sample indices. Statistics are shared by every condition.
    """
    n_cond = gamma.shape[0]
    if isinstance(idx, torch.Tensor):
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= n_cond):
            raise ConfigError(f"condition index outside [0, {n_cond})")
        g, b = gamma[idx], beta[idx]
    else:
        if not 0 <= idx < n_cond:
            raise ConfigError(f"condition index {idx} outside [0, {n_cond})")
        g, b = gamma[idx].unsqueeze(0), beta[idx].unsqueeze(0)
    if training:
        # explicit batch statistics so eps = 0 is allowed
        mean = x.mean(dim=(0, 2, 3))
        var = x.var(dim=(0, 2, 3), unbiased=False)
        if track_stats and running_mean is not None:
            n = x.numel() // x.shape[1]
            with torch.no_grad():
                running_mean.mul_(1 - momentum).add_(mean.detach(), alpha=momentum)
                running_var.mul_(1 - momentum).add_(var.detach() * (n / max(n - 1, 1)),
                                                    alpha=momentum)
        out = (x - mean[None, :, None, None]) / torch.sqrt(var[None, :, None, None] + eps)
    else:
        out = F.batch_norm(x, running_mean, running_var, None, None, False, 0.0, eps)
    return out * g[:, :, None, None] + b[:, :, None, None]


class ConditionalBatchNorm2d(nn.Module):
    def __init__(self, num_features, num_conditions, eps=1e-5, momentum=0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.track_stats = True
        self.weight = nn.Parameter(torch.ones(num_conditions, num_features))
        self.bias = nn.Parameter(torch.zeros(num_conditions, num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    @property
    def num_conditions(self):
        return self.weight.shape[0]

    def forward(self, x, idx):
        return cbn_forward(x, idx, self.weight, self.bias, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps, self.track_stats)

    def extra_repr(self):
        return f"{self.num_features}, conditions={self.num_conditions}"


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambda_cls):
        ctx.lambda_cls = lambda_cls
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lambda_cls * grad, None


def grad_reverse(x, lambda_cls: float):
    if lambda_cls < 0:
        raise ConfigError("lambda_cls must be non-negative")
    return _GradReverse.apply(x, float(lambda_cls))


class ResnetBlock(nn.Module):
    def __init__(self, dim, eps=1e-5, momentum=0.1):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, bias=False)
        self.norm1 = nn.BatchNorm2d(dim, eps=eps, momentum=momentum)
        self.conv2 = nn.Conv2d(dim, dim, 3, bias=False)
        self.norm2 = nn.BatchNorm2d(dim, eps=eps, momentum=momentum)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(F.pad(x, (1, 1, 1, 1), mode="reflect"))))
        h = self.norm2(self.conv2(F.pad(h, (1, 1, 1, 1), mode="reflect")))
        return x + h


class CondResnetBlock(nn.Module):
    def __init__(self, dim, n_cond, eps=1e-5, momentum=0.1):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, bias=False)
        self.norm1 = ConditionalBatchNorm2d(dim, n_cond, eps, momentum)
        self.conv2 = nn.Conv2d(dim, dim, 3, bias=False)
        self.norm2 = ConditionalBatchNorm2d(dim, n_cond, eps, momentum)

    def forward(self, x, idx):
        h = F.relu(self.norm1(self.conv1(F.pad(x, (1, 1, 1, 1), mode="reflect")), idx))
        h = self.norm2(self.conv2(F.pad(h, (1, 1, 1, 1), mode="reflect")), idx)
        return x + h


class Encoder(nn.Module):
    """7x7 stem, two stride-2 convolutions, then the first residual blocks."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c = cfg.base_channels
        self.stem = nn.Conv2d(3, c, 7, bias=False)
        self.stem_norm = nn.BatchNorm2d(c, eps=cfg.eps, momentum=cfg.momentum)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1, bias=False)
        self.down1_norm = nn.BatchNorm2d(2 * c, eps=cfg.eps, momentum=cfg.momentum)
        self.down2 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1, bias=False)
        self.down2_norm = nn.BatchNorm2d(4 * c, eps=cfg.eps, momentum=cfg.momentum)
        self.blocks = nn.ModuleList(
            ResnetBlock(4 * c, cfg.eps, cfg.momentum) for _ in range(cfg.encoder_blocks))

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise InputError(f"encoder expects N x 3 x H x W, got {tuple(x.shape)}")
        h = F.relu(self.stem_norm(self.stem(F.pad(x, (3, 3, 3, 3), mode="reflect"))))
        h = F.relu(self.down1_norm(self.down1(h)))
        h = F.relu(self.down2_norm(self.down2(h)))
        for block in self.blocks:
            h = block(h)
        return h


class Decoder(nn.Module):
    """Remaining residual blocks, two upsampling stages, tanh output; every norm is conditional."""

    def __init__(self, cfg: NetworkConfig, reg: ConditionRegistry | None = None):
        super().__init__()
        reg = reg or cfg.registry()
        if reg.n_domains != cfg.n_domains:
            raise ConfigError("registry and network disagree on n_domains")
        n, c = reg.size, cfg.base_channels
        self.registry = reg
        self.blocks = nn.ModuleList(
            CondResnetBlock(4 * c, n, cfg.eps, cfg.momentum) for _ in range(cfg.decoder_blocks))
        self.up1 = nn.ConvTranspose2d(4 * c, 2 * c, 3, stride=2, padding=1, output_padding=1,
                                      bias=False)
        self.up1_norm = ConditionalBatchNorm2d(2 * c, n, cfg.eps, cfg.momentum)
        self.up2 = nn.ConvTranspose2d(2 * c, c, 3, stride=2, padding=1, output_padding=1,
                                      bias=False)
        self.up2_norm = ConditionalBatchNorm2d(c, n, cfg.eps, cfg.momentum)
        self.out = nn.Conv2d(c, 3, 7)

    def forward(self, z, idx):
        h = z
        for block in self.blocks:
            h = block(h, idx)
        h = F.relu(self.up1_norm(self.up1(h), idx))
        h = F.relu(self.up2_norm(self.up2(h), idx))
        return torch.tanh(self.out(F.pad(h, (3, 3, 3, 3), mode="reflect")))

    def cbn_layers(self) -> list[tuple[str, ConditionalBatchNorm2d]]:
        return [(name, m) for name, m in self.named_modules()
                if isinstance(m, ConditionalBatchNorm2d)]


class PatchDiscriminator(nn.Module):
    """Four stride-2/stride-1 4x4 convolution stages and a 1-channel head (70x70 patches)."""

    def __init__(self, base_channels=64, eps=1e-5, momentum=0.1):
        super().__init__()
        c = base_channels
        self.layers = nn.Sequential(
            nn.Conv2d(3, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(2 * c, eps=eps, momentum=momentum),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(4 * c, eps=eps, momentum=momentum),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 8 * c, 4, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(8 * c, eps=eps, momentum=momentum),
            nn.LeakyReLU(0.2),
            nn.Conv2d(8 * c, 1, 4, stride=1, padding=1),
        )

    def forward(self, img):
        if img.dim() != 4 or img.shape[1] != 3:
            raise InputError(f"discriminator expects N x 3 x H x W, got {tuple(img.shape)}")
        return self.layers(img)


class DomainClassifier(nn.Module):
    def __init__(self, latent_channels, n_domains=3):
        super().__init__()
        self.latent_channels = latent_channels
        self.conv1 = nn.Conv2d(latent_channels, latent_channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(latent_channels, latent_channels, 3, stride=2, padding=1)
        self.head = nn.Linear(latent_channels, n_domains)

    def forward(self, z):
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise InputError(
                f"classifier expects N x {self.latent_channels} x h x w, got {tuple(z.shape)}")
        h = F.leaky_relu(self.conv1(z), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        return self.head(h.mean(dim=(2, 3)))


def classify_domain(classifier: DomainClassifier, z):
    return classifier(z)


def discriminate(disc: PatchDiscriminator, img):
    return disc(img)


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """N(0, std) for convolution/linear weights, zero biases; CBN tables keep gamma=1, beta=0."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_encoder(cfg: NetworkConfig) -> Encoder:
    enc = Encoder(cfg)
    init_weights(enc)
    return enc


def build_decoder(cfg: NetworkConfig, reg: ConditionRegistry | None = None) -> Decoder:
    dec = Decoder(cfg, reg)
    init_weights(dec)
    return dec


class Networks(nn.Module):
    """Every trainable part of one model, under stable state-dict prefixes."""

    def __init__(self, cfg: NetworkConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.registry = cfg.registry()
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg, self.registry)
        disc_c = cfg.disc_channels or cfg.base_channels
        self.discriminators = nn.ModuleList(
            PatchDiscriminator(disc_c, cfg.eps, cfg.momentum) for _ in range(cfg.n_domains))
        if cfg.mode is ConditionMode.OUTPUT_ONLY:
            self.classifier = DomainClassifier(cfg.latent_channels, cfg.n_domains)
        else:
            self.classifier = None
        if generator is not None:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(int(torch.randint(0, 2**62, (1,), generator=generator)))
                init_weights(self)
        else:
            init_weights(self)

    def translate(self, x, source, target):
        idx = self.registry.index(source, target)
        return self.decoder(self.encoder(x), idx)

    def generator_modules(self) -> list[nn.Module]:
        return [self.encoder, self.decoder]


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def cbn_channel_sum(cfg: NetworkConfig) -> int:
    """Sum of channel counts over the decoder's conditional norm layers."""
    c = cfg.base_channels
    return cfg.decoder_blocks * 2 * 4 * c + 2 * c + c


def cbn_param_count(cfg: NetworkConfig) -> int:
    return 2 * cbn_channel_sum(cfg) * cfg.registry().size


def generator_param_count(cfg: NetworkConfig) -> int:
    """Encoder + decoder parameters (the figure compared across model variants)."""
    return count_params(Encoder(cfg)) + count_params(Decoder(cfg))
