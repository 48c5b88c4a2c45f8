"""Branched U-Net generator and shared-backbone critic/classifier."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    """Encoder channels per resolution level, full resolution first.

    ``len(channels) - 1`` is the number of downsampling steps (the depth).
    Skip connections join encoder and decoder at every level except the
    full-resolution one.
    """

    channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    convs_per_level: int = 2
    in_channels: int = 1
    kernel_size: int = 3

    @property
    def depth(self) -> int:
        return len(self.channels) - 1

    @property
    def skip_levels(self) -> frozenset[int]:
        return frozenset(range(1, self.depth))

    def validate(self) -> None:
        if self.kernel_size != 3:
            raise ConfigError("kernel_size is fixed at 3")
        if len(self.channels) < 2:
            raise ConfigError("need at least two resolution levels")
        if any(c <= 0 for c in self.channels) or self.convs_per_level < 1:
            raise ConfigError(f"invalid channel schedule {self.channels}")


@dataclass
class DiscriminatorConfig:
    """Shared backbone widths (each level ends in a 2x2 max-pool) and head sizes."""

    channels: tuple[int, ...] = (64, 128, 256, 512, 512)
    convs_per_level: int = 2
    critic_channels: int = 512
    cls_channels: tuple[int, ...] = (512, 512)
    cls_hidden: int = 1024
    cls_dropout: float = 0.5
    in_channels: int = 1
    kernel_size: int = 3

    def validate(self) -> None:
        if self.kernel_size != 3:
            raise ConfigError("kernel_size is fixed at 3")
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ConfigError(f"invalid backbone schedule {self.channels}")
        if self.critic_channels <= 0 or self.cls_hidden <= 0 or any(c <= 0 for c in self.cls_channels):
            raise ConfigError("head widths must be positive")
        if not 0.0 <= self.cls_dropout < 1.0:
            raise ConfigError("cls_dropout must lie in [0, 1)")


def init_weights(model: nn.Module) -> nn.Module:
    """He-normal weights (fan-in, ReLU gain) and zero biases for conv/linear layers."""
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return model


def conv_bn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def conv_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.ReLU())


class Decoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        ch = cfg.channels
        self.skip_levels = cfg.skip_levels
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        # index i handles decoder level depth-1-i, i.e. coarse to fine
        for level in reversed(range(cfg.depth)):
            self.up.append(conv_bn_relu(ch[level + 1], ch[level]))
            cin = 2 * ch[level] if level in self.skip_levels else ch[level]
            blocks = [conv_bn_relu(cin, ch[level])]
            blocks += [conv_bn_relu(ch[level], ch[level]) for _ in range(cfg.convs_per_level - 2)]
            self.fuse.append(nn.Sequential(*blocks))
        self.out = nn.Conv2d(ch[0], cfg.in_channels, 3, padding=1)

    def forward(self, bottleneck: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        x = bottleneck
        depth = len(skips)
        for i, (up, fuse) in enumerate(zip(self.up, self.fuse)):
            level = depth - 1 - i
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            if level in self.skip_levels:
                x = torch.cat([x, skips[level]], dim=1)
            x = fuse(x)
        return torch.tanh(self.out(x))


class Generator(nn.Module):
    """Shared encoder with one decoder per class (index 0 = h, 1 = p)."""

    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        cfg = cfg or GeneratorConfig()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels
        levels = [nn.Sequential(
            conv_bn_relu(cfg.in_channels, ch[0]),
            *[conv_bn_relu(ch[0], ch[0]) for _ in range(cfg.convs_per_level - 1)],
        )]
        for level in range(1, len(ch)):
            levels.append(nn.Sequential(
                conv_bn_relu(ch[level - 1], ch[level], stride=2),
                *[conv_bn_relu(ch[level], ch[level]) for _ in range(cfg.convs_per_level - 1)],
            ))
        self.encoder = nn.ModuleList(levels)
        self.decoders = nn.ModuleList([Decoder(cfg), Decoder(cfg)])
        init_weights(self)

    @property
    def skip_levels(self) -> frozenset[int]:
        return self.cfg.skip_levels

    def encode(self, x: torch.Tensor):
        feats = []
        for block in self.encoder:
            x = block(x)
            feats.append(x)
        return feats[-1], feats[:-1]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Both translations of ``x``: (G_h(x), G_p(x))."""
        bottleneck, skips = self.encode(x)
        return self.decoders[0](bottleneck, skips), self.decoders[1](bottleneck, skips)

    def translate(self, x: torch.Tensor, target) -> torch.Tensor:
        """G_target(x); ``target`` is 'h', 'p', 0, 1 or a per-sample label tensor."""
        if isinstance(target, str):
            target = {"h": 0, "p": 1}[target]
        if isinstance(target, int):
            bottleneck, skips = self.encode(x)
            return self.decoders[target](bottleneck, skips)
        return select(self(x), target)


def select(pair: tuple[torch.Tensor, torch.Tensor], index: torch.Tensor) -> torch.Tensor:
    """Per-sample pick from an (h, p) pair of image batches."""
    mask = index.view(-1, *([1] * (pair[0].dim() - 1))).to(pair[0].dtype)
    return pair[0] * (1 - mask) + pair[1] * mask


class Discriminator(nn.Module):
    """One backbone feeding two critics (h, p) and a VGG-style classifier.

    The backbone is VGG-like: 3x3 conv + ReLU stacks, each level closed by a
    2x2 max-pool. The classifier continues with its own blocks of the same
    kind before global max pooling and a dense head with dropout. No
    normalization layers, since the gradient penalty needs per-sample
    gradients.
    """

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        cfg = cfg or DiscriminatorConfig()
        cfg.validate()
        self.cfg = cfg
        layers = []
        cin = cfg.in_channels
        for c in cfg.channels:
            layers.append(conv_relu(cin, c))
            layers += [conv_relu(c, c) for _ in range(cfg.convs_per_level - 1)]
            layers.append(nn.MaxPool2d(2))
            cin = c
        self.backbone = nn.Sequential(*layers)
        self.critic_h = self._critic(cin, cfg.critic_channels)
        self.critic_p = self._critic(cin, cfg.critic_channels)
        cls = []
        c = cin
        for w in cfg.cls_channels:
            cls.append(conv_relu(c, w))
            cls += [conv_relu(w, w) for _ in range(cfg.convs_per_level - 1)]
            cls.append(nn.MaxPool2d(2))
            c = w
        self.cls_features = nn.Sequential(*cls)
        self.cls_head = nn.Sequential(
            nn.Dropout(cfg.cls_dropout),
            nn.Linear(c, cfg.cls_hidden),
            nn.ReLU(),
            nn.Dropout(cfg.cls_dropout),
            nn.Linear(cfg.cls_hidden, 2),
        )
        init_weights(self)

    @staticmethod
    def _critic(cin: int, width: int) -> nn.Sequential:
        return nn.Sequential(conv_relu(cin, width), nn.Conv2d(width, 1, 3, padding=1))

    def critics(self, x: torch.Tensor) -> torch.Tensor:
        """(n, 2) critic scores, column 0 = D_h, column 1 = D_p."""
        f = self.backbone(x)
        return torch.stack([self.critic_h(f).mean(dim=(1, 2, 3)), self.critic_p(f).mean(dim=(1, 2, 3))], dim=1)

    def classify(self, x: torch.Tensor) -> torch.Tensor:
        return self._classify(self.backbone(x))

    def _classify(self, f: torch.Tensor) -> torch.Tensor:
        return self.cls_head(self.cls_features(f).amax(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(D_p score (n,), D_h score (n,), class logits (n, 2))."""
        f = self.backbone(x)
        return (
            self.critic_p(f).mean(dim=(1, 2, 3)),
            self.critic_h(f).mean(dim=(1, 2, 3)),
            self._classify(f),
        )

    def all_outputs(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Critic matrix (n, 2) [h, p] and logits from one backbone pass."""
        f = self.backbone(x)
        scores = torch.stack([self.critic_h(f).mean(dim=(1, 2, 3)), self.critic_p(f).mean(dim=(1, 2, 3))], dim=1)
        return scores, self._classify(f)


def count_parameters(model: nn.Module | None) -> int:
    """Trainable scalars, each shared tensor counted once."""
    if model is None:
        return 0
    seen = set()
    total = 0
    for p in model.parameters():
        if p.requires_grad and id(p) not in seen:
            seen.add(id(p))
            total += p.numel()
    return total


@dataclass
class ModelBundle:
    generator: Generator
    discriminator: Discriminator
    parameter_counts: tuple[int, int] = field(init=False)

    def __post_init__(self):
        self.parameter_counts = (count_parameters(self.generator), count_parameters(self.discriminator))


def build_generator(cfg: GeneratorConfig | None = None) -> Generator:
    return Generator(cfg)


def build_discriminator(cfg: DiscriminatorConfig | None = None) -> Discriminator:
    return Discriminator(cfg)


def build_models(gcfg=None, dcfg=None) -> ModelBundle:
    return ModelBundle(build_generator(gcfg), build_discriminator(dcfg))


def architecture_summary(model: nn.Module) -> str:
    lines = [type(model).__name__]
    for name, module in model.named_modules():
        if isinstance(module, (nn.Conv2d, nn.Linear, nn.BatchNorm2d)):
            n = sum(p.numel() for p in module.parameters(recurse=False))
            lines.append(f"  {name}: {module} [{n}]")
    lines.append(f"trainable parameters: {count_parameters(model)}")
    return "\n".join(lines)


# desk-scale schedules used by the smoke preset
TINY_GENERATOR = GeneratorConfig(channels=(8, 16, 32, 64), convs_per_level=2)
TINY_DISCRIMINATOR = DiscriminatorConfig(
    channels=(16, 32), convs_per_level=2, critic_channels=32, cls_channels=(64, 64), cls_hidden=64, cls_dropout=0.3
)
