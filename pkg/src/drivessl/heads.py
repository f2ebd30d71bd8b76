"""Head networks that turn frozen encoder outputs into actor and critic outputs.

Three ways to feed the encoder into the policy:

* ``direct_projection_1d`` (Pro1D): the projection embedding, prediction layer
  dropped, into fully connected layers.
* ``conv_avg_3d`` (avg1D): last conv feature map averaged over (T', H', W').
* ``temporal_axis_reduction`` (avg2D): feature map averaged over T' only,
  processed by two conv layers before the fully connected ones.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError

KINDS = ("direct_projection_1d", "conv_avg_3d", "temporal_axis_reduction")
SIZES = ("s", "xl")
LABELS = {"direct_projection_1d": "Pro1D", "conv_avg_3d": "avg1D", "temporal_axis_reduction": "avg2D"}

# added to the softplus so the variance stays positive where float32 softplus underflows
VAR_FLOOR = 1e-6

# (conv channels, fc units) before desk scaling; xl is the published actor/critic
FULL_SIZES = {"xl": ((1024, 512), (400, 100)), "s": ((256, 128), (128, 64))}


@dataclass(frozen=True)
class HeadVariant:
    kind: str = "temporal_axis_reduction"
    size: str = "xl"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}; choose from {KINDS}")
        if self.size not in SIZES:
            raise ConfigError(f"unknown head size {self.size!r}; choose from {SIZES}")

    @property
    def label(self) -> str:
        return f"{LABELS[self.kind]}_{self.size}"

    @classmethod
    def parse(cls, text: str) -> "HeadVariant":
        """Accepts ``avg2D_xl`` style labels or ``kind:size``."""
        if ":" in text:
            kind, size = text.split(":", 1)
            return cls(kind, size)
        label, _, size = text.rpartition("_")
        for kind, lab in LABELS.items():
            if lab.lower() == label.lower():
                return cls(kind, size)
        raise ConfigError(f"unknown head variant {text!r}")


def all_variants() -> list[HeadVariant]:
    return [HeadVariant(k, s) for k in KINDS for s in SIZES]


@dataclass(frozen=True)
class HeadConfig:
    conv_channels: tuple[int, ...] = (256, 128)
    conv_kernel: int = 2
    conv_stride: int = 1
    fc_units: tuple[int, ...] = (400, 100)
    n_actions: int = 1
    l1: float = 1e-5
    l2: float = 1e-5
    # extra factor on the He-normal draw of the actor/critic output layers only
    output_gain: float = 1.0

    @classmethod
    def for_size(cls, size: str, channel_scale: float = 0.25, n_actions: int = 1,
                 l1: float = 1e-5, l2: float = 1e-5, output_gain: float = 1.0) -> "HeadConfig":
        conv, fc = FULL_SIZES[size]
        conv = tuple(max(1, int(round(c * channel_scale))) for c in conv)
        return cls(conv, 2, 1, fc, n_actions, l1, l2, output_gain)


def adapt_features(variant: HeadVariant, fmap: torch.Tensor, projection: torch.Tensor | None):
    """Reduce ``(N, C', T', H', W')`` encoder output to the variant's head input."""
    if variant.kind == "direct_projection_1d":
        if projection is None:
            raise ContractError("direct projection heads need the projection embedding")
        return projection.flatten(1)
    if fmap.dim() != 5:
        raise ContractError(f"feature map must be (N, C, T, H, W), got {tuple(fmap.shape)}")
    if variant.kind == "conv_avg_3d":
        return fmap.mean(dim=(2, 3, 4))
    return fmap.mean(dim=2)


def input_shape(variant: HeadVariant, contract: dict) -> tuple[int, ...]:
    c, _, h, w = contract["feature_map_shape"]
    if variant.kind == "direct_projection_1d":
        return (contract["projection_dim"],)
    if variant.kind == "conv_avg_3d":
        return (c,)
    return (c, h, w)


class Trunk(nn.Module):
    """Shared layer stack; actor and critic each own one of these."""

    def __init__(self, in_shape: tuple[int, ...], config: HeadConfig):
        super().__init__()
        self.in_shape = tuple(in_shape)
        self.convs = nn.ModuleList()
        if len(in_shape) == 3:
            c, h, w = in_shape
            for cout in config.conv_channels:
                h = (h - config.conv_kernel) // config.conv_stride + 1
                w = (w - config.conv_kernel) // config.conv_stride + 1
                if h < 1 or w < 1:
                    raise ContractError(f"spatial input {in_shape[1:]} too small for "
                                        f"{len(config.conv_channels)} conv layers")
                self.convs.append(nn.Conv2d(c, cout, config.conv_kernel, config.conv_stride))
                c = cout
            flat = c * h * w
        elif len(in_shape) == 1:
            flat = in_shape[0]
        else:
            raise ContractError(f"unsupported head input shape {in_shape}")
        self.fcs = nn.ModuleList()
        for units in config.fc_units:
            self.fcs.append(nn.Linear(flat, units))
            flat = units
        self.out_features = flat

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.in_shape:
            raise ContractError(f"head input {tuple(x.shape[1:])} != expected {self.in_shape}")
        for conv in self.convs:
            x = F.relu(conv(x))
        x = x.flatten(1)
        for fc in self.fcs:
            x = F.relu(fc(x))
        return x

    def layer_shapes(self) -> list[tuple[int, ...]]:
        return [tuple(p.shape) for p in self.parameters()]


class Actor(nn.Module):
    def __init__(self, in_shape, config: HeadConfig):
        super().__init__()
        self.trunk = Trunk(in_shape, config)
        self.n_actions = config.n_actions
        self.out = nn.Linear(self.trunk.out_features, 2 * config.n_actions)

    def forward(self, x):
        """Returns ``(mean, variance)``, each (N, n_actions); variance via softplus."""
        raw = self.out(self.trunk(x))
        mean, raw_var = raw[:, :self.n_actions], raw[:, self.n_actions:]
        return mean, F.softplus(raw_var) + VAR_FLOOR


class Critic(nn.Module):
    def __init__(self, in_shape, config: HeadConfig):
        super().__init__()
        self.trunk = Trunk(in_shape, config)
        self.out = nn.Linear(self.trunk.out_features, 1)

    def forward(self, x):
        return self.out(self.trunk(x)).squeeze(-1)


class ActorCritic(nn.Module):
    def __init__(self, variant: HeadVariant, in_shape, config: HeadConfig):
        super().__init__()
        self.variant = variant
        self.config = config
        self.in_shape = tuple(in_shape)
        self.actor = Actor(in_shape, config)
        self.critic = Critic(in_shape, config)

    def forward(self, x):
        mean, var = self.actor(x)
        return mean, var, self.critic(x)


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """He-normal (fan-in) weights, zero biases, deterministic in ``seed``."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Linear, nn.Conv1d, nn.Conv2d, nn.Conv3d)):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()
    return module


def build_actor_critic(variant: HeadVariant, contract: dict, seed: int = 0,
                       channel_scale: float = 0.25, n_actions: int = 1,
                       l1: float = 1e-5, l2: float = 1e-5, output_gain: float = 1.0) -> ActorCritic:
    """He-initialised heads; ``output_gain`` < 1 starts the policy near zero steering.

    Feature maps of a trained encoder are roughly unit scale, and with plain He
    init the first policy then steers at full lock and crashes within a few
    steps, which burns an episode-counted budget quickly.
    """
    config = HeadConfig.for_size(variant.size, channel_scale, n_actions, l1, l2, output_gain)
    heads = init_params(ActorCritic(variant, input_shape(variant, contract), config), seed)
    if output_gain != 1.0:
        with torch.no_grad():
            heads.actor.out.weight.mul_(output_gain)
            heads.critic.out.weight.mul_(output_gain)
    return heads


def weight_penalty(module: nn.Module, l1: float, l2: float) -> torch.Tensor:
    """L1 + L2 on weight tensors (biases excluded)."""
    total = torch.zeros(())
    for name, p in module.named_parameters():
        if name.endswith("weight"):
            total = total + l1 * p.abs().sum() + l2 * (p ** 2).sum()
    return total
