"""Spatiotemporal conv encoder, projection/prediction heads and checkpoints.

Clips enter as ``(N, T, 3, H, W)`` floats in [0, 1] (the simulator's frame
order); feature maps leave as ``(N, C', T', H', W')``.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_container, save_container
from .errors import ConfigError, ContractError, FrozenParameterError

SCHEMES = ("moco", "byol", "dpc", "vae", "external")


@dataclass(frozen=True)
class EncoderConfig:
    frames: int = 4
    frame_size: int = 64
    channels: tuple[int, ...] = (32, 64, 128, 256)
    # (temporal, height, width) stride of each stage's 3x3x3 convolution
    strides: tuple[tuple[int, ...], ...] = ((1, 2, 2), (1, 2, 2), (2, 2, 2), (2, 2, 2))
    projection_dim: int = 128
    predictor_hidden: int = 256
    momentum: float = 0.99

    def __post_init__(self):
        if len(self.channels) < 1:
            raise ConfigError("encoder needs at least one stage")
        if len(self.strides) != len(self.channels):
            raise ConfigError("one stride triple per stage is required")
        if any(len(s) != 3 or min(s) < 1 for s in self.strides):
            raise ConfigError("strides must be positive (t, h, w) triples")
        if self.projection_dim < 2:
            raise ConfigError("projection_dim must be >= 2")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.frames < 1 or self.frame_size < 1:
            raise ConfigError("frames and frame_size must be positive")

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, 3, self.frame_size, self.frame_size)

    def feature_shape(self) -> tuple[int, int, int, int]:
        """(C', T', H', W') from stride arithmetic of kernel 3, padding 1."""
        t, h, w = self.frames, self.frame_size, self.frame_size
        for st, sh, sw in self.strides:
            t = (t - 1) // st + 1
            h = (h - 1) // sh + 1
            w = (w - 1) // sw + 1
        return (self.channels[-1], t, h, w)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = [list(s) for s in self.strides]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["strides"] = tuple(tuple(s) for s in d["strides"])
        return cls(**d)


class Backbone(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        layers = []
        cin = 3
        for cout, stride in zip(config.channels, config.strides):
            layers += [nn.Conv3d(cin, cout, 3, stride=tuple(stride), padding=1), nn.ReLU()]
            cin = cout
        self.net = nn.Sequential(*layers)
        # PyTorch's default conv init shrinks activations layer by layer until the
        # output is bias-dominated and nearly input-independent; He init keeps the
        # signal alive, which the contrastive objectives need from step one.
        for m in self.net:
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        expected = self.config.input_shape
        if clips.dim() != 5 or tuple(clips.shape[1:]) != expected:
            raise ContractError(f"clip batch must be (N, {', '.join(map(str, expected))}), "
                                f"got {tuple(clips.shape)}")
        # centre [0, 1] pixels
        return self.net((clips - 0.5).permute(0, 2, 1, 3, 4))


class ProjectionHead(nn.Module):
    """Global average pool over (T', H', W') then linear(2D) -> BN -> ReLU -> linear(D).

    Pooled ReLU features share a large positive mean, so without the batch norm
    every clip starts out projected onto nearly the same direction.
    """

    def __init__(self, in_channels: int, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_channels, 2 * dim)
        self.bn = nn.BatchNorm1d(2 * dim)
        self.fc2 = nn.Linear(2 * dim, dim)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.bn(self.fc1(fmap.mean(dim=(2, 3, 4))))))


class Predictor(nn.Module):
    def __init__(self, dim: int, hidden: int, linear: bool = False):
        super().__init__()
        if linear:
            self.net = nn.Linear(dim, dim)
        else:
            self.net = nn.Sequential(nn.Linear(dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(),
                                     nn.Linear(hidden, dim))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z.reshape(-1, z.shape[-1])).reshape(z.shape[:-1] + (-1,))


class VideoEncoder(nn.Module):
    """Backbone plus projection head: the part that gets frozen and exported."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)
        self.projection = ProjectionHead(config.channels[-1], config.projection_dim)

    def encode(self, clips: torch.Tensor) -> torch.Tensor:
        return self.backbone(clips)

    def project(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.projection(fmap)

    def forward(self, clips: torch.Tensor):
        fmap = self.encode(clips)
        return fmap, self.project(fmap)

    def contract(self) -> dict:
        return {"feature_map_shape": list(self.config.feature_shape()),
                "projection_dim": self.config.projection_dim}


def build_encoder(config: EncoderConfig, seed: int = 0) -> VideoEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return VideoEncoder(config)


@torch.no_grad()
def momentum_update(online: nn.Module, target: nn.Module, m: float) -> None:
    """target <- m * target + (1 - m) * online, element by element."""
    if not 0.0 <= m <= 1.0:
        raise ContractError(f"momentum must lie in [0, 1], got {m}")
    po = dict(online.named_parameters())
    pt = dict(target.named_parameters())
    if po.keys() != pt.keys() or any(po[k].shape != pt[k].shape for k in po):
        raise ContractError("online and target parameter layouts differ")
    for name, t in pt.items():
        t.mul_(m).add_(po[name].detach(), alpha=1.0 - m)


def make_target(online: nn.Module) -> nn.Module:
    target = copy.deepcopy(online)
    for p in target.parameters():
        p.requires_grad_(False)
    return target


# --- freezing ---------------------------------------------------------------

def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
        p._drivessl_frozen = True
    module.eval()
    return module


def is_frozen(p: torch.Tensor) -> bool:
    return bool(getattr(p, "_drivessl_frozen", False))


def make_optimizer(params, lr: float, **kwargs) -> torch.optim.Adam:
    """Adam over ``params``; refuses parameters that were frozen."""
    params = list(params)
    for p in params:
        tensors = p["params"] if isinstance(p, dict) else [p]
        if any(is_frozen(t) for t in tensors):
            raise FrozenParameterError("frozen encoder parameters cannot be optimised")
    return torch.optim.Adam(params, lr=lr, **kwargs)


def param_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- checkpoints -------------------------------------------------------------

@dataclass
class EncoderCheckpoint:
    config: EncoderConfig
    params: dict[str, np.ndarray]
    contract: dict
    scheme: str
    meta: dict = field(default_factory=dict)

    def build(self, frozen: bool = True) -> VideoEncoder:
        model = VideoEncoder(self.config)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.params.items()})
        return freeze(model) if frozen else model


def _state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def save_checkpoint(model: VideoEncoder, path, scheme: str, meta: dict | None = None) -> EncoderCheckpoint:
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown training scheme {scheme!r}")
    params = _state_arrays(model)
    ckpt = EncoderCheckpoint(model.config, params, model.contract(), scheme, dict(meta or {}))
    header = {"kind": "encoder", "scheme": scheme, "config": model.config.to_dict(),
              "contract": ckpt.contract, "meta": ckpt.meta}
    save_container(path, header, params)
    return ckpt


def verify_contract(ckpt: EncoderCheckpoint) -> None:
    model = VideoEncoder(ckpt.config)
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    got = {k: tuple(v.shape) for k, v in ckpt.params.items()}
    if expected != got:
        raise ContractError("parameter layout does not match the architecture descriptor")
    model = ckpt.build(frozen=True)
    with torch.no_grad():
        fmap, z = model(torch.zeros((1,) + ckpt.config.input_shape))
    if list(fmap.shape[1:]) != list(ckpt.contract["feature_map_shape"]):
        raise ContractError(f"feature map {tuple(fmap.shape[1:])} != declared "
                            f"{ckpt.contract['feature_map_shape']}")
    if z.shape[1] != ckpt.contract["projection_dim"]:
        raise ContractError(f"projection width {z.shape[1]} != declared "
                            f"{ckpt.contract['projection_dim']}")


def load_checkpoint(path) -> EncoderCheckpoint:
    header, arrays = load_container(path)
    if header.get("kind") != "encoder":
        raise ContractError(f"{path} is not an encoder checkpoint (kind={header.get('kind')!r})")
    ckpt = EncoderCheckpoint(EncoderConfig.from_dict(header["config"]), arrays,
                             header["contract"], header["scheme"], header.get("meta", {}))
    verify_contract(ckpt)
    return ckpt
