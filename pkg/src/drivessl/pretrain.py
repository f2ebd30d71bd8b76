"""Offline encoder pretraining: clip corpus, augmentation and the training loop.

Corpus layout on disk::

    root/manifest.json                 {"format", "version", "frame_size", "fps", "videos": [...]}
    root/video_<id>/meta.json          {"frames": n, "fps": 10, "size": [H, W]}
    root/video_<id>/frame_<n>.png      RGB frames, n zero-padded to 4 digits

A video directory may hold ``frames.npy`` (uint8, ``(n, H, W, 3)``) instead of
PNG files. Each manifest entry is ``{"id", "frames", "route"}``; generated
corpora also carry ``root/routes.cfg`` with the road each video was driven on.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from . import kernels, sim
from .encoder import (EncoderConfig, Predictor, VideoEncoder, build_encoder, make_optimizer,
                      make_target, momentum_update, save_checkpoint)
from .errors import ConfigError, ContractError, TrainingDivergedError
from .losses import (DpcHead, byol_loss, dpc_loss, info_nce, temporal_persistency_pairs,
                     vae_loss)

log = logging.getLogger(__name__)

PRETRAIN_SCHEMES = ("moco", "byol", "dpc", "vae")
CORPUS_FORMAT = "drivessl-clips"
FPS = 10


# --- corpus -------------------------------------------------------------------

def _video_dir(root: Path, vid: str) -> Path:
    return root / f"video_{vid}"


class ClipDataset:
    """Read-only video corpus; every video is held in memory once loaded."""

    def __init__(self, root, clip_length: int = 4, frame_stride: int = 1):
        self.root = Path(root)
        if clip_length < 1 or frame_stride < 1:
            raise ConfigError("clip_length and frame_stride must be positive")
        self.clip_length = clip_length
        self.frame_stride = frame_stride
        manifest = self.root / "manifest.json"
        if not manifest.is_file():
            raise ContractError(f"{self.root}: no manifest.json (not a clip corpus)")
        self.manifest = json.loads(manifest.read_text())
        self.videos = [dict(v) for v in self.manifest.get("videos", [])]
        self._cache: dict[str, np.ndarray] = {}
        self.validate()

    @property
    def ids(self) -> list[str]:
        return [v["id"] for v in self.videos]

    @property
    def frame_size(self) -> int:
        return int(self.manifest["frame_size"])

    def __len__(self):
        return len(self.videos)

    def validate(self) -> None:
        ids = self.ids
        if not ids:
            raise ContractError(f"{self.root}: corpus has no videos")
        if len(set(ids)) != len(ids):
            raise ContractError(f"{self.root}: duplicate video ids")
        need = self.clip_length * self.frame_stride
        for v in self.videos:
            d = _video_dir(self.root, v["id"])
            if not d.is_dir():
                raise ContractError(f"missing video directory {d}")
            if v["frames"] < need:
                raise ContractError(f"video {v['id']} has {v['frames']} frames, clips need {need}")
            if not (d / "frames.npy").is_file():
                last = d / f"frame_{v['frames'] - 1:04d}.png"
                if not last.is_file():
                    raise ContractError(f"video {v['id']}: expected {v['frames']} frames, {last.name} missing")

    def frames(self, index: int) -> np.ndarray:
        """uint8 ``(n, 3, H, W)`` frames of video ``index``."""
        vid = self.videos[index]["id"]
        if vid not in self._cache:
            d = _video_dir(self.root, vid)
            if (d / "frames.npy").is_file():
                arr = np.load(d / "frames.npy")
            else:
                arr = np.stack([np.asarray(Image.open(d / f"frame_{n:04d}.png").convert("RGB"))
                                for n in range(self.videos[index]["frames"])])
            if arr.ndim != 4 or arr.shape[-1] != 3 or arr.dtype != np.uint8:
                raise ContractError(f"video {vid}: frames must be uint8 (n, H, W, 3)")
            self._cache[vid] = np.ascontiguousarray(arr.transpose(0, 3, 1, 2))
        return self._cache[vid]


def _pursuit_steering(state: sim.WorldState, target_offset: float, lookahead: float = 6.0) -> float:
    route = state.route
    k, t, _ = kernels.project_point(state.x, state.y, route.xs, route.ys)
    s = route.arclen[k] + t * (route.arclen[k + 1] - route.arclen[k])
    tx, ty = route.point_at(s + lookahead, target_offset)
    alpha = math.atan2(ty - state.y, tx - state.x) - state.heading
    alpha = math.atan2(math.sin(alpha), math.cos(alpha))
    cfg = state.config
    delta = math.atan(2.0 * cfg.wheelbase * math.sin(alpha) / lookahead)
    return delta / math.radians(cfg.max_steer_deg)


def record_video(seed: int, length: int, world: sim.WorldConfig, rng: np.random.Generator) -> np.ndarray:
    """Frames ``(length, 3, H, W)`` of a pure-pursuit drive that wanders about the centreline."""
    state, obs = sim.reset(seed, world)
    frames = [obs[-1]]
    offset = 0.0
    while len(frames) < length:
        offset = float(np.clip(0.9 * offset + rng.normal(0.0, 0.25), -1.2, 1.2))
        steer = _pursuit_steering(state, offset) + rng.normal(0.0, 0.05)
        state, res = sim.step(state, steer)
        frames.append(res.observation[-1])
        if res.done and len(frames) < length:
            return None
    return np.stack(frames)


def random_route_lines(name: str, travel: float, rng: np.random.Generator) -> list[str]:
    """Route-file lines for a random road: curvature pieces plus roadside discs."""
    pieces = ["20:0"]
    total = 20.0
    while total < travel + 40.0:
        length = float(rng.uniform(15.0, 40.0))
        pieces.append(f"{length:.2f}:{rng.uniform(-0.03, 0.03):.4f}")
        total += length
    obstacles = []
    for s0 in np.arange(rng.uniform(5.0, 15.0), total, 12.0):
        if rng.random() < 0.5:
            side = 1.0 if rng.random() < 0.5 else -1.0
            obstacles.append(f"{s0:.2f}:{side * rng.uniform(2.8, 3.1):.2f}:{rng.uniform(0.25, 0.4):.2f}")
    lines = [f"{name}.segments = {', '.join(pieces)}", f"{name}.spawn_margin = 10"]
    if obstacles:
        lines.append(f"{name}.obstacles = {', '.join(obstacles)}")
    return lines


def generate_synthetic_corpus(root, n_videos: int = 8, length: int = 64, seed: int = 0,
                              world: sim.WorldConfig | None = None) -> ClipDataset:
    """Render simulator drives into the clip-corpus layout; byte-identical for a fixed seed.

    Every video gets its own random road, written to ``root/routes.cfg`` so the
    drives can be replayed, which keeps videos tellable apart.
    """
    if n_videos < 1 or length < 1:
        raise ConfigError("n_videos and length must be positive")
    world = world or sim.WorldConfig()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    travel = length * world.speed * world.dt
    lines = ["# random roads of the synthetic corpus, one per video"]
    for i in range(n_videos):
        lines += random_route_lines(f"video_{i:04d}", travel, rng)
    routes_file = root / "routes.cfg"
    routes_file.write_text("\n".join(lines) + "\n")
    entries = []
    for i in range(n_videos):
        vid = f"{i:04d}"
        cfg = sim.WorldConfig(**{**asdict(world), "route_id": f"video_{vid}", "max_steps": length,
                                 "routes_file": str(routes_file)})
        frames = None
        attempt = 0
        while frames is None:
            if attempt >= 20:
                raise RuntimeError(f"could not record a {length}-frame drive for video {vid}")
            frames = record_video(seed * 7919 + i * 101 + attempt, length, cfg, rng)
            attempt += 1
        d = _video_dir(root, vid)
        d.mkdir(exist_ok=True)
        for n, frame in enumerate(frames):
            Image.fromarray(frame.transpose(1, 2, 0)).save(d / f"frame_{n:04d}.png", format="PNG")
        (d / "meta.json").write_text(json.dumps(
            {"frames": length, "fps": FPS, "size": [world.frame_size, world.frame_size]}, sort_keys=True))
        entries.append({"id": vid, "frames": length, "route": f"video_{vid}"})
    manifest = {"format": CORPUS_FORMAT, "version": 1, "frame_size": world.frame_size, "fps": FPS,
                "seed": seed, "videos": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return ClipDataset(root)


# --- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationParams:
    # Crops and mirroring are off by default: in an ego-centred top-down view
    # they move the car relative to the lane and invert the curve direction,
    # which are the cues lane keeping needs. Colour jitter is left on.
    crop_scale: tuple[float, float] = (1.0, 1.0)
    flip_prob: float = 0.0
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    # max distance (frames) between the two windows of a pair; 0 draws them independently
    temporal_offset: int = 0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError("crop_scale must satisfy 0 < low <= high <= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must lie in [0, 1]")
        if min(self.brightness, self.contrast, self.saturation) < 0 or self.brightness >= 1:
            raise ConfigError("jitter amplitudes must be non-negative (brightness < 1)")
        if self.temporal_offset < 0:
            raise ConfigError("temporal_offset must be >= 0")

    @property
    def is_identity(self) -> bool:
        return (self.crop_scale == (1.0, 1.0) and self.flip_prob == 0.0 and self.brightness == 0.0
                and self.contrast == 0.0 and self.saturation == 0.0)


IDENTITY = AugmentationParams(crop_scale=(1.0, 1.0), flip_prob=0.0, brightness=0.0, contrast=0.0,
                              saturation=0.0)


@dataclass(frozen=True)
class AugmentationDraw:
    """One clip's worth of random choices, shared by all its frames."""

    top: int
    left: int
    side: int
    flip: bool
    brightness: float
    contrast: float
    saturation: float


def draw_augmentation(params: AugmentationParams, rng: np.random.Generator, size: int) -> AugmentationDraw:
    area = rng.uniform(*params.crop_scale)
    side = min(size, max(1, int(round(math.sqrt(area) * size))))
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    flip = bool(rng.random() < params.flip_prob)
    b = 1.0 + rng.uniform(-params.brightness, params.brightness)
    c = 1.0 + rng.uniform(-params.contrast, params.contrast)
    s = 1.0 + rng.uniform(-params.saturation, params.saturation)
    return AugmentationDraw(top, left, side, flip, b, c, s)


def apply_augmentation(clip: torch.Tensor, d: AugmentationDraw) -> torch.Tensor:
    """``clip`` is float ``(T, 3, H, W)`` in [0, 1]."""
    size = clip.shape[-1]
    out = clip
    if d.side != size or d.top or d.left:
        out = out[..., d.top:d.top + d.side, d.left:d.left + d.side]
        out = F.interpolate(out, size=(clip.shape[-2], size), mode="bilinear", align_corners=False)
    if d.flip:
        out = torch.flip(out, dims=[-1])
    if d.brightness != 1.0:
        out = out * d.brightness
    if d.contrast != 1.0:
        mean = out.mean()
        out = (out - mean) * d.contrast + mean
    if d.saturation != 1.0:
        gray = (0.299 * out[:, 0] + 0.587 * out[:, 1] + 0.114 * out[:, 2]).unsqueeze(1)
        out = (out - gray) * d.saturation + gray
    if out is not clip:
        out = out.clamp(0.0, 1.0)
    return out


def augment(clip: torch.Tensor, params: AugmentationParams, rng: np.random.Generator | None = None) -> torch.Tensor:
    if params.is_identity:
        return clip
    rng = rng if rng is not None else np.random.default_rng(params.seed)
    return apply_augmentation(clip, draw_augmentation(params, rng, clip.shape[-1]))


def _window(n_frames: int, clip_length: int, stride: int, rng, near: int | None = None,
            max_offset: int = 0) -> int:
    span = (clip_length - 1) * stride + 1
    last = n_frames - span
    if last < 0:
        raise ContractError(f"video of {n_frames} frames too short for a {clip_length}x{stride} clip")
    if near is not None and max_offset > 0:
        lo, hi = max(0, near - max_offset), min(last, near + max_offset)
        return int(rng.integers(lo, hi + 1))
    return int(rng.integers(0, last + 1))


def _clip(frames: np.ndarray, start: int, clip_length: int, stride: int) -> torch.Tensor:
    sel = frames[start:start + (clip_length - 1) * stride + 1:stride]
    return torch.from_numpy(np.ascontiguousarray(sel)).float().div_(255.0)


def sample_clips(frames: np.ndarray, count: int, clip_length: int, stride: int,
                 aug: AugmentationParams, rng: np.random.Generator) -> list[torch.Tensor]:
    """``count`` independently augmented clips from one video's frames."""
    clips = []
    first = None
    for _ in range(count):
        start = _window(len(frames), clip_length, stride, rng, first, aug.temporal_offset)
        first = start if first is None else first
        clips.append(augment(_clip(frames, start, clip_length, stride), aug, rng))
    return clips


def sample_clip_pair(frames: np.ndarray, aug: AugmentationParams, clip_length: int = 4,
                     stride: int = 1, rng: np.random.Generator | None = None):
    """Two augmented clips of one video; windows come from the seeded rng and may overlap."""
    rng = rng if rng is not None else np.random.default_rng(aug.seed)
    a, b = sample_clips(frames, 2, clip_length, stride, aug, rng)
    return a, b


# --- training state -------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    scheme: str = "byol"
    batch_size: int = 8
    steps: int = 200
    lr: float = 1e-3
    momentum: float = 0.99
    queue_size: int = 64
    # recon is a per-pixel mean while KL sums over latents, hence the small weight
    kl_weight: float = 0.01
    seed: int = 0
    temperature: float = 0.1
    clips_per_video: int = 2
    frame_stride: int = 1
    byol_symmetric: bool = True
    byol_predictor: bool = True
    dpc_blocks: int = 4
    dpc_context: int = 3
    dpc_hidden: int = 128
    vae_latent: int = 32

    def __post_init__(self):
        if self.scheme not in PRETRAIN_SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {', '.join(PRETRAIN_SCHEMES)}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must lie in [0, 1]")
        if self.clips_per_video < 2:
            raise ConfigError("clips_per_video must be >= 2")
        if not 1 <= self.dpc_context < self.dpc_blocks:
            raise ConfigError("dpc_context must lie in [1, dpc_blocks)")


class VaeHeads(nn.Module):
    """Gaussian latent over pooled backbone features; decodes the clip's last frame."""

    def __init__(self, channels: int, latent: int, frame_size: int):
        super().__init__()
        self.frame_size = frame_size
        self.base = max(1, frame_size // 8)
        self.mu = nn.Linear(channels, latent)
        self.logvar = nn.Linear(channels, latent)
        self.fc = nn.Linear(latent, 32 * self.base * self.base)
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(32, 32, 4, 2, 1), nn.ReLU(),
            nn.ConvTranspose2d(32, 16, 4, 2, 1), nn.ReLU(),
            nn.ConvTranspose2d(16, 3, 4, 2, 1))

    def encode(self, fmap: torch.Tensor):
        pooled = fmap.mean(dim=(2, 3, 4))
        return self.mu(pooled), self.logvar(pooled)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        x = self.deconv(F.relu(self.fc(z)).view(len(z), 32, self.base, self.base))
        if x.shape[-1] != self.frame_size:
            x = F.interpolate(x, size=(self.frame_size, self.frame_size), mode="bilinear",
                              align_corners=False)
        return torch.sigmoid(x)


@dataclass
class PretrainState:
    config: PretrainConfig
    encoder: VideoEncoder
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    generator: torch.Generator
    target: VideoEncoder | None = None
    predictor: nn.Module | None = None
    dpc_head: DpcHead | None = None
    vae: VaeHeads | None = None
    queue: torch.Tensor | None = None
    queue_ids: list = field(default_factory=list)
    step: int = 0

    def trainable(self) -> list[nn.Parameter]:
        params = list(self.encoder.parameters())
        for extra in (self.predictor, self.dpc_head, self.vae):
            if extra is not None:
                params += list(extra.parameters())
        return params


def init_state(cfg: PretrainConfig, encoder_config: EncoderConfig) -> PretrainState:
    encoder = build_encoder(encoder_config, seed=cfg.seed)
    target = predictor = dpc_head = vae = queue = None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 1)
        if cfg.scheme in ("moco", "byol"):
            target = make_target(encoder)
        if cfg.scheme == "moco":
            queue = torch.zeros(0, encoder_config.projection_dim)
        if cfg.scheme == "byol" and cfg.byol_predictor:
            predictor = Predictor(encoder_config.projection_dim, encoder_config.predictor_hidden)
        if cfg.scheme == "dpc":
            dpc_head = DpcHead(encoder_config.channels[-1], cfg.dpc_hidden)
        if cfg.scheme == "vae":
            vae = VaeHeads(encoder_config.channels[-1], cfg.vae_latent, encoder_config.frame_size)
    state = PretrainState(cfg, encoder, optimizer=None, rng=np.random.default_rng(cfg.seed),
                          generator=torch.Generator().manual_seed(cfg.seed), target=target,
                          predictor=predictor, dpc_head=dpc_head, vae=vae, queue=queue)
    state.optimizer = make_optimizer(state.trainable(), cfg.lr)
    return state


def make_batch(dataset: ClipDataset, state: PretrainState, aug: AugmentationParams) -> dict:
    """Sample the next batch for ``state.config.scheme`` from the state's rng."""
    cfg = state.config
    rng = state.rng
    t = state.encoder.config.frames
    n = min(cfg.batch_size, len(dataset))
    chosen = rng.choice(len(dataset), size=n, replace=False)
    ids = [dataset.videos[i]["id"] for i in chosen]
    if cfg.scheme in ("moco", "byol"):
        views = [torch.stack(sample_clips(dataset.frames(i), cfg.clips_per_video, t, cfg.frame_stride,
                                          aug, rng)) for i in chosen]
        return {"video_ids": ids, "views": torch.stack(views)}
    if cfg.scheme == "dpc":
        blocks = []
        for i in chosen:
            seq = sample_clips(dataset.frames(i), 1, t * cfg.dpc_blocks, cfg.frame_stride, aug, rng)[0]
            blocks.append(seq.reshape((cfg.dpc_blocks, t) + tuple(seq.shape[1:])))
        return {"video_ids": ids, "blocks": torch.stack(blocks)}
    clips = [sample_clips(dataset.frames(i), 1, t, cfg.frame_stride, aug, rng)[0] for i in chosen]
    return {"video_ids": ids, "clips": torch.stack(clips)}


def embedding_std(z: torch.Tensor) -> float:
    """Per-dimension std of L2-normalised embeddings, averaged; 0 means collapse."""
    z = F.normalize(z.detach().reshape(-1, z.shape[-1]), dim=1, eps=1e-12)
    if len(z) < 2:
        return 0.0
    return float(z.std(dim=0, unbiased=False).mean())


def _scheme_loss(batch: dict, state: PretrainState):
    cfg = state.config
    extra = {}
    if cfg.scheme in ("moco", "byol"):
        views = batch["views"]
        v, c = views.shape[:2]
        flat = views.reshape((v * c,) + tuple(views.shape[2:]))
        _, z = state.encoder(flat)
        with torch.no_grad():
            _, zt = state.target(flat)
        z = z.reshape(v, c, -1)
        zt = zt.reshape(v, c, -1)
        if cfg.scheme == "moco":
            pairs = temporal_persistency_pairs(batch["video_ids"], z, zt, state.queue, cfg.temperature,
                                               queue_ids=state.queue_ids)
            loss = info_nce(pairs)
            extra["keys"] = F.normalize(zt[:, 0], dim=1)
        else:
            p = state.predictor(z) if state.predictor is not None else z
            loss = byol_loss(p[:, 0], zt[:, 1])
            if cfg.byol_symmetric:
                loss = loss + byol_loss(p[:, 1], zt[:, 0])
        return loss, z, extra
    if cfg.scheme == "dpc":
        loss, feats = dpc_loss(batch["blocks"], state.encoder, state.dpc_head, cfg.dpc_context,
                               cfg.temperature, return_features=True)
        return loss, feats.mean(dim=(3, 4)), extra
    clips = batch["clips"]
    mu, logvar = state.vae.encode(state.encoder.encode(clips))
    eps = torch.randn(mu.shape, generator=state.generator)
    x_hat = state.vae.decode(mu + eps * (0.5 * logvar).exp())
    loss, recon, kl = vae_loss(clips[:, -1], x_hat, mu, logvar, cfg.kl_weight)
    extra.update(recon=recon.item(), kl=kl.item())
    return loss, mu, extra


def pretrain_step(batch: dict, state: PretrainState) -> dict:
    """One optimiser step on the scheme's loss (plus the momentum update for moco/byol)."""
    cfg = state.config
    state.encoder.train()
    loss, emb, extra = _scheme_loss(batch, state)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"{cfg.scheme} loss became {loss.item()} at step {state.step} "
                                    f"(lr={cfg.lr}, embedding_std={embedding_std(emb):.3g})")
    state.optimizer.zero_grad()
    loss.backward()
    grads = [p.grad for p in state.trainable() if p.grad is not None]
    grad_norm = float(torch.linalg.vector_norm(torch.stack([g.norm() for g in grads]))) if grads else 0.0
    state.optimizer.step()
    if state.target is not None:
        momentum_update(state.encoder, state.target, cfg.momentum)
    if cfg.scheme == "moco":
        state.queue = torch.cat([state.queue, extra.pop("keys")])[-cfg.queue_size:]
        state.queue_ids = (state.queue_ids + list(batch["video_ids"]))[-cfg.queue_size:]
    state.step += 1
    std = embedding_std(emb)
    metrics = {"step": state.step, "loss": loss.item(), "grad_norm": grad_norm,
               "queue_fill": 0 if state.queue is None else len(state.queue),
               "embedding_std": std, "collapsed": std < 1e-4}
    metrics.update(extra)
    return metrics


def pretrain(cfg: PretrainConfig, dataset: ClipDataset, encoder_config: EncoderConfig,
             aug: AugmentationParams = AugmentationParams(), progress=None):
    """Serial training loop; returns ``(state, per-step metrics)``."""
    if dataset.frame_size != encoder_config.frame_size:
        raise ContractError(f"corpus frames are {dataset.frame_size}px, encoder expects "
                            f"{encoder_config.frame_size}px")
    if cfg.scheme == "moco" and len(dataset) < 2:
        raise ContractError("moco needs at least two videos")
    state = init_state(cfg, encoder_config)
    history = []
    warned = False
    for _ in range(cfg.steps):
        metrics = pretrain_step(make_batch(dataset, state, aug), state)
        history.append(metrics)
        if metrics["collapsed"] and not warned:
            log.warning("embeddings collapsed at step %d (std %.2g)", metrics["step"],
                        metrics["embedding_std"])
            warned = True
        if progress is not None:
            progress(metrics)
    return state, history


def freeze_and_export(state: PretrainState, path, meta: dict | None = None):
    """Write the online encoder only; target, queue and predictor stay behind."""
    meta = {"steps": state.step, "seed": state.config.seed, **(meta or {})}
    return save_checkpoint(state.encoder, path, scheme=state.config.scheme, meta=meta)
