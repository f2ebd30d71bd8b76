"""Synchronous PPO on top of a (usually frozen) video encoder.

Loss per minibatch::

    -clipped_surrogate + vf_coef * clipped_value_loss + kl_coef * KL(old || new)
    - entropy_coef * entropy + L1/L2 weight penalty on the head networks

Rollouts come from ``n_workers`` independent simulator instances stepped in
lock step against one policy snapshot; fragments of ``fragment_len`` steps are
gathered until ``batch_size`` transitions exist. When the encoder is frozen the
adapted features are cached at collection time and updates never run it again.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from . import kernels, sim
from .checkpoint import load_container, save_container
from .encoder import (EncoderConfig, VideoEncoder, freeze, is_frozen, make_optimizer,
                      param_digest)
from .errors import ConfigError, ContractError, TrainingDivergedError, WorkerError
from .heads import (ActorCritic, HeadConfig, HeadVariant, adapt_features, build_actor_critic,
                    input_shape, weight_penalty)

log = logging.getLogger(__name__)

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.9
    lam: float = 0.95
    clip: float = 0.1
    vf_clip: float = 10.0
    vf_coef: float = 1.0
    kl_coef: float = 0.3
    kl_target: float = 0.03
    sgd_iters: int = 3
    minibatch: int = 128
    lr: float = 2e-5
    entropy_coef: float = 0.0
    batch_size: int = 640
    fragment_len: int = 64
    n_workers: int = 4
    normalize_advantages: bool = True
    head_channel_scale: float = 0.25
    head_output_gain: float = 1.0
    l1: float = 1e-5
    l2: float = 1e-5

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ConfigError("gamma and lambda must lie in (0, 1]")
        if self.clip <= 0:
            raise ConfigError("clip must be positive")
        if self.batch_size % self.fragment_len:
            raise ConfigError("batch_size must be a multiple of fragment_len")
        if self.n_workers < 1 or self.minibatch < 1 or self.sgd_iters < 1:
            raise ConfigError("n_workers, minibatch and sgd_iters must be positive")


# --- math -------------------------------------------------------------------

def gaussian_logp(action, mean, var):
    """Diagonal Gaussian log density summed over the last axis."""
    if (var <= 0).any():
        raise ValueError("variance must be positive")
    return (-0.5 * ((action - mean) ** 2 / var + torch.log(var) + LOG2PI)).sum(dim=-1)


def gaussian_kl(mean0, var0, mean1, var1):
    """KL(N0 || N1) for diagonal Gaussians, summed over the last axis."""
    return 0.5 * (torch.log(var1 / var0) + (var0 + (mean0 - mean1) ** 2) / var1 - 1.0).sum(dim=-1)


def gaussian_entropy(var):
    return (0.5 * (torch.log(var) + LOG2PI + 1.0)).sum(dim=-1)


def compute_gae(rewards, values, dones, gamma: float, lam: float):
    """``values`` has one more entry than ``rewards``: the bootstrap value.

    Returns ``(advantages, returns)`` as float64 arrays.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if len(values) != len(rewards) + 1 or len(dones) != len(rewards):
        raise ValueError("length mismatch: need len(values) == len(rewards) + 1 == len(dones) + 1")
    adv = kernels.gae(rewards, values, dones, gamma, lam)
    return adv, adv + values[:-1]


def _clipped_min(ratio, advantages, clip: float):
    return torch.minimum(ratio * advantages, torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * advantages)


def surrogate_terms(logp_new, logp_old, advantages, clip: float):
    return _clipped_min(torch.exp(logp_new - logp_old), advantages, clip)


def ppo_surrogate(logp_new, logp_old, advantages, clip: float):
    """Clipped surrogate as a loss: minus the batch mean of min(r A, clip(r) A)."""
    ratio = torch.exp(logp_new - logp_old)
    if not torch.isfinite(ratio).all():
        raise TrainingDivergedError("non-finite probability ratio")
    return -_clipped_min(ratio, advantages, clip).mean()


def value_loss(values_new, values_old, returns, vf_clip: float):
    clipped = values_old + torch.clamp(values_new - values_old, -vf_clip, vf_clip)
    return torch.maximum((values_new - returns) ** 2, (clipped - returns) ** 2).mean()


def adaptive_kl_update(kl: float, coef: float, target: float) -> float:
    if kl < 0:
        raise ValueError("KL must be non-negative")
    if kl > 2.0 * target:
        return coef * 1.5
    if kl < 0.5 * target:
        return coef / 1.5
    return coef


# --- agent ------------------------------------------------------------------

class Agent(torch.nn.Module):
    """Encoder + feature adapter + actor/critic heads."""

    def __init__(self, encoder: VideoEncoder, heads: ActorCritic, end_to_end: bool = False):
        super().__init__()
        self.encoder = encoder
        self.heads = heads
        self.variant = heads.variant
        self.end_to_end = end_to_end
        if not end_to_end:
            freeze(encoder)

    def train(self, mode: bool = True):
        super().train(mode)
        if not self.end_to_end:
            # batch-norm statistics of a frozen encoder must not move either
            self.encoder.eval()
        return self

    def features(self, clips: torch.Tensor) -> torch.Tensor:
        if self.variant.kind == "direct_projection_1d":
            fmap, z = self.encoder(clips)
        else:
            fmap, z = self.encoder.encode(clips), None
        return adapt_features(self.variant, fmap, z)

    def trainable_parameters(self):
        params = list(self.heads.parameters())
        if self.end_to_end:
            params += list(self.encoder.parameters())
        return params


def clips_to_tensor(clips) -> torch.Tensor:
    return torch.from_numpy(np.stack(clips)).float().div_(255.0)


# --- rollouts -----------------------------------------------------------------

class RolloutWorker:
    """One simulator instance whose episodes continue across fragments."""

    def __init__(self, worker_id: int, world: sim.WorldConfig, base_seed: int):
        self.worker_id = worker_id
        self.world = world
        self.base_seed = base_seed
        self.episodes_started = 0
        self.state = None
        self.obs = None
        self._new_episode()

    def episode_seed(self, index: int) -> int:
        return (self.base_seed * 1_000_003 + self.worker_id * 100_019 + index) % (2 ** 31)

    def _new_episode(self):
        self.state, self.obs = sim.reset(self.episode_seed(self.episodes_started), self.world)
        self.episodes_started += 1

    def step(self, steering: float):
        """Returns ``(reward, done, finished EpisodeStats or None)``; resets after done."""
        try:
            self.state, result = sim.step(self.state, steering)
        except Exception as exc:  # surfaced with the worker's id
            raise WorkerError(self.worker_id, exc) from exc
        finished = None
        if result.done:
            finished = sim.stats_of(self.state)
            self._new_episode()
        else:
            self.obs = result.observation
        return result.reward, result.done, finished


@dataclass
class RolloutBatch:
    actions: torch.Tensor
    logp: torch.Tensor
    values: torch.Tensor
    rewards: torch.Tensor
    dones: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor
    old_mean: torch.Tensor
    old_var: torch.Tensor
    worker: torch.Tensor
    obs: torch.Tensor | None = None
    features: torch.Tensor | None = None
    episodes: list = field(default_factory=list)

    def __len__(self):
        return len(self.rewards)


def _fragment_plan(cfg: PpoConfig) -> list[list[int]]:
    """Worker ids active in each collection round (fragments dealt round-robin)."""
    n_frag = cfg.batch_size // cfg.fragment_len
    owners = [f % cfg.n_workers for f in range(n_frag)]
    return [owners[i:i + cfg.n_workers] for i in range(0, n_frag, cfg.n_workers)]


def collect_rollouts(agent: Agent, workers: list[RolloutWorker], cfg: PpoConfig,
                     generator: torch.Generator, pool: ThreadPoolExecutor | None = None) -> RolloutBatch:
    """Gather exactly ``cfg.batch_size`` transitions from the workers.

    With ``pool`` the simulator steps of one tick run concurrently; the policy
    forward pass and action sampling stay on the caller's thread, so results do
    not depend on whether a pool is used.
    """
    if len(workers) != cfg.n_workers:
        raise ConfigError("number of workers does not match n_workers")
    keep_obs = agent.end_to_end
    buf = {k: [] for k in ("actions", "logp", "values", "rewards", "dones", "mean", "var",
                           "worker", "obs", "features", "adv", "ret")}
    episodes = []
    agent.eval()
    for active in _fragment_plan(cfg):
        frag = {w: {k: [] for k in ("actions", "logp", "values", "rewards", "dones", "mean",
                                    "var", "obs", "features")} for w in active}
        for _ in range(cfg.fragment_len):
            clips = [workers[w].obs for w in active]
            with torch.no_grad():
                x = clips_to_tensor(clips)
                feats = agent.features(x)
                mean, var, value = agent.heads(feats)
                noise = torch.randn(mean.shape, generator=generator)
                action = mean + var.sqrt() * noise
                logp = gaussian_logp(action, mean, var)
            steer = action[:, 0].tolist()
            if pool is None:
                results = [workers[w].step(a) for w, a in zip(active, steer)]
            else:
                results = list(pool.map(lambda wa: workers[wa[0]].step(wa[1]), zip(active, steer)))
            for i, w in enumerate(active):
                reward, done, finished = results[i]
                f = frag[w]
                f["actions"].append(action[i])
                f["logp"].append(logp[i])
                f["values"].append(value[i])
                f["mean"].append(mean[i])
                f["var"].append(var[i])
                f["rewards"].append(reward)
                f["dones"].append(float(done))
                if keep_obs:
                    f["obs"].append(clips[i])
                else:
                    f["features"].append(feats[i])
                if finished is not None:
                    episodes.append((w, finished))
        with torch.no_grad():
            boot = agent.heads.critic(agent.features(clips_to_tensor([workers[w].obs for w in active])))
        for i, w in enumerate(active):
            f = frag[w]
            vals = torch.stack(f["values"]).double().numpy()
            adv, ret = compute_gae(f["rewards"], np.append(vals, float(boot[i])), f["dones"],
                                   cfg.gamma, cfg.lam)
            buf["adv"].append(torch.from_numpy(adv).float())
            buf["ret"].append(torch.from_numpy(ret).float())
            for key in ("actions", "logp", "values", "mean", "var"):
                buf[key].append(torch.stack(f[key]))
            buf["rewards"].append(torch.tensor(f["rewards"], dtype=torch.float32))
            buf["dones"].append(torch.tensor(f["dones"], dtype=torch.float32))
            buf["worker"].append(torch.full((cfg.fragment_len,), w, dtype=torch.long))
            if keep_obs:
                buf["obs"].append(torch.from_numpy(np.stack(f["obs"])))
            else:
                buf["features"].append(torch.stack(f["features"]))
    cat = {k: torch.cat(v) for k, v in buf.items() if v}
    return RolloutBatch(actions=cat["actions"], logp=cat["logp"], values=cat["values"],
                        rewards=cat["rewards"], dones=cat["dones"], advantages=cat["adv"],
                        returns=cat["ret"], old_mean=cat["mean"], old_var=cat["var"],
                        worker=cat["worker"], obs=cat.get("obs"), features=cat.get("features"),
                        episodes=episodes)


# --- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    agent: Agent
    episodes: list[dict]
    iterations: list[dict]
    encoder_digest_before: str
    encoder_digest_after: str


def ppo_loss(heads: torch.nn.Module, feats, actions, logp_old, advantages, values_old, returns, old_mean,
             old_var, cfg: PpoConfig, kl_coef: float):
    """Minibatch objective: -surrogate + vf_coef * value loss + kl_coef * KL - entropy + L1/L2."""
    mean, var, value = heads(feats)
    logp = gaussian_logp(actions, mean, var)
    pol = ppo_surrogate(logp, logp_old, advantages, cfg.clip)
    vl = value_loss(value, values_old, returns, cfg.vf_clip)
    kl = gaussian_kl(old_mean, old_var, mean, var).mean()
    ent = gaussian_entropy(var).mean()
    loss = (pol + cfg.vf_coef * vl + kl_coef * kl - cfg.entropy_coef * ent
            + weight_penalty(heads, cfg.l1, cfg.l2))
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite PPO loss (policy={pol.item()}, value={vl.item()}, kl={kl.item()})")
    return loss, {"policy": pol, "value": vl, "kl": kl, "entropy": ent}


def _update(agent: Agent, batch: RolloutBatch, cfg: PpoConfig, optimizer, kl_coef: float,
            generator: torch.Generator) -> dict:
    adv = batch.advantages
    if cfg.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(batch)
    agent.train()
    stats = {"policy_loss": [], "value_loss": [], "entropy": []}
    for _ in range(cfg.sgd_iters):
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n, cfg.minibatch):
            idx = perm[start:start + cfg.minibatch]
            if agent.end_to_end:
                feats = agent.features(batch.obs[idx].float().div_(255.0))
            else:
                feats = batch.features[idx]
            loss, parts = ppo_loss(agent.heads, feats, batch.actions[idx], batch.logp[idx], adv[idx],
                                   batch.values[idx], batch.returns[idx], batch.old_mean[idx],
                                   batch.old_var[idx], cfg, kl_coef)
            pol, vl, ent = parts["policy"], parts["value"], parts["entropy"]
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            stats["policy_loss"].append(pol.item())
            stats["value_loss"].append(vl.item())
            stats["entropy"].append(ent.item())
    agent.eval()
    with torch.no_grad():
        if agent.end_to_end:
            feats = torch.cat([agent.features(batch.obs[i:i + 256].float().div_(255.0))
                               for i in range(0, n, 256)])
        else:
            feats = batch.features
        mean, var, _ = agent.heads(feats)
        # float64 plus a zero floor: for near-identical policies float32 cancellation goes slightly negative
        kl_measured = max(0.0, float(gaussian_kl(batch.old_mean.double(), batch.old_var.double(),
                                                 mean.double(), var.double()).mean()))
    return {k: float(np.mean(v)) for k, v in stats.items()} | {"kl": kl_measured}


def make_agent(encoder: VideoEncoder, variant: HeadVariant, cfg: PpoConfig, seed: int,
               end_to_end: bool = False) -> Agent:
    contract = encoder.contract()
    heads = build_actor_critic(variant, contract, seed=seed, channel_scale=cfg.head_channel_scale,
                               l1=cfg.l1, l2=cfg.l2, output_gain=cfg.head_output_gain)
    return Agent(encoder, heads, end_to_end=end_to_end)


def train(cfg: PpoConfig, world: sim.WorldConfig, encoder: VideoEncoder, variant: HeadVariant,
          episodes: int, seed: int = 0, end_to_end: bool = False, serial: bool = True,
          progress=None) -> TrainResult:
    """Run PPO until ``episodes`` episodes have finished.

    ``encoder`` is used as given: frozen unless ``end_to_end``, in which case
    its parameters join the optimiser.
    """
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    agent = make_agent(encoder, variant, cfg, seed, end_to_end)
    digest_before = param_digest(agent.encoder)
    if not end_to_end and not all(is_frozen(p) for p in agent.encoder.parameters()):
        raise ContractError("encoder must be frozen outside end-to-end mode")
    optimizer = make_optimizer(agent.trainable_parameters(), cfg.lr)
    generator = torch.Generator().manual_seed(seed)
    workers = [RolloutWorker(w, world, seed) for w in range(cfg.n_workers)]
    pool = None if serial else ThreadPoolExecutor(cfg.n_workers)
    kl_coef = cfg.kl_coef
    episode_log: list[dict] = []
    iteration_log: list[dict] = []
    iteration = 0
    try:
        while len(episode_log) < episodes:
            batch = collect_rollouts(agent, workers, cfg, generator, pool)
            fresh = []
            for w, stats in batch.episodes:
                if len(episode_log) >= episodes:
                    break
                row = {"episode": len(episode_log), "worker": w, "iteration": iteration,
                       "total_reward": stats.total_reward, "steps": stats.steps,
                       "lane_invasions": stats.lane_invasions, "collisions": stats.collisions}
                episode_log.append(row)
                fresh.append(row)
            upd = _update(agent, batch, cfg, optimizer, kl_coef, generator)
            row = {
                "iteration": iteration,
                "episodes": len(episode_log),
                "mean_reward": float(np.mean([r["total_reward"] for r in fresh])) if fresh else math.nan,
                "mean_steps": float(np.mean([r["steps"] for r in fresh])) if fresh else math.nan,
                "mean_lane_invasions": (float(np.mean([r["lane_invasions"] for r in fresh]))
                                        if fresh else math.nan),
                "policy_loss": upd["policy_loss"],
                "value_loss": upd["value_loss"],
                "kl": upd["kl"],
                "kl_coef": kl_coef,
            }
            kl_coef = adaptive_kl_update(upd["kl"], kl_coef, cfg.kl_target)
            iteration_log.append(row)
            if progress is not None:
                progress(row)
            log.debug("iter %d: %s", iteration, row)
            iteration += 1
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(agent, episode_log, iteration_log, digest_before, param_digest(agent.encoder))


# --- evaluation / persistence ---------------------------------------------------------

def evaluate(agent: Agent, world: sim.WorldConfig, n_episodes: int, seed: int = 0) -> list[sim.EpisodeStats]:
    """Deterministic episodes that steer with the policy mean."""
    agent.eval()

    def policy(obs):
        with torch.no_grad():
            mean, _, _ = agent.heads(agent.features(clips_to_tensor([obs])))
        return float(mean[0, 0])

    return [sim.rollout_episode(policy, 10_000_000 + seed * 1000 + i, world) for i in range(n_episodes)]


def save_policy(agent: Agent, path, meta: dict | None = None) -> None:
    arrays = {f"heads.{k}": v.detach().numpy() for k, v in agent.heads.state_dict().items()}
    arrays.update({f"encoder.{k}": v.detach().numpy() for k, v in agent.encoder.state_dict().items()})
    cfg = agent.heads.config
    header = {
        "kind": "policy",
        "variant": {"kind": agent.variant.kind, "size": agent.variant.size},
        "head_config": {"conv_channels": list(cfg.conv_channels), "conv_kernel": cfg.conv_kernel,
                        "conv_stride": cfg.conv_stride, "fc_units": list(cfg.fc_units),
                        "n_actions": cfg.n_actions, "l1": cfg.l1, "l2": cfg.l2,
                        "output_gain": cfg.output_gain},
        "encoder_config": agent.encoder.config.to_dict(),
        "contract": agent.encoder.contract(),
        "end_to_end": agent.end_to_end,
        "encoder_digest": param_digest(agent.encoder),
        "meta": dict(meta or {}),
    }
    save_container(path, header, arrays)


def load_policy(path) -> Agent:
    header, arrays = load_container(path)
    if header.get("kind") != "policy":
        raise ContractError(f"{path} is not a policy checkpoint")
    enc = VideoEncoder(EncoderConfig.from_dict(header["encoder_config"]))
    enc.load_state_dict({k[len("encoder."):]: torch.from_numpy(v) for k, v in arrays.items()
                         if k.startswith("encoder.")})
    if enc.contract() != header["contract"]:
        raise ContractError("policy checkpoint contract does not match its encoder")
    variant = HeadVariant(**header["variant"])
    hc = header["head_config"]
    hcfg = HeadConfig(tuple(hc["conv_channels"]), hc["conv_kernel"], hc["conv_stride"],
                      tuple(hc["fc_units"]), hc["n_actions"], hc["l1"], hc["l2"],
                      hc.get("output_gain", 1.0))
    heads = ActorCritic(variant, input_shape(variant, header["contract"]), hcfg)
    heads.load_state_dict({k[len("heads."):]: torch.from_numpy(v) for k, v in arrays.items()
                           if k.startswith("heads.")})
    return Agent(enc, heads, end_to_end=False)
