"""Experiment configuration, run drivers and result aggregation.

A config file is flat ``key = value`` text whose keys are prefixed by section:
``world.*`` (simulator), ``encoder.*`` (backbone), ``pretrain.*`` and ``aug.*``
(self-supervised training), ``ppo.*`` (RL) and ``experiment.*`` (budgets,
seeds, head choice). Unknown keys are rejected.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sim
from .config import apply_kv, dump_kv, parse_kv, read_kv
from .encoder import EncoderConfig, build_encoder, load_checkpoint, param_digest
from .errors import ConfigError, ContractError
from .heads import HeadVariant, all_variants
from .ppo import PpoConfig, TrainResult, evaluate, save_policy, train
from .pretrain import AugmentationParams, PretrainConfig

log = logging.getLogger(__name__)

EPISODE_FIELDS = ["episode", "worker", "iteration", "total_reward", "steps", "lane_invasions",
                  "collisions"]
ITERATION_FIELDS = ["iteration", "episodes", "mean_reward", "mean_steps", "mean_lane_invasions",
                    "policy_loss", "value_loss", "kl", "kl_coef"]
EVAL_FIELDS = ["episode", "seed", "total_reward", "steps", "lane_invasions", "collisions"]
ABLATION_FIELDS = ["encoder", "head", "best_smoothed_reward", "normalized", "status"]


@dataclass(frozen=True)
class ExperimentSettings:
    episodes: int = 300
    seeds: tuple[int, ...] = (0, 1, 2)
    head_variant: str = "avg2D"
    head_size: str = "xl"
    ma_window: int = 100
    eval_episodes: int = 10
    corpus_videos: int = 16
    corpus_length: int = 96
    corpus_seed: int = 0
    # initialisation seed of encoders trained from scratch (end-to-end runs)
    encoder_seed: int = 0
    ablation_episodes: int = 300
    ablation_seed: int = 0

    def __post_init__(self):
        if self.episodes < 1 or self.ablation_episodes < 1:
            raise ConfigError("episode budgets must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.ma_window < 1:
            raise ConfigError("ma_window must be >= 1")

    def variant(self) -> HeadVariant:
        return HeadVariant.parse(f"{self.head_variant}_{self.head_size}")


SECTIONS = ("world", "encoder", "pretrain", "aug", "ppo", "experiment")


@dataclass(frozen=True)
class ExperimentConfig:
    world: sim.WorldConfig = field(default_factory=sim.WorldConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    aug: AugmentationParams = field(default_factory=AugmentationParams)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    def __post_init__(self):
        if self.world.frame_size != self.encoder.frame_size:
            raise ConfigError(f"world.frame_size ({self.world.frame_size}) must equal "
                              f"encoder.frame_size ({self.encoder.frame_size})")
        if self.world.stack_length != self.encoder.frames:
            raise ConfigError(f"world.stack_length ({self.world.stack_length}) must equal "
                              f"encoder.frames ({self.encoder.frames})")

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "ExperimentConfig":
        for key in mapping:
            if key.split(".", 1)[0] not in SECTIONS or "." not in key:
                raise ConfigError(f"unknown config key {key!r}; sections are {', '.join(SECTIONS)}")
        base = cls()
        parts = {name: apply_kv(getattr(base, name), mapping, name) for name in SECTIONS}
        return cls(**parts)

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "ExperimentConfig":
        return cls.from_mapping(parse_kv(text, source))

    @classmethod
    def load(cls, path=None) -> "ExperimentConfig":
        return cls() if path is None else cls.from_mapping(read_kv(path))

    def dump(self) -> str:
        lines = []
        for name in SECTIONS:
            lines += dump_kv(getattr(self, name), name)
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:16]

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


# --- aggregation -----------------------------------------------------------------

def moving_average(values, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` entries (fewer at the start)."""
    x = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(len(x))
    lo = np.maximum(0, idx - window + 1)
    return (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)


def median_curve(runs) -> np.ndarray:
    """Per-episode median across seeds; every run must cover the same episodes."""
    lengths = {len(r) for r in runs}
    if len(lengths) != 1:
        raise ContractError(f"seed logs differ in length: {sorted(lengths)}")
    return np.median(np.asarray(runs, dtype=np.float64), axis=0)


def aggregate(runs, window: int = 100) -> dict[str, np.ndarray]:
    """Median across seeds, then the trailing moving average of that median."""
    med = median_curve(runs)
    return {"episode": np.arange(len(med)), "median_reward": med,
            "median_reward_ma": moving_average(med, window)}


def final_mean(rewards, window: int = 100) -> float:
    """Mean reward over the last ``window`` episodes of one run."""
    r = np.asarray(rewards, dtype=np.float64)
    return float(r[-window:].mean())


def best_smoothed(rewards, window: int = 100) -> float:
    return float(moving_average(rewards, window).max())


def minmax_normalize(values: dict) -> tuple[dict, dict]:
    """Map the observed range to [0, 1]; with no spread every cell becomes 1.0."""
    if not values:
        return {}, {"method": "min-max", "min": None, "max": None}
    lo, hi = min(values.values()), max(values.values())
    meta = {"method": "min-max", "min": lo, "max": hi, "tie_rule": "all cells 1.0 when max == min"}
    if hi == lo:
        return {k: 1.0 for k in values}, meta
    return {k: (v - lo) / (hi - lo) for k, v in values.items()}, meta


# --- csv helpers -------------------------------------------------------------------

def write_csv(path, rows, fields) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v)
                             for k, v in row.items()})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_aggregate(path, runs: dict[int, list[float]], window: int) -> dict:
    seeds = sorted(runs)
    agg = aggregate([runs[s] for s in seeds], window)
    rows = []
    for i in agg["episode"]:
        row = {"episode": int(i), "median_reward": agg["median_reward"][i],
               "median_reward_ma": agg["median_reward_ma"][i]}
        row.update({f"reward_seed_{s}": runs[s][i] for s in seeds})
        rows.append(row)
    write_csv(path, rows, ["episode", "median_reward", "median_reward_ma"]
              + [f"reward_seed_{s}" for s in seeds])
    return agg


# --- drivers ------------------------------------------------------------------------

def load_encoder(cfg: ExperimentConfig, checkpoint=None, end_to_end: bool = False, seed: int | None = None):
    """The encoder an RL run starts from; frozen unless ``end_to_end``."""
    if checkpoint is None:
        if not end_to_end:
            raise ContractError("a frozen-encoder run needs an encoder checkpoint")
        return build_encoder(cfg.encoder, seed=cfg.experiment.encoder_seed if seed is None else seed)
    ckpt = load_checkpoint(checkpoint)
    if ckpt.config.input_shape != cfg.encoder.input_shape:
        raise ContractError(f"checkpoint expects clips {ckpt.config.input_shape}, the world "
                            f"produces {cfg.encoder.input_shape}")
    return ckpt.build(frozen=not end_to_end)


def train_seed(cfg: ExperimentConfig, seed: int, variant: HeadVariant, episodes: int,
               checkpoint=None, end_to_end: bool = False, serial: bool = True, progress=None) -> TrainResult:
    encoder = load_encoder(cfg, checkpoint, end_to_end)
    return train(cfg.ppo, cfg.world, encoder, variant, episodes, seed=seed, end_to_end=end_to_end,
                 serial=serial, progress=progress)


def run_train_agent(cfg: ExperimentConfig, out, seeds=None, checkpoint=None, end_to_end: bool = False,
                    variant: HeadVariant | None = None, serial: bool = True, episodes: int | None = None,
                    progress=None) -> dict:
    """Per-seed logs and policies plus the median/moving-average aggregate."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(cfg.experiment.seeds if seeds is None else seeds)
    variant = variant or cfg.experiment.variant()
    episodes = episodes or cfg.experiment.episodes
    window = cfg.experiment.ma_window
    runs = {}
    summary = {"variant": variant.label, "end_to_end": end_to_end, "episodes": episodes,
               "encoder_checkpoint": str(checkpoint) if checkpoint else None,
               "config_digest": cfg.digest(), "seeds": {}}
    (out / "config.cfg").write_text(cfg.dump())
    for seed in seeds:
        res = train_seed(cfg, seed, variant, episodes, checkpoint, end_to_end, serial, progress)
        d = out / f"seed_{seed}"
        write_csv(d / "episodes.csv", res.episodes, EPISODE_FIELDS)
        write_csv(d / "iterations.csv", res.iterations, ITERATION_FIELDS)
        save_policy(res.agent, d / "policy.ckpt", meta={"seed": seed, "episodes": episodes})
        rewards = [r["total_reward"] for r in res.episodes]
        runs[seed] = rewards
        summary["seeds"][str(seed)] = {
            "final_mean_reward": final_mean(rewards, window),
            "encoder_digest_before": res.encoder_digest_before,
            "encoder_digest_after": res.encoder_digest_after,
        }
    write_aggregate(out / "aggregate.csv", runs, window)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def run_evaluate(cfg: ExperimentConfig, policy_path, n_episodes: int, seed: int = 0, out=None,
                 trace_path=None) -> dict:
    from .ppo import clips_to_tensor, load_policy
    agent = load_policy(policy_path)
    if agent.encoder.config.input_shape != cfg.encoder.input_shape:
        raise ContractError("policy was trained on a different observation shape")
    stats = evaluate(agent, cfg.world, n_episodes, seed)
    rows = [{"episode": i, "seed": 10_000_000 + seed * 1000 + i, "total_reward": s.total_reward,
             "steps": s.steps, "lane_invasions": s.lane_invasions, "collisions": s.collisions}
            for i, s in enumerate(stats)]
    if out is not None:
        write_csv(out, rows, EVAL_FIELDS)
    if trace_path is not None:
        import torch

        def policy(obs):
            with torch.no_grad():
                mean, _, _ = agent.heads(agent.features(clips_to_tensor([obs])))
            return float(mean[0, 0])

        trace = []
        sim.rollout_episode(policy, rows[0]["seed"], cfg.world, trace=trace)
        sim.write_trace_csv(trace, trace_path)
    summary = {"episodes": len(rows)}
    for key in ("total_reward", "steps", "lane_invasions", "collisions"):
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        summary[f"mean_{key}"] = float(vals.mean())
        summary[f"median_{key}"] = float(np.median(vals))
    return summary


def _cell_name(encoder: str, variant: HeadVariant) -> str:
    return f"{encoder}__{variant.label}"


def ablation_table(results: dict, encoders, variants) -> tuple[list[dict], dict]:
    """Rows for every (encoder, head) cell; missing cells are marked, not normalised."""
    done = {k: v for k, v in results.items() if v is not None}
    norm, meta = minmax_normalize(done)
    rows = []
    for enc in encoders:
        for v in variants:
            key = (enc, v.label)
            if key in done:
                rows.append({"encoder": enc, "head": v.label, "best_smoothed_reward": done[key],
                             "normalized": norm[key], "status": "ok"})
            else:
                rows.append({"encoder": enc, "head": v.label, "best_smoothed_reward": "",
                             "normalized": "", "status": "missing"})
    return rows, meta


def run_ablation(cfg: ExperimentConfig, encoders: dict[str, str], out, serial: bool = True,
                 variants=None, plot: bool = False, progress=None) -> list[dict]:
    """Train every (encoder, head) cell once; finished cells are reused on rerun."""
    out = Path(out)
    cells = out / "cells"
    cells.mkdir(parents=True, exist_ok=True)
    variants = list(variants or all_variants())
    exp = cfg.experiment
    results = {}
    names = list(encoders)
    for enc in names:
        for v in variants:
            path = cells / f"{_cell_name(enc, v)}.json"
            key = (enc, v.label)
            if path.is_file():
                cell = json.loads(path.read_text())
                if cell.get("config_digest") == cfg.digest() and cell.get("checkpoint") == str(encoders[enc]):
                    results[key] = cell["best_smoothed_reward"]
                    continue
            res = train_seed(cfg, exp.ablation_seed, v, exp.ablation_episodes, encoders[enc],
                             serial=serial, progress=progress)
            rewards = [r["total_reward"] for r in res.episodes]
            cell = {"encoder": enc, "head": v.label, "checkpoint": str(encoders[enc]),
                    "config_digest": cfg.digest(), "episodes": len(rewards),
                    "best_smoothed_reward": best_smoothed(rewards, exp.ma_window),
                    "final_mean_reward": final_mean(rewards, exp.ma_window)}
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(cell, indent=1, sort_keys=True))
            tmp.replace(path)
            results[key] = cell["best_smoothed_reward"]
            rows, meta = ablation_table(results, names, variants)
            write_csv(out / "ablation.csv", rows, ABLATION_FIELDS)
    rows, meta = ablation_table(results, names, variants)
    write_csv(out / "ablation.csv", rows, ABLATION_FIELDS)
    meta.update({"cells": len(rows), "missing": sum(r["status"] == "missing" for r in rows),
                 "value": f"best {exp.ma_window}-episode trailing mean reward"})
    (out / "ablation_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    if plot:
        render_heatmap(rows, names, variants, out / "ablation.png")
    return rows


def render_heatmap(rows, encoders, variants, path) -> bool:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping heatmap")
        return False
    grid = np.full((len(encoders), len(variants)), np.nan)
    for r in rows:
        if r["status"] == "ok":
            grid[encoders.index(r["encoder"]), [v.label for v in variants].index(r["head"])] = r["normalized"]
    fig, ax = plt.subplots(figsize=(1.4 * len(variants) + 1, 0.8 * len(encoders) + 1))
    im = ax.imshow(grid, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(variants)), [v.label for v in variants])
    ax.set_yticks(range(len(encoders)), encoders)
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            ax.text(j, i, "-" if np.isnan(grid[i, j]) else f"{grid[i, j]:.2f}", ha="center",
                    va="center", color="w")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return True


def encoder_digest(checkpoint) -> str:
    return param_digest(load_checkpoint(checkpoint).build(frozen=True))
