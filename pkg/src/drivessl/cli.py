"""Command-line entry point: ``drivessl <command> [options]``.

Commands
    gen-corpus   render a synthetic clip corpus
    pretrain     train an encoder with one self-supervised scheme
    train-agent  PPO on a frozen (or, with --end-to-end, trainable) encoder
    ablate       encoder x head-architecture grid, min-max normalised
    evaluate     deterministic episodes with a saved policy
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import (ConfigError, ContractError, CorruptCheckpointError, TrainingDivergedError,
                     WorkerError)
from .experiments import ExperimentConfig, run_ablation, run_evaluate, run_train_agent, write_csv
from .heads import SIZES, HeadVariant
from .pretrain import PRETRAIN_SCHEMES, ClipDataset, freeze_and_export, generate_synthetic_corpus, pretrain

log = logging.getLogger("drivessl")

PRETRAIN_FIELDS = ["step", "loss", "grad_norm", "queue_fill", "embedding_std", "collapsed"]


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _encoder_spec(text: str) -> tuple[str, str]:
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected NAME=CHECKPOINT, got {text!r}")
    return name, path


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drivessl", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", type=Path, help="key = value experiment config")
        sp.add_argument("--out", type=Path, required=True, help=out_help)
        sp.add_argument("--serial", action="store_true",
                        help="step simulators on the main thread (results are identical)")

    sp = sub.add_parser("gen-corpus", help="render a synthetic clip corpus")
    common(sp, "corpus root directory")
    sp.add_argument("--seed", type=int, help="corpus seed (default experiment.corpus_seed)")
    sp.add_argument("--videos", type=int, help="number of videos")
    sp.add_argument("--length", type=int, help="frames per video")

    sp = sub.add_parser("pretrain", help="self-supervised encoder training")
    common(sp, "output directory for the checkpoint and loss CSV")
    sp.add_argument("--corpus", type=Path, required=True, help="clip corpus root")
    sp.add_argument("--scheme", choices=PRETRAIN_SCHEMES, help="training scheme")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("train-agent", help="PPO driving agent")
    common(sp, "output directory for logs and policies")
    sp.add_argument("--encoder", type=Path, help="encoder checkpoint (optional with --end-to-end)")
    sp.add_argument("--end-to-end", action="store_true", help="train the encoder with the RL loss")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int)
    g.add_argument("--seeds", type=_seeds, help="comma-separated seeds")
    sp.add_argument("--head-variant", help="Pro1D, avg1D or avg2D")
    sp.add_argument("--head-size", choices=SIZES)
    sp.add_argument("--episodes", type=int)

    sp = sub.add_parser("ablate", help="encoder x head grid")
    common(sp, "grid output directory (rerun to resume)")
    sp.add_argument("--encoder", type=_encoder_spec, action="append", required=True,
                    metavar="NAME=CHECKPOINT", help="repeat once per encoder")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--plot", action="store_true", help="also render ablation.png (matplotlib)")

    sp = sub.add_parser("evaluate", help="deterministic policy evaluation")
    common(sp, "per-episode CSV path")
    sp.add_argument("--policy", type=Path, required=True, help="policy checkpoint from train-agent")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--trace", type=Path, help="write the first episode's trace CSV here")
    return p


def _progress(row):
    log.info("iter %d  episodes %d  mean reward %.2f  steps %.0f", row["iteration"], row["episodes"],
             row["mean_reward"], row["mean_steps"])


def cmd_gen_corpus(args, cfg: ExperimentConfig) -> int:
    exp = cfg.experiment
    seed = exp.corpus_seed if args.seed is None else args.seed
    ds = generate_synthetic_corpus(args.out, args.videos or exp.corpus_videos,
                                   args.length or exp.corpus_length, seed, cfg.world)
    digest = hashlib.sha256((Path(args.out) / "manifest.json").read_bytes()).hexdigest()
    print(f"corpus {args.out}: {len(ds)} videos x {ds.videos[0]['frames']} frames, "
          f"{ds.frame_size}px, manifest sha256 {digest}")
    return 0


def cmd_pretrain(args, cfg: ExperimentConfig) -> int:
    changes = {k: v for k, v in (("scheme", args.scheme), ("seed", args.seed), ("steps", args.steps))
               if v is not None}
    if changes:
        cfg = cfg.replace("pretrain", **changes)
    pc = cfg.pretrain
    ds = ClipDataset(args.corpus, clip_length=cfg.encoder.frames, frame_stride=pc.frame_stride)
    state, history = pretrain(pc, ds, cfg.encoder, cfg.aug,
                              progress=lambda m: log.debug("step %d loss %.4f", m["step"], m["loss"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fields = PRETRAIN_FIELDS + (["recon", "kl"] if pc.scheme == "vae" else [])
    write_csv(out / f"pretrain_{pc.scheme}.csv", history, fields)
    ckpt_path = out / f"encoder_{pc.scheme}.ckpt"
    freeze_and_export(state, ckpt_path, meta={"corpus": str(args.corpus), "config_digest": cfg.digest()})
    (out / f"pretrain_{pc.scheme}.cfg").write_text(cfg.dump())
    if any(m["collapsed"] for m in history):
        print(f"warning: embeddings collapsed during {pc.scheme} training", file=sys.stderr)
    print(f"{pc.scheme}: {len(history)} steps, final loss {history[-1]['loss']:.4f}, "
          f"embedding std {history[-1]['embedding_std']:.3f} -> {ckpt_path}")
    return 0


def cmd_train_agent(args, cfg: ExperimentConfig) -> int:
    exp = cfg.experiment
    variant = HeadVariant.parse(f"{args.head_variant or exp.head_variant}_{args.head_size or exp.head_size}")
    seeds = args.seeds or ([args.seed] if args.seed is not None else None)
    if args.encoder is None and not args.end_to_end:
        raise ContractError("train-agent needs --encoder CHECKPOINT (or --end-to-end)")
    summary = run_train_agent(cfg, args.out, seeds, args.encoder, args.end_to_end, variant,
                              serial=args.serial, episodes=args.episodes, progress=_progress)
    for seed, s in summary["seeds"].items():
        print(f"seed {seed}: final {exp.ma_window}-episode mean reward {s['final_mean_reward']:.2f}")
    print(f"aggregate -> {Path(args.out) / 'aggregate.csv'}")
    return 0


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    changes = {k: v for k, v in (("ablation_seed", args.seed), ("ablation_episodes", args.episodes))
               if v is not None}
    if changes:
        cfg = cfg.replace("experiment", **changes)
    encoders = dict(args.encoder)
    if len(encoders) != len(args.encoder):
        raise ConfigError("encoder names must be unique")
    for name, path in encoders.items():
        if not Path(path).is_file():
            raise ConfigError(f"encoder {name!r}: checkpoint {path} does not exist")
    rows = run_ablation(cfg, encoders, args.out, serial=args.serial, plot=args.plot, progress=_progress)
    for r in rows:
        val = "missing" if r["status"] != "ok" else f"{r['normalized']:.3f}"
        print(f"{r['encoder']:>12} {r['head']:>9} {val}")
    return 0


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    n = args.episodes or cfg.experiment.eval_episodes
    summary = run_evaluate(cfg, args.policy, n, args.seed, out=args.out, trace_path=args.trace)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


COMMANDS = {"gen-corpus": cmd_gen_corpus, "pretrain": cmd_pretrain, "train-agent": cmd_train_agent,
            "ablate": cmd_ablate, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ContractError, CorruptCheckpointError) as exc:
        print(f"drivessl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, WorkerError, OSError) as exc:
        print(f"drivessl {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
