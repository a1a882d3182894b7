"""Command-line driver: train / certify / attack / eval / selftest.

Every output lands inside the configured output directory. Exit codes:
0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as D
from . import report as R
from .certify import evaluate_suite
from .data import ConfigError, RunConfig, parse_config
from .model import (CheckpointError, load_checkpoint, make_architecture,
                    save_checkpoint)
from .selftest import run_selftest
from .training import TrainingDivergedError, train

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="civet",
                                     description="Certified robust VAE training and "
                                                 "probabilistic worst-case certification.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="path to a key = value config file")
        p.add_argument("--override", "-O", action="append", default=[],
                       metavar="KEY=VALUE", help="config override, repeatable, last wins")
        p.add_argument("--output-dir", default=None, help="overrides output_dir from the config")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="path to a trained checkpoint")

    common(sub.add_parser("train", help="train a model, write checkpoint + training log"))
    common(sub.add_parser("certify", help="certified bounds over the test split"),
           checkpoint=True)
    p_attack = sub.add_parser("attack", help="attacked metric over the test split")
    common(p_attack, checkpoint=True)
    p_attack.add_argument("--attack", required=True, choices=("pgd", "lsa", "mda"))
    p_eval = sub.add_parser("eval", help="baseline + certified + attacked metrics")
    common(p_eval, checkpoint=True)
    p_eval.add_argument("--attacks", default="", help="comma list from pgd,lsa,mda")
    sub.add_parser("selftest", help="run built-in numerical checks")
    return parser


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config)
    pairs = []
    for i, item in enumerate(args.override, start=1):
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, _, raw = item.partition("=")
        pairs.append((key.strip(), raw.strip(), i))
    D.apply_assignments(cfg, pairs)
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    cfg.train.validate()
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    train_set, _ = D.load_run_datasets(cfg)
    arch = make_architecture(cfg.architecture)
    if arch.d_in != train_set.d_in:
        raise ConfigError(f"architecture {cfg.architecture!r} expects d_in={arch.d_in} "
                          f"but dataset provides {train_set.d_in}")
    params, log = train(cfg.train, train_set, arch)
    save_checkpoint(params, arch, out / "checkpoint.cvck")
    log.to_csv(out / "training_log.csv")
    R.render_training_figure(log, out / "training_curves.png")
    print(f"wrote {out / 'checkpoint.cvck'}")
    print(f"wrote {out / 'training_log.csv'}")
    print(f"wrote {out / 'training_curves.png'}")
    return EXIT_OK


def _run_suite(args, attacks: tuple[str, ...], certified: bool, stem: str) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    _, test_set = D.load_run_datasets(cfg)
    arch = make_architecture(cfg.architecture)
    params, _ = load_checkpoint(args.checkpoint, expected_arch=arch)
    report = evaluate_suite(params, test_set, epsilon=cfg.train.epsilon, delta=cfg.delta,
                            attacks=attacks, metric="mse", certified=certified,
                            pgd_steps=cfg.train.pgd_steps,
                            pgd_step_frac=cfg.train.pgd_step_frac,
                            seed=cfg.seed, config_echo=D.config_echo(cfg))
    R.write_suite_csv(report, out / f"{stem}_report.csv")
    R.write_suite_summary(report, out / f"{stem}_summary.json")
    R.render_suite_figure(report, out / f"{stem}_report.png")
    means = report.means()
    print(", ".join(f"{k}={v:.6g}" for k, v in means.items() if v == v))
    for suffix in ("report.csv", "summary.json", "report.png"):
        print(f"wrote {out / f'{stem}_{suffix}'}")
    return EXIT_OK


def _cmd_certify(args) -> int:
    return _run_suite(args, attacks=(), certified=True, stem="certify")


def _cmd_attack(args) -> int:
    return _run_suite(args, attacks=(args.attack,), certified=False,
                      stem=f"attack_{args.attack}")


def _cmd_eval(args) -> int:
    attacks = tuple(a for a in args.attacks.split(",") if a)
    return _run_suite(args, attacks=attacks, certified=True, stem="eval")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "certify":
            return _cmd_certify(args)
        if args.command == "attack":
            return _cmd_attack(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "selftest":
            return EXIT_OK if run_selftest() else EXIT_RUNTIME
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
