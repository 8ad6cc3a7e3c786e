"""Command-line entry point.

Subcommands: train, attack, evaluate, smooth-eval, verify, report.
Exit codes: 0 success, 1 usage/config error, 2 runtime failure,
3 verification-suite failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, atomic_write_text, load_checkpoint
from .config import ConfigError, parse_config
from .data import IdxFormatError
from .defenses import DivergenceError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3


def _add_common(p: argparse.ArgumentParser, checkpoint_required=False) -> None:
    p.add_argument("config", help="experiment config (JSON)")
    p.add_argument("--output-dir", default=None, help="override the config's output dir")
    p.add_argument("--data-dir", default=None,
                   help="IDX data directory (default: $ATENT_DATA_DIR)")
    if checkpoint_required:
        p.add_argument("--checkpoint", required=True, help="model checkpoint to load")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atent",
        description="Entropy-regularized adversarial training at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train per config, checkpointing each epoch")
    _add_common(p)
    p.add_argument("--resume", action="store_true", help="continue a saved run")
    p.add_argument("--stop-after", type=int, default=None, metavar="N",
                   help="train at most N epochs this invocation (resumable)")

    p = sub.add_parser("attack", help="evaluate configured attacks on a checkpoint")
    _add_common(p, checkpoint_required=True)

    p = sub.add_parser("evaluate", help="full pipeline: train (or resume) then attack-evaluate")
    _add_common(p)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("smooth-eval", help="randomized-smoothing accuracy of a checkpoint")
    _add_common(p, checkpoint_required=True)
    p.add_argument("--keep-abstain", action="store_true",
                   help="drop abstentions from the denominator instead of counting them wrong")

    p = sub.add_parser("verify", help="run the numerical verification suites")
    p.add_argument("--suite", default="all",
                   choices=["gradients", "sampler", "lemma1", "all"])
    p.add_argument("--output-dir", default=None,
                   help="also write verify_report.json and sampler_hist.svg here")

    p = sub.add_parser("report", help="re-emit plots for a trained run")
    _add_common(p)
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint to plot (default: <out>/best.ckpt or last.ckpt)")
    return parser


def _cmd_train(args) -> int:
    from .experiment import run_training

    cfg = parse_config(args.config)
    state = run_training(cfg, output_dir=args.output_dir, resume=args.resume,
                         stop_after=args.stop_after, data_dir=args.data_dir)
    last = state.history[-1] if state.history else None
    if last is not None:
        rob = "-" if last.rob_acc is None else f"{last.rob_acc:.4f}"
        nat = "-" if last.nat_acc is None else f"{last.nat_acc:.4f}"
        print(f"epoch {state.epoch}: loss {last.train_loss:.4f} nat {nat} rob {rob}")
    if state.best_params is not None:
        print(f"best epoch {state.best_epoch}: metric {state.best_metric:.4f}")
    return EXIT_OK


def _print_report(report) -> None:
    print("defense,attack,norm,epsilon,natural_acc,robust_acc")
    for r in report.rows:
        print(f"{r.defense},{r.attack},{r.norm},{r.epsilon:g},"
              f"{r.natural_acc:.4f},{r.robust_acc:.4f}")


def _cmd_attack(args) -> int:
    from .experiment import evaluate_checkpoint

    cfg = parse_config(args.config)
    report = evaluate_checkpoint(cfg, args.checkpoint, output_dir=args.output_dir,
                                 data_dir=args.data_dir)
    _print_report(report)
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    from .experiment import run_experiment

    cfg = parse_config(args.config)
    report = run_experiment(cfg, output_dir=args.output_dir, resume=args.resume,
                            data_dir=args.data_dir)
    if report is None:
        print("training incomplete; resume to finish")
        return EXIT_RUNTIME
    _print_report(report)
    return EXIT_OK


def _cmd_smooth_eval(args) -> int:
    from .experiment import resolve_output_dir, smooth_evaluate

    cfg = parse_config(args.config)
    result = smooth_evaluate(cfg, args.checkpoint, data_dir=args.data_dir,
                             count_abstain_as_error=not args.keep_abstain)
    out = resolve_output_dir(cfg, args.output_dir)
    atomic_write_text(out / "smooth.json", json.dumps(result, indent=2, sort_keys=True))
    print(f"smooth accuracy (sigma={result['sigma']:g}, "
          f"n={result['n_samples']}): {result['smooth_accuracy']:.4f}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .verify import run_suites

    results = run_suites(args.suite)
    for res in results:
        print(res.line())
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} checks passed")
    if args.output_dir:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        tree = [
            {"suite": r.suite, "name": r.name, "passed": r.passed, "detail": r.detail}
            for r in results
        ]
        atomic_write_text(out / "verify_report.json",
                          json.dumps(tree, indent=2, sort_keys=True))
        if args.suite in ("sampler", "all"):
            _write_sampler_diagnostic(out)
    return EXIT_OK if n_fail == 0 else EXIT_VERIFY


def _write_sampler_diagnostic(out: Path) -> None:
    from .oracle import grid_gibbs_density, sample_gibbs_chain
    from .reporting import write_histogram_svg
    from .sampler import GibbsSamplerConfig
    from .seeding import derive_rng

    gamma, anchor, a = 4.0, 0.4, 1.0
    mean_t = gamma * anchor / (gamma - 2 * a)
    grid = grid_gibbs_density(lambda pts: a * pts[:, 0] ** 2, anchor, gamma,
                              [(mean_t - 5.0, mean_t + 5.0)], 1001)
    cfg = GibbsSamplerConfig(gamma=gamma, step=0.01, steps=1, noise_scale=1.0)
    samples = sample_gibbs_chain(lambda v: 2 * a * v, [anchor], cfg, 40_000,
                                 derive_rng(7))
    write_histogram_svg(samples[8_000:], grid, out / "sampler_hist.svg")


def _cmd_report(args) -> int:
    from .experiment import build_datasets, resolve_output_dir
    from .reporting import write_decision_svg

    cfg = parse_config(args.config)
    out = resolve_output_dir(cfg, args.output_dir)
    ckpt = args.checkpoint
    if ckpt is None:
        for cand in (out / "best.ckpt", out / "last.ckpt"):
            if cand.exists():
                ckpt = cand
                break
    if ckpt is None:
        raise ConfigError(f"no checkpoint found in {out}; pass --checkpoint")
    params = load_checkpoint(ckpt)
    _, _, eval_ds = build_datasets(cfg.data, cfg.seed, args.data_dir)
    wrote = []
    if eval_ds.inputs.data.ndim == 2 and eval_ds.inputs.shape[1] == 2:
        write_decision_svg(params, eval_ds, out / "decision.svg")
        wrote.append("decision.svg")
    _write_sampler_diagnostic(out)
    wrote.append("sampler_hist.svg")
    print(f"wrote {', '.join(wrote)} to {out}")
    return EXIT_OK


_HANDLERS = {
    "train": _cmd_train,
    "attack": _cmd_attack,
    "evaluate": _cmd_evaluate,
    "smooth-eval": _cmd_smooth_eval,
    "verify": _cmd_verify,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, IdxFormatError, DivergenceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
