"""Experiment orchestration: data/model assembly, training with
checkpointed resume, attack evaluation, report emission.

Output-directory layout:

    <out>/last.ckpt(+.manifest.json)   current params, written every epoch
    <out>/best.ckpt(+.manifest.json)   early-stopped snapshot
    <out>/trainer_state.json           epoch counter, best metric, history
    <out>/metrics.jsonl.partial        per-epoch stream while training
    <out>/metrics.jsonl                finalized metric stream
    <out>/report.csv                   accuracy table (schema in reporting)
    <out>/decision.svg                 2-D tasks only

All writes are atomic (tmp + rename): a crashed run never leaves a file
that parses as a complete artifact. One experiment process per output
directory, enforced by a lock file.
"""
from __future__ import annotations

import json
import os
import time
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .attacks import robust_accuracy
from .checkpoint import atomic_write_text, load_checkpoint, save_checkpoint
from .config import DataSpec, ExperimentConfig
from .data import (
    Dataset,
    load_mnist_idx,
    split_train_val,
    subset_binary,
    synth_digits,
    synth_two_gaussians,
)
from .defenses import EpochRecord, TrainerState, train
from .models import ModelParams, accuracy, build_model
from .reporting import EvalReport, EvalRow, write_decision_svg, write_report_csv
from .smoothing import smooth_accuracy

DATA_DIR_ENV = "ATENT_DATA_DIR"


class ExperimentError(RuntimeError):
    """Runtime failure while orchestrating an experiment."""


@contextmanager
def output_lock(out_dir: Path):
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ExperimentError(
            f"output directory {out_dir} is locked by another run "
            f"(remove {lock} if that run is dead)"
        )
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        try:
            os.unlink(lock)
        except FileNotFoundError:
            pass


# ---------------------------------------------------------------------------
# Dataset assembly


def _mnist_paths(data_dir: Path, prefix: str) -> tuple[Path, Path]:
    stems = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "t10k": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }[prefix]
    out = []
    for stem in stems:
        plain, gz = data_dir / stem, data_dir / f"{stem}.gz"
        if plain.exists():
            out.append(plain)
        elif gz.exists():
            out.append(gz)
        else:
            raise ExperimentError(f"missing IDX file {plain} (or .gz)")
    return out[0], out[1]


def build_datasets(spec: DataSpec, master_seed: int,
                   data_dir: str | None = None) -> tuple[Dataset, Dataset, Dataset]:
    """(train, val, eval) triple for the configured dataset kind."""
    if spec.kind == "mnist_binary":
        root = Path(data_dir or spec.data_dir or os.environ.get(DATA_DIR_ENV, "."))
        train_full = load_mnist_idx(*_mnist_paths(root, "train"))
        test_full = load_mnist_idx(*_mnist_paths(root, "t10k"))
        pool = subset_binary(train_full, spec.class_a, spec.class_b,
                             spec.cap_per_class, seed=master_seed)
        eval_ds = subset_binary(test_full, spec.class_a, spec.class_b,
                                spec.cap_per_class, seed=master_seed)
    elif spec.kind == "digits_binary":
        pool = synth_digits(spec.n_per_class, (spec.class_a, spec.class_b),
                            seed=master_seed)
        eval_ds = synth_digits(max(50, spec.n_per_class // 4),
                               (spec.class_a, spec.class_b),
                               seed=master_seed + 90_001)
    else:
        pool = synth_two_gaussians(spec.n, spec.separation, seed=master_seed)
        eval_ds = synth_two_gaussians(spec.n, spec.separation,
                                      seed=master_seed + 90_001)
    if spec.val_fraction > 0:
        train_ds, val_ds = split_train_val(pool, spec.val_fraction)
    else:
        train_ds, val_ds = pool, pool.take(np.arange(0))
    return train_ds, val_ds, eval_ds


# ---------------------------------------------------------------------------
# Trainer-state persistence


def _state_to_json(state: TrainerState) -> dict:
    return {
        "epoch": state.epoch,
        "best_metric": state.best_metric,
        "best_epoch": state.best_epoch,
        "best_robust_acc": state.best_robust_acc,
        "history": [asdict(r) for r in state.history],
    }


def _state_from_json(tree: dict, params: ModelParams,
                     best_params: ModelParams | None) -> TrainerState:
    state = TrainerState(params=params)
    state.epoch = tree["epoch"]
    state.best_metric = tree["best_metric"]
    state.best_epoch = tree["best_epoch"]
    state.best_robust_acc = tree["best_robust_acc"]
    state.best_params = best_params
    state.history = [EpochRecord(**r) for r in tree["history"]]
    return state


def _metrics_line(record: EpochRecord) -> str:
    return json.dumps(asdict(record), sort_keys=True)


def train_with_persistence(cfg: ExperimentConfig, out: Path,
                           train_ds: Dataset, val_ds: Dataset,
                           resume: bool = False,
                           stop_after: int | None = None) -> TrainerState:
    state_path = out / "trainer_state.json"
    last_ckpt = out / "last.ckpt"
    best_ckpt = out / "best.ckpt"
    partial = out / "metrics.jsonl.partial"

    resume_state = None
    if resume:
        if not (state_path.exists() and last_ckpt.exists()):
            raise ExperimentError(f"nothing to resume in {out}")
        with open(state_path, "r", encoding="utf-8") as f:
            tree = json.load(f)
        if tree.get("name") != cfg.name or tree.get("seed") != cfg.seed:
            raise ExperimentError("saved state belongs to a different experiment")
        params = load_checkpoint(last_ckpt)
        best = load_checkpoint(best_ckpt) if best_ckpt.exists() else None
        resume_state = _state_from_json(tree["trainer"], params, best)
        if resume_state.epoch >= cfg.trainer.epochs:
            return resume_state
    params0 = build_model(cfg.model, cfg.seed)

    def on_epoch(state: TrainerState):
        save_checkpoint(state.params, last_ckpt)
        if state.best_params is not None:
            save_checkpoint(state.best_params, best_ckpt)
        tree = {"name": cfg.name, "seed": cfg.seed, "trainer": _state_to_json(state)}
        atomic_write_text(state_path, json.dumps(tree, indent=2, sort_keys=True))
        with open(partial, "a", encoding="utf-8") as f:
            f.write(_metrics_line(state.history[-1]) + "\n")

    state = train(params0, cfg.trainer, train_ds, val_ds,
                  resume_state=resume_state, stop_after_epoch=stop_after,
                  on_epoch=on_epoch)
    if stop_after is None or state.epoch >= cfg.trainer.epochs:
        lines = "".join(_metrics_line(r) + "\n" for r in state.history)
        atomic_write_text(out / "metrics.jsonl", lines)
        if partial.exists():
            partial.unlink()
    return state


# ---------------------------------------------------------------------------
# Evaluation and the full pipeline


def evaluate_attacks(cfg: ExperimentConfig, params: ModelParams,
                     eval_ds: Dataset) -> EvalReport:
    nat = accuracy(params, eval_ds.inputs, eval_ds.labels)
    rows = []
    for atk in cfg.attacks:
        t0 = time.perf_counter() if cfg.record_timing else 0.0
        rob = robust_accuracy(params, eval_ds, atk, batch_size=cfg.eval_batch_size)
        wall = int(round((time.perf_counter() - t0) * 1000)) if cfg.record_timing else 0
        rows.append(EvalRow(
            defense=cfg.trainer.defense, attack=atk.kind, norm=atk.norm,
            epsilon=atk.radius, natural_acc=nat, robust_acc=rob,
            seed=cfg.seed, wall_ms=wall,
        ))
    if not cfg.attacks:
        rows.append(EvalRow(
            defense=cfg.trainer.defense, attack="none", norm="linf", epsilon=0.0,
            natural_acc=nat, robust_acc=nat, seed=cfg.seed, wall_ms=0,
        ))
    return EvalReport(rows)


def resolve_output_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    out = Path(override or cfg.output_dir or f"runs/{cfg.name}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_training(cfg: ExperimentConfig, output_dir: str | None = None,
                 resume: bool = False, stop_after: int | None = None,
                 data_dir: str | None = None) -> TrainerState:
    """Training with persistence only; no attack evaluation."""
    out = resolve_output_dir(cfg, output_dir)
    with output_lock(out):
        train_ds, val_ds, _ = build_datasets(cfg.data, cfg.seed, data_dir)
        return train_with_persistence(cfg, out, train_ds, val_ds,
                                      resume=resume, stop_after=stop_after)


def run_experiment(cfg: ExperimentConfig, output_dir: str | None = None,
                   resume: bool = False, stop_after: int | None = None,
                   data_dir: str | None = None) -> EvalReport | None:
    """Train (or resume), evaluate every configured attack at the
    early-stopped snapshot, and write report/metrics/checkpoints.

    Returns None when training was interrupted by ``stop_after`` before the
    configured epoch count (no report is produced for partial runs).
    """
    out = resolve_output_dir(cfg, output_dir)
    with output_lock(out):
        train_ds, val_ds, eval_ds = build_datasets(cfg.data, cfg.seed, data_dir)
        state = train_with_persistence(cfg, out, train_ds, val_ds,
                                       resume=resume, stop_after=stop_after)
        if state.epoch < cfg.trainer.epochs:
            return None
        params = state.snapshot_params()
        report = evaluate_attacks(cfg, params, eval_ds)
        write_report_csv(report, out / "report.csv")
        if eval_ds.inputs.data.ndim == 2 and eval_ds.inputs.shape[1] == 2:
            write_decision_svg(params, eval_ds, out / "decision.svg")
        return report


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint_path,
                        output_dir: str | None = None,
                        data_dir: str | None = None) -> EvalReport:
    """Attack evaluation of a stored checkpoint (no training)."""
    out = resolve_output_dir(cfg, output_dir)
    params = load_checkpoint(checkpoint_path)
    _, _, eval_ds = build_datasets(cfg.data, cfg.seed, data_dir)
    report = evaluate_attacks(cfg, params, eval_ds)
    write_report_csv(report, out / "report.csv")
    return report


def smooth_evaluate(cfg: ExperimentConfig, checkpoint_path,
                    data_dir: str | None = None,
                    count_abstain_as_error: bool = True) -> dict:
    if cfg.smoothing is None:
        raise ExperimentError("config has no smoothing section")
    params = load_checkpoint(checkpoint_path)
    _, _, eval_ds = build_datasets(cfg.data, cfg.seed, data_dir)
    acc = smooth_accuracy(params, eval_ds, cfg.smoothing,
                          count_abstain_as_error=count_abstain_as_error)
    return {
        "sigma": cfg.smoothing.sigma,
        "n_samples": cfg.smoothing.n_samples,
        "abstain_margin": cfg.smoothing.abstain_margin,
        "count_abstain_as_error": count_abstain_as_error,
        "smooth_accuracy": acc,
    }
