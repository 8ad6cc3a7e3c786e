"""Experiment configuration: a strict JSON key tree.

Unknown keys are errors (reported with their full path), as are constraint
violations from the underlying dataclasses. Every default lives here, in
one place.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .attacks import AttackConfig
from .defenses import EarlyStopConfig, TrainerConfig
from .sampler import GibbsSamplerConfig
from .smoothing import SmoothingConfig

_REQUIRED = object()


class ConfigError(ValueError):
    """Bad experiment config: syntax, unknown key, or constraint violation."""


class _Section:
    def __init__(self, mapping, path: str, allowed: frozenset | None = None):
        if not isinstance(mapping, dict):
            raise ConfigError(f"{path or '<root>'}: expected an object")
        self.mapping = dict(mapping)
        self.path = path
        if allowed is not None:
            for key in sorted(self.mapping):
                if key not in allowed:
                    raise ConfigError(f"unknown key {self._fullkey(key)!r}")

    def _fullkey(self, key):
        return f"{self.path}.{key}" if self.path else key

    def take(self, key, default=_REQUIRED, kind=None):
        if key not in self.mapping:
            if default is _REQUIRED:
                raise ConfigError(f"missing required key {self._fullkey(key)!r}")
            return default
        value = self.mapping.pop(key)
        if kind is not None and not isinstance(value, kind):
            names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
            raise ConfigError(f"{self._fullkey(key)}: expected {names}")
        return value

    def take_number(self, key, default=_REQUIRED):
        value = self.take(key, default)
        if value is default and default is not _REQUIRED:
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{self._fullkey(key)}: expected a number")
        return float(value)

    def take_int(self, key, default=_REQUIRED):
        value = self.take(key, default)
        if value is default and default is not _REQUIRED:
            return value
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{self._fullkey(key)}: expected an integer")
        return value

    def subsection(self, key, default=_REQUIRED, allowed=None):
        value = self.take(key, default)
        if value is default and default is not _REQUIRED:
            return None
        return _Section(value, self._fullkey(key), allowed)

    def finish(self):
        if self.mapping:
            key = sorted(self.mapping)[0]
            raise ConfigError(f"unknown key {self._fullkey(key)!r}")


_SAMPLER_KEYS = frozenset({"gamma", "step", "steps", "noise_scale", "ema", "norm",
                           "init_radius", "loss_cap", "linf_mode"})
_ATTACK_KEYS = frozenset({"kind", "norm", "radius", "steps", "step_size", "restarts",
                          "random_start", "seed", "sampler"})
_EARLY_KEYS = frozenset({"metric", "patience", "eval_attack"})
_TRAINER_KEYS = frozenset({"defense", "lr", "epochs", "batch_size", "seed",
                           "lr_schedule", "weight_decay", "sampler", "pgd",
                           "early_stop"})
_DATA_KEYS = frozenset({"kind", "val_fraction", "class_a", "class_b", "cap_per_class",
                        "data_dir", "n_per_class", "n", "separation"})
_MODEL_KEYS = frozenset({"kind", "widths", "channels", "fc_widths", "in_shape"})
_SMOOTH_KEYS = frozenset({"sigma", "n_samples", "abstain_margin", "seed"})
_ROOT_KEYS = frozenset({"name", "seed", "record_timing", "data", "model", "trainer",
                        "attacks", "smoothing", "output_dir", "eval_batch_size"})

@dataclass
class DataSpec:
    kind: str
    class_a: int = 5
    class_b: int = 8
    cap_per_class: int = 1000
    n: int = 400
    separation: float = 4.0
    n_per_class: int = 1000
    data_dir: str | None = None
    val_fraction: float = 0.1


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    data: DataSpec
    model: dict
    trainer: TrainerConfig
    attacks: list[AttackConfig]
    smoothing: SmoothingConfig | None = None
    output_dir: str | None = None
    record_timing: bool = False
    eval_batch_size: int = 256


def _build(factory, path: str, /, **kwargs):
    try:
        return factory(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_sampler(sec: _Section | None) -> GibbsSamplerConfig | None:
    if sec is None:
        return None
    kwargs = dict(
        gamma=sec.take_number("gamma"),
        step=sec.take_number("step"),
        steps=sec.take_int("steps"),
        noise_scale=sec.take_number("noise_scale", 0.0),
        ema=sec.take_number("ema", 1.0),
        norm=sec.take("norm", "l2", kind=str),
        init_radius=sec.take_number("init_radius", None),
        loss_cap=sec.take_number("loss_cap", float("inf")),
        linf_mode=sec.take("linf_mode", "final_projection", kind=str),
    )
    sec.finish()
    return _build(GibbsSamplerConfig, sec.path, **kwargs)


def _parse_attack(sec: _Section, default_seed: int) -> AttackConfig:
    kwargs = dict(
        kind=sec.take("kind", "pgd", kind=str),
        norm=sec.take("norm", "linf", kind=str),
        radius=sec.take_number("radius"),
        steps=sec.take_int("steps", 1),
        step_size=sec.take_number("step_size", 0.0),
        restarts=sec.take_int("restarts", 1),
        random_start=sec.take("random_start", False, kind=bool),
        seed=sec.take_int("seed", default_seed),
        sampler=_parse_sampler(sec.subsection("sampler", None, _SAMPLER_KEYS)),
    )
    sec.finish()
    return _build(AttackConfig, sec.path, **kwargs)


def _parse_early_stop(sec: _Section | None, default_seed: int) -> EarlyStopConfig:
    if sec is None:
        return EarlyStopConfig()
    attack_sec = sec.subsection("eval_attack", None, _ATTACK_KEYS)
    kwargs = dict(
        metric=sec.take("metric", "natural", kind=str),
        patience=sec.take_int("patience", None),
        eval_attack=_parse_attack(attack_sec, default_seed) if attack_sec else None,
    )
    sec.finish()
    return _build(EarlyStopConfig, sec.path, **kwargs)


def _parse_trainer(sec: _Section, master_seed: int, record_timing: bool) -> TrainerConfig:
    schedule = sec.take("lr_schedule", None, kind=list)
    if schedule is not None:
        try:
            schedule = [(int(e), float(f)) for e, f in schedule]
        except (TypeError, ValueError):
            raise ConfigError(f"{sec.path}.lr_schedule: expected [[epoch, factor], ...]")
    pgd_sec = sec.subsection("pgd", None, _ATTACK_KEYS)
    kwargs = dict(
        defense=sec.take("defense", kind=str),
        lr=sec.take_number("lr"),
        epochs=sec.take_int("epochs"),
        batch_size=sec.take_int("batch_size"),
        seed=sec.take_int("seed", master_seed),
        lr_schedule=schedule,
        weight_decay=sec.take_number("weight_decay", 0.0),
        sampler=_parse_sampler(sec.subsection("sampler", None, _SAMPLER_KEYS)),
        pgd=_parse_attack(pgd_sec, master_seed) if pgd_sec else None,
        early_stop=_parse_early_stop(sec.subsection("early_stop", None, _EARLY_KEYS), master_seed),
        record_timing=record_timing,
    )
    sec.finish()
    return _build(TrainerConfig, sec.path, **kwargs)


def _parse_data(sec: _Section) -> DataSpec:
    kind = sec.take("kind", kind=str)
    if kind not in ("mnist_binary", "digits_binary", "two_gaussians"):
        raise ConfigError(f"{sec.path}.kind: unknown dataset kind {kind!r}")
    kwargs = dict(kind=kind, val_fraction=sec.take_number("val_fraction", 0.1))
    if kind == "mnist_binary":
        kwargs.update(
            class_a=sec.take_int("class_a", 5),
            class_b=sec.take_int("class_b", 8),
            cap_per_class=sec.take_int("cap_per_class", 1000),
            data_dir=sec.take("data_dir", None, kind=str),
        )
    elif kind == "digits_binary":
        kwargs.update(
            class_a=sec.take_int("class_a", 5),
            class_b=sec.take_int("class_b", 8),
            n_per_class=sec.take_int("n_per_class", 1000),
        )
    else:
        kwargs.update(n=sec.take_int("n", 400), separation=sec.take_number("separation", 4.0))
    sec.finish()
    if not 0.0 <= kwargs["val_fraction"] < 1.0:
        raise ConfigError(f"{sec.path}.val_fraction: must lie in [0, 1)")
    return DataSpec(**kwargs)


def _parse_model(sec: _Section) -> dict:
    kind = sec.take("kind", kind=str)
    if kind == "mlp":
        widths = sec.take("widths", kind=list)
        descriptor = {"kind": "mlp", "widths": [int(w) for w in widths]}
    elif kind == "cnn":
        descriptor = {
            "kind": "cnn",
            "channels": [int(c) for c in sec.take("channels", kind=list)],
            "fc_widths": [int(w) for w in sec.take("fc_widths", kind=list)],
            "in_shape": tuple(int(s) for s in sec.take("in_shape", [1, 28, 28], kind=list)),
        }
    else:
        raise ConfigError(f"{sec.path}.kind: unknown model kind {kind!r}")
    sec.finish()
    return descriptor


def parse_config_dict(tree: dict, path: str = "") -> ExperimentConfig:
    root = _Section(tree, path, _ROOT_KEYS)
    name = root.take("name", kind=str)
    if not name or any(c in name for c in "/\\\0 \t\n"):
        raise ConfigError("name: must be non-empty and filesystem-safe")
    seed = root.take_int("seed", 0)
    record_timing = root.take("record_timing", False, kind=bool)
    data = _parse_data(root.subsection("data", allowed=_DATA_KEYS))
    model = _parse_model(root.subsection("model", allowed=_MODEL_KEYS))
    trainer = _parse_trainer(root.subsection("trainer", allowed=_TRAINER_KEYS), seed, record_timing)
    attack_list = root.take("attacks", [], kind=list)
    attacks = [
        _parse_attack(_Section(entry, f"attacks[{i}]", _ATTACK_KEYS), seed)
        for i, entry in enumerate(attack_list)
    ]
    smoothing_sec = root.subsection("smoothing", None, _SMOOTH_KEYS)
    smoothing = None
    if smoothing_sec is not None:
        kwargs = dict(
            sigma=smoothing_sec.take_number("sigma"),
            n_samples=smoothing_sec.take_int("n_samples", 1000),
            abstain_margin=smoothing_sec.take_number("abstain_margin", 0.0),
            seed=smoothing_sec.take_int("seed", seed),
        )
        smoothing_sec.finish()
        smoothing = _build(SmoothingConfig, smoothing_sec.path, **kwargs)
    output_dir = root.take("output_dir", None, kind=str)
    eval_batch_size = root.take_int("eval_batch_size", 256)
    root.finish()
    return ExperimentConfig(
        name=name,
        seed=seed,
        data=data,
        model=model,
        trainer=trainer,
        attacks=attacks,
        smoothing=smoothing,
        output_dir=output_dir,
        record_timing=record_timing,
        eval_batch_size=eval_batch_size,
    )


def parse_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            tree = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    return parse_config_dict(tree)
