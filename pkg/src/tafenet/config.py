"""Run configuration: a YAML/JSON file merged over defaults, then flag overrides."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from tafenet.data import TASK_KINDS, SyntheticConfig

PROTOCOLS = ("zsl", "gzsl", "composition", "fewshot", "shuffle")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    features: str | None = None
    tasks: str | None = None
    split: str | None = None
    task_kind: str | None = None
    normalize: bool = False
    synthetic: dict = field(default_factory=dict)

    @property
    def uses_files(self) -> bool:
        return self.features is not None


@dataclass
class ModelSection:
    # desk-scale defaults; the full-size configuration uses widths of 2048
    widths: list[int] = field(default_factory=lambda: [512, 512, 512])
    embed_hidden: int = 512
    embed_depth: int | None = None
    gen_init_scale: float = 1e-2


@dataclass
class LossSection:
    beta: float = 0.1
    task_scope: str = "minibatch"


@dataclass
class OptimSection:
    kind: str = "adam"
    lr: dict = field(default_factory=lambda: {"prediction": 1e-4, "generators": 1e-4, "task_embedding": 1e-5})
    momentum: float = 0.9
    milestones: list[int] = field(default_factory=lambda: [30, 45])
    decay: float = 10.0
    unit: str = "epoch"
    batch_size: int = 32
    epochs: int = 60
    iterations: int | None = None
    classes_per_step: int | None = None
    exemplars_per_task: int = 1


@dataclass
class EvalSection:
    protocols: list[str] = field(default_factory=lambda: ["zsl", "gzsl"])
    fewshot_n: int = 1
    trials: int = 5
    shuffle_target: int | None = None
    shuffle_repeats: int = 20
    topk: list[int] = field(default_factory=lambda: [1, 2, 3])


@dataclass
class RunConfig:
    seed: int
    out: str = "runs/default"
    deterministic: bool = True
    threads: int = 1
    val_fraction: float = 0.1
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def synthetic_config(self) -> SyntheticConfig:
        try:
            return SyntheticConfig(**self.data.synthetic)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.synthetic: {exc}") from None


_SECTIONS = {"data": DataSection, "model": ModelSection, "loss": LossSection, "optim": OptimSection, "eval": EvalSection}


def _defaults() -> dict:
    out = {f.name: f.default for f in fields(RunConfig) if f.name not in _SECTIONS and f.name != "seed"}
    out["seed"] = None
    for name, cls in _SECTIONS.items():
        out[name] = asdict(cls())
    return out


def _merge(base: dict, update: dict, where: str = "") -> dict:
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"{path}: unknown field")
        if isinstance(base[key], dict) and isinstance(value, dict) and key not in ("synthetic", "lr"):
            _merge(base[key], value, path + ".")
        elif key in ("synthetic", "lr") and isinstance(value, dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return base


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def _apply(doc: dict, keys: list[str], value) -> None:
    node = doc
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"{'.'.join(keys[: i + 1])}: unknown field")
        node = node[k]
    last = keys[-1]
    if not isinstance(node, dict) or (last not in node and keys[-2:-1] not in (["synthetic"], ["lr"])):
        raise ConfigError(f"{'.'.join(keys)}: unknown field")
    node[last] = value


def load_config(path=None, overrides: list[str] | None = None, **flags) -> RunConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides, then explicit flags."""
    doc = _defaults()
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(doc, copy.deepcopy(loaded))
    for text in overrides or []:
        keys, value = parse_override(text)
        _apply(doc, keys, value)
    for key, value in flags.items():
        if value is not None:
            _apply(doc, key.split("."), value)
    return build(doc)


def build(doc: dict) -> RunConfig:
    sections = {}
    for name, cls in _SECTIONS.items():
        try:
            sections[name] = cls(**doc[name])
        except TypeError as exc:
            raise ConfigError(f"{name}: {exc}") from None
    top = {k: v for k, v in doc.items() if k not in _SECTIONS}
    cfg = RunConfig(**top, **sections)
    validate(cfg)
    return cfg


def _need(cond: bool, field_name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{field_name}: {msg}")


def validate(cfg: RunConfig, check_paths: bool = True) -> None:
    _need(isinstance(cfg.seed, int) and not isinstance(cfg.seed, bool), "seed", "an integer seed is required")
    _need(cfg.threads >= 1, "threads", "must be >= 1")
    _need(0 <= cfg.val_fraction < 1, "val_fraction", "must lie in [0, 1)")
    d = cfg.data
    if d.uses_files:
        for name in ("features", "tasks", "split"):
            value = getattr(d, name)
            _need(value is not None, f"data.{name}", "required when data.features is set")
            if check_paths:
                _need(Path(value).exists(), f"data.{name}", f"file {value} does not exist")
    else:
        cfg.synthetic_config()
    _need(d.task_kind is None or d.task_kind in TASK_KINDS, "data.task_kind", f"must be one of {TASK_KINDS}")
    m = cfg.model
    _need(len(m.widths) >= 1 and all(int(w) > 0 for w in m.widths), "model.widths", "need positive widths")
    _need(m.embed_hidden > 0, "model.embed_hidden", "must be positive")
    _need(m.embed_depth is None or m.embed_depth >= 1, "model.embed_depth", "must be >= 1 or null")
    _need(cfg.loss.beta >= 0, "loss.beta", "must be >= 0")
    _need(cfg.loss.task_scope in ("minibatch", "whole-dataset"), "loss.task_scope", "minibatch or whole-dataset")
    o = cfg.optim
    _need(o.kind in ("adam", "sgd-momentum"), "optim.kind", "adam or sgd-momentum")
    _need(set(o.lr) == {"prediction", "generators", "task_embedding"}, "optim.lr",
          "needs prediction, generators and task_embedding rates")
    _need(all(v > 0 for v in o.lr.values()), "optim.lr", "rates must be positive")
    _need(list(o.milestones) == sorted(set(o.milestones)), "optim.milestones", "must be strictly increasing")
    _need(o.unit in ("epoch", "iteration"), "optim.unit", "epoch or iteration")
    _need(o.batch_size >= 1, "optim.batch_size", "must be >= 1")
    _need(o.epochs >= 1, "optim.epochs", "must be >= 1")
    _need(o.unit == "epoch" or (o.iterations or 0) >= 1, "optim.iterations", "required when optim.unit is iteration")
    _need(o.exemplars_per_task >= 1, "optim.exemplars_per_task", "must be >= 1")
    for p in cfg.eval.protocols:
        _need(p in PROTOCOLS, "eval.protocols", f"unknown protocol {p!r}; choose from {PROTOCOLS}")
    _need(cfg.eval.shuffle_repeats >= 1, "eval.shuffle_repeats", "must be >= 1")
    _need(cfg.eval.fewshot_n >= 1, "eval.fewshot_n", "must be >= 1")
