"""Minibatch training of the joint objective, with per-epoch JSON-lines logging and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from tafenet import checkpoint, optim
from tafenet import tensor as tc
from tafenet.config import ConfigError, RunConfig
from tafenet.data import (FeatureStore, SplitSpec, TaskTable, exemplar_table, generate_synthetic, load_features,
                          load_split, load_tasks, validate_references)
from tafenet.losses import LossConfig, NonFiniteLoss, classification_loss, embedding_loss, label_matrix, total_loss
from tafenet.model import ModelConfig, TAFENet

log = logging.getLogger(__name__)

LOG_NAME = "train_log.jsonl"


class TrainingAborted(RuntimeError):
    pass


@dataclass
class Dataset:
    store: FeatureStore
    tasks: TaskTable
    split: SplitSpec

    @property
    def hierarchy(self) -> dict[int, str]:
        return self.tasks.groups

    def rows(self, sample_ids) -> np.ndarray:
        idx = self.store.index_of()
        return np.array([idx[s] for s in sample_ids], dtype=np.int64)


def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.uses_files:
        store = load_features(d.features)
        split = load_split(d.split)
        tasks = load_tasks(d.tasks, kind=d.task_kind)
        validate_references(tasks, split, store)
    else:
        ds = generate_synthetic(cfg.synthetic_config())
        store, tasks, split = ds.store, ds.tasks, ds.split
    if d.normalize:
        store = store.normalized()
    return Dataset(store, tasks, split)


def seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def model_config(cfg: RunConfig, ds: Dataset) -> ModelConfig:
    m = cfg.model
    return ModelConfig(d_in=ds.store.d_in, d_task=ds.tasks.d_task, widths=tuple(m.widths), embed_hidden=m.embed_hidden,
                       embed_depth=m.embed_depth, gen_init_scale=m.gen_init_scale, task_kind=ds.tasks.kind)


def build_net(cfg: RunConfig, ds: Dataset) -> TAFENet:
    init_seed = seeds(cfg.seed, 3)[0]
    return TAFENet(model_config(cfg, ds), seed=init_seed, n_train_tasks=len(ds.split.seen), dtype=np.float32)


def training_rows(ds: Dataset) -> np.ndarray:
    rows = ds.rows(ds.split.train)
    return rows[np.isin(ds.store.labels[rows], ds.split.seen)]


def split_validation(rows: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if fraction <= 0 or rows.size < 2:
        return rows, rows[:0]
    perm = np.random.default_rng(seed).permutation(rows)
    n_val = max(1, int(round(fraction * rows.size)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class TaskSource:
    """Task descriptions for a set of classes, drawing fresh exemplars each step for exemplar tables."""

    def __init__(self, ds: Dataset, train_rows: np.ndarray, exemplars: int, rng):
        self.ds = ds
        self.exemplar = ds.tasks.kind == "exemplar-feature"
        self.n = exemplars
        self.rng = rng
        self.by_class = {c: train_rows[ds.store.labels[train_rows] == c] for c in ds.split.seen}
        if self.exemplar:
            self.means = exemplar_table(ds.store, ds.split.seen, train_rows)

    def sampled(self, classes) -> np.ndarray:
        if not self.exemplar:
            return self.ds.tasks.vectors_for(classes)
        out = []
        for c in classes:
            members = self.by_class[c]
            pick = self.rng.choice(members, size=min(self.n, members.size), replace=False)
            out.append(self.ds.store.features[pick].mean(axis=0))
        return np.array(out)

    def fixed(self, classes) -> np.ndarray:
        return self.means.vectors_for(classes) if self.exemplar else self.ds.tasks.vectors_for(classes)


def _losses(net: TAFENet, X, labels, tasks_for, classes, loss_cfg: LossConfig):
    Y = label_matrix(labels, classes)
    logits, tafes, E = net.forward_pairs(X, tasks_for(classes).astype(net.dtype))
    l_cls = classification_loss(logits, Y)
    l_emb = embedding_loss(tafes, E, Y)
    return l_cls, l_emb, total_loss(l_cls, l_emb, loss_cfg)


def evaluate_loss(net, ds: Dataset, rows, source: TaskSource, loss_cfg: LossConfig, batch: int = 256) -> float:
    classes = list(ds.split.seen)
    X = ds.store.features.astype(net.dtype)
    total, count = 0.0, 0
    with tc.no_grad():
        for s in range(0, rows.size, batch):
            b = rows[s : s + batch]
            *_, L = _losses(net, X[b], ds.store.labels[b], source.fixed, classes, loss_cfg)
            total += L.item() * b.size
            count += b.size
    return total / max(count, 1)


@dataclass
class TrainResult:
    net: TAFENet
    records: list[dict]
    out_dir: Path
    best_path: Path
    final_path: Path
    state: optim.OptimizerState = field(repr=False, default=None)


def _epoch_batches(rows, o, rng):
    perm = rng.permutation(rows)
    return [perm[s : s + o.batch_size] for s in range(0, perm.size, o.batch_size)]


def _sampled_batch(rows, labels, o, rng):
    """One batch for iteration-based training, optionally restricted to a random class subset."""
    pool = rows
    if o.classes_per_step:
        classes = np.unique(labels[rows])
        chosen = rng.choice(classes, size=min(o.classes_per_step, classes.size), replace=False)
        pool = rows[np.isin(labels[rows], chosen)]
    return rng.choice(pool, size=min(o.batch_size, pool.size), replace=False)


def train(cfg: RunConfig, ds: Dataset | None = None, out_dir=None) -> TrainResult:
    threads = 1 if cfg.deterministic else cfg.threads
    with threadpool_limits(limits=threads):
        return _train(cfg, ds if ds is not None else load_dataset(cfg), Path(out_dir or cfg.out))


def _train(cfg: RunConfig, ds: Dataset, out: Path) -> TrainResult:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    _, split_seed, shuffle_seed = seeds(cfg.seed, 3)
    rows, val_rows = split_validation(training_rows(ds), cfg.val_fraction, split_seed)
    if rows.size == 0:
        raise ConfigError("data: no training samples from seen classes")
    rng = np.random.default_rng(shuffle_seed)
    net = build_net(cfg, ds)
    params = net.parameters()
    o = cfg.optim
    state = optim.make_state(o.kind, net.param_groups(), o.lr, momentum=o.momentum)
    schedule = optim.Schedule(tuple(o.milestones), o.decay)
    loss_cfg = LossConfig(cfg.loss.beta, cfg.loss.task_scope)
    source = TaskSource(ds, rows, o.exemplars_per_task, rng)
    X = ds.store.features.astype(net.dtype)
    labels = ds.store.labels
    all_classes = sorted(ds.split.seen)

    steps_per_period = max(1, math.ceil(rows.size / o.batch_size))
    if o.unit == "iteration":
        periods = math.ceil(o.iterations / steps_per_period)
    else:
        periods = o.epochs

    best_path, final_path = out / "best.ckpt", out / "final.ckpt"
    log_path = out / LOG_NAME
    records: list[dict] = []
    best = math.inf
    snapshot = {k: p.data.copy() for k, p in params.items()}
    iteration = 0
    with open(log_path, "w", encoding="utf-8") as log_fh:
        for period in range(periods):
            if o.unit == "epoch":
                optim.apply_schedule(state, schedule, period)
            sums = np.zeros(3)
            n_steps = 0
            if o.unit == "iteration":
                n_here = min(steps_per_period, o.iterations - iteration)
                batches = [_sampled_batch(rows, labels, o, rng) for _ in range(n_here)]
            elif o.classes_per_step:
                batches = [_sampled_batch(rows, labels, o, rng) for _ in range(steps_per_period)]
            else:
                batches = _epoch_batches(rows, o, rng)
            for b in batches:
                if o.unit == "iteration":
                    optim.apply_schedule(state, schedule, iteration)
                classes = sorted(set(labels[b].tolist())) if loss_cfg.task_scope == "minibatch" else all_classes
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        l_cls, l_emb, L = _losses(net, X[b], labels[b], source.sampled, classes, loss_cfg)
                        if not math.isfinite(L.item()):
                            raise NonFiniteLoss(f"total loss is {L.item()}")
                        grads = dict(zip(params, tc.gradients(L, params.values())))
                    optim.step(params, grads, state)
                except (NonFiniteLoss, optim.NonFiniteGradient) as exc:
                    net.load_state(snapshot)
                    checkpoint.save_model(out / "last_good.ckpt", net)
                    raise TrainingAborted(f"period {period}, iteration {iteration}: {exc}") from None
                sums += (l_cls.item(), l_emb.item(), L.item())
                n_steps += 1
                iteration += 1
            means = sums / max(n_steps, 1)
            val = evaluate_loss(net, ds, val_rows, source, loss_cfg) if val_rows.size else float(means[2])
            rec = {
                "epoch": period + 1,
                "iteration": iteration,
                "l_cls": float(means[0]),
                "l_emb": float(means[1]),
                "total": float(means[2]),
                "val_total": float(val),
                "lr": dict(state.group_lr),
            }
            records.append(rec)
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()
            log.info("epoch %d  cls %.4f  emb %.4f  total %.4f  val %.4f", period + 1, *means, val)
            if not math.isfinite(val):
                net.load_state(snapshot)
                checkpoint.save_model(out / "last_good.ckpt", net)
                raise TrainingAborted(f"validation loss is {val} after period {period}")
            snapshot = {k: p.data.copy() for k, p in params.items()}
            if val < best:
                best = val
                checkpoint.save_model(best_path, net, extra={"epoch": period + 1, "val_total": float(val)})
    checkpoint.save_model(final_path, net, state, extra={"epoch": periods})
    return TrainResult(net, records, out, best_path, final_path, state)


def load_net(path, cfg: RunConfig | None = None, ds: Dataset | None = None) -> TAFENet:
    """Rebuild a network from a checkpoint, checking it against the config's architecture when given."""
    arrays, manifest = checkpoint.load(path)
    arch = manifest["architecture"]
    if cfg is not None and ds is not None:
        expected = model_config(cfg, ds).manifest()
        expected["embed_depth"] = model_config(cfg, ds).resolved_depth(len(ds.split.seen))
        if expected != arch:
            raise checkpoint.CheckpointError(
                "checkpoint architecture does not match config\n"
                f"  checkpoint: {json.dumps(arch, sort_keys=True)}\n"
                f"  config:     {json.dumps(expected, sort_keys=True)}"
            )
    mcfg = ModelConfig(**{**arch, "widths": tuple(arch["widths"])})
    net = TAFENet(mcfg, seed=0, dtype=np.float32)
    net.load_state(checkpoint.model_arrays(arrays))
    return net
