"""Command-line entry point: ``tafenet {train,eval,embed,gen-synth}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from tafenet import evaluate as ev
from tafenet.checkpoint import CheckpointError
from tafenet.config import PROTOCOLS, ConfigError, RunConfig, load_config
from tafenet.data import FormatError, exemplar_table, generate_synthetic, write_dataset
from tafenet.train import Dataset, TrainingAborted, load_dataset, load_net, seeds, train, training_rows

log = logging.getLogger("tafenet")


def run_protocol(name: str, net, ds: Dataset, cfg: RunConfig) -> ev.EvalReport:
    store, tasks, split = ds.store, ds.tasks, ds.split
    if name == "zsl":
        return ev.zsl_eval(net, store, tasks, split)
    if name == "gzsl":
        return ev.gzsl_eval(net, store, tasks, split)
    if name == "composition":
        return ev.composition_eval(net, store, tasks, split, tuple(cfg.eval.topk))
    if name == "fewshot":
        base = sorted(split.base or split.seen)
        base_table = exemplar_table(store, base, training_rows(ds))
        trial_seeds = seeds(cfg.seed + 1, cfg.eval.trials)
        episodes = [ev.build_fewshot_episode(store, split, cfg.eval.fewshot_n, s, trial=i)
                    for i, s in enumerate(trial_seeds)]
        return ev.fewshot_eval(net, store, episodes, base_table)
    if name == "shuffle":
        return shuffle_report(net, ds, cfg)
    raise ConfigError(f"eval.protocols: unknown protocol {name!r}")


def default_shuffle_target(ds: Dataset) -> int:
    groups = ds.hierarchy
    for c in sorted(ds.split.seen):
        if sum(1 for g in groups.values() if g == groups.get(c)) >= 2:
            return c
    raise ConfigError("eval.shuffle_target: no seen class shares a coarse group with another class")


def shuffle_report(net, ds: Dataset, cfg: RunConfig) -> ev.EvalReport:
    if not ds.hierarchy:
        raise ConfigError("eval.protocols: shuffle needs a class hierarchy (task 'group' fields)")
    target = cfg.eval.shuffle_target if cfg.eval.shuffle_target is not None else default_shuffle_target(ds)
    rows = ds.rows(ds.split.test)
    rows = rows[ds.store.labels[rows] == target]
    common = dict(rows=rows, repeats=cfg.eval.shuffle_repeats, seed=cfg.seed)
    own = ev.shuffled_task_eval(net, ds.store, ds.tasks, ds.hierarchy, target, "in-group", force_own=True, **common)
    ing = ev.shuffled_task_eval(net, ds.store, ds.tasks, ds.hierarchy, target, "in-group", **common)
    outg = ev.shuffled_task_eval(net, ds.store, ds.tasks, ds.hierarchy, target, "out-of-group", **common)
    return ev.EvalReport("shuffle", {"own": own, "in_group": ing, "out_of_group": outg},
                         info={"target_class": int(target), "repeats": cfg.eval.shuffle_repeats, "n": int(rows.size)})


def cmd_train(cfg: RunConfig, evaluate: bool = False) -> int:
    """Train; with ``evaluate`` also run ``cfg.eval.protocols`` on the best checkpoint."""
    result = train(cfg)
    last = result.records[-1]
    print(f"trained {last['epoch']} epochs: total {last['total']:.4f}, val {last['val_total']:.4f}")
    print(f"checkpoints: {result.best_path} {result.final_path}")
    if evaluate:
        cmd_eval(cfg, result.best_path)
    return 0


def cmd_eval(cfg: RunConfig, checkpoint_path) -> list[ev.EvalReport]:
    ds = load_dataset(cfg)
    net = load_net(checkpoint_path, cfg, ds)
    if "fewshot" in cfg.eval.protocols and net.cfg.d_task != ds.store.d_in:
        raise ConfigError("eval.protocols: fewshot needs a model whose task input is an image feature")
    if "shuffle" in cfg.eval.protocols and not ds.hierarchy:
        raise ConfigError("eval.protocols: shuffle needs a class hierarchy (task 'group' fields)")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    with threadpool_limits(limits=1 if cfg.deterministic else cfg.threads):
        for name in cfg.eval.protocols:
            report = run_protocol(name, net, ds, cfg)
            report.write(out / f"eval_{name}.json")
            print(report.table())
            reports.append(report)
    return reports


def cmd_embed(cfg: RunConfig, checkpoint_path, task_ids: list[int], max_samples: int | None = None) -> Path:
    ds = load_dataset(cfg)
    net = load_net(checkpoint_path, cfg, ds)
    unknown = [t for t in task_ids if t not in ds.tasks.class_ids]
    if unknown:
        raise ConfigError(f"--tasks: unknown task id(s) {unknown}")
    rows = ds.rows(ds.split.test)
    if max_samples is not None:
        rows = rows[:max_samples]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "embeddings.tsv"
    n = ev.dump_embeddings(net, ds.store, ds.tasks, path, task_ids, rows)
    print(f"wrote {n} rows to {path}")
    return path


def cmd_gensynth(cfg: RunConfig) -> dict:
    paths = write_dataset(generate_synthetic(cfg.synthetic_config()), cfg.out)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return paths


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tafenet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "embed", "gen-synth"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. loss.beta=0")
        p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                       help="single-threaded bit-reproducible mode (default on)")
        p.add_argument("--threads", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "embed"):
            p.add_argument("--checkpoint", required=True)
        if name in ("train", "eval"):
            p.add_argument("--protocol", action="append", choices=PROTOCOLS,
                           help="evaluation protocol; repeat for several")
        if name == "embed":
            p.add_argument("--tasks", required=True, help="comma-separated task (class) ids")
            p.add_argument("--max-samples", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    flags = {"out": args.out, "deterministic": args.deterministic, "threads": args.threads}
    if args.command == "gen-synth" and args.seed is not None:
        args.overrides = args.overrides + [f"data.synthetic.seed={args.seed}"]
    flags["seed"] = args.seed
    if getattr(args, "protocol", None):
        flags["eval.protocols"] = list(args.protocol)
    try:
        cfg = load_config(args.config, args.overrides, **flags)
        if args.command == "train":
            return cmd_train(cfg, evaluate=bool(args.protocol))
        if args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
            return 0
        if args.command == "embed":
            try:
                task_ids = [int(t) for t in args.tasks.split(",") if t.strip()]
            except ValueError:
                raise ConfigError(f"--tasks: expected comma-separated integers, got {args.tasks!r}") from None
            cmd_embed(cfg, args.checkpoint, task_ids, args.max_samples)
            return 0
        cmd_gensynth(cfg)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, CheckpointError, ev.EvalError, TrainingAborted, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
