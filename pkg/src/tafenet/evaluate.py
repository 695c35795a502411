"""Evaluation protocols and metrics.

Ties in argmax and top-k are broken toward the lower label index. Per-class
averages skip classes that have no test samples.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tafenet.data import FeatureStore, SplitSpec, TaskTable, encode_task

log = logging.getLogger(__name__)


class EvalError(ValueError):
    pass


# --- metrics -------------------------------------------------------------


def per_class_top1(predicted, truth, class_set: Iterable[int]) -> float:
    class_set = list(class_set)
    if not class_set:
        raise EvalError("class_set is empty")
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    outside = set(np.unique(truth).tolist()) - set(class_set)
    if outside:
        raise EvalError(f"truth labels {sorted(outside)} are not in the class set")
    accs = []
    for c in class_set:
        mask = truth == c
        if mask.any():
            accs.append(float(np.mean(predicted[mask] == c)))
    if not accs:
        raise EvalError("no class in the class set has test samples")
    return float(np.mean(accs))


def harmonic_mean(acc_u: float, acc_s: float) -> float:
    if acc_u + acc_s == 0:
        return 0.0
    return 2.0 * acc_u * acc_s / (acc_u + acc_s)


def argmax_labels(scores, labels: Sequence[int]) -> np.ndarray:
    """Column argmax mapped to labels; ``labels`` must be ascending for the tie rule to hold."""
    return np.asarray(labels)[np.asarray(scores).argmax(axis=1)]


def gzsl_metrics(scores, truth, split: SplitSpec, labels: Sequence[int] | None = None) -> tuple[float, float, float]:
    """Accuracy on unseen, on seen, and their harmonic mean, predicting over seen and unseen jointly."""
    labels = list(labels) if labels is not None else split.classes
    if sorted(labels) != labels:
        raise EvalError("score columns must be ordered by ascending label")
    missing = set(split.classes) - set(labels)
    if missing:
        raise EvalError(f"score columns miss classes {sorted(missing)}")
    truth = np.asarray(truth)
    outside = set(np.unique(truth).tolist()) - set(split.classes)
    if outside:
        raise EvalError(f"truth labels {sorted(outside)} are outside the split")
    pred = argmax_labels(scores, labels)
    u_mask = np.isin(truth, split.unseen)
    s_mask = np.isin(truth, split.seen)
    acc_u = per_class_top1(pred[u_mask], truth[u_mask], split.unseen) if u_mask.any() else 0.0
    acc_s = per_class_top1(pred[s_mask], truth[s_mask], split.seen) if s_mask.any() else 0.0
    return acc_u, acc_s, harmonic_mean(acc_u, acc_s)


def truth_ranks(scores, truth_cols) -> np.ndarray:
    """0-based rank of each sample's true column under descending score, ties to the lower index."""
    scores = np.asarray(scores)
    truth_cols = np.asarray(truth_cols)
    rows = np.arange(scores.shape[0])
    s_true = scores[rows, truth_cols][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    ahead = (scores > s_true) | ((scores == s_true) & (cols < truth_cols[:, None]))
    return ahead.sum(axis=1)


def topk_accuracy(scores, truth_cols, k: int) -> float:
    scores = np.asarray(scores)
    if not 1 <= k <= scores.shape[1]:
        raise EvalError(f"k={k} outside 1..{scores.shape[1]}")
    return float(np.mean(truth_ranks(scores, truth_cols) < k))


def average_precisions(scores, truth_cols, pairs: Sequence[int]) -> dict[int, float | None]:
    """AP of each column in ``pairs`` over the image ranking; ``None`` when it has no positives."""
    scores = np.asarray(scores)
    truth_cols = np.asarray(truth_cols)
    out: dict[int, float | None] = {}
    for p in pairs:
        order = np.argsort(-scores[:, p], kind="stable")
        hits = truth_cols[order] == p
        if not hits.any():
            out[p] = None
            continue
        ranks = np.flatnonzero(hits) + 1
        out[p] = float(np.mean(np.arange(1, ranks.size + 1) / ranks))
    return out


def mean_average_precision(scores, truth_cols, pairs: Sequence[int]) -> float:
    if len(pairs) == 0:
        raise EvalError("no pairs to evaluate")
    aps = average_precisions(scores, truth_cols, pairs)
    empty = [p for p, ap in aps.items() if ap is None]
    if empty:
        log.warning("excluded %d pair(s) with no positive test image: %s", len(empty), empty)
    kept = [ap for ap in aps.values() if ap is not None]
    if not kept:
        raise EvalError("no pair has a positive test image")
    return float(np.mean(kept))


# --- reports -------------------------------------------------------------


@dataclass
class EvalReport:
    protocol: str
    metrics: dict[str, float]
    trials: list[dict[str, float]] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, v in self.metrics.items():
            if not 0.0 <= v <= 1.0:
                raise EvalError(f"metric {key}={v} is not a rate in [0, 1]")

    def to_dict(self) -> dict:
        return {"format": "tafenet-eval", "version": 1, "protocol": self.protocol,
                "metrics": self.metrics, "trials": self.trials, "info": self.info}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "EvalReport":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(doc["protocol"], doc["metrics"], doc.get("trials", []), doc.get("info", {}))

    def table(self) -> str:
        width = max([len(k) for k in self.metrics] + [6])
        lines = [f"protocol: {self.protocol}"]
        lines += [f"  {k:<{width}}  {100 * v:6.2f}" for k, v in self.metrics.items()]
        return "\n".join(lines)


# --- protocols on a model ----------------------------------------------------


def _rows(store: FeatureStore, sample_ids: Sequence[str]) -> np.ndarray:
    idx = store.index_of()
    return np.array([idx[s] for s in sample_ids], dtype=np.int64)


def zsl_eval(net, store: FeatureStore, tasks: TaskTable, split: SplitSpec) -> EvalReport:
    if not split.zsl_enabled:
        raise EvalError("split has no unseen classes; zero-shot evaluation is disabled")
    rows = _rows(store, split.test)
    rows = rows[np.isin(store.labels[rows], split.unseen)]
    labels = sorted(split.unseen)
    scores = net.score_matrix(store.features[rows], tasks.vectors_for(labels))
    pred = argmax_labels(scores, labels)
    acc = per_class_top1(pred, store.labels[rows], labels)
    return EvalReport("zsl", {"top1_per_class": acc}, info={"n_test": int(rows.size), "n_classes": len(labels)})


def gzsl_eval(net, store: FeatureStore, tasks: TaskTable, split: SplitSpec) -> EvalReport:
    rows = _rows(store, split.test)
    labels = split.classes
    scores = net.score_matrix(store.features[rows], tasks.vectors_for(labels))
    acc_u, acc_s, h = gzsl_metrics(scores, store.labels[rows], split, labels)
    return EvalReport("gzsl", {"acc_u": acc_u, "acc_s": acc_s, "H": h}, info={"n_test": int(rows.size)})


def composition_eval(net, store: FeatureStore, tasks: TaskTable, split: SplitSpec, ks=(1, 2, 3)) -> EvalReport:
    """mAP over unseen pairs plus top-k, on test images whose label is unseen."""
    rows = _rows(store, split.test)
    rows = rows[np.isin(store.labels[rows], split.unseen)]
    labels = sorted(split.unseen)
    col = {c: j for j, c in enumerate(labels)}
    scores = net.score_matrix(store.features[rows], tasks.vectors_for(labels))
    truth = np.array([col[int(c)] for c in store.labels[rows]])
    metrics = {"mAP": mean_average_precision(scores, truth, list(range(len(labels))))}
    for k in ks:
        if k <= len(labels):
            metrics[f"top{k}"] = topk_accuracy(scores, truth, k)
    return EvalReport("composition", metrics, info={"n_test": int(rows.size), "n_pairs": len(labels)})


# --- few-shot ------------------------------------------------------------


@dataclass
class Episode:
    n: int
    novel: list[int]
    base: list[int]
    trial: int
    seed: int
    exemplars: dict[int, list[int]]
    pool: list[int]


def build_fewshot_episode(store: FeatureStore, split: SplitSpec, n: int, trial_seed: int, trial: int = 0) -> Episode:
    """Draw ``n`` exemplars per novel class; the rest of the novel samples and the base test samples form the pool."""
    if n < 1:
        raise EvalError("n must be at least 1")
    if not split.novel:
        raise EvalError("split defines no novel classes")
    rng = np.random.default_rng(trial_seed)
    exemplars: dict[int, list[int]] = {}
    pool: list[int] = []
    for c in sorted(split.novel):
        members = np.flatnonzero(store.labels == c)
        if members.size <= n:
            raise EvalError(f"novel class {c} has {members.size} samples, needs more than {n}")
        pick = rng.choice(members, size=n, replace=False)
        exemplars[c] = sorted(int(i) for i in pick)
        pool += sorted(int(i) for i in np.setdiff1d(members, pick))
    test_rows = _rows(store, split.test)
    pool += [int(i) for i in test_rows if int(store.labels[i]) in set(split.base)]
    return Episode(n, sorted(split.novel), sorted(split.base), trial, trial_seed, exemplars, sorted(pool))


def episode_descriptions(store: FeatureStore, episode: Episode, base_table: TaskTable) -> tuple[list[int], np.ndarray]:
    labels = sorted(episode.base + episode.novel)
    vecs = []
    for c in labels:
        if c in episode.exemplars:
            vecs.append(encode_task(c, base_table, store.features[episode.exemplars[c]]))
        else:
            vecs.append(encode_task(c, base_table))
    return labels, np.array(vecs)


def fewshot_eval(net, store: FeatureStore, episodes: Sequence[Episode], base_table: TaskTable, k: int = 5) -> EvalReport:
    """Top-k on novel-class samples and on the whole pool, averaged over episodes.

    ``base_table`` is an exemplar-feature table holding base-class descriptions.
    """
    if not episodes:
        raise EvalError("no episodes")
    if len({e.n for e in episodes}) != 1:
        raise EvalError("episodes must share the same n")
    trials = []
    for ep in episodes:
        labels, descs = episode_descriptions(store, ep, base_table)
        col = {c: j for j, c in enumerate(labels)}
        pool = np.array(ep.pool)
        scores = net.score_matrix(store.features[pool], descs)
        truth = np.array([col[int(c)] for c in store.labels[pool]])
        kk = min(k, len(labels))
        novel_mask = np.isin(store.labels[pool], ep.novel)
        trials.append({
            "novel_top5": topk_accuracy(scores[novel_mask], truth[novel_mask], kk),
            "all_top5": topk_accuracy(scores, truth, kk),
        })
    metrics = {key: float(np.mean([t[key] for t in trials])) for key in ("novel_top5", "all_top5")}
    return EvalReport("fewshot", metrics, trials, info={"n": episodes[0].n, "trials": len(episodes)})


# --- shuffled task descriptions --------------------------------------------


def shuffled_task_eval(net, store: FeatureStore, tasks: TaskTable, hierarchy: dict[int, str], target_class: int,
                       mode: str, repeats: int = 20, seed: int = 0, rows=None, classes=None,
                       force_own: bool = False) -> float:
    """Top-1 accuracy on ``target_class`` when its description is swapped for another class's.

    The donor is drawn per sample and repeat from the target's coarse group
    (``in-group``) or from other groups (``out-of-group``). The target column is
    scored with the donor's description and the donor's own column is dropped,
    so the two are not tied. ``force_own`` keeps the target's own description.
    """
    if mode not in ("in-group", "out-of-group"):
        raise EvalError(f"mode must be 'in-group' or 'out-of-group', got {mode!r}")
    if repeats < 1:
        raise EvalError("repeats must be at least 1")
    classes = sorted(classes if classes is not None else hierarchy)
    missing = [c for c in classes if c not in hierarchy]
    if missing:
        raise EvalError(f"classes {missing} have no coarse group")
    group = hierarchy[target_class]
    if mode == "in-group":
        donors = [c for c in classes if hierarchy[c] == group and c != target_class]
    else:
        donors = [c for c in classes if hierarchy[c] != group]
    if not donors and not force_own:
        raise EvalError(f"no {mode} donor classes for class {target_class} (group {group!r})")

    if rows is None:
        rows = np.flatnonzero(store.labels == target_class)
    rows = np.asarray(rows)
    scores = net.score_matrix(store.features[rows], tasks.vectors_for(classes))
    col = {c: j for j, c in enumerate(classes)}
    t = col[target_class]
    if force_own:
        return float(np.mean(argmax_labels(scores, classes) == target_class))

    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(repeats):
        draw = rng.integers(0, len(donors), size=rows.size)
        for i, d in enumerate(draw):
            s = scores[i].copy()
            dj = col[donors[d]]
            s[t] = scores[i, dj]
            s[dj] = -np.inf
            hits += int(np.argmax(s) == t)
    return hits / (repeats * rows.size)


# --- embedding dump ------------------------------------------------------


DUMP_HEADER = "kind\tsample_id\ttask_id\tlabel\tvector"


def dump_embeddings(net, store: FeatureStore, tasks: TaskTable, path, task_ids: Sequence[int],
                    rows: Sequence[int] | None = None) -> int:
    """Write TAFEs for every (sample, task) pair and the task embeddings, tab-separated.

    Vector components are comma-separated and printed with ``repr`` so a
    reader recovers the exact values. Returns the number of rows written.
    """
    from tafenet import tensor as tc

    for t in task_ids:
        if t not in tasks.class_ids:
            raise EvalError(f"unknown task id {t}")
    rows = np.arange(store.n) if rows is None else np.asarray(rows)
    X = store.features[rows].astype(net.dtype)
    written = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(DUMP_HEADER + "\n")
        with tc.no_grad():
            embeddings = []
            for t in task_ids:
                e = net.install_task(tasks.vectors_for([t])[0].astype(net.dtype))
                try:
                    tafe = net._forward_installed(tc.Tensor(X, dtype=net.dtype)).data
                finally:
                    net.clear_task()
                embeddings.append((t, e.data))
                for r, vec in zip(rows, tafe):
                    label = int(int(store.labels[r]) == t)
                    fh.write(f"tafe\t{store.sample_ids[r]}\t{t}\t{label}\t{_fmt(vec)}\n")
                    written += 1
            for t, e in embeddings:
                fh.write(f"task_embedding\t-\t{t}\t-\t{_fmt(e)}\n")
                written += 1
    return written


def _fmt(vec) -> str:
    return ",".join(repr(float(v)) for v in vec)


def read_dump(path) -> tuple[list[dict], dict[int, np.ndarray]]:
    tafes, embeddings = [], {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != DUMP_HEADER:
            raise EvalError(f"unexpected dump header {header!r}")
        for line in fh:
            kind, sid, tid, label, vec = line.rstrip("\n").split("\t")
            values = np.array([float(v) for v in vec.split(",")])
            if kind == "tafe":
                tafes.append({"sample_id": sid, "task_id": int(tid), "label": int(label), "vector": values})
            else:
                embeddings[int(tid)] = values
    return tafes, embeddings


def standard_error(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n)
