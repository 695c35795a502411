"""Feature, task and split files, plus a seeded synthetic attribute dataset.

Feature files (binary, little-endian)::

    offset  size  field
    0       8     magic  b"TAFEFEAT"
    8       4     version (u32) = 1
    12      8     N (u64)
    20      8     d_in (u64)
    28      4     precision in bits (u32): 32 or 64
    32      8     byte length of the sample-id block (u64)
    40      ...   N*d_in feature values, row-major, at the declared precision
    ...     4*N   label ids (i32)
    ...     ...   sample ids, UTF-8, newline-separated

A delimited text fallback is also read: a header line
``sample_id,label,f0,f1,...`` then one row per sample.

Task and split files are JSON documents; see ``docs/formats.md``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FEATURE_MAGIC = b"TAFEFEAT"
FEATURE_VERSION = 1
TASKS_FORMAT = "tafenet-tasks"
SPLIT_FORMAT = "tafenet-split"
JSON_VERSION = 1
TASK_KINDS = ("attribute-vector", "concatenated-word-embeddings", "one-hot", "exemplar-feature")

_HEADER = struct.Struct("<8sIQQIQ")


class FormatError(ValueError):
    pass


@dataclass
class FeatureStore:
    features: np.ndarray
    labels: np.ndarray
    sample_ids: list[str]

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise FormatError(f"features must be a matrix, got shape {self.features.shape}")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or len(self.sample_ids) != n:
            raise FormatError(f"{n} feature rows but {self.labels.size} labels and {len(self.sample_ids)} ids")
        if not np.isfinite(self.features).all():
            raise FormatError("feature matrix contains non-finite values")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def index_of(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.sample_ids)}

    def subset(self, idx) -> "FeatureStore":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureStore(self.features[idx], self.labels[idx], [self.sample_ids[i] for i in idx])

    def normalized(self) -> "FeatureStore":
        norms = np.linalg.norm(self.features, axis=1, keepdims=True)
        return FeatureStore(self.features / np.maximum(norms, 1e-12), self.labels, list(self.sample_ids))


def save_features(store: FeatureStore, path, precision: int = 32) -> None:
    if precision not in (32, 64):
        raise ValueError("precision must be 32 or 64")
    dtype = "<f4" if precision == 32 else "<f8"
    ids = "\n".join(store.sample_ids).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, store.n, store.d_in, precision, len(ids)))
        fh.write(store.features.astype(dtype).tobytes())
        fh.write(store.labels.astype("<i4").tobytes())
        fh.write(ids)


def load_features(path) -> FeatureStore:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        if raw[:10] == b"sample_id,":
            return _load_features_text(raw.decode("utf-8"))
        raise FormatError(f"{path}: bad magic {raw[:8]!r} at byte offset 0")
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: header truncated, expected {_HEADER.size} bytes, got {len(raw)}")
    _, version, n, d, prec, id_len = _HEADER.unpack_from(raw, 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 8")
    if prec not in (32, 64):
        raise FormatError(f"{path}: precision tag {prec} at byte offset 28 is not 32 or 64")
    width = prec // 8
    expected = _HEADER.size + n * d * width + 4 * n + id_len
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, file has {len(raw)}")
    off = _HEADER.size
    feats = np.frombuffer(raw, dtype="<f4" if prec == 32 else "<f8", count=n * d, offset=off).reshape(n, d)
    bad = np.flatnonzero(~np.isfinite(feats.reshape(-1)))
    if bad.size:
        raise FormatError(f"{path}: non-finite feature value at byte offset {off + int(bad[0]) * width}")
    off += n * d * width
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    ids = raw[off:].decode("utf-8").split("\n") if n else []
    native = np.float32 if prec == 32 else np.float64
    return FeatureStore(feats.astype(native), labels, ids)


def save_features_text(store: FeatureStore, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["sample_id", "label"] + [f"f{j}" for j in range(store.d_in)]) + "\n")
        for sid, lab, row in zip(store.sample_ids, store.labels, store.features):
            fh.write(",".join([sid, str(int(lab))] + [repr(float(v)) for v in row]) + "\n")


def _load_features_text(text: str) -> FeatureStore:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    d = len(lines[0].split(",")) - 2
    ids, labels, rows = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != d + 2:
            raise FormatError(f"text features line {lineno}: expected {d + 2} fields, got {len(parts)}")
        ids.append(parts[0])
        labels.append(int(parts[1]))
        rows.append([float(v) for v in parts[2:]])
    return FeatureStore(np.array(rows, dtype=np.float64).reshape(len(rows), d), np.array(labels), ids)


# --- tasks -------------------------------------------------------------------


@dataclass
class TaskTable:
    kind: str
    class_ids: list[int]
    names: list[str]
    vectors: np.ndarray
    groups: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise FormatError(f"unknown task kind {self.kind!r}")
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if len(self.class_ids) != len(set(self.class_ids)):
            raise FormatError("duplicate class ids in task table")
        if self.vectors.shape[0] != len(self.class_ids) or len(self.names) != len(self.class_ids):
            raise FormatError("task table rows, ids and names disagree in length")

    @property
    def d_task(self) -> int:
        return self.vectors.shape[1]

    def row(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise KeyError(f"class {class_id} is not in the task table") from None

    def vectors_for(self, class_ids: Sequence[int]) -> np.ndarray:
        return self.vectors[[self.row(c) for c in class_ids]]


def save_tasks(table: TaskTable, path) -> None:
    doc = {"format": TASKS_FORMAT, "version": JSON_VERSION, "kind": table.kind, "classes": []}
    for cid, name, vec in zip(table.class_ids, table.names, table.vectors):
        entry = {"id": int(cid), "name": name}
        if table.kind != "one-hot":
            entry["vector"] = [float(v) for v in vec]
        if cid in table.groups:
            entry["group"] = table.groups[cid]
        doc["classes"].append(entry)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _check_header(doc: dict, fmt: str, path) -> None:
    if doc.get("format") != fmt:
        raise FormatError(f"{path}: format field is {doc.get('format')!r}, expected {fmt!r}")
    if doc.get("version") != JSON_VERSION:
        raise FormatError(f"{path}: unsupported version {doc.get('version')!r}")


def load_tasks(path, kind: str | None = None, split: "SplitSpec | None" = None) -> TaskTable:
    """Read a task table.

    Composition files give ``attributes`` and ``objects`` embedding tables and a
    ``pairs`` list; each pair's description is the attribute vector followed by
    the object vector. One-hot tables need only ids and names.
    """
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    _check_header(doc, TASKS_FORMAT, path)
    kind = kind or doc.get("kind")
    if kind not in TASK_KINDS:
        raise FormatError(f"{path}: unknown task kind {kind!r}")
    groups: dict[int, str] = {}
    if "pairs" in doc:
        attrs, objs = doc["attributes"], doc["objects"]
        ids, names, vecs = [], [], []
        for p in doc["pairs"]:
            a, o = attrs[p["attribute"]], objs[p["object"]]
            ids.append(int(p["id"]))
            names.append(p.get("name", f"{p['attribute']} {p['object']}"))
            vecs.append(list(a) + list(o))
    else:
        entries = doc["classes"]
        ids = [int(c["id"]) for c in entries]
        names = [c.get("name", str(c["id"])) for c in entries]
        groups = {int(c["id"]): c["group"] for c in entries if "group" in c}
        if kind == "one-hot":
            vecs = np.eye(len(ids)).tolist()
        else:
            vecs = [c["vector"] for c in entries]
    widths = {len(v) for v in vecs}
    if len(widths) > 1:
        raise FormatError(f"{path}: ragged task vectors with dimensions {sorted(widths)}")
    table = TaskTable(kind, ids, names, np.array(vecs, dtype=np.float64).reshape(len(ids), -1), groups)
    if split is not None:
        validate_references(table, split)
    return table


def one_hot_table(class_ids: Sequence[int], names: Sequence[str] | None = None) -> TaskTable:
    names = list(names) if names is not None else [str(c) for c in class_ids]
    return TaskTable("one-hot", list(class_ids), names, np.eye(len(class_ids)))


# --- splits ----------------------------------------------------------------


@dataclass
class SplitSpec:
    seen: list[int]
    unseen: list[int]
    train: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    base: list[int] = field(default_factory=list)
    novel: list[int] = field(default_factory=list)

    def __post_init__(self):
        both = sorted(set(self.seen) & set(self.unseen))
        if both:
            raise FormatError(f"classes {both} are listed as both seen and unseen")
        both = sorted(set(self.base) & set(self.novel))
        if both:
            raise FormatError(f"classes {both} are listed as both base and novel")

    @property
    def zsl_enabled(self) -> bool:
        return bool(self.unseen)

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.seen) | set(self.unseen))


def save_split(split: SplitSpec, path) -> None:
    doc = {
        "format": SPLIT_FORMAT,
        "version": JSON_VERSION,
        "seen": list(split.seen),
        "unseen": list(split.unseen),
        "train": list(split.train),
        "test": list(split.test),
    }
    if split.base or split.novel:
        doc["fewshot"] = {"base": list(split.base), "novel": list(split.novel)}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_split(path) -> SplitSpec:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    _check_header(doc, SPLIT_FORMAT, path)
    few = doc.get("fewshot", {})
    return SplitSpec(
        seen=[int(c) for c in doc["seen"]],
        unseen=[int(c) for c in doc.get("unseen", [])],
        train=[str(s) for s in doc.get("train", [])],
        test=[str(s) for s in doc.get("test", [])],
        base=[int(c) for c in few.get("base", [])],
        novel=[int(c) for c in few.get("novel", [])],
    )


def validate_references(table: TaskTable, split: SplitSpec, store: FeatureStore | None = None) -> None:
    known = set(table.class_ids)
    for c in split.classes + split.base + split.novel:
        if c not in known:
            raise FormatError(f"split references class {c}, which has no task description")
    if store is not None:
        ids = set(store.sample_ids)
        for s in split.train + split.test:
            if s not in ids:
                raise FormatError(f"split references sample {s!r}, which is not in the feature store")
        allowed = set(split.classes) | set(split.base) | set(split.novel)
        idx = store.index_of()
        for s in split.test:
            lab = int(store.labels[idx[s]])
            if lab not in allowed:
                raise FormatError(f"test sample {s!r} has class {lab}, outside the split's classes")


def encode_task(class_id: int, table: TaskTable, exemplars=None) -> np.ndarray:
    """Task description for ``class_id``; for exemplar tables, the mean of the given exemplar features."""
    if table.kind == "exemplar-feature" and exemplars is not None:
        ex = np.atleast_2d(np.asarray(exemplars, dtype=np.float64))
        if ex.shape[0] < 1:
            raise ValueError("at least one exemplar is required")
        return ex.mean(axis=0)
    return table.vectors[table.row(class_id)].copy()


def exemplar_table(store: FeatureStore, class_ids: Sequence[int], sample_idx=None) -> TaskTable:
    """Class descriptions as the mean feature of each class's samples (restricted to ``sample_idx``)."""
    idx = np.arange(store.n) if sample_idx is None else np.asarray(sample_idx)
    vecs = []
    for c in class_ids:
        members = idx[store.labels[idx] == c]
        if members.size == 0:
            raise ValueError(f"class {c} has no samples to average")
        vecs.append(store.features[members].mean(axis=0))
    return TaskTable("exemplar-feature", list(class_ids), [str(c) for c in class_ids], np.array(vecs))


# --- synthetic -----------------------------------------------------------


@dataclass
class SyntheticConfig:
    n_attributes: int = 16
    n_classes_seen: int = 20
    n_classes_unseen: int = 10
    samples_per_class: int = 50
    feature_dim: int = 64
    noise: float = 0.3
    seed: int = 0
    n_groups: int = 4
    group_bits: int = 8
    test_fraction: float = 0.2
    max_retries: int = 100
    mixing_scale: float = 1.0

    def __post_init__(self):
        for name in ("n_attributes", "n_classes_seen", "samples_per_class", "feature_dim", "n_groups"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_classes_unseen < 0 or self.noise < 0:
            raise ValueError("n_classes_unseen and noise must be non-negative")
        if not 0 <= self.group_bits <= self.n_attributes:
            raise ValueError("group_bits must lie in [0, n_attributes]")


@dataclass
class SyntheticDataset:
    store: FeatureStore
    tasks: TaskTable
    split: SplitSpec
    mixing: np.ndarray

    @property
    def hierarchy(self) -> dict[int, str]:
        return self.tasks.groups


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticDataset:
    """Classes are binary attribute vectors; features are ``M @ a_c + noise``.

    The first ``group_bits`` attributes are a coarse-group prefix shared by
    all classes in that group; the rest vary per class. Classes are assigned to
    groups round-robin, and the last ``n_classes_unseen`` class ids are held out.
    """
    rng = np.random.default_rng(cfg.seed)
    n_cls = cfg.n_classes_seen + cfg.n_classes_unseen
    p, a = cfg.group_bits, cfg.n_attributes
    for _ in range(cfg.max_retries):
        prefixes = rng.integers(0, 2, size=(cfg.n_groups, p))
        suffixes = rng.integers(0, 2, size=(n_cls, a - p))
        group_of = np.arange(n_cls) % cfg.n_groups
        attrs = np.concatenate([prefixes[group_of], suffixes], axis=1)
        if len({tuple(r) for r in attrs}) == n_cls and len({tuple(r) for r in prefixes}) == cfg.n_groups:
            break
    else:
        raise ValueError(f"could not draw {n_cls} distinct attribute vectors in {cfg.max_retries} tries")

    mixing = rng.normal(0.0, cfg.mixing_scale / np.sqrt(a), size=(cfg.feature_dim, a))
    means = attrs @ mixing.T
    labels = np.repeat(np.arange(n_cls), cfg.samples_per_class)
    noise = rng.normal(0.0, 1.0, size=(labels.size, cfg.feature_dim))
    feats = means[labels] + cfg.noise * noise
    ids = [f"s{i:06d}" for i in range(labels.size)]
    store = FeatureStore(feats, labels, ids)

    seen = list(range(cfg.n_classes_seen))
    unseen = list(range(cfg.n_classes_seen, n_cls))
    n_test = int(round(cfg.test_fraction * cfg.samples_per_class))
    train, test = [], []
    for c in range(n_cls):
        members = np.flatnonzero(labels == c)
        if c in unseen:
            test += [ids[i] for i in members]
            continue
        perm = rng.permutation(members)
        test += [ids[i] for i in sorted(perm[:n_test])]
        train += [ids[i] for i in sorted(perm[n_test:])]
    split = SplitSpec(seen, unseen, sorted(train), sorted(test), base=list(seen), novel=list(unseen))
    groups = {c: f"g{group_of[c]}" for c in range(n_cls)}
    tasks = TaskTable("attribute-vector", list(range(n_cls)), [f"class{c:03d}" for c in range(n_cls)],
                      attrs.astype(np.float64), groups)
    return SyntheticDataset(store, tasks, split, mixing)


def write_dataset(ds: SyntheticDataset, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"features": out / "features.tfeat", "tasks": out / "tasks.json", "split": out / "split.json"}
    save_features(ds.store, paths["features"])
    save_tasks(ds.tasks, paths["tasks"])
    save_split(ds.split, paths["split"])
    return paths
