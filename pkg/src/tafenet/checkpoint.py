"""Checkpoint container.

Little-endian layout::

    8 bytes   magic b"TAFECKPT"
    u32       version (1)
    u64       manifest length L
    L bytes   manifest, UTF-8 JSON with sorted keys
    u32       block count B
    B blocks  u16 name length, name (UTF-8), u8 ndim, ndim x u32 extents,
              then prod(extents) float32 values, row-major

The manifest holds ``architecture`` (model hyperparameters) and, when saved
with optimizer state, ``optimizer`` (kind, step, learning rates, schedule
progress). Optimizer buffers are stored as blocks named
``optim.<buffer>.<parameter>``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from tafenet.optim import OptimizerState

MAGIC = b"TAFECKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    meta = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(meta)), meta, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:8]!r})")
    off = 8
    try:
        version, mlen = struct.unpack_from("<IQ", raw, off)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off += 12
        manifest = json.loads(raw[off : off + mlen].decode("utf-8"))
        off += mlen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + klen].decode("utf-8")
            off += klen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 4 * size > len(raw):
                raise CheckpointError(f"{path}: block {name!r} truncated at byte offset {off}")
            arrays[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            off += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated at byte offset {off}: {exc}") from None
    return arrays, manifest


def save_model(path, net, opt_state: OptimizerState | None = None, extra: dict | None = None) -> None:
    arrays = {name: p.data for name, p in net.parameters().items()}
    manifest = {"architecture": net.manifest()}
    if opt_state is not None:
        manifest["optimizer"] = {
            "kind": opt_state.kind,
            "step": opt_state.step,
            "group_lr": opt_state.group_lr,
            "base_lr": opt_state.base_lr,
            "groups": opt_state.groups,
            "betas": list(opt_state.betas),
            "eps": opt_state.eps,
            "momentum": opt_state.momentum,
            "milestones_passed": opt_state.milestones_passed,
            "last_time": opt_state.last_time,
        }
        for buf, slots in opt_state.buffers.items():
            for name, arr in slots.items():
                arrays[f"optim.{buf}.{name}"] = arr
    if extra:
        manifest.update(extra)
    save(path, arrays, manifest)


def restore_optimizer(arrays: dict[str, np.ndarray], manifest: dict) -> OptimizerState | None:
    meta = manifest.get("optimizer")
    if meta is None:
        return None
    state = OptimizerState(
        kind=meta["kind"], group_lr=dict(meta["group_lr"]), groups={k: list(v) for k, v in meta["groups"].items()},
        betas=tuple(meta["betas"]), eps=meta["eps"], momentum=meta["momentum"], step=meta["step"],
        base_lr=dict(meta["base_lr"]), milestones_passed=meta["milestones_passed"], last_time=meta["last_time"],
    )
    for key, arr in arrays.items():
        if key.startswith("optim."):
            _, buf, name = key.split(".", 2)
            state.buffers.setdefault(buf, {})[name] = arr.copy()
    return state


def model_arrays(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v for k, v in arrays.items() if not k.startswith("optim.")}
