"""Meta-learner and prediction network.

The meta-learner maps a task description to a task embedding through a small
FC stack, then one affine generator per dynamic layer turns that embedding
into a gain vector. Each dynamic layer owns a shared weight; the task only
rescales its output channels, so per task a layer costs ``n_out`` generated
values instead of a full weight matrix.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from tafenet import tensor as tc
from tafenet.tensor import ShapeError, Tensor

SMALL_TASK_COUNT = 32


class GainsNotInstalled(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d_in: int
    d_task: int
    widths: tuple[int, ...] = (2048, 2048, 2048)
    embed_hidden: int = 2048
    embed_depth: int | None = None
    gen_init_scale: float = 1e-2
    task_kind: str = "attribute-vector"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    @property
    def d_embed(self) -> int:
        return self.widths[-1]

    def resolved_depth(self, n_train_tasks: int | None = None) -> int:
        if self.embed_depth is not None:
            return int(self.embed_depth)
        if n_train_tasks is not None and n_train_tasks < SMALL_TASK_COUNT:
            return 2
        return 3

    def manifest(self) -> dict:
        out = asdict(self)
        out["widths"] = list(self.widths)
        return out


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class FCStack:
    """Affine layers with relu between them and none after the last."""

    def __init__(self, sizes: Sequence[int], rng, dtype, prefix: str):
        self.sizes = list(sizes)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (m, n) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / m)
            self.weights.append(Tensor(_uniform(rng, bound, (m, n), dtype), True, f"{prefix}.{i}.weight", dtype))
            self.biases.append(Tensor(np.zeros(n), True, f"{prefix}.{i}.bias", dtype))

    @property
    def depth(self) -> int:
        return len(self.weights)

    def __call__(self, t: Tensor) -> Tensor:
        if t.shape[-1] != self.sizes[0]:
            raise ShapeError(f"task description has dimension {t.shape[-1]}, embedding network expects {self.sizes[0]}")
        single = t.ndim == 1
        h = tc.reshape(t, (1, t.shape[0])) if single else t
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = tc.matmul(h, w) + tc.broadcast_to(b, (h.shape[0], w.shape[1]))
            if i < self.depth - 1:
                h = tc.relu(h)
        return tc.reshape(h, (h.shape[1],)) if single else h

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


class FactorizedFCLayer:
    """``(x @ W_s) * gains + bias`` with a shared bias and per-task gains."""

    def __init__(self, m: int, n: int, rng, dtype, prefix: str):
        bound = np.sqrt(6.0 / m)
        self.shared = Tensor(_uniform(rng, bound, (m, n), dtype), True, f"{prefix}.shared", dtype)
        self.bias = Tensor(np.zeros(n), True, f"{prefix}.bias", dtype)
        self.gains: Tensor | None = None

    @property
    def n_out(self) -> int:
        return self.shared.shape[1]

    def install(self, gains: Tensor) -> None:
        if gains.shape != (self.n_out,):
            raise ShapeError(f"gains of shape {gains.shape} for a layer with {self.n_out} outputs")
        self.gains = gains

    def clear(self) -> None:
        self.gains = None

    def forward(self, x: Tensor) -> Tensor:
        if self.gains is None:
            raise GainsNotInstalled(f"{self.shared.name}: no task gains installed")
        squeeze = x.ndim == 1
        if squeeze:
            x = tc.reshape(x, (1, x.shape[0]))
        if x.shape[1] != self.shared.shape[0]:
            raise ShapeError(f"layer expects input width {self.shared.shape[0]}, got {x.shape[1]}")
        out_shape = (x.shape[0], self.n_out)
        h = tc.matmul(x, self.shared)
        h = h * tc.broadcast_to(self.gains, out_shape) + tc.broadcast_to(self.bias, out_shape)
        return tc.reshape(h, (self.n_out,)) if squeeze else h

    def materialized_weight(self) -> np.ndarray:
        """``W_s @ diag(gains)`` as a dense array (used as a reference only)."""
        if self.gains is None:
            raise GainsNotInstalled(f"{self.shared.name}: no task gains installed")
        return self.shared.data @ np.diag(self.gains.data)


class FactorizedConvLayer:
    """Shared filter bank followed by per-output-channel task gains; no bias."""

    def __init__(self, k: int, c_in: int, c_out: int, rng, dtype, prefix: str = "conv"):
        bound = np.sqrt(6.0 / (k * k * c_in))
        self.shared = Tensor(_uniform(rng, bound, (k, k, c_in, c_out), dtype), True, f"{prefix}.shared", dtype)
        self.gains: Tensor | None = None

    @property
    def c_out(self) -> int:
        return self.shared.shape[3]

    def install(self, gains: Tensor) -> None:
        if gains.shape != (self.c_out,):
            raise ShapeError(f"gains of shape {gains.shape} for a conv layer with {self.c_out} output channels")
        self.gains = gains

    def clear(self) -> None:
        self.gains = None

    def forward(self, x: Tensor) -> Tensor:
        if self.gains is None:
            raise GainsNotInstalled(f"{self.shared.name}: no task gains installed")
        if x.shape[-1] != self.shared.shape[2]:
            raise ShapeError(f"conv layer expects {self.shared.shape[2]} input channels, got {x.shape[-1]}")
        y = tc.conv2d_same(x, self.shared)
        return y * tc.broadcast_to(self.gains, y.shape)


def generated_count(layer) -> int:
    """Number of values a generator must emit per task for ``layer``."""
    if isinstance(layer, FactorizedConvLayer):
        return layer.c_out
    return layer.n_out


class TAFENet:
    def __init__(self, cfg: ModelConfig, seed: int = 0, n_train_tasks: int | None = None, dtype=None):
        self.cfg = cfg
        dtype = dtype or tc.get_dtype()
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        d_e = cfg.d_embed
        depth = cfg.resolved_depth(n_train_tasks)
        self.embed_depth = depth
        sizes = [cfg.d_task] + [cfg.embed_hidden] * (depth - 1) + [d_e]
        self.embed = FCStack(sizes, rng, dtype, "meta.embed")

        self.layers: list[FactorizedFCLayer] = []
        m = cfg.d_in
        for i, n in enumerate(cfg.widths):
            self.layers.append(FactorizedFCLayer(m, n, rng, dtype, f"pred.layer.{i}"))
            m = n

        # near-zero generator weights with unit bias: initial gains ~ 1
        self.gen_weights: list[Tensor] = []
        self.gen_biases: list[Tensor] = []
        gbound = cfg.gen_init_scale / np.sqrt(d_e)
        for i, n in enumerate(cfg.widths):
            self.gen_weights.append(Tensor(_uniform(rng, gbound, (d_e, n), dtype), True, f"meta.gen.{i}.weight", dtype))
            self.gen_biases.append(Tensor(np.ones(n), True, f"meta.gen.{i}.bias", dtype))

        cbound = 1.0 / np.sqrt(d_e)
        self.cls_weight = Tensor(_uniform(rng, cbound, (d_e,), dtype), True, "pred.cls.weight", dtype)
        self.cls_bias = Tensor(np.zeros(1), True, "pred.cls.bias", dtype)

    # -- parameter bookkeeping ------------------------------------------

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def parameters(self) -> dict[str, Tensor]:
        params = [*self.embed.parameters()]
        for w, b in zip(self.gen_weights, self.gen_biases):
            params += [w, b]
        for layer in self.layers:
            params += [layer.shared, layer.bias]
        params += [self.cls_weight, self.cls_bias]
        return {p.name: p for p in params}

    def param_groups(self) -> dict[str, list[str]]:
        names = list(self.parameters())
        return {
            "prediction": [n for n in names if n.startswith("pred.")],
            "generators": [n for n in names if n.startswith("meta.gen.")],
            "task_embedding": [n for n in names if n.startswith("meta.embed.")],
        }

    def manifest(self) -> dict:
        out = self.cfg.manifest()
        out["embed_depth"] = self.embed_depth
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr

    # -- single task ----------------------------------------------------

    def _as_input(self, v) -> Tensor:
        return v if isinstance(v, Tensor) else Tensor(v, dtype=self.dtype)

    def embed_task(self, t) -> Tensor:
        return self.embed(self._as_input(t))

    def generate_gains(self, e_t: Tensor, layer_index: int) -> Tensor:
        """Gains for dynamic layer ``layer_index`` (1-based)."""
        if not 1 <= layer_index <= self.n_layers:
            raise IndexError(f"layer index {layer_index} outside 1..{self.n_layers}")
        w = self.gen_weights[layer_index - 1]
        b = self.gen_biases[layer_index - 1]
        if e_t.ndim == 1:
            return tc.reshape(tc.matmul(tc.reshape(e_t, (1, -1)), w), (w.shape[1],)) + b
        return tc.matmul(e_t, w) + tc.broadcast_to(b, (e_t.shape[0], w.shape[1]))

    def install_task(self, t) -> Tensor:
        e_t = self.embed_task(t)
        for i, layer in enumerate(self.layers, start=1):
            layer.install(self.generate_gains(e_t, i))
        return e_t

    def clear_task(self) -> None:
        for layer in self.layers:
            layer.clear()

    def _forward_installed(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.layers:
            h = tc.relu(layer.forward(h))
        return h

    def _classify(self, tafe: Tensor) -> Tensor:
        if tafe.ndim == 1:
            return tc.sum(tafe * self.cls_weight) + tc.reshape(self.cls_bias, ())
        n = tafe.shape[0]
        logits = tc.matmul(tafe, tc.reshape(self.cls_weight, (-1, 1)))
        return tc.reshape(logits, (n,)) + tc.broadcast_to(self.cls_bias, (n,))

    def compute_tafe(self, x, t) -> Tensor:
        self.install_task(t)
        try:
            return self._forward_installed(self._as_input(x))
        finally:
            self.clear_task()

    def predict_logit(self, x, t) -> Tensor:
        return self._classify(self.compute_tafe(x, t))

    def score_matrix(self, X, tasks, chunk: int = 4096) -> np.ndarray:
        """Logits of every sample against every task: installs each task once and streams the batch."""
        X = np.asarray(X, dtype=self.dtype)
        tasks = np.asarray(tasks, dtype=self.dtype)
        if X.ndim != 2 or tasks.ndim != 2 or X.shape[0] < 1 or tasks.shape[0] < 1:
            raise ShapeError(f"score_matrix needs non-empty matrices, got {X.shape} and {tasks.shape}")
        out = np.empty((X.shape[0], tasks.shape[0]), dtype=self.dtype)
        with tc.no_grad():
            for j, t in enumerate(tasks):
                self.install_task(t)
                try:
                    for s in range(0, X.shape[0], chunk):
                        xb = Tensor(X[s : s + chunk], dtype=self.dtype)
                        out[s : s + chunk, j] = self._classify(self._forward_installed(xb)).data
                finally:
                    self.clear_task()
        return out

    # -- many tasks at once (training path) -----------------------------

    def forward_pairs(self, X, tasks) -> tuple[Tensor, Tensor, Tensor]:
        """Every (sample, task) pair in one graph.

        Returns logits (N, T), TAFEs (N, T, d_e) and task embeddings (T, d_e).
        Numerically the same as installing each task in turn.
        """
        X = self._as_input(X)
        tasks = self._as_input(tasks)
        n, n_tasks = X.shape[0], tasks.shape[0]
        E = self.embed(tasks)
        h = None
        for i, layer in enumerate(self.layers, start=1):
            gains = self.generate_gains(E, i)
            width = layer.n_out
            if h is None:
                # first layer's shared product does not depend on the task
                shared = tc.broadcast_to(tc.reshape(tc.matmul(X, layer.shared), (1, n, width)), (n_tasks, n, width))
            else:
                flat = tc.matmul(tc.reshape(h, (n_tasks * n, h.shape[2])), layer.shared)
                shared = tc.reshape(flat, (n_tasks, n, width))
            g = tc.broadcast_to(tc.reshape(gains, (n_tasks, 1, width)), (n_tasks, n, width))
            b = tc.broadcast_to(layer.bias, (n_tasks, n, width))
            h = tc.relu(shared * g + b)
        d_e = h.shape[2]
        logits = tc.matmul(tc.reshape(h, (n_tasks * n, d_e)), tc.reshape(self.cls_weight, (d_e, 1)))
        logits = tc.permute(tc.reshape(logits, (n_tasks, n)), (1, 0))
        logits = logits + tc.broadcast_to(self.cls_bias, (n, n_tasks))
        tafes = tc.permute(h, (1, 0, 2))
        return logits, tafes, E
