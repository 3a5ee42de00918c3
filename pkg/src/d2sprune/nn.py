"""Miniature DLRM-style click model with hand-written gradients.

Layout follows the usual DLRM recipe: a bottom MLP over dense features,
mean-pooled embedding lookups for the categorical features, pairwise dot
products between all of those vectors, and a top MLP that emits one logit.
Everything is float64 and deterministic given the config seed.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, StateError

PROB_CLAMP = 1e-7
SNAPSHOT_VERSION = 1


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return (z > 0).astype(np.float64)


def _tanh_grad(z):
    return 1.0 - np.tanh(z) ** 2


def _identity(z):
    return z


_ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
    "identity": (_identity, np.ones_like),
}


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class DenseParam:
    """A fully-connected layer: ``values`` is (out, in), plus bias and Adagrad state."""

    values: np.ndarray
    bias: np.ndarray
    grad: np.ndarray = None
    bias_grad: np.ndarray = None
    acc: np.ndarray = None
    bias_acc: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.values.ndim != 2 or self.bias.shape != (self.values.shape[0],):
            raise ConfigError(f"bad layer shapes {self.values.shape} / {self.bias.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.bias_grad is None:
            self.bias_grad = np.zeros_like(self.bias)
        if self.acc is None:
            self.acc = np.zeros_like(self.values)
        if self.bias_acc is None:
            self.bias_acc = np.zeros_like(self.bias)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, **kw):
        return cls(glorot_uniform(rng, n_in, n_out, (n_out, n_in)), np.zeros(n_out), **kw)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def effective_weight(self) -> np.ndarray:
        return self.values

    def set_weight_grad(self, grad_effective: np.ndarray) -> None:
        self.grad = grad_effective


@dataclass
class MaskedLayer(DenseParam):
    """Layer whose weights are gated by the sign of a latent auxiliary tensor.

    ``values`` holds theta and is never destroyed by masking; pruned entries
    keep their stored value so that a later unprune restores it.
    """

    aux: np.ndarray = None
    momentum: np.ndarray = None
    grad_masked: np.ndarray = None
    aux_init: float = 0.5

    def __post_init__(self):
        super().__post_init__()
        if self.aux is None:
            self.aux = np.full_like(self.values, self.aux_init)
        if self.momentum is None:
            self.momentum = np.zeros_like(self.values)
        if self.grad_masked is None:
            self.grad_masked = np.zeros_like(self.values)

    @property
    def theta(self) -> np.ndarray:
        return self.values

    @property
    def mask(self) -> np.ndarray:
        return self.aux > 0

    def effective_weight(self) -> np.ndarray:
        return self.values * self.mask

    def set_weight_grad(self, grad_effective: np.ndarray) -> None:
        # chain rule through theta * 1{a>0}
        self.grad_masked = grad_effective
        self.grad = grad_effective * self.mask

    def reset_mask_state(self) -> None:
        self.aux = np.full_like(self.values, self.aux_init)
        self.momentum = np.zeros_like(self.values)


@dataclass
class EmbeddingTable:
    table: np.ndarray
    acc: np.ndarray = None
    grad_rows: np.ndarray = None
    grad_values: np.ndarray = None

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.acc is None:
            self.acc = np.zeros_like(self.table)
        if self.grad_rows is None:
            self.grad_rows = np.zeros(0, dtype=np.int64)
            self.grad_values = np.zeros((0, self.dim))

    @classmethod
    def init(cls, rng: np.random.Generator, rows: int, dim: int):
        return cls(glorot_uniform(rng, rows, dim, (rows, dim)))

    @property
    def rows(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def pool(self, ids: np.ndarray) -> np.ndarray:
        """Mean-pool rows for an (n, m) id array -> (n, dim)."""
        if ids.size and (ids.min() < 0 or ids.max() >= self.rows):
            raise DataError(f"entity id out of range for table with {self.rows} rows")
        return self.table[ids].mean(axis=1)


@dataclass
class Batch:
    dense: np.ndarray
    categorical: tuple
    labels: np.ndarray
    virtual_time: int = 0

    def __post_init__(self):
        self.dense = np.asarray(self.dense, dtype=np.float64)
        self.categorical = tuple(np.asarray(c, dtype=np.int64) for c in self.categorical)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        n = self.dense.shape[0]
        if self.labels.shape != (n,) or any(c.ndim != 2 or c.shape[0] != n for c in self.categorical):
            raise DataError("batch arrays disagree on example count")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError("labels must be 0 or 1")

    def __len__(self) -> int:
        return self.dense.shape[0]

    def slice(self, start: int, stop: int) -> "Batch":
        return Batch(
            self.dense[start:stop],
            tuple(c[start:stop] for c in self.categorical),
            self.labels[start:stop],
            self.virtual_time + start,
        )

    @classmethod
    def concat(cls, batches) -> "Batch":
        batches = list(batches)
        return cls(
            np.concatenate([b.dense for b in batches]),
            tuple(np.concatenate(cs) for cs in zip(*(b.categorical for b in batches))),
            np.concatenate([b.labels for b in batches]),
            batches[0].virtual_time,
        )


@dataclass(frozen=True)
class ModelConfig:
    dense_dim: int = 16
    bottom: tuple = (32, 16)
    table_rows: tuple = (1000, 1000, 1000, 1000)
    emb_dim: int = 16
    top: tuple = (64, 32, 1)
    activation: str = "relu"
    masked: bool = True
    aux_init: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bottom", tuple(int(w) for w in self.bottom))
        object.__setattr__(self, "top", tuple(int(w) for w in self.top))
        object.__setattr__(self, "table_rows", tuple(int(r) for r in self.table_rows))
        if not self.bottom or not self.top or not self.table_rows:
            raise ConfigError("bottom, top and table_rows must be non-empty")
        if self.bottom[-1] != self.emb_dim:
            raise ConfigError(
                f"bottom MLP output width {self.bottom[-1]} must equal emb_dim {self.emb_dim}"
            )
        if self.top[-1] != 1:
            raise ConfigError("top MLP must end in a single logit")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def num_tables(self) -> int:
        return len(self.table_rows)

    @property
    def interaction_width(self) -> int:
        # bottom output + E embeddings interact: E+1 vectors, (E+1)E/2 distinct pairs
        e = self.num_tables
        return self.emb_dim + e * (e + 1) // 2

    def to_dict(self) -> dict:
        return asdict(self)


def dot_interaction(vectors) -> np.ndarray:
    """Concatenate the first vector with all i<j pairwise dot products.

    Pairs are ordered row-major over the upper triangle:
    (0,1), (0,2), ..., (0,F-1), (1,2), ..., (F-2,F-1).
    """
    vecs = [np.asarray(v, dtype=np.float64) for v in vectors]
    if len(vecs) < 2:
        raise ConfigError("dot interaction needs at least two vectors")
    if len({v.shape for v in vecs}) != 1 or vecs[0].ndim != 1:
        raise ConfigError("interaction vectors must be 1-D and equal length")
    out = _interact(np.stack(vecs)[None])
    return out[0]


def _interact(stacked: np.ndarray) -> np.ndarray:
    # stacked: (n, F, D)
    f = stacked.shape[1]
    iu, ju = np.triu_indices(f, k=1)
    gram = stacked @ stacked.transpose(0, 2, 1)
    return np.concatenate([stacked[:, 0, :], gram[:, iu, ju]], axis=1)


def ce_loss(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise DataError(f"length mismatch: {probs.shape} vs {labels.shape}")
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))))


def adagrad_step(param, lr: float, eps: float = 1e-8) -> None:
    """In-place Adagrad: ``acc += g**2; value -= lr * g / (sqrt(acc) + eps)``.

    Works on a :class:`DenseParam` (weights and bias) or an
    :class:`EmbeddingTable` (only the rows touched by the last backward).
    """
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    if isinstance(param, EmbeddingTable):
        rows, g = param.grad_rows, param.grad_values
        if rows.size == 0:
            return
        acc = param.acc[rows] + g * g
        param.acc[rows] = acc
        param.table[rows] -= lr * g / (np.sqrt(acc) + eps)
        return
    param.acc += param.grad * param.grad
    param.values -= lr * param.grad / (np.sqrt(param.acc) + eps)
    param.bias_acc += param.bias_grad * param.bias_grad
    param.bias -= lr * param.bias_grad / (np.sqrt(param.bias_acc) + eps)


class RecModel:
    """Bottom MLP + embeddings + dot interaction + top MLP."""

    def __init__(self, config: ModelConfig, bottom=None, embeddings=None, top=None, time: int = 0):
        self.config = config
        self.time = time
        self._act, self._dact = _ACTIVATIONS[config.activation]
        if bottom is None:
            rng = np.random.default_rng(config.seed)
            layer_cls = MaskedLayer if config.masked else DenseParam
            kw = {"aux_init": config.aux_init} if config.masked else {}
            widths = (config.dense_dim,) + config.bottom
            bottom = [layer_cls.init(rng, i, o, **kw) for i, o in zip(widths[:-1], widths[1:])]
            embeddings = [EmbeddingTable.init(rng, r, config.emb_dim) for r in config.table_rows]
            widths = (config.interaction_width,) + config.top
            top = [layer_cls.init(rng, i, o, **kw) for i, o in zip(widths[:-1], widths[1:])]
        self.bottom = list(bottom)
        self.embeddings = list(embeddings)
        self.top = list(top)
        self._check_shapes()
        self._cache = None

    def _check_shapes(self) -> None:
        cfg = self.config
        expect_b = list(zip((cfg.dense_dim,) + cfg.bottom[:-1], cfg.bottom))
        expect_t = list(zip((cfg.interaction_width,) + cfg.top[:-1], cfg.top))
        got_b = [(l.shape[1], l.shape[0]) for l in self.bottom]
        got_t = [(l.shape[1], l.shape[0]) for l in self.top]
        if got_b != expect_b or got_t != expect_t:
            raise ConfigError("layer shapes do not match model config")
        if [e.table.shape for e in self.embeddings] != [(r, cfg.emb_dim) for r in cfg.table_rows]:
            raise ConfigError("embedding shapes do not match model config")

    @property
    def layers(self) -> list:
        return self.bottom + self.top

    def masked_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, MaskedLayer)]

    def layer_names(self) -> list[str]:
        return [f"bottom.{i}" for i in range(len(self.bottom))] + [
            f"top.{i}" for i in range(len(self.top))
        ]

    def copy(self) -> "RecModel":
        cache, self._cache = self._cache, None
        try:
            return copy.deepcopy(self)
        finally:
            self._cache = cache

    # -- forward / backward -------------------------------------------------

    def _check_batch(self, batch: Batch) -> None:
        cfg = self.config
        if batch.dense.shape[1] != cfg.dense_dim:
            raise ConfigError(f"dense width {batch.dense.shape[1]} != {cfg.dense_dim}")
        if len(batch.categorical) != cfg.num_tables:
            raise ConfigError(f"{len(batch.categorical)} categorical features, expected {cfg.num_tables}")

    def _mlp(self, layers, h, final_linear: bool, weights=None):
        inputs, pre = [], []
        for i, layer in enumerate(layers):
            w = layer.effective_weight() if weights is None else weights[i]
            inputs.append(h)
            z = h @ w.T + layer.bias
            pre.append(z)
            h = z if (final_linear and i == len(layers) - 1) else self._act(z)
        return h, inputs, pre

    def embed(self, batch: Batch) -> list[np.ndarray]:
        return [t.pool(ids) for t, ids in zip(self.embeddings, batch.categorical)]

    def forward(self, batch: Batch) -> np.ndarray:
        """Return click probabilities and cache activations for :meth:`backward`."""
        self._check_batch(batch)
        z, b_in, b_pre = self._mlp(self.bottom, batch.dense, final_linear=False)
        stacked = np.stack([z] + self.embed(batch), axis=1)
        inter = _interact(stacked)
        out, t_in, t_pre = self._mlp(self.top, inter, final_linear=True)
        probs = expit(out[:, 0])
        self._cache = dict(batch=batch, b_in=b_in, b_pre=b_pre, stacked=stacked,
                           t_in=t_in, t_pre=t_pre, probs=probs)
        return probs

    def predict(self, batch: Batch) -> np.ndarray:
        """Forward pass that leaves any cached activations untouched."""
        cache = self._cache
        try:
            return self.forward(batch)
        finally:
            self._cache = cache

    def loss(self, batch: Batch) -> float:
        return ce_loss(self.predict(batch), batch.labels)

    def _mlp_backward(self, layers, grad_out, inputs, pre, final_linear: bool):
        for i in reversed(range(len(layers))):
            layer = layers[i]
            if not (final_linear and i == len(layers) - 1):
                grad_out = grad_out * self._dact(pre[i])
            layer.set_weight_grad(grad_out.T @ inputs[i])
            layer.bias_grad = grad_out.sum(axis=0)
            grad_out = grad_out @ layer.effective_weight()
        return grad_out

    def backward(self, batch: Batch) -> None:
        """Fill gradients of the mean CE loss for the batch last passed to forward."""
        c = self._cache
        if c is None or c["batch"] is not batch:
            raise StateError("backward called without a matching forward")
        n = len(batch)
        d_logit = ((c["probs"] - batch.labels) / n)[:, None]
        d_inter = self._mlp_backward(self.top, d_logit, c["t_in"], c["t_pre"], final_linear=True)

        stacked = c["stacked"]
        f, d = stacked.shape[1], stacked.shape[2]
        iu, ju = np.triu_indices(f, k=1)
        d_gram = np.zeros((n, f, f))
        d_gram[:, iu, ju] = d_inter[:, d:]
        d_stacked = (d_gram + d_gram.transpose(0, 2, 1)) @ stacked
        d_stacked[:, 0, :] += d_inter[:, :d]

        self._mlp_backward(self.bottom, d_stacked[:, 0, :], c["b_in"], c["b_pre"], final_linear=False)

        for k, (table, ids) in enumerate(zip(self.embeddings, batch.categorical)):
            m = ids.shape[1]
            rows, inv = np.unique(ids.ravel(), return_inverse=True)
            g = np.zeros((rows.size, d))
            np.add.at(g, inv, np.repeat(d_stacked[:, k + 1, :] / m, m, axis=0))
            table.grad_rows, table.grad_values = rows, g

    def apply_adagrad(self, lr: float, eps: float = 1e-8) -> None:
        for layer in self.layers:
            adagrad_step(layer, lr, eps)
        for table in self.embeddings:
            adagrad_step(table, lr, eps)

    def train_step(self, batch: Batch, lr: float, eps: float = 1e-8) -> float:
        """Forward, backward and one Adagrad step; returns the pre-step batch loss."""
        probs = self.forward(batch)
        self.backward(batch)
        self.apply_adagrad(lr, eps)
        return ce_loss(probs, batch.labels)

    # -- flat parameter views ------------------------------------------------

    def named_parameters(self):
        """Yield (name, array) for every trainable tensor in a fixed order."""
        for prefix, layers in (("bottom", self.bottom), ("top", self.top)):
            for i, layer in enumerate(layers):
                yield f"{prefix}.{i}.values", layer.values
                yield f"{prefix}.{i}.bias", layer.bias
        for i, table in enumerate(self.embeddings):
            yield f"emb.{i}.table", table.table

    def param_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p in self.named_parameters()])

    def load_param_vector(self, vec: np.ndarray) -> None:
        offset = 0
        for _, p in self.named_parameters():
            p[...] = vec[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != vec.size:
            raise ConfigError("parameter vector length mismatch")


# -- snapshots ----------------------------------------------------------------

def _state_arrays(model: RecModel) -> dict:
    out = {}
    for prefix, layers in (("bottom", model.bottom), ("top", model.top)):
        for i, layer in enumerate(layers):
            key = f"{prefix}.{i}"
            out[f"{key}.values"] = layer.values
            out[f"{key}.bias"] = layer.bias
            out[f"{key}.acc"] = layer.acc
            out[f"{key}.bias_acc"] = layer.bias_acc
            if isinstance(layer, MaskedLayer):
                out[f"{key}.aux"] = layer.aux
                out[f"{key}.momentum"] = layer.momentum
    for i, table in enumerate(model.embeddings):
        out[f"emb.{i}.table"] = table.table
        out[f"emb.{i}.acc"] = table.acc
    return out


def save_snapshot(model: RecModel, path, extra: dict | None = None) -> Path:
    """Write a versioned ``.npz`` container that round-trips bit-exactly.

    Keys: ``format_version``, ``config`` (JSON echo of ModelConfig), ``time``,
    ``extra`` (JSON), and one array per tensor named ``{bottom|top}.{i}.{values,
    bias, acc, bias_acc, aux, momentum}`` and ``emb.{i}.{table, acc}``.
    """
    path = Path(path)
    arrays = _state_arrays(model)
    np.savez(
        path,
        format_version=np.array(SNAPSHOT_VERSION),
        config=np.array(json.dumps(model.config.to_dict())),
        time=np.array(model.time, dtype=np.int64),
        extra=np.array(json.dumps(extra or {})),
        **arrays,
    )
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def load_snapshot(path) -> tuple[RecModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != SNAPSHOT_VERSION:
            raise DataError(f"unsupported snapshot version {version}")
        config = ModelConfig(**json.loads(str(z["config"])))
        arrays = {k: z[k].copy() for k in z.files}

    def layer(key):
        kw = dict(values=arrays[f"{key}.values"], bias=arrays[f"{key}.bias"],
                  acc=arrays[f"{key}.acc"], bias_acc=arrays[f"{key}.bias_acc"])
        if f"{key}.aux" in arrays:
            return MaskedLayer(aux=arrays[f"{key}.aux"], momentum=arrays[f"{key}.momentum"],
                               aux_init=config.aux_init, **kw)
        return DenseParam(**kw)

    bottom = [layer(f"bottom.{i}") for i in range(len(config.bottom))]
    top = [layer(f"top.{i}") for i in range(len(config.top))]
    embeddings = [EmbeddingTable(arrays[f"emb.{i}.table"], acc=arrays[f"emb.{i}.acc"])
                  for i in range(config.num_tables)]
    model = RecModel(config, bottom, embeddings, top, time=int(arrays["time"]))
    return model, json.loads(str(arrays["extra"]))
