"""Independent reference implementations used by the tests.

Nothing here calls into the model's vectorized code: the forward pass is
written as scalar loops over Python floats and reads only raw parameter
arrays. Running this file regenerates ``data/frozen_oracles.json``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

FROZEN = Path(__file__).parent / "data" / "frozen_oracles.json"


def _matvec(w, b, x, mask=None):
    out = []
    for i in range(len(w)):
        s = float(b[i])
        for j in range(len(x)):
            if mask is None or mask[i][j] > 0:
                s += float(w[i][j]) * x[j]
        out.append(s)
    return out


def _relu(v):
    return [z if z > 0 else 0.0 for z in v]


def scalar_forward(model, batch) -> list[float]:
    """Click probability per example via explicit loops (ReLU, mean pooling)."""
    def layer_args(layer):
        aux = getattr(layer, "aux", None)
        return layer.values.tolist(), layer.bias.tolist(), None if aux is None else aux.tolist()

    bottom = [layer_args(l) for l in model.bottom]
    top = [layer_args(l) for l in model.top]
    tables = [t.table.tolist() for t in model.embeddings]
    probs = []
    for n in range(batch.dense.shape[0]):
        h = batch.dense[n].tolist()
        for w, b, a in bottom:
            h = _relu(_matvec(w, b, h, a))
        vecs = [h]
        for t, ids in zip(tables, batch.categorical):
            row_ids = ids[n].tolist()
            dim = len(t[0])
            vecs.append([sum(t[r][k] for r in row_ids) / len(row_ids) for k in range(dim)])
        z = list(vecs[0])
        for i in range(len(vecs)):
            for j in range(i + 1, len(vecs)):
                z.append(sum(p * q for p, q in zip(vecs[i], vecs[j])))
        for k, (w, b, a) in enumerate(top):
            z = _matvec(w, b, z, a)
            if k < len(top) - 1:
                z = _relu(z)
        probs.append(1.0 / (1.0 + math.exp(-z[0])))
    return probs


def scalar_ce(probs, labels) -> float:
    total = 0.0
    for p, y in zip(probs, labels):
        p = min(max(p, 1e-7), 1 - 1e-7)
        total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    return total / len(probs)


def finite_difference(loss_fn, array: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``array`` (mutated in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + h
        up = loss_fn()
        array[idx] = old - h
        down = loss_fn()
        array[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def brute_force_deltas(model, layer, batch) -> np.ndarray:
    """|L(theta with weight i zeroed) - L(theta)| for every weight of ``layer``."""
    base = scalar_ce(scalar_forward(model, batch), batch.labels.tolist())
    out = np.zeros_like(layer.values)
    for idx in np.ndindex(layer.values.shape):
        old = layer.values[idx]
        layer.values[idx] = 0.0
        out[idx] = abs(scalar_ce(scalar_forward(model, batch), batch.labels.tolist()) - base)
        layer.values[idx] = old
    return out


def aux_step_reference(a, theta, g, w1, w2, lam, eps):
    """Rescaled auxiliary update on plain lists, per-layer L1 norms."""
    t = [abs(x * y) for x, y in zip(g, theta)]
    m = [abs(x) for x in theta]
    st, sm = sum(t), sum(m)
    g1 = [-x / st if st > 0 else 0.0 for x in t]
    g2 = [-x / sm if sm > 0 else 0.0 for x in m]
    return [ai - eps * w1 * p - eps * w2 * q - eps * lam for ai, p, q in zip(a, g1, g2)]


# -- frozen fixture ------------------------------------------------------------

def forward_fixture():
    """Seed-0 toy config and a fixed 4-example batch."""
    from d2sprune.nn import Batch, ModelConfig, RecModel

    cfg = ModelConfig(dense_dim=3, bottom=(4, 2), table_rows=(6, 5), emb_dim=2, top=(3, 1), seed=0)
    model = RecModel(cfg)
    rng = np.random.default_rng(12345)
    # nonzero biases keep every ReLU live; a partial mask exercises gating
    for layer in model.layers:
        layer.bias[...] = rng.uniform(0.1, 0.5, size=layer.bias.shape)
        layer.aux = rng.choice([-1.0, 0.0, 0.5, 1.0], size=layer.aux.shape, p=[0.2, 0.1, 0.3, 0.4])
    batch = Batch(
        rng.standard_normal((4, 3)),
        (rng.integers(0, 6, size=(4, 2)), rng.integers(0, 5, size=(4, 3))),
        np.array([1.0, 0.0, 1.0, 0.0]),
    )
    return model, batch


def main():
    model, batch = forward_fixture()
    frozen = {"forward_seed0_probs": scalar_forward(model, batch)}
    FROZEN.write_text(json.dumps(frozen, indent=2) + "\n")
    print(f"wrote {FROZEN}")


if __name__ == "__main__":
    main()
