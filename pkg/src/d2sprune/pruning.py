"""Unstructured pruning of the model's FC layers.

AUX learns a real-valued auxiliary tensor ``a`` per layer and gates each
weight by ``a > 0``. Its update mixes a rescaled Taylor term, a rescaled
magnitude term and a constant sparsity penalty ``lam``. The ranking
baselines (MP, TP, MoP) prune the lowest-scoring fraction of every layer on
a linear ramp instead.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .nn import MaskedLayer, RecModel, ce_loss

ALGORITHMS = ("AUX", "MP", "TP", "MoP")
STE_KINDS = ("linear", "relu")


@dataclass(frozen=True)
class PruneConfig:
    algorithm: str = "AUX"
    lam: float = 1e-3
    w1: float = 0.5
    w2: float = 0.5
    aux_lr: float = 10.0
    ste: str = "linear"
    target_sparsity: float = 0.8
    prune_phase_samples: int = 50_000
    rescale: bool = True
    vanilla: bool = False
    momentum_decay: float = 0.99
    refresh_interval: int = 10_000

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.ste not in STE_KINDS:
            raise ConfigError(f"ste must be one of {STE_KINDS}, got {self.ste!r}")
        if self.lam < 0 or self.w1 < 0 or self.w2 < 0:
            raise ConfigError("lam, w1 and w2 must be non-negative")
        # AUX with w1 = w2 = 0 is a pure penalty decay; MoP has nothing to rank without a criterion
        if self.algorithm == "MoP" and self.w1 + self.w2 <= 0:
            raise ConfigError("w1 + w2 must be positive for MoP")
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ConfigError("target_sparsity must be in [0, 1)")
        if self.aux_lr <= 0:
            raise ConfigError("aux_lr must be positive")
        if not 0.0 < self.momentum_decay < 1.0:
            raise ConfigError("momentum_decay must be in (0, 1)")
        if self.prune_phase_samples < 0 or self.refresh_interval < 1:
            raise ConfigError("prune_phase_samples must be >= 0 and refresh_interval >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImportanceScore:
    scores: np.ndarray
    criterion: str


def _scores(s) -> np.ndarray:
    return s.scores if isinstance(s, ImportanceScore) else np.asarray(s, dtype=np.float64)


def apply_mask(layer: MaskedLayer) -> np.ndarray:
    return layer.effective_weight()


def taylor_scores(layer: MaskedLayer, grad_masked: np.ndarray) -> ImportanceScore:
    """First-order estimate |g_i * theta_i| of the loss change from flipping weight i."""
    grad_masked = np.asarray(grad_masked, dtype=np.float64)
    if grad_masked.shape != layer.values.shape:
        raise ConfigError("gradient shape does not match weights")
    return ImportanceScore(np.abs(grad_masked * layer.values), "taylor")


def magnitude_scores(layer: MaskedLayer) -> ImportanceScore:
    """|theta| of the live (masked) weights; pruned entries score 0."""
    return ImportanceScore(np.abs(layer.effective_weight()), "magnitude")


def aux_step(layer: MaskedLayer, grad_masked: np.ndarray, cfg: PruneConfig, lr: float | None = None) -> None:
    """One update of the auxiliary tensor; theta is left alone.

    ``grad_masked`` is dL/d(theta * 1{a>0}) for every entry, pruned or not.
    With Linear STE every entry moves; with ReLU STE only entries with a > 0.
    """
    eps = cfg.aux_lr if lr is None else lr
    theta = layer.values
    g = np.asarray(grad_masked, dtype=np.float64)
    if cfg.vanilla:
        update = g * theta + cfg.lam
    else:
        taylor = np.abs(g * theta)
        magnitude = np.abs(theta)
        if cfg.rescale:
            t_norm, m_norm = taylor.sum(), magnitude.sum()
            # all-zero norm: that term carries no ranking information, drop it
            taylor = taylor / t_norm if t_norm > 0 else np.zeros_like(taylor)
            magnitude = magnitude / m_norm if m_norm > 0 else np.zeros_like(magnitude)
        update = cfg.w1 * -taylor + cfg.w2 * -magnitude + cfg.lam
    if cfg.ste == "relu":
        update = update * (layer.aux > 0)
    layer.aux = layer.aux - eps * update


def mp_ratio_at(step: int, cfg: PruneConfig) -> float:
    """Linear ramp from 0 to target_sparsity over the pruning phase."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    if cfg.prune_phase_samples == 0:
        return cfg.target_sparsity
    return min(cfg.target_sparsity, cfg.target_sparsity * step / cfg.prune_phase_samples)


def prune_count(ratio: float, count: int) -> int:
    # guard against products like 0.29 * 100 == 28.999999999999996
    return int(math.floor(ratio * count + 1e-9))


def rank_prune(layer: MaskedLayer, scores, ratio: float) -> np.ndarray:
    """Prune the floor(ratio * count) lowest-scoring entries; keep the rest.

    Ties go to the lower flat index first. ``aux`` is overwritten with the
    sentinels -1 (pruned) / +1 (kept). Returns the new boolean mask.
    """
    if not 0.0 <= ratio < 1.0:
        raise ConfigError("ratio must be in [0, 1)")
    s = _scores(scores)
    if s.shape != layer.values.shape:
        raise ConfigError("score shape does not match weights")
    k = prune_count(ratio, s.size)
    if k == 0:
        return layer.mask
    order = np.argsort(s.ravel(), kind="stable")
    keep = np.ones(s.size, dtype=bool)
    keep[order[:k]] = False
    layer.aux = np.where(keep, 1.0, -1.0).reshape(s.shape)
    return layer.mask


def momentum_update(layer: MaskedLayer, grad_masked: np.ndarray, decay: float) -> None:
    if not 0.0 < decay < 1.0:
        raise ConfigError("decay must be in (0, 1)")
    layer.momentum = decay * layer.momentum + (1.0 - decay) * np.asarray(grad_masked)


def mop_importance(layer: MaskedLayer, w1: float, w2: float) -> ImportanceScore:
    """w1 * |theta| / ||theta||_1 + w2 * |s| / ||s||_1, norms taken per layer."""
    mag = np.abs(layer.values)
    m_norm = mag.sum()
    if m_norm <= 0:
        raise DataError("mop_importance needs a layer with nonzero weights")
    score = w1 * mag / m_norm
    mom = np.abs(layer.momentum)
    s_norm = mom.sum()
    if s_norm > 0:
        score = score + w2 * mom / s_norm
    return ImportanceScore(score, "mop")


def mop_refresh(layer: MaskedLayer, cfg: PruneConfig) -> np.ndarray:
    """Rebuild the mask from scratch: keep the top (1 - target) by MoP importance."""
    return rank_prune(layer, mop_importance(layer, cfg.w1, cfg.w2), cfg.target_sparsity)


def finetune_step_fixed_mask(model: RecModel, batch, lr: float, eps: float = 1e-8) -> float:
    """Adagrad step on live weights only; masks and aux stay frozen.

    Pruned entries get a zero weight gradient, so Adagrad leaves both their
    value and accumulator bit-identical.
    """
    return model.train_step(batch, lr, eps)


def sparsity(obj) -> float:
    """Pruned fraction of a layer, or of all masked layers of a model weighted by size."""
    layers = [obj] if isinstance(obj, MaskedLayer) else (
        obj.masked_layers() if isinstance(obj, RecModel) else list(obj))
    total = sum(l.values.size for l in layers)
    if total == 0:
        return 0.0
    return sum(int((l.aux <= 0).sum()) for l in layers) / total


def layer_sparsities(model: RecModel) -> list[float]:
    return [sparsity(l) for l in model.masked_layers()]


class Pruner:
    """Per-batch driver for one pruning algorithm during the pruning phase.

    ``step`` runs forward/backward, moves the mask, then applies Adagrad to
    the live weights of the *updated* mask.
    """

    def __init__(self, cfg: PruneConfig, lr: float, eps: float = 1e-8):
        self.cfg = cfg
        self.lr = lr
        self.eps = eps
        self.seen = 0
        self._taylor_ema: dict[int, np.ndarray] = {}

    def _update_mask(self, model: RecModel, n: int) -> None:
        cfg = self.cfg
        ratio = mp_ratio_at(self.seen + n, cfg)
        for i, layer in enumerate(model.masked_layers()):
            g = layer.grad_masked
            if cfg.algorithm == "AUX":
                aux_step(layer, g, cfg)
            elif cfg.algorithm == "MP":
                rank_prune(layer, magnitude_scores(layer), ratio)
            elif cfg.algorithm == "TP":
                score = np.abs(g * layer.effective_weight())
                prev = self._taylor_ema.get(i)
                d = cfg.momentum_decay
                ema = score if prev is None else d * prev + (1.0 - d) * score
                self._taylor_ema[i] = ema
                # already-pruned entries stay out: their effective weight is 0
                rank_prune(layer, ema * layer.mask, ratio)
            else:
                momentum_update(layer, g, cfg.momentum_decay)
                rank_prune(layer, mop_importance(layer, cfg.w1, cfg.w2), ratio)

    def step(self, model: RecModel, batch) -> float:
        probs = model.forward(batch)
        model.backward(batch)
        self._update_mask(model, len(batch))
        for layer in model.masked_layers():
            layer.grad = layer.grad_masked * layer.mask
        model.apply_adagrad(self.lr, self.eps)
        self.seen += len(batch)
        return ce_loss(probs, batch.labels)


def mop_adapt_step(model: RecModel, batch, cfg: PruneConfig, lr: float, eps: float,
                   refresh: bool) -> None:
    """Serving-time MoP: track momentum every batch, rebuild masks on refresh."""
    model.forward(batch)
    model.backward(batch)
    for layer in model.masked_layers():
        momentum_update(layer, layer.grad_masked, cfg.momentum_decay)
        if refresh:
            mop_refresh(layer, cfg)
        layer.grad = layer.grad_masked * layer.mask
    model.apply_adagrad(lr, eps)


# -- mask bitset files ---------------------------------------------------------

def export_masks(model: RecModel, path) -> Path:
    """Store every masked layer's keep-mask as a packed bitset (row-major, MSB first)."""
    arrays = {}
    for name, layer in zip(model.layer_names(), model.layers):
        if isinstance(layer, MaskedLayer):
            arrays[f"{name}.bits"] = np.packbits(layer.mask.ravel())
            arrays[f"{name}.shape"] = np.array(layer.values.shape, dtype=np.int64)
    path = Path(path)
    np.savez(path, **arrays)
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def import_masks(path) -> dict[str, np.ndarray]:
    out = {}
    with np.load(path, allow_pickle=False) as z:
        for key in z.files:
            if key.endswith(".bits"):
                name = key[: -len(".bits")]
                shape = tuple(z[f"{name}.shape"])
                count = int(np.prod(shape))
                out[name] = np.unpackbits(z[key], count=count).astype(bool).reshape(shape)
    return out
