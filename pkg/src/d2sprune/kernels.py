"""CSR conversion of masked layers, sparse products and a small timing harness.

The CSR container and its invariants are ours; the products themselves
delegate to ``scipy.sparse`` so the timing reflects a compiled kernel.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import ConfigError, DataError
from .nn import MaskedLayer, RecModel, _ACTIVATIONS, _interact

BENCH_SIZES = (256, 1024, 4096)
BENCH_SPARSITIES = (0.5, 0.8, 0.9, 0.95)


@dataclass(frozen=True)
class CsrMatrix:
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple

    def __post_init__(self):
        rows, cols = self.shape
        if self.indptr.shape != (rows + 1,) or self.indptr[0] != 0:
            raise DataError("indptr must have rows+1 entries starting at 0")
        if np.any(np.diff(self.indptr) < 0):
            raise DataError("indptr must be nondecreasing")
        if self.indptr[-1] != self.indices.size or self.indices.size != self.data.size:
            raise DataError("nnz mismatch between indptr, indices and data")
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= cols:
                raise DataError("column index out of range")
            # strictly increasing within each row: a drop can only happen at a row start
            step = np.diff(self.indices)
            row_start = np.zeros(self.indices.size - 1, dtype=bool)
            starts = self.indptr[1:-1]
            row_start[starts[(starts > 0) & (starts < self.indices.size)] - 1] = True
            if np.any((step <= 0) & ~row_start):
                raise DataError("column indices must be strictly increasing within a row")

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for r in range(self.shape[0]):
            lo, hi = self.indptr[r], self.indptr[r + 1]
            out[r, self.indices[lo:hi]] = self.data[lo:hi]
        return out


def csr_from_mask(values: np.ndarray, mask: np.ndarray) -> CsrMatrix:
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)  # row-major order, columns ascending per row
    indptr = np.zeros(values.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=values.shape[0]), out=indptr[1:])
    return CsrMatrix(indptr, cols.astype(np.int64), values[rows, cols].copy(), values.shape)


def to_csr(layer: MaskedLayer) -> CsrMatrix:
    """Entries with a > 0, stored with their theta values (a zero theta stays stored)."""
    return csr_from_mask(layer.values, layer.mask)


def _as_scipy(m):
    return m.to_scipy() if isinstance(m, CsrMatrix) else m


def spmv(m: CsrMatrix, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != m.shape[1]:
        raise ConfigError(f"vector of length {x.shape} does not match matrix {m.shape}")
    return _as_scipy(m) @ x


def spmm(m: CsrMatrix, x) -> np.ndarray:
    """m @ x for a dense (cols, k) right-hand side."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != m.shape[1]:
        raise ConfigError(f"matrix of shape {x.shape} does not match {m.shape}")
    return np.asarray(_as_scipy(m) @ x)


def dense_masked_oracle(values, mask, x) -> np.ndarray:
    return (np.asarray(values) * np.asarray(mask, dtype=bool)) @ np.asarray(x, dtype=np.float64)


def flops(rows: int, cols: int, nnz: int | None = None) -> int:
    """Multiply-add count of one matvec; biases are excluded."""
    return rows * cols if nnz is None else nnz


def flop_ratio(mask) -> Fraction:
    mask = np.asarray(mask, dtype=bool)
    return Fraction(flops(*mask.shape, nnz=int(mask.sum())), flops(*mask.shape))


def sparse_forward(model: RecModel, batch) -> np.ndarray:
    """Inference with every masked layer run as a CSR product.

    Same topology as ``RecModel.predict``; only the weight products change.
    """
    cfg = model.config
    model._check_batch(batch)
    act = _ACTIVATIONS[cfg.activation][0]

    def mlp(layers, h, final_linear):
        for i, layer in enumerate(layers):
            if isinstance(layer, MaskedLayer):
                z = spmm(to_csr(layer), h.T).T + layer.bias
            else:
                z = h @ layer.values.T + layer.bias
            last = i == len(layers) - 1
            h = z if (last and final_linear) else act(z)
        return h

    x = mlp(model.bottom, batch.dense, final_linear=False)
    pooled = [x] + [model.embeddings[j].pool(ids) for j, ids in enumerate(batch.categorical)]
    z = _interact(np.stack(pooled, axis=1))
    logit = mlp(model.top, z, final_linear=True)[:, 0]
    return expit(logit)


@dataclass
class BenchResult:
    size: int
    sparsity: float
    dense_time: float
    sparse_time: float
    speedup: float
    flops_dense: int
    flops_sparse: int
    pruned: int = 0

    @property
    def flop_ratio(self) -> Fraction:
        return Fraction(self.flops_sparse, self.flops_dense)

    @property
    def realized_sparsity(self) -> Fraction:
        # the requested sparsity rounded down to a whole number of pruned entries
        return Fraction(self.pruned, self.size * self.size)


def random_mask(rng, shape, sparsity: float) -> np.ndarray:
    """Exactly floor(sparsity * count) entries pruned, chosen uniformly."""
    count = int(np.prod(shape))
    k = int(np.floor(sparsity * count + 1e-9))
    keep = np.ones(count, dtype=bool)
    keep[rng.choice(count, size=k, replace=False)] = False
    return keep.reshape(shape)


def _median_time(fn, repetitions: int) -> float:
    fn()  # warmup
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench(sizes=BENCH_SIZES, sparsities=BENCH_SPARSITIES, repetitions: int = 5,
          seed: int = 0, batch: int = 1) -> list[BenchResult]:
    """Dense masked matvec vs CSR matvec, single-threaded, median of repetitions.

    ``batch`` > 1 times a matrix product with that many right-hand columns.
    """
    from threadpoolctl import threadpool_limits

    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    with threadpool_limits(limits=1):
        for n in sizes:
            w = rng.standard_normal((n, n))
            x = rng.standard_normal(n) if batch == 1 else rng.standard_normal((n, batch))
            for s in sparsities:
                if not 0.0 <= s < 1.0:
                    raise ConfigError("sparsity must be in [0, 1)")
                mask = random_mask(rng, (n, n), s)
                dense_w = w * mask
                sparse_w = csr_from_mask(w, mask).to_scipy()
                td = _median_time(lambda: dense_w @ x, repetitions)
                ts = _median_time(lambda: sparse_w @ x, repetitions)
                nnz = int(mask.sum())
                rows.append(BenchResult(n, s, td, ts, td / ts, flops(n, n), flops(n, n, nnz), n * n - nnz))
    return rows
