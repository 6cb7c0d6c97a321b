"""Masked soft-label log-softmax loss with an in-place, row-streamed backward.

The forward value is the mean, over masked-in rows, of the cross-entropy
between the target distribution and log_softmax(logits).

The backward overwrites the logits buffer with the gradient. Per row, with
``weighted = target * upstream`` and ``mass = weighted.sum()``, the new row
is ``softmax(logits) * mass - weighted``. Here ``upstream`` is the row's
effective upstream gradient (the caller's weight divided by the masked-row
count). Rows are processed in fixed-size blocks, so the extra memory is one
block of float64 work space regardless of how many rows the batch has.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .tensor import F32, F64, Category, DimensionError, Tensor, get_meter

DEFAULT_ROW_BLOCK = 8


class EmptyBatchError(ValueError):
    """No row of the batch contributes to the loss."""


@dataclass
class LossBatch:
    logits: Union[Tensor, np.ndarray]  # [N, V]
    target: np.ndarray  # [N, V]
    position_mask: Optional[np.ndarray] = None  # [N] bool, True = contributes
    upstream: Union[float, np.ndarray] = 1.0  # scalar or [N]

    def __post_init__(self):
        x = self.array
        if x.ndim != 2 or x.shape[1] < 2:
            raise DimensionError(f"logits must be [N, V>=2], got {x.shape}")
        self.target = np.asarray(self.target, dtype=F32)
        if self.target.shape != x.shape:
            raise DimensionError(f"target {self.target.shape} != logits {x.shape}")
        if self.position_mask is None:
            self.position_mask = np.ones(x.shape[0], dtype=bool)
        self.position_mask = np.asarray(self.position_mask, dtype=bool)
        if self.position_mask.shape != (x.shape[0],):
            raise DimensionError("position_mask must be [N]")

    @property
    def array(self) -> np.ndarray:
        return self.logits.data if isinstance(self.logits, Tensor) else self.logits

    @property
    def n_rows(self) -> int:
        n = int(self.position_mask.sum())
        if n == 0:
            raise EmptyBatchError("no masked-in rows")
        return n

    def row_upstream(self) -> np.ndarray:
        w = np.broadcast_to(np.asarray(self.upstream, dtype=F64), (self.array.shape[0],))
        return w / self.n_rows


def _log_softmax_block(x: np.ndarray, work: np.ndarray, tmp: np.ndarray) -> np.ndarray:
    """work ← log_softmax(x) in float64 (rows of ``x``); ``tmp`` is clobbered."""
    work[...] = x
    work -= work.max(axis=1, keepdims=True)
    np.exp(work, out=tmp)
    work -= np.log(tmp.sum(axis=1, keepdims=True))
    return work


def loss_forward(batch: LossBatch, row_block: int = DEFAULT_ROW_BLOCK) -> float:
    x, t, mask = batch.array, batch.target, batch.position_mask
    n = batch.n_rows
    N, V = x.shape
    total = 0.0
    with get_meter().buffers(Category.SCRATCH, ((row_block, V), F64), ((row_block, V), F64)) as (work, tmp):
        for r0 in range(0, N, row_block):
            r1 = min(N, r0 + row_block)
            rows = np.nonzero(mask[r0:r1])[0]
            if rows.size == 0:
                continue
            w = work[: r1 - r0]
            _log_softmax_block(x[r0:r1], w, tmp[: r1 - r0])
            total -= float((t[r0:r1][rows].astype(F64) * w[rows]).sum())
    return total / n


def _grad_block(x, t, w, m, out, work, weighted):
    """out <- softmax(x) * mass - weighted for one block of rows (zero where mask is false).

    ``out`` may alias ``x``: the softmax is fully formed in ``work`` before any write.
    """
    work[...] = x
    work -= work.max(axis=1, keepdims=True)
    np.exp(work, out=work)
    work /= work.sum(axis=1, keepdims=True)
    np.multiply(t, w[:, None], out=weighted)
    work *= weighted.sum(axis=1, keepdims=True)
    work -= weighted
    work[~m] = 0.0
    out[...] = work


def loss_backward_inplace(batch: LossBatch, row_block: int = DEFAULT_ROW_BLOCK) -> np.ndarray:
    """Overwrite the logits buffer with dL/dz and return it (same object)."""
    x, t, mask = batch.array, batch.target, batch.position_mask
    w = batch.row_upstream()
    N, V = x.shape
    with get_meter().buffers(Category.SCRATCH, ((row_block, V), F64), ((row_block, V), F64)) as (work, weighted):
        for r0 in range(0, N, row_block):
            r1 = min(N, r0 + row_block)
            blk = np.s_[r0:r1]
            n = r1 - r0
            _grad_block(x[blk], t[blk], w[blk], mask[blk], x[blk], work[:n], weighted[:n])
    return x


def loss_backward_reference(batch: LossBatch, row_block: int = DEFAULT_ROW_BLOCK) -> np.ndarray:
    """Out-of-place twin of :func:`loss_backward_inplace` (allocates [N, V])."""
    x, t, mask = batch.array, batch.target, batch.position_mask
    w = batch.row_upstream()
    N, V = x.shape
    out = np.empty_like(x)
    work = np.empty((row_block, V), dtype=F64)
    weighted = np.empty((row_block, V), dtype=F64)
    for r0 in range(0, N, row_block):
        r1 = min(N, r0 + row_block)
        blk = np.s_[r0:r1]
        n = r1 - r0
        _grad_block(x[blk], t[blk], w[blk], mask[blk], out[blk], work[:n], weighted[:n])
    return out


def topk_distill_target(target_logits, vocab_map) -> np.ndarray:
    """Target softmax gathered onto the draft vocabulary and renormalized.

    ``vocab_map[i]`` is the target id of draft token ``i``.
    """
    logits = target_logits.data if isinstance(target_logits, Tensor) else np.asarray(target_logits)
    vocab_map = np.asarray(vocab_map, dtype=np.int64)
    if vocab_map.size == 0:
        raise ValueError("empty vocabulary map")
    if np.unique(vocab_map).size != vocab_map.size:
        raise ValueError("vocabulary map must be injective")
    if vocab_map.min() < 0 or vocab_map.max() >= logits.shape[-1]:
        raise IndexError("vocabulary map points outside the target vocabulary")
    x = logits.astype(F64)
    x -= x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    probs = e / e.sum(axis=-1, keepdims=True)
    kept = probs[..., vocab_map]
    return (kept / kept.sum(axis=-1, keepdims=True)).astype(F32)
