"""Training-time-test attention mask and its block-compressed form.

At TTT step ``j`` a query row ``q`` (one of ``q_len`` padded positions) sees
keys laid out as ``j + 1`` consecutive segments of length ``q_len``:

* segment 0 is the training prefix, visible causally (``kv <= q``) and only
  where ``kv < seq_len``;
* segments 1..j hold keys produced by earlier unroll steps; row ``q`` sees
  exactly the key at the same in-segment position, again only when that
  position is below ``seq_len``.

:class:`BlockMask` records, per query block, which key blocks are full and
which are partial. Everything else is skipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np


@dataclass(frozen=True)
class MaskParams:
    q_len: int
    seq_len: int
    step: int = 0
    block: int = 16

    def __post_init__(self):
        if not (0 < self.seq_len <= self.q_len):
            raise ValueError(f"need 0 < seq_len <= q_len, got seq_len={self.seq_len}, q_len={self.q_len}")
        if self.step < 0:
            raise ValueError(f"step must be >= 0, got {self.step}")
        b = self.block
        if b < 1 or b & (b - 1):
            raise ValueError(f"block must be a power of two, got {b}")
        if self.q_len % b:
            raise ValueError(f"block {b} does not divide q_len {self.q_len}")

    @property
    def kv_len(self) -> int:
        return (self.step + 1) * self.q_len


def ttt_mask_predicate(params: MaskParams, q_i, kv_i):
    """Element-level TTT mask. Works on ints or broadcastable integer arrays."""
    q = np.asarray(q_i)
    kv = np.asarray(kv_i)
    Q, T = params.q_len, params.seq_len
    if np.any(q < 0) or np.any(q >= Q):
        raise IndexError(f"query index out of range [0, {Q})")
    if np.any(kv < 0) or np.any(kv >= params.kv_len):
        raise IndexError(f"key index out of range [0, {params.kv_len})")
    m_causal = (q >= kv) & (kv < T)
    m_suffix = (kv >= Q) & ((kv % Q) < T) & (((kv - q) % Q) == 0)
    out = m_causal | m_suffix
    return bool(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BlockMask:
    params: MaskParams
    full: Tuple[Tuple[int, ...], ...]
    partial: Tuple[Tuple[int, ...], ...]

    @property
    def n_q_blocks(self) -> int:
        return self.params.q_len // self.params.block

    @property
    def n_kv_blocks(self) -> int:
        return self.params.kv_len // self.params.block

    def skipped(self, row: int) -> Tuple[int, ...]:
        keep = set(self.full[row]) | set(self.partial[row])
        return tuple(k for k in range(self.n_kv_blocks) if k not in keep)

    def kv_blocks(self, row: int) -> List[Tuple[int, bool]]:
        """Non-skipped key blocks of a query-block row as (index, is_full), ascending."""
        items = [(k, True) for k in self.full[row]] + [(k, False) for k in self.partial[row]]
        return sorted(items)

    def block_predicate(self, q_block: int, kv_block: int) -> np.ndarray:
        """Element mask [B, B] for one block (re-evaluates the predicate)."""
        B = self.params.block
        q = np.arange(q_block * B, (q_block + 1) * B)[:, None]
        kv = np.arange(kv_block * B, (kv_block + 1) * B)[None, :]
        return ttt_mask_predicate(self.params, q, kv)

    @property
    def step(self) -> int:
        return self.params.step


def _classify(params: MaskParams, qb: int, kb: int) -> int:
    """0 skipped, 1 partial, 2 full, derived from the block's index ranges."""
    B, Q, T = params.block, params.q_len, params.seq_len
    q0, q1 = qb * B, qb * B + B - 1
    k0, k1 = kb * B, kb * B + B - 1
    if k0 < Q:
        # causal prefix segment: allowed iff kv <= q and kv < T
        if k0 >= T or q1 < k0:
            return 0
        if q0 >= k1 and k1 < T:
            return 2
        return 1
    # suffix segment: allowed iff kv mod Q == q and q < T
    l0, l1 = k0 % Q, k1 % Q
    lo, hi = max(q0, l0), min(q1, l1, T - 1)
    if lo > hi:
        return 0
    return 2 if B == 1 else 1


def build_blockmask(params: MaskParams) -> BlockMask:
    nq = params.q_len // params.block
    nk = params.kv_len // params.block
    full, partial = [], []
    for qb in range(nq):
        f, p = [], []
        for kb in range(nk):
            c = _classify(params, qb, kb)
            if c == 2:
                f.append(kb)
            elif c == 1:
                p.append(kb)
        full.append(tuple(f))
        partial.append(tuple(p))
    return BlockMask(params, tuple(full), tuple(partial))


def expand_dense(mask: BlockMask) -> np.ndarray:
    """Dense {0,1} uint8 matrix [q_len, kv_len] assembled block by block."""
    p = mask.params
    B = p.block
    out = np.zeros((p.q_len, p.kv_len), dtype=np.uint8)
    for qb in range(mask.n_q_blocks):
        rows = np.s_[qb * B:(qb + 1) * B]
        for kb in mask.full[qb]:
            out[rows, kb * B:(kb + 1) * B] = 1
        for kb in mask.partial[qb]:
            out[rows, kb * B:(kb + 1) * B] = mask.block_predicate(qb, kb)
    return out


def dense_predicate(params: MaskParams) -> np.ndarray:
    """Exhaustive evaluation of the element predicate over the whole grid."""
    q = np.arange(params.q_len)[:, None]
    kv = np.arange(params.kv_len)[None, :]
    return ttt_mask_predicate(params, q, kv).astype(np.uint8)


def render_mask(mask: BlockMask) -> str:
    """Character grid: '█' allowed, '·' masked, '│' between step segments."""
    dense = expand_dense(mask)
    Q = mask.params.q_len
    lines = []
    for row in dense:
        segs = ["".join("█" if c else "·" for c in row[s:s + Q]) for s in range(0, len(row), Q)]
        lines.append("│".join(segs))
    return "\n".join(lines)
