"""Attention kernels: dense masked reference, block-sparse streaming, TTT step.

All three take ``1/sqrt(d_k)``-scaled dot-product logits. The dense kernel
materializes the full logits matrix and is the oracle for the other two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .blockmask import BlockMask, MaskParams, expand_dense
from .tensor import F32, F64, Category, DimensionError, Tensor, _result, concat_rows, get_meter

NEG_BIG = -1e30


class DegenerateRowError(ValueError):
    """A query row has no admissible key."""


class MaskStateError(ValueError):
    """TTT mask step does not match the KV-cache state."""


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


# ---------------------------------------------------------------------------
# dense reference
# ---------------------------------------------------------------------------


def _dense_probs(q64, k64, allow, scale, S):
    """Fill ``S`` with masked softmax probabilities in place."""
    np.matmul(q64, np.swapaxes(k64, -1, -2), out=S)
    S *= scale
    np.copyto(S, NEG_BIG, where=~np.broadcast_to(allow, S.shape))
    S -= S.max(axis=-1, keepdims=True)
    np.exp(S, out=S)
    S /= S.sum(axis=-1, keepdims=True)


def _dense_attention(q: Tensor, k: Tensor, v: Tensor, allow: np.ndarray) -> Tensor:
    """Masked attention on [..., L, d] operands (leading dims shared)."""
    d_k = q.shape[-1]
    scale = 1.0 / math.sqrt(d_k)
    allow = np.asarray(allow, dtype=bool)
    if not np.broadcast_to(allow, q.shape[:-1] + (k.shape[-2],)).any(axis=-1).all():
        raise DegenerateRowError("a query row has no allowed key")
    meter = get_meter()
    lshape = q.shape[:-1] + (k.shape[-2],)
    q64, k64, v64 = q.data.astype(F64), k.data.astype(F64), v.data.astype(F64)
    with meter.buffers(Category.SCRATCH, (lshape, F64)) as (S,):
        _dense_probs(q64, k64, allow, scale, S)
        out = np.matmul(S, v64).astype(F32)

    def fn(g):
        g64 = g.astype(F64)
        with meter.buffers(Category.SCRATCH, (lshape, F64)) as (P,):
            _dense_probs(q64, k64, allow, scale, P)
            gv = np.matmul(np.swapaxes(P, -1, -2), g64)
            dP = np.matmul(g64, np.swapaxes(v64, -1, -2))
            dP -= (dP * P).sum(axis=-1, keepdims=True)
            dP *= P
            dP *= scale
            gq = np.matmul(dP, k64)
            gk = np.matmul(np.swapaxes(dP, -1, -2), q64)
        return gq, gk, gv

    return _result(out, (q, k, v), fn)


def dense_masked_attention(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    """softmax(q kᵀ/√d_k, disallowed → -1e30) · v for 2-D operands."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("dense_masked_attention expects 2-D q, k, v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(f"inconsistent shapes q{q.shape} k{k.shape} v{v.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (q.shape[0], k.shape[0]):
        raise DimensionError(f"mask shape {mask.shape} != {(q.shape[0], k.shape[0])}")
    return _dense_attention(q, k, v, mask)


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    *lead, T, d = x.shape
    return np.ascontiguousarray(np.swapaxes(x.reshape(*lead, T, h, d // h), -2, -3))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, h, T, dh = x.shape
    return np.ascontiguousarray(np.swapaxes(x, -2, -3)).reshape(*lead, T, h * dh)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, allow) -> Tensor:
    """Dense masked attention over [..., T, d] with ``n_heads`` interleaved heads.

    ``allow`` broadcasts against [..., T_q, T_kv] (shared by all heads).
    """
    d = q.shape[-1]
    if d % n_heads:
        raise DimensionError(f"d={d} not divisible by n_heads={n_heads}")
    allow = np.asarray(allow, dtype=bool)
    allow = np.expand_dims(allow, -3)  # head axis
    qh = Tensor(_split_heads(q.data, n_heads))
    kh = Tensor(_split_heads(k.data, n_heads))
    vh = Tensor(_split_heads(v.data, n_heads))
    for src, dst in ((q, qh), (k, kh), (v, vh)):
        dst.requires_grad = src.requires_grad
    inner = _dense_attention(qh, kh, vh, allow)
    out = _merge_heads(inner.data)
    if not inner.requires_grad:
        return Tensor(out)

    def fn(g):
        gh = _split_heads(g, n_heads)
        grads = inner._backward(gh)
        return [None if gr is None else _merge_heads(np.asarray(gr)) for gr in grads]

    return _result(out, (q, k, v), fn)


# ---------------------------------------------------------------------------
# streaming block-sparse attention
# ---------------------------------------------------------------------------


def streaming_attention(q: Tensor, k: Tensor, v: Tensor, mask: BlockMask, _check: bool = True) -> Tensor:
    """Online-softmax attention driven by a :class:`BlockMask`.

    Visits only full and partial key blocks of each query block; partial
    blocks re-evaluate the element predicate. Working memory is a handful of
    block-sized buffers; the only per-row state kept for the backward pass is
    the log-sum-exp.
    """
    p = mask.params
    B = p.block
    Lq, d_k = q.shape
    Lkv, d_v = v.shape
    if Lq != p.q_len or k.shape != (p.kv_len, d_k) or Lkv != p.kv_len:
        raise DimensionError(
            f"mask expects q_len={p.q_len}, kv_len={p.kv_len}; got q{q.shape} k{k.shape} v{v.shape}"
        )
    scale = 1.0 / math.sqrt(d_k)
    meter = get_meter()
    out = np.empty((Lq, d_v), dtype=F32)
    lse = np.empty(Lq, dtype=F64)
    specs = (
        ((B, B), F64),  # logits tile
        ((B, B), bool),  # element mask tile
        ((B,), F64),  # running max
        ((B,), F64),  # running denominator
        ((B,), F64),  # rescale factors
        ((B, d_v), F64),  # output accumulator
        ((B, d_k), F64),  # query block
        ((B, d_k), F64),  # key block
        ((B, d_v), F64),  # value block
    )
    with meter.buffers(Category.SCRATCH, *specs) as (S, M, m, l, a, acc, qb64, kb64, vb64):
        for qb in range(mask.n_q_blocks):
            rows = np.s_[qb * B:(qb + 1) * B]
            qb64[...] = q.data[rows]
            m.fill(-np.inf)
            l.fill(0.0)
            acc.fill(0.0)
            for kb, is_full in mask.kv_blocks(qb):
                cols = np.s_[kb * B:(kb + 1) * B]
                kb64[...] = k.data[cols]
                vb64[...] = v.data[cols]
                np.matmul(qb64, kb64.T, out=S)
                S *= scale
                if not is_full:
                    M[...] = mask.block_predicate(qb, kb)
                    np.copyto(S, -np.inf, where=~M)
                # a[:] = new running max (rows with nothing allowed yet stay -inf)
                np.maximum(m, S.max(axis=1), out=a)
                shift = np.where(np.isfinite(a), a, 0.0)
                S -= shift[:, None]
                np.exp(S, out=S)
                # rescale old state: exp(m_old - m_new), 0 when m_old is -inf
                np.subtract(m, shift, out=m)
                np.exp(m, out=m)
                l *= m
                l += S.sum(axis=1)
                acc *= m[:, None]
                acc += S @ vb64
                m[...] = a
            if _check and np.any(l == 0.0):
                raise DegenerateRowError(f"query block {qb} has a row with no allowed key")
            out[rows] = (acc / l[:, None]).astype(F32)
            lse[rows] = m + np.log(l)

    def fn(g):
        g64 = g.astype(F64)
        D = (g64 * out.astype(F64)).sum(axis=1)
        gq = np.zeros((Lq, d_k), dtype=F64)
        gk = np.zeros((Lkv, d_k), dtype=F64)
        gv = np.zeros((Lkv, d_v), dtype=F64)
        bspecs = (((B, B), F64), ((B, B), F64), ((B, B), bool), ((B, d_k), F64), ((B, d_k), F64), ((B, d_v), F64))
        with meter.buffers(Category.SCRATCH, *bspecs) as (P, dS, M, qb64, kb64, vb64):
            for qb in range(mask.n_q_blocks):
                rows = np.s_[qb * B:(qb + 1) * B]
                qb64[...] = q.data[rows]
                go = g64[rows]
                for kb, is_full in mask.kv_blocks(qb):
                    cols = np.s_[kb * B:(kb + 1) * B]
                    kb64[...] = k.data[cols]
                    vb64[...] = v.data[cols]
                    np.matmul(qb64, kb64.T, out=P)
                    P *= scale
                    P -= lse[rows, None]
                    np.exp(P, out=P)
                    if not is_full:
                        M[...] = mask.block_predicate(qb, kb)
                        P[~M] = 0.0
                    gv[cols] += P.T @ go
                    np.matmul(go, vb64.T, out=dS)
                    dS -= D[rows, None]
                    dS *= P
                    dS *= scale
                    gq[rows] += dS @ kb64
                    gk[cols] += dS.T @ qb64
        return gq, gk, gv

    return _result(out, (q, k, v), fn)


# ---------------------------------------------------------------------------
# training-time-test attention
# ---------------------------------------------------------------------------


@dataclass
class TTTState:
    """Per-sample KV cache across TTT steps.

    ``prefix_k``/``prefix_v`` are the step-0 keys/values; ``step_k``/``step_v``
    hold one entry per later step. Shapes are [T_pad, d] or [batch, T_pad, d].
    """

    prefix_k: Optional[Tensor] = None
    prefix_v: Optional[Tensor] = None
    step_k: List[Tensor] = field(default_factory=list)
    step_v: List[Tensor] = field(default_factory=list)
    d_k: int = 0

    @property
    def cached_steps(self) -> int:
        return (0 if self.prefix_k is None else 1) + len(self.step_k)


def _as_masks(mask) -> List[MaskParams]:
    """Mask parameters per batch row; a bare MaskParams skips block classification."""
    items = [mask] if isinstance(mask, (BlockMask, MaskParams)) else list(mask)
    return [getattr(m, "params", m) for m in items]


def ttt_attention_step(
    state: TTTState,
    q: Tensor,
    new_k: Tensor,
    new_v: Tensor,
    mask: Union[BlockMask, Sequence[BlockMask]],
) -> Tensor:
    """One TTT unroll step in the per-step-logits form.

    Query rows score the step-0 keys causally, then one diagonal logit per
    cached step plus the current step (its own key at the same position),
    and a single softmax runs over the concatenation. ``new_k``/``new_v`` are
    appended to ``state`` afterwards. ``mask.step`` must equal the number of
    steps already cached. For batched input pass one mask per sequence.
    """
    masks = _as_masks(mask)
    batched = q.ndim == 3
    nb = q.shape[0] if batched else 1
    if len(masks) != nb:
        raise DimensionError(f"{len(masks)} masks for batch of {nb}")
    step = masks[0].step
    if any(m.step != step for m in masks):
        raise MaskStateError("masks in a batch disagree on step")
    if step != state.cached_steps:
        raise MaskStateError(f"mask step {step} but state caches {state.cached_steps} steps")
    T_pad, d_k = q.shape[-2], q.shape[-1]
    if any(m.q_len != T_pad for m in masks):
        raise DimensionError("mask q_len differs from query length")
    if new_k.shape != q.shape or new_v.shape[:-1] != q.shape[:-1]:
        raise DimensionError(f"new_k{new_k.shape}/new_v{new_v.shape} vs q{q.shape}")

    if step == 0:
        k0, v0 = new_k, new_v
        ks, vs = [], []
    else:
        k0, v0 = state.prefix_k, state.prefix_v
        ks, vs = list(state.step_k) + [new_k], list(state.step_v) + [new_v]

    seq_lens = np.array([m.seq_len for m in masks])
    pos = np.arange(T_pad)
    # prefix allow [nb, T, T]; diagonal allow [nb, T]
    allow_pre = (pos[None, :, None] >= pos[None, None, :]) & (pos[None, None, :] < seq_lens[:, None, None])
    allow_diag = pos[None, :] < seq_lens[:, None]
    if not batched:
        allow_pre, allow_diag = allow_pre[0], allow_diag[0]

    scale = 1.0 / math.sqrt(d_k)
    q64 = q.data.astype(F64)
    k064, v064 = k0.data.astype(F64), v0.data.astype(F64)
    ks64 = [t.data.astype(F64) for t in ks]
    vs64 = [t.data.astype(F64) for t in vs]
    J = len(ks)

    S = np.matmul(q64, np.swapaxes(k064, -1, -2)) * scale
    S[~np.broadcast_to(allow_pre, S.shape)] = NEG_BIG
    if J:
        Sd = np.stack([(q64 * kk).sum(axis=-1) for kk in ks64], axis=-1) * scale
        Sd[~np.broadcast_to(allow_diag[..., None], Sd.shape)] = NEG_BIG
        mx = np.maximum(S.max(axis=-1), Sd.max(axis=-1))
    else:
        Sd = None
        mx = S.max(axis=-1)
    P = np.exp(S - mx[..., None])
    den = P.sum(axis=-1)
    if J:
        Pd = np.exp(Sd - mx[..., None])
        den = den + Pd.sum(axis=-1)
        Pd /= den[..., None]
    P /= den[..., None]

    o = np.matmul(P, v064)
    for i in range(J):
        o += Pd[..., i:i + 1] * vs64[i]
    out = o.astype(F32)

    parents = (q, k0, v0, *ks, *vs)

    def fn(g):
        g64 = g.astype(F64)
        dP = np.matmul(g64, np.swapaxes(v064, -1, -2))
        c = (P * dP).sum(axis=-1)
        dPd = None
        if J:
            dPd = np.stack([(g64 * vv).sum(axis=-1) for vv in vs64], axis=-1)
            c = c + (Pd * dPd).sum(axis=-1)
        dS = P * (dP - c[..., None]) * scale
        gq = np.matmul(dS, k064)
        gk0 = np.matmul(np.swapaxes(dS, -1, -2), q64)
        gv0 = np.matmul(np.swapaxes(P, -1, -2), g64)
        gks, gvs = [], []
        if J:
            dSd = Pd * (dPd - c[..., None]) * scale
            for i in range(J):
                w = dSd[..., i:i + 1]
                gq += w * ks64[i]
                gks.append(w * q64)
                gvs.append(Pd[..., i:i + 1] * g64)
        return (gq, gk0, gv0, *gks, *gvs)

    result = _result(out, parents, fn)

    if step == 0:
        state.prefix_k, state.prefix_v = new_k, new_v
        state.d_k = d_k
    else:
        state.step_k.append(new_k)
        state.step_v.append(new_v)
    return result


def ttt_dense_reference(q: Tensor, keys: Sequence[Tensor], values: Sequence[Tensor], mask: BlockMask) -> Tensor:
    """Dense oracle for one TTT step: concatenate all segments and mask densely."""
    k = concat_rows(*keys)
    v = concat_rows(*values)
    return dense_masked_attention(q, k, v, expand_dense(mask).astype(bool))


# ---------------------------------------------------------------------------
# inference: tree-drafting attention
# ---------------------------------------------------------------------------


def tree_decode_attention(
    q: np.ndarray, prefix_k: np.ndarray, prefix_v: np.ndarray, chain_k: np.ndarray, chain_v: np.ndarray
) -> np.ndarray:
    """Attention for draft-tree nodes at one depth (no autodiff).

    q: [n, d]; prefix keys [L, d] are all visible to every node;
    chain keys [n, j, d] are each node's ancestors at depths 1..j-1 plus itself.
    This is the TTT mask restricted to the last prefix position.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    q64 = q.astype(F64)
    s_pre = q64 @ prefix_k.astype(F64).T * scale
    s_ch = np.einsum("nd,njd->nj", q64, chain_k.astype(F64)) * scale
    s = np.concatenate([s_pre, s_ch], axis=1)
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    L = prefix_k.shape[0]
    o = p[:, :L] @ prefix_v.astype(F64) + np.einsum("nj,njd->nd", p[:, L:], chain_v.astype(F64))
    return o.astype(F32)
