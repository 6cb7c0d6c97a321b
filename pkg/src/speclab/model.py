"""Desk-scale target transformer and single-layer feature-level draft head.

The target exports hidden states of three tapped layers (low/mid/high); the
draft fuses them with a linear projection, mixes in the embedding of the next
token and runs one decoder layer whose attention is the TTT step. Its output
hidden state is the predicted next feature, and its head emits logits over a
reduced draft vocabulary.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as tn
from .attention import TTTState, multihead_attention, tree_decode_attention, ttt_attention_step
from .blockmask import BlockMask, MaskParams
from .tensor import F32, Tensor

CHECKPOINT_MAGIC = b"SPFG"
CHECKPOINT_VERSION = 1


class FFNVariant(str, enum.Enum):
    DENSE = "dense"
    MOE_SAME_PARAMS = "moe_same_params"
    MOE_SAME_FLOPS = "moe_same_flops"
    MOE_SHARED_EXPERT = "moe_shared_expert"


_VARIANT_CODES = {v: i for i, v in enumerate(FFNVariant)}


def sinusoidal_positions(positions, d: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    i = np.arange(d // 2, dtype=np.float64)
    ang = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros(pos.shape[:-1] + (d,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out.astype(F32)


def _init(rng: np.random.Generator, fan_in: int, shape, gain: float = 1.0) -> np.ndarray:
    return (rng.standard_normal(shape) * (gain / math.sqrt(fan_in))).astype(F32)


def linear(x: Tensor, w: Tensor) -> Tensor:
    return tn.matmul(x, w)


# ---------------------------------------------------------------------------
# feed-forward variants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FFNConfig:
    d_model: int
    d_ff: int
    variant: FFNVariant = FFNVariant.DENSE
    n_experts: int = 2
    router_topk: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variant", FFNVariant(self.variant))
        if self.variant is not FFNVariant.DENSE:
            if self.n_experts < 1:
                raise ValueError("n_experts must be >= 1")
            if not 1 <= self.router_topk <= self.n_experts:
                raise ValueError("router_topk must lie in [1, n_experts]")
        if self.variant is FFNVariant.MOE_SAME_PARAMS and self.d_ff % self.n_experts:
            raise ValueError(f"d_ff={self.d_ff} not divisible by n_experts={self.n_experts}")

    @property
    def is_moe(self) -> bool:
        return self.variant is not FFNVariant.DENSE

    @property
    def expert_dim(self) -> int:
        if self.variant is FFNVariant.MOE_SAME_PARAMS:
            return self.d_ff // self.n_experts
        return self.d_ff


@dataclass(frozen=True)
class ParamCount:
    experts: int
    router: int = 0
    shared: int = 0

    @property
    def ffn(self) -> int:
        """Expert-side weights (routed plus shared), router excluded."""
        return self.experts + self.shared

    @property
    def total(self) -> int:
        return self.experts + self.router + self.shared


class FFN:
    """``down(silu(up(x)))``, either dense or as a routed mixture of such experts."""

    def __init__(self, cfg: FFNConfig, rng: np.random.Generator, prefix: str, params: Dict[str, Tensor]):
        self.cfg = cfg
        d, inter = cfg.d_model, cfg.expert_dim
        n_routed = cfg.n_experts if cfg.is_moe else 1
        self.experts: List[Tuple[Tensor, Tensor]] = []
        for e in range(n_routed):
            name = f"{prefix}.expert{e}" if cfg.is_moe else prefix
            up = Tensor.parameter(_init(rng, d, (d, inter)), name=f"{name}.up")
            down = Tensor.parameter(_init(rng, inter, (inter, d), 0.5), name=f"{name}.down")
            params[up.name], params[down.name] = up, down
            self.experts.append((up, down))
        self.router = None
        self.shared = None
        if cfg.is_moe:
            self.router = Tensor.parameter(_init(rng, d, (d, cfg.n_experts)), name=f"{prefix}.router")
            params[self.router.name] = self.router
        if cfg.variant is FFNVariant.MOE_SHARED_EXPERT:
            up = Tensor.parameter(_init(rng, d, (d, cfg.d_ff)), name=f"{prefix}.shared.up")
            down = Tensor.parameter(_init(rng, cfg.d_ff, (cfg.d_ff, d), 0.5), name=f"{prefix}.shared.down")
            params[up.name], params[down.name] = up, down
            self.shared = (up, down)

    @staticmethod
    def _expert(x: Tensor, w: Tuple[Tensor, Tensor]) -> Tensor:
        return linear(tn.silu(linear(x, w[0])), w[1])

    def route(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Selected experts [n, r] and router probabilities [n, E].

        Ties go to the lowest expert index (stable sort).
        """
        logits = x.astype(np.float64) @ self.router.data.astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        order = np.argsort(-probs.astype(F32), axis=1, kind="stable")
        return order[:, : self.cfg.router_topk], probs

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        d = x.shape[-1]
        x2 = tn.reshape(x, (-1, d))
        if not self.cfg.is_moe:
            y = self._expert(x2, self.experts[0])
        else:
            n = x2.shape[0]
            sel, _ = self.route(x2.data)
            keep = np.zeros((n, self.cfg.n_experts), dtype=F32)
            np.put_along_axis(keep, sel, 1.0, axis=1)
            probs = tn.softmax(linear(x2, self.router), axis=-1)
            gated = tn.where_rows(keep, probs)
            gate = tn.div(gated, tn.sum(gated, axis=1, keepdims=True))
            y = None
            for e, w in enumerate(self.experts):
                rows = np.nonzero(keep[:, e])[0]
                if rows.size == 0:
                    continue
                ye = self._expert(tn.take_rows(x2, rows), w)
                ge = tn.slice(tn.take_rows(gate, rows), e, e + 1, axis=1)
                part = tn.scatter_rows(tn.mul(ye, ge), rows, n)
                y = part if y is None else tn.add(y, part)
            if self.shared is not None:
                y = tn.add(y, self._expert(x2, self.shared))
        return tn.reshape(y, lead + (d,))

    def param_count(self) -> ParamCount:
        d = self.cfg.d_model
        experts = sum(w[0].size + w[1].size for w in self.experts)
        router = self.router.size if self.router is not None else 0
        shared = sum(w.size for w in self.shared) if self.shared is not None else 0
        return ParamCount(experts, router, shared)

    def flops_per_token(self) -> ParamCount:
        """Multiplies per token, split the same way as :meth:`param_count`."""
        cfg = self.cfg
        d = cfg.d_model
        per_expert = 2 * d * cfg.expert_dim
        if not cfg.is_moe:
            return ParamCount(per_expert)
        router = d * cfg.n_experts
        shared = 2 * d * cfg.d_ff if self.shared is not None else 0
        return ParamCount(cfg.router_topk * per_expert, router, shared)


# ---------------------------------------------------------------------------
# target
# ---------------------------------------------------------------------------


@dataclass
class TargetConfig:
    vocab_size: int = 256
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 256
    tap_layers: Optional[List[int]] = None
    head_init: str = "normal"
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 3:
            raise ValueError("target needs at least 3 layers")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.tap_layers is None:
            self.tap_layers = [0, self.n_layers // 2, self.n_layers - 1]
        taps = list(self.tap_layers)
        if len(taps) != 3 or taps != sorted(set(taps)) or taps[0] < 0 or taps[-1] >= self.n_layers:
            raise ValueError(f"tap_layers must be 3 strictly increasing indices in [0, {self.n_layers})")
        self.tap_layers = taps
        if self.head_init not in ("normal", "zero"):
            raise ValueError("head_init must be 'normal' or 'zero'")


class TargetModel:
    def __init__(self, cfg: TargetConfig, params: Optional[Dict[str, Tensor]] = None):
        self.cfg = cfg
        if params is None:
            params = self._init_params(cfg)
        self.params = params
        self.ffns = [
            _FrozenFFN(FFNConfig(cfg.d_model, cfg.d_ff), params, f"layers.{i}.ffn") for i in range(cfg.n_layers)
        ]

    @staticmethod
    def _init_params(cfg: TargetConfig) -> Dict[str, Tensor]:
        rng = np.random.default_rng(cfg.seed)
        d, V = cfg.d_model, cfg.vocab_size
        p: Dict[str, Tensor] = {}

        def add(name, arr):
            p[name] = Tensor.parameter(arr, name=name)

        add("embed", (rng.standard_normal((V, d))).astype(F32))
        for i in range(cfg.n_layers):
            pre = f"layers.{i}"
            add(f"{pre}.attn_norm", np.ones(d, dtype=F32))
            for nm in ("wq", "wk", "wv"):
                add(f"{pre}.attn.{nm}", _init(rng, d, (d, d)))
            add(f"{pre}.attn.wo", _init(rng, d, (d, d), 0.5))
            add(f"{pre}.ffn_norm", np.ones(d, dtype=F32))
            FFN(FFNConfig(d, cfg.d_ff), rng, f"{pre}.ffn", p)
        add("final_norm", np.ones(d, dtype=F32))
        head = np.zeros((d, V), dtype=F32) if cfg.head_init == "zero" else _init(rng, d, (d, V))
        add("head", head)
        return p

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def forward(self, tokens, allow=None, positions=None) -> Tuple[Tensor, Tensor]:
        """tokens [T] or [B, T] → (logits [..., T, V], fused [..., T, 3d]).

        ``allow`` overrides the causal mask (e.g. tree attention);
        ``positions`` overrides 0..T-1.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
        T = tokens.shape[-1]
        if positions is None:
            positions = np.arange(T)
        if allow is None:
            allow = np.tril(np.ones((T, T), dtype=bool))
        p = self.params
        x = tn.add(tn.embedding_lookup(p["embed"], tokens), Tensor(sinusoidal_positions(positions, cfg.d_model)))
        taps = []
        for i in range(cfg.n_layers):
            pre = f"layers.{i}"
            h = tn.rms_norm(x, p[f"{pre}.attn_norm"])
            q = linear(h, p[f"{pre}.attn.wq"])
            k = linear(h, p[f"{pre}.attn.wk"])
            v = linear(h, p[f"{pre}.attn.wv"])
            a = multihead_attention(q, k, v, cfg.n_heads, allow)
            x = tn.add(x, linear(a, p[f"{pre}.attn.wo"]))
            x = tn.add(x, self.ffns[i](tn.rms_norm(x, p[f"{pre}.ffn_norm"])))
            if i in cfg.tap_layers:
                taps.append(x)
        logits = linear(tn.rms_norm(x, p["final_norm"]), p["head"])
        return logits, tn.concat_cols(*taps)

    def count_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def count_flops(self) -> int:
        """Linear-layer multiplies per token (attention scores excluded)."""
        d, L = self.cfg.d_model, self.cfg.n_layers
        per_layer = 4 * d * d + self.ffns[0].flops_per_token().total
        return L * per_layer + d * self.cfg.vocab_size

    def state_dict(self) -> Dict[str, np.ndarray]:
        c = self.cfg
        sd = _meta(
            kind=0,
            vocab_size=c.vocab_size,
            n_layers=c.n_layers,
            d_model=c.d_model,
            n_heads=c.n_heads,
            d_ff=c.d_ff,
            seed=c.seed,
        )
        sd["meta.tap_layers"] = np.asarray(c.tap_layers, dtype=F32)
        sd.update({k: t.data for k, t in self.params.items()})
        return sd

    @classmethod
    def from_state_dict(cls, sd: Dict[str, np.ndarray]) -> "TargetModel":
        if int(sd["meta.kind"]) != 0:
            raise ValueError("checkpoint does not hold a target model")
        cfg = TargetConfig(
            vocab_size=_int(sd, "vocab_size"),
            n_layers=_int(sd, "n_layers"),
            d_model=_int(sd, "d_model"),
            n_heads=_int(sd, "n_heads"),
            d_ff=_int(sd, "d_ff"),
            tap_layers=[int(x) for x in sd["meta.tap_layers"]],
            seed=_int(sd, "seed"),
        )
        params = {k: Tensor.parameter(v, name=k) for k, v in sd.items() if not k.startswith("meta.")}
        return cls(cfg, params)


class _FrozenFFN(FFN):
    """Dense FFN bound to already-registered parameters."""

    def __init__(self, cfg: FFNConfig, params: Dict[str, Tensor], prefix: str):
        self.cfg = cfg
        self.experts = [(params[f"{prefix}.up"], params[f"{prefix}.down"])]
        self.router = None
        self.shared = None


def target_forward(model: TargetModel, tokens) -> Tuple[Tensor, Tensor]:
    """Causal forward over one sequence: (logits [T, V], fused features [T, 3d])."""
    return model.forward(np.asarray(tokens, dtype=np.int64))


# ---------------------------------------------------------------------------
# draft
# ---------------------------------------------------------------------------


@dataclass
class DraftConfig:
    d_model: int = 64
    target_vocab: int = 256
    draft_vocab: int = 128
    d_ff: int = 256
    ffn_variant: FFNVariant = FFNVariant.DENSE
    n_experts: int = 2
    router_topk: int = 1
    combine: str = "concat"
    seed: int = 0

    def __post_init__(self):
        self.ffn_variant = FFNVariant(self.ffn_variant)
        if self.combine not in ("concat", "add"):
            raise ValueError("combine must be 'concat' or 'add'")
        if self.draft_vocab > self.target_vocab:
            raise ValueError("draft vocabulary cannot exceed the target vocabulary")
        if self.ffn_variant is not FFNVariant.DENSE and self.n_experts < 2:
            raise ValueError("MoE variants need at least 2 experts")

    @property
    def ffn(self) -> FFNConfig:
        return FFNConfig(self.d_model, self.d_ff, self.ffn_variant, self.n_experts, self.router_topk)


class DraftModel:
    def __init__(self, cfg: DraftConfig, vocab_map=None, params: Optional[Dict[str, Tensor]] = None):
        self.cfg = cfg
        if vocab_map is None:
            vocab_map = np.arange(cfg.draft_vocab)
        self.vocab_map = np.asarray(vocab_map, dtype=np.int64)
        if self.vocab_map.shape != (cfg.draft_vocab,):
            raise ValueError("vocab_map must list one target id per draft token")
        rng = np.random.default_rng(cfg.seed)
        fresh: Dict[str, Tensor] = {}
        d = cfg.d_model

        def add(name, arr):
            fresh[name] = Tensor.parameter(arr, name=name)

        add("embed", rng.standard_normal((cfg.target_vocab, d)).astype(F32))
        add("fc", _init(rng, 3 * d, (3 * d, d)))
        add("emb_norm", np.ones(d, dtype=F32))
        add("feat_norm", np.ones(d, dtype=F32))
        if cfg.combine == "concat":
            add("in_proj", _init(rng, 2 * d, (2 * d, d)))
        add("attn_norm", np.ones(d, dtype=F32))
        for nm in ("wq", "wk", "wv"):
            add(f"attn.{nm}", _init(rng, d, (d, d)))
        add("attn.wo", _init(rng, d, (d, d), 0.5))
        add("ffn_norm", np.ones(d, dtype=F32))
        self.ffn = FFN(cfg.ffn, rng, "ffn", fresh)
        add("final_norm", np.ones(d, dtype=F32))
        add("head", _init(rng, d, (d, cfg.draft_vocab)))
        if params is not None:
            for k, t in fresh.items():
                if k not in params or params[k].shape != t.shape:
                    raise ValueError(f"checkpoint is missing or misshapes parameter {k}")
                t.data[...] = params[k].data
        self.params = fresh

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    # -- shared pieces ------------------------------------------------------

    def fuse(self, fused: Tensor) -> Tensor:
        if fused.shape[-1] != 3 * self.cfg.d_model:
            raise tn.DimensionError(f"fused features must have width {3 * self.cfg.d_model}")
        return linear(fused, self.params["fc"])

    def _input(self, feats: Tensor, tokens, positions) -> Tensor:
        p = self.params
        emb = tn.rms_norm(tn.embedding_lookup(p["embed"], tokens), p["emb_norm"])
        f = tn.rms_norm(feats, p["feat_norm"])
        if self.cfg.combine == "concat":
            x = linear(tn.concat_cols(emb, f), p["in_proj"])
        else:
            x = tn.add(emb, f)
        return tn.add(x, Tensor(sinusoidal_positions(positions, self.cfg.d_model)))

    def _qkv(self, x: Tensor):
        p = self.params
        h = tn.rms_norm(x, p["attn_norm"])
        return linear(h, p["attn.wq"]), linear(h, p["attn.wk"]), linear(h, p["attn.wv"])

    def _tail(self, x: Tensor, attn: Tensor) -> Tuple[Tensor, Tensor]:
        p = self.params
        x = tn.add(x, linear(attn, p["attn.wo"]))
        x = tn.add(x, self.ffn(tn.rms_norm(x, p["ffn_norm"])))
        logits = linear(tn.rms_norm(x, p["final_norm"]), p["head"])
        return logits, x

    # -- inference ------------------------------------------------------------

    def prefix_pass(self, fused: np.ndarray, tokens) -> dict:
        """Step-0 pass over a context (no autodiff).

        ``fused[t]`` is the target feature at position t and ``tokens[t]`` the
        token at t+1. Returns logits/features at every position plus the
        prefix keys and values for tree expansion.
        """
        with tn.no_grad():
            L = len(tokens)
            x = self._input(self.fuse(Tensor(fused)), np.asarray(tokens), np.arange(L))
            q, k, v = self._qkv(x)
            state = TTTState()
            a = ttt_attention_step(state, q, k, v, MaskParams(L, L, 0, 1))
            logits, feats = self._tail(x, a)
        return {"logits": logits.data, "features": feats.data, "k": k.data, "v": v.data}

    def tree_step(self, prefix: dict, feats: np.ndarray, tokens, chain_k: np.ndarray, chain_v: np.ndarray, position: int):
        """Expand ``n`` tree nodes one level deeper (no autodiff).

        feats [n, d] are the parents' predicted features, tokens [n] the
        nodes' own tokens, chain_k/chain_v [n, j, d] the keys/values of the
        nodes' ancestors below the root. Returns (logits, features, k, v).
        """
        with tn.no_grad():
            n = len(tokens)
            x = self._input(Tensor(feats), np.asarray(tokens), np.full(n, position))
            q, k, v = self._qkv(x)
            ck = np.concatenate([chain_k, k.data[:, None, :]], axis=1)
            cv = np.concatenate([chain_v, v.data[:, None, :]], axis=1)
            a = tree_decode_attention(q.data, prefix["k"], prefix["v"], ck, cv)
            logits, out = self._tail(x, Tensor(a))
        return logits.data, out.data, k.data, v.data

    # -- accounting / io ----------------------------------------------------

    def count_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def count_flops(self) -> int:
        """Linear-layer multiplies per drafted token (attention scores excluded)."""
        d = self.cfg.d_model
        per = 4 * d * d + self.ffn.flops_per_token().total + d * self.cfg.draft_vocab
        if self.cfg.combine == "concat":
            per += 2 * d * d
        return per

    def state_dict(self) -> Dict[str, np.ndarray]:
        c = self.cfg
        sd = _meta(
            kind=1,
            d_model=c.d_model,
            target_vocab=c.target_vocab,
            draft_vocab=c.draft_vocab,
            d_ff=c.d_ff,
            ffn_variant=_VARIANT_CODES[c.ffn_variant],
            n_experts=c.n_experts,
            router_topk=c.router_topk,
            combine=0 if c.combine == "concat" else 1,
            seed=c.seed,
        )
        sd["meta.vocab_map"] = self.vocab_map.astype(F32)
        sd.update({k: t.data for k, t in self.params.items()})
        return sd

    @classmethod
    def from_state_dict(cls, sd: Dict[str, np.ndarray]) -> "DraftModel":
        if int(sd["meta.kind"]) != 1:
            raise ValueError("checkpoint does not hold a draft model")
        cfg = DraftConfig(
            d_model=_int(sd, "d_model"),
            target_vocab=_int(sd, "target_vocab"),
            draft_vocab=_int(sd, "draft_vocab"),
            d_ff=_int(sd, "d_ff"),
            ffn_variant=list(FFNVariant)[_int(sd, "ffn_variant")],
            n_experts=_int(sd, "n_experts"),
            router_topk=_int(sd, "router_topk"),
            combine="concat" if _int(sd, "combine") == 0 else "add",
            seed=_int(sd, "seed"),
        )
        params = {k: Tensor.parameter(v, name=k) for k, v in sd.items() if not k.startswith("meta.")}
        return cls(cfg, sd["meta.vocab_map"].astype(np.int64), params)


def draft_forward(
    model: DraftModel,
    feats: Tensor,
    tokens,
    ttt_state: TTTState,
    mask: Union[BlockMask, MaskParams, Sequence[BlockMask]],
) -> Tuple[Tensor, Tensor]:
    """One TTT step of the draft: (logits [..., T_pad, V_draft], features [..., T_pad, d]).

    At step 0 ``feats`` are the fused target features (width 3d); at later
    steps they are the draft's own features from the previous step.
    """
    masks = [mask] if isinstance(mask, (BlockMask, MaskParams)) else list(mask)
    step = getattr(masks[0], "params", masks[0]).step
    if step == 0:
        feats = model.fuse(feats)
    T_pad = feats.shape[-2]
    x = model._input(feats, np.asarray(tokens, dtype=np.int64), np.arange(T_pad))
    q, k, v = model._qkv(x)
    a = ttt_attention_step(ttt_state, q, k, v, mask)
    return model._tail(x, a)


# ---------------------------------------------------------------------------
# accounting helpers
# ---------------------------------------------------------------------------


def count_params(obj) -> Union[int, ParamCount]:
    if isinstance(obj, FFN):
        return obj.param_count()
    return obj.count_params()


def count_flops(obj) -> Union[int, ParamCount]:
    if isinstance(obj, FFN):
        return obj.flops_per_token()
    return obj.count_flops()


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def _meta(**fields) -> Dict[str, np.ndarray]:
    return {f"meta.{k}": np.asarray(float(v), dtype=F32) for k, v in fields.items()}


def _int(sd: Dict[str, np.ndarray], key: str) -> int:
    return int(sd[f"meta.{key}"])


def encode_checkpoint(tensors: Dict[str, np.ndarray]) -> bytes:
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", CHECKPOINT_VERSION)
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def decode_checkpoint(buf: bytes) -> Dict[str, np.ndarray]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 8
    out: Dict[str, np.ndarray] = {}
    try:
        while off < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = bytes(buf[off:off + nlen]).decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if off + 4 * count > len(buf):
                raise ValueError("truncated payload")
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(F32)
            off += 4 * count
    except struct.error as e:
        raise ValueError(f"truncated checkpoint: {e}") from None
    return out


def save_checkpoint(path, model: Union[TargetModel, DraftModel]) -> None:
    Path(path).write_bytes(encode_checkpoint(model.state_dict()))


def load_checkpoint(path) -> Union[TargetModel, DraftModel]:
    sd = decode_checkpoint(Path(path).read_bytes())
    return TargetModel.from_state_dict(sd) if int(sd["meta.kind"]) == 0 else DraftModel.from_state_dict(sd)
