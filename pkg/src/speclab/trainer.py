"""Synthetic corpus, target pretraining, response regeneration and TTT draft training.

Draft training follows the training-time-test recipe: a sample's target
features are computed once, then the draft is unrolled ``ttt_len`` steps.
Step ``j`` reads the ground-truth token ``x[t+j+1]`` at row ``t`` together
with the features it produced itself at step ``j-1`` (target features at
step 0), and is distilled toward the target's distribution at position
``t+j+1``. The loss gradients of all steps are seeded into a single reverse
pass after the unroll.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .attention import TTTState
from .blockmask import BlockMask, MaskParams, build_blockmask
from .engine import FLAG_LOGITS, prefill, prefill_many
from .loss import EmptyBatchError, LossBatch, loss_backward_inplace, loss_forward, topk_distill_target
from .model import DraftConfig, DraftModel, TargetConfig, TargetModel, draft_forward
from .tensor import F32, Tensor

log = logging.getLogger(__name__)

PAD, BOS, SEP, EOS = 0, 1, 2, 3
FIRST_CONTENT = 4


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite."""


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


@dataclass
class GrammarParams:
    vocab_size: int = 256
    max_len: int = 64
    n_classes: int = 4  # successor depends on (class of token t-1, token t)
    dominant: float = 0.75
    zipf: float = 1.1
    copy_prob: float = 0.2
    prompt_len: Tuple[int, int] = (8, 20)
    response_len: Tuple[int, int] = (16, 40)
    table_seed: int = 1234

    def __post_init__(self):
        self.prompt_len = tuple(self.prompt_len)
        self.response_len = tuple(self.response_len)
        if self.vocab_size <= FIRST_CONTENT + 1:
            raise ValueError("vocabulary too small for the special tokens")
        if not 0.0 <= self.dominant <= 1.0 or not 0.0 <= self.copy_prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.prompt_len[0] < 2 or self.prompt_len[0] > self.prompt_len[1]:
            raise ValueError("prompt_len must be an increasing pair with minimum >= 2")
        if self.response_len[0] < 1 or self.response_len[0] > self.response_len[1]:
            raise ValueError("response_len must be an increasing pair with minimum >= 1")
        if self.prompt_len[1] + self.response_len[1] + 3 > self.max_len:
            raise ValueError("longest sample does not fit max_len")


@dataclass
class CorpusSample:
    tokens: np.ndarray
    loss_mask: np.ndarray  # True where the token belongs to the response (incl. EOS)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if self.tokens.shape != self.loss_mask.shape:
            raise ValueError("tokens and loss_mask differ in length")
        if not self.loss_mask.any():
            raise ValueError("sample has no loss position")

    @property
    def prompt(self) -> np.ndarray:
        """Tokens before the first loss position (ends with SEP)."""
        return self.tokens[: int(np.argmax(self.loss_mask))]

    def __eq__(self, other):
        return (
            isinstance(other, CorpusSample)
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.loss_mask, other.loss_mask)
        )


class MarkovSource:
    """Second-order source: a dominant successor per (class(prev), cur), else Zipf noise."""

    def __init__(self, g: GrammarParams):
        self.g = g
        rng = np.random.default_rng(g.table_seed)
        n_content = g.vocab_size - FIRST_CONTENT
        self.successor = rng.integers(FIRST_CONTENT, g.vocab_size, size=(g.n_classes, g.vocab_size))
        ranks = np.arange(1, n_content + 1, dtype=np.float64)
        w = ranks ** -g.zipf
        self.noise_ids = FIRST_CONTENT + rng.permutation(n_content)
        self.noise_p = w / w.sum()

    def cls(self, tok: int) -> int:
        return int(tok) % self.g.n_classes

    def next(self, prev: int, cur: int, rng) -> int:
        if rng.random() < self.g.dominant:
            return int(self.successor[self.cls(prev), cur])
        return int(self.noise_ids[rng.choice(len(self.noise_p), p=self.noise_p)])

    def sample(self, rng) -> CorpusSample:
        g = self.g
        n_prompt = int(rng.integers(g.prompt_len[0], g.prompt_len[1] + 1))
        n_resp = int(rng.integers(g.response_len[0], g.response_len[1] + 1))
        toks = [BOS, int(self.noise_ids[rng.choice(len(self.noise_p), p=self.noise_p)])]
        while len(toks) < n_prompt + 1:
            toks.append(self.next(toks[-2], toks[-1], rng))
        toks.append(SEP)
        resp: List[int] = []
        if rng.random() < g.copy_prob:
            span = int(rng.integers(2, min(8, n_prompt) + 1))
            resp.extend(toks[1 : 1 + span])
        while len(resp) < n_resp:
            hist = toks + resp
            resp.append(self.next(hist[-2], hist[-1], rng))
        resp = resp[:n_resp] + [EOS]
        mask = [False] * len(toks) + [True] * len(resp)
        return CorpusSample(np.array(toks + resp), np.array(mask))


def make_synthetic_corpus(seed: int, n_samples: int, grammar: Optional[GrammarParams] = None) -> List[CorpusSample]:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    src = MarkovSource(grammar or GrammarParams())
    rng = np.random.default_rng(seed)
    return [src.sample(rng) for _ in range(n_samples)]


def save_corpus(path, corpus: Iterable[CorpusSample]) -> None:
    with open(path, "w") as fh:
        for s in corpus:
            fh.write(json.dumps({"tokens": s.tokens.tolist(), "mask": s.loss_mask.astype(int).tolist()}) + "\n")


def load_corpus(path) -> List[CorpusSample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(CorpusSample(d["tokens"], d["mask"]))
    return out


def token_histogram(corpus: Iterable[CorpusSample], vocab_size: int) -> np.ndarray:
    h = np.zeros(vocab_size, dtype=np.int64)
    for s in corpus:
        np.add.at(h, s.tokens, 1)
    return h


def frequency_vocab_map(corpus: Iterable[CorpusSample], vocab_size: int, draft_vocab: int) -> np.ndarray:
    """The ``draft_vocab`` most frequent target ids (ties: lower id first), ascending."""
    h = token_histogram(corpus, vocab_size)
    order = np.lexsort((np.arange(vocab_size), -h))
    return np.sort(order[:draft_vocab])


def split_corpus(corpus: Sequence[CorpusSample], holdout: float = 0.1):
    n_hold = max(1, int(round(len(corpus) * holdout))) if len(corpus) > 1 else 0
    return list(corpus[: len(corpus) - n_hold]), list(corpus[len(corpus) - n_hold :])


# ---------------------------------------------------------------------------
# optimisation helpers
# ---------------------------------------------------------------------------


def cosine_lr(step: int, total: int, base: float, warmup_frac: float = 0.0, floor: float = 0.0) -> float:
    warm = int(math.ceil(total * warmup_frac))
    if step < warm:
        return base * (step + 1) / warm
    span = max(1, total - warm)
    t = min(1.0, (step - warm) / span)
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.t = 0

    def step(self, lr: float, clip: Optional[float] = None) -> float:
        norm = tn.parameters_grad_norm(self.params)
        scale = 1.0
        if clip is not None and norm > clip:
            scale = clip / norm
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64) * scale
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            w = p.data.astype(np.float64)
            if p.ndim >= 2:
                w *= 1 - lr * self.wd
            p.data[...] = (w - lr * upd).astype(F32)
        return norm

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def _check_finite(value: float, what: str, step: int):
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{what} is {value} at optimizer step {step}")


# ---------------------------------------------------------------------------
# target pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 3
    batch_size: int = 16
    lr: float = 3e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    holdout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch_size and lr must be positive")


def _pad(seqs: Sequence[np.ndarray], T: int) -> np.ndarray:
    out = np.full((len(seqs), T), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _lm_batch(samples: Sequence[CorpusSample]):
    """Padded tokens plus next-token one-hot targets and validity mask [B*T]."""
    T = max(len(s.tokens) for s in samples)
    toks = _pad([s.tokens for s in samples], T)
    nxt = np.full_like(toks, PAD)
    nxt[:, :-1] = toks[:, 1:]
    valid = np.zeros(toks.shape, dtype=bool)
    for i, s in enumerate(samples):
        valid[i, : len(s.tokens) - 1] = True
    return toks, nxt.reshape(-1), valid.reshape(-1)


def _one_hot(ids: np.ndarray, V: int) -> np.ndarray:
    out = np.zeros((len(ids), V), dtype=F32)
    out[np.arange(len(ids)), ids] = 1.0
    return out


def perplexity(model: TargetModel, samples: Sequence[CorpusSample], batch_size: int = 32) -> float:
    total, count = 0.0, 0
    with tn.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            toks, nxt, valid = _lm_batch(chunk)
            logits, _ = model.forward(toks)
            z = logits.data.reshape(-1, logits.shape[-1])
            n = int(valid.sum())
            total += loss_forward(LossBatch(z, _one_hot(nxt, z.shape[1]), valid)) * n
            count += n
    return math.exp(total / count)


def pretrain_target(
    corpus: Sequence[CorpusSample],
    config: PretrainConfig,
    model_config: Optional[TargetConfig] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> Tuple[TargetModel, dict]:
    """Next-token training of a fresh target; returns the model and eval perplexities."""
    model_config = model_config or TargetConfig(seed=config.seed)
    model = TargetModel(model_config)
    train, held = split_corpus(corpus, config.holdout)
    if not held:
        held = train
    ppl0 = perplexity(model, held)
    opt = AdamW(model.parameters(), weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total = config.epochs * steps_per_epoch
    step = 0
    V = model_config.vocab_size
    for _ in range(config.epochs):
        order = rng.permutation(len(train))
        for b in range(steps_per_epoch):
            chunk = [train[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
            toks, nxt, valid = _lm_batch(chunk)
            logits, _ = model.forward(toks)
            z = logits.data.reshape(-1, V)
            batch = LossBatch(z, _one_hot(nxt, V), valid)
            loss = loss_forward(batch)
            _check_finite(loss, "target loss", step)
            loss_backward_inplace(batch)
            tn.backward_many([(logits, logits.data)])
            lr = cosine_lr(step, total, config.lr, config.warmup_frac)
            opt.step(lr, config.grad_clip)
            opt.zero_grad()
            if on_step is not None:
                on_step({"step": step, "lr": lr, "loss": loss})
            step += 1
    ppl1 = perplexity(model, held)
    _check_finite(ppl1, "eval perplexity", step)
    log.info("target perplexity %.2f -> %.2f", ppl0, ppl1)
    return model, {"ppl_init": ppl0, "ppl_final": ppl1, "steps": step}


# ---------------------------------------------------------------------------
# regeneration
# ---------------------------------------------------------------------------


def regenerate_corpus(
    engine, corpus: Sequence[CorpusSample], temperature: float = 0.8, seed: int = 0, max_len: int = 64
) -> List[CorpusSample]:
    """Replace each response with a target sample at ``temperature``; prompts stay as-is."""
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    rng = np.random.default_rng(seed)
    out = []
    for s in corpus:
        toks = [int(t) for t in s.prompt]
        n_prompt = len(toks)
        while len(toks) < max_len:
            logits, _ = prefill(engine, toks, FLAG_LOGITS)
            z = logits[-1].astype(np.float64) / temperature
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            t = int(rng.choice(len(p), p=p))
            toks.append(t)
            if t == EOS:
                break
        mask = np.zeros(len(toks), dtype=bool)
        mask[n_prompt:] = True
        out.append(CorpusSample(np.array(toks), mask))
    return out


def span_perplexity(model: TargetModel, corpus: Sequence[CorpusSample]) -> float:
    """Target perplexity restricted to response (loss-mask) tokens."""
    total, count = 0.0, 0
    with tn.no_grad():
        for s in corpus:
            logits, _ = model.forward(s.tokens)
            z = logits.data[:-1]
            valid = s.loss_mask[1:]
            n = int(valid.sum())
            total += loss_forward(LossBatch(z, _one_hot(s.tokens[1:], z.shape[1]), valid)) * n
            count += n
    return math.exp(total / count)


# ---------------------------------------------------------------------------
# draft training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    ttt_len: int = 7
    lr: float = 3e-3
    warmup_frac: float = 0.05
    min_lr: float = 0.0
    epochs: int = 2
    batch_size: int = 16
    seed: int = 0
    regenerate_data: bool = False
    regen_temperature: float = 0.8
    step_weights: Optional[List[float]] = None
    betas: Tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    q_len: int = 64
    block: int = 16
    ttt_tokens: str = "ground_truth"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.ttt_len < 1:
            raise ValueError("ttt_len must be >= 1")
        if not self.regen_temperature > 0:
            raise ValueError("regeneration temperature must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.step_weights is None:
            self.step_weights = [1.0] * self.ttt_len
        self.step_weights = [float(w) for w in self.step_weights]
        if len(self.step_weights) != self.ttt_len:
            raise ValueError("need one loss weight per TTT step")
        if self.ttt_tokens not in ("ground_truth", "draft"):
            raise ValueError("ttt_tokens must be 'ground_truth' or 'draft'")


@dataclass
class PreparedSample:
    tokens: np.ndarray  # [T_b]
    loss_mask: np.ndarray  # [T_b]
    fused: np.ndarray  # [T_b, 3d]
    teacher: np.ndarray  # [T_b, V_draft]: distilled target distribution at each position

    @property
    def length(self) -> int:
        return len(self.tokens)


def prepare_samples(engine, corpus: Sequence[CorpusSample], vocab_map: np.ndarray) -> List[PreparedSample]:
    """Target prefill once per sample (the target is frozen)."""
    out = []
    for s, (logits, fused) in zip(corpus, prefill_many(engine, [c.tokens for c in corpus])):
        out.append(PreparedSample(s.tokens, s.loss_mask, fused, topk_distill_target(logits, vocab_map)))
    return out


class _MaskCache:
    def __init__(self, q_len: int, block: int):
        self.q_len, self.block = q_len, block
        self._cache: Dict[Tuple[int, int], BlockMask] = {}

    def get(self, seq_len: int, step: int) -> BlockMask:
        key = (seq_len, step)
        if key not in self._cache:
            self._cache[key] = build_blockmask(MaskParams(self.q_len, seq_len, step, self.block))
        return self._cache[key]


def step_targets(batch: Sequence[PreparedSample], step: int, q_len: int):
    """Token inputs [B, Q], teacher rows [B*Q, V_d] and row validity [B*Q] for one TTT step.

    Row ``t`` reads ``x[t+step+1]`` and is scored against the teacher at
    position ``t+step+1``, which predicts ``x[t+step+2]``; the row counts
    only when that token exists and is a response token.
    """
    B = len(batch)
    V = batch[0].teacher.shape[1]
    toks = np.full((B, q_len), PAD, dtype=np.int64)
    teacher = np.zeros((B, q_len, V), dtype=F32)
    valid = np.zeros((B, q_len), dtype=bool)
    for b, s in enumerate(batch):
        T = s.length
        n_in = max(0, T - step - 1)  # rows whose input token exists
        toks[b, :n_in] = s.tokens[step + 1 : step + 1 + n_in]
        teacher[b, :n_in] = s.teacher[step + 1 : step + 1 + n_in]
        n_lab = max(0, T - step - 2)
        valid[b, :n_lab] = s.loss_mask[step + 2 : step + 2 + n_lab]
        assert not valid[b, max(0, T - step - 1) :].any(), "label beyond the sequence end"
    return toks, teacher.reshape(B * q_len, V), valid.reshape(-1)


def _fused_batch(batch: Sequence[PreparedSample], q_len: int) -> np.ndarray:
    w = batch[0].fused.shape[1]
    out = np.zeros((len(batch), q_len, w), dtype=F32)
    for b, s in enumerate(batch):
        out[b, : s.length] = s.fused
    return out


def ttt_batch_loss(
    draft: DraftModel, batch: Sequence[PreparedSample], config: TrainConfig, masks: Optional[_MaskCache] = None
) -> Tuple[List[Optional[float]], List[Optional[float]], List[Tuple[Tensor, np.ndarray]]]:
    """Unroll ``ttt_len`` steps; return per-step losses, top-1 agreement and backward seeds.

    The seeds hold dL/dlogits written in place into each step's logits buffer.
    Steps without any labelled row report ``None``.
    """
    Q = config.q_len
    masks = masks or _MaskCache(Q, config.block)
    state = TTTState()
    feats = Tensor(_fused_batch(batch, Q))
    losses, agree, seeds = [], [], []
    prev_pred = None
    for j in range(config.ttt_len):
        toks, teacher, valid = step_targets(batch, j, Q)
        if config.ttt_tokens == "draft" and prev_pred is not None:
            keep = toks != PAD
            toks = np.where(keep, prev_pred, toks)
        step_masks = [masks.get(s.length, j) for s in batch]
        logits, feats = draft_forward(draft, feats, toks, state, step_masks)
        z = logits.data.reshape(-1, logits.shape[-1])
        prev_pred = draft.vocab_map[np.argmax(logits.data, axis=-1)]
        if not valid.any():
            losses.append(None)
            agree.append(None)
            continue
        lb = LossBatch(z, teacher, valid, upstream=config.step_weights[j])
        losses.append(loss_forward(lb))
        hit = np.argmax(z[valid], axis=1) == np.argmax(teacher[valid], axis=1)
        agree.append(float(hit.mean()))
        loss_backward_inplace(lb)
        seeds.append((logits, logits.data))
    return losses, agree, seeds


def train_draft(
    engine,
    draft: DraftModel,
    corpus: Sequence[CorpusSample],
    config: TrainConfig,
    metrics_path=None,
    on_step: Optional[Callable[[dict], None]] = None,
    prepared: Optional[List[PreparedSample]] = None,
) -> Tuple[DraftModel, List[dict]]:
    """TTT training of ``draft`` against the target behind ``engine``.

    ``prepared`` lets callers reuse target prefills across runs that share a
    corpus and vocabulary map. Metrics go to ``metrics_path`` as JSON lines.
    """
    if config.regenerate_data:
        corpus = regenerate_corpus(engine, corpus, config.regen_temperature, config.seed, config.q_len)
    if prepared is None:
        prepared = prepare_samples(engine, corpus, draft.vocab_map)
    if not prepared:
        raise ValueError("empty training corpus")
    if max(p.length for p in prepared) > config.q_len:
        raise ValueError(f"sample longer than q_len={config.q_len}")
    opt = AdamW(draft.parameters(), config.betas, config.eps, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    masks = _MaskCache(config.q_len, config.block)
    steps_per_epoch = math.ceil(len(prepared) / config.batch_size)
    total = config.epochs * steps_per_epoch
    history: List[dict] = []
    sink = open(metrics_path, "w") if metrics_path is not None else None
    try:
        step = 0
        for _ in range(config.epochs):
            order = rng.permutation(len(prepared))
            for b in range(steps_per_epoch):
                batch = [prepared[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
                losses, agree, seeds = ttt_batch_loss(draft, batch, config, masks)
                for v in losses:
                    if v is not None:
                        _check_finite(v, "draft loss", step)
                if seeds:
                    tn.backward_many(seeds)
                lr = cosine_lr(step, total, config.lr, config.warmup_frac, config.min_lr)
                opt.step(lr, config.grad_clip)
                opt.zero_grad()
                rec = {"step": step, "lr": lr, "loss_per_ttt_step": losses, "top1_agreement": agree}
                history.append(rec)
                if sink is not None:
                    sink.write(json.dumps(rec) + "\n")
                if on_step is not None:
                    on_step(rec)
                step += 1
    finally:
        if sink is not None:
            sink.close()
    return draft, history


def new_draft(
    target: TargetModel,
    corpus: Sequence[CorpusSample],
    draft_config: Optional[DraftConfig] = None,
    seed: int = 0,
    copy_embed: bool = True,
) -> DraftModel:
    """Fresh draft sized to ``target`` with a frequency-based vocabulary map.

    With ``copy_embed`` the (still trainable) token embedding starts from the target's.
    """
    tc = target.cfg
    cfg = draft_config or DraftConfig(d_model=tc.d_model, target_vocab=tc.vocab_size, seed=seed)
    if cfg.d_model != tc.d_model or cfg.target_vocab != tc.vocab_size:
        raise ValueError("draft dimensions do not match the target")
    vmap = frequency_vocab_map(corpus, tc.vocab_size, cfg.draft_vocab)
    draft = DraftModel(cfg, vmap)
    if copy_embed:
        draft.params["embed"].data[...] = target.params["embed"].data
    return draft
