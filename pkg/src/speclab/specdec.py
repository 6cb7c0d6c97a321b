"""Speculative decoding: tree/chain drafting, target verification, statistics.

A decoding cycle starts from a verified context whose last token (the
previous cycle's bonus token) has no target features yet. The draft grows a
candidate tree below that tip, the target scores context plus tree in one
tree-masked forward, and the longest agreeing root path is accepted
together with one token chosen by the target.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Any, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from . import analytics
from .engine import prefill, prefill_tree
from .model import DraftModel

BENCH_COLUMNS = ["config", "prompts", "cycles", "proposed", "accepted", "tau", "alpha_hat", "modeled_speedup"]


class Mode(str, enum.Enum):
    GREEDY = "greedy"
    STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class SpecConfig:
    steps: int = 3
    topk: int = 1
    draft_tokens: int = 4
    mode: Mode = Mode.GREEDY
    temperature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.steps < 1 or self.topk < 1 or self.draft_tokens < 1:
            raise ValueError("steps, topk and draft_tokens must all be >= 1")
        if self.mode is Mode.STOCHASTIC:
            if self.topk != 1:
                raise ValueError("stochastic verification needs a chain (topk=1)")
            if not self.temperature > 0:
                raise ValueError("temperature must be > 0")

    @property
    def label(self) -> str:
        return f"({self.steps},{self.topk},{self.draft_tokens})"

    @property
    def chain_len(self) -> int:
        return min(self.steps, self.draft_tokens)


PAPER_CONFIGS = [SpecConfig(3, 1, 4), SpecConfig(5, 1, 6), SpecConfig(5, 3, 6), SpecConfig(7, 1, 8), SpecConfig(7, 4, 8)]


# ---------------------------------------------------------------------------
# drafters
# ---------------------------------------------------------------------------


class Drafter(Protocol):
    """Anything that can score children of tree nodes.

    ``vocab_map[i]`` is the target token id of draft index ``i``. ``root``
    returns log-probabilities for the first tree level plus a handle for the
    tip; ``expand`` takes parent handles and the chosen child tokens (target
    ids) and returns the children's log-probabilities and handles.
    """

    vocab_map: np.ndarray

    def root(self, tokens: np.ndarray, fused: np.ndarray) -> Tuple[np.ndarray, Any]: ...

    def expand(self, parents: Sequence[Any], tokens: np.ndarray) -> Tuple[np.ndarray, List[Any]]: ...


def log_softmax(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class _Node:
    feature: np.ndarray
    chain_k: np.ndarray
    chain_v: np.ndarray


class ModelDrafter:
    """Draft model wrapper: prefix pass at the tip, then one TTT step per level."""

    def __init__(self, model: DraftModel):
        self.model = model
        self.vocab_map = model.vocab_map
        self._prefix = None
        self._pos = 0

    def root(self, tokens, fused):
        tokens = np.asarray(tokens)
        n = len(tokens)
        if fused.shape[0] != n - 1:
            raise ValueError("need target features for every context token but the tip")
        out = self.model.prefix_pass(fused, tokens[1:])
        self._prefix = out
        self._pos = n - 2
        d = self.model.cfg.d_model
        node = _Node(out["features"][-1], np.zeros((0, d), np.float32), np.zeros((0, d), np.float32))
        return log_softmax(out["logits"][-1]), node

    def expand(self, parents, tokens):
        feats = np.stack([p.feature for p in parents])
        ck = np.stack([p.chain_k for p in parents])
        cv = np.stack([p.chain_v for p in parents])
        logits, out, k, v = self.model.tree_step(self._prefix, feats, tokens, ck, cv, self._pos)
        kids = [
            _Node(out[i], np.concatenate([ck[i], k[i : i + 1]]), np.concatenate([cv[i], v[i : i + 1]]))
            for i in range(len(parents))
        ]
        return log_softmax(logits), kids


# ---------------------------------------------------------------------------
# tree
# ---------------------------------------------------------------------------


@dataclass
class DraftTree:
    """Candidate nodes in topological order; parent -1 means the context tip."""

    tokens: List[int] = field(default_factory=list)
    parents: List[int] = field(default_factory=list)
    depths: List[int] = field(default_factory=list)
    scores: List[float] = field(default_factory=list)
    draft_probs: List[np.ndarray] = field(default_factory=list)  # q over target vocab (chain sampling only)

    def __len__(self):
        return len(self.tokens)

    def children(self, node: int) -> List[int]:
        return [i for i, p in enumerate(self.parents) if p == node]

    def path(self, node: int) -> List[int]:
        out = []
        while node >= 0:
            out.append(node)
            node = self.parents[node]
        return out[::-1]

    def check(self, limit: Optional[int] = None):
        for i, p in enumerate(self.parents):
            if not -1 <= p < i:
                raise ValueError(f"node {i} has parent {p} that does not precede it")
            want = 1 if p < 0 else self.depths[p] + 1
            if self.depths[i] != want:
                raise ValueError(f"node {i} has depth {self.depths[i]}, expected {want}")
        if limit is not None and len(self) > limit:
            raise ValueError("tree larger than the draft-token budget")


def _topk(logp: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries; ties broken by lower index."""
    order = np.lexsort((np.arange(len(logp)), -logp))
    return order[:k]


def draft_propose(drafter: Drafter, tokens, fused, config: SpecConfig) -> DraftTree:
    """Grow ``steps`` levels with ``topk`` children each; keep the best ``draft_tokens``.

    Selection key is (-cumulative log-prob, depth, token path). Because a
    child never outscores its parent, the kept set is closed under
    ancestors, and pruning each level to the budget before expanding it
    gives the same result as building the full tree.
    """
    if len(tokens) < 1:
        raise ValueError("context must be non-empty")
    budget = config.draft_tokens
    vmap = drafter.vocab_map
    root_lp, root = drafter.root(np.asarray(tokens), fused)
    logp = [root_lp]

    # candidates are (key, parent candidate index, token, score)
    cand: List[tuple] = []
    frontier = [((), 0.0, root, -1)]  # (token path, score, handle, candidate index)
    for depth in range(1, config.steps + 1):
        level = []
        for fi, ((path, score, _, _), lp) in enumerate(zip(frontier, logp)):
            for idx in _topk(lp, config.topk):
                tok = int(vmap[idx])
                s = score + float(lp[idx])
                level.append(((-s, depth, path + (tok,)), fi, tok, s))
        level.sort(key=lambda c: c[0])
        level = level[:budget]
        base = len(cand)
        cand.extend((key, frontier[fi][3], tok, s) for key, fi, tok, s in level)
        if depth == config.steps:
            break
        logp, kids = drafter.expand([frontier[c[1]][2] for c in level], np.array([c[2] for c in level]))
        frontier = [(c[0][2], c[3], h, base + i) for i, (c, h) in enumerate(zip(level, kids))]

    keep = sorted(range(len(cand)), key=lambda i: cand[i][0])[:budget]
    keep_set = set(keep)
    order = sorted(keep, key=lambda i: (cand[i][0][1], cand[i][0]))
    new_index = {old: new for new, old in enumerate(order)}
    tree = DraftTree()
    for i in order:
        key, parent, tok, s = cand[i]
        if parent >= 0 and parent not in keep_set:
            raise AssertionError("selection lost an ancestor")
        tree.tokens.append(tok)
        tree.parents.append(new_index[parent] if parent >= 0 else -1)
        tree.depths.append(key[1])
        tree.scores.append(s)
    return tree


def draft_chain_sample(drafter: Drafter, tokens, fused, n: int, temperature: float, vocab: int, rng) -> DraftTree:
    """Sample a chain of ``n`` tokens from the draft (at ``temperature``)."""
    vmap = drafter.vocab_map
    logp, h = drafter.root(np.asarray(tokens), fused)
    tree = DraftTree()
    for depth in range(1, n + 1):
        probs = np.exp(log_softmax(logp, temperature))
        q = np.zeros(vocab)
        q[vmap] = probs
        idx = int(rng.choice(len(probs), p=probs))
        tree.tokens.append(int(vmap[idx]))
        tree.parents.append(depth - 2)
        tree.depths.append(depth)
        tree.scores.append(float(np.log(probs[idx])))
        tree.draft_probs.append(q)
        if depth < n:
            lps, hs = drafter.expand([h], np.array([vmap[idx]]))
            logp, h = lps[0], hs[0]
    return tree


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def _tree_request(context, tree: DraftTree):
    n = len(context)
    toks = np.concatenate([np.asarray(context, dtype=np.int64), np.asarray(tree.tokens, dtype=np.int64)])
    parents = np.concatenate([np.arange(-1, n - 1), [n + p if p >= 0 else n - 1 for p in tree.parents]]).astype(np.int32)
    return toks, parents


def verify_greedy(engine, tree: DraftTree, context) -> Tuple[List[int], int, np.ndarray]:
    """(accepted tokens, bonus token, target fused features for context + accepted)."""
    n = len(context)
    toks, parents = _tree_request(context, tree)
    logits, fused = prefill_tree(engine, toks, parents)
    accepted: List[int] = []
    rows = list(range(n))
    at_row, at_node = n - 1, -1
    while True:
        want = int(np.argmax(logits[at_row]))
        nxt = [c for c in tree.children(at_node) if tree.tokens[c] == want]
        if not nxt:
            return accepted, want, fused[rows]
        at_node = nxt[0]
        at_row = n + at_node
        accepted.append(want)
        rows.append(at_row)


def acceptance_prob(p: np.ndarray, q: np.ndarray, x: int) -> float:
    if q[x] <= 0:
        raise AssertionError(f"draft proposed token {x} outside its own support")
    return min(1.0, float(p[x]) / float(q[x]))


def residual(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Normalized max(0, p - q): the law to resample from after a rejection."""
    r = np.maximum(0.0, np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64))
    tot = r.sum()
    if tot <= 0:
        # p == q: rejection has probability zero; any law will do
        return np.asarray(p, dtype=np.float64) / np.sum(p)
    return r / tot


def single_step_law(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Exact output law of one draft/verify step, enumerating every proposal."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    out = np.zeros_like(p)
    res = residual(p, q)
    for x in np.nonzero(q > 0)[0]:
        a = acceptance_prob(p, q, x)
        out[x] += q[x] * a
        out += q[x] * (1.0 - a) * res
    return out


def verify_stochastic(target_probs: np.ndarray, draft_probs: Sequence[np.ndarray], proposals: Sequence[int], rng) -> Tuple[int, int]:
    """Sequential accept/resample over a chain.

    ``target_probs`` has one row per proposal plus one for the bonus slot.
    Returns (number accepted, correction or bonus token).
    """
    for i, x in enumerate(proposals):
        p, q = target_probs[i], draft_probs[i]
        if rng.random() < acceptance_prob(p, q, x):
            continue
        r = residual(p, q)
        return i, int(rng.choice(len(r), p=r))
    p = np.asarray(target_probs[len(proposals)], dtype=np.float64)
    return len(proposals), int(rng.choice(len(p), p=p / p.sum()))


def softmax(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax(x, temperature))


# ---------------------------------------------------------------------------
# decoding loop
# ---------------------------------------------------------------------------


@dataclass
class AcceptanceStats:
    cycles: int = 0
    proposed: int = 0
    accepted: int = 0
    prompts: int = 0
    histogram: List[int] = field(default_factory=list)  # cycles that accepted >= i+1 tokens

    @property
    def emitted(self) -> int:
        return self.accepted + self.cycles

    @property
    def tau(self) -> float:
        return self.emitted / self.cycles if self.cycles else 0.0

    def record(self, proposed: int, accepted: int):
        self.cycles += 1
        self.proposed += proposed
        self.accepted += accepted
        while len(self.histogram) < accepted:
            self.histogram.append(0)
        for i in range(accepted):
            self.histogram[i] += 1

    def merge(self, other: "AcceptanceStats"):
        self.cycles += other.cycles
        self.proposed += other.proposed
        self.accepted += other.accepted
        self.prompts += other.prompts
        for i, h in enumerate(other.histogram):
            if i < len(self.histogram):
                self.histogram[i] += h
            else:
                self.histogram.append(h)


def generate(engine, drafter: Drafter, prompt, max_new: int, config: SpecConfig, rng=None) -> Tuple[List[int], AcceptanceStats]:
    """Decode ``max_new`` tokens after ``prompt``. The prefill token is not a cycle."""
    if max_new < 1:
        raise ValueError("generation budget must be >= 1")
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be non-empty")
    stats = AcceptanceStats(prompts=1)
    if config.mode is Mode.STOCHASTIC and rng is None:
        rng = np.random.default_rng(0)
    logits, fused = prefill(engine, prompt)
    if config.mode is Mode.GREEDY:
        first = int(np.argmax(logits[-1]))
    else:
        first = int(rng.choice(logits.shape[1], p=softmax(logits[-1], config.temperature)))
    ctx = prompt + [first]
    out = [first]
    while len(out) < max_new:
        if config.mode is Mode.GREEDY:
            tree = draft_propose(drafter, ctx, fused, config)
            acc, bonus, new_fused = verify_greedy(engine, tree, ctx)
        else:
            vocab = logits.shape[1]
            tree = draft_chain_sample(drafter, ctx, fused, config.chain_len, config.temperature, vocab, rng)
            toks, parents = _tree_request(ctx, tree)
            t_logits, t_fused = prefill_tree(engine, toks, parents)
            n = len(ctx)
            rows = [n - 1] + [n + i for i in range(len(tree))]
            p = softmax(t_logits[rows], config.temperature)
            k, bonus = verify_stochastic(p, tree.draft_probs, tree.tokens, rng)
            acc = tree.tokens[:k]
            new_fused = t_fused[: n + k]
        stats.record(len(tree), len(acc))
        ctx += acc + [bonus]
        out += acc + [bonus]
        fused = new_fused
    return out[:max_new], stats


def vanilla_greedy(engine, prompt, max_new: int) -> List[int]:
    """Reference decoder: one full target prefill per emitted token."""
    ctx = [int(t) for t in prompt]
    out = []
    for _ in range(max_new):
        logits, _ = prefill(engine, ctx)
        t = int(np.argmax(logits[-1]))
        out.append(t)
        ctx.append(t)
    return out


@dataclass
class BenchResult:
    config: SpecConfig
    stats: AcceptanceStats
    alpha_hat: float
    modeled_speedup: float
    outputs: List[List[int]]

    def row(self) -> dict:
        s = self.stats
        return {
            "config": self.config.label,
            "prompts": s.prompts,
            "cycles": s.cycles,
            "proposed": s.proposed,
            "accepted": s.accepted,
            "tau": f"{s.tau:.6f}",
            "alpha_hat": f"{self.alpha_hat:.6f}",
            "modeled_speedup": f"{self.modeled_speedup:.6f}",
        }


def run_benchmark(engine, drafter: Drafter, prompts, config: SpecConfig, max_new: int = 64, cost_ratio: Optional[float] = None, seed: int = 0) -> BenchResult:
    """Decode every prompt and aggregate acceptance statistics.

    The modeled speedup inverts the measured tau into an i.i.d. acceptance
    rate at ``gamma = steps`` (an approximation: real acceptance is neither
    i.i.d. nor position-independent). ``cost_ratio`` defaults to the
    draft/target multiply ratio when the drafter wraps a :class:`DraftModel`.
    """
    if max_new < 1:
        raise ValueError("generation budget must be >= 1")
    rng = np.random.default_rng(seed)
    total = AcceptanceStats()
    outputs = []
    for prompt in prompts:
        out, st = generate(engine, drafter, prompt, max_new, config, rng)
        outputs.append(out)
        total.merge(st)
    if cost_ratio is None:
        cost_ratio = 0.0
        model = getattr(drafter, "model", None)
        target = getattr(engine, "model", None)
        if model is not None and target is not None:
            cost_ratio = model.count_flops() / target.count_flops()
    alpha = analytics.invert_alpha(total.tau, config.steps) if total.cycles else 0.0
    s = analytics.speedup(analytics.SpeedupParams(alpha, config.steps, cost_ratio))
    return BenchResult(config, total, alpha, s, outputs)


def bench_csv(results: Sequence[BenchResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()
