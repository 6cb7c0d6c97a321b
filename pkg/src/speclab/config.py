"""Run configuration: one JSON document, validated against dataclass schemas.

Unknown keys and type mismatches raise :class:`ConfigError` naming the
offending key path (e.g. ``train.ttt_len``).
"""

from __future__ import annotations

import dataclasses
import enum
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional, Tuple

from .model import DraftConfig, FFNVariant, TargetConfig
from .specdec import Mode, SpecConfig
from .trainer import GrammarParams, PretrainConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path or '<root>'}: {msg}")
        self.path = path


@dataclass
class CorpusSection:
    seed: int = 0
    n_samples: int = 2000
    holdout: float = 0.1
    grammar: GrammarParams = field(default_factory=GrammarParams)


@dataclass
class TargetSection:
    model: TargetConfig = field(default_factory=TargetConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)


@dataclass
class DraftSection:
    d_ff: int = 256
    draft_vocab: int = 128
    ffn_variant: FFNVariant = FFNVariant.DENSE
    n_experts: int = 2
    router_topk: int = 1
    combine: str = "concat"
    copy_target_embed: bool = True
    seed: int = 0


@dataclass
class SpecSection:
    configs: List[List[int]] = field(default_factory=lambda: [[3, 1, 4]])
    mode: Mode = Mode.GREEDY
    temperature: float = 1.0
    max_new: int = 32
    n_prompts: int = 20
    seed: int = 0

    def spec_configs(self) -> List[SpecConfig]:
        return [SpecConfig(s, k, n, self.mode, self.temperature) for s, k, n in self.configs]


@dataclass
class EngineSection:
    max_tokens: int = 4096
    max_concurrent: int = 4
    listen: str = "127.0.0.1:0"


@dataclass
class RunConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    target: TargetSection = field(default_factory=TargetSection)
    draft: DraftSection = field(default_factory=DraftSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    specdec: SpecSection = field(default_factory=SpecSection)
    engine: EngineSection = field(default_factory=EngineSection)

    def with_seed(self, seed: int) -> "RunConfig":
        """Override every seed in the document."""
        d = to_dict(self)
        d["corpus"]["seed"] = seed
        d["target"]["model"]["seed"] = seed
        d["target"]["pretrain"]["seed"] = seed
        d["draft"]["seed"] = seed
        d["train"]["seed"] = seed
        d["specdec"]["seed"] = seed
        return from_dict(RunConfig, d)

    def draft_config(self) -> DraftConfig:
        t = self.target.model
        s = self.draft
        return DraftConfig(
            d_model=t.d_model,
            target_vocab=t.vocab_size,
            draft_vocab=s.draft_vocab,
            d_ff=s.d_ff,
            ffn_variant=s.ffn_variant,
            n_experts=s.n_experts,
            router_topk=s.router_topk,
            combine=s.combine,
            seed=s.seed,
        )


def _check_scalar(tp, value, path):
    if tp is bool:
        ok = isinstance(value, bool)
    elif tp is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif tp is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif tp is str:
        ok = isinstance(value, str)
    elif isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            raise ConfigError(path, f"expected one of {[e.value for e in tp]}, got {value!r}") from None
    else:
        return value
    if not ok:
        raise ConfigError(path, f"expected {tp.__name__}, got {type(value).__name__}")
    return value


def _convert(tp, value, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin in (list, tuple, List, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(path, f"expected {len(args)} items, got {len(value)}")
            return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
        elem = args[0] if args else Any
        return [_convert(elem, v, f"{path}[{i}]") for i, v in enumerate(value)]
    return _check_scalar(tp, value, path)


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from a mapping; unknown keys are errors."""
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        kwargs[key] = _convert(hints[key], value, sub)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(path, str(e)) from None


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError("", f"config file {path} not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("", f"invalid JSON in {path}: {e}") from None
    return from_dict(RunConfig, data)
