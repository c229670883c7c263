"""Model/run configuration and its line-oriented ``key = value`` file format."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .corpus import Limits

DATASETS = ("persona_original", "persona_revised", "cmudog")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AblationFlags:
    disable_context_selector: bool = False
    disable_knowledge_selector: bool = False
    disable_post_selection: bool = False
    drop_context: bool = False
    drop_knowledge: bool = False

    def __post_init__(self):
        if self.drop_context and self.drop_knowledge:
            raise ConfigError("drop_context and drop_knowledge cannot both be set")

    def active(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]


ABLATIONS = tuple(f.name for f in fields(AblationFlags))


@dataclass(frozen=True)
class ModelConfig:
    dataset: str = "persona_original"
    data_dir: str = ""
    # representation
    pretrained_dim: int = 300
    corpus_dim: int = 100
    char_dim: int = 16
    char_filters: int = 50
    char_windows: tuple[int, ...] = (3, 4, 5)
    max_word_chars: int = 20
    freeze_char_conv: bool = False
    # network
    hidden: int = 300
    heads: int = 3
    hops: int = 3
    mlp_hidden: int = 256
    head_activation: str = "relu"
    init_scale: float = 0.08
    layer_norm_eps: float = 1e-6
    renormalize_hop_scores: bool = False
    separate_aggregators: bool = False
    # limits
    max_utterances: int = 15
    max_knowledge: int = 5
    max_tokens: int = 20
    n_candidates: int = 20
    # optimization
    learning_rate: float = 0.00025
    batch_size: int = 12
    max_epochs: int = 20
    patience: int = 3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    dtype: str = "float32"
    # corpus embedding training
    min_freq: int = 1
    skipgram_window: int = 5
    skipgram_negatives: int = 5
    skipgram_epochs: int = 5
    skipgram_lr: float = 0.025
    # ablations
    disable_context_selector: bool = False
    disable_knowledge_selector: bool = False
    disable_post_selection: bool = False
    drop_context: bool = False
    drop_knowledge: bool = False

    def __post_init__(self):
        if self.dataset not in DATASETS and self.dataset != "synthetic":
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.head_activation not in ("relu", "tanh"):
            raise ConfigError("head_activation must be 'relu' or 'tanh'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.hops < 1 or self.heads < 1:
            raise ConfigError("hops and heads must be positive")
        self.ablations  # validates the flag combination

    @property
    def ablations(self) -> AblationFlags:
        return AblationFlags(**{name: getattr(self, name) for name in ABLATIONS})

    @property
    def limits(self) -> Limits:
        return Limits(self.max_utterances, self.max_knowledge, self.max_tokens, self.n_candidates)

    @property
    def embed_dim(self) -> int:
        return self.pretrained_dim + self.corpus_dim + self.char_filters * len(self.char_windows)

    def with_ablations(self, names) -> "ModelConfig":
        unknown = set(names) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation flags {sorted(unknown)}")
        return replace(self, **{name: True for name in names})

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
        return cls(**values)

    @classmethod
    def for_dataset(cls, dataset: str, **overrides) -> "ModelConfig":
        if dataset == "cmudog":
            base = dict(max_utterances=8, max_knowledge=20, max_tokens=40, learning_rate=0.0001, batch_size=6)
        else:
            base = {}
        base.update(overrides)
        return cls(dataset=dataset, **base)


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale configuration used by the gradient oracle and the overfit checks.

    Word representation is 12-d (6 pretrained + 3 corpus + 3 char), hidden 4.
    """
    base = dict(dataset="synthetic", pretrained_dim=6, corpus_dim=3, char_dim=4, char_filters=1,
                hidden=4, heads=3, hops=2, mlp_hidden=8, max_utterances=2, max_knowledge=2,
                max_tokens=4, n_candidates=3, dtype="float64", batch_size=8, init_scale=0.3)
    base.update(overrides)
    return ModelConfig(**base)


def _parse_value(raw: str, kind, name: str):
    raw = raw.strip()
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        if kind in ("tuple[int, ...]",) or kind == tuple[int, ...]:
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config_text(text: str) -> ModelConfig:
    known = {f.name: f.type for f in fields(ModelConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(raw, known[key], key)
    return ModelConfig(**values)


def load_config(path: str | Path) -> ModelConfig:
    return parse_config_text(Path(path).read_text())


def dump_config(config: ModelConfig) -> str:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
