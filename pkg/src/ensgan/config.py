"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

MODES = ("ensemblegan", "rankgan", "irgan")


@dataclass(frozen=True)
class TrainConfig:
    # run
    seed: int = 0
    mode: str = "ensemblegan"
    epochs: int = 3
    # adversarial sampling
    m1: int = 5
    H: int = 4
    M_r: int = 20
    M_p: int = 5
    M_1: int = 5
    margin: float = 1.0
    temperature: float = 1.0
    reward_form: str = "advantage"
    reward_baseline: bool = False
    baseline_decay: float = 0.9
    # optimisation
    lr_pretrain_gen: float = 0.01
    lr_pretrain_rank: float = 0.005
    lr_adv_gen: float = 5e-4
    lr_adv_rank: float = 1e-3
    clip_norm: float = 5.0
    batch_size: int = 16
    pretrain_gen_steps: int = 300
    pretrain_rank_steps: int = 1500
    k_random: int = 2
    k_retrieved: int = 2
    k_synthetic: int = 1
    g1_steps: int = 1
    g2_steps: int = 1
    d_steps: int = 2
    # models
    gen_emb_dim: int = 32
    gen_hidden: int = 32
    att_dim: int = 32
    rank_emb_dim: int = 32
    rank_hidden: int = 32
    mlp_dim: int = 32
    dropout: float = 0.2
    max_len: int = 12
    # synthetic corpus
    n_pairs: int = 5000
    n_topics: int = 8
    paraphrases: int = 4
    fillers: int = 8
    vocab_size: int = 2000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.reward_form not in ("advantage", "log"):
            raise ConfigError(f"reward_form must be advantage or log, got {self.reward_form!r}")
        ints = [f.name for f in fields(self) if f.type in ("int", int)]
        for name in ints:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("m1", "H", "batch_size", "max_len", "gen_emb_dim", "gen_hidden", "att_dim",
                     "rank_emb_dim", "rank_hidden", "mlp_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("margin", "temperature", "lr_pretrain_gen", "lr_pretrain_rank",
                     "lr_adv_gen", "lr_adv_rank", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.M_r + self.M_p + self.M_1 < self.H:
            raise ConfigError(f"M_r + M_p + M_1 = {self.M_r + self.M_p + self.M_1} < H = {self.H}")
        if self.mode == "rankgan" and self.g2_steps:
            raise ConfigError("rankgan mode requires g2_steps = 0")
        if self.mode == "irgan" and (self.g1_steps or self.M_1):
            raise ConfigError("irgan mode requires g1_steps = 0 and M_1 = 0")

    @classmethod
    def create(cls, explicit: dict | None = None, base: dict | None = None) -> "TrainConfig":
        """Build a config, forcing the mode-gated counts unless they were set explicitly."""
        values = dict(base or {})
        explicit = dict(explicit or {})
        values.update(explicit)
        values.update(mode_overrides(values.get("mode", "ensemblegan"), explicit))
        return cls(**values)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def with_mode(self, mode: str) -> "TrainConfig":
        """Same settings under another mode, with that mode's gates applied."""
        values = dataclasses.asdict(self)
        values["mode"] = mode
        values.update(mode_overrides(mode, {}))
        return TrainConfig(**values)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def mode_overrides(mode: str, explicit: dict) -> dict:
    forced = {"rankgan": {"g2_steps": 0}, "irgan": {"g1_steps": 0, "M_1": 0}}.get(mode, {})
    return {k: v for k, v in forced.items() if k not in explicit}


PAPER_PRESET = dict(
    m1=20, H=8, M_r=100, M_p=10, M_1=10, dropout=0.2,
    lr_pretrain_gen=0.0002, lr_pretrain_rank=0.001, lr_adv_gen=2e-6, lr_adv_rank=1e-5,
    batch_size=50, k_random=5, k_retrieved=5, k_synthetic=1,
    gen_emb_dim=300, gen_hidden=512, rank_emb_dim=200, rank_hidden=200, vocab_size=30000,
)
PRESETS = {"desk": {}, "paper": PAPER_PRESET}

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(name: str, raw: str, lineno: int):
    kind = _FIELD_TYPES[name]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if kind in ("bool", bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}", line=lineno) from None


def parse_config_text(text: str, overrides: dict | None = None) -> TrainConfig:
    explicit: dict = {}
    lines: dict[str, int] = {}
    preset = "desk"
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in lines or (key == "preset" and "preset" in lines):
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        lines[key] = lineno
        if key == "preset":
            if value not in PRESETS:
                raise ConfigError(f"unknown preset {value!r}", line=lineno)
            preset = value
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        explicit[key] = _convert(key, value, lineno)
    explicit.update(overrides or {})
    try:
        return TrainConfig.create(explicit, PRESETS[preset])
    except ConfigError as exc:
        if exc.line is None:
            culprit = _culprit(str(exc), lines)
            if culprit is not None:
                raise ConfigError(str(exc), line=culprit) from None
        raise


def _culprit(message: str, lines: dict[str, int]):
    hits = [lines[k] for k in lines if re.search(rf"\b{re.escape(k)}\b", message)]
    return max(hits) if hits else None


def config_parse(path, overrides: dict | None = None) -> TrainConfig:
    """Read a config file; ``overrides`` (e.g. from command-line flags) win over file values."""
    return parse_config_text(Path(path).read_text(encoding="utf-8"), overrides)
