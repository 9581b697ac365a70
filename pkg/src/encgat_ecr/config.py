"""Run configuration: JSON files with typed, defaulted sections.

Every field has a default.  Unknown keys and wrongly typed values are
rejected with the line of the offending key.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .network import NetConfig
from .topology import MODES
from .trainer import LossWeights, TrainConfig


class ConfigError(ValueError):
    def __init__(self, messages: list[str]):
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


@dataclass
class NetworkSection:
    d_model: int = 32
    heads: int = 1
    blocks: int = 2
    d_ff: int = 64
    n_lookback: int = 20


@dataclass
class LossSection:
    gamma: float = 0.99
    local_pretrain: float = 0.5
    local: float = 0.25
    global_critic: float = 0.5
    entropy: float = 0.01
    normalize_advantage: bool = True


@dataclass
class OptimizerSection:
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    chunk_size: int = 0


@dataclass
class AblationSection:
    normal_gc: bool = False
    separate_actors: bool = False
    decoder_only: bool = False


@dataclass
class RunConfig:
    topology: str = "bundled"
    mode: str = "normal"
    pretrain_iterations: int = 100
    finetune_iterations: int = 200
    episodes_per_iteration: int = 1
    checkpoint_every: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_seeds: list[int] = field(default_factory=lambda: [1000, 1001, 1002])
    sweep_learning_rates: list[float] = field(default_factory=lambda: [1e-3, 3e-4, 1e-4])
    output_dir: str = "runs"
    network: NetworkSection = field(default_factory=NetworkSection)
    loss: LossSection = field(default_factory=LossSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    ablations: AblationSection = field(default_factory=AblationSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def net_config(self, n_agents: int = 0) -> NetConfig:
        n = self.network
        return NetConfig(
            d_model=n.d_model, d_ff=n.d_ff, heads=n.heads, blocks=n.blocks, n_lookback=n.n_lookback,
            decoder_only=self.ablations.decoder_only, separate_actors=self.ablations.separate_actors,
            n_agents=n_agents,
        )

    def train_config(self, n_agents: int = 0) -> TrainConfig:
        lw = self.loss
        return TrainConfig(
            pretrain_iterations=self.pretrain_iterations,
            finetune_iterations=self.finetune_iterations,
            episodes_per_iteration=self.episodes_per_iteration,
            learning_rate=self.optimizer.learning_rate,
            clip_norm=self.optimizer.clip_norm,
            chunk_size=self.optimizer.chunk_size,
            checkpoint_every=self.checkpoint_every,
            weights=LossWeights(**asdict(lw)),
            net=self.net_config(n_agents),
        )


def _line_of(text: str, key: str, after: int = 0) -> int | None:
    m = re.compile(r'"' + re.escape(key) + r'"\s*:').search(text, after)
    return None if m is None else text.count("\n", 0, m.start()) + 1


def _where(text: str, key: str) -> str:
    line = _line_of(text, key) if text else None
    return f"line {line}: " if line else ""


def _check_type(value, expected, path: str) -> str | None:
    origin = getattr(expected, "__origin__", None)
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif expected is str:
        ok = isinstance(value, str)
    elif origin is list:
        (item,) = expected.__args__
        if not isinstance(value, list):
            return f"{path} must be a list"
        for k, v in enumerate(value):
            err = _check_type(v, item, f"{path}[{k}]")
            if err:
                return err
        return None
    else:
        ok = True
    return None if ok else f"{path} must be of type {getattr(expected, '__name__', expected)}, got {value!r}"


def _build(cls, data: dict, text: str, prefix: str, errors: list[str]):
    import typing

    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for k in data:
        if k not in names:
            errors.append(f"{_where(text, k)}unknown key '{prefix}{k}'")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        t = hints[f.name]
        if is_dataclass(t):
            if not isinstance(v, dict):
                errors.append(f"{_where(text, f.name)}'{prefix}{f.name}' must be an object")
                continue
            kwargs[f.name] = _build(t, v, text, f"{prefix}{f.name}.", errors)
            continue
        err = _check_type(v, t, prefix + f.name)
        if err:
            errors.append(_where(text, f.name) + err)
            continue
        kwargs[f.name] = float(v) if t is float else v
    return cls(**kwargs)


def validate(cfg: RunConfig) -> list[str]:
    errs = []
    if cfg.mode not in MODES:
        errs.append(f"mode must be one of {MODES}, got {cfg.mode!r}")
    for k in ("pretrain_iterations", "finetune_iterations", "checkpoint_every"):
        if getattr(cfg, k) < 0:
            errs.append(f"{k} must be >= 0")
    if cfg.episodes_per_iteration < 1:
        errs.append("episodes_per_iteration must be >= 1")
    if not cfg.seeds or any(s < 0 for s in cfg.seeds):
        errs.append("seeds must be a non-empty list of non-negative integers")
    n = cfg.network
    if min(n.d_model, n.heads, n.blocks, n.d_ff, n.n_lookback) < 1:
        errs.append("network sizes must be >= 1")
    elif n.d_model % n.heads:
        errs.append(f"network.d_model ({n.d_model}) must be divisible by network.heads ({n.heads})")
    lw = cfg.loss
    if not 0 < lw.gamma <= 1:
        errs.append("loss.gamma must lie in (0, 1]")
    if min(lw.local_pretrain, lw.local, lw.global_critic, lw.entropy) < 0:
        errs.append("loss weights must be >= 0")
    if cfg.optimizer.learning_rate < 0:
        errs.append("optimizer.learning_rate must be >= 0")
    return errs


def loads_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([f"line {e.lineno}, column {e.colno}: {e.msg}"]) from None
    if not isinstance(data, dict):
        raise ConfigError(["configuration must be a JSON object"])
    errors: list[str] = []
    cfg = _build(RunConfig, data, text, "", errors)
    if errors:
        raise ConfigError(errors)
    errs = validate(cfg)
    if errs:
        raise ConfigError(errs)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError([f"{p}: no such configuration file"])
    try:
        return loads_config(p.read_text())
    except ConfigError as e:
        raise ConfigError([f"{p}: {m}" for m in e.messages]) from None


def parse_seeds(spec: str) -> list[int]:
    """'3', '0..4' (inclusive) or '1,5,7'."""
    out: list[int] = []
    try:
        for part in spec.split(","):
            part = part.strip()
            if ".." in part:
                a, b = part.split("..")
                lo, hi = int(a), int(b)
                if hi < lo:
                    raise ValueError
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise ConfigError([f"cannot parse seed list {spec!r} (use e.g. 3, 0..4 or 1,5,7)"]) from None
    if any(s < 0 for s in out):
        raise ConfigError(["seeds must be non-negative"])
    return out
