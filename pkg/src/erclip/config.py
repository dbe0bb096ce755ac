"""Experiment configuration in a flat ``section.key = value`` text format.

Example::

    # ERC-DAPO on digit-sum-mod
    output_dir = runs/erc-dapo
    dump_tokens = true
    train.seed = 0
    objective.variant = dapo
    objective.erc_enabled = true

Keys not given take the defaults below. ``to_text`` writes every key, so a
snapshot reproduces the run exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from erclip.objectives import ObjectiveConfig
from erclip.policy import LINEAR, PolicyParams, Vocab, init_params
from erclip.rollout import RewardTask
from erclip.trainer import TrainConfig, derive_seed


class ConfigError(ValueError):
    """Malformed or invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, source: str = "config"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "digit-sum-mod"
    vocab_size: int = 10
    prompt_len_min: int = 2
    prompt_len_max: int = 3

    def build(self) -> RewardTask:
        return RewardTask(self.kind, Vocab(self.vocab_size), (self.prompt_len_min, self.prompt_len_max))


@dataclass(frozen=True)
class PolicyConfig:
    backend: str = LINEAR
    context_window: int = 2
    prompt_buckets: int = 2048
    init_scale: float = 0.01

    def build(self, vocab: Vocab, seed: int) -> PolicyParams:
        return init_params(self.backend, vocab, self.context_window, self.prompt_buckets,
                           seed=derive_seed(seed, "init"), scale=self.init_scale)


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    objective: ObjectiveConfig = field(default_factory=lambda: ObjectiveConfig.for_variant("dapo", erc=True))
    task: TaskConfig = field(default_factory=TaskConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    output_dir: str = "runs/default"
    dump_tokens: bool = False
    dump_every: int = 10

    def to_text(self) -> str:
        lines = [f"output_dir = {self.output_dir}", f"dump_tokens = {_render(self.dump_tokens)}",
                 f"dump_every = {self.dump_every}"]
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{f.name} = {_render(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


SECTIONS = {"train": TrainConfig, "objective": ObjectiveConfig, "task": TaskConfig, "policy": PolicyConfig}
TOP_LEVEL = {"output_dir": str, "dump_tokens": bool, "dump_every": int}


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _convert(raw: str, typ: str):
    raw = raw.strip()
    optional = "None" in typ
    if optional and raw.lower() in ("none", ""):
        return None
    if "bool" in typ:
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if "int" in typ and "float" not in typ:
        return int(raw)
    if "float" in typ:
        return float(raw)
    return raw


def _field_types(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(cls)}


def parse_assignments(pairs: list[tuple[int | None, str]], source: str = "config",
                      base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``(line_number, "key = value")`` assignments on top of ``base``."""
    base = base or ExperimentConfig()
    values: dict[str, dict] = {s: dataclasses.asdict(getattr(base, s)) for s in SECTIONS}
    top = {k: getattr(base, k) for k in TOP_LEVEL}
    lines_of: dict[str, int | None] = {}
    for lineno, text in pairs:
        if "=" not in text:
            raise ConfigError(f"expected 'key = value', got {text.strip()!r}", lineno, source)
        key, _, raw = text.partition("=")
        key = key.strip()
        try:
            if key in TOP_LEVEL:
                top[key] = _convert(raw, TOP_LEVEL[key].__name__)
            elif "." in key and key.split(".", 1)[0] in SECTIONS:
                section, name = key.split(".", 1)
                types = _field_types(SECTIONS[section])
                if name not in types:
                    raise ConfigError(f"unknown key {key!r}", lineno, source)
                values[section][name] = _convert(raw, types[name])
            else:
                raise ConfigError(f"unknown key {key!r}", lineno, source)
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"bad value for {key}: {e}", lineno, source) from e
        lines_of[key] = lineno

    def build(section):
        try:
            return SECTIONS[section](**values[section])
        except (TypeError, ValueError) as e:
            # point at the last line that touched this section
            touched = [n for k, n in lines_of.items() if k.startswith(section + ".")]
            raise ConfigError(f"invalid {section} settings: {e}", touched[-1] if touched else None, source) from e

    cfg = ExperimentConfig(train=build("train"), objective=build("objective"), task=build("task"),
                           policy=build("policy"), **top)
    if cfg.dump_every < 1:
        raise ConfigError("dump_every must be positive", lines_of.get("dump_every"), source)
    try:
        cfg.task.build()
        cfg.policy.build(Vocab(cfg.task.vocab_size), 0)
    except ValueError as e:
        raise ConfigError(str(e), None, source) from e
    return cfg


def parse_config_text(text: str, source: str = "config", overrides: list[str] | None = None) -> ExperimentConfig:
    pairs = []
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if stripped:
            pairs.append((i, stripped))
    for j, ov in enumerate(overrides or [], start=1):
        pairs.append((None, ov))
    return parse_assignments(pairs, source)


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", None, str(p)) from e
    return parse_config_text(text, str(p), overrides)
