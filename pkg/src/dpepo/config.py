"""Run configuration: one YAML file, every default materialized on load."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .advantage import AdvantageConfig
from .env import WorldSpec
from .errors import ConfigError
from .llm import EndpointConfig
from .reward import RewardConfig
from .rollout import RolloutConfig

TASK_SETS = ("single", "all_item_locations")
POLICY_KINDS = ("tabular", "external-llm")


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = "tabular"
    temperature: float = 0.4
    skip_logit_bias: float = 0.0
    # include the env slot in the observation feature so clones can diverge
    env_aware: bool = True
    env_name: str = "KeyDoorWorld"
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)

    def validate(self) -> "PolicyConfig":
        if self.kind not in POLICY_KINDS:
            raise ConfigError("policy.kind", f"must be one of {POLICY_KINDS}, got {self.kind!r}")
        if not self.temperature > 0:
            raise ConfigError("policy.temperature", f"must be > 0, got {self.temperature!r}")
        self.endpoint.validate()
        return self


@dataclass(frozen=True)
class RunConfig:
    run_id: str = "keydoor"
    output_dir: str = "runs/keydoor"
    iterations: int = 125
    task_set: str = "all_item_locations"
    world: WorldSpec = field(default_factory=WorldSpec)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    advantage: AdvantageConfig = field(default_factory=AdvantageConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def validate(self) -> "RunConfig":
        if not isinstance(self.iterations, int) or self.iterations < 0:
            raise ConfigError("iterations", f"must be a non-negative integer, got {self.iterations!r}")
        if self.task_set not in TASK_SETS:
            raise ConfigError("task_set", f"must be one of {TASK_SETS}, got {self.task_set!r}")
        if not self.run_id or "/" in self.run_id:
            raise ConfigError("run_id", f"must be a non-empty name without '/', got {self.run_id!r}")
        try:
            self.world.validate()
        except ConfigError as exc:
            raise ConfigError(f"world.{exc.key}", str(exc).split(": ", 1)[1]) from None
        self.rollout.validate()
        self.reward.validate()
        self.advantage.validate()
        self.policy.validate()
        _check_creatable("output_dir", self.output_dir)
        return self

    def tasks(self) -> list[WorldSpec]:
        if self.task_set == "single":
            return [self.world]
        n = self.world.container_count
        return [self.world.with_item_at(j) for j in range(1, n + 1) if j != self.world.target_location]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(_plain(self.to_dict()), sort_keys=False)

    def digest(self) -> str:
        """Fingerprint of everything except where outputs go."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(_plain(d), sort_keys=True).encode()).hexdigest()[:16]


def _plain(x: Any) -> Any:
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _check_creatable(key: str, path: str) -> None:
    p = Path(path).absolute()
    while not p.exists():
        p = p.parent
    if not p.is_dir() or not os.access(p, os.W_OK):
        raise ConfigError(key, f"{path!r} cannot be created under {str(p)!r}")


def _coerce(key: str, value: Any, default: Any, annotation: str) -> Any:
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(key, "may not be null")
    if isinstance(default, bool) or annotation.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if annotation.startswith("int") or isinstance(default, int) and not annotation.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if annotation.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if annotation.startswith("tuple"):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
            raise ConfigError(key, f"expected a list of strings, got {value!r}")
        return tuple(value)
    if annotation.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Any, prefix: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", f"expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(prefix + unknown[0], "unknown key")
    base = cls()
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = getattr(base, name)
        key = prefix + name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key + ".")
        else:
            kwargs[name] = _coerce(key, value, default, str(f.type))
    return replace(base, **kwargs)


def parse_config(data: Any) -> RunConfig:
    """Build and validate a RunConfig from a plain mapping; unknown keys are errors."""
    return _build(RunConfig, data, "").validate()


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {str(path)!r}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"invalid YAML: {exc}") from None
    return parse_config(data)
