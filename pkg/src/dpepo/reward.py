"""Trajectory success reward and the diversity-driven step rewards.

Repetition counts exclude the occurrence being scored, so a first-time action
or transition contributes a factor of exactly 1. A transition is the pair
(digest of the observation text the env showed before acting, action).
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, UsageError

MAX_STEP_REWARD = 2.0


def state_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.8
    omega: float = 0.95
    gamma: float = 0.95
    beta: float = 0.95
    invalid_penalty: float = 0.5
    # symmetric variant: per-env width exponents, averaged like the transition width term
    average_width_action_term: bool = False
    disable_dar: bool = False
    disable_dtr: bool = False

    def validate(self) -> "RewardConfig":
        for name in ("alpha", "omega", "gamma", "beta", "invalid_penalty"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not 0.0 < v <= 1.0:
                raise ConfigError(f"reward.{name}", f"must lie in (0, 1], got {v!r}")
        return self


@dataclass(frozen=True)
class TransitionKey:
    env_id: int
    state_digest: str
    action: str

    @property
    def pair(self) -> tuple[str, str]:
        return (self.state_digest, self.action)


@dataclass
class RepetitionCounters:
    c_depth: dict[int, int] = field(default_factory=dict)
    c_width: int = 0
    # per-env reading of the width count: other envs issuing the same action this step
    c_width_per_env: dict[int, int] = field(default_factory=dict)
    m_depth: dict[int, int] = field(default_factory=dict)
    m_width: dict[int, int] = field(default_factory=dict)

    @property
    def action_repeats(self) -> int:
        return sum(self.c_depth.values()) + self.c_width

    @property
    def transition_repeats(self) -> int:
        return sum(self.m_depth.values()) + sum(self.m_width.values())


@dataclass(frozen=True)
class StepReward:
    r_action: float
    r_transition: float
    r_step: float
    invalid_applied: bool = False


class RepetitionTracker:
    """Incremental per-env action and transition logs.

    ``counters`` reads the logs for a step without changing them; ``commit``
    appends the step once it has been scored.
    """

    def __init__(self):
        self.actions: dict[int, Counter] = {}
        self.transitions: dict[int, Counter] = {}
        # transition pair -> envs whose log contains it
        self.holders: dict[tuple[str, str], set[int]] = {}

    @classmethod
    def from_history(cls, history: Mapping[int, Sequence[tuple[str, str]]]) -> "RepetitionTracker":
        tracker = cls()
        for env_id, log in history.items():
            for digest, action in log:
                tracker._add(TransitionKey(env_id, digest, action))
        return tracker

    def _add(self, key: TransitionKey) -> None:
        self.actions.setdefault(key.env_id, Counter())[key.action] += 1
        self.transitions.setdefault(key.env_id, Counter())[key.pair] += 1
        self.holders.setdefault(key.pair, set()).add(key.env_id)

    def counters(self, keys: Sequence[TransitionKey]) -> RepetitionCounters:
        out = RepetitionCounters()
        actions = [k.action for k in keys]
        out.c_width = len(actions) - len(set(actions))
        same_step: dict[tuple[str, str], set[int]] = {}
        for k in keys:
            same_step.setdefault(k.pair, set()).add(k.env_id)
        for k in keys:
            out.c_depth[k.env_id] = self.actions.get(k.env_id, Counter())[k.action]
            out.c_width_per_env[k.env_id] = actions.count(k.action) - 1
            out.m_depth[k.env_id] = self.transitions.get(k.env_id, Counter())[k.pair]
            others = (self.holders.get(k.pair, set()) | same_step[k.pair]) - {k.env_id}
            out.m_width[k.env_id] = len(others)
        return out

    def commit(self, keys: Iterable[TransitionKey]) -> None:
        for k in keys:
            self._add(k)


def step_keys(pstep) -> list[TransitionKey]:
    return [
        TransitionKey(env_id, state_digest(pre), action)
        for (env_id, action), pre in zip(pstep.intents, pstep.pre_texts)
    ]


def count_repetitions(history: Mapping[int, Sequence[tuple[str, str]]], pstep) -> RepetitionCounters:
    """Counters for ``pstep`` given per-env (state digest, action) logs of all earlier steps."""
    return RepetitionTracker.from_history(history).counters(step_keys(pstep))


def diverse_action_reward(counters: RepetitionCounters, pstep, cfg: RewardConfig) -> float:
    n = len(pstep.intents)
    if n == 0:
        raise UsageError("empty step has no action reward")
    depth = sum(cfg.alpha ** counters.c_depth[e] for e, _ in pstep.intents) / n
    if cfg.average_width_action_term:
        width = sum(cfg.omega ** counters.c_width_per_env[e] for e, _ in pstep.intents) / n
    else:
        width = cfg.omega ** counters.c_width
    return depth + width


def diverse_transition_reward(counters: RepetitionCounters, pstep, cfg: RewardConfig) -> float:
    n = len(pstep.intents)
    if n == 0:
        raise UsageError("empty step has no transition reward")
    depth = sum(cfg.gamma ** counters.m_depth[e] for e, _ in pstep.intents) / n
    width = sum(cfg.beta ** counters.m_width[e] for e, _ in pstep.intents) / n
    return depth + width


def combine(r_action: float, r_transition: float, invalid: bool, cfg: RewardConfig) -> StepReward:
    r_step = (r_action + r_transition) / 2.0
    if invalid:
        r_step *= cfg.invalid_penalty
    return StepReward(r_action, r_transition, r_step, invalid)


def score_step(counters: RepetitionCounters | None, pstep, cfg: RewardConfig) -> StepReward:
    """Composite reward for one step; ``counters`` is None for a step with no parsed intents."""
    if not pstep.intents:
        # unparseable turn: nothing was repeated, but the invalid penalty applies
        return combine(MAX_STEP_REWARD, MAX_STEP_REWARD, True, cfg)
    r_action = MAX_STEP_REWARD if cfg.disable_dar else diverse_action_reward(counters, pstep, cfg)
    r_transition = MAX_STEP_REWARD if cfg.disable_dtr else diverse_transition_reward(counters, pstep, cfg)
    return combine(r_action, r_transition, pstep.any_invalid, cfg)


def step_reward(pstep, history: Mapping[int, Sequence[tuple[str, str]]], cfg: RewardConfig) -> StepReward:
    counters = count_repetitions(history, pstep) if pstep.intents else None
    return score_step(counters, pstep, cfg)


def score_steps(steps: Sequence, cfg: RewardConfig) -> list[tuple[StepReward, RepetitionCounters | None]]:
    """Score a whole trajectory in order, sharing one tracker across steps."""
    tracker = RepetitionTracker()
    out = []
    for s in steps:
        keys = step_keys(s)
        counters = tracker.counters(keys) if keys else None
        out.append((score_step(counters, s, cfg), counters))
        tracker.commit(keys)
    return out


def trajectory_success_reward(traj) -> float:
    if not traj.complete:
        raise UsageError("trajectory is not complete")
    return 1.0 if any(s.reached_goal for s in traj.steps) else 0.0
