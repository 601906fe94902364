"""Group-relative advantages and the clipped surrogate objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .errors import ConfigError, NumericError, UsageError


@dataclass(frozen=True)
class AdvantageConfig:
    eps: float = 1e-6
    clip: float = 0.2
    learning_rate: float = 2.0
    update_batch: int = 32

    def validate(self) -> "AdvantageConfig":
        if not self.eps > 0:
            raise ConfigError("advantage.eps", f"must be > 0, got {self.eps!r}")
        if not self.clip > 0:
            raise ConfigError("advantage.clip", f"must be > 0, got {self.clip!r}")
        if not self.learning_rate > 0:
            raise ConfigError("advantage.learning_rate", f"must be > 0, got {self.learning_rate!r}")
        if not isinstance(self.update_batch, int) or self.update_batch < 1:
            raise ConfigError("advantage.update_batch", f"must be a positive integer, got {self.update_batch!r}")
        return self


@dataclass
class TrajectoryGroup:
    task_id: str
    members: list = field(default_factory=list)  # [(Trajectory, r_traj)]

    @property
    def rewards(self) -> list[float]:
        return [r for _, r in self.members]


@dataclass
class AdvantageRecord:
    phi_traj: float
    per_step: list[tuple[float, float, float]] = field(default_factory=list)  # (r_step, phi_step, phi)


def trajectory_advantages(group: TrajectoryGroup | Sequence[float], eps: float = 1e-6) -> list[float]:
    """Normalize trajectory rewards by the group mean and population std (clamped below at ``eps``)."""
    rewards = group.rewards if isinstance(group, TrajectoryGroup) else list(group)
    if len(rewards) < 2:
        raise UsageError(f"group statistics need at least 2 members, got {len(rewards)}")
    if not eps > 0:
        raise ConfigError("advantage.eps", "must be > 0")
    mean = math.fsum(rewards) / len(rewards)
    std = math.sqrt(math.fsum((r - mean) ** 2 for r in rewards) / len(rewards))
    scale = max(std, eps)
    return [(r - mean) / scale for r in rewards]


def step_advantage(r_step: float, phi_traj: float) -> float:
    return r_step if phi_traj > 0 else 2.0 - r_step


def combined_advantage(phi_step: float, phi_traj: float) -> float:
    return phi_step * phi_traj


def advantage_record(r_steps: Sequence[float], phi_traj: float) -> AdvantageRecord:
    rec = AdvantageRecord(phi_traj)
    for r in r_steps:
        ps = step_advantage(r, phi_traj)
        rec.per_step.append((r, ps, combined_advantage(ps, phi_traj)))
    return rec


def surrogate_loss(logp_new: float, logp_old: float, phi: float, clip: float) -> float:
    if not clip > 0:
        raise ConfigError("advantage.clip", "must be > 0")
    if not all(math.isfinite(x) for x in (logp_new, logp_old, phi)):
        raise NumericError(f"non-finite surrogate input: {logp_new}, {logp_old}, {phi}")
    ratio = math.exp(logp_new - logp_old)
    clipped = min(max(ratio, 1.0 - clip), 1.0 + clip)
    return -min(ratio * phi, clipped * phi)


def surrogate_grad_scale(logp_new: float, logp_old: float, phi: float, clip: float) -> float:
    """d(loss)/d(logp_new): zero wherever the clipped branch is the active minimum."""
    ratio = math.exp(logp_new - logp_old)
    if (phi > 0 and ratio > 1.0 + clip) or (phi < 0 and ratio < 1.0 - clip):
        return 0.0
    return -phi * ratio
