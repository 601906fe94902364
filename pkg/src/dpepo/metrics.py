"""Evaluation and exploration-dynamics diagnostics.

Repeat counts come from the same ``RepetitionTracker`` the reward module uses,
so a trajectory's diagnostics and its rewards can never disagree. Repeat
counts are averaged per step, then over steps of the trajectory.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .env import WorldSpec
from .errors import UsageError
from .policy import TabularPolicy
from .protocol import AgentTurn, build_prompt_context, count_tokens, render_intermediate_prompt, render_system_prompt, serialize_turn
from .reward import RepetitionTracker, step_keys
from .rollout import RolloutConfig, Trajectory, derive_seed, new_env_set, rollout_trajectory, task_id

REPEAT_AVERAGING = "per_step"


@dataclass
class ExplorationStats:
    diversity: float
    mean_action_repeats: float
    mean_transition_repeats: float
    trajectory_length: int
    mean_parallel_actions: float
    token_proxy: int = 0

    def __post_init__(self):
        if not 0.0 <= self.diversity <= 1.0:
            raise ValueError(f"diversity out of range: {self.diversity}")
        if min(self.mean_action_repeats, self.mean_transition_repeats, self.mean_parallel_actions) < 0:
            raise ValueError("means must be non-negative")


def _actions(traj: Trajectory) -> list[str]:
    return [a for s in traj.steps for _, a in s.intents]


def exploration_diversity(traj: Trajectory) -> float:
    """Distinct action strings over all issued actions, across steps and envs."""
    actions = _actions(traj)
    if not actions:
        raise UsageError("trajectory has no actions")
    return len(set(actions)) / len(actions)


def repeat_counts(traj: Trajectory) -> tuple[float, float]:
    """Mean per-step (action repeats, transition repeats) using the reward counters."""
    tracker = RepetitionTracker()
    acts, trans = [], []
    for s in traj.steps:
        keys = step_keys(s)
        if not keys:
            continue
        c = tracker.counters(keys)
        acts.append(c.action_repeats)
        trans.append(c.transition_repeats)
        tracker.commit(keys)
    if not acts:
        return 0.0, 0.0
    return sum(acts) / len(acts), sum(trans) / len(trans)


def token_proxy(traj: Trajectory, env_name: str = "KeyDoorWorld", env_limit: int | None = None) -> int:
    """Whitespace tokens of every prompt the agent would see plus every turn it emits.

    Recorded transcripts (external LLM runs) are counted as-is; otherwise
    the prompts are re-rendered from the trajectory.
    """
    if traj.transcript:
        total = 0
        for entry in traj.transcript:
            total += sum(count_tokens(m["content"]) for m in entry["messages"])
            total += count_tokens(entry.get("raw_output") or "")
        return total
    system = count_tokens(render_system_prompt(env_name, env_limit))
    total = 0
    for i, s in enumerate(traj.steps):
        ctx = build_prompt_context(traj.task_description, traj.initial_observation, traj.steps[:i], env_limit)
        total += system + count_tokens(render_intermediate_prompt(ctx, env_name))
        if s.raw_output is not None:
            total += count_tokens(s.raw_output)
        elif s.intents:
            total += count_tokens(serialize_turn(AgentTurn("", s.intents)))
    return total


def trajectory_stats(traj: Trajectory, tokens: int = 0) -> ExplorationStats:
    executed = traj.executed_steps
    a, m = repeat_counts(traj)
    return ExplorationStats(
        diversity=exploration_diversity(traj) if _actions(traj) else 1.0,
        mean_action_repeats=a,
        mean_transition_repeats=m,
        trajectory_length=len(traj.steps),
        mean_parallel_actions=sum(len(s.intents) for s in executed) / max(len(executed), 1),
        token_proxy=tokens,
    )


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """95% Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise UsageError("interval needs at least one trial")
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class EvalReport:
    episodes: int
    successes: int
    success_rate: float
    ci_low: float
    ci_high: float
    k_parallel: int
    env_limit: int | None
    mode: str
    mean: ExplorationStats
    token_proxy_total: int
    failure_reasons: dict[str, int] = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["repeat_averaging"] = REPEAT_AVERAGING
        d.pop("rows")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write_csv(self, path) -> None:
        fields = ["episode", "task_id", "seed", "success", "failure_reason", "diversity", "mean_action_repeats",
                  "mean_transition_repeats", "trajectory_length", "mean_parallel_actions", "token_proxy"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(self.rows)

    def overlaps(self, other: "EvalReport") -> bool:
        return self.ci_low <= other.ci_high and other.ci_low <= self.ci_high


def _mean_stats(stats: Sequence[ExplorationStats]) -> ExplorationStats:
    n = len(stats)
    return ExplorationStats(
        diversity=sum(s.diversity for s in stats) / n,
        mean_action_repeats=sum(s.mean_action_repeats for s in stats) / n,
        mean_transition_repeats=sum(s.mean_transition_repeats for s in stats) / n,
        trajectory_length=round(sum(s.trajectory_length for s in stats) / n),
        mean_parallel_actions=sum(s.mean_parallel_actions for s in stats) / n,
        token_proxy=round(sum(s.token_proxy for s in stats) / n),
    )


def evaluate(policy, tasks: Sequence[WorldSpec], episodes_per_task: int, cfg: RolloutConfig,
             greedy: bool | None = None, env_name: str = "KeyDoorWorld", with_tokens: bool = True) -> EvalReport:
    """Roll out ``episodes_per_task`` episodes per task and aggregate success and exploration stats.

    ``greedy`` overrides the sampling mode of a tabular policy; other
    policies are used as given.
    """
    if not isinstance(episodes_per_task, int) or episodes_per_task < 1:
        raise UsageError(f"episodes_per_task must be >= 1, got {episodes_per_task!r}")
    if not tasks:
        raise UsageError("no tasks to evaluate")
    if greedy is not None and isinstance(policy, TabularPolicy):
        policy = TabularPolicy(policy.params, env_aware=policy.env_aware, greedy=greedy)
    mode = "greedy" if getattr(policy, "greedy", False) else "sampled"

    stats, rows, reasons = [], [], {}
    successes = 0
    episode = 0
    for spec in tasks:
        tid = task_id(spec)
        for e in range(episodes_per_task):
            seed = derive_seed(cfg.seed, "eval", tid, e)
            traj = rollout_trajectory(policy, new_env_set(spec, cfg.k_parallel), cfg, seed, tid)
            tokens = token_proxy(traj, env_name, cfg.env_limit) if with_tokens else 0
            st = trajectory_stats(traj, tokens)
            stats.append(st)
            successes += traj.success
            if traj.failure_reason:
                reasons[traj.failure_reason] = reasons.get(traj.failure_reason, 0) + 1
            rows.append({"episode": episode, "task_id": tid, "seed": seed, "success": int(traj.success),
                         "failure_reason": traj.failure_reason or "", **asdict(st)})
            episode += 1
    lo, hi = wilson_interval(successes, episode)
    return EvalReport(
        episodes=episode,
        successes=successes,
        success_rate=successes / episode,
        ci_low=lo,
        ci_high=hi,
        k_parallel=cfg.k_parallel,
        env_limit=cfg.env_limit,
        mode=mode,
        mean=_mean_stats(stats),
        token_proxy_total=sum(s.token_proxy for s in stats),
        failure_reasons=reasons,
        rows=rows,
    )
