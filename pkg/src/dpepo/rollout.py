"""Multi-turn parallel rollouts, group collection, and the training iteration."""

from __future__ import annotations

import hashlib
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .advantage import AdvantageConfig, AdvantageRecord, TrajectoryGroup, advantage_record, trajectory_advantages
from .env import ParallelStep, WorldSpec, create_world, parallel_step, spawn_parallel
from .errors import ConfigError, DPEPOError
from .protocol import AgentTurn
from .policy import TabularPolicy, TabularPolicyParams, UpdateRecord, apply_gradient
from .reward import RewardConfig, score_steps, trajectory_success_reward

log = logging.getLogger(__name__)

EXHAUSTED = "exhausted"
ENV_LIMIT_EXCEEDED = "env_limit_exceeded"
ABORTED = "aborted"


@dataclass(frozen=True)
class RolloutConfig:
    k_parallel: int = 4
    max_steps: int = 25
    group_size: int = 8
    groups_per_iteration: int = 4
    env_limit: int | None = None
    # "cumulative": distinct envs touched over the trajectory; "per_turn": envs in one turn
    env_limit_mode: str = "cumulative"
    seed: int = 0
    workers: int = 1

    def validate(self) -> "RolloutConfig":
        checks = [
            ("k_parallel", self.k_parallel, 1),
            ("max_steps", self.max_steps, 1),
            ("group_size", self.group_size, 2),
            ("groups_per_iteration", self.groups_per_iteration, 1),
            ("workers", self.workers, 1),
        ]
        for name, v, lo in checks:
            if not isinstance(v, int) or v < lo:
                raise ConfigError(f"rollout.{name}", f"must be an integer >= {lo}, got {v!r}")
        if self.env_limit is not None and (not isinstance(self.env_limit, int) or self.env_limit < 1):
            raise ConfigError("rollout.env_limit", f"must be null or >= 1, got {self.env_limit!r}")
        if self.env_limit_mode not in ("cumulative", "per_turn"):
            raise ConfigError("rollout.env_limit_mode", f"unknown mode {self.env_limit_mode!r}")
        return self


@dataclass
class Trajectory:
    steps: list[ParallelStep] = field(default_factory=list)
    success: bool = False
    r_traj: float = 0.0
    terminal_step: int = 0
    failure_reason: str | None = None
    complete: bool = False
    task_id: str = ""
    task_description: str = ""
    initial_observation: object = None
    seed: int = 0
    error: str | None = None
    transcript: list[dict] = field(default_factory=list)

    @property
    def executed_steps(self) -> list[ParallelStep]:
        return [s for s in self.steps if s.observations]


def derive_seed(*parts) -> int:
    return int.from_bytes(hashlib.sha256(repr(parts).encode()).digest()[:8], "big")


def task_id(spec: WorldSpec) -> str:
    return f"keydoor-c{spec.container_count}-i{spec.item_location}-t{spec.target_location}-s{spec.seed}"


def new_env_set(spec: WorldSpec, k: int):
    return spawn_parallel(create_world(spec), k)


def _pre_texts(env_set, intents) -> tuple[str, ...]:
    # an id outside the set has never acted, so it still shows the initial observation
    out = []
    for env_id, _ in intents:
        ok = 1 <= env_id <= env_set.k
        out.append(env_set.instances[env_id - 1].observation.text if ok else env_set.initial_observation.text)
    return tuple(out)


def rollout_trajectory(policy, env_set, cfg: RolloutConfig, seed: int = 0, tid: str = "") -> Trajectory:
    """Run one trajectory to success, exhaustion, an env-limit violation or an abort.

    Never raises for environment or protocol failures: those end the
    trajectory with ``failure_reason == "aborted"``.
    """
    rng = random.Random(seed)
    traj = Trajectory(task_id=tid, task_description=env_set.task_description,
                      initial_observation=env_set.initial_observation, seed=seed)
    touched: set[int] = set()
    for t in range(1, cfg.max_steps + 1):
        traj.terminal_step = t
        try:
            prop = policy.propose(env_set, traj.steps, t, cfg.env_limit, rng)
        except DPEPOError as exc:
            traj.failure_reason, traj.error = ABORTED, f"{type(exc).__name__}: {exc}"
            log.warning("trajectory %s seed %d aborted at t=%d: %s", tid, seed, t, traj.error)
            break
        if prop.messages is not None:
            traj.transcript.append({"t": t, "messages": prop.messages, "raw_output": prop.raw_output,
                                    "parse_error": prop.parse_error})
        if prop.turn is None:
            # unparseable output burns the turn; no env advances
            traj.steps.append(ParallelStep(t, (), parse_error=prop.parse_error, raw_output=prop.raw_output))
            continue
        pstep = ParallelStep(t, prop.turn.intents, context=prop.context, logprob_old=prop.logprob_old,
                             raw_output=prop.raw_output)
        ids = set(pstep.env_ids)
        if cfg.env_limit is not None:
            n = len(touched | ids) if cfg.env_limit_mode == "cumulative" else len(ids)
            if n > cfg.env_limit:
                pstep.blocked, pstep.pre_texts = True, _pre_texts(env_set, pstep.intents)
                traj.steps.append(pstep)
                traj.failure_reason = ENV_LIMIT_EXCEEDED
                break
        try:
            pstep = parallel_step(env_set, pstep)
        except DPEPOError as exc:
            traj.failure_reason, traj.error = ABORTED, f"{type(exc).__name__}: {exc}"
            log.warning("trajectory %s seed %d aborted at t=%d: %s", tid, seed, t, traj.error)
            break
        touched |= ids
        traj.steps.append(pstep)
        if pstep.reached_goal:
            traj.success = True
            break
    else:
        traj.failure_reason = EXHAUSTED
    traj.complete = True
    traj.r_traj = trajectory_success_reward(traj)
    return traj


def score_trajectory(traj: Trajectory, reward_cfg: RewardConfig) -> list:
    """Fill ``step_reward`` on every step; returns the per-step repetition counters."""
    scored = score_steps(traj.steps, reward_cfg)
    for s, (sr, _) in zip(traj.steps, scored):
        s.step_reward = sr
    return [c for _, c in scored]


def collect_group(policy, spec: WorldSpec, cfg: RolloutConfig, iteration: int = 0, group_index: int = 0,
                  reward_cfg: RewardConfig | None = None) -> TrajectoryGroup:
    """N independent rollouts of one task, each on a fresh clone set with its own seed."""
    tid = task_id(spec)
    seeds = [derive_seed(cfg.seed, iteration, group_index, m) for m in range(cfg.group_size)]

    def one(seed: int) -> Trajectory:
        traj = rollout_trajectory(policy, new_env_set(spec, cfg.k_parallel), cfg, seed, tid)
        if reward_cfg is not None:
            score_trajectory(traj, reward_cfg)
        return traj

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            trajs = list(pool.map(one, seeds))
    else:
        trajs = [one(s) for s in seeds]
    return TrajectoryGroup(tid, [(tr, tr.r_traj) for tr in trajs])


def group_advantages(group: TrajectoryGroup, eps: float) -> list[AdvantageRecord]:
    phis = trajectory_advantages(group, eps)
    return [
        advantage_record([s.step_reward.r_step for s in traj.steps], phi)
        for (traj, _), phi in zip(group.members, phis)
    ]


@dataclass
class IterationStats:
    iteration: int
    success_rate: float
    mean_r_traj: float
    mean_r_step: float
    mean_parallel: float
    mean_length: float
    updates: int
    degenerate_groups: int

    def line(self) -> str:
        return (f"iter {self.iteration:4d}  success {self.success_rate:.3f}  r_traj {self.mean_r_traj:.3f}  "
                f"r_step {self.mean_r_step:.3f}  |E'_t| {self.mean_parallel:.2f}  len {self.mean_length:.2f}  "
                f"updates {self.updates}")


@dataclass
class IterationResult:
    params: TabularPolicyParams
    stats: IterationStats
    groups: list[tuple[int, TrajectoryGroup, list[AdvantageRecord]]]


def train_iteration(params: TabularPolicyParams, tasks: Sequence[WorldSpec], cfg: RolloutConfig,
                    reward_cfg: RewardConfig, adv_cfg: AdvantageConfig, iteration: int = 0,
                    env_aware: bool = True) -> IterationResult:
    """Collect groups under a frozen snapshot, score them, and take clipped-surrogate steps."""
    if not tasks:
        raise ConfigError("tasks", "need at least one task")
    old = TabularPolicy(params.copy(), env_aware=env_aware)
    rng = random.Random(derive_seed(cfg.seed, iteration, "tasks"))
    chosen = [rng.choice(list(tasks)) for _ in range(cfg.groups_per_iteration)]

    groups = []
    records: list[UpdateRecord] = []
    degenerate = 0
    for g, spec in enumerate(chosen):
        group = collect_group(old, spec, cfg, iteration, g, reward_cfg)
        advs = group_advantages(group, adv_cfg.eps)
        if len(set(group.rewards)) == 1:
            degenerate += 1
        groups.append((g, group, advs))
        for m, ((traj, _), adv) in enumerate(zip(group.members, advs)):
            for s, (_, _, phi) in zip(traj.steps, adv.per_step):
                if s.context is not None and s.logprob_old is not None:
                    records.append(UpdateRecord(s.context, AgentTurn("", s.intents), phi, s.logprob_old, f"it{iteration}/g{g}/m{m}/t{s.t}"))

    updates = 0
    new = params
    if all(r.phi == 0 for r in records):
        log.warning("iteration %d: every advantage is zero, skipping the update", iteration)
    else:
        rng.shuffle(records)
        for i in range(0, len(records), adv_cfg.update_batch):
            new = apply_gradient(new, records[i:i + adv_cfg.update_batch], adv_cfg.learning_rate, adv_cfg.clip)
            updates += 1

    trajs = [tr for _, grp, _ in groups for tr, _ in grp.members]
    steps = [s for tr in trajs for s in tr.steps]
    executed = [s for tr in trajs for s in tr.executed_steps]
    stats = IterationStats(
        iteration=iteration,
        success_rate=sum(tr.success for tr in trajs) / len(trajs),
        mean_r_traj=sum(tr.r_traj for tr in trajs) / len(trajs),
        mean_r_step=sum(s.step_reward.r_step for s in steps) / max(len(steps), 1),
        mean_parallel=sum(len(s.intents) for s in executed) / max(len(executed), 1),
        mean_length=sum(len(tr.steps) for tr in trajs) / len(trajs),
        updates=updates,
        degenerate_groups=degenerate,
    )
    return IterationResult(new, stats, groups)

