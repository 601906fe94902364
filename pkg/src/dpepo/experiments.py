"""Desk-scale experiments shared by the scripts and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

from .config import RunConfig
from .metrics import EvalReport, evaluate, trajectory_stats
from .policy import TabularPolicy, TabularPolicyParams
from .rollout import train_iteration
from .runner import initial_params


def greedy_success(cfg: RunConfig, params: TabularPolicyParams) -> float:
    """One greedy episode per task; greedy rollouts are deterministic so one is enough."""
    rep = evaluate(TabularPolicy(params, cfg.policy.env_aware), cfg.tasks(), 1, cfg.rollout, greedy=True,
                   with_tokens=False)
    return rep.success_rate


@dataclass
class ConvergenceResult:
    reached: bool
    iterations: int
    seconds: float
    greedy_success: float
    history: list[tuple[int, float]] = field(default_factory=list)
    params: TabularPolicyParams | None = None


def train_until(cfg: RunConfig, threshold: float = 0.9, check_every: int = 5,
                echo: Callable[[str], None] | None = None) -> ConvergenceResult:
    """Train in memory until greedy success reaches ``threshold`` or ``cfg.iterations`` run out."""
    params = initial_params(cfg)
    tasks = cfg.tasks()
    history = []
    t0 = time.perf_counter()
    rate = greedy_success(cfg, params)
    it = 0
    while rate < threshold and it < cfg.iterations:
        params = train_iteration(params, tasks, cfg.rollout, cfg.reward, cfg.advantage, it, cfg.policy.env_aware).params
        it += 1
        if it % check_every == 0 or it == cfg.iterations:
            rate = greedy_success(cfg, params)
            history.append((it, rate))
            if echo:
                echo(f"iter {it:4d}  greedy success {rate:.3f}  elapsed {time.perf_counter() - t0:.1f}s")
    return ConvergenceResult(rate >= threshold, it, time.perf_counter() - t0, rate, history, params)


@dataclass
class SweepRow:
    k: int
    report: EvalReport


@dataclass
class Gap:
    larger: int
    smaller: int
    verdict: str  # "higher", "tie" or "lower"


def k_sweep(cfg: RunConfig, params: TabularPolicyParams, ks: Sequence[int] = (1, 2, 4), episodes_per_task: int = 37,
            greedy: bool = False) -> tuple[list[SweepRow], list[Gap]]:
    """Evaluate one policy at several K with the same step budget and compare neighbours.

    A gap counts as ``higher`` only when the 95% intervals do not overlap;
    overlapping intervals are a ``tie``.
    """
    rows = []
    for k in sorted(ks):
        rcfg = replace(cfg.rollout, k_parallel=k).validate()
        rows.append(SweepRow(k, evaluate(TabularPolicy(params, cfg.policy.env_aware), cfg.tasks(), episodes_per_task,
                                         rcfg, greedy=greedy, with_tokens=False)))
    gaps = []
    for lo, hi in zip(rows, rows[1:]):
        if not hi.report.overlaps(lo.report):
            verdict = "higher" if hi.report.success_rate > lo.report.success_rate else "lower"
        else:
            verdict = "tie"
        gaps.append(Gap(hi.k, lo.k, verdict))
    return rows, gaps


@dataclass
class VariantStats:
    action_repeats: float
    transition_repeats: float
    diversity: float
    success: float


@dataclass
class AblationSeed:
    seed: int
    full: VariantStats
    ablated: VariantStats

    @property
    def repeats_higher_when_ablated(self) -> bool:
        return (self.ablated.action_repeats > self.full.action_repeats
                and self.ablated.transition_repeats > self.full.transition_repeats)

    @property
    def diversity_lower_when_ablated(self) -> bool:
        return self.ablated.diversity < self.full.diversity

    def to_dict(self) -> dict:
        return {"seed": self.seed, "full": asdict(self.full), "ablated": asdict(self.ablated),
                "repeats_higher_when_ablated": self.repeats_higher_when_ablated,
                "diversity_lower_when_ablated": self.diversity_lower_when_ablated}


def _training_stats(cfg: RunConfig) -> VariantStats:
    """Train for ``cfg.iterations`` and average exploration stats over every training trajectory."""
    params = initial_params(cfg)
    tasks = cfg.tasks()
    stats, wins = [], 0
    for it in range(cfg.iterations):
        res = train_iteration(params, tasks, cfg.rollout, cfg.reward, cfg.advantage, it, cfg.policy.env_aware)
        params = res.params
        for _, group, _ in res.groups:
            for traj, _ in group.members:
                stats.append(trajectory_stats(traj))
                wins += traj.success
    n = len(stats)
    return VariantStats(
        action_repeats=sum(s.mean_action_repeats for s in stats) / n,
        transition_repeats=sum(s.mean_transition_repeats for s in stats) / n,
        diversity=sum(s.diversity for s in stats) / n,
        success=wins / n,
    )


def ablation(cfg: RunConfig, seeds: Sequence[int] = (0, 1, 2),
             echo: Callable[[str], None] | None = None) -> list[AblationSeed]:
    """Full rewards against both diversity rewards disabled, same seeds and iteration count."""
    out = []
    for seed in seeds:
        base = replace(cfg, rollout=replace(cfg.rollout, seed=seed))
        ablated = replace(base, reward=replace(base.reward, disable_dar=True, disable_dtr=True))
        row = AblationSeed(seed, _training_stats(base), _training_stats(ablated))
        if echo:
            echo(f"seed {seed}: full {asdict(row.full)}  ablated {asdict(row.ablated)}")
        out.append(row)
    return out
