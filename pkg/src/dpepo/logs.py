"""Append-only JSONL trajectory logs and their self-validation.

Each line holds one trajectory: raw fields (intents, observation texts, goal
and invalid flags) plus everything derived from them (rewards, advantages).
``analyze_log`` throws the derived values away, recomputes them from the raw
fields and reports every mismatch.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .advantage import AdvantageRecord, advantage_record, trajectory_advantages
from .env import Observation, ParallelStep
from .errors import FormatError
from .metrics import ExplorationStats, trajectory_stats
from .reward import RewardConfig, score_steps
from .rollout import Trajectory

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TOLERANCE = 1e-9

_REQUIRED = ("schema_version", "run_id", "iteration", "group_index", "member_index", "seed", "task_id",
             "task_description", "initial_observation", "reward_config", "eps", "steps", "r_traj", "phi_traj",
             "success", "failure_reason")
_STEP_REQUIRED = ("t", "intents", "observations", "invalid_flags", "blocked", "parse_error", "r_action",
                  "r_transition", "r_step", "invalid_applied", "logprob_old", "phi_step", "phi")


def trajectory_record(run_id: str, iteration: int, group_index: int, member_index: int, traj: Trajectory,
                      adv: AdvantageRecord, reward_cfg: RewardConfig, eps: float) -> dict:
    steps = []
    for s, (_, phi_step, phi) in zip(traj.steps, adv.per_step):
        sr = s.step_reward
        steps.append({
            "t": s.t,
            "intents": [[e, a] for e, a in s.intents],
            "observations": [[e, o.text, o.is_goal] for e, o in s.observations],
            "invalid_flags": list(s.invalid_flags),
            "blocked": s.blocked,
            "parse_error": s.parse_error,
            "r_action": sr.r_action,
            "r_transition": sr.r_transition,
            "r_step": sr.r_step,
            "invalid_applied": sr.invalid_applied,
            "logprob_old": s.logprob_old,
            "phi_step": phi_step,
            "phi": phi,
        })
    init = traj.initial_observation
    return {
        "schema_version": SCHEMA_VERSION,
        "run_id": run_id,
        "iteration": iteration,
        "group_index": group_index,
        "member_index": member_index,
        "seed": traj.seed,
        "task_id": traj.task_id,
        "task_description": traj.task_description,
        "initial_observation": {"text": init.text, "admissible_actions": list(init.admissible_actions)},
        "reward_config": dataclasses.asdict(reward_cfg),
        "eps": eps,
        "steps": steps,
        "r_traj": traj.r_traj,
        "phi_traj": adv.phi_traj,
        "success": traj.success,
        "failure_reason": traj.failure_reason,
        "terminal_step": traj.terminal_step,
    }


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def record_to_trajectory(rec: dict) -> Trajectory:
    """Rebuild a trajectory from raw fields only; pre-action texts are replayed from observations."""
    init = rec["initial_observation"]
    current: dict[int, str] = {}
    steps = []
    for s in rec["steps"]:
        intents = tuple((int(e), a) for e, a in s["intents"])
        pre = tuple(current.get(e, init["text"]) for e, _ in intents)
        flags = tuple(bool(x) for x in s["invalid_flags"])
        obs = []
        for i, (e, text, goal) in enumerate(s["observations"]):
            obs.append((int(e), Observation(text, (), bool(goal), flags[i] if i < len(flags) else False)))
        for e, o in obs:
            current[e] = o.text
        steps.append(ParallelStep(
            t=s["t"], intents=intents, observations=tuple(obs), invalid_flags=flags,
            pre_texts=pre if intents else (), blocked=s["blocked"], parse_error=s["parse_error"],
            logprob_old=s["logprob_old"],
        ))
    traj = Trajectory(
        steps=steps, task_id=rec["task_id"], task_description=rec["task_description"],
        initial_observation=Observation(init["text"], tuple(init["admissible_actions"])),
        seed=rec["seed"], failure_reason=rec["failure_reason"], complete=True,
        terminal_step=rec.get("terminal_step", len(steps)),
    )
    traj.success = any(s.reached_goal for s in steps)
    traj.r_traj = 1.0 if traj.success else 0.0
    return traj


@dataclass
class Discrepancy:
    line: int
    record: str
    field: str
    stored: object
    recomputed: object

    def __str__(self) -> str:
        return f"line {self.line} ({self.record}): {self.field} stored={self.stored!r} recomputed={self.recomputed!r}"


@dataclass
class LogEntry:
    line: int
    record: dict

    @property
    def name(self) -> str:
        r = self.record
        return f"{r['run_id']}/it{r['iteration']}/g{r['group_index']}/m{r['member_index']}"


def read_log(path: str | Path, continue_on_error: bool = False) -> tuple[list[LogEntry], list[str]]:
    """Parse a JSONL log. Bad lines raise ``FormatError`` naming the line, or are collected."""
    entries, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("record is not a JSON object")
                missing = [k for k in _REQUIRED if k not in rec]
                if missing:
                    raise ValueError(f"missing fields {missing}")
                if rec["schema_version"] != SCHEMA_VERSION:
                    raise ValueError(f"schema_version {rec['schema_version']!r}, expected {SCHEMA_VERSION}")
                for s in rec["steps"]:
                    miss = [k for k in _STEP_REQUIRED if k not in s]
                    if miss:
                        raise ValueError(f"step missing fields {miss}")
            except ValueError as exc:
                msg = f"line {lineno}: {exc}"
                if not continue_on_error:
                    raise FormatError(msg) from None
                log.warning("skipping corrupted record at %s", msg)
                errors.append(msg)
                continue
            entries.append(LogEntry(lineno, rec))
    return entries, errors


def _close(a, b) -> bool:
    if isinstance(a, bool) or isinstance(b, bool) or a is None or b is None:
        return a == b
    return abs(float(a) - float(b)) <= TOLERANCE


def validate_entries(entries: Iterable[LogEntry]) -> tuple[list[Discrepancy], dict[int, Trajectory]]:
    """Recompute every derived value from raw fields; returns mismatches and the rebuilt trajectories."""
    out: list[Discrepancy] = []
    rebuilt: dict[int, Trajectory] = {}
    groups: dict[tuple, list[LogEntry]] = defaultdict(list)
    for ent in entries:
        rec = ent.record
        traj = record_to_trajectory(rec)
        rebuilt[ent.line] = traj
        cfg = RewardConfig(**rec["reward_config"])
        for s, (sr, _) in zip(rec["steps"], score_steps(traj.steps, cfg)):
            for name in ("r_action", "r_transition", "r_step", "invalid_applied"):
                if not _close(s[name], getattr(sr, name)):
                    out.append(Discrepancy(ent.line, ent.name, f"steps[t={s['t']}].{name}", s[name], getattr(sr, name)))
        if not _close(rec["r_traj"], traj.r_traj):
            out.append(Discrepancy(ent.line, ent.name, "r_traj", rec["r_traj"], traj.r_traj))
        if rec["success"] != traj.success:
            out.append(Discrepancy(ent.line, ent.name, "success", rec["success"], traj.success))
        groups[(rec["run_id"], rec["iteration"], rec["group_index"])].append(ent)

    for key, members in groups.items():
        members.sort(key=lambda e: e.record["member_index"])
        if len(members) < 2:
            e = members[0]
            out.append(Discrepancy(e.line, e.name, "group", "1 member", ">= 2 members"))
            continue
        eps = members[0].record["eps"]
        phis = trajectory_advantages([rebuilt[e.line].r_traj for e in members], eps)
        for ent, phi_traj in zip(members, phis):
            rec = ent.record
            if not _close(rec["phi_traj"], phi_traj):
                out.append(Discrepancy(ent.line, ent.name, "phi_traj", rec["phi_traj"], phi_traj))
            # step advantages are recomputed from the recomputed step rewards
            cfg = RewardConfig(**rec["reward_config"])
            r_steps = [sr.r_step for sr, _ in score_steps(rebuilt[ent.line].steps, cfg)]
            adv = advantage_record(r_steps, phi_traj)
            for s, (_, phi_step, phi) in zip(rec["steps"], adv.per_step):
                if not _close(s["phi_step"], phi_step):
                    out.append(Discrepancy(ent.line, ent.name, f"steps[t={s['t']}].phi_step", s["phi_step"], phi_step))
                if not _close(s["phi"], phi):
                    out.append(Discrepancy(ent.line, ent.name, f"steps[t={s['t']}].phi", s["phi"], phi))
    return out, rebuilt


@dataclass
class AnalysisReport:
    records: int
    discrepancies: list[Discrepancy] = field(default_factory=list)
    corrupted: list[str] = field(default_factory=list)
    series: list[dict] = field(default_factory=list)
    overall: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return not self.discrepancies and not self.corrupted

    def to_json(self) -> str:
        doc = {
            "records": self.records,
            "valid": self.valid,
            "discrepancies": [str(d) for d in self.discrepancies],
            "corrupted": self.corrupted,
            "overall": self.overall,
            "per_iteration": self.series,
            "repeat_averaging": "per_step",
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def write_csv(self, path: str | Path) -> None:
        cols = ["iteration", "trajectories", "success_rate", "mean_r_step", "diversity", "mean_action_repeats",
                "mean_transition_repeats", "trajectory_length", "mean_parallel_actions"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(self.series)


def _aggregate(stats: list[ExplorationStats], recs: list[dict]) -> dict:
    n = len(stats)
    r_steps = [s["r_step"] for r in recs for s in r["steps"]]
    return {
        "trajectories": n,
        "success_rate": sum(bool(r["success"]) for r in recs) / n,
        "mean_r_step": sum(r_steps) / max(len(r_steps), 1),
        "diversity": sum(s.diversity for s in stats) / n,
        "mean_action_repeats": sum(s.mean_action_repeats for s in stats) / n,
        "mean_transition_repeats": sum(s.mean_transition_repeats for s in stats) / n,
        "trajectory_length": sum(s.trajectory_length for s in stats) / n,
        "mean_parallel_actions": sum(s.mean_parallel_actions for s in stats) / n,
    }


def analyze_log(path: str | Path, continue_on_error: bool = False) -> AnalysisReport:
    entries, corrupted = read_log(path, continue_on_error)
    report = AnalysisReport(records=len(entries), corrupted=corrupted)
    if not entries:
        log.warning("log %s holds no trajectory records", path)
        return report
    report.discrepancies, rebuilt = validate_entries(entries)
    by_iter: dict[int, list[LogEntry]] = defaultdict(list)
    for e in entries:
        by_iter[e.record["iteration"]].append(e)
    all_stats, all_recs = [], []
    for it in sorted(by_iter):
        ents = by_iter[it]
        stats = [trajectory_stats(rebuilt[e.line]) for e in ents]
        recs = [e.record for e in ents]
        all_stats += stats
        all_recs += recs
        report.series.append({"iteration": it, **_aggregate(stats, recs)})
    report.overall = _aggregate(all_stats, all_recs)
    return report
