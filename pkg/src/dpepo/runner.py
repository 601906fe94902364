"""Training and evaluation drivers shared by the CLI and the experiment scripts."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

from .config import RunConfig
from .errors import ConfigError, FormatError
from .llm import LLMPolicy
from .logs import dumps_record, trajectory_record
from .metrics import EvalReport, evaluate
from .policy import TabularPolicy, TabularPolicyParams
from .rollout import IterationResult, train_iteration

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.json"
TRAJECTORIES = "trajectories.jsonl"
STATS = "stats.jsonl"
CONFIG_COPY = "config.yaml"


def atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def initial_params(cfg: RunConfig) -> TabularPolicyParams:
    return TabularPolicyParams(skip_logit_bias=cfg.policy.skip_logit_bias, temperature=cfg.policy.temperature)


def save_checkpoint(path: Path, params: TabularPolicyParams, cfg: RunConfig, iteration: int) -> None:
    atomic_write(path, params.to_json(
        iteration=iteration,
        run_id=cfg.run_id,
        config_digest=cfg.digest(),
        env_aware=cfg.policy.env_aware,
        container_count=cfg.world.container_count,
    ))


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> tuple[TabularPolicyParams, dict]:
    """Load params; with ``cfg``, refuse checkpoints whose feature layout does not match it."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {str(path)!r}: {exc.strerror}") from None
    params, meta = TabularPolicyParams.from_json(text)
    if cfg is not None:
        for key, want in (("env_aware", cfg.policy.env_aware), ("container_count", cfg.world.container_count)):
            if key in meta and meta[key] != want:
                raise FormatError(f"checkpoint {key}={meta[key]!r} does not match config value {want!r}")
        if params.temperature != cfg.policy.temperature:
            raise FormatError(f"checkpoint temperature {params.temperature} does not match config "
                              f"{cfg.policy.temperature}")
    return params, meta


def _truncate_jsonl(path: Path, keep: Callable[[dict], bool]) -> None:
    if not path.exists():
        return
    kept = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip() and keep(json.loads(line)):
                kept.append(line if line.endswith("\n") else line + "\n")
    atomic_write(path, "".join(kept))


def iteration_records(cfg: RunConfig, res: IterationResult) -> list[dict]:
    recs = []
    for g, group, advs in res.groups:
        for m, ((traj, _), adv) in enumerate(zip(group.members, advs)):
            recs.append(trajectory_record(cfg.run_id, res.stats.iteration, g, m, traj, adv, cfg.reward,
                                          cfg.advantage.eps))
    return recs


def run_training(cfg: RunConfig, resume: bool = False, stop_after: int | None = None,
                 echo: Callable[[str], None] | None = print,
                 on_iteration: Callable[[IterationResult, TabularPolicyParams], bool | None] | None = None
                 ) -> TabularPolicyParams:
    """Train for ``cfg.iterations`` iterations, checkpointing and logging after each one.

    ``stop_after`` ends the run early after that many completed iterations,
    as if the process had been killed; a later ``resume=True`` call picks up
    from the checkpoint and produces the same logs as an uninterrupted run.
    A truthy return from ``on_iteration`` also ends the run after that iteration.
    """
    if cfg.policy.kind != "tabular":
        raise ConfigError("policy.kind", "only the tabular policy can be trained")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, traj_log, stats_log = out / CHECKPOINT, out / TRAJECTORIES, out / STATS

    start = 0
    params = initial_params(cfg)
    if resume and ckpt.exists():
        params, meta = load_checkpoint(ckpt, cfg)
        if meta.get("config_digest") != cfg.digest():
            raise FormatError("checkpoint was written under a different configuration")
        start = int(meta["iteration"])
        # anything logged after the last checkpoint belongs to an unfinished iteration
        _truncate_jsonl(traj_log, lambda r: r["iteration"] < start)
        _truncate_jsonl(stats_log, lambda r: r["iteration"] < start)
        log.info("resuming %s at iteration %d", cfg.run_id, start)
    else:
        for p in (ckpt, traj_log, stats_log):
            p.unlink(missing_ok=True)
        save_checkpoint(ckpt, params, cfg, 0)
    atomic_write(out / CONFIG_COPY, cfg.to_yaml())

    tasks = cfg.tasks()
    end = cfg.iterations if stop_after is None else min(cfg.iterations, stop_after)
    for it in range(start, end):
        res = train_iteration(params, tasks, cfg.rollout, cfg.reward, cfg.advantage, it, cfg.policy.env_aware)
        with open(traj_log, "a", encoding="utf-8") as fh:
            fh.writelines(dumps_record(r) + "\n" for r in iteration_records(cfg, res))
        with open(stats_log, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"iteration": it, **vars(res.stats)}, sort_keys=True) + "\n")
        params = res.params
        save_checkpoint(ckpt, params, cfg, it + 1)
        if echo is not None:
            echo(res.stats.line())
        if on_iteration is not None and on_iteration(res, params):
            break
    return params


def build_policy(cfg: RunConfig, params: TabularPolicyParams | None = None, greedy: bool = False):
    if cfg.policy.kind == "external-llm":
        return LLMPolicy(cfg.policy.endpoint, cfg.policy.env_name)
    return TabularPolicy(params if params is not None else initial_params(cfg), cfg.policy.env_aware, greedy)


def run_eval(cfg: RunConfig, params: TabularPolicyParams | None, ks: Sequence[int], episodes: int,
             env_limit: int | None = None, greedy: bool = True, with_tokens: bool = True) -> dict[int, EvalReport]:
    """One report per K, each over ``episodes`` episodes of every task at the configured step budget."""
    reports = {}
    for k in ks:
        rcfg = replace(cfg.rollout, k_parallel=k, env_limit=env_limit).validate()
        policy = build_policy(cfg, params, greedy)
        reports[k] = evaluate(policy, cfg.tasks(), episodes, rcfg, greedy=greedy, env_name=cfg.policy.env_name,
                              with_tokens=with_tokens)
    return reports
