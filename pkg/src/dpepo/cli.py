"""Command-line entry points: ``train``, ``eval``, ``rollout`` and ``analyze``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigError, DPEPOError, FormatError, TransportError, UsageError
from .llm import LLMPolicy
from .logs import analyze_log
from .protocol import AgentTurn, build_prompt_context, render_intermediate_prompt, render_system_prompt, serialize_turn
from .rollout import ABORTED, Trajectory, derive_seed, new_env_set, rollout_trajectory, task_id
from .runner import CHECKPOINT, build_policy, load_checkpoint, run_eval, run_training

log = logging.getLogger("dpepo")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
TRANSCRIPT_SCHEMA = 1


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    sys.stdout.flush()


# --- train --------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations).validate()
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=args.output_dir).validate()
    run_training(cfg, resume=args.resume, stop_after=args.stop_after, echo=None if args.quiet else _emit)
    return EXIT_OK


# --- eval ---------------------------------------------------------------------


def _params_for(cfg: RunConfig, checkpoint: str | None):
    if cfg.policy.kind == "external-llm":
        return None
    path = Path(checkpoint) if checkpoint else Path(cfg.output_dir) / CHECKPOINT
    if not path.exists():
        if checkpoint:
            raise FormatError(f"checkpoint {str(path)!r} does not exist")
        log.warning("no checkpoint at %s; evaluating the untrained policy", path)
        return None
    params, _ = load_checkpoint(path, cfg)
    return params


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.episodes < 1:
        raise UsageError(f"--episodes must be >= 1, got {args.episodes}")
    if args.max_steps is not None:
        cfg = replace(cfg, rollout=replace(cfg.rollout, max_steps=args.max_steps)).validate()
    params = _params_for(cfg, args.checkpoint)
    ks = args.k or [cfg.rollout.k_parallel]
    reports = run_eval(cfg, params, ks, args.episodes, args.env_limit, greedy=not args.sampled,
                       with_tokens=not args.no_tokens)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for k, rep in reports.items():
        _emit(rep.to_json())
        if out:
            (out / f"eval_k{k}.json").write_text(rep.to_json(), encoding="utf-8")
            rep.write_csv(out / f"eval_k{k}.csv")
    return EXIT_OK


# --- rollout ------------------------------------------------------------------


def build_transcript(traj: Trajectory, cfg: RunConfig, policy_kind: str, task_index: int = 0) -> dict:
    """Everything one trajectory showed and produced: prompts, raw outputs, parsed turns, observations."""
    env_limit = cfg.rollout.env_limit
    recorded = {entry["t"]: entry for entry in traj.transcript}
    steps = []
    for i, s in enumerate(traj.steps):
        if s.t in recorded:
            messages = recorded[s.t]["messages"]
        else:
            ctx = build_prompt_context(traj.task_description, traj.initial_observation, traj.steps[:i], env_limit)
            messages = [
                {"role": "system", "content": render_system_prompt(cfg.policy.env_name, env_limit)},
                {"role": "user", "content": render_intermediate_prompt(ctx, cfg.policy.env_name)},
            ]
        raw = s.raw_output if s.raw_output is not None else serialize_turn(AgentTurn("", s.intents))
        steps.append({
            "t": s.t,
            "messages": messages,
            "raw_output": raw,
            "parse_error": s.parse_error,
            "intents": [[e, a] for e, a in s.intents],
            "observations": [[e, o.text] for e, o in s.observations],
            "blocked": s.blocked,
        })
    # a turn that aborted the trajectory never became a step, but its exchange is still worth keeping
    for entry in traj.transcript:
        if entry["t"] not in {s["t"] for s in steps}:
            steps.append({"t": entry["t"], "messages": entry["messages"], "raw_output": entry["raw_output"],
                          "parse_error": entry["parse_error"], "intents": [], "observations": [], "blocked": False})
    return {
        "schema_version": TRANSCRIPT_SCHEMA,
        "policy": policy_kind,
        "task_id": traj.task_id,
        "task_index": task_index,
        "task_description": traj.task_description,
        "initial_observation": traj.initial_observation.text,
        "seed": traj.seed,
        "k_parallel": cfg.rollout.k_parallel,
        "env_limit": env_limit,
        "steps": steps,
        "success": traj.success,
        "failure_reason": traj.failure_reason,
        "error": traj.error,
    }


def _canned(outputs: list[str]):
    it = iter(outputs)

    def complete(endpoint, messages):
        try:
            return next(it)
        except StopIteration:
            raise TransportError("recorded transcript has no further completions") from None

    return complete


def _drive(cfg: RunConfig, policy, kind: str, task_index: int, seed: int) -> dict:
    tasks = cfg.tasks()
    if not 0 <= task_index < len(tasks):
        raise UsageError(f"--task-index must be in 0..{len(tasks) - 1}, got {task_index}")
    spec = tasks[task_index]
    traj = rollout_trajectory(policy, new_env_set(spec, cfg.rollout.k_parallel), cfg.rollout, seed, task_id(spec))
    return build_transcript(traj, cfg, kind, task_index)


def cmd_rollout(args) -> int:
    cfg = load_config(args.config)
    kind = args.policy or cfg.policy.kind
    cfg = replace(cfg, policy=replace(cfg.policy, kind=kind)).validate()

    if args.replay:
        original = json.loads(Path(args.replay).read_text(encoding="utf-8"))
        # feed the recorded completions back through the LLM path and compare everything it renders
        policy = LLMPolicy(cfg.policy.endpoint, cfg.policy.env_name,
                           complete=_canned([s["raw_output"] for s in original["steps"]]))
        replayed = _drive(cfg, policy, original["policy"], original["task_index"], original["seed"])
        same = json.dumps(replayed, sort_keys=True) == json.dumps(original, sort_keys=True)
        _emit(f"replay {'identical' if same else 'DIFFERS'}: {len(original['steps'])} steps")
        return EXIT_OK if same else EXIT_RUNTIME

    params = _params_for(cfg, args.checkpoint)
    policy = build_policy(cfg, params, greedy=args.greedy)
    seed = args.seed if args.seed is not None else derive_seed(cfg.rollout.seed, "rollout", args.task_index)
    transcript = _drive(cfg, policy, kind, args.task_index, seed)
    text = json.dumps(transcript, sort_keys=True, indent=1, ensure_ascii=False) + "\n"
    if args.transcript:
        Path(args.transcript).parent.mkdir(parents=True, exist_ok=True)
        Path(args.transcript).write_text(text, encoding="utf-8")
    for s in transcript["steps"]:
        _emit(f"t={s['t']} intents={s['intents']}" + (f" parse_error={s['parse_error']}" if s["parse_error"] else ""))
    _emit(f"success={transcript['success']} failure_reason={transcript['failure_reason']}")
    if transcript["failure_reason"] == ABORTED:
        log.error("rollout aborted: %s", transcript["error"])
        return EXIT_RUNTIME
    return EXIT_OK


# --- analyze ------------------------------------------------------------------


def cmd_analyze(args) -> int:
    report = analyze_log(args.log, continue_on_error=args.continue_on_error)
    _emit(report.to_json())
    if args.csv:
        report.write_csv(args.csv)
    for d in report.discrepancies:
        log.error("validation failure: %s", d)
    return EXIT_OK if report.valid else EXIT_RUNTIME


# --- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpepo", description="Parallel-exploration policy optimization on text worlds.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the tabular policy")
    t.add_argument("config")
    t.add_argument("--resume", action="store_true", help="continue from the last checkpoint in output_dir")
    t.add_argument("--iterations", type=int)
    t.add_argument("--output-dir")
    t.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("config")
    e.add_argument("--checkpoint")
    e.add_argument("--k", type=int, nargs="+", help="one report per value")
    e.add_argument("--env-limit", type=int)
    e.add_argument("--episodes", type=int, default=20, help="episodes per task")
    e.add_argument("--max-steps", type=int)
    e.add_argument("--sampled", action="store_true", help="sample actions instead of taking the argmax")
    e.add_argument("--no-tokens", action="store_true", help="skip the token proxy")
    e.add_argument("--out", help="directory for JSON reports and CSV series")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", help="drive one trajectory and write its transcript")
    r.add_argument("config")
    r.add_argument("--policy", choices=["tabular", "external-llm"])
    r.add_argument("--checkpoint")
    r.add_argument("--task-index", type=int, default=0)
    r.add_argument("--seed", type=int)
    r.add_argument("--greedy", action="store_true")
    r.add_argument("--transcript", help="write the transcript JSON here")
    r.add_argument("--replay", help="re-render a recorded transcript and check it is byte-identical")
    r.set_defaults(func=cmd_rollout)

    a = sub.add_parser("analyze", help="recompute and validate a trajectory log")
    a.add_argument("log")
    a.add_argument("--continue-on-error", action="store_true")
    a.add_argument("--csv", help="write the per-iteration series here")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DPEPOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
