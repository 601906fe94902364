"""Prompt rendering and the ``<think>``/``<parallel>``/``<env_i>`` output grammar."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .env import Observation
from .errors import ConfigError, ParseError, ProtocolError, UsageError

log = logging.getLogger(__name__)

TEMPLATE_VERSION = 1

_ENV_OPEN = re.compile(r"<env_([^<>]*)>")
_ANY_ENV_TAG = re.compile(r"</?env_[^<>]*>")


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    text = resources.files("dpepo").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")
    return text.rstrip("\n")


def template_version() -> int:
    return int(resources.files("dpepo").joinpath("templates", "VERSION").read_text().strip())


@dataclass(frozen=True)
class AgentTurn:
    think_text: str
    intents: tuple[tuple[int, str], ...]

    def __post_init__(self):
        intents = tuple((int(e), str(a)) for e, a in self.intents)
        if not intents:
            raise ProtocolError("a turn needs at least one intent")
        ids = [e for e, _ in intents]
        if len(set(ids)) != len(ids):
            dup = next(e for e in ids if ids.count(e) > 1)
            raise ProtocolError(f"duplicate env_id {dup} in one turn")
        for e, a in intents:
            if e < 0:
                raise ProtocolError(f"negative env_id {e}")
            if not a or a != a.strip() or "<" in a or ">" in a:
                raise ProtocolError(f"malformed action {a!r} for env {e}")
        if "</think>" in self.think_text:
            raise ProtocolError("think text may not contain </think>")
        object.__setattr__(self, "intents", tuple(sorted(intents)))

    @property
    def env_ids(self) -> tuple[int, ...]:
        return tuple(e for e, _ in self.intents)


@dataclass(frozen=True)
class PromptContext:
    task_description: str
    initial_observation: str
    initial_admissible: tuple[str, ...] = ()
    # env_id -> [(action, observation)] for steps 1..t-2
    history_summary: Mapping[int, Sequence[tuple[str, str]]] = field(default_factory=dict)
    # env_id -> (action, observation, admissible actions) for step t-1
    last_step_detail: Mapping[int, tuple[str, str, Sequence[str]]] = field(default_factory=dict)
    env_limit: int | None = None


def count_tokens(text: str) -> int:
    """Whitespace-token proxy for prompt and completion length."""
    return len(text.split())


def format_actions(actions: Iterable[str]) -> str:
    return "[" + ", ".join(f"'{a}'" for a in actions) + "]"


def render_system_prompt(env_name: str, env_limit: int | None = None) -> str:
    text = load_template("system_prompt").format(env_name=env_name)
    if env_limit is not None:
        text += "\n\n" + render_limit_prompt(env_limit)
    return text


def render_first_step_prompt(task: str, obs, env_name: str = "KeyDoorWorld") -> str:
    if not obs.admissible_actions and not obs.is_goal:
        raise UsageError("first-step prompt needs admissible actions")
    return load_template("first_step").format(
        env_name=env_name,
        task_description=task,
        current_observation=obs.text,
        admissible_actions=format_actions(obs.admissible_actions),
    )


def _history_block(summary: Mapping[int, Sequence[tuple[str, str]]]) -> str:
    parts = [load_template("history_info")]
    for env_id in sorted(summary):
        lines = [f"In Environment {env_id}"]
        for j, (action, obs) in enumerate(summary[env_id], start=1):
            lines += [f"Action {j}: {action}", f"Observation {j}: {obs}"]
        parts.append("\n".join(lines))
    return "\n\n".join(parts)


def _last_block(ctx: PromptContext) -> str:
    sections = []
    for env_id in sorted(ctx.last_step_detail):
        action, obs, admissible = ctx.last_step_detail[env_id]
        j = len(ctx.history_summary.get(env_id, ())) + 1
        sections.append(
            f"In Environment {env_id}\n"
            f"Action {j}: {action}\n"
            f"Observation {j}: {obs}\n"
            f"Next Possible Actions: {format_actions(admissible)}"
        )
    return "\n\n".join(sections)


def render_intermediate_prompt(ctx: PromptContext, env_name: str = "KeyDoorWorld") -> str:
    if not ctx.last_step_detail:
        return render_first_step_prompt(
            ctx.task_description, Observation(ctx.initial_observation, tuple(ctx.initial_admissible)), env_name
        )
    fields = dict(
        env_name=env_name,
        task_description=ctx.task_description,
        initial_observation=ctx.initial_observation,
        last_history=_last_block(ctx),
    )
    if any(ctx.history_summary.values()):
        return load_template("intermediate_step").format(history_info=_history_block(ctx.history_summary), **fields)
    return load_template("intermediate_step_no_history").format(**fields)


def render_limit_prompt(env_num: int) -> str:
    if not isinstance(env_num, int) or env_num < 1:
        raise ConfigError("env_limit", f"must be >= 1, got {env_num!r}")
    return load_template("env_limit").format(env_num=env_num)


def build_prompt_context(task: str, initial_obs, steps: Sequence, env_limit: int | None = None) -> PromptContext:
    """Compress executed steps: full detail for the latest one, action/observation pairs before it."""
    executed = [s for s in steps if s.observations]
    summary: dict[int, list[tuple[str, str]]] = {}
    for s in executed[:-1]:
        for env_id, obs in s.observations:
            action = dict(s.intents)[env_id]
            summary.setdefault(env_id, []).append((action, obs.text))
    last = {}
    if executed:
        s = executed[-1]
        acts = dict(s.intents)
        last = {e: (acts[e], o.text, tuple(o.admissible_actions)) for e, o in s.observations}
    return PromptContext(
        task_description=task,
        initial_observation=initial_obs.text,
        initial_admissible=tuple(initial_obs.admissible_actions),
        history_summary=summary,
        last_step_detail=last,
        env_limit=env_limit,
    )


def render_uncompressed_prompt(task: str, initial_obs, steps: Sequence, env_name: str = "KeyDoorWorld") -> str:
    """Every past step with its admissible actions; the baseline the compressed prompt is measured against."""
    executed = [s for s in steps if s.observations]
    if not executed:
        return render_first_step_prompt(task, initial_obs, env_name)
    per_env: dict[int, list[str]] = {}
    for s in executed:
        acts = dict(s.intents)
        for env_id, obs in s.observations:
            j = len(per_env.get(env_id, ())) // 3 + 1
            per_env.setdefault(env_id, []).extend(
                [f"Action {j}: {acts[env_id]}", f"Observation {j}: {obs.text}",
                 f"Next Possible Actions: {format_actions(obs.admissible_actions)}"]
            )
    body = "\n\n".join(f"In Environment {e}\n" + "\n".join(per_env[e]) for e in sorted(per_env))
    return (
        f"You are an expert agent operating in the {env_name} Embodied Environment.\n\n"
        f"Your task is to: {task}.\n\n"
        f"Your initial observation is: {initial_obs.text}.\n\n"
        f"Your full interaction history is:\n{body}"
    )


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


def _warn_stray(text: str, start: int, end: int) -> None:
    chunk = text[start:end]
    if chunk.strip():
        log.warning("ignoring text outside recognized tags at byte %d: %r", _byte_offset(text, start), chunk.strip()[:60])


def _check_no_env_tags(text: str, start: int, end: int) -> None:
    m = _ANY_ENV_TAG.search(text, start, end)
    if m:
        raise ParseError(f"unexpected tag {m.group(0)}", _byte_offset(text, m.start()))


def _read_env(text: str, m: re.Match) -> tuple[int, str, int]:
    """Parse one ``<env_N>...</env_N>`` section starting at match ``m``; returns (id, action, end)."""
    raw = m.group(1)
    if not re.fullmatch(r"\d+", raw):
        raise ParseError(f"non-integer environment index {raw!r}", _byte_offset(text, m.start()))
    close = f"</env_{raw}>"
    end = text.find(close, m.end())
    if end < 0:
        raise ParseError(f"unclosed <env_{raw}>", _byte_offset(text, m.start()))
    inner = text[m.end():end]
    if "<" in inner or ">" in inner:
        raise ParseError(f"nested tag inside <env_{raw}>", _byte_offset(text, m.end() + inner.index("<" if "<" in inner else ">")))
    action = inner.strip()
    if not action:
        raise ParseError(f"empty action in <env_{raw}>", _byte_offset(text, m.start()))
    return int(raw), action, end + len(close)


def parse_agent_output(text: str) -> AgentTurn:
    """Parse one agent completion into an :class:`AgentTurn`.

    Raises :class:`ParseError` (with a byte offset) for missing, unclosed or
    malformed tags and :class:`ProtocolError` when an environment is addressed
    twice. Text outside the recognized tags is logged and ignored.
    """
    think = ""
    pos = 0
    t_open = text.find("<think>")
    if t_open >= 0:
        t_close = text.find("</think>", t_open)
        if t_close < 0:
            raise ParseError("unclosed <think>", _byte_offset(text, t_open))
        _warn_stray(text, 0, t_open)
        think = text[t_open + len("<think>"):t_close]
        pos = t_close + len("</think>")

    p_open = text.find("<parallel>", pos)
    if p_open < 0:
        stray_close = text.find("</parallel>", pos)
        if stray_close >= 0:
            raise ParseError("</parallel> without opening tag", _byte_offset(text, stray_close))
        opens = list(_ENV_OPEN.finditer(text, pos))
        if not opens:
            raise ParseError("missing <parallel> block", _byte_offset(text, pos))
        if len(opens) > 1:
            raise ParseError("multiple <env_i> tags outside <parallel>", _byte_offset(text, opens[1].start()))
        _check_no_env_tags(text, pos, opens[0].start())
        _warn_stray(text, pos, opens[0].start())
        env_id, action, end = _read_env(text, opens[0])
        _check_no_env_tags(text, end, len(text))
        _warn_stray(text, end, len(text))
        return AgentTurn(think, ((env_id, action),))

    _check_no_env_tags(text, pos, p_open)
    _warn_stray(text, pos, p_open)
    p_close = text.find("</parallel>", p_open)
    if p_close < 0:
        raise ParseError("unclosed <parallel>", _byte_offset(text, p_open))
    intents: list[tuple[int, str]] = []
    seen: set[int] = set()
    cur = p_open + len("<parallel>")
    while True:
        m = _ENV_OPEN.search(text, cur, p_close)
        if m is None:
            _check_no_env_tags(text, cur, p_close)
            _warn_stray(text, cur, p_close)
            break
        _check_no_env_tags(text, cur, m.start())
        _warn_stray(text, cur, m.start())
        env_id, action, end = _read_env(text, m)
        if end > p_close:
            raise ParseError(f"unclosed <env_{m.group(1)}> inside <parallel>", _byte_offset(text, m.start()))
        if env_id in seen:
            raise ProtocolError(f"duplicate env_id {env_id} in one turn (at byte {_byte_offset(text, m.start())})")
        seen.add(env_id)
        intents.append((env_id, action))
        cur = end
    if not intents:
        raise ParseError("empty <parallel> block", _byte_offset(text, p_open))
    tail = p_close + len("</parallel>")
    _check_no_env_tags(text, tail, len(text))
    _warn_stray(text, tail, len(text))
    return AgentTurn(think, tuple(intents))


def serialize_turn(turn: AgentTurn) -> str:
    body = "\n".join(f"<env_{e}>{a}</env_{e}>" for e, a in sorted(turn.intents))
    return f"<think>{turn.think_text}</think>\n<parallel>\n{body}\n</parallel>"
