"""Decision makers for the rollout engine.

``TabularPolicyParams`` holds a logit per (observation digest, option). Every
live environment independently samples from a temperature softmax over its
admissible actions plus SKIP; environments that draw SKIP sit the step out.
The log-probability of a turn is the sum of its per-environment choices, SKIPs
included, which is the quantity the clipped surrogate is differentiated
through.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from .advantage import surrogate_grad_scale
from .errors import ConfigError, FormatError, NumericError, ScoringError, UsageError
from .protocol import AgentTurn

SKIP = "<skip>"
CHECKPOINT_FORMAT = "dpepo-tabular-policy"
CHECKPOINT_VERSION = 1


def featurize(env_id: int, task: str, text: str, env_aware: bool = True) -> str:
    """Digest of what one env slot sees. With ``env_aware`` the slot index is part of the feature."""
    key = f"{env_id if env_aware else '*'}\x1f{task}\x1f{text}"
    return hashlib.blake2b(key.encode("utf-8"), digest_size=8).hexdigest()


@dataclass(frozen=True)
class EnvView:
    env_id: int
    digest: str
    admissible: tuple[str, ...]


@dataclass(frozen=True)
class DecisionContext:
    views: tuple[EnvView, ...]
    t: int = 1
    env_limit: int | None = None

    def view(self, env_id: int) -> EnvView:
        for v in self.views:
            if v.env_id == env_id:
                return v
        raise ScoringError(f"env {env_id} is not live in this context")


@dataclass
class TabularPolicyParams:
    logits: dict[str, dict[str, float]] = field(default_factory=dict)
    skip_logit_bias: float = 0.0
    temperature: float = 0.4

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("policy.temperature", f"must be > 0, got {self.temperature!r}")

    def logit(self, digest: str, option: str) -> float:
        z = self.logits.get(digest, {}).get(option, 0.0)
        return z + self.skip_logit_bias if option == SKIP else z

    def copy(self) -> "TabularPolicyParams":
        return TabularPolicyParams(
            {d: dict(row) for d, row in self.logits.items()}, self.skip_logit_bias, self.temperature
        )

    def to_json(self, **meta: Any) -> str:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "temperature": self.temperature,
            "skip_logit_bias": self.skip_logit_bias,
            "logits": self.logits,
            **meta,
        }
        return json.dumps(doc, sort_keys=True, indent=1, ensure_ascii=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> tuple["TabularPolicyParams", dict]:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"checkpoint is not valid JSON: {exc}") from exc
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"unknown checkpoint format {doc.get('format')!r}")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {doc.get('version')!r}, expected {CHECKPOINT_VERSION}")
        params = cls(
            {d: {a: float(v) for a, v in row.items()} for d, row in doc["logits"].items()},
            float(doc["skip_logit_bias"]),
            float(doc["temperature"]),
        )
        meta = {k: v for k, v in doc.items() if k not in ("format", "version", "temperature", "skip_logit_bias", "logits")}
        return params, meta


@dataclass(frozen=True)
class DecisionOutcome:
    turn: AgentTurn
    logprob_old: float


def option_probs(params: TabularPolicyParams, view: EnvView) -> tuple[list[str], list[float]]:
    if not view.admissible:
        raise UsageError(f"env {view.env_id} is live but has no admissible actions")
    options = list(view.admissible) + [SKIP]
    z = [params.logit(view.digest, o) / params.temperature for o in options]
    top = max(z)
    w = [math.exp(v - top) for v in z]
    total = math.fsum(w)
    return options, [x / total for x in w]


def _argmax(xs: Sequence[float]) -> int:
    best = 0
    for i in range(1, len(xs)):
        if xs[i] > xs[best]:
            best = i
    return best


def _forced_choice(dists: list[tuple[EnvView, list[str], list[float]]]) -> tuple[int, str]:
    """The env whose best non-SKIP option is most probable, with that option (ties: lowest id)."""
    best = None
    for view, options, probs in dists:
        j = _argmax(probs[:-1])
        if best is None or probs[j] > best[0]:
            best = (probs[j], view.env_id, options[j])
    return best[1], best[2]


def decide(params: TabularPolicyParams, ctx: DecisionContext, rng: random.Random | int | None = None,
           greedy: bool = False) -> DecisionOutcome:
    if not ctx.views:
        raise UsageError("decision context has no live environments")
    if not isinstance(rng, random.Random):
        rng = random.Random(rng)
    dists = [(v, *option_probs(params, v)) for v in ctx.views]
    chosen: dict[int, str] = {}
    for view, options, probs in dists:
        if greedy:
            pick = options[_argmax(probs)]
        else:
            pick = rng.choices(options, weights=probs)[0]
        if pick != SKIP:
            chosen[view.env_id] = pick
    if not chosen:
        env_id, action = _forced_choice(dists)
        chosen[env_id] = action
    turn = AgentTurn("", tuple(chosen.items()))
    return DecisionOutcome(turn, _turn_logprob(dists, turn))


def _turn_logprob(dists, turn: AgentTurn) -> float:
    acts = dict(turn.intents)
    live = {v.env_id for v, _, _ in dists}
    stray = set(acts) - live
    if stray:
        raise ScoringError(f"turn addresses non-live envs {sorted(stray)}")
    total = 0.0
    for view, options, probs in dists:
        option = acts.get(view.env_id, SKIP)
        try:
            total += math.log(probs[options.index(option)])
        except ValueError:
            raise ScoringError(f"action {option!r} is not admissible in env {view.env_id}") from None
    return total


def logprob(params: TabularPolicyParams, ctx: DecisionContext, turn: AgentTurn) -> float:
    return _turn_logprob([(v, *option_probs(params, v)) for v in ctx.views], turn)


@dataclass(frozen=True)
class UpdateRecord:
    context: DecisionContext
    turn: AgentTurn
    phi: float
    logprob_old: float
    record_id: str = ""


def surrogate_gradient(params: TabularPolicyParams, batch: Sequence[UpdateRecord], clip: float) -> dict[str, dict[str, float]]:
    """Gradient of the mean clipped surrogate loss with respect to the logits."""
    grad: dict[str, dict[str, float]] = {}
    if not batch:
        return grad
    inv_n = 1.0 / len(batch)
    inv_temp = 1.0 / params.temperature
    for rec in batch:
        if rec.phi == 0:
            continue
        dists = [(v, *option_probs(params, v)) for v in rec.context.views]
        lp = _turn_logprob(dists, rec.turn)
        scale = surrogate_grad_scale(lp, rec.logprob_old, rec.phi, clip)
        if not math.isfinite(scale):
            raise NumericError(f"non-finite gradient in record {rec.record_id or '?'}")
        if scale == 0.0:
            continue
        acts = dict(rec.turn.intents)
        c = scale * inv_n * inv_temp
        for view, options, probs in dists:
            chosen = acts.get(view.env_id, SKIP)
            row = grad.setdefault(view.digest, {})
            for o, p in zip(options, probs):
                g = c * ((1.0 if o == chosen else 0.0) - p)
                row[o] = row.get(o, 0.0) + g
    return grad


def apply_gradient(params: TabularPolicyParams, batch: Sequence[UpdateRecord], learning_rate: float,
                   clip: float) -> TabularPolicyParams:
    """One SGD step on the mean clipped surrogate; returns new params."""
    grad = surrogate_gradient(params, batch, clip)
    out = params.copy()
    for digest, row in grad.items():
        target = out.logits.setdefault(digest, {})
        for option, g in row.items():
            if not math.isfinite(g):
                raise NumericError(f"non-finite gradient for {digest}/{option}")
            target[option] = target.get(option, 0.0) - learning_rate * g
    return out


# --- rollout-facing policies -------------------------------------------------


@dataclass
class Proposal:
    """What a policy hands back to the rollout engine for one step."""

    turn: AgentTurn | None
    logprob_old: float | None = None
    context: DecisionContext | None = None
    raw_output: str | None = None
    parse_error: str | None = None
    messages: list[dict] | None = None


def decision_context(env_set, t: int, env_limit: int | None = None, env_aware: bool = True) -> DecisionContext:
    views = tuple(
        EnvView(inst.env_id, featurize(inst.env_id, env_set.task_description, inst.observation.text, env_aware),
                tuple(inst.observation.admissible_actions))
        for inst in env_set.instances
        if not inst.terminal
    )
    return DecisionContext(views, t, env_limit)


class TabularPolicy:
    def __init__(self, params: TabularPolicyParams | None = None, env_aware: bool = True, greedy: bool = False):
        self.params = params if params is not None else TabularPolicyParams()
        self.env_aware = env_aware
        self.greedy = greedy

    def propose(self, env_set, steps, t: int, env_limit: int | None, rng: random.Random) -> Proposal:
        ctx = decision_context(env_set, t, env_limit, self.env_aware)
        out = decide(self.params, ctx, rng, greedy=self.greedy)
        return Proposal(out.turn, out.logprob_old, ctx)


class UniformRandomPolicy(TabularPolicy):
    """Tabular policy with every logit at zero; the random-search baseline."""

    def __init__(self, temperature: float = 0.4):
        super().__init__(TabularPolicyParams(temperature=temperature), env_aware=False)


class ScriptedPolicy:
    """Replays turns from a callable ``(t, env_set) -> AgentTurn`` or a fixed list."""

    def __init__(self, script: Callable[[int, Any], AgentTurn] | Sequence[AgentTurn]):
        self.script = script

    def propose(self, env_set, steps, t, env_limit, rng) -> Proposal:
        if callable(self.script):
            turn = self.script(t, env_set)
        else:
            turn = self.script[min(t, len(self.script)) - 1]
        return Proposal(turn)
