"""Text environments: the contract, KeyDoorWorld, and parallel clone sets.

KeyDoorWorld is a single room with numbered containers. A key is hidden in
one of them and the task is to put it in another. Container contents are only
revealed by opening, so checking several containers in sibling clones is a
real shortcut. Taking and putting walk the agent to the container named in the
action, so they are admissible from anywhere; a carried key blocks opening.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field, replace
from typing import Any, Protocol

from .errors import ConfigError, ProtocolError, UsageError

NOTHING_HAPPENS = "Nothing happens."
ITEM = "key"


@dataclass(frozen=True)
class Observation:
    text: str
    admissible_actions: tuple[str, ...]
    is_goal: bool = False
    # set when the action that produced this observation was inadmissible
    invalid: bool = False


class TextEnvironment(Protocol):
    """What the rollout engine needs from a world."""

    task_description: str

    def observe(self) -> Observation: ...

    def apply(self, action: str) -> Observation: ...

    @property
    def terminal(self) -> bool: ...


@dataclass(frozen=True)
class WorldSpec:
    container_count: int = 12
    item_location: int = 1
    target_location: int = 12
    seed: int = 0
    distractor_items: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "distractor_items", tuple(self.distractor_items))

    def validate(self) -> "WorldSpec":
        n = self.container_count
        if not isinstance(n, int) or n < 1:
            raise ConfigError("container_count", f"must be a positive integer, got {n!r}")
        for name in ("item_location", "target_location"):
            v = getattr(self, name)
            if not isinstance(v, int) or not 1 <= v <= n:
                raise ConfigError(name, f"must be a container index in 1..{n}, got {v!r}")
        if self.item_location == self.target_location:
            raise ConfigError("target_location", "must differ from item_location")
        for item in self.distractor_items:
            if not item or item == ITEM or "<" in item or ">" in item:
                raise ConfigError("distractor_items", f"invalid distractor {item!r}")
        return self

    def with_item_at(self, location: int) -> "WorldSpec":
        return replace(self, item_location=location).validate()


@dataclass(frozen=True)
class _WorldState:
    location: int  # 0 is the middle of the room
    opened: frozenset[int]
    key_at: int  # -1 while held
    last_event: str
    goal: bool = False


class KeyDoorWorld:
    """Deterministic hidden-key world. Text is a pure function of the state."""

    def __init__(self, spec: WorldSpec):
        self.spec = spec.validate()
        self.task_description = f"put the {ITEM} in container {spec.target_location}"
        self._placement = self._place_distractors(spec)
        self.state = _WorldState(
            location=0,
            opened=frozenset(),
            key_at=spec.item_location,
            last_event=self._room_sentence(),
        )

    @staticmethod
    def _place_distractors(spec: WorldSpec) -> dict[int, tuple[str, ...]]:
        rng = random.Random(spec.seed)
        placement: dict[int, list[str]] = {}
        for item in spec.distractor_items:
            placement.setdefault(rng.randint(1, spec.container_count), []).append(item)
        return {k: tuple(v) for k, v in placement.items()}

    def _room_sentence(self) -> str:
        n = self.spec.container_count
        names = [f"a container {i}" for i in range(1, n + 1)]
        listing = names[0] if n == 1 else ", ".join(names[:-1]) + f", and {names[-1]}"
        return (
            f"You are in the middle of a room with {n} containers. "
            f"Looking quickly around you, you see {listing}."
        )

    def _contents(self, state: _WorldState, n: int) -> str:
        items = [ITEM] if state.key_at == n else []
        items += self._placement.get(n, ())
        if not items:
            return "It is empty."
        listed = " and ".join(f"a {i}" for i in items)
        return f"In it, you see {listed}."

    def _describe_container(self, state: _WorldState, n: int) -> str:
        if n in state.opened:
            return f"Container {n} is open. {self._contents(state, n)}"
        return f"Container {n} is closed."

    @property
    def terminal(self) -> bool:
        return self.state.goal

    def admissible(self, state: _WorldState | None = None) -> tuple[str, ...]:
        s = self.state if state is None else state
        if s.goal:
            return ()
        n = self.spec.container_count
        held = s.key_at == -1
        acts = [f"go to container {i}" for i in range(1, n + 1) if i != s.location]
        if not held:
            acts += [f"open container {i}" for i in range(1, n + 1) if i not in s.opened]
        if s.key_at in s.opened:
            acts.append(f"take {ITEM} from container {s.key_at}")
        if held:
            acts += [f"put {ITEM} in container {i}" for i in range(1, n + 1)]
        acts += ["look", "inventory"]
        return tuple(acts)

    def observe(self) -> Observation:
        return Observation(self.state.last_event, self.admissible(), self.state.goal)

    def apply(self, action: str) -> Observation:
        if self.state.goal:
            raise UsageError("environment is terminal")
        s = self.state
        if action not in self.admissible():
            self.state = replace(s, last_event=NOTHING_HAPPENS)
            return replace(self.observe(), invalid=True)
        words = action.split()
        if action == "look":
            if s.location:
                event = f"You are at container {s.location}. " + self._describe_container(s, s.location)
            else:
                event = self._room_sentence()
            s = replace(s, last_event=event)
        elif action == "inventory":
            held = f"You are carrying: a {ITEM}." if s.key_at == -1 else "You are not carrying anything."
            s = replace(s, last_event=held)
        elif words[0] == "go":
            n = int(words[-1])
            s = replace(s, location=n)
            s = replace(s, last_event=f"You arrive at container {n}. " + self._describe_container(s, n))
        elif words[0] == "open":
            n = int(words[-1])
            s = replace(s, location=n, opened=s.opened | {n})
            s = replace(s, last_event=f"You open container {n}. {self._contents(s, n)}")
        elif words[0] == "take":
            n = int(words[-1])
            s = replace(s, location=n, key_at=-1, last_event=f"You pick up the {ITEM} from container {n}.")
        elif words[0] == "put":
            n = int(words[-1])
            s = replace(
                s,
                location=n,
                key_at=n,
                opened=s.opened | {n},
                goal=n == self.spec.target_location,
                last_event=f"You put the {ITEM} in container {n}.",
            )
        self.state = s
        return self.observe()


@dataclass
class EnvInstance:
    env_id: int
    world: Any  # a TextEnvironment
    step_count: int = 0
    history: list[tuple[str, Observation]] = field(default_factory=list)

    @property
    def observation(self) -> Observation:
        return self.history[-1][1] if self.history else self.world.observe()

    @property
    def terminal(self) -> bool:
        return self.world.terminal


@dataclass
class ParallelEnvSet:
    instances: list[EnvInstance]
    task_description: str
    initial_observation: Observation

    @property
    def k(self) -> int:
        return len(self.instances)

    def get(self, env_id: int) -> EnvInstance:
        if not isinstance(env_id, int) or not 1 <= env_id <= len(self.instances):
            raise ProtocolError(f"unknown env_id {env_id} (set has {len(self.instances)} environments)")
        return self.instances[env_id - 1]


@dataclass
class ParallelStep:
    """One timestep: the selected environments, their actions and results."""

    t: int
    intents: tuple[tuple[int, str], ...]
    observations: tuple[tuple[int, Observation], ...] = ()
    invalid_flags: tuple[bool, ...] = ()
    # observation text each selected env showed before acting
    pre_texts: tuple[str, ...] = ()
    step_reward: Any = None
    blocked: bool = False
    parse_error: str | None = None
    context: Any = None
    logprob_old: float | None = None
    raw_output: str | None = None

    @property
    def env_ids(self) -> tuple[int, ...]:
        return tuple(e for e, _ in self.intents)

    @property
    def any_invalid(self) -> bool:
        # a blocked or unparseable turn never ran, so it takes the invalid-action penalty
        return any(self.invalid_flags) or self.parse_error is not None or self.blocked

    @property
    def reached_goal(self) -> bool:
        return any(o.is_goal for _, o in self.observations)


def create_world(spec: WorldSpec, env_id: int = 1) -> EnvInstance:
    return EnvInstance(env_id=env_id, world=KeyDoorWorld(spec))


def step(instance: EnvInstance, action: str) -> Observation:
    """Apply ``action``; inadmissible actions leave the world unchanged and come back flagged."""
    if instance.terminal:
        raise UsageError(f"env {instance.env_id} is terminal")
    obs = instance.world.apply(action)
    instance.history.append((action, obs))
    instance.step_count += 1
    return obs


def spawn_parallel(instance: EnvInstance, k: int) -> ParallelEnvSet:
    if not isinstance(k, int) or k < 1:
        raise ConfigError("k_parallel", f"must be >= 1, got {k!r}")
    if instance.step_count != 0:
        raise UsageError("can only spawn clones from a fresh instance")
    clones = []
    for i in range(1, k + 1):
        clone = copy.deepcopy(instance)
        clone.env_id = i
        clones.append(clone)
    return ParallelEnvSet(clones, instance.world.task_description, instance.observation)


def parallel_step(env_set: ParallelEnvSet, pstep: ParallelStep) -> ParallelStep:
    """Execute every (env_id, action) pair of ``pstep`` in its own instance.

    All referenced ids are validated before anything runs, so a bad turn leaves
    every instance untouched. Instances share no state, so execution order does
    not affect the result.
    """
    targets = []
    for env_id, _ in pstep.intents:
        inst = env_set.get(env_id)
        if inst.terminal:
            raise UsageError(f"env {env_id} is terminal")
        targets.append(inst)
    if len({i.env_id for i in targets}) != len(targets):
        raise ProtocolError("duplicate env_id in one step")
    pre = tuple(inst.observation.text for inst in targets)
    observations = []
    for inst, (env_id, action) in zip(targets, pstep.intents):
        observations.append((env_id, step(inst, action)))
    return replace(
        pstep,
        observations=tuple(observations),
        invalid_flags=tuple(o.invalid for _, o in observations),
        pre_texts=pre,
    )
