import logging
import random

import pytest

from dpepo.env import Observation, ParallelStep, WorldSpec
from dpepo.protocol import AgentTurn


def make_step(t, entries, invalid=None, goal_env=None):
    """A scored-ready step from (env_id, pre_text, action) triples."""
    intents = tuple((e, a) for e, _, a in entries)
    pre = tuple(p for _, p, _ in entries)
    flags = tuple(invalid or [False] * len(entries))
    obs = tuple((e, Observation(f"after {a}", ("look",), e == goal_env, f)) for (e, _, a), f in zip(entries, flags))
    return ParallelStep(t, intents, observations=obs, invalid_flags=flags, pre_texts=pre)


def random_raw_steps(rng: random.Random, max_steps=5, max_envs=4, texts=("s0", "s1", "s2"), actions=("a", "b", "c")):
    steps = []
    for _ in range(rng.randint(1, max_steps)):
        envs = rng.sample(range(1, max_envs + 1), rng.randint(1, max_envs))
        steps.append([(e, rng.choice(texts), rng.choice(actions)) for e in sorted(envs)])
    return steps


def turn(*pairs, think=""):
    return AgentTurn(think, tuple(pairs))


@pytest.fixture
def small_spec():
    return WorldSpec(container_count=3, item_location=2, target_location=3, seed=7)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.INFO)
    yield


SMALL_RUN = {
    "run_id": "small",
    "iterations": 3,
    "task_set": "all_item_locations",
    "world": {"container_count": 3, "item_location": 1, "target_location": 3, "seed": 2},
    "rollout": {"k_parallel": 2, "max_steps": 5, "group_size": 4, "groups_per_iteration": 2, "seed": 1},
}


@pytest.fixture
def small_run(tmp_path):
    """A tiny run config written to disk, with outputs under tmp_path."""
    import yaml

    data = dict(SMALL_RUN, output_dir=str(tmp_path / "run"))
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; the lines are echoed at the end of the run."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
