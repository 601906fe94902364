import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_step, random_raw_steps
from oracles import recount, rewards_from_counts
from dpepo.env import ParallelStep
from dpepo.errors import ConfigError, UsageError
from dpepo.reward import (
    RepetitionCounters,
    RewardConfig,
    combine,
    count_repetitions,
    diverse_action_reward,
    diverse_transition_reward,
    score_steps,
    state_digest,
    step_keys,
    step_reward,
    trajectory_success_reward,
)
from dpepo.rollout import Trajectory

CFG = RewardConfig()


def _steps(raw):
    return [make_step(t, entries) for t, entries in enumerate(raw, 1)]


def _history(raw):
    hist = {}
    for entries in raw:
        for e, p, a in entries:
            hist.setdefault(e, []).append((state_digest(p), a))
    return hist


def test_fresh_counters_are_zero():
    c = count_repetitions({}, make_step(1, [(1, "s", "look"), (2, "s", "open container 1")]))
    assert c.c_width == 0 and set(c.c_depth.values()) == {0}
    assert set(c.m_depth.values()) == {0} and set(c.m_width.values()) == {0}


def test_same_fresh_action_counts_width_once():
    c = count_repetitions({}, make_step(1, [(1, "s1", "look"), (2, "s2", "look")]))
    assert c.c_width == 1
    assert c.c_depth == {1: 0, 2: 0}


def test_repeated_transition_depth():
    raw = [[(1, "a", "look")], [(1, "b", "open")], [(1, "a", "look")]]
    c = count_repetitions(_history(raw[:2]), make_step(3, raw[2]))
    assert c.m_depth[1] == 1 and c.c_depth[1] == 1


def test_action_reward_fixtures():
    # env 1's action used once before, env 2 fresh, distinct actions
    c = RepetitionCounters(c_depth={1: 1, 2: 0}, c_width=0)
    step = make_step(2, [(1, "x", "a"), (2, "x", "b")])
    assert diverse_action_reward(c, step, CFG) == pytest.approx(1.9, abs=1e-15)
    same = make_step(1, [(1, "x", "a"), (2, "y", "a")])
    c2 = count_repetitions({}, same)
    assert diverse_action_reward(c2, same, CFG) == pytest.approx(1.95, abs=1e-15)


def test_transition_reward_fixtures():
    raw = [[(1, "s", "look")], [(1, "s", "look")]]
    c = count_repetitions(_history(raw[:1]), make_step(2, raw[1]))
    assert diverse_transition_reward(c, make_step(2, raw[1]), CFG) == pytest.approx(1.95, abs=1e-15)
    both = make_step(1, [(1, "s", "look"), (2, "s", "look")])
    c = count_repetitions({}, both)
    assert c.m_width == {1: 1, 2: 1}
    assert diverse_transition_reward(c, both, CFG) == pytest.approx(1.95, abs=1e-15)


def test_all_fresh_maximum():
    step = make_step(1, [(1, "s", "a"), (2, "s", "b"), (3, "s", "c")])
    sr = step_reward(step, {}, CFG)
    assert (sr.r_action, sr.r_transition, sr.r_step) == (2.0, 2.0, 2.0)


def test_combine_and_penalty():
    assert combine(1.9, 1.95, False, CFG).r_step == pytest.approx(1.925)
    sr = combine(1.8, 1.8, True, CFG)
    assert sr.r_step == pytest.approx(0.9) and sr.invalid_applied


def test_invalid_flag_applies_penalty():
    step = make_step(1, [(1, "s", "fly"), (2, "s", "look")], invalid=[True, False])
    assert step_reward(step, {}, CFG).r_step == 1.0


def test_parse_failure_step_is_penalized():
    s = ParallelStep(1, (), parse_error="missing <parallel> block")
    (sr, counters), = score_steps([s], CFG)
    assert counters is None and sr.invalid_applied and sr.r_step == 1.0


def test_empty_step_rejected_by_subrewards():
    with pytest.raises(UsageError):
        diverse_action_reward(RepetitionCounters(), ParallelStep(1, ()), CFG)
    with pytest.raises(UsageError):
        diverse_transition_reward(RepetitionCounters(), ParallelStep(1, ()), CFG)


def test_config_validation():
    with pytest.raises(ConfigError) as ei:
        RewardConfig(alpha=0.0).validate()
    assert ei.value.key == "reward.alpha"
    with pytest.raises(ConfigError):
        RewardConfig(beta=1.5).validate()


def test_disable_switches_use_zero_repetition_value():
    raw = [[(1, "s", "a"), (2, "s", "a")], [(1, "s", "a"), (2, "s", "a")]]
    steps = _steps(raw)
    both = score_steps(steps, RewardConfig(disable_dar=True, disable_dtr=True))
    assert [sr.r_step for sr, _ in both] == [2.0, 2.0]
    dar_off = score_steps(steps, RewardConfig(disable_dar=True))
    assert all(sr.r_action == 2.0 and sr.r_transition < 2.0 for sr, _ in dar_off)


def test_average_width_variant():
    step = make_step(1, [(1, "s", "a"), (2, "t", "a"), (3, "u", "b")])
    c = count_repetitions({}, step)
    literal = diverse_action_reward(c, step, CFG)
    averaged = diverse_action_reward(c, step, RewardConfig(average_width_action_term=True))
    assert literal == pytest.approx(1 + 0.95)
    assert averaged == pytest.approx(1 + (0.95 + 0.95 + 1) / 3)


def test_incremental_scoring_matches_history_scoring():
    rng = random.Random(11)
    for _ in range(50):
        raw = random_raw_steps(rng)
        steps = _steps(raw)
        scored = score_steps(steps, CFG)
        for t, s in enumerate(steps):
            assert step_reward(s, _history(raw[:t]), CFG) == scored[t][0]


def test_oracle_recount_random():
    rng = random.Random(2024)
    for _ in range(250):
        raw = random_raw_steps(rng)
        expected = recount(raw)
        for entries, (sr, c), exp in zip(raw, score_steps(_steps(raw), CFG), expected):
            assert c.c_depth == exp["c_depth"] and c.c_width == exp["c_width"]
            assert c.m_depth == exp["m_depth"] and c.m_width == exp["m_width"]
            ra, rt = rewards_from_counts(entries, exp)
            assert abs(sr.r_action - ra) <= 1e-12 and abs(sr.r_transition - rt) <= 1e-12


_raw = st.lists(
    st.lists(st.tuples(st.integers(1, 4), st.sampled_from(["p", "q"]), st.sampled_from(["a", "b", "c"])),
             min_size=1, max_size=4).map(lambda xs: sorted({e: (e, p, a) for e, p, a in xs}.values())),
    min_size=1, max_size=5)
_factor = st.floats(0.05, 1.0)


@settings(max_examples=150, deadline=None)
@given(_raw, _factor, _factor, _factor, _factor)
def test_reward_ranges(raw, a, w, g, b):
    cfg = RewardConfig(alpha=a, omega=w, gamma=g, beta=b)
    for sr, _ in score_steps(_steps(raw), cfg):
        assert 0 < sr.r_action <= 2 and 0 < sr.r_transition <= 2 and 0 < sr.r_step <= 2


@settings(max_examples=80, deadline=None)
@given(_raw)
def test_unit_factors_give_constant_two(raw):
    cfg = RewardConfig(alpha=1, omega=1, gamma=1, beta=1)
    assert all(sr.r_step == 2.0 for sr, _ in score_steps(_steps(raw), cfg))


@settings(max_examples=150, deadline=None)
@given(_raw, st.data())
def test_extra_prior_occurrence_never_increases_reward(raw, data):
    last = raw[-1]
    env, pre, act = data.draw(st.sampled_from(last))
    base = score_steps(_steps(raw), CFG)[-1][0]
    extra = score_steps(_steps(raw[:-1] + [[(env, pre, act)]] + [last]), CFG)[-1][0]
    assert extra.r_action < base.r_action
    assert extra.r_transition < base.r_transition


@settings(max_examples=150, deadline=None)
@given(_raw, st.permutations([1, 2, 3, 4]))
def test_env_relabeling_invariance(raw, perm):
    relabel = {i + 1: p for i, p in enumerate(perm)}
    moved = [sorted((relabel[e], p, a) for e, p, a in entries) for entries in raw]
    for (x, _), (y, _) in zip(score_steps(_steps(raw), CFG), score_steps(_steps(moved), CFG)):
        assert x.r_action == pytest.approx(y.r_action, abs=1e-15)
        assert x.r_transition == pytest.approx(y.r_transition, abs=1e-15)


def test_step_keys_digest_pre_text():
    s = make_step(1, [(2, "room", "look")])
    (k,) = step_keys(s)
    assert k.env_id == 2 and k.state_digest == state_digest("room") and k.pair == (state_digest("room"), "look")


def test_trajectory_success_reward():
    fail = Trajectory(steps=[make_step(1, [(1, "s", "a")])], complete=True)
    win = Trajectory(steps=[make_step(1, [(1, "s", "a"), (3, "s", "b")], goal_env=3)], complete=True)
    double = Trajectory(steps=[make_step(1, [(1, "s", "a"), (2, "s", "b")])], complete=True)
    double.steps[0].observations = tuple((e, o.__class__(o.text, (), True)) for e, o in double.steps[0].observations)
    assert trajectory_success_reward(fail) == 0.0
    assert trajectory_success_reward(win) == 1.0
    assert trajectory_success_reward(double) == 1.0
    with pytest.raises(UsageError):
        trajectory_success_reward(Trajectory())
