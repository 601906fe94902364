import csv
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_step, turn
from oracles import random_search_success, recount, wilson
from dpepo.env import WorldSpec
from dpepo.errors import UsageError
from dpepo.metrics import (
    ExplorationStats,
    evaluate,
    exploration_diversity,
    repeat_counts,
    token_proxy,
    trajectory_stats,
    wilson_interval,
)
from dpepo.policy import ScriptedPolicy, TabularPolicy, TabularPolicyParams, UniformRandomPolicy
from dpepo.rollout import RolloutConfig, Trajectory, new_env_set, rollout_trajectory


def _traj(raw):
    return Trajectory(steps=[make_step(t, entries) for t, entries in enumerate(raw, 1)], complete=True)


def test_diversity_fixtures():
    assert exploration_diversity(_traj([[(1, "s", "a"), (2, "s", "b")], [(1, "s", "a")]])) == pytest.approx(2 / 3)
    assert exploration_diversity(_traj([[(1, "s", "a")], [(1, "s", "a")], [(2, "s", "a")]])) == pytest.approx(1 / 3)
    assert exploration_diversity(_traj([[(1, "s", "a"), (2, "s", "b"), (3, "s", "c")]])) == 1.0
    with pytest.raises(UsageError):
        exploration_diversity(Trajectory())


def test_repeat_counts_match_recount():
    raw = [[(1, "s", "a"), (2, "s", "a")], [(1, "s", "a")], [(1, "t", "a"), (2, "s", "a")]]
    counts = recount(raw)
    act = [sum(c["c_depth"].values()) + c["c_width"] for c in counts]
    trans = [sum(c["m_depth"].values()) + sum(c["m_width"].values()) for c in counts]
    a, m = repeat_counts(_traj(raw))
    assert a == pytest.approx(sum(act) / 3) and m == pytest.approx(sum(trans) / 3)


def test_fresh_trajectory_has_no_repeats():
    a, m = repeat_counts(_traj([[(1, "s", "a"), (2, "t", "b")], [(1, "u", "c")]]))
    assert (a, m) == (0.0, 0.0)
    assert repeat_counts(Trajectory()) == (0.0, 0.0)


_raw = st.lists(
    st.lists(st.tuples(st.integers(1, 4), st.sampled_from(["p", "q"]), st.sampled_from(["a", "b", "c"])),
             min_size=1, max_size=4).map(lambda xs: sorted({e: (e, p, a) for e, p, a in xs}.values())),
    min_size=1, max_size=6)


@settings(max_examples=150, deadline=None)
@given(_raw)
def test_stats_coherence(raw):
    tr = _traj(raw)
    s = trajectory_stats(tr)
    n_actions = sum(len(x) for x in raw)
    assert 0 < s.diversity <= 1 and s.trajectory_length == len(raw)
    # a trajectory with no repeated action strings has no action repeats
    if len({a for x in raw for _, _, a in x}) == n_actions:
        assert s.mean_action_repeats == 0
    # a transition repeat needs a repeated (state, action) pair somewhere in the trajectory
    pairs = [(p, a) for x in raw for _, p, a in x]
    if len(set(pairs)) == len(pairs):
        assert s.mean_transition_repeats == 0


def test_stats_validation():
    with pytest.raises(ValueError):
        ExplorationStats(1.5, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        ExplorationStats(0.5, -1, 0, 1, 1)


def test_wilson_matches_oracle():
    for k, n in ((0, 10), (3, 10), (10, 10), (200, 407), (1, 1)):
        lo, hi = wilson_interval(k, n)
        olo, ohi = wilson(k, n)
        assert lo == pytest.approx(max(0, olo), abs=1e-12) and hi == pytest.approx(min(1, ohi), abs=1e-12)
    with pytest.raises(UsageError):
        wilson_interval(0, 0)


def test_interval_shrinks_with_more_trials():
    widths = [wilson_interval(n // 2, n)[1] - wilson_interval(n // 2, n)[0] for n in (20, 80, 320)]
    assert widths[0] > widths[1] > widths[2]


@pytest.mark.parametrize("n,horizon", [(3, 4), (4, 6)])
def test_random_policy_matches_exact_enumeration(n, horizon):
    expected = random_search_success(n, horizon)
    report = evaluate(UniformRandomPolicy(), [WorldSpec(n, 1, n)], 3000,
                      RolloutConfig(k_parallel=1, max_steps=horizon), with_tokens=False)
    assert report.ci_low <= expected <= report.ci_high


def test_parallel_random_search_beats_single():
    spec = WorldSpec(4, 1, 4)
    k1 = evaluate(UniformRandomPolicy(), [spec], 3000, RolloutConfig(k_parallel=1, max_steps=6), with_tokens=False)
    k4 = evaluate(UniformRandomPolicy(), [spec], 3000, RolloutConfig(k_parallel=4, max_steps=6), with_tokens=False)
    assert k4.success_rate > k1.success_rate and not k4.overlaps(k1)


def test_evaluate_report_and_outputs(tmp_path):
    spec = WorldSpec(3, 2, 3, 7)
    cfg = RolloutConfig(k_parallel=2, max_steps=5, seed=1)
    report = evaluate(UniformRandomPolicy(), [spec, spec.with_item_at(1)], 4, cfg)
    assert report.episodes == 8 and report.mode == "sampled" and report.k_parallel == 2
    assert report.successes + sum(report.failure_reasons.values()) == 8
    assert report.ci_low <= report.success_rate <= report.ci_high
    assert report.token_proxy_total > 0
    d = json.loads(report.to_json())
    assert d["repeat_averaging"] == "per_step" and "rows" not in d
    report.write_csv(tmp_path / "e.csv")
    rows = list(csv.DictReader(open(tmp_path / "e.csv")))
    assert len(rows) == 8 and {r["episode"] for r in rows} == {str(i) for i in range(8)}
    again = evaluate(UniformRandomPolicy(), [spec, spec.with_item_at(1)], 4, cfg)
    assert again.rows == report.rows
    with pytest.raises(UsageError):
        evaluate(UniformRandomPolicy(), [spec], 0, cfg)


def test_greedy_override():
    cfg = RolloutConfig(k_parallel=2, max_steps=3)
    report = evaluate(TabularPolicy(TabularPolicyParams()), [WorldSpec(3, 2, 3)], 2, cfg, greedy=True, with_tokens=False)
    assert report.mode == "greedy"
    assert report.rows[0]["mean_action_repeats"] == report.rows[1]["mean_action_repeats"]


def test_token_proxy_grows_with_steps():
    spec = WorldSpec(3, 2, 3, 7)
    script = [turn((1, "look"), (2, "look")), turn((1, "open container 1")), turn((2, "inventory"))]
    env_set = new_env_set(spec, 2)
    traj = rollout_trajectory(ScriptedPolicy(script), env_set, RolloutConfig(k_parallel=2, max_steps=3))
    full = token_proxy(traj)
    traj.steps = traj.steps[:2]
    assert token_proxy(traj) < full
    traj.transcript = [{"messages": [{"content": "a b c"}], "raw_output": "d e"}]
    assert token_proxy(traj) == 5
