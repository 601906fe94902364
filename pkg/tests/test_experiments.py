from dataclasses import replace

from conftest import SMALL_RUN
from dpepo.config import parse_config
from dpepo.experiments import ablation, greedy_success, k_sweep, train_until
from dpepo.runner import initial_params


def _cfg(tmp_path, **kw):
    return parse_config(dict(SMALL_RUN, output_dir=str(tmp_path), **kw))


def test_train_until_zero_threshold_is_immediate(tmp_path):
    res = train_until(_cfg(tmp_path), threshold=0.0)
    assert res.reached and res.iterations == 0 and res.history == []


def test_train_until_runs_out_of_iterations(tmp_path):
    res = train_until(_cfg(tmp_path, iterations=4), threshold=1.01, check_every=2)
    assert not res.reached and res.iterations == 4 and [it for it, _ in res.history] == [2, 4]


def test_greedy_success_untrained(tmp_path):
    cfg = _cfg(tmp_path)
    assert 0.0 <= greedy_success(cfg, initial_params(cfg)) <= 1.0


def test_k_sweep_verdicts(tmp_path):
    cfg = _cfg(tmp_path)
    rows, gaps = k_sweep(cfg, initial_params(cfg), ks=(4, 1, 2), episodes_per_task=5)
    assert [r.k for r in rows] == [1, 2, 4]
    assert [(g.larger, g.smaller) for g in gaps] == [(2, 1), (4, 2)]
    assert all(g.verdict in ("higher", "tie", "lower") for g in gaps)
    for g in gaps:
        lo = next(r.report for r in rows if r.k == g.smaller)
        hi = next(r.report for r in rows if r.k == g.larger)
        assert (g.verdict == "tie") == hi.overlaps(lo)


def test_ablation_pairs_seeds(tmp_path):
    cfg = replace(_cfg(tmp_path), iterations=2)
    rows = ablation(cfg, seeds=(0, 1))
    assert [r.seed for r in rows] == [0, 1]
    for r in rows:
        d = r.to_dict()
        assert set(d) >= {"full", "ablated", "repeats_higher_when_ablated", "diversity_lower_when_ablated"}
        assert 0 < r.full.diversity <= 1 and 0 < r.ablated.diversity <= 1
