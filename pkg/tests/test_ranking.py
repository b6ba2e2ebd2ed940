import itertools

import numpy as np
import pytest

from conftest import random_model
from layer_ensembles.bench import BenchConfig, gen_dataset, oracle_predictions, quality_score
from layer_ensembles.ensemble import full_samples, predict, random_samples
from layer_ensembles.ranking import best_prefix, evaluate_prefixes, format_sample, rank_samples


@pytest.fixture(scope="module")
def setup():
    cfg = BenchConfig(D_x=3, lam=5, eps_std=0.1, seed=0)
    data = gen_dataset(cfg)
    oracle_val, oracle_test = oracle_predictions(data, cfg)
    model = random_model(np.random.default_rng(0), N=3, K=3, widths=[3, 6, 6, 1])
    return model, data, oracle_val, oracle_test


def q_of(model, subset, X, oracle):
    """Independent re-evaluation: full forward passes, no cached outputs."""
    return quality_score(predict(model, subset, X), oracle).mean_kl


def test_pool_of_one(setup):
    model, data, ov, _ = setup
    ranked = rank_samples(model, [(1, 2, 0)], data.X_val, ov)
    assert ranked.samples == [(1, 2, 0)] and len(ranked.scores) == 1


def test_full_ranking_is_permutation(setup):
    model, data, ov, _ = setup
    pool = full_samples(3, 3)
    ranked = rank_samples(model, pool, data.X_val, ov)
    assert sorted(ranked.samples) == pool
    assert ranked.evaluations == sum(27 - P for P in range(27))


def test_evaluation_count_partial(setup):
    model, data, ov, _ = setup
    ranked = rank_samples(model, full_samples(3, 3), data.X_val, ov, max_P=5)
    assert len(ranked.samples) == len(ranked.scores) == 5
    assert ranked.evaluations == sum(27 - P for P in range(5))
    with pytest.raises(ValueError):
        rank_samples(model, full_samples(3, 3), data.X_val, ov, max_P=28)
    with pytest.raises(ValueError):
        rank_samples(model, [], data.X_val, ov)


def test_greedy_pair_matches_exhaustive(setup):
    model, data, ov, _ = setup
    pool = random_samples(3, 3, 5, np.random.default_rng(3))
    ranked = rank_samples(model, pool, data.X_val, ov, max_P=2)
    singles = {s: q_of(model, [s], data.X_val, ov) for s in pool}
    first = min(sorted(pool), key=lambda s: singles[s])
    pairs = {s: q_of(model, [first, s], data.X_val, ov) for s in pool if s != first}
    second = min(sorted(pairs), key=lambda s: pairs[s])
    assert ranked.samples == [first, second]
    assert ranked.scores[1] == pytest.approx(pairs[second], rel=1e-12)


def test_step_optimality_under_reevaluation(setup):
    model, data, ov, _ = setup
    pool = full_samples(3, 3)
    ranked = rank_samples(model, pool, data.X_val, ov, max_P=6)
    for P in range(6):
        chosen = ranked.samples[:P]
        best = q_of(model, chosen + [ranked.samples[P]], data.X_val, ov)
        for s in set(pool) - set(ranked.samples[:P + 1]):
            assert q_of(model, chosen + [s], data.X_val, ov) >= best - 1e-12 * max(1.0, best)


def test_nested_prefixes(setup):
    model, data, ov, _ = setup
    ranked = rank_samples(model, full_samples(3, 3), data.X_val, ov, max_P=8)
    for P in range(1, 8):
        assert set(ranked.prefix(P)) < set(ranked.prefix(P + 1))


def test_ties_go_to_smallest_sample():
    model = random_model(np.random.default_rng(1), N=2, K=3, widths=[3, 4, 1])
    for i in range(2):
        for q in range(3):
            model.options[i][q] = model.options[i][0].copy()
            model.prior_options[i][q] = model.prior_options[i][0].copy()
    cfg = BenchConfig(D_x=3, lam=2, eps_std=0.1, seed=1)
    data = gen_dataset(cfg)
    ov, _ = oracle_predictions(data, cfg)
    ranked = rank_samples(model, list(reversed(full_samples(3, 2))), data.X_val, ov)
    assert ranked.samples == full_samples(3, 2)


def test_threads_do_not_change_ranking(setup):
    model, data, ov, _ = setup
    a = rank_samples(model, full_samples(3, 3), data.X_val, ov, max_P=6)
    b = rank_samples(model, full_samples(3, 3), data.X_val, ov, max_P=6, threads=4)
    assert a.samples == b.samples and a.scores == b.scores


def test_prefix_curve(setup):
    model, data, ov, ot = setup
    pool = full_samples(3, 3)
    ranked = rank_samples(model, pool, data.X_val, ov)
    curve = evaluate_prefixes(model, ranked, data.X_test, ot)
    assert [P for P, _ in curve] == list(range(1, 28))
    assert curve[-1][1] == pytest.approx(q_of(model, pool, data.X_test, ot), rel=1e-12)
    P = best_prefix(curve)
    assert curve[P - 1][1] == min(q for _, q in curve)
    assert ranked.test_scores == [q for _, q in curve]


def test_best_prefix_picks_first_minimum():
    assert best_prefix([(1, 3.0), (2, 1.0), (3, 1.0), (4, 2.0)]) == 2


def test_format_sample():
    assert format_sample((0, 12, 3)) == "0-12-3"
