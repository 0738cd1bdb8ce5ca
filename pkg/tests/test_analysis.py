import numpy as np
import pytest

from orderlab.analysis import (absdiff, absdiff_eval, generalization_curves, memorization_heatmap, pinned_finals,
                               pinned_permutations, random_baseline, recency_score, similarity_groups,
                               timing_compare, trend_slopes)
from orderlab.data import synth_regression, synth_text
from orderlab.errors import InputError
from orderlab.models import MLPRegressor, TinyLM
from orderlab.store import StoreOptions, build_store
from orderlab.trainer import AdamConfig, retrain_oracle, train_reference


def test_absdiff_examples():
    assert absdiff([1.0, 2.0], [1.5, 1.5]) == 0.5
    assert absdiff([0.3, 0.7, 1.1], [0.3, 0.7, 1.1]) == 0.0
    with pytest.raises(InputError):
        absdiff([1.0], [1.0, 2.0])
    with pytest.raises(InputError):
        absdiff([], [])


def test_absdiff_invariant_to_joint_reordering():
    rng = np.random.default_rng(0)
    a, b = rng.random(20), rng.random(20)
    idx = rng.permutation(20)
    assert absdiff(a[idx], b[idx]) == pytest.approx(absdiff(a, b), rel=1e-14)


def test_random_baseline_range():
    r = np.array([0.2, 0.9, 0.5, 0.4])
    guess = random_baseline(r, np.random.default_rng(1))
    assert guess.shape == r.shape and guess.min() >= 0.2 and guess.max() <= 0.9


@pytest.fixture(scope="module")
def reg():
    corpus = synth_regression(0, 120, 4, T=4)
    model = MLPRegressor(4, hidden=6)
    traj = train_reference(model, corpus, range(4), AdamConfig(lr=1e-2), model.init_params(0))
    store = build_store(traj, model, corpus, StoreOptions(compress=False, moment_derivatives=False))
    return corpus, model, traj, store


def test_absdiff_eval_identity_is_zero(reg):
    corpus, model, traj, store = reg
    reports = absdiff_eval(store, traj, model, corpus, N=2, methods=("fut", "futpp"), perms=[(0, 1, 2, 3)] * 2)
    assert reports["fut"].absdiff <= 1e-12 and reports["futpp"].absdiff <= 1e-12


def test_absdiff_eval_is_reproducible(reg):
    corpus, model, traj, store = reg
    a = absdiff_eval(store, traj, model, corpus, N=3, seed=5)
    b = absdiff_eval(store, traj, model, corpus, N=3, seed=5)
    for m in a:
        assert a[m].to_dict() == b[m].to_dict()
    assert a["random"].perms == a["fut"].perms


def test_pinned_permutations():
    perms = pinned_permutations(6, batch=2, position=4, N=5, seed=0)
    assert len(perms) == 5
    for p in perms:
        assert p[4] == 2 and sorted(p) == list(range(6))
    assert perms == pinned_permutations(6, 2, 4, 5, 0)
    with pytest.raises(InputError):
        pinned_permutations(3, 3, 0, 1, 0)


def test_single_batch_heatmap_is_trained_metric():
    full = synth_regression(2, 60, 3, T=1)
    model = MLPRegressor(3, hidden=4)
    traj = train_reference(model, full, [0], AdamConfig(lr=1e-2), model.init_params(0))
    store = build_store(traj, model, full, StoreOptions(compress=False))
    hm = memorization_heatmap(store, traj, model, full, N=2)
    assert hm.grid.shape == (1, 1)
    assert hm.grid[0, 0] == model.metric(traj.thetas[-1], full.train[0])


def test_heatmap_cell_matches_direct_computation(reg):
    corpus, model, traj, store = reg
    hm = memorization_heatmap(store, traj, model, corpus, N=2, seed=1, oracle=True)
    perms = pinned_permutations(4, 1, 3, 2, 1)
    vals = []
    for p in perms:
        o, _ = retrain_oracle(model, corpus, p, traj.config, traj.theta(0), None, "final")
        vals.append(model.metric(o.thetas[-1], corpus.train[1]))
    assert hm.grid[1, 3] == pytest.approx(np.mean(vals), rel=1e-12)
    assert hm.mode == "oracle"


def test_curves_on_a_training_batch_equal_memorization_row(reg):
    corpus, model, traj, store = reg
    finals = pinned_finals(store, traj, model, corpus, N=2, seed=0)
    hm = memorization_heatmap(store, traj, model, corpus, finals=finals)
    gen = generalization_curves(store, traj, model, corpus, test_set=corpus.train[2], finals=finals)
    assert np.array_equal(gen.curves[2], hm.grid[2])


def test_similarity_groups_tie_rule():
    tau, high, low = similarity_groups([0.4, 0.4, 0.4])
    assert tau == pytest.approx(0.4) and high == [0, 1, 2] and low == []
    tau, high, low = similarity_groups([0.1, 0.5, 0.3])
    assert high == [1, 2] and low == [0]


def test_generalization_groups_on_text():
    corpus = synth_text(0, n_docs=80, T=4, seq_len=32)
    model = TinyLM(corpus.vocab_size, context=3, embed=6, hidden=8)
    traj = train_reference(model, corpus, range(4), AdamConfig(lr=5e-3), model.init_params(0))
    store = build_store(traj, model, corpus, StoreOptions(compress=False))
    gen = generalization_curves(store, traj, model, corpus, N=1)
    assert gen.curves.shape == (4, 4)
    assert sorted(gen.high + gen.low) == [0, 1, 2, 3]
    assert all(gen.similarity[i] >= gen.tau for i in gen.high)


def test_recency_score_sign():
    rising = np.array([[1.0, 2.0, 3.0], [0.5, 0.6, 0.9]])
    assert recency_score(rising) == pytest.approx(1.0)
    assert recency_score(-rising) == pytest.approx(-1.0)
    assert recency_score(np.ones((2, 3))) == 0.0


def test_trend_slopes():
    curves = np.array([[0.0, 1.0, 2.0], [3.0, 1.0, -1.0]])
    assert np.allclose(trend_slopes(curves), [1.0, -2.0])


def test_timing_example():
    (row,) = timing_compare(40.0, 0.1, 10.0, [10])
    assert row["amortized_estimate_s"] == pytest.approx(4.1)
    assert row["amortized_estimate_s"] < row["retrain_s"]
    assert row["speedup"] == pytest.approx(10 / 4.1)


def test_timing_limit_is_per_order_cost():
    rows = timing_compare(40.0, 0.1, 10.0, [10**9])
    assert rows[0]["amortized_estimate_s"] == pytest.approx(0.1, rel=1e-6)
    with pytest.raises(InputError):
        timing_compare(1.0, 1.0, 1.0, [0])


def test_similarity_is_zero_without_tokens(reg):
    corpus, model, traj, store = reg
    gen = generalization_curves(store, traj, model, corpus, N=1)
    assert not gen.similarity.any()
