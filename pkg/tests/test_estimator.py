import numpy as np
import pytest
from scipy import stats

from orderlab.analysis import absdiff_eval
from orderlab.data import Corpus, synth_regression, synth_text
from orderlab.errors import ConfigError, DivergenceError, InputError, StoreError
from orderlab.estimator import (FUT, FUTPP, EstimatorConfig, estimate, estimate_performance, identity,
                                parse_permutation)
from orderlab.models import MLPRegressor, TinyLM
from orderlab.store import StoreOptions, build_store
from orderlab.trainer import AdamConfig, retrain_oracle, train_reference


@pytest.fixture(scope="module")
def lm():
    corpus = synth_text(0, n_docs=120, T=6, seq_len=32)
    model = TinyLM(corpus.vocab_size, context=3, embed=8, hidden=16)
    traj = train_reference(model, corpus, range(6), AdamConfig(lr=1e-3), model.init_params(0))
    store = build_store(traj, model, corpus, StoreOptions(compress=False))
    return corpus, model, traj, store


@pytest.mark.parametrize("mode", [FUT, FUTPP])
@pytest.mark.parametrize("compress", [False, True])
def test_identity_order_is_exact(lm, mode, compress):
    corpus, model, traj, store = lm
    if compress:
        store = build_store(traj, model, corpus, StoreOptions(compress=True, k_ladder=(4,)))
    est = estimate(store, traj, identity(6), EstimatorConfig(mode))
    assert np.array_equal(est.gammas, traj.thetas)


def test_gamma0_is_theta0(lm):
    corpus, model, traj, store = lm
    est = estimate(store, traj, [5, 4, 3, 2, 1, 0])
    assert np.array_equal(est.gammas[0], traj.thetas[0]) and est.gammas.shape[0] == 7


def test_identical_batches_swapped_match_reference():
    base = synth_regression(1, 120, 4, T=4)
    b = list(base.train)
    b[2] = b[1].relabel(2)
    corpus = Corpus(tuple(b), base.validation, base.test)
    model = MLPRegressor(4, hidden=6)
    traj = train_reference(model, corpus, range(4), AdamConfig(lr=1e-2), model.init_params(0))
    store = build_store(traj, model, corpus, StoreOptions(compress=False))
    for mode in (FUT, FUTPP):
        est = estimate(store, traj, [0, 2, 1, 3], EstimatorConfig(mode))
        assert np.max(np.abs(est.gammas - traj.thetas)) <= 1e-9


def test_clipping_bound(lm):
    corpus, model, traj, store = lm
    cfg = EstimatorConfig(FUTPP, clip_bound=0.3)
    est = estimate(store, traj, [3, 1, 5, 0, 2, 4], cfg, keep_updates=True)
    G = store.dense()[0]
    for t, l in enumerate(est.perm):
        bound = np.maximum(0.3, np.abs(G[t, l]))
        assert (np.abs(est.updates[t]) <= bound).all()
        small = np.abs(G[t, l]) <= 0.3
        assert (np.abs(est.updates[t][small]) <= 0.3).all()


def test_param_clipping_flag(lm):
    corpus, model, traj, store = lm
    est = estimate(store, traj, [1, 0, 2, 3, 4, 5], EstimatorConfig(clip_target="params", clip_bound=0.05))
    assert np.abs(est.gammas[1:]).max() <= 0.05


def test_deterministic(lm):
    corpus, model, traj, store = lm
    a = estimate(store, traj, [2, 0, 1, 5, 4, 3], EstimatorConfig(FUTPP))
    b = estimate(store, traj, [2, 0, 1, 5, 4, 3], EstimatorConfig(FUTPP))
    assert np.array_equal(a.gammas, b.gammas)


def test_estimation_does_not_touch_the_model(lm, monkeypatch):
    corpus, model, traj, store = lm
    store.dense()

    def boom(*a, **k):
        raise AssertionError("gradient evaluated during estimation")

    monkeypatch.setattr(model, "_loss_grad", boom)
    estimate(store, traj, [1, 2, 3, 4, 5, 0], EstimatorConfig(FUTPP))


def test_futpp_requires_second_order_store(lm):
    corpus, model, traj, _ = lm
    store = build_store(traj, model, corpus, StoreOptions(compress=False, second_order=False))
    with pytest.raises(StoreError):
        estimate(store, traj, identity(6), EstimatorConfig(FUTPP))
    estimate(store, traj, identity(6), EstimatorConfig(FUT))


def test_divergence_names_step(lm):
    corpus, model, traj, store = lm
    G, dG, d2G = store.dense()
    bad = store.__class__(store.T, store.order, store.layout, store.codecs, store.anchors, store.entries, True)
    dG2 = dG.copy()
    dG2[1] = np.inf
    bad._dense = (G, dG2, d2G)
    with pytest.raises(DivergenceError, match="step 1"):
        estimate(bad, traj, [1, 0, 2, 3, 4, 5], EstimatorConfig(clip_target="none"))


def test_config_validation():
    with pytest.raises(ConfigError):
        EstimatorConfig("fut+")
    with pytest.raises(ConfigError):
        EstimatorConfig(clip_bound=0)
    with pytest.raises(ConfigError):
        EstimatorConfig(c=-1)


def test_bad_permutation(lm):
    corpus, model, traj, store = lm
    with pytest.raises(InputError):
        estimate(store, traj, [0, 1, 2])


def test_identity_performance_equals_oracle(lm):
    corpus, model, traj, store = lm
    est = estimate(store, traj, identity(6))
    got = [r.metric for r in estimate_performance(est, model, corpus.validation, "all")]
    _, oracle = retrain_oracle(model, corpus, identity(6), traj.config, traj.theta(0))
    assert np.max(np.abs(np.array(got) - [r.metric for r in oracle])) <= 1e-9


def test_final_only_is_length_one(lm):
    corpus, model, traj, store = lm
    est = estimate(store, traj, [5, 3, 1, 0, 2, 4])
    assert len(estimate_performance(est, model, corpus.validation)) == 1
    assert est.eval_steps == [6]
    with pytest.raises(InputError):
        estimate_performance(est, model, corpus.validation, [7])


def test_per_step_curve_tracks_oracle():
    corpus = synth_text(0, T=8)
    model = TinyLM(corpus.vocab_size)
    traj = train_reference(model, corpus, range(8), AdamConfig(lr=1e-3), model.init_params(0))
    store = build_store(traj, model, corpus, StoreOptions(compress=False, moment_derivatives=False))
    perm = [int(i) for i in np.random.default_rng(0).permutation(8)]
    est = estimate(store, traj, perm)
    got = [r.metric for r in estimate_performance(est, model, corpus.validation, "all")]
    _, oracle = retrain_oracle(model, corpus, perm, traj.config, traj.theta(0))
    assert stats.pearsonr(got, [r.metric for r in oracle]).statistic > 0.9


def test_regression_fut_beats_random():
    corpus = synth_regression(0, 400, 8, T=8)
    model = MLPRegressor(8, hidden=16)
    traj = train_reference(model, corpus, range(8), AdamConfig(lr=1e-2), model.init_params(0))
    store = build_store(traj, model, corpus, StoreOptions(compress=False, moment_derivatives=False))
    reports = absdiff_eval(store, traj, model, corpus, N=10, methods=(FUT, "random"), seed=0)
    assert reports[FUT].absdiff < reports["random"].absdiff


def test_parse_permutation():
    assert parse_permutation("3,1,2,0", 4) == (3, 1, 2, 0)
    assert parse_permutation(" 1, 0 ") == (1, 0)
    with pytest.raises(InputError):
        parse_permutation("1,a")
    with pytest.raises(InputError):
        parse_permutation("0,1,1", 3)
