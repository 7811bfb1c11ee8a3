import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from thermid.classify import (Algorithm, Decision, TrainConfig, Standardizer, decide, decide_likelihood,
                              downsample_trace, evaluate, platt_fit, report_from_likelihood, split_indices,
                              train, train_cnn, train_mlp, train_svm)
from thermid.errors import ConfigurationError, DataError, NumericalFailure
from thermid.nets import Cnn, Mlp, good_probability, gradient_check

likelihoods = arrays(float, st.integers(1, 200), elements=st.floats(0, 1))


def blobs(n=200, d=4, sep=3.0, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.standard_normal((n, d)) + sep * y[:, None] * np.eye(d)[0]
    return X, y


# --- configuration and architecture -----------------------------------------------------------------

def test_train_config_defaults():
    mt, mi, cn = TrainConfig.mlp_trace(), TrainConfig.mlp_ident(), TrainConfig.cnn_trace()
    for c in (mt, mi, cn):
        assert c.learning_rate == 1e-3 and c.betas == (0.9, 0.999) and c.eps == 1e-8
        assert c.batch_size == 128 and c.patience == 5 and c.iteration_unit == "batch"
    assert mt.weight_decay == mi.weight_decay == 1e-4 and cn.weight_decay == 1e-5
    assert mt.max_iterations == 3000 and mt.loss_threshold is None
    assert mi.loss_threshold == 0.15 and cn.loss_threshold == 0.18
    assert cn.dropout == 0.5 and cn.algorithm is Algorithm.CNN_TRACE
    for bad in ({"learning_rate": 0}, {"weight_decay": -1}, {"batch_size": 0}, {"loss_threshold": -1},
                {"dropout": 1.0}, {"svm_c": 0}, {"iteration_unit": "day"}):
        with pytest.raises(ConfigurationError):
            TrainConfig("mlp_features", **bad)


def test_mlp_architecture():
    m = Mlp(12)
    linears = [l for l in m.modules() if isinstance(l, torch.nn.Linear)]
    assert [l.out_features for l in linears] == [64, 64, 32, 16, 2]
    assert sum(isinstance(l, torch.nn.ReLU) for l in m.modules()) == 4
    p = good_probability(m(torch.randn(5, 12)))
    assert p.shape == (5,) and torch.all((p >= 0) & (p <= 1))
    with pytest.raises(ValueError):
        Mlp(3, (8, 8))


def test_cnn_architecture():
    m = Cnn(11, base=16)
    convs = [l for l in m.modules() if isinstance(l, torch.nn.Conv1d)]
    assert [c.out_channels for c in convs] == [16, 32, 64, 128]
    assert sum(isinstance(l, torch.nn.MaxPool1d) for l in m.modules()) == 4
    z = m.features(torch.randn(2, 11, 2048))
    assert z.shape == (2, 128, 8) and m.pool(z).shape[-1] == 1
    assert m.dropout.p == 0.5
    with pytest.raises(ValueError):
        Cnn(3, kernel=4)


@pytest.mark.parametrize("seed", range(5))
def test_mlp_gradients_match_finite_differences(seed):
    torch.manual_seed(seed)
    m = Mlp(6, (8, 7, 6, 5))
    x = torch.randn(10, 6)
    y = torch.randint(0, 2, (10,))
    rel = gradient_check(m, x, y)
    assert max(rel.values()) <= 1e-4, rel


@pytest.mark.parametrize("seed", range(3))
def test_cnn_gradients_match_finite_differences(seed):
    torch.manual_seed(seed)
    m = Cnn(3, base=2, kernel=3, pool=2)
    x = torch.randn(4, 3, 32)
    y = torch.randint(0, 2, (4,))
    rel = gradient_check(m, x, y, n_probe=40, seed=seed)
    assert max(rel.values()) <= 1e-4, rel


# --- preprocessing ----------------------------------------------------------------------------------

def test_downsample_is_mean_pooling():
    X = np.arange(10.0)[None, None]
    np.testing.assert_allclose(downsample_trace(X, 3)[0, 0], [1.0, 4.0, 7.5])
    np.testing.assert_array_equal(downsample_trace(X, 10), X)
    with pytest.raises(DataError):
        downsample_trace(X, 11)


def test_standardizer_statistics():
    rng = np.random.default_rng(0)
    F = rng.normal(3, 2, (500, 3))
    F[:, 2] = 5.0
    Z = Standardizer.fit(F).transform(F)
    np.testing.assert_allclose(Z[:, :2].mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(Z[:, :2].std(axis=0), 1, atol=1e-12)
    assert np.all(Z[:, 2] == 0)
    T = rng.normal(0, [[1], [5]], (40, 2, 30))
    st_ = Standardizer.fit(T)
    assert st_.mean.shape == (2,)
    np.testing.assert_allclose(st_.transform(T).std(axis=(0, 2)), 1, atol=1e-12)


def test_split_indices():
    tr, te = split_indices(100, 0.8, seed=3)
    assert tr.size == 80 and te.size == 20
    assert np.intersect1d(tr, te).size == 0 and np.union1d(tr, te).tolist() == list(range(100))
    np.testing.assert_array_equal(split_indices(100, 0.8, seed=3)[0], tr)
    assert not np.array_equal(split_indices(100, 0.8, seed=4)[0], tr)
    with pytest.raises(ConfigurationError):
        split_indices(10, 1.0)


# --- SVM --------------------------------------------------------------------------------------------

def test_svm_separable_toy():
    X, y = blobs(sep=8.0)
    m = train_svm(X, y)
    assert np.all((m.decision_function(X) > 0) == y)
    l = m.likelihood(X)
    assert np.all((l > 0.5) == y)


def test_svm_label_flip_negates_decision():
    X, y = blobs(sep=1.5, seed=2)
    a = train_svm(X, y)
    b = train_svm(X, 1 - y)
    np.testing.assert_allclose(b.decision_function(X), -a.decision_function(X), rtol=1e-4, atol=1e-6)


def test_svm_default_gamma():
    X, y = blobs(d=5)
    m = train_svm(X, y)
    assert m.gamma == pytest.approx(1 / 5)


def test_platt_fit_recovers_sigmoid():
    rng = np.random.default_rng(0)
    f = rng.normal(0, 2, 20000)
    y = (rng.uniform(size=f.size) < 1 / (1 + np.exp(-1.5 * f + 0.5))).astype(int)
    a, b = platt_fit(f, y)
    assert a == pytest.approx(-1.5, abs=0.1) and b == pytest.approx(0.5, abs=0.1)


def test_single_class_rejected():
    X, _ = blobs()
    with pytest.raises(DataError, match="single class"):
        train_svm(X, np.ones(len(X)))
    with pytest.raises(DataError):
        train_mlp(X, np.full(len(X), 2))


# --- networks ---------------------------------------------------------------------------------------

def test_mlp_learns_blobs_and_is_reproducible():
    X, y = blobs(n=400)
    cfg = TrainConfig.mlp_ident(max_iterations=200)
    a = train_mlp(X, y, cfg)
    b = train_mlp(X, y, cfg)
    np.testing.assert_array_equal(a.likelihood(X), b.likelihood(X))
    assert a.history == b.history
    assert np.mean((a.likelihood(X) > 0.5) == y) > 0.9


def test_mlp_without_signal_predicts_half():
    X = np.zeros((256, 5))
    y = np.arange(256) % 2
    m = train_mlp(X, y, TrainConfig.mlp_trace(max_iterations=300))
    np.testing.assert_allclose(m.likelihood(np.random.default_rng(0).standard_normal((10, 5))), 0.5, atol=0.05)


def test_stop_rule_units():
    X, y = blobs(n=300, sep=6.0)
    capped = train_mlp(X, y, TrainConfig.mlp_trace(max_iterations=7))
    assert len(capped.history) == 7
    epochs = train_mlp(X, y, TrainConfig.mlp_trace(max_iterations=4, iteration_unit="epoch"))
    assert len(epochs.history) == 4
    early = train_mlp(X, y, TrainConfig.mlp_ident(loss_threshold=0.5, max_iterations=3000))
    assert len(early.history) < 3000


def test_non_finite_loss_aborts():
    X, y = blobs(n=256)
    with pytest.raises(NumericalFailure, match="iteration") as exc:
        train_mlp(X, y, TrainConfig.mlp_trace(max_iterations=50, learning_rate=1e35))
    assert exc.value.step is not None
    bad = X.copy()
    bad[3, 1] = np.nan
    with pytest.raises(DataError, match="non-finite"):
        train_mlp(bad, y)


def test_cnn_training_and_inference():
    rng = np.random.default_rng(0)
    y = np.arange(64) % 2
    T = rng.standard_normal((64, 3, 256)).astype(np.float32)
    T[:, 0] += y[:, None] * 2.0
    cfg = TrainConfig.cnn_trace(max_iterations=40, cnn_base=4)
    m = train_cnn(T, y, cfg)
    np.testing.assert_array_equal(m.likelihood(T), m.likelihood(T))
    np.testing.assert_array_equal(train_cnn(T, y, cfg).likelihood(T), m.likelihood(T))
    assert m.input_kind == "traces"
    with pytest.raises(DataError, match="ragged"):
        train_cnn([T[0], T[1, :, :200]], y[:2], cfg)
    with pytest.raises(DataError):
        train_cnn(T[:, :, :100], y, cfg)
    with pytest.raises(ConfigurationError):
        train_cnn(T, y, TrainConfig.mlp_trace())
    assert isinstance(train(cfg, T, y).module, Cnn)


# --- decisions and reports --------------------------------------------------------------------------

def test_decide_examples():
    assert decide_likelihood([0.93], 0.8)[0] is Decision.GOOD
    assert decide_likelihood([0.5], 0.8)[0] is Decision.UNCLASSIFIED
    assert decide_likelihood([0.1], 0.5)[0] is Decision.BAD
    assert decide_likelihood([0.5], 0.5)[0] is Decision.BAD
    with pytest.raises(ConfigurationError):
        decide_likelihood([0.5], 0.4)
    X, y = blobs(sep=8.0)
    verdicts = decide(train_svm(X, y), X[:3], 0.8)
    assert [v.tau for v in verdicts] == [0.8] * 3


@given(likelihoods)
def test_half_threshold_classifies_everything(l):
    assert not np.any(decide_likelihood(l, 0.5) == Decision.UNCLASSIFIED)


@given(likelihoods)
def test_unclassified_band_at_point_eight(l):
    d = decide_likelihood(l, 0.8)
    np.testing.assert_array_equal(d == Decision.UNCLASSIFIED, (l >= 0.2) & (l <= 0.8))


@given(l=likelihoods, data=st.data())
def test_report_conservation_and_yield_monotonicity(l, data):
    truth = data.draw(arrays(bool, l.size))
    r5 = report_from_likelihood(l, truth, 0.5)
    r8 = report_from_likelihood(l, truth, 0.8)
    assert r5.unclassified_pct == 0.0
    assert r8.unclassified_pct >= r5.unclassified_pct
    for r in (r5, r8):
        if not r.zero_yield:
            assert abs(r.correct_pct + r.misclassified_good_pct + r.misclassified_bad_pct - 100) <= 1e-9


def test_report_examples():
    truth = np.array([1, 1, 0, 0, 1], bool)
    perfect = report_from_likelihood(np.where(truth, 0.99, 0.01), truth, 0.8)
    assert (perfect.correct_pct, perfect.misclassified_good_pct, perfect.misclassified_bad_pct) == (100, 0, 0)
    r = report_from_likelihood([0.9, 0.5, 0.9, 0.1, 0.1], truth, 0.8, errors=[0.3, 0.4, 2.0, 3.0, 0.5])
    assert r.n_classified == 4 and r.unclassified_pct == 20.0
    assert r.correct_pct == 50.0 and r.misclassified_good_pct == 25.0 and r.misclassified_bad_pct == 25.0
    np.testing.assert_array_equal(r.good_errors, [0.3, 2.0])
    np.testing.assert_array_equal(r.ecdf()[1], [0.5, 1.0])
    empty = report_from_likelihood([0.5, 0.6], [True, False], 0.8)
    assert empty.zero_yield and np.isnan(empty.correct_pct) and empty.unclassified_pct == 100.0
    with pytest.raises(DataError):
        report_from_likelihood([0.5], [True, False], 0.8)


def test_random_likelihood_is_a_coin_flip():
    rng = np.random.default_rng(0)
    truth = np.arange(4000) % 2 == 0
    r = report_from_likelihood(rng.uniform(size=4000), truth, 0.5)
    assert abs(r.correct_pct - 50) <= 5


def test_evaluate_uses_model_likelihood():
    X, y = blobs(sep=8.0)
    m = train_svm(X, y)
    r = evaluate(m, X, y.astype(bool), 0.5)
    assert r.correct_pct == 100.0
