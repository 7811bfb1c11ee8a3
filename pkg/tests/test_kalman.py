import numpy as np
import pytest

from conftest import core_series, make_frame, prbs
from thermid.arx import ArxModel, autocorr, identify_arrays
from thermid.errors import DataError, NumericalFailure
from thermid.kalman import build_state_space, open_loop, run_kalman, score_model, score_models
from thermid.power import PartialPowers
from thermid.synth import gen_thermal_truth, thermal_response
from thermid.telemetry import quantize, slice_windows


def exact_state(model: ArxModel, ambient: float) -> np.ndarray:
    # state of the observer form at t=0 for a system at rest at ambient before t=0
    return np.array([ambient, -model.a[1] * ambient])


def with_noise(model, sigma_w2=None, sigma_v2=None):
    return ArxModel(model.a, model.b, model.sigma_w2 if sigma_w2 is None else sigma_w2,
                    model.sigma_v2 if sigma_v2 is None else sigma_v2, model.offset, model.core_id)


def test_state_space_layout():
    m = ArxModel(a=[-1.7, 0.72], b=[[0.1, 0.2], [0.3, 0.4]], sigma_w2=0.0, sigma_v2=0.5)
    ss = build_state_space(m)
    np.testing.assert_allclose(ss.A, [[1.7, 1.0], [-0.72, 0.0]])
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(ss.A).real), [0.8, 0.9])
    np.testing.assert_allclose(np.sort_complex(np.linalg.eigvals(ss.A)), np.sort_complex(m.poles()), atol=1e-10)
    np.testing.assert_array_equal(ss.B, [[0.1, 0.3], [0.2, 0.4]])
    assert (ss.C @ ss.G).item() == 1.0
    assert not ss.Q.any() and ss.R == 0.5
    assert build_state_space(with_noise(m, sigma_w2=0.3)).Q.tolist() == [[0.3, 0.0], [0.0, 0.0]]


def test_exact_model_exact_init_is_exact():
    truth, U, T = core_series(n_cores=3, n=3000, seed=1)
    for k in range(3):
        model = truth.models[k]
        res = run_kalman(build_state_space(model), U, T[k], burn_in=0,
                         x0=exact_state(model, truth.ambient), P0=np.zeros((2, 2)))
        assert res.mean_abs_error <= 1e-8
        np.testing.assert_allclose(res.predicted, T[k], atol=1e-10)


def test_rollout_matches_difference_equation():
    truth, U, T = core_series(n_cores=2, n=2000, seed=2)
    model = truth.models[1]
    res = run_kalman(build_state_space(model), U, T[1], burn_in=0,
                     x0=exact_state(model, truth.ambient), P0=np.zeros((2, 2)))
    np.testing.assert_allclose(res.predicted, open_loop(model, U, T[1, :2]), atol=1e-10)


def test_innovations_are_measurement_minus_prediction():
    truth, U, T = core_series(n_cores=2, n=1000, seed=3, sigma_w2=0.02, quant=1.0)
    res = run_kalman(build_state_space(with_noise(truth.models[0], sigma_v2=1 / 12)), U, T[0])
    np.testing.assert_array_equal(res.innovations, T[0] - res.predicted)
    used = res.innovations[60:]
    assert res.mean_abs_error == pytest.approx(np.mean(np.abs(used)))
    assert res.error_std == pytest.approx(np.std(used))


def test_true_model_on_quantized_data_is_accurate():
    truth, U, T = core_series(n_cores=8, n=21600, seed=0, sigma_w2=0.02, quant=1.0)
    for k in (0, 4):
        res = run_kalman(build_state_space(with_noise(truth.models[k], sigma_v2=1 / 12)), U, T[k])
        assert res.mean_abs_error <= 1.2


def test_huge_measurement_noise_gives_open_loop():
    truth = gen_thermal_truth(2, 5, sigma_w2=0.02)
    U = prbs(3, 3000, 6)
    clean = thermal_response(truth, U)
    noisy = quantize(thermal_response(truth, U, 0.14 * np.random.default_rng(0).standard_normal((2, 3000))))
    model = truth.models[0]
    x0 = exact_state(model, truth.ambient)
    rollout = open_loop(model, U, clean[0, :2])
    far = run_kalman(build_state_space(with_noise(model, sigma_v2=1e12)), U, noisy[0], burn_in=0, x0=x0)
    near = run_kalman(build_state_space(with_noise(model, sigma_v2=1 / 12)), U, noisy[0], burn_in=0, x0=x0)
    assert np.max(np.abs(far.predicted - rollout)) < 1e-3
    assert np.max(np.abs(near.predicted - rollout)) > 0.1


def test_innovations_white_under_true_model():
    N = 20000
    truth = gen_thermal_truth(1, 7, sigma_w2=0.05)
    U = prbs(2, N, 8)
    rng = np.random.default_rng(9)
    T = thermal_response(truth, U, np.sqrt(0.05) * rng.standard_normal((1, N))) + 0.3 * rng.standard_normal(N)
    model = with_noise(truth.models[0], sigma_v2=0.09)
    res = run_kalman(build_state_space(model), U, T[0], burn_in=200)
    rho = autocorr(res.innovations[200:], range(1, 5))
    assert np.all(np.abs(rho) < 3 / np.sqrt(N - 200))


def test_input_validation():
    ss = build_state_space(ArxModel(a=[-0.5], b=[[1.0], [1.0]]))
    with pytest.raises(DataError, match="samples"):
        run_kalman(ss, np.ones((2, 10)), np.ones(9))
    with pytest.raises(DataError, match="non-finite"):
        run_kalman(ss, np.ones((2, 100)), np.r_[np.ones(99), np.inf])
    with pytest.raises(DataError, match="burn-in"):
        run_kalman(ss, np.ones((2, 10)), np.ones(10), burn_in=10)
    with pytest.raises(DataError, match="inputs"):
        run_kalman(ss, np.ones((3, 100)), np.ones(100))


def test_divergent_filter_is_reported():
    wild = ArxModel(a=[-1e200, 0.0], b=np.zeros((2, 2)), sigma_w2=1e300)
    with pytest.raises(NumericalFailure) as exc:
        run_kalman(build_state_space(wild), np.ones((2, 200)), np.ones(200))
    assert exc.value.step >= 0
    mae, std = score_models([wild], np.ones((1, 1, 200)), np.ones((1, 2, 200)), [0])
    assert np.isinf(mae[0]) and np.isinf(std[0])


def test_score_model_composes_run_kalman():
    truth, U, T = core_series(n_cores=2, n=4000, seed=4, sigma_w2=0.02, quant=1.0)
    fr = make_frame(n_cores=2, n=4000).replace(core_temps=T, temps_quantized=True)
    wins = slice_windows(fr, 1000, 4)
    pps = [PartialPowers.from_inputs(U[:, i * 1000 : (i + 1) * 1000]) for i in range(4)]
    model = with_noise(truth.models[1], sigma_v2=1 / 12)
    one = score_model(model, wins[:1], pps[:1], core_id=1)
    ref = run_kalman(build_state_space(model), pps[0], T[1, :1000])
    assert one.mean_abs_error == pytest.approx(ref.mean_abs_error, rel=1e-12)
    assert one.error_std == pytest.approx(ref.error_std, rel=1e-9)
    assert one.n_samples == 940
    with pytest.raises(DataError):
        score_model(model, [], [])
    with pytest.raises(DataError):
        score_model(model, wins, pps[:2], core_id=1)


def test_batched_scores_match_single_model_scores():
    truth, U, T = core_series(n_cores=3, n=6000, seed=6, sigma_w2=0.02, quant=1.0)
    fr = make_frame(n_cores=3, n=6000).replace(core_temps=T, temps_quantized=True)
    wins = slice_windows(fr, 2000, 3)
    inputs = np.stack([U[:, i * 2000 : (i + 1) * 2000] for i in range(3)])
    temps = np.stack([T[:, i * 2000 : (i + 1) * 2000] for i in range(3)], axis=1)
    models = [identify_arrays(T[k, :2000], U[:, :2000], core_id=k)[0] for k in range(3)]
    mae, std = score_models(models, temps, inputs, [0, 1, 2])
    for k, m in enumerate(models):
        ref = score_model(m, wins, [PartialPowers.from_inputs(u) for u in inputs], core_id=k)
        assert mae[k] == pytest.approx(ref.mean_abs_error, rel=1e-9)
        assert std[k] == pytest.approx(ref.error_std, rel=1e-6)
