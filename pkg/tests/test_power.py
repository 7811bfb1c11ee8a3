import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thermid.errors import DataError, RankDeficientError
from thermid.power import (PartialPowers, PowerModel, design_matrix, error_fractions, fit_power_model,
                           partition_powers, predict_package)
from thermid.synth import default_power_truth, gen_thermal_truth, gen_workload, simulate, WorkloadSpec
from thermid.telemetry import MetricKind, ScalingBounds, TelemetryFrame, rescale_metrics


def rescaled_frame(n_cores=4, n=400, seed=0, power=None, zero=False):
    rng = np.random.default_rng(seed)
    core = np.zeros((n_cores, n)) if zero else rng.uniform(0, 1, (n_cores, n))
    pf = np.zeros(n) if zero else rng.uniform(0, 1, n)
    idle = np.zeros(n) if zero else rng.uniform(0, 1, n)
    return TelemetryFrame(
        timestamps=np.arange(n) * 2.0,
        core_metrics={MetricKind.CORE_FREQ_C0: core},
        pkg_metrics={MetricKind.PKG_FREQ_C0: pf, MetricKind.ONE_MINUS_C0_PKG: idle},
        pkg_power=np.zeros(n) if power is None else power,
        core_temps=np.full((n_cores, n), 50.0),
        metrics_rescaled=True,
    )


def with_truth_power(frame, model, noise=0.0, seed=1):
    p = predict_package(model, frame) + noise * np.random.default_rng(seed).standard_normal(frame.n_samples)
    return frame.replace(pkg_power=p)


@pytest.fixture
def truth():
    return default_power_truth(4, 3)


def test_round_trip_exact(truth):
    fr = with_truth_power(rescaled_frame(), truth)
    fit = fit_power_model([fr])
    np.testing.assert_allclose(fit.coefficients(), truth.coefficients(), rtol=1e-8)
    assert fit.beta.shape == (4, 1)


def test_fit_accepts_several_frames(truth):
    frames = [with_truth_power(rescaled_frame(seed=s, n=100), truth) for s in range(3)]
    fit = fit_power_model(frames)
    np.testing.assert_allclose(fit.coefficients(), truth.coefficients(), rtol=1e-8)


def test_constant_metrics_report_dead_columns():
    fr = rescaled_frame(zero=True, power=np.full(400, 42.0))
    with pytest.raises(RankDeficientError) as exc:
        fit_power_model([fr])
    assert "pkg_freq_times_c0" in str(exc.value)
    assert "core_freq_times_c0[core 3]" in exc.value.columns


def test_fit_preconditions(truth):
    with pytest.raises(DataError, match="rescaled"):
        fit_power_model([rescaled_frame().replace(metrics_rescaled=False)])
    with pytest.raises(DataError, match="samples"):
        fit_power_model([with_truth_power(rescaled_frame(n=60), truth)])
    with pytest.raises(DataError):
        fit_power_model([])


def test_noisy_fit_error_fractions(truth):
    fr = with_truth_power(rescaled_frame(n=5000), truth, noise=1.0)
    fit = fit_power_model([fr])
    fr_ = error_fractions(predict_package(fit, fr), fr.pkg_power)
    assert fr_[9.68] >= 0.9 and fr_[3.23] >= 0.6


def test_predict_examples(truth):
    zero = rescaled_frame(zero=True)
    np.testing.assert_array_equal(predict_package(truth, zero), np.full(400, truth.intercept))
    fr = rescaled_frame()
    base = predict_package(truth, fr)
    beta = truth.beta.copy()
    beta[2] *= 2
    doubled = PowerModel(truth.alpha, beta, truth.intercept, truth.n_cores)
    np.testing.assert_allclose(predict_package(doubled, fr) - base,
                               truth.beta[2, 0] * fr.core_metrics[MetricKind.CORE_FREQ_C0][2], atol=1e-12)
    with pytest.raises(DataError, match="cores"):
        predict_package(truth, rescaled_frame(n_cores=3))


def test_training_residuals_match(truth):
    fr = with_truth_power(rescaled_frame(), truth, noise=2.0)
    fit = fit_power_model([fr])
    X = design_matrix(fr)
    np.testing.assert_allclose(fr.pkg_power - predict_package(fit, fr), fr.pkg_power - X @ fit.coefficients(),
                               atol=1e-10)


def test_ols_optimality(truth):
    fr = with_truth_power(rescaled_frame(), truth, noise=2.0)
    fit = fit_power_model([fr])
    X, y = design_matrix(fr), fr.pkg_power
    c = fit.coefficients()
    sse = np.sum((y - X @ c) ** 2)
    for i in range(c.size):
        for d in (1e-3, -1e-3):
            cp = c.copy()
            cp[i] += d
            assert np.sum((y - X @ cp) ** 2) >= sse


@given(c=st.floats(0.1, 50.0))
@settings(max_examples=20, deadline=None)
def test_scale_equivariance(c):
    truth = default_power_truth(3, 0)
    fr = with_truth_power(rescaled_frame(n_cores=3, n=200), truth, noise=1.0)
    a = fit_power_model([fr]).coefficients()
    b = fit_power_model([fr.replace(pkg_power=c * fr.pkg_power)]).coefficients()
    np.testing.assert_allclose(b, c * a, rtol=1e-8, atol=1e-9)


def test_partition_zero_metrics(truth):
    pp = partition_powers(truth, rescaled_frame(zero=True))
    np.testing.assert_array_equal(pp.uncore, truth.intercept)
    np.testing.assert_array_equal(pp.per_core, 0.0)


@given(seed=st.integers(0, 10_000), shift=st.floats(-30, 30))
@settings(max_examples=30, deadline=None)
def test_partition_identity(seed, shift):
    truth = default_power_truth(3, seed)
    model = PowerModel(truth.alpha, truth.beta - 20, truth.intercept + shift, 3)
    fr = rescaled_frame(n_cores=3, n=50, seed=seed)
    pp = partition_powers(model, fr)
    np.testing.assert_array_equal(pp.package, predict_package(model, fr))
    assert np.all(pp.uncore >= 0) and np.all(pp.per_core >= 0)
    if pp.n_clamped == 0:
        total = pp.uncore.copy()
        for row in pp.per_core:
            total += row
        np.testing.assert_array_equal(total, pp.package)


def test_partition_recovers_per_core_powers():
    n_cores = 8
    truth = gen_thermal_truth(n_cores, 0)
    P = gen_workload(WorkloadSpec("job_steps", duration=20000, low=2.0, dwell=(150, 3000)), n_cores, 1)
    ds = simulate(truth, P, seed=2, uncore_activity=np.random.default_rng(3).uniform(0, 1, 20000))
    fr = rescale_metrics(ds.frame, ScalingBounds.nominal())
    fit = fit_power_model([fr])
    pkg_err = error_fractions(predict_package(fit, fr), fr.pkg_power)
    assert pkg_err[9.68] > 0.9
    pp = partition_powers(fit, fr)
    rms = np.sqrt(np.mean((pp.per_core - ds.true_inputs[1:]) ** 2, axis=1))
    assert np.all(rms < 1.0)


def test_partial_powers_helpers():
    U = np.arange(12.0).reshape(3, 4)
    pp = PartialPowers.from_inputs(U)
    np.testing.assert_array_equal(pp.inputs, U)
    assert pp.n_cores == 2 and pp.n_samples == 4
    s = pp.slice(1, 3)
    np.testing.assert_array_equal(s.inputs, U[:, 1:3])
