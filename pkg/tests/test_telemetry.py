import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_frame
from thermid.errors import ConfigurationError, DataError
from thermid.telemetry import (CORE_METRICS, PKG_METRICS, MetricKind, ScalingBounds, quantize, quantize_temps,
                               rescale_metrics, slice_windows)

finite = st.floats(-1e4, 1e4, allow_nan=False)


def test_metric_catalogue():
    assert set(MetricKind) == {MetricKind.CORE_FREQ_C0, MetricKind.PKG_FREQ_C0, MetricKind.ONE_MINUS_C0_PKG}
    assert [m.per_core for m in CORE_METRICS] == [True]
    assert not any(m.per_core for m in PKG_METRICS)


def test_rescale_examples():
    fr = make_frame(n=3)
    fr = fr.replace(core_metrics={MetricKind.CORE_FREQ_C0: [[0.0, 1200.0, 2400.0], [2400.0, 0.0, 1200.0]]})
    b = ScalingBounds({MetricKind.CORE_FREQ_C0: (0, 2400), MetricKind.PKG_FREQ_C0: (0, 3200),
                       MetricKind.ONE_MINUS_C0_PKG: (0, 1)})
    out = rescale_metrics(fr, b).core_metrics[MetricKind.CORE_FREQ_C0]
    np.testing.assert_array_equal(out, [[0.0, 0.5, 1.0], [1.0, 0.0, 0.5]])


def test_rescale_clamps_and_keeps_power(frame):
    fr = frame.replace(pkg_metrics={**frame.pkg_metrics, MetricKind.ONE_MINUS_C0_PKG: np.linspace(-1, 2, 50)})
    out = rescale_metrics(fr, ScalingBounds.nominal())
    idle = out.pkg_metrics[MetricKind.ONE_MINUS_C0_PKG]
    assert idle.min() == 0.0 and idle.max() == 1.0
    assert out.metrics_rescaled
    np.testing.assert_array_equal(out.pkg_power, fr.pkg_power)
    np.testing.assert_array_equal(out.core_temps, fr.core_temps)


def test_rescale_idempotent_on_unit_bounds(frame):
    unit = ScalingBounds({k: (0.0, 1.0) for k in MetricKind})
    once = rescale_metrics(frame, ScalingBounds.nominal())
    twice = rescale_metrics(once, unit)
    for k in MetricKind:
        np.testing.assert_array_equal(once.metrics[k], twice.metrics[k])


def test_rescale_needs_every_bound(frame):
    with pytest.raises(ConfigurationError, match="core_freq_times_c0"):
        rescale_metrics(frame, ScalingBounds({MetricKind.PKG_FREQ_C0: (0, 1), MetricKind.ONE_MINUS_C0_PKG: (0, 1)}))
    with pytest.raises(ConfigurationError):
        ScalingBounds({MetricKind.PKG_FREQ_C0: (1, 1)})


def test_slice_windows_examples():
    fr = make_frame(n=25 * 216)
    wins = slice_windows(fr, 216, 25)
    assert len(wins) == 25 and all(w.length_samples == 216 for w in wins)
    assert [w.window_index for w in wins] == list(range(25))
    assert len(slice_windows(make_frame(n=10), 10, 1)) == 1
    with pytest.raises(DataError, match="30"):
        slice_windows(make_frame(n=25), 10, 3)


@given(n=st.integers(1, 300), length=st.integers(1, 50), data=st.data())
@settings(max_examples=40, deadline=None)
def test_slice_windows_concatenate(n, length, data):
    count = data.draw(st.integers(1, max(1, n // length))) if n >= length else 1
    fr = make_frame(n=n)
    if count * length > n:
        with pytest.raises(DataError):
            slice_windows(fr, length, count)
        return
    wins = slice_windows(fr, length, count)
    temps = np.concatenate([w.frame.core_temps for w in wins], axis=1)
    np.testing.assert_array_equal(temps, fr.core_temps[:, : count * length])
    np.testing.assert_array_equal(np.concatenate([w.frame.timestamps for w in wins]),
                                  fr.timestamps[: count * length])


def test_quantize_examples():
    np.testing.assert_array_equal(quantize([54.4, 54.5, -0.5, 53.0]), [54.0, 55.0, -1.0, 53.0])
    np.testing.assert_array_equal(quantize([1.24, 1.26], 0.5), [1.0, 1.5])
    with pytest.raises(ConfigurationError):
        quantize([1.0], 0.0)


@given(arrays(float, st.integers(1, 30), elements=finite), st.sampled_from([0.25, 0.5, 1.0, 2.0]))
def test_quantize_idempotent(x, step):
    q = quantize(x, step)
    np.testing.assert_array_equal(quantize(q, step), q)
    assert np.all(np.abs(q - x) <= step / 2 + 1e-9)


def test_quantize_temps_flags(frame):
    fr = frame.replace(core_temps=frame.core_temps + 0.3)
    q = quantize_temps(fr)
    assert q.temps_quantized and q.quant_step == 1.0
    np.testing.assert_array_equal(quantize_temps(q).core_temps, q.core_temps)


def test_frame_validation(frame):
    with pytest.raises(DataError, match="increasing"):
        frame.replace(timestamps=np.r_[frame.timestamps[:-1], 0.0])
    with pytest.raises(DataError, match="pkg_power"):
        frame.replace(pkg_power=np.zeros(3))
    with pytest.raises(DataError, match="core_freq_times_c0"):
        frame.replace(core_metrics={MetricKind.CORE_FREQ_C0: np.zeros((3, 50))})
    with pytest.raises(DataError, match="quantized"):
        frame.replace(core_temps=frame.core_temps + 0.25, temps_quantized=True)
    with pytest.raises(ConfigurationError):
        frame.replace(sample_period=0.0)


def test_frame_arrays_read_only(frame):
    with pytest.raises(ValueError):
        frame.core_temps[0, 0] = 1.0
    sl = frame.slice(5, 10)
    assert sl.n_samples == 5 and sl.n_cores == 2
    with pytest.raises(DataError):
        frame.slice(10, 5)


def test_window_core_binding(frame):
    win = slice_windows(frame, 25, 2)[1]
    np.testing.assert_array_equal(win.for_core(1).temps(), frame.core_temps[1, 25:])
    with pytest.raises(DataError):
        win.temps()
    with pytest.raises(DataError):
        win.for_core(5)
