import numpy as np
import pytest

from thermid.synth import WorkloadKind, WorkloadSpec, gen_thermal_truth, gen_workload, thermal_response
from thermid.telemetry import MetricKind, TelemetryFrame, quantize


def prbs(m: int, n: int, seed: int, clock: int = 10, low: float = 5.0, high: float = 25.0) -> np.ndarray:
    spec = WorkloadSpec(WorkloadKind.PRBS, amplitude=high, duration=n, low=low, clock=clock)
    return gen_workload(spec, m, seed)


def core_series(n_cores=8, n=20000, seed=0, sigma_w2=0.0, quant=None, inputs=None, clock=10):
    """Temperatures of every core of a random truth driven by PRBS inputs.

    Returns ``(truth, inputs, temps)``; ``temps`` has process noise of
    variance ``sigma_w2`` and, when ``quant`` is set, quantization.
    """
    truth = gen_thermal_truth(n_cores, seed, sigma_w2=sigma_w2)
    U = prbs(n_cores + 1, n, seed + 1000, clock) if inputs is None else inputs
    w = None
    if sigma_w2 > 0:
        w = np.sqrt(sigma_w2) * np.random.default_rng(seed + 2000).standard_normal((n_cores, n))
    T = thermal_response(truth, U, w)
    if quant:
        T = quantize(T, quant)
    return truth, U, T


def make_frame(n_cores=2, n=50, seed=0, **kw) -> TelemetryFrame:
    rng = np.random.default_rng(seed)
    return TelemetryFrame(
        timestamps=np.arange(n) * 2.0,
        core_metrics={MetricKind.CORE_FREQ_C0: rng.uniform(0, 3200, (n_cores, n))},
        pkg_metrics={MetricKind.PKG_FREQ_C0: rng.uniform(0, 3200, n),
                     MetricKind.ONE_MINUS_C0_PKG: rng.uniform(0, 1, n)},
        pkg_power=rng.uniform(20, 120, n),
        core_temps=np.round(rng.uniform(40, 70, (n_cores, n))),
        **kw,
    )


@pytest.fixture
def frame():
    return make_frame()
