"""Synthetic packages with known thermal dynamics, workloads and power model.

This is the verification oracle of the toolkit: every dataset carries the
true per-core ARX models, the true partial powers and the true power model
that maps its counter metrics to package power.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.signal import lfilter

from .arx import ArxModel
from .errors import ConfigurationError
from .power import PowerModel
from .telemetry import DEFAULT_SAMPLE_PERIOD, MetricKind, TelemetryFrame, quantize

FREQ_RANGE_MHZ = 3200.0


@dataclass(frozen=True)
class GroundTruthThermal:
    """True order-2 model of every core; ``models[k]`` maps ``[P_0..P_Nc]`` to core ``k``."""

    models: tuple[ArxModel, ...]
    ambient: float
    sigma_w2: float

    @property
    def n_cores(self) -> int:
        return len(self.models)


def gen_thermal_truth(
    n_cores: int,
    seed: int,
    *,
    ambient: float = 35.0,
    sigma_w2: float = 0.02,
    slow_pole: tuple[float, float] = (0.94, 0.98),
    fast_pole: tuple[float, float] = (0.84, 0.88),
    self_gain: tuple[float, float] = (0.3, 1.5),
    coupling: tuple[float, float] = (0.05, 0.20),
) -> GroundTruthThermal:
    """Random two-pole core models with a shared ambient floor.

    Each input ``j`` of core ``k`` reaches the core through a sum of a slow
    and a fast first-order path (positive residues, real poles), so the DC
    gain is exactly the drawn gain. Neighbour cores and the uncore get
    ``coupling`` times the self gain.
    """
    if n_cores < 1:
        raise ConfigurationError("n_cores must be >= 1")
    for name, (lo, hi) in (("slow_pole", slow_pole), ("fast_pole", fast_pole)):
        if not 0 < lo <= hi < 1:
            raise ConfigurationError(f"{name} range ({lo}, {hi}) must lie inside (0, 1)")
    rng = np.random.default_rng(seed)
    models = []
    for k in range(n_cores):
        p_slow = rng.uniform(*slow_pole)
        p_fast = rng.uniform(*fast_pole)
        a = np.array([-(p_slow + p_fast), p_slow * p_fast])
        g_self = rng.uniform(*self_gain)
        gains = g_self * rng.uniform(*coupling, size=n_cores + 1)
        gains[k + 1] = g_self
        frac_fast = rng.uniform(0.2, 0.5, size=n_cores + 1)
        c_slow = gains * (1 - frac_fast) * (1 - p_slow)
        c_fast = gains * frac_fast * (1 - p_fast)
        b = np.column_stack([c_slow + c_fast, -(c_slow * p_fast + c_fast * p_slow)])
        models.append(ArxModel(a=a, b=b, sigma_w2=sigma_w2, sigma_v2=0.0,
                               offset=(1 + a.sum()) * ambient, core_id=k))
    return GroundTruthThermal(tuple(models), float(ambient), float(sigma_w2))


class WorkloadKind(str, Enum):
    PRBS = "prbs"
    CONSTANT = "constant"
    SINUSOID = "sinusoid"
    JOB_STEPS = "job_steps"


@dataclass(frozen=True)
class WorkloadSpec:
    """Per-core power trajectory recipe; all levels lie in ``[0, amplitude]``.

    ``low`` is the idle level of ``prbs`` and the floor of the other kinds;
    ``clock`` is the PRBS hold time in samples; ``period`` the sinusoid
    period; ``dwell`` the job duration range of ``job_steps``; ``level`` a
    fixed constant level (drawn per core when ``None``).
    """

    kind: WorkloadKind
    amplitude: float = 25.0
    duration: int = 21600
    low: float = 5.0
    clock: int = 1
    period: float = 3600.0
    dwell: tuple[int, int] = (300, 5400)
    level: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", WorkloadKind(self.kind))
        if self.amplitude <= 0 or not 0 <= self.low <= self.amplitude:
            raise ConfigurationError("need 0 <= low <= amplitude and amplitude > 0")
        if self.duration < 1 or self.clock < 1 or self.period <= 0:
            raise ConfigurationError("duration, clock and period must be positive")
        if self.level is not None and not 0 <= self.level <= self.amplitude:
            raise ConfigurationError("constant level outside [0, amplitude]")
        if not 1 <= self.dwell[0] <= self.dwell[1]:
            raise ConfigurationError("dwell range must satisfy 1 <= min <= max")


def gen_workload(spec: WorkloadSpec, n_cores: int, seed: int) -> np.ndarray:
    """Power series of shape ``(n_cores, spec.duration)`` in watts."""
    rng = np.random.default_rng(seed)
    N, lo, hi = spec.duration, spec.low, spec.amplitude
    if spec.kind is WorkloadKind.PRBS:
        n_slots = -(-N // spec.clock)
        bits = rng.integers(0, 2, size=(n_cores, n_slots))
        out = np.where(np.repeat(bits, spec.clock, axis=1)[:, :N] == 1, hi, lo)
    elif spec.kind is WorkloadKind.CONSTANT:
        levels = (np.full(n_cores, spec.level) if spec.level is not None
                  else rng.uniform(lo, hi, size=n_cores))
        out = np.repeat(levels[:, None], N, axis=1)
    elif spec.kind is WorkloadKind.SINUSOID:
        t = np.arange(N)
        phase = rng.uniform(0, 2 * np.pi, size=(n_cores, 1))
        out = lo + (hi - lo) * (0.5 + 0.5 * np.sin(2 * np.pi * t / spec.period + phase))
    else:
        out = np.empty((n_cores, N))
        for k in range(n_cores):
            pos = 0
            while pos < N:
                d = int(rng.integers(spec.dwell[0], spec.dwell[1] + 1))
                out[k, pos : pos + d] = rng.uniform(lo, hi)
                pos += d
    return np.clip(out.astype(float), 0.0, hi)


def default_power_truth(n_cores: int, seed: int) -> PowerModel:
    """A plausible Haswell-like linear power model over rescaled metrics."""
    rng = np.random.default_rng(seed)
    return PowerModel(
        alpha=np.array([rng.uniform(10.0, 14.0), rng.uniform(-4.0, -2.0)]),
        beta=rng.uniform(28.0, 34.0, size=(n_cores, 1)),
        intercept=rng.uniform(7.0, 9.0),
        n_cores=n_cores,
    )


@dataclass(frozen=True)
class SynthDataset:
    """A synthetic package: telemetry as a monitor would record it plus the truth."""

    frame: TelemetryFrame
    truth: GroundTruthThermal
    power_truth: PowerModel
    true_inputs: np.ndarray
    clean_temps: np.ndarray
    segment_kinds: tuple[str, ...] = field(default=())


def thermal_response(truth: GroundTruthThermal, inputs: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Noise-free-measurement core temperatures for stacked true inputs ``[P_0..P_Nc]``.

    Rolls the difference equation forward from rest at ambient; ``w`` is
    the process noise, shape ``(n_cores, N)``.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    N = inputs.shape[1]
    temps = np.empty((truth.n_cores, N))
    for k, model in enumerate(truth.models):
        if np.any(np.abs(model.poles()) >= 1.0):
            raise ConfigurationError(f"true model of core {k} is unstable; refusing to simulate")
        den = np.concatenate([[1.0], model.a])
        drive = np.zeros(N)
        for j in range(model.n_inputs):
            drive += lfilter(np.concatenate([[0.0], model.b[j]]), [1.0], inputs[j])
        if w is not None:
            drive += w[k]
        temps[k] = truth.ambient + lfilter([1.0], den, drive)
    return temps


def simulate(
    truth: GroundTruthThermal,
    core_powers: np.ndarray,
    quantize_step: float | None = 1.0,
    *,
    seed: int = 0,
    power_truth: PowerModel | None = None,
    uncore_activity: np.ndarray | None = None,
    counter_noise: float = 0.001,
    power_noise_w: float = 1.0,
    sample_period: float = DEFAULT_SAMPLE_PERIOD,
    node: str = "node0",
    socket: int = 0,
    segment_kinds: tuple[str, ...] = (),
) -> SynthDataset:
    """Generate telemetry for a package whose cores draw ``core_powers``.

    Counter metrics are derived so that ``power_truth`` maps them exactly to
    the true partial powers; the recorded metrics then get relative counter
    jitter ``counter_noise`` and the recorded package power Gaussian noise
    of ``power_noise_w`` watts. ``uncore_activity`` in ``[0, 1]`` drives the
    uncore clock (constant 0.5 when omitted).
    """
    core_powers = np.atleast_2d(np.asarray(core_powers, dtype=float))
    n_cores, N = core_powers.shape
    if n_cores != truth.n_cores:
        raise ConfigurationError(f"{n_cores} power rows for a {truth.n_cores}-core truth")
    ss = np.random.SeedSequence(seed)
    rng_w, rng_counter, rng_power = (np.random.default_rng(s) for s in ss.spawn(3))
    if power_truth is None:
        power_truth = default_power_truth(n_cores, seed)
    if uncore_activity is None:
        uncore_activity = np.full(N, 0.5)
    uact = np.clip(np.asarray(uncore_activity, dtype=float), 0.0, 1.0)

    beta = power_truth.beta[:, 0:1]
    act = np.clip(core_powers / beta, 0.0, 1.0)
    c0_pkg = act.max(axis=0)
    pkg_freq_frac = (0.3 + 0.7 * uact) * c0_pkg
    idle_frac = 1.0 - c0_pkg
    p_core = beta * act
    p_unc = power_truth.intercept + power_truth.alpha[0] * pkg_freq_frac + power_truth.alpha[1] * idle_frac
    inputs = np.vstack([p_unc[None, :], p_core])

    w = np.sqrt(truth.sigma_w2) * rng_w.standard_normal((n_cores, N)) if truth.sigma_w2 > 0 else None
    clean = thermal_response(truth, inputs, w)
    temps = quantize(clean, quantize_step) if quantize_step else clean

    jitter = lambda shape: counter_noise * rng_counter.standard_normal(shape)  # noqa: E731
    core_metric = FREQ_RANGE_MHZ * (act + jitter(act.shape))
    pkg_metric = FREQ_RANGE_MHZ * (pkg_freq_frac + jitter(N))
    idle_metric = idle_frac + jitter(N)
    pkg_power = p_unc + p_core.sum(axis=0) + power_noise_w * rng_power.standard_normal(N)

    frame = TelemetryFrame(
        timestamps=np.arange(N) * sample_period,
        core_metrics={MetricKind.CORE_FREQ_C0: core_metric},
        pkg_metrics={MetricKind.PKG_FREQ_C0: pkg_metric, MetricKind.ONE_MINUS_C0_PKG: idle_metric},
        pkg_power=pkg_power,
        core_temps=temps,
        sample_period=sample_period,
        temps_quantized=bool(quantize_step),
        quant_step=quantize_step or 1.0,
        node=node,
        socket=socket,
    )
    return SynthDataset(frame, truth, power_truth, inputs, clean, tuple(segment_kinds))
