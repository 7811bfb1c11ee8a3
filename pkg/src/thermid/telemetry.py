"""Node telemetry data model: frames, windows, metric rescaling, quantization."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, DataError

DEFAULT_SAMPLE_PERIOD = 2.0
DEFAULT_QUANT_STEP = 1.0


class MetricKind(str, Enum):
    """Performance-counter metrics feeding the power model."""

    CORE_FREQ_C0 = "core_freq_times_c0"
    PKG_FREQ_C0 = "pkg_freq_times_c0"
    ONE_MINUS_C0_PKG = "one_minus_c0_pkg"

    @property
    def per_core(self) -> bool:
        return self is MetricKind.CORE_FREQ_C0


CORE_METRICS: tuple[MetricKind, ...] = (MetricKind.CORE_FREQ_C0,)
PKG_METRICS: tuple[MetricKind, ...] = (MetricKind.PKG_FREQ_C0, MetricKind.ONE_MINUS_C0_PKG)


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TelemetryFrame:
    """Time-aligned telemetry of one package (node, socket).

    ``core_metrics[kind]`` has shape ``(n_cores, N)``; ``pkg_metrics[kind]``,
    ``pkg_power`` and ``timestamps`` have shape ``(N,)``; ``core_temps`` has
    shape ``(n_cores, N)`` in degrees Celsius.
    """

    timestamps: np.ndarray
    core_metrics: Mapping[MetricKind, np.ndarray]
    pkg_metrics: Mapping[MetricKind, np.ndarray]
    pkg_power: np.ndarray
    core_temps: np.ndarray
    sample_period: float = DEFAULT_SAMPLE_PERIOD
    temps_quantized: bool = False
    quant_step: float = DEFAULT_QUANT_STEP
    metrics_rescaled: bool = False
    node: str = "node0"
    socket: int = 0

    def __post_init__(self):
        set_ = lambda name, value: object.__setattr__(self, name, value)  # noqa: E731
        set_("timestamps", _frozen(self.timestamps))
        set_("pkg_power", _frozen(self.pkg_power))
        set_("core_temps", _frozen(np.atleast_2d(self.core_temps)))
        set_("core_metrics", {MetricKind(k): _frozen(np.atleast_2d(v)) for k, v in self.core_metrics.items()})
        set_("pkg_metrics", {MetricKind(k): _frozen(v) for k, v in self.pkg_metrics.items()})

        n = self.timestamps.shape[0]
        if n < 1:
            raise DataError("telemetry frame needs at least one sample")
        if self.sample_period <= 0:
            raise ConfigurationError(f"sample_period must be positive, got {self.sample_period}")
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise DataError("timestamps must be strictly increasing")
        n_cores = self.core_temps.shape[0]
        if self.core_temps.shape != (n_cores, n) or n_cores < 1:
            raise DataError(f"core_temps has shape {self.core_temps.shape}, expected (n_cores>=1, {n})")
        if self.pkg_power.shape != (n,):
            raise DataError(f"pkg_power has shape {self.pkg_power.shape}, expected ({n},)")
        for kind, arr in self.core_metrics.items():
            if not kind.per_core:
                raise DataError(f"{kind.value} is a package metric, not a per-core one")
            if arr.shape != (n_cores, n):
                raise DataError(f"{kind.value} has shape {arr.shape}, expected ({n_cores}, {n})")
        for kind, arr in self.pkg_metrics.items():
            if kind.per_core:
                raise DataError(f"{kind.value} is a per-core metric, not a package one")
            if arr.shape != (n,):
                raise DataError(f"{kind.value} has shape {arr.shape}, expected ({n},)")
        if self.temps_quantized:
            ratio = self.core_temps / self.quant_step
            if not np.allclose(ratio, np.round(ratio), rtol=0, atol=1e-9):
                raise DataError("core_temps flagged as quantized are not multiples of the step")

    @property
    def n_samples(self) -> int:
        return int(self.timestamps.shape[0])

    @property
    def n_cores(self) -> int:
        return int(self.core_temps.shape[0])

    @property
    def metrics(self) -> dict[MetricKind, np.ndarray]:
        return {**self.core_metrics, **self.pkg_metrics}

    def replace(self, **changes) -> "TelemetryFrame":
        return dataclasses.replace(self, **changes)

    def slice(self, start: int, stop: int) -> "TelemetryFrame":
        """Samples ``start:stop`` as a new frame."""
        if not 0 <= start < stop <= self.n_samples:
            raise DataError(f"slice [{start}, {stop}) outside frame of {self.n_samples} samples")
        sl = np.s_[start:stop]
        return self.replace(
            timestamps=self.timestamps[sl],
            core_metrics={k: v[:, sl] for k, v in self.core_metrics.items()},
            pkg_metrics={k: v[sl] for k, v in self.pkg_metrics.items()},
            pkg_power=self.pkg_power[sl],
            core_temps=self.core_temps[:, sl],
        )


@dataclass(frozen=True)
class Window:
    """A contiguous slice of one package's telemetry plus its provenance.

    ``core_id`` is ``None`` for a package-level window; :meth:`for_core`
    tags the same samples with one core.
    """

    frame: TelemetryFrame
    window_index: int
    node_id: str = "node0"
    socket_id: int = 0
    core_id: int | None = None
    start: int = 0

    @property
    def length_samples(self) -> int:
        return self.frame.n_samples

    def for_core(self, core_id: int) -> "Window":
        if not 0 <= core_id < self.frame.n_cores:
            raise DataError(f"core {core_id} outside 0..{self.frame.n_cores - 1}")
        return dataclasses.replace(self, core_id=core_id)

    def temps(self, core_id: int | None = None) -> np.ndarray:
        core = self.core_id if core_id is None else core_id
        if core is None:
            raise DataError("window is not bound to a core; pass core_id")
        return self.frame.core_temps[core]


@dataclass(frozen=True)
class ScalingBounds:
    """Nominal ``(min, max)`` range of each metric in its native unit."""

    bounds: Mapping[MetricKind, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for kind, (lo, hi) in self.bounds.items():
            if not hi > lo:
                raise ConfigurationError(f"bounds for {MetricKind(kind).value}: max {hi} must exceed min {lo}")
            clean[MetricKind(kind)] = (float(lo), float(hi))
        object.__setattr__(self, "bounds", clean)

    def __getitem__(self, kind: MetricKind) -> tuple[float, float]:
        return self.bounds[kind]

    def __contains__(self, kind) -> bool:
        return kind in self.bounds

    @classmethod
    def nominal(cls) -> "ScalingBounds":
        """Ranges of a 2.4 GHz base / 3.2 GHz turbo Haswell-EP package."""
        return cls(
            {
                MetricKind.CORE_FREQ_C0: (0.0, 3200.0),
                MetricKind.PKG_FREQ_C0: (0.0, 3200.0),
                MetricKind.ONE_MINUS_C0_PKG: (0.0, 1.0),
            }
        )


def rescale_value(values, lo: float, hi: float) -> np.ndarray:
    return np.clip((np.asarray(values, dtype=float) - lo) / (hi - lo), 0.0, 1.0)


def rescale_metrics(frame: TelemetryFrame, bounds: ScalingBounds) -> TelemetryFrame:
    """Map every metric affinely onto ``[0, 1]``, clamping out-of-range values.

    Power and temperature series are left untouched.
    """
    missing = [k.value for k in frame.metrics if k not in bounds]
    if missing:
        raise ConfigurationError(f"no scaling bounds for metrics: {', '.join(missing)}")
    return frame.replace(
        core_metrics={k: rescale_value(v, *bounds[k]) for k, v in frame.core_metrics.items()},
        pkg_metrics={k: rescale_value(v, *bounds[k]) for k, v in frame.pkg_metrics.items()},
        metrics_rescaled=True,
    )


def slice_windows(
    frame: TelemetryFrame, window_len: int, count: int, core_id: int | None = None
) -> list[Window]:
    """Cut ``count`` consecutive non-overlapping windows starting at sample 0.

    Samples past ``count * window_len`` are discarded.
    """
    if window_len < 1 or count < 1:
        raise ConfigurationError("window_len and count must be positive")
    required = window_len * count
    if required > frame.n_samples:
        raise DataError(
            f"{count} windows of {window_len} samples need {required} samples, "
            f"frame has {frame.n_samples}"
        )
    return [
        Window(
            frame=frame.slice(i * window_len, (i + 1) * window_len),
            window_index=i,
            node_id=frame.node,
            socket_id=frame.socket,
            core_id=core_id,
            start=i * window_len,
        )
        for i in range(count)
    ]


def quantize(values, step: float = DEFAULT_QUANT_STEP) -> np.ndarray:
    """``step * round(x / step)`` with halves rounded away from zero."""
    if step <= 0:
        raise ConfigurationError(f"quantization step must be positive, got {step}")
    x = np.asarray(values, dtype=float) / step
    return np.sign(x) * np.floor(np.abs(x) + 0.5) * step


def quantize_temps(frame: TelemetryFrame, step: float = DEFAULT_QUANT_STEP) -> TelemetryFrame:
    return frame.replace(core_temps=quantize(frame.core_temps, step), temps_quantized=True, quant_step=step)
