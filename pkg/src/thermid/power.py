"""Linear package-power model on rescaled counter metrics and its per-core split."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import DataError, RankDeficientError
from .telemetry import CORE_METRICS, PKG_METRICS, MetricKind, TelemetryFrame

log = logging.getLogger(__name__)

RANK_RTOL = 1e-10
MIN_SAMPLES_PER_COEF = 10


@dataclass(frozen=True)
class PowerModel:
    """``P_pkg = intercept + sum_i alpha_i m_i + sum_k sum_j beta[k, j] m_{j,k}``.

    ``alpha`` follows ``uncore_metrics`` and the columns of ``beta`` follow
    ``core_metrics``. The intercept is static power and is booked as uncore.
    """

    alpha: np.ndarray
    beta: np.ndarray
    intercept: float
    n_cores: int
    uncore_metrics: tuple[MetricKind, ...] = PKG_METRICS
    core_metrics: tuple[MetricKind, ...] = CORE_METRICS

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float).reshape(len(self.uncore_metrics)))
        beta = np.asarray(self.beta, dtype=float).reshape(self.n_cores, len(self.core_metrics))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "intercept", float(self.intercept))

    @property
    def coef_count(self) -> int:
        return 1 + self.alpha.size + self.beta.size

    def coefficients(self) -> np.ndarray:
        """Flat vector in design-matrix column order."""
        return np.concatenate([[self.intercept], self.alpha, self.beta.ravel()])


@dataclass(frozen=True)
class PartialPowers:
    """Uncore and per-core power estimates aligned with a frame.

    ``package`` is the model prediction before clamping; ``uncore`` and
    ``per_core`` are clamped at zero.
    """

    uncore: np.ndarray
    per_core: np.ndarray
    package: np.ndarray | None = None
    n_clamped: int = 0

    @property
    def n_samples(self) -> int:
        return int(self.uncore.shape[0])

    @property
    def n_cores(self) -> int:
        return int(self.per_core.shape[0])

    @property
    def inputs(self) -> np.ndarray:
        """Stacked model inputs ``[P_0, P_1, ..., P_Nc]``, shape ``(N_c + 1, N)``."""
        return np.vstack([self.uncore[None, :], self.per_core])

    def slice(self, start: int, stop: int) -> "PartialPowers":
        return PartialPowers(
            uncore=self.uncore[start:stop],
            per_core=self.per_core[:, start:stop],
            package=None if self.package is None else self.package[start:stop],
        )

    @classmethod
    def from_inputs(cls, inputs: np.ndarray) -> "PartialPowers":
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        return cls(uncore=inputs[0], per_core=inputs[1:], package=inputs.sum(axis=0))


def _column_names(n_cores: int, uncore=PKG_METRICS, core=CORE_METRICS) -> list[str]:
    names = ["intercept"] + [m.value for m in uncore]
    names += [f"{m.value}[core {k}]" for k in range(n_cores) for m in core]
    return names


def design_matrix(frame: TelemetryFrame, uncore=PKG_METRICS, core=CORE_METRICS) -> np.ndarray:
    """Regressors ``[1, m_unc..., m_{j,0}..., m_{j,1}..., ...]`` with one row per sample."""
    cols = [np.ones(frame.n_samples)]
    try:
        cols += [frame.pkg_metrics[m] for m in uncore]
        per_core = [frame.core_metrics[m] for m in core]
    except KeyError as exc:
        raise DataError(f"frame lacks metric {exc.args[0].value}") from None
    for k in range(frame.n_cores):
        cols += [arr[k] for arr in per_core]
    return np.column_stack(cols)


def fit_power_model(frames: Sequence[TelemetryFrame]) -> PowerModel:
    """Ordinary least squares fit of package power on rescaled metrics.

    Raises :class:`RankDeficientError` naming the columns a pivoted QR
    cannot separate (e.g. a metric that never moves).
    """
    frames = list(frames)
    if not frames:
        raise DataError("no frames to fit")
    n_cores = frames[0].n_cores
    for f in frames:
        if not f.metrics_rescaled:
            raise DataError("power model expects rescaled metrics; call rescale_metrics first")
        if f.n_cores != n_cores:
            raise DataError("all training frames must have the same core count")
    X = np.vstack([design_matrix(f) for f in frames])
    y = np.concatenate([f.pkg_power for f in frames])
    names = _column_names(n_cores)
    if X.shape[0] < MIN_SAMPLES_PER_COEF * X.shape[1]:
        raise DataError(
            f"{X.shape[0]} samples for {X.shape[1]} coefficients; "
            f"need at least {MIN_SAMPLES_PER_COEF * X.shape[1]}"
        )

    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_RTOL * diag[0])) if diag[0] > 0 else 0
    if rank < X.shape[1]:
        bad = [names[i] for i in sorted(piv[rank:])]
        raise RankDeficientError(f"power regressors are rank deficient ({rank}/{X.shape[1]}); "
                                 f"dependent columns: {', '.join(bad)}", bad)

    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    n_unc = len(PKG_METRICS)
    return PowerModel(
        alpha=coef[1 : 1 + n_unc],
        beta=coef[1 + n_unc :].reshape(n_cores, len(CORE_METRICS)),
        intercept=coef[0],
        n_cores=n_cores,
    )


def _raw_parts(model: PowerModel, frame: TelemetryFrame) -> tuple[np.ndarray, np.ndarray]:
    if frame.n_cores != model.n_cores:
        raise DataError(f"frame has {frame.n_cores} cores, model was fit for {model.n_cores}")
    try:
        unc = [frame.pkg_metrics[m] for m in model.uncore_metrics]
        core = [frame.core_metrics[m] for m in model.core_metrics]
    except KeyError as exc:
        raise DataError(f"frame lacks metric {exc.args[0].value}") from None
    uncore = np.full(frame.n_samples, model.intercept)
    for a, m in zip(model.alpha, unc):
        uncore = uncore + a * m
    per_core = np.zeros((model.n_cores, frame.n_samples))
    for j, m in enumerate(core):
        per_core += model.beta[:, j : j + 1] * m
    return uncore, per_core


def _sum_parts(uncore: np.ndarray, per_core: np.ndarray) -> np.ndarray:
    # Single summation order shared by prediction and partition.
    total = uncore.copy()
    for row in per_core:
        total += row
    return total


def predict_package(model: PowerModel, frame: TelemetryFrame) -> np.ndarray:
    return _sum_parts(*_raw_parts(model, frame))


def partition_powers(model: PowerModel, frame: TelemetryFrame) -> PartialPowers:
    """Split the package prediction into uncore and per-core shares.

    Negative shares are clamped to zero after the package total is recorded.
    """
    uncore, per_core = _raw_parts(model, frame)
    package = _sum_parts(uncore, per_core)
    n_clamped = int(np.sum(uncore < 0) + np.sum(per_core < 0))
    if n_clamped:
        log.info("clamped %d negative partial-power samples to zero", n_clamped)
    return PartialPowers(
        uncore=np.maximum(uncore, 0.0),
        per_core=np.maximum(per_core, 0.0),
        package=package,
        n_clamped=n_clamped,
    )


def error_fractions(predicted, measured, thresholds=(3.23, 9.68)) -> dict[float, float]:
    """Fraction of samples whose absolute power error is below each threshold."""
    err = np.abs(np.asarray(predicted) - np.asarray(measured))
    return {float(t): float(np.mean(err < t)) for t in thresholds}
