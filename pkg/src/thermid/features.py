"""Per-window features for the classifiers and the good/bad labelling rule.

Trace features summarise the raw signals of a window; identification
features summarise what the identification of that window produced.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .arx import ArxModel, IdentDiagnostics, N_RESIDUAL_LAGS
from .errors import DataError
from .power import PartialPowers
from .telemetry import Window

N_LAGS = 100
N_SUBWINDOWS = 20
MIN_TRACE_SAMPLES = 200
COND_CAP = 1e18
REAL_TOL = 1e-9

TRACE_STATS = ("mean_abs_autocorr_100", "mean_lowpass", "std_lowpass", "span_lowpass", "mean_fft_norm")


def trace_signal_names(n_cores: int) -> tuple[str, ...]:
    """Signal order of the trace features and of the CNN channels.

    ``own_power`` is the partial power of the window's core and ``peer{j}``
    the core ``j`` places after it (cyclically), so every core of a package
    sees its own power in the same slot.
    """
    peers = tuple(f"peer{j}_power" for j in range(1, n_cores))
    return ("pkg_power", "core_temp", "uncore_power", "own_power") + peers


def trace_signals(powers: PartialPowers, temps: np.ndarray, pkg_power: np.ndarray, core_id: int) -> np.ndarray:
    """Stack the ``N_c + 3`` signals in :func:`trace_signal_names` order."""
    per_core = np.roll(powers.per_core, -core_id, axis=0)
    return np.vstack([np.asarray(pkg_power, float)[None], np.asarray(temps, float)[None],
                      powers.uncore[None], per_core])


def signal_stats(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Five trace statistics for every row of ``X``.

    Returns ``(stats, zero_var)`` with ``stats`` of shape ``(S, 5)``. The
    autocorrelation uses the biased estimator and is set to 1.0 for rows
    with zero variance, which are flagged in ``zero_var``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    S, N = X.shape
    if N < MIN_TRACE_SAMPLES:
        raise DataError(f"trace features need at least {MIN_TRACE_SAMPLES} samples, got {N}")
    Xc = X - X.mean(axis=1, keepdims=True)
    c0 = np.einsum("sn,sn->s", Xc, Xc)
    zero_var = c0 <= 1e-12 * np.maximum(1.0, np.einsum("sn,sn->s", X, X))

    acf = np.ones(S)
    nz = ~zero_var
    if nz.any():
        nfft = 1 << int(np.ceil(np.log2(2 * N - 1)))
        F = np.fft.rfft(Xc[nz], nfft)
        r = np.fft.irfft(F * np.conj(F), nfft)[:, 1 : N_LAGS + 1]
        acf[nz] = np.mean(np.abs(r / c0[nz, None]), axis=1)

    means = np.stack([seg.mean(axis=1) for seg in np.array_split(X, N_SUBWINDOWS, axis=1)], axis=1)
    fft_norm = np.abs(np.fft.fft(Xc, axis=1)).mean(axis=1) / N
    stats = np.column_stack([acf, means.mean(axis=1), means.std(axis=1),
                             means.max(axis=1) - means.min(axis=1), fft_norm])
    return stats, zero_var


@dataclass(frozen=True)
class TraceFeatures:
    """Per-signal statistics; ``values[i, j]`` is stat ``j`` of signal ``i``."""

    values: np.ndarray
    signals: tuple[str, ...]
    zero_variance: tuple[str, ...] = ()

    @property
    def vector(self) -> np.ndarray:
        """Signal-major flattening: all stats of signal 0, then signal 1, ..."""
        return self.values.ravel()

    @property
    def names(self) -> list[str]:
        return [f"{s}.{f}" for s in self.signals for f in TRACE_STATS]


def trace_features(window: Window, powers: PartialPowers, core_id: int | None = None,
                   pkg_power=None) -> TraceFeatures:
    core = window.core_id if core_id is None else core_id
    if core is None:
        raise DataError("trace features need a core")
    if powers.n_samples != window.length_samples:
        raise DataError("partial powers are not aligned with the window")
    pkg = window.frame.pkg_power if pkg_power is None else pkg_power
    X = trace_signals(powers, window.temps(core), pkg, core)
    stats, zero = signal_stats(X)
    names = trace_signal_names(powers.n_cores)
    return TraceFeatures(stats, names, tuple(n for n, z in zip(names, zero) if z))


def ident_feature_names(n: int) -> list[str]:
    return ([f"re_pole{i}" for i in range(n)] + [f"im_pole{i}" for i in range(n)]
            + ["sigma_w", "sigma_v"] + [f"resid_acf{k}" for k in range(1, N_RESIDUAL_LAGS + 1)]
            + ["log10_cond_r", "log10_min_sv_r"])


@dataclass(frozen=True)
class IdentFeatures:
    re_poles: np.ndarray
    im_poles: np.ndarray
    sigma_w: float
    sigma_v: float
    residual_autocorr: np.ndarray
    log10_cond_r: float
    log10_min_sv_r: float

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.re_poles, self.im_poles, [self.sigma_w, self.sigma_v],
                               self.residual_autocorr, [self.log10_cond_r, self.log10_min_sv_r]])

    @property
    def names(self) -> list[str]:
        return ident_feature_names(self.re_poles.size)


def _log_cond(cond: float) -> float:
    c = float(cond) if np.isfinite(cond) else COND_CAP
    return float(np.log10(min(max(c, 1.0), COND_CAP)))


def _log_min_sv(sv: float) -> float:
    return float(np.log10(max(sv, 1.0 / COND_CAP)))


def sort_poles(poles) -> np.ndarray:
    """Descending modulus; within a conjugate pair the positive imaginary part first."""
    p = np.asarray(poles, dtype=complex)
    return p[np.lexsort((-p.imag, -np.abs(p)))]


def ident_features(diag: IdentDiagnostics, model: ArxModel | None = None) -> IdentFeatures:
    poles = sort_poles(diag.poles if model is None else model.poles())
    return IdentFeatures(
        re_poles=poles.real.copy(),
        im_poles=poles.imag.copy(),
        sigma_w=float(diag.sigma_w),
        sigma_v=float(diag.sigma_v),
        residual_autocorr=np.asarray(diag.residual_autocorr, dtype=float),
        log10_cond_r=_log_cond(diag.cond_r),
        log10_min_sv_r=_log_min_sv(diag.min_sv_r),
    )


def deficient_ident_features(n: int) -> IdentFeatures:
    """Features of a window whose identification was refused: no poles, no
    noise split, both conditioning features saturated."""
    return IdentFeatures(
        re_poles=np.zeros(n),
        im_poles=np.zeros(n),
        sigma_w=0.0,
        sigma_v=0.0,
        residual_autocorr=np.zeros(N_RESIDUAL_LAGS),
        log10_cond_r=_log_cond(COND_CAP),
        log10_min_sv_r=_log_min_sv(0.0),
    )


class Label(str, Enum):
    GOOD = "good"
    BAD = "bad"
    EXCLUDED = "excluded"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class LabelThresholds:
    err: float = 1.2
    err_std: float = 1.5
    min_pole: float = 0.8
    excl_err: float = 1.5
    excl_std: float = 2.0


@dataclass(frozen=True)
class WindowLabel:
    label: Label
    mean_err: float
    err_std: float
    max_pole_modulus: float
    poles_real_stable: bool

    @property
    def is_good(self) -> bool:
        """Hard label used at test time: excluded windows count as not good."""
        return self.label is Label.GOOD


def poles_real(poles) -> bool:
    p = np.asarray(poles, dtype=complex)
    return bool(np.all(np.abs(p.imag) <= REAL_TOL * np.maximum(1.0, np.abs(p))))


def label_window(score, diag: IdentDiagnostics | None,
                 thresholds: LabelThresholds = LabelThresholds()) -> WindowLabel:
    """Label one identified window from its cross-validation score.

    ``score`` is ``(mean_err, err_std)`` or anything with ``mean_abs_error``
    and ``error_std``. A window without diagnostics (identification
    refused) is bad.
    """
    if hasattr(score, "mean_abs_error"):
        mae, std = score.mean_abs_error, score.error_std
    else:
        mae, std = score
    mae, std = float(mae), float(std)
    th = thresholds
    if diag is None:
        return WindowLabel(Label.BAD, mae, std, float("nan"), False)

    p = np.asarray(diag.poles, dtype=complex)
    real = poles_real(p)
    stable = bool(np.all(np.abs(p) < 1.0))
    high_enough = real and bool(np.all(p.real > th.min_pole))
    good = mae < th.err and std < th.err_std and real and stable and high_enough
    if good:
        label = Label.GOOD
    elif th.err < mae <= th.excl_err or th.err_std < std <= th.excl_std:
        label = Label.EXCLUDED
    else:
        label = Label.BAD
    return WindowLabel(label, mae, std, float(np.abs(p).max()), real and stable)


def write_feature_csv(path, names: Sequence[str], matrix: np.ndarray,
                      meta: dict[str, Sequence] | None = None) -> Path:
    """Write a feature matrix with a header naming every column.

    ``meta`` columns (window ids, labels, ...) come first. Floats use
    ``repr`` so a re-read matrix is bit-identical.
    """
    path = Path(path)
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.shape[1] != len(names):
        raise DataError(f"{len(names)} names for {matrix.shape[1]} feature columns")
    meta = meta or {}
    for k, col in meta.items():
        if len(col) != matrix.shape[0]:
            raise DataError(f"meta column {k!r} has {len(col)} rows, matrix {matrix.shape[0]}")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*meta.keys(), *names])
        for i, row in enumerate(matrix):
            w.writerow([*(col[i] for col in meta.values()), *(repr(float(v)) for v in row)])
    return path
