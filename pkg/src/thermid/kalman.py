"""State-space form of an ARX model and the one-step Kalman temperature predictor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .arx import ArxModel, companion
from .errors import DataError, NumericalFailure
from .power import PartialPowers
from .telemetry import Window

DEFAULT_BURN_IN = 60
P0_SCALE = 10.0
R_FLOOR = 1e-6
PSD_TOL = 1e-10
_CONVERGED_RTOL = 1e-13


@dataclass(frozen=True)
class StateSpace:
    """``x(t+1) = A x(t) + B u(t) + G (offset + w(t+1))``, ``T(t) = C x(t) + v(t)``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    G: np.ndarray
    Q: np.ndarray
    R: float
    offset: float = 0.0

    @property
    def n(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class PredictionResult:
    predicted: np.ndarray
    innovations: np.ndarray
    mean_abs_error: float
    error_std: float
    burn_in: int = DEFAULT_BURN_IN


@dataclass(frozen=True)
class ScoreResult:
    mean_abs_error: float
    error_std: float
    n_samples: int


def build_state_space(model: ArxModel) -> StateSpace:
    n = model.order_n
    C = np.zeros((1, n))
    C[0, 0] = 1.0
    G = C.T.copy()
    return StateSpace(
        A=companion(model.a),
        B=model.b.T.copy(),
        C=C,
        G=G,
        Q=model.sigma_w2 * (G @ G.T),
        R=float(model.sigma_v2),
        offset=float(model.offset),
    )


@dataclass
class _FilterStats:
    sum_abs: np.ndarray
    sum: np.ndarray
    sum_sq: np.ndarray
    count: int
    failed_step: np.ndarray
    predicted: np.ndarray | None = None


def _filter(systems: Sequence[StateSpace], U: np.ndarray, Y: np.ndarray, rows: np.ndarray,
            burn_in: int, keep: bool, x0=None, P0=None) -> _FilterStats:
    """Run ``M`` filters over ``W`` aligned traces at once.

    ``U`` is ``(W, T, m)`` inputs, ``Y`` is ``(K, W, T)`` measurements and
    model ``i`` reads measurement row ``rows[i]``. The gain sequence is the
    same for every trace of a model; it is frozen once the covariance
    recursion has converged.
    """
    M, (W, T, m) = len(systems), U.shape
    n = systems[0].n
    A = np.stack([s.A for s in systems])
    B = np.stack([s.B for s in systems])
    Q = np.stack([s.Q for s in systems])
    R = np.maximum(np.array([s.R for s in systems]), R_FLOOR)
    drift = np.stack([s.G[:, 0] * s.offset for s in systems])
    if B.shape[2] != m:
        raise DataError(f"models expect {B.shape[2]} inputs, got {m}")
    Yt = np.ascontiguousarray(np.moveaxis(Y, 2, 0))
    Ut = np.ascontiguousarray(np.moveaxis(U, 1, 0))

    x = np.zeros((M, W, n))
    x[:, :, 0] = Yt[0][rows] if x0 is None else 0.0
    if x0 is not None:
        x[:] = np.asarray(x0, dtype=float)
    P = np.broadcast_to(P0_SCALE * np.eye(n) if P0 is None else np.asarray(P0, float), (M, n, n)).copy()
    eye = np.eye(n)
    At = np.swapaxes(A, 1, 2)

    stats = _FilterStats(np.zeros((M, W)), np.zeros((M, W)), np.zeros((M, W)), 0, np.full(M, -1))
    preds = np.empty((T, M, W)) if keep else None
    converged = False
    K = None
    IKC = None
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            pred = x[:, :, 0]
            eps = Yt[t][rows] - pred
            if keep:
                preds[t] = pred
            if t >= burn_in:
                stats.sum_abs += np.abs(eps)
                stats.sum += eps
                stats.sum_sq += eps * eps
                stats.count += 1

            if not converged:
                S = P[:, 0, 0] + R
                K = P[:, :, 0] / S[:, None]
                IKC = eye - K[:, :, None] * eye[0][None, None, :]
                P_upd = IKC @ P @ np.swapaxes(IKC, 1, 2) + R[:, None, None] * (K[:, :, None] * K[:, None, :])
                P_new = A @ P_upd @ At + Q
                P_new = 0.5 * (P_new + np.swapaxes(P_new, 1, 2))
                min_eig = np.linalg.eigvalsh(P_new)[:, 0]
                scale = np.maximum(1.0, np.abs(P_new).max(axis=(1, 2)))
                bad = (~np.isfinite(min_eig)) | (min_eig < -PSD_TOL * scale)
                newly = bad & (stats.failed_step < 0)
                stats.failed_step[newly] = t
                converged = bool(np.all(np.abs(P_new - P) <= _CONVERGED_RTOL * scale[:, None, None]))
                P = P_new

            x = x + K[:, None, :] * eps[:, :, None]
            x = np.einsum("mij,mwj->mwi", A, x) + np.einsum("mij,wj->mwi", B, Ut[t]) + drift[:, None, :]

    if keep:
        stats.predicted = np.moveaxis(preds, 0, 2)
    return stats


def _inputs_of(powers) -> np.ndarray:
    if isinstance(powers, PartialPowers):
        return powers.inputs
    return np.atleast_2d(np.asarray(powers, dtype=float))


def run_kalman(ss: StateSpace, powers, temps, burn_in: int = DEFAULT_BURN_IN,
               x0=None, P0=None) -> PredictionResult:
    """One-step-ahead predictions ``T(t|t-1)`` of a measured temperature trace.

    The state starts at ``[T(0), 0, ..., 0]`` with covariance ``10 I``
    unless ``x0``/``P0`` are given; the first ``burn_in`` innovations are
    excluded from the summary statistics.
    """
    U = _inputs_of(powers)
    y = np.asarray(temps, dtype=float).ravel()
    if U.shape[1] != y.size:
        raise DataError(f"inputs have {U.shape[1]} samples, temperatures {y.size}")
    if not (np.all(np.isfinite(U)) and np.all(np.isfinite(y))):
        raise DataError("non-finite values in Kalman inputs")
    if burn_in >= y.size:
        raise DataError(f"burn-in {burn_in} leaves no samples of {y.size}")
    st = _filter([ss], U.T[None], y[None, None, :], np.array([0]), burn_in, keep=True, x0=x0, P0=P0)
    if st.failed_step[0] >= 0:
        raise NumericalFailure(f"state covariance lost positivity at step {st.failed_step[0]}",
                               step=int(st.failed_step[0]))
    predicted = st.predicted[0, 0]
    innov = y - predicted
    used = innov[burn_in:]
    return PredictionResult(predicted, innov, float(np.mean(np.abs(used))), float(np.std(used)), burn_in)


def _summarize(sum_abs, s, sq, count) -> tuple[float, float]:
    if count == 0:
        return float("nan"), float("nan")
    mean_abs = sum_abs / count
    mean = s / count
    var = max(sq / count - mean * mean, 0.0)
    if not (np.isfinite(mean_abs) and np.isfinite(var)):
        return float("inf"), float("inf")
    return float(mean_abs), float(np.sqrt(var))


def score_model(model: ArxModel, eval_windows: Sequence[Window], powers_per_window: Sequence,
                core_id: int | None = None, burn_in: int = DEFAULT_BURN_IN) -> ScoreResult:
    """Innovation statistics pooled over several windows, restarting the filter in each."""
    if not eval_windows:
        raise DataError("score_model needs at least one evaluation window")
    if len(eval_windows) != len(powers_per_window):
        raise DataError("one set of partial powers is required per evaluation window")
    ss = build_state_space(model)
    core = model.core_id if core_id is None else core_id
    tot_abs = tot = tot_sq = 0.0
    count = 0
    for win, pw in zip(eval_windows, powers_per_window):
        c = win.core_id if core is None else core
        res = run_kalman(ss, pw, win.temps(c), burn_in)
        used = res.innovations[burn_in:]
        tot_abs += float(np.abs(used).sum())
        tot += float(used.sum())
        tot_sq += float(used @ used)
        count += used.size
    mae, std = _summarize(tot_abs, tot, tot_sq, count)
    return ScoreResult(mae, std, count)


def score_models(models: Sequence[ArxModel], temps: np.ndarray, inputs: np.ndarray, rows,
                 burn_in: int = DEFAULT_BURN_IN) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`score_model` over equal-length evaluation windows.

    ``temps`` is ``(n_cores, W, T)``, ``inputs`` is ``(W, m, T)``, and model
    ``i`` is scored against core ``rows[i]``. Returns per-model mean absolute
    innovation and innovation standard deviation; models whose filter fails
    get ``inf``.
    """
    rows = np.asarray(rows, dtype=int)
    U = np.moveaxis(np.asarray(inputs, dtype=float), 1, 2)
    st = _filter([build_state_space(m) for m in models], U, np.asarray(temps, float), rows, burn_in, keep=False)
    mae = np.empty(len(models))
    std = np.empty(len(models))
    for i in range(len(models)):
        if st.failed_step[i] >= 0:
            mae[i] = std[i] = np.inf
            continue
        mae[i], std[i] = _summarize(st.sum_abs[i].sum(), st.sum[i].sum(), st.sum_sq[i].sum(),
                                    st.count * U.shape[0])
    return mae, std


def open_loop(model: ArxModel, inputs, temps_init) -> np.ndarray:
    """Pure difference-equation rollout seeded with the first ``n`` measured temperatures."""
    U = _inputs_of(inputs)
    n = model.order_n
    T = np.empty(U.shape[1])
    T[:n] = np.asarray(temps_init, dtype=float)[:n]
    for t in range(n, T.size):
        T[t] = model.offset - model.a @ T[t - n : t][::-1] + np.sum(model.b * U[:, t - n : t][:, ::-1])
    return T
