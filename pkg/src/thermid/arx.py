"""MISO ARX identification with additive output noise.

The model for one core is::

    Tbar(t) + sum_i a_i Tbar(t-i) = sum_k sum_i b_ki P_k(t-i) + w(t)
    T(t)    = Tbar(t) + v(t)

with inputs ``P_0`` (uncore) and ``P_1..P_Nc`` (cores). Two sets of moment
equations hold for the true parameters::

    (Sigma - Sigma_tilde(sigma_v2, sigma_w2)) theta = 0
    Sigma_q theta = 0

``method="frisch"`` (default) scans ``sigma_v2``: for each value the first
set gives ``theta`` and ``sigma_w2`` in closed form (bias-compensated least
squares) and the value minimizing ``|Sigma_q theta|`` is kept.
``method="iv"`` solves the second set alone, whose instruments are lagged
powers only, and then reads both variances off the first set.

Both covariance matrices are built from mean-removed regressors. A constant
term in the difference equation (ambient temperature) therefore cancels
exactly and is recovered afterwards as :attr:`ArxModel.offset`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .errors import ConfigurationError, DataError, ExcitationDeficient
from .power import PartialPowers
from .telemetry import Window

DEFAULT_ORDER = 2
SV_RTOL = 1e-10
N_RESIDUAL_LAGS = 4
N_SCAN = 400
METHODS = ("frisch", "iv")


@dataclass(frozen=True)
class ArxModel:
    """Identified (or true) thermal model of one core.

    ``b[k]`` holds ``b_k1..b_kn`` of input ``k``; row 0 is the uncore.
    ``offset`` is the constant term of the difference equation, i.e.
    ``(1 + sum(a)) * T_ambient`` for a model with an ambient floor.
    """

    a: np.ndarray
    b: np.ndarray
    sigma_w2: float = 0.0
    sigma_v2: float = 0.0
    offset: float = 0.0
    core_id: int | None = None

    def __post_init__(self):
        a = np.array(self.a, dtype=float).ravel()
        b = np.atleast_2d(np.array(self.b, dtype=float))
        if b.shape[1] != a.size:
            raise ConfigurationError(f"b has {b.shape[1]} lags per input, a has order {a.size}")
        if self.sigma_w2 < 0 or self.sigma_v2 < 0:
            raise ConfigurationError("noise variances must be non-negative")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def order_n(self) -> int:
        return int(self.a.size)

    @property
    def n_inputs(self) -> int:
        return int(self.b.shape[0])

    @property
    def n_cores(self) -> int:
        return self.n_inputs - 1

    @property
    def theta(self) -> np.ndarray:
        """``[1, a_1..a_n, b_01..b_0n, ..., b_Nc1..b_Ncn]``."""
        return np.concatenate([[1.0], self.a, self.b.ravel()])

    @classmethod
    def from_theta(cls, theta, n: int, **kwargs) -> "ArxModel":
        theta = np.asarray(theta, dtype=float)
        if not np.isclose(theta[0], 1.0):
            raise ConfigurationError("theta must start with the normalizing 1")
        return cls(a=theta[1 : n + 1], b=theta[n + 1 :].reshape(-1, n), **kwargs)

    def poles(self) -> np.ndarray:
        return np.linalg.eigvals(companion(self.a))

    def dc_gains(self) -> np.ndarray:
        """Steady-state temperature rise per watt of each input."""
        return self.b.sum(axis=1) / (1.0 + self.a.sum())

    @property
    def ambient(self) -> float:
        return self.offset / (1.0 + self.a.sum())


def companion(a) -> np.ndarray:
    """``n x n`` matrix with first column ``-a`` and ones on the superdiagonal."""
    a = np.asarray(a, dtype=float)
    n = a.size
    A = np.zeros((n, n))
    A[:, 0] = -a
    A[np.arange(n - 1), np.arange(1, n)] = 1.0
    return A


@dataclass(frozen=True)
class RegressorSet:
    """Stacked regressor columns.

    ``phi`` is ``(1 + n + m n, N - n)`` with columns ``t = n..N-1``;
    ``phi_q`` is ``(m q, N - n - q)`` with columns ``t = n+q..N-1``, where
    ``m = N_c + 1`` inputs.
    """

    phi: np.ndarray
    phi_q: np.ndarray
    n: int
    q: int
    n_samples: int

    @property
    def n_inputs(self) -> int:
        return self.phi_q.shape[0] // self.q


@dataclass(frozen=True)
class CovarianceEstimates:
    sigma_hat: np.ndarray
    sigma_q_hat: np.ndarray
    r_hat: np.ndarray
    cond_r: float
    min_sv_r: float
    n: int
    q: int


@dataclass(frozen=True)
class NoiseVariances:
    sigma_v2: float
    sigma_w2: float
    clamped: bool = False
    separable: bool = True


@dataclass(frozen=True)
class IdentDiagnostics:
    poles: np.ndarray
    residual_autocorr: np.ndarray
    cond_r: float
    min_sv_r: float
    sigma_w: float
    sigma_v: float
    variances_clamped: bool = False
    variances_separable: bool = True
    residuals: np.ndarray = field(default=None, repr=False)


def default_q(n: int, n_inputs: int) -> int:
    """Smallest ``q >= 4n`` giving at least as many equations as unknowns."""
    q = 4 * n
    while n_inputs * q < (n_inputs + 1) * n:
        q += 1
    return q


def check_q(n: int, q: int, n_inputs: int) -> None:
    if n < 1:
        raise ConfigurationError(f"model order must be >= 1, got {n}")
    if q < 1 or n_inputs * q < (n_inputs + 1) * n:
        raise ConfigurationError(
            f"q={q} gives {n_inputs * q} instrumental equations for {(n_inputs + 1) * n} unknowns"
        )


def regressors_from_arrays(temps, inputs, n: int = DEFAULT_ORDER, q: int | None = None) -> RegressorSet:
    """Build ``phi`` and ``phi_q`` from a temperature series and stacked inputs."""
    T = np.asarray(temps, dtype=float)
    U = np.atleast_2d(np.asarray(inputs, dtype=float))
    N = T.shape[0]
    m = U.shape[0]
    if U.shape[1] != N:
        raise DataError(f"inputs have {U.shape[1]} samples, temperatures {N}")
    q = default_q(n, m) if q is None else q
    check_q(n, q, m)
    if N <= n + q + 1:
        raise DataError(f"window of {N} samples too short for n={n}, q={q} (need > {n + q + 1})")

    rows = [-T[n - j : N - j] for j in range(n + 1)]
    for k in range(m):
        rows += [U[k, n - i : N - i] for i in range(1, n + 1)]
    phi = np.vstack(rows)
    qrows = [U[k, n + q - i : N - i] for k in range(m) for i in range(1, q + 1)]
    return RegressorSet(phi=phi, phi_q=np.vstack(qrows), n=n, q=q, n_samples=N)


def build_regressors(window: Window, powers: PartialPowers, core_id: int | None = None,
                     n: int = DEFAULT_ORDER, q: int | None = None) -> RegressorSet:
    if powers.n_samples != window.length_samples:
        raise DataError("partial powers are not aligned with the window")
    return regressors_from_arrays(window.temps(core_id), powers.inputs, n, q)


def sample_covariances(reg: RegressorSet) -> CovarianceEstimates:
    """Sample second moments of the mean-removed regressors and ``R = [Sigma; Sigma_q]``."""
    if not (np.all(np.isfinite(reg.phi)) and np.all(np.isfinite(reg.phi_q))):
        raise DataError("regressors contain non-finite values")
    N, n, q = reg.n_samples, reg.n, reg.q
    phi_c = reg.phi - reg.phi.mean(axis=1, keepdims=True)
    sigma = phi_c @ phi_c.T / (N - n)
    sigma = 0.5 * (sigma + sigma.T)

    phi_sub = reg.phi[:, q:]
    phi_sub = phi_sub - phi_sub.mean(axis=1, keepdims=True)
    phiq_c = reg.phi_q - reg.phi_q.mean(axis=1, keepdims=True)
    sigma_q = phiq_c @ phi_sub.T / (N - q)

    r_hat = np.vstack([sigma, sigma_q])
    sv = np.linalg.svd(r_hat, compute_uv=False)
    min_sv = float(sv[-1])
    cond = float(sv[0] / min_sv) if min_sv > 0 else float("inf")
    return CovarianceEstimates(sigma, sigma_q, r_hat, cond, min_sv, n, q)


def solve_theta(cov: CovarianceEstimates, n: int, n_cores: int) -> np.ndarray:
    """Least-squares solution of ``Sigma_q [1; theta_rest] = 0``; returns full ``theta``.

    Raises :class:`ExcitationDeficient` when ``Sigma_q[:, 1:]`` has numerical
    rank below the number of unknowns ``(N_c + 2) n``.
    """
    m = n_cores + 1
    unknowns = (m + 1) * n
    M = cov.sigma_q_hat
    if M.shape[1] != 1 + unknowns:
        raise ConfigurationError(f"covariances are for {M.shape[1] - 1} unknowns, expected {unknowns}")
    check_q(n, M.shape[0] // m, m)
    cov, d = _unit_inputs(cov, n, m)
    _check_instrument_rank(cov, n, n_cores)
    M = cov.sigma_q_hat
    U, s, Vt = np.linalg.svd(M[:, 1:], full_matrices=False)
    theta_rest = Vt.T @ ((U.T @ -M[:, 0]) / s)
    return d * np.concatenate([[1.0], theta_rest])


def _unit_inputs(cov: CovarianceEstimates, n: int, m: int) -> tuple[CovarianceEstimates, np.ndarray]:
    """Covariances of the regressors with every input rescaled to unit variance.

    Returns the rescaled estimates and the vector ``d`` mapping a solution
    for the rescaled inputs back to the original units (``theta = d * theta'``).
    Solving in these units makes the rank decision and the coefficients
    independent of the power unit.
    """
    S = cov.sigma_hat
    var = np.array([S[1 + n + k * n, 1 + n + k * n] for k in range(m)])
    scale = np.where(var > 0, np.sqrt(var), 1.0)
    d = np.concatenate([np.ones(n + 1), np.repeat(1.0 / scale, n)])
    dq = np.repeat(1.0 / scale, cov.q)
    sigma = d[:, None] * S * d[None, :]
    sigma_q = dq[:, None] * cov.sigma_q_hat * d[None, :]
    return CovarianceEstimates(sigma, sigma_q, np.vstack([sigma, sigma_q]), cov.cond_r, cov.min_sv_r, n, cov.q), d


def estimate_noise_variances(cov: CovarianceEstimates, theta) -> NoiseVariances:
    """Measurement and process noise variances from ``Sigma theta = Sigma_tilde theta``.

    Rows ``1..n`` give ``r_i = sigma_v2 a_i`` (solved in least squares), row
    0 gives ``r_0 = sigma_v2 + sigma_w2``.
    """
    theta = np.asarray(theta, dtype=float)
    n = cov.n
    r = cov.sigma_hat @ theta
    a = theta[1 : n + 1]
    aa = float(a @ a)
    separable = aa > 1e-12
    sigma_v2 = float(a @ r[1 : n + 1]) / aa if separable else 0.0
    sigma_w2 = float(r[0]) - sigma_v2
    clamped = sigma_v2 < 0 or sigma_w2 < 0
    return NoiseVariances(max(sigma_v2, 0.0), max(sigma_w2, 0.0), clamped, separable)


def _check_instrument_rank(cov: CovarianceEstimates, n: int, n_cores: int) -> None:
    unknowns = (n_cores + 2) * n
    s = np.linalg.svd(cov.sigma_q_hat[:, 1:], compute_uv=False)
    rank = int(np.sum(s > SV_RTOL * s[0])) if s[0] > 0 else 0
    if rank < unknowns:
        raise ExcitationDeficient(
            f"instrumental matrix has rank {rank} < {unknowns} unknowns (cond(R) = {cov.cond_r:.3g})",
            cond_r=cov.cond_r, rank=rank, required=unknowns, min_sv_r=cov.min_sv_r,
        )


def solve_bias_compensated(cov: CovarianceEstimates, n: int, n_cores: int) -> tuple[np.ndarray, NoiseVariances]:
    """Scan ``sigma_v2`` over the admissible interval and keep the value whose
    bias-compensated ``theta`` best satisfies ``Sigma_q theta = 0``.

    The admissible interval keeps ``Sigma[1:, 1:] - sigma_v2 D`` positive
    definite (``D`` selects the lagged-temperature rows) and, when possible,
    ``sigma_w2 >= 0``.
    """
    m = n_cores + 1
    if cov.sigma_hat.shape[0] != 1 + (m + 1) * n:
        raise ConfigurationError("covariances do not match the model order and core count")
    check_q(n, cov.sigma_q_hat.shape[0] // m, m)
    cov, d = _unit_inputs(cov, n, m)
    _check_instrument_rank(cov, n, n_cores)

    S = cov.sigma_hat
    s00, s0, Sr = S[0, 0], S[1:, 0], S[1:, 1:]
    sv = np.linalg.svd(Sr, compute_uv=False)
    if sv[-1] <= SV_RTOL * sv[0]:
        raise ExcitationDeficient("regressor covariance is singular", cond_r=cov.cond_r,
                                  rank=int(np.sum(sv > SV_RTOL * sv[0])), required=Sr.shape[0], min_sv_r=cov.min_sv_r)
    S_tt, S_tp, S_pp = Sr[:n, :n], Sr[:n, n:], Sr[n:, n:]
    schur = S_tt - S_tp @ np.linalg.solve(S_pp, S_tp.T)
    upper = float(np.linalg.eigvalsh(0.5 * (schur + schur.T))[0])
    D = np.zeros(Sr.shape[0])
    D[:n] = 1.0
    Mq = cov.sigma_q_hat

    def theta_at(v):
        return np.concatenate([[1.0], -np.linalg.solve(Sr - v * np.diag(D), s0)])

    def cost(v):
        r = Mq @ theta_at(v)
        return float(r @ r)

    def slope(v):
        # half the derivative of cost; d theta_rest / dv = -(Sr - v D)^-1 D x
        K = Sr - v * np.diag(D)
        x = np.linalg.solve(K, s0)
        dtheta = -np.linalg.solve(K, D * x)
        return float((Mq @ np.concatenate([[1.0], -x])) @ (Mq[:, 1:] @ dtheta))

    grid = np.linspace(0.0, upper * (1.0 - 1e-6), N_SCAN) if upper > 0 else np.zeros(1)
    thetas = [theta_at(v) for v in grid]
    costs = np.array([float((Mq @ th) @ (Mq @ th)) for th in thetas])
    sw2 = np.array([s00 + s0 @ th[1:] - v for th, v in zip(thetas, grid)])
    feasible = sw2 >= 0
    pool = np.flatnonzero(feasible) if feasible.any() else np.arange(grid.size)
    i = int(pool[np.argmin(costs[pool])])
    best_v, best_cost = float(grid[i]), costs[i]
    if grid.size > 1:
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        if lo < hi and slope(lo) < 0 < slope(hi):
            cand = brentq(slope, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps)
        else:
            cand = float(minimize_scalar(cost, bounds=(lo, hi), method="bounded",
                                         options={"xatol": 1e-12 * max(upper, 1.0)}).x)
        if cost(cand) < best_cost and (s00 + s0 @ theta_at(cand)[1:] - cand >= 0 or not feasible.any()):
            best_v = cand
    theta = theta_at(best_v)
    sigma_w2 = float(s00 + s0 @ theta[1:] - best_v)
    clamped = sigma_w2 < 0
    return d * theta, NoiseVariances(best_v, max(sigma_w2, 0.0), clamped, True)


def equation_residuals(model: ArxModel, temps, inputs) -> np.ndarray:
    """``T(t) + sum a_i T(t-i) - sum b_ki P_k(t-i)`` for ``t = n..N-1`` (offset included)."""
    reg = regressors_from_arrays(temps, inputs, model.order_n, q=default_q(model.order_n, model.n_inputs))
    return -(model.theta @ reg.phi)


def autocorr(x, lags) -> np.ndarray:
    """Biased normalized autocorrelation of the mean-removed series at ``lags``."""
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    denom = float(x @ x)
    if denom == 0:
        return np.zeros(len(lags))
    return np.array([float(x[: x.size - k] @ x[k:]) / denom for k in lags])


def identify_arrays(temps, inputs, n: int = DEFAULT_ORDER, q: int | None = None,
                    core_id: int | None = None, method: str = "frisch") -> tuple[ArxModel, IdentDiagnostics]:
    if method not in METHODS:
        raise ConfigurationError(f"unknown identification method {method!r}; choose from {METHODS}")
    reg = regressors_from_arrays(temps, inputs, n, q)
    cov = sample_covariances(reg)
    n_cores = reg.n_inputs - 1
    if method == "iv":
        theta = solve_theta(cov, n, n_cores)
        noise = estimate_noise_variances(cov, theta)
    else:
        theta, noise = solve_bias_compensated(cov, n, n_cores)

    e = -(theta @ reg.phi)
    offset = float(e.mean())
    resid = e - offset
    model = ArxModel.from_theta(theta, n, sigma_w2=noise.sigma_w2, sigma_v2=noise.sigma_v2,
                                offset=offset, core_id=core_id)
    diag = IdentDiagnostics(
        poles=model.poles(),
        residual_autocorr=autocorr(resid, range(1, N_RESIDUAL_LAGS + 1)),
        cond_r=cov.cond_r,
        min_sv_r=cov.min_sv_r,
        sigma_w=float(np.sqrt(noise.sigma_w2)),
        sigma_v=float(np.sqrt(noise.sigma_v2)),
        variances_clamped=noise.clamped,
        variances_separable=noise.separable,
        residuals=resid,
    )
    return model, diag


def identify(window: Window, powers: PartialPowers, core_id: int | None = None,
             n: int = DEFAULT_ORDER, q: int | None = None,
             method: str = "frisch") -> tuple[ArxModel, IdentDiagnostics]:
    """Identify the thermal model of one core from one window.

    Runs regressors, covariances, the coefficient solve and the variance
    split in sequence, then computes poles and residual whiteness.
    :class:`ExcitationDeficient` propagates; no model is returned from a
    rank-deficient solve.
    """
    core = window.core_id if core_id is None else core_id
    if powers.n_samples != window.length_samples:
        raise DataError("partial powers are not aligned with the window")
    return identify_arrays(window.temps(core), powers.inputs, n, q, core_id=core, method=method)
