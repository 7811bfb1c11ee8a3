"""Training, decision rule and evaluation of the window classifiers.

Three families: an RBF support-vector machine with a Platt sigmoid, a
four-layer fully connected network on feature vectors and a 1-D CNN on
downsampled traces. Each produces a likelihood ``l`` that a window is good;
:func:`decide` turns likelihoods into good / bad / unclassified verdicts.
"""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from scipy.optimize import minimize
from sklearn.svm import SVC
from torch import nn

from .errors import ConfigurationError, DataError, NumericalFailure
from .nets import DEFAULT_HIDDEN, Cnn, Mlp, good_probability

log = logging.getLogger(__name__)

TRACE_LENGTH = 2048


ITERATION_UNITS = ("batch", "epoch")


class Algorithm(str, Enum):
    SVM_RBF = "svm_rbf"
    MLP_FEATURES = "mlp_features"
    CNN_TRACE = "cnn_trace"


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and stop-rule settings.

    With ``iteration_unit="batch"`` one iteration is one mini-batch step and
    the stop rule looks at the mean loss of the most recent epoch's worth of
    batches; with ``"epoch"`` one iteration is a full pass. Training stops
    after ``max_iterations`` or once that loss has been below
    ``loss_threshold`` for ``patience`` consecutive iterations.
    """

    algorithm: Algorithm
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    max_iterations: int = 3000
    loss_threshold: float | None = None
    patience: int = 5
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    cnn_base: int = 16
    cnn_kernel: int = 5
    cnn_pool: int = 4
    dropout: float = 0.5
    svm_c: float = 1.0
    svm_gamma: float | str = "scale"
    svm_tol: float = 1e-6
    iteration_unit: str = "batch"

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if self.iteration_unit not in ITERATION_UNITS:
            raise ConfigurationError(f"iteration_unit must be one of {ITERATION_UNITS}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rate must be positive and weight decay non-negative")
        if self.batch_size < 1 or self.max_iterations < 1 or self.patience < 1:
            raise ConfigurationError("batch size, iteration cap and patience must be positive")
        if self.loss_threshold is not None and self.loss_threshold <= 0:
            raise ConfigurationError("loss threshold must be positive")
        if self.svm_c <= 0 or self.svm_tol <= 0:
            raise ConfigurationError("SVM C and tolerance must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must lie in [0, 1)")

    @classmethod
    def svm(cls, **kw) -> "TrainConfig":
        return cls(Algorithm.SVM_RBF, **kw)

    @classmethod
    def mlp_trace(cls, **kw) -> "TrainConfig":
        return cls(Algorithm.MLP_FEATURES, **{"max_iterations": 3000, **kw})

    @classmethod
    def mlp_ident(cls, **kw) -> "TrainConfig":
        return cls(Algorithm.MLP_FEATURES, **{"loss_threshold": 0.15, "max_iterations": 3000, **kw})

    @classmethod
    def cnn_trace(cls, **kw) -> "TrainConfig":
        return cls(Algorithm.CNN_TRACE, **{"weight_decay": 1e-5, "loss_threshold": 0.18,
                                           "max_iterations": 3000, **kw})


@dataclass(frozen=True)
class Standardizer:
    """Zero-mean, unit-variance scaling along ``axis`` statistics of the training set.

    For feature matrices the statistics are per column; for trace tensors
    ``(B, C, L)`` they are per channel.
    """

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        axes = (0,) if X.ndim == 2 else (0, 2)
        mean = X.mean(axis=axes)
        std = X.std(axis=axes)
        return cls(mean, np.where(std > 1e-12, std, 1.0))

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim == 3:
            return ((X - self.mean[None, :, None]) / self.scale[None, :, None]).astype(X.dtype, copy=False)
        return (X - self.mean) / self.scale


def downsample_trace(X: np.ndarray, length: int = TRACE_LENGTH) -> np.ndarray:
    """Mean-pool the last axis into ``length`` nearly equal bins."""
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[-1]
    if N < length:
        raise DataError(f"trace of {N} samples is shorter than the target length {length}")
    edges = (np.arange(length) * N) // length
    sums = np.add.reduceat(X, edges, axis=-1)
    counts = np.diff(np.append(edges, N))
    return sums / counts


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y).astype(int).ravel()
    if not set(np.unique(y)) <= {0, 1}:
        raise DataError("labels must be 0 (bad) or 1 (good)")
    if np.unique(y).size < 2:
        raise DataError("training set contains a single class")
    return y


# -- SVM ---------------------------------------------------------------------------------


def platt_fit(f: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Sigmoid ``P(good | f) = 1 / (1 + exp(A f + B))`` by regularised maximum
    likelihood with Platt's smoothed targets."""
    f = np.asarray(f, float)
    y = np.asarray(y, int)
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    t = np.where(y == 1, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))

    def nll(p):
        z = p[0] * f + p[1]
        # log(1 + exp(z)) written stably; P = sigmoid(-z)
        lse = np.logaddexp(0.0, z)
        val = np.sum(t * lse + (1 - t) * (lse - z))
        s = 1.0 / (1.0 + np.exp(-z))
        grad_z = t * s - (1 - t) * (1 - s)
        return val, np.array([grad_z @ f, grad_z.sum()])

    p0 = np.array([0.0, math.log((n_neg + 1.0) / (n_pos + 1.0))])
    res = minimize(nll, p0, jac=True, method="BFGS")
    return float(res.x[0]), float(res.x[1])


@dataclass
class SvmModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray
    intercept: float
    gamma: float
    platt_a: float
    platt_b: float
    standardizer: Standardizer
    config: TrainConfig
    input_kind: str = "features"

    def decision_function(self, X) -> np.ndarray:
        Z = self.standardizer.transform(np.atleast_2d(np.asarray(X, float)))
        sq = (np.einsum("ij,ij->i", Z, Z)[:, None] + np.einsum("ij,ij->i", self.support_vectors,
              self.support_vectors)[None, :] - 2.0 * Z @ self.support_vectors.T)
        K = np.exp(-self.gamma * np.maximum(sq, 0.0))
        return K @ self.dual_coef + self.intercept

    def likelihood(self, X) -> np.ndarray:
        z = self.platt_a * self.decision_function(X) + self.platt_b
        return 0.5 * (1.0 - np.tanh(0.5 * z))


def train_svm(features, labels, config: TrainConfig | None = None) -> SvmModel:
    """Soft-margin RBF SVM (libsvm's SMO solver) plus a Platt likelihood."""
    config = config or TrainConfig.svm()
    y = _check_labels(labels)
    X = np.asarray(features, float)
    std = Standardizer.fit(X)
    Z = std.transform(X)
    if config.svm_gamma == "scale":
        var = float(Z.var())
        gamma = 1.0 / (Z.shape[1] * var) if var > 0 else 1.0
    else:
        gamma = float(config.svm_gamma)
    clf = SVC(C=config.svm_c, kernel="rbf", gamma=gamma, tol=config.svm_tol)
    clf.fit(Z, y)
    model = SvmModel(
        support_vectors=np.array(clf.support_vectors_, float),
        dual_coef=np.array(clf.dual_coef_[0], float),
        intercept=float(clf.intercept_[0]),
        gamma=gamma,
        platt_a=0.0,
        platt_b=0.0,
        standardizer=std,
        config=config,
    )
    a, b = platt_fit(model.decision_function(X), y)
    model.platt_a, model.platt_b = a, b
    return model


# -- neural networks ---------------------------------------------------------------------


@dataclass
class NetModel:
    """A trained MLP or CNN with its input standardisation and loss history."""

    module: nn.Module
    standardizer: Standardizer
    config: TrainConfig
    n_inputs: int
    history: list[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def input_kind(self) -> str:
        return "traces" if self.config.algorithm is Algorithm.CNN_TRACE else "features"

    def likelihood(self, X, batch_size: int = 512) -> np.ndarray:
        X = self.standardizer.transform(np.asarray(X))
        self.module.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(X), batch_size):
                xb = torch.as_tensor(np.ascontiguousarray(X[i : i + batch_size]), dtype=torch.float32)
                out.append(good_probability(self.module(xb)).double().numpy())
        return np.concatenate(out) if out else np.empty(0)


def build_module(config: TrainConfig, n_inputs: int) -> nn.Module:
    if config.algorithm is Algorithm.MLP_FEATURES:
        return Mlp(n_inputs, config.hidden)
    if config.algorithm is Algorithm.CNN_TRACE:
        return Cnn(n_inputs, config.cnn_base, config.cnn_kernel, config.cnn_pool, config.dropout)
    raise ConfigurationError(f"{config.algorithm.value} is not a network")


def _fit_network(X: np.ndarray, y: np.ndarray, config: TrainConfig) -> NetModel:
    if not np.all(np.isfinite(X)):
        raise DataError("training inputs contain non-finite values")
    std = Standardizer.fit(X)
    Z = std.transform(X)
    n_inputs = X.shape[1]
    t0 = time.perf_counter()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        module = build_module(config, n_inputs)
        opt = torch.optim.AdamW(module.parameters(), lr=config.learning_rate, betas=config.betas,
                                eps=config.eps, weight_decay=config.weight_decay)
        loss_fn = nn.CrossEntropyLoss(reduction="sum")
        gen = torch.Generator().manual_seed(config.seed)
        Xt = torch.as_tensor(np.ascontiguousarray(Z), dtype=torch.float32)
        yt = torch.as_tensor(y, dtype=torch.long)
        history: list[float] = []
        recent: deque[float] = deque(maxlen=math.ceil(len(y) / config.batch_size))
        streak = 0
        per_batch = config.iteration_unit == "batch"
        done = False
        while not done:
            module.train()
            perm = torch.randperm(len(yt), generator=gen)
            total = 0.0
            for i in range(0, len(perm), config.batch_size):
                idx = perm[i : i + config.batch_size]
                opt.zero_grad()
                loss = loss_fn(module(Xt[idx]), yt[idx])
                (loss / len(idx)).backward()
                opt.step()
                total += loss.item()
                if per_batch:
                    recent.append(loss.item() / len(idx))
                    streak, done = _record(history, recent[-1], streak, config, smoothed=sum(recent) / len(recent))
                    if done:
                        break
            if not per_batch:
                streak, done = _record(history, total / len(yt), streak, config)
    log.info("%s trained for %d iterations, final loss %.4f", config.algorithm.value, len(history), history[-1])
    return NetModel(module.eval(), std, config, n_inputs, history, time.perf_counter() - t0)


def _record(history: list[float], loss: float, streak: int, config: TrainConfig,
            smoothed: float | None = None) -> tuple[int, bool]:
    """Append one iteration's loss; returns the updated streak and whether to stop.

    The stop rule uses ``smoothed`` when given, else the raw loss.
    """
    it = len(history)
    if not math.isfinite(loss):
        raise NumericalFailure(f"training loss became {loss} at iteration {it} "
                               f"({config.algorithm.value}, lr={config.learning_rate})", step=it)
    history.append(loss)
    if config.loss_threshold is not None:
        level = loss if smoothed is None else smoothed
        streak = streak + 1 if level < config.loss_threshold else 0
        if streak >= config.patience:
            return streak, True
    return streak, len(history) >= config.max_iterations


def train_mlp(features, labels, config: TrainConfig | None = None) -> NetModel:
    config = config or TrainConfig.mlp_ident()
    if config.algorithm is not Algorithm.MLP_FEATURES:
        raise ConfigurationError("train_mlp needs an mlp_features config")
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("MLP features must be a 2-D matrix")
    return _fit_network(X, _check_labels(labels), config)


def train_cnn(traces, labels, config: TrainConfig | None = None) -> NetModel:
    """``traces`` is ``(B, C, L)`` with equal lengths; ragged input is rejected."""
    config = config or TrainConfig.cnn_trace()
    if config.algorithm is not Algorithm.CNN_TRACE:
        raise ConfigurationError("train_cnn needs a cnn_trace config")
    if isinstance(traces, (list, tuple)):
        lengths = {np.shape(t)[-1] for t in traces}
        if len(lengths) != 1:
            raise DataError(f"ragged trace lengths {sorted(lengths)}; downsample to a common length first")
        traces = np.stack(traces)
    X = np.asarray(traces)
    if X.ndim != 3:
        raise DataError("CNN input must be (windows, channels, samples)")
    if X.shape[2] < config.cnn_pool**4:
        raise DataError(f"traces need at least {config.cnn_pool ** 4} samples for four pooling stages")
    return _fit_network(X.astype(np.float32, copy=False), _check_labels(labels), config)


def train(config: TrainConfig, inputs, labels):
    if config.algorithm is Algorithm.SVM_RBF:
        return train_svm(inputs, labels, config)
    if config.algorithm is Algorithm.MLP_FEATURES:
        return train_mlp(inputs, labels, config)
    return train_cnn(inputs, labels, config)


# -- decisions and evaluation ------------------------------------------------------------


class Decision(str, Enum):
    GOOD = "good"
    BAD = "bad"
    UNCLASSIFIED = "unclassified"

    def __str__(self) -> str:
        # numpy converts through str(); keeps ``decisions == Decision.GOOD`` elementwise-correct
        return self.value


@dataclass(frozen=True)
class Verdict:
    likelihood: float
    tau: float
    decision: Decision


def decide_likelihood(l, tau: float) -> np.ndarray:
    """Vectorised three-way rule; returns an array of :class:`Decision` values.

    Good if ``l > tau``, bad if ``l < 1 - tau``, unclassified otherwise.
    At ``tau = 0.5`` a likelihood of exactly 0.5 is called bad so that
    nothing is left unclassified.
    """
    good, bad = _decision_masks(l, tau)
    out = np.empty(good.shape, dtype=object)
    out.fill(Decision.UNCLASSIFIED)
    out[good] = Decision.GOOD
    out[bad] = Decision.BAD
    return out


def _decision_masks(l, tau: float) -> tuple[np.ndarray, np.ndarray]:
    if not 0.5 <= tau < 1.0:
        raise ConfigurationError(f"threshold must lie in [0.5, 1), got {tau}")
    l = np.asarray(l, dtype=float)
    good = l > tau
    bad = l < 1.0 - tau if tau > 0.5 else l <= 0.5
    return good, bad


def decide(model, inputs, tau: float) -> list[Verdict]:
    l = model.likelihood(inputs)
    return [Verdict(float(v), tau, d) for v, d in zip(l, decide_likelihood(l, tau))]


@dataclass(frozen=True)
class ClassificationReport:
    """Percentages of classified windows, plus yield loss over the whole test set.

    ``misclassified_good_pct`` counts windows called good that are bad;
    ``misclassified_bad_pct`` counts windows called bad that are good.
    ``good_errors`` are the true mean Kalman errors of the windows called
    good, sorted, for the ECDF.
    """

    tau: float
    n_test: int
    n_classified: int
    correct_pct: float
    misclassified_good_pct: float
    misclassified_bad_pct: float
    unclassified_pct: float
    good_errors: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    @property
    def zero_yield(self) -> bool:
        return self.n_classified == 0

    def ecdf(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.good_errors.size
        return self.good_errors, np.arange(1, n + 1) / max(n, 1)


def report_from_likelihood(likelihood, truth_good, tau: float, errors=None) -> ClassificationReport:
    truth = np.asarray(truth_good, dtype=bool)
    l = np.asarray(likelihood, dtype=float)
    if l.shape != truth.shape:
        raise DataError("one likelihood per test window is required")
    called_good, called_bad = _decision_masks(l, tau)
    n_cls = int(called_good.sum() + called_bad.sum())
    n = truth.size
    if n_cls == 0:
        log.warning("no window classified at tau=%.2f (zero yield)", tau)
        nan = float("nan")
        correct = mis_good = mis_bad = nan
    else:
        correct = 100.0 * ((called_good & truth).sum() + (called_bad & ~truth).sum()) / n_cls
        mis_good = 100.0 * (called_good & ~truth).sum() / n_cls
        mis_bad = 100.0 * (called_bad & truth).sum() / n_cls
    errs = np.empty(0) if errors is None else np.sort(np.asarray(errors, float)[called_good])
    return ClassificationReport(tau, n, n_cls, float(correct), float(mis_good), float(mis_bad),
                                100.0 * (n - n_cls) / n if n else float("nan"), errs)


def evaluate(model, inputs, truth_good, tau: float, errors=None) -> ClassificationReport:
    return report_from_likelihood(model.likelihood(inputs), truth_good, tau, errors)


def split_indices(n: int, train_fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Random permutation split; the first ``round(train_fraction * n)`` indices train."""
    if not 0 < train_fraction < 1:
        raise ConfigurationError("train fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(train_fraction * n))
    return np.sort(perm[:k]), np.sort(perm[k:])


__all__ = [
    "Algorithm", "TrainConfig", "Standardizer", "SvmModel", "NetModel", "Decision", "Verdict",
    "ClassificationReport", "downsample_trace", "platt_fit", "train_svm", "train_mlp", "train_cnn",
    "train", "decide", "decide_likelihood", "evaluate", "report_from_likelihood", "split_indices",
    "build_module",
]

