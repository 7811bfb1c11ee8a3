"""End-to-end studies: per-package identification with cross-validated
scoring and labelling, window corpora, classifier training and reports.

Everything is a deterministic function of :class:`PipelineConfig` (its seed
included); packages may be processed by a process pool and results are
merged in package order.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .arx import METHODS, ArxModel, IdentDiagnostics, check_q, identify_arrays
from .classify import (TrainConfig, downsample_trace, report_from_likelihood, split_indices, train)
from .errors import ConfigurationError, DataError, ExcitationDeficient, ThermidError
from .features import (Label, LabelThresholds, WindowLabel, deficient_ident_features, ident_feature_names,
                       ident_features, label_window, signal_stats, trace_signal_names, TRACE_STATS)
from .kalman import score_models
from .power import PowerModel, error_fractions, fit_power_model, partition_powers, predict_package
from .synth import WorkloadKind, WorkloadSpec, default_power_truth, gen_thermal_truth, gen_workload, simulate
from .telemetry import ScalingBounds, TelemetryFrame, rescale_metrics

log = logging.getLogger(__name__)

ENV_PREFIX = "THERMID_"
WINDOW_KINDS = ("prbs", "bursty", "job_steps", "sinusoid", "constant", "mixed")
DEFAULT_MIXTURE = "prbs:0.3,job_steps:0.2,sinusoid:0.1,constant:0.15,mixed:0.15,bursty:0.1"
SEPARATION_WINDOW = 21600
CLASSIFIERS = ("svm-trace", "mlp-trace", "cnn-trace", "svm-ident", "mlp-ident")


def parse_mixture(text: str) -> tuple[tuple[str, float], ...]:
    """``"prbs:0.3,constant:0.7"`` -> normalised ``(kind, weight)`` pairs."""
    pairs = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        kind, _, w = item.partition(":")
        kind = kind.strip()
        if kind not in WINDOW_KINDS:
            raise ConfigurationError(f"unknown window kind {kind!r}; choose from {', '.join(WINDOW_KINDS)}")
        try:
            weight = float(w) if w else 1.0
        except ValueError:
            raise ConfigurationError(f"bad weight in mixture item {item!r}") from None
        if weight < 0:
            raise ConfigurationError(f"negative weight in mixture item {item!r}")
        pairs.append((kind, weight))
    total = sum(w for _, w in pairs)
    if not pairs or total <= 0:
        raise ConfigurationError("window mixture needs at least one positive weight")
    return tuple((k, w / total) for k, w in pairs)


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the studies; CLI flags and ``THERMID_*`` variables mirror the fields."""

    out_dir: str = "thermid-out"
    telemetry: str = ""
    seed: int = 0
    workers: int = 1
    # acquisition and windows
    sample_period: float = 2.0
    power_train_days: float = 3.0
    window_len: int = 21600
    window_count: int = 25
    # identification and scoring
    n: int = 2
    q: int = 8
    method: str = "frisch"
    burn_in: int = 60
    # labelling and power-model thresholds
    err_threshold: float = 1.2
    err_std_threshold: float = 1.5
    pole_threshold: float = 0.8
    excl_err: float = 1.5
    excl_err_std: float = 2.0
    power_err_fine: float = 3.23
    power_err_coarse: float = 9.68
    # synthetic packages
    n_packages: int = 12
    n_cores: int = 8
    mixture: str = DEFAULT_MIXTURE
    sigma_w2: float = 0.02
    counter_noise: float = 0.001
    power_noise_w: float = 1.0
    quant_step: float = 1.0
    amplitude: float = 25.0
    # classifiers
    train_fraction: float = 0.8
    taus: str = "0.5,0.8"
    trace_length: int = 2048
    mlp_trace_iterations: int = 3000
    mlp_ident_iterations: int = 3000
    cnn_max_iterations: int = 3000
    min_corpus: int = 200

    def __post_init__(self):
        positive = ["sample_period", "power_train_days", "window_len", "window_count", "n", "q",
                    "err_threshold", "err_std_threshold", "pole_threshold", "excl_err", "excl_err_std",
                    "power_err_fine", "power_err_coarse", "n_packages", "n_cores", "quant_step", "amplitude",
                    "trace_length", "mlp_trace_iterations", "mlp_ident_iterations", "cnn_max_iterations",
                    "workers"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("burn_in", "sigma_w2", "counter_noise", "power_noise_w", "min_corpus"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}")
        if not (self.excl_err > self.err_threshold and self.excl_err_std > self.err_std_threshold):
            raise ConfigurationError("exclusion bands must lie above the good thresholds")
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError("train_fraction must lie in (0, 1)")
        if self.burn_in >= self.window_len:
            raise ConfigurationError("burn_in must be shorter than a window")
        check_q(self.n, self.q, self.n_cores + 1)
        parse_mixture(self.mixture)
        self.tau_values

    @property
    def tau_values(self) -> tuple[float, ...]:
        try:
            taus = tuple(float(t) for t in self.taus.split(",") if t.strip())
        except ValueError:
            raise ConfigurationError(f"bad tau list {self.taus!r}") from None
        if not taus or any(not 0.5 <= t < 1 for t in taus):
            raise ConfigurationError("decision thresholds must lie in [0.5, 1)")
        return taus

    @property
    def thresholds(self) -> LabelThresholds:
        return LabelThresholds(self.err_threshold, self.err_std_threshold, self.pole_threshold,
                               self.excl_err, self.excl_err_std)

    @property
    def power_train_samples(self) -> int:
        return int(round(self.power_train_days * 86400 / self.sample_period))

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in dataclasses.fields(cls)}

    @classmethod
    def from_env(cls, environ=None, **overrides) -> "PipelineConfig":
        """Defaults, then ``THERMID_<FIELD>`` variables, then explicit overrides."""
        environ = os.environ if environ is None else environ
        values: dict[str, Any] = {}
        for name, typ in cls.field_types().items():
            key = ENV_PREFIX + name.upper()
            if key in environ:
                values[name] = _coerce(name, typ, environ[key])
        values.update({k: v for k, v in overrides.items() if v is not None})
        unknown = set(values) - set(cls.field_types())
        if unknown:
            raise ConfigurationError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**values)


def _coerce(name: str, typ: type, raw: str):
    try:
        if typ is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return typ(raw)
    except ValueError:
        raise ConfigurationError(f"{ENV_PREFIX}{name.upper()}={raw!r} is not a valid {typ.__name__}") from None


# -- synthetic packages ------------------------------------------------------------------


def window_workload(kind: str, n_rows: int, duration: int, rng: np.random.Generator,
                    amplitude: float = 25.0) -> np.ndarray:
    """Power rows for one window of a given excitation class.

    ``bursty`` is a fast, shallow PRBS (clock of one or two samples, a few
    watts of swing); ``mixed`` draws prbs, job_steps or constant per row.
    """
    seed = int(rng.integers(1 << 31))
    amp = amplitude
    if kind == "prbs":
        hi = rng.uniform(0.72, 1.0) * amp
        spec = WorkloadSpec(WorkloadKind.PRBS, amplitude=hi, duration=duration,
                            low=rng.uniform(0.08, 0.32) * amp, clock=int(rng.integers(5, 21)))
    elif kind == "bursty":
        lo = rng.uniform(0.12, 0.6) * amp
        spec = WorkloadSpec(WorkloadKind.PRBS, amplitude=lo + rng.uniform(0.08, 0.24) * amp,
                            duration=duration, low=lo, clock=int(rng.integers(1, 3)))
    elif kind == "job_steps":
        spec = WorkloadSpec(WorkloadKind.JOB_STEPS, amplitude=amp, duration=duration, low=0.08 * amp,
                            dwell=(150, 5400))
    elif kind == "sinusoid":
        spec = WorkloadSpec(WorkloadKind.SINUSOID, amplitude=amp, duration=duration, low=0.08 * amp,
                            period=rng.uniform(1800, 7200))
    elif kind == "constant":
        spec = WorkloadSpec(WorkloadKind.CONSTANT, amplitude=amp, duration=duration, low=0.08 * amp)
    elif kind == "mixed":
        rows = [window_workload(str(rng.choice(["prbs", "job_steps", "constant"])), 1, duration, rng, amp)[0]
                for _ in range(n_rows)]
        return np.vstack(rows)
    else:
        raise ConfigurationError(f"unknown window kind {kind!r}")
    return gen_workload(spec, n_rows, seed)


def _package_seed(config: PipelineConfig, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([config.seed, index])


def synth_package(config: PipelineConfig, index: int):
    """Simulate one package: a job-steps power-training span followed by
    ``window_count`` windows whose classes follow ``config.mixture``."""
    ss = _package_seed(config, index)
    s_truth, s_power, s_work, s_sim = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    rng = np.random.default_rng(s_work)
    m = config.n_cores + 1
    truth = gen_thermal_truth(config.n_cores, s_truth, sigma_w2=config.sigma_w2)
    power_truth = default_power_truth(config.n_cores, s_power)
    mixture = parse_mixture(config.mixture)
    kinds_all = [k for k, _ in mixture]
    probs = np.array([w for _, w in mixture])
    kinds = [str(k) for k in rng.choice(kinds_all, size=config.window_count, p=probs)]
    parts = [window_workload("job_steps", m, config.power_train_samples, rng, config.amplitude)]
    parts += [window_workload(k, m, config.window_len, rng, config.amplitude) for k in kinds]
    W = np.hstack(parts)
    ds = simulate(truth, W[1:], config.quant_step, seed=s_sim, power_truth=power_truth,
                  uncore_activity=W[0] / config.amplitude, counter_noise=config.counter_noise,
                  power_noise_w=config.power_noise_w, sample_period=config.sample_period,
                  node=f"synth{index:03d}", socket=0, segment_kinds=("power_train", *kinds))
    return ds


def check_label_separation(config: PipelineConfig, n_truths: int | None = None,
                           window_len: int | None = None, min_fraction: float = 0.95) -> dict[str, float]:
    """Reject generator settings under which PRBS windows are not labelled
    good, or constant windows are labelled good, on more than
    ``1 - min_fraction`` of the cores. Excluded-band labels count as bad,
    as they do at test time.

    For each truth, a PRBS and a constant window are simulated together
    with job-steps and sinusoid validation windows. Every core is identified
    on the first two (through the true power model applied to the jittered
    counters) and scored on all four, as the labelling oracle does.
    """
    n_truths = config.n_packages if n_truths is None else n_truths
    L = SEPARATION_WINDOW if window_len is None else window_len
    good_prbs = bad_const = total = 0
    for i in range(n_truths):
        ss = np.random.SeedSequence([config.seed, i, 7])
        s_truth, s_power, s_work, s_sim = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
        rng = np.random.default_rng(s_work)
        m = config.n_cores + 1
        kinds = ("prbs", "constant", "job_steps", "sinusoid")
        W = np.hstack([window_workload(k, m, L, rng, config.amplitude) for k in kinds])
        truth = gen_thermal_truth(config.n_cores, s_truth, sigma_w2=config.sigma_w2)
        pt = default_power_truth(config.n_cores, s_power)
        ds = simulate(truth, W[1:], config.quant_step, seed=s_sim, power_truth=pt,
                      uncore_activity=W[0] / config.amplitude, counter_noise=config.counter_noise,
                      power_noise_w=config.power_noise_w, sample_period=config.sample_period)
        fr = rescale_metrics(ds.frame, ScalingBounds.nominal())
        inputs = partition_powers(pt, fr).inputs.reshape(m, len(kinds), L).transpose(1, 0, 2)
        temps = fr.core_temps.reshape(config.n_cores, len(kinds), L)
        total += config.n_cores
        for w, want in ((0, Label.GOOD), (1, Label.BAD)):
            cells = _identify_cells(temps[:, w : w + 1], inputs[w : w + 1], config)
            ok = [k for k, c in enumerate(cells) if c[0] is not None]
            mae, std = score_package([cells[k][0] for k in ok], ok, inputs, temps, config.burn_in)
            scores = {k: (mae[j], std[j]) for j, k in enumerate(ok)}
            for k, (_, diag, _) in enumerate(cells):
                lab = label_window(scores.get(k, (math.inf, math.inf)), diag, config.thresholds)
                if want is Label.GOOD:
                    good_prbs += lab.label is Label.GOOD
                else:
                    bad_const += lab.label is not Label.GOOD
    result = {"prbs_good": good_prbs / total, "constant_bad": bad_const / total}
    if result["prbs_good"] < min_fraction or result["constant_bad"] < min_fraction:
        raise ConfigurationError(
            f"generator parameters fail label separation: PRBS good on {result['prbs_good']:.1%}, "
            f"constant bad on {result['constant_bad']:.1%} of cores (need {min_fraction:.0%})")
    return result


def _identify_cells(temps: np.ndarray, inputs: np.ndarray, config: PipelineConfig):
    """``temps`` ``(n_cores, 1, L)`` and ``inputs`` ``(1, m, L)`` of one window."""
    out = []
    for k in range(temps.shape[0]):
        try:
            model, diag = identify_arrays(temps[k, 0], inputs[0], config.n, config.q, core_id=k,
                                          method=config.method)
            out.append((model, diag, "ok"))
        except ExcitationDeficient:
            out.append((None, None, "deficient"))
    return out


# -- identification study ----------------------------------------------------------------


@dataclass
class CellResult:
    """Outcome for one (package, window, core) cell."""

    package: int
    node: str
    socket: int
    window: int
    core: int
    kind: str
    status: str
    message: str = ""
    model: ArxModel | None = None
    diag: IdentDiagnostics | None = None
    mae: float = math.inf
    std: float = math.inf
    label: WindowLabel | None = None
    trace_features: np.ndarray | None = None
    ident_features: np.ndarray | None = None


@dataclass
class PackageResult:
    index: int
    node: str
    socket: int
    power_model: PowerModel
    power_fit: dict[float, float]
    power_eval: dict[float, float]
    cells: list[CellResult]
    traces: np.ndarray | None = None
    n_clamped: int = 0

    @property
    def failures(self) -> list[CellResult]:
        return [c for c in self.cells if c.status == "failed"]


def prepare_package(frame: TelemetryFrame, config: PipelineConfig, power_model: PowerModel | None = None):
    """Rescale, fit (or reuse) the power model and cut the windows.

    Returns ``(rescaled frame, power model, fit fractions, eval fractions,
    inputs (W, m, L), temps (n_cores, W, L), window start, partial powers)``.
    """
    fr = frame if frame.metrics_rescaled else rescale_metrics(frame, ScalingBounds.nominal())
    n_train = config.power_train_samples
    L, W = config.window_len, config.window_count
    if n_train + W * L > fr.n_samples:
        raise DataError(f"package {fr.node}/{fr.socket}: {fr.n_samples} samples cannot hold a "
                        f"{n_train}-sample power-training span and {W} windows of {L}")
    train_fr = fr.slice(0, n_train)
    if power_model is None:
        power_model = fit_power_model([train_fr])
    fit = error_fractions(predict_package(power_model, train_fr), train_fr.pkg_power,
                          (config.power_err_fine, config.power_err_coarse))
    span = fr.slice(n_train, n_train + W * L)
    pp = partition_powers(power_model, span)
    evalf = error_fractions(pp.package, span.pkg_power, (config.power_err_fine, config.power_err_coarse))
    m = pp.n_cores + 1
    inputs = pp.inputs.reshape(m, W, L).transpose(1, 0, 2)
    temps = span.core_temps.reshape(span.n_cores, W, L)
    return fr, power_model, fit, evalf, inputs, temps, n_train, pp, span


def identify_package(inputs: np.ndarray, temps: np.ndarray, config: PipelineConfig
                     ) -> list[tuple[int, int, ArxModel | None, IdentDiagnostics | None, str, str]]:
    """Identify every (window, core); failures are recorded, never raised."""
    out = []
    W = inputs.shape[0]
    for w in range(W):
        for k in range(temps.shape[0]):
            try:
                model, diag = identify_arrays(temps[k, w], inputs[w], config.n, config.q, core_id=k,
                                              method=config.method)
                out.append((w, k, model, diag, "ok", ""))
            except ExcitationDeficient as exc:
                out.append((w, k, None, None, "deficient", str(exc)))
            except (ThermidError, ArithmeticError, np.linalg.LinAlgError) as exc:
                log.warning("window %d core %d failed: %s", w, k, exc)
                out.append((w, k, None, None, "failed", f"{type(exc).__name__}: {exc}"))
    return out


def score_package(models: Sequence[ArxModel], rows: Sequence[int], inputs, temps, burn_in: int):
    if not models:
        return np.empty(0), np.empty(0)
    return score_models(models, temps, inputs, rows, burn_in)


def cell_trace_channels(shared: np.ndarray, temps_row: np.ndarray, core: int) -> np.ndarray:
    """Channels of one core in the trace-feature signal order.

    ``shared`` is ``(C, L)`` with rows ``[pkg_power, uncore, core_0, ...]``
    and ``temps_row`` the core's temperature, ``(L,)``.
    """
    per_core = np.roll(shared[2:], -core, axis=0)
    return np.vstack([shared[0:1], temps_row[None], shared[1:2], per_core])


def trace_feature_matrix(pkg_power: np.ndarray, inputs: np.ndarray, temps: np.ndarray) -> np.ndarray:
    """Trace features of every (window, core) cell, window-major.

    ``pkg_power`` is ``(W, L)``, ``inputs`` ``(W, m, L)`` and ``temps``
    ``(n_cores, W, L)``; rows follow :func:`trace_signal_names` order per cell.
    """
    W, n_cores = inputs.shape[0], temps.shape[0]
    out = []
    for w in range(W):
        shared, _ = signal_stats(np.concatenate([pkg_power[w][None], inputs[w]]))
        tstats, _ = signal_stats(temps[:, w])
        for k in range(n_cores):
            out.append(cell_trace_channels(shared, tstats[k], k).ravel())
    return np.vstack(out)


def trace_tensor(pkg_power: np.ndarray, inputs: np.ndarray, temps: np.ndarray, length: int) -> np.ndarray:
    """Downsampled CNN input of every cell, ``(W * n_cores, n_cores + 3, length)`` float32."""
    W, n_cores = inputs.shape[0], temps.shape[0]
    shared = downsample_trace(np.concatenate([pkg_power[:, None, :], inputs], axis=1), length)
    tds = downsample_trace(temps, length)
    out = np.empty((W * n_cores, n_cores + 3, length), dtype=np.float32)
    for w in range(W):
        for k in range(n_cores):
            out[w * n_cores + k] = cell_trace_channels(shared[w], tds[k, w], k)
    return out


def study_package(frame: TelemetryFrame, config: PipelineConfig, index: int = 0,
                  kinds: Sequence[str] | None = None, keep_traces: bool = True,
                  power_model: PowerModel | None = None) -> PackageResult:
    """Identify, cross-validate, label and featurise every cell of one package."""
    fr, pm, fit, evalf, inputs, temps, start, pp, span = prepare_package(frame, config, power_model)
    W, L, n_cores = config.window_count, config.window_len, fr.n_cores
    kinds = list(kinds) if kinds is not None else ["unknown"] * W
    ident = identify_package(inputs, temps, config)
    ok = [(i, c) for i, c in enumerate(ident) if c[4] == "ok"]
    models = [c[2] for _, c in ok]
    rows = [c[1] for _, c in ok]
    mae, std = score_package(models, rows, inputs, temps, config.burn_in)
    scores = {i: (mae[j], std[j]) for j, (i, _) in enumerate(ok)}

    pkg_power = span.pkg_power.reshape(W, L)
    tfeat = trace_feature_matrix(pkg_power, inputs, temps)
    traces = trace_tensor(pkg_power, inputs, temps, config.trace_length) if keep_traces else None

    cells = []
    for i, (w, k, model, diag, status, msg) in enumerate(ident):
        tf = tfeat[i]
        if status == "ok":
            e, s = scores[i]
            status_i = status if np.isfinite(e) else "failed"
            msg_i = msg if np.isfinite(e) else "Kalman covariance lost positivity during scoring"
            lab = label_window((e, s), diag, config.thresholds)
            feats = ident_features(diag, model).vector
        else:
            e = s = math.inf
            status_i, msg_i = status, msg
            lab = label_window((e, s), None, config.thresholds)
            feats = deficient_ident_features(config.n).vector
        cells.append(CellResult(index, fr.node, fr.socket, w, k, kinds[w], status_i, msg_i, model, diag,
                                float(e), float(s), lab, tf, feats))
    return PackageResult(index, fr.node, fr.socket, pm, fit, evalf, cells, traces, pp.n_clamped)


def _synthetic_worker(args) -> PackageResult:
    config, index, keep_traces = args
    ds = synth_package(config, index)
    return study_package(ds.frame, config, index, ds.segment_kinds[1:], keep_traces)


def _frame_worker(args) -> PackageResult:
    config, index, frame, keep_traces = args
    return study_package(frame, config, index, None, keep_traces)


def _map(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def load_telemetry(config: PipelineConfig) -> list[TelemetryFrame]:
    from .io import read_telemetry_csv

    path = Path(config.telemetry)
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    if not files or not all(f.exists() for f in files):
        raise DataError(f"no telemetry CSV found at {path}")
    frames = []
    for f in files:
        frames += read_telemetry_csv(f, config.sample_period, config.quant_step)
    return frames


@dataclass
class IdentificationStudy:
    config: PipelineConfig
    packages: list[PackageResult]

    @property
    def cells(self) -> list[CellResult]:
        return [c for p in self.packages for c in p.cells]

    @property
    def n_failures(self) -> int:
        return sum(len(p.failures) for p in self.packages)

    def report(self) -> "RunReport":
        return identification_report(self)


def run_identification_study(config: PipelineConfig, frames: Sequence[TelemetryFrame] | None = None,
                             keep_traces: bool = True) -> IdentificationStudy:
    """Identify and score every (core, window) of every package.

    Uses ``frames`` when given, else the telemetry path of ``config``, else
    ``config.n_packages`` synthetic packages (after checking the generator's
    label separation).
    """
    if frames is None and config.telemetry:
        frames = load_telemetry(config)
    if frames is not None:
        items = [(config, i, f, keep_traces) for i, f in enumerate(frames)]
        packages = _map(_frame_worker, items, config.workers)
    else:
        items = [(config, i, keep_traces) for i in range(config.n_packages)]
        packages = _map(_synthetic_worker, items, config.workers)
    study = IdentificationStudy(config, packages)
    if study.n_failures:
        log.warning("%d cell(s) failed; see the status column of the cell report", study.n_failures)
    return study


# -- corpus and classifier study ---------------------------------------------------------


@dataclass
class WindowCorpus:
    """Flat per-cell view of an identification study, ready for classifiers."""

    keys: list[tuple[int, int, int]]
    kinds: list[str]
    labels: np.ndarray
    mae: np.ndarray
    std: np.ndarray
    max_pole: np.ndarray
    log10_cond: np.ndarray
    trace_features: np.ndarray
    ident_features: np.ndarray
    trace_names: list[str]
    ident_names: list[str]
    traces: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def is_good(self) -> np.ndarray:
        return self.labels == Label.GOOD.value

    @property
    def n_labeled(self) -> int:
        return int(np.sum(self.labels != Label.EXCLUDED.value))

    def inputs_for(self, name: str) -> np.ndarray:
        if name.endswith("-ident"):
            return self.ident_features
        if name == "cnn-trace":
            if self.traces is None:
                raise DataError("corpus was built without traces; the CNN needs them")
            return self.traces
        return self.trace_features


def build_corpus(study: IdentificationStudy) -> WindowCorpus:
    cells = study.cells
    if not cells:
        raise DataError("identification study produced no cells")
    n_cores = max(c.core for c in cells) + 1
    ident_idx = ident_feature_names(study.config.n).index("log10_cond_r")
    traces = None
    if all(p.traces is not None for p in study.packages):
        traces = np.concatenate([p.traces for p in study.packages])
    return WindowCorpus(
        keys=[(c.package, c.window, c.core) for c in cells],
        kinds=[c.kind for c in cells],
        labels=np.array([c.label.label.value for c in cells]),
        mae=np.array([c.mae for c in cells]),
        std=np.array([c.std for c in cells]),
        max_pole=np.array([c.label.max_pole_modulus for c in cells]),
        log10_cond=np.array([c.ident_features[ident_idx] for c in cells]),
        trace_features=np.vstack([c.trace_features for c in cells]),
        ident_features=np.vstack([c.ident_features for c in cells]),
        trace_names=[f"{s}.{f}" for s in trace_signal_names(n_cores) for f in TRACE_STATS],
        ident_names=ident_feature_names(study.config.n),
        traces=traces,
    )


def classifier_config(name: str, config: PipelineConfig) -> TrainConfig:
    seed = config.seed
    if name.startswith("svm"):
        return TrainConfig.svm(seed=seed)
    if name == "mlp-trace":
        return TrainConfig.mlp_trace(seed=seed, max_iterations=config.mlp_trace_iterations)
    if name == "mlp-ident":
        return TrainConfig.mlp_ident(seed=seed, max_iterations=config.mlp_ident_iterations)
    if name == "cnn-trace":
        return TrainConfig.cnn_trace(seed=seed, max_iterations=config.cnn_max_iterations)
    raise ConfigurationError(f"unknown classifier {name!r}; choose from {', '.join(CLASSIFIERS)}")


@dataclass
class ClassifierStudy:
    config: PipelineConfig
    train_idx: np.ndarray
    test_idx: np.ndarray
    models: dict[str, Any]
    likelihoods: dict[str, np.ndarray]
    reports: dict[tuple[str, float], Any]
    iterations: dict[str, int] = field(default_factory=dict)

    def report(self) -> "RunReport":
        return classification_report(self)


def corpus_split(corpus: WindowCorpus, config: PipelineConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """80/20 (by default) random split of all cells; exclusion-band cells
    are dropped from the training part only. Returns (train_used, train, test)."""
    if corpus.n_labeled < config.min_corpus:
        raise DataError(f"corpus has {corpus.n_labeled} labelled windows, fewer than {config.min_corpus}; "
                        "add packages (n_packages) or windows (window_count) and rerun the study")
    train_idx, test_idx = split_indices(len(corpus), config.train_fraction, config.seed)
    used = train_idx[corpus.labels[train_idx] != Label.EXCLUDED.value]
    return used, train_idx, test_idx


def run_classifier_study(config: PipelineConfig, corpus: WindowCorpus,
                         names: Sequence[str] = CLASSIFIERS) -> ClassifierStudy:
    """Train the requested classifiers and evaluate each at every decision threshold.

    Test-set windows keep their hard label (excluded counts as not good).
    """
    used, train_idx, test_idx = corpus_split(corpus, config)
    y = corpus.is_good.astype(int)
    models, lik, reports, iters = {}, {}, {}, {}
    for name in names:
        cfg = classifier_config(name, config)
        X = corpus.inputs_for(name)
        log.info("training %s on %d windows", name, used.size)
        model = train(cfg, X[used], y[used])
        models[name] = model
        iters[name] = len(getattr(model, "history", [])) or 1
        lik[name] = model.likelihood(X[test_idx])
        for tau in config.tau_values:
            reports[(name, tau)] = report_from_likelihood(lik[name], corpus.is_good[test_idx], tau,
                                                          corpus.mae[test_idx])
    return ClassifierStudy(config, train_idx, test_idx, models, lik, reports, iters)


# -- reports -----------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class RunReport:
    """Named tables (header, rows) plus the plots drawn from them."""

    tables: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)
    plots: dict[str, Callable[["RunReport", Path], None]] = field(default_factory=dict)

    def merge(self, other: "RunReport") -> "RunReport":
        return RunReport({**self.tables, **other.tables}, {**self.plots, **other.plots})

    def write(self, out_dir, plots: bool = True) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, (header, rows) in self.tables.items():
            p = out / f"{name}.csv"
            with p.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows([[_cell(v) for v in row] for row in rows])
            paths.append(p)
        if plots:
            for name, draw in self.plots.items():
                p = out / f"{name}.svg"
                draw(self, p)
                paths.append(p)
        return paths

    def column(self, table: str, name: str) -> list:
        header, rows = self.tables[table]
        j = header.index(name)
        return [r[j] for r in rows]


def cell_rows(cells: Sequence[CellResult], n: int) -> tuple[list[str], list[list]]:
    names = ident_feature_names(n)
    header = ["package", "node", "socket", "window", "core", "kind", "status", "mean_err", "err_std",
              "label", "max_pole_modulus", "poles_real_stable", *names, "message"]
    rows = []
    for c in cells:
        lab = c.label
        rows.append([c.package, c.node, c.socket, c.window, c.core, c.kind, c.status, c.mae, c.std,
                     lab.label.value, lab.max_pole_modulus, lab.poles_real_stable,
                     *[float(v) for v in c.ident_features], c.message.replace("\n", " ")])
    return header, rows


def identification_report(study: IdentificationStudy) -> RunReport:
    from . import plots

    rep = RunReport()
    rep.tables["cells"] = cell_rows(study.cells, study.config.n)
    win_rows = []
    for p in study.packages:
        by_w: dict[int, list[CellResult]] = {}
        for c in p.cells:
            by_w.setdefault(c.window, []).append(c)
        for w, cs in sorted(by_w.items()):
            errs = np.array([c.mae for c in cs])
            fin = errs[np.isfinite(errs)]
            win_rows.append([p.index, p.node, p.socket, w, cs[0].kind,
                             float(fin.mean()) if fin.size else math.inf, int(fin.size),
                             sum(c.label.label is Label.GOOD for c in cs),
                             sum(c.label.label is Label.BAD for c in cs),
                             sum(c.label.label is Label.EXCLUDED for c in cs)])
    rep.tables["window_errors"] = (["package", "node", "socket", "window", "kind", "mean_err_cores",
                                    "n_scored", "n_good", "n_bad", "n_excluded"], win_rows)
    fine, coarse = study.config.power_err_fine, study.config.power_err_coarse
    rep.tables["power_fit"] = (
        ["package", "node", "socket", f"train_within_{fine}W", f"train_within_{coarse}W",
         f"windows_within_{fine}W", f"windows_within_{coarse}W", "n_clamped"],
        [[p.index, p.node, p.socket, p.power_fit[fine], p.power_fit[coarse], p.power_eval[fine],
          p.power_eval[coarse], p.n_clamped] for p in study.packages])
    rep.tables["pole_cond_summary"] = pole_cond_summary(build_corpus_light(study))
    rep.plots["window_errors"] = plots.plot_window_errors
    rep.plots["pole_cond"] = plots.plot_pole_cond
    return rep


def build_corpus_light(study: IdentificationStudy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cells = study.cells
    idx = ident_feature_names(study.config.n).index("log10_cond_r")
    return (np.array([c.label.label.value for c in cells]),
            np.array([c.label.max_pole_modulus for c in cells]),
            np.array([c.ident_features[idx] if c.status == "ok" else np.nan for c in cells]))


def pole_cond_summary(arrays) -> tuple[list[str], list[list]]:
    """Mean/std of the max pole modulus and median log10 cond(R) per label,
    over cells with an identified model."""
    labels, max_pole, log_cond = arrays
    rows = []
    for lab in (Label.GOOD.value, Label.BAD.value, Label.EXCLUDED.value):
        sel = (labels == lab) & np.isfinite(max_pole)
        rows.append([lab, int(sel.sum()),
                     float(np.mean(max_pole[sel])) if sel.any() else math.nan,
                     float(np.std(max_pole[sel])) if sel.any() else math.nan,
                     float(np.median(log_cond[sel])) if sel.any() else math.nan])
    return ["label", "n_identified", "max_pole_mean", "max_pole_std", "log10_cond_median"], rows


def classification_report(study: ClassifierStudy) -> RunReport:
    from . import plots

    rep = RunReport()
    rows, ecdf_rows = [], []
    for (name, tau), r in study.reports.items():
        rows.append([name, tau, r.n_test, r.n_classified, r.correct_pct, r.misclassified_good_pct,
                     r.misclassified_bad_pct, r.unclassified_pct, study.iterations.get(name, 0)])
        errs, prob = r.ecdf()
        ecdf_rows += [[name, tau, i, e, p] for i, (e, p) in enumerate(zip(errs, prob))]
    rep.tables["classification"] = (["model", "tau", "n_test", "n_classified", "correct_pct",
                                     "misclassified_good_pct", "misclassified_bad_pct", "unclassified_pct",
                                     "iterations"], rows)
    rep.tables["good_error_ecdf"] = (["model", "tau", "rank", "mean_err", "ecdf"], ecdf_rows)
    rep.plots["good_error_ecdf"] = plots.plot_ecdf
    return rep
