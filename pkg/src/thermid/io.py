"""Telemetry CSV exchange and the model file format.

Telemetry files are long-format CSV, one row per (timestamp, core), keyed by
header so column order is free. Per-package columns repeat on every core row.

Model files are a one-line JSON header (format, version, payload length and
SHA-256) followed by a JSON payload in which arrays are stored as base64 raw
little-endian bytes, so floats round-trip exactly.
"""

from __future__ import annotations

import base64
import csv
import dataclasses
import hashlib
import json
from collections import defaultdict
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch

from .arx import ArxModel
from .classify import NetModel, Standardizer, SvmModel, TrainConfig, build_module
from .errors import ChecksumError, DataError, ModelFormatError, SchemaError, UnsupportedVersionError
from .power import PowerModel
from .telemetry import MetricKind, TelemetryFrame

TELEMETRY_COLUMNS = (
    "ts_epoch_s", "node", "socket", "core", "freq_c0_mhz", "pkg_freq_c0_mhz",
    "one_minus_c0_pkg", "pkg_power_w", "core_temp_c",
)
_NUMERIC = ("ts_epoch_s", "freq_c0_mhz", "pkg_freq_c0_mhz", "one_minus_c0_pkg", "pkg_power_w", "core_temp_c")
_PKG_COLUMNS = ("pkg_freq_c0_mhz", "one_minus_c0_pkg", "pkg_power_w")

FORMAT_NAME = "thermid-models"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_telemetry_csv(frames: TelemetryFrame | Iterable[TelemetryFrame], path) -> Path:
    """Export one or more package frames; metrics are written in whatever
    units the frames hold (native units for an unscaled frame)."""
    if isinstance(frames, TelemetryFrame):
        frames = [frames]
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(TELEMETRY_COLUMNS) + "\n")
        for fr in frames:
            core_m = fr.core_metrics[MetricKind.CORE_FREQ_C0]
            pkg_f = fr.pkg_metrics[MetricKind.PKG_FREQ_C0]
            idle = fr.pkg_metrics[MetricKind.ONE_MINUS_C0_PKG]
            lines = []
            for t in range(fr.n_samples):
                tail = f"{_fmt(pkg_f[t])},{_fmt(idle[t])},{_fmt(fr.pkg_power[t])}"
                ts = _fmt(fr.timestamps[t])
                for k in range(fr.n_cores):
                    lines.append(f"{ts},{fr.node},{fr.socket},{k},{_fmt(core_m[k, t])},{tail},"
                                 f"{_fmt(fr.core_temps[k, t])}\n")
            fh.writelines(lines)
    return path


def read_telemetry_csv(path, sample_period: float | None = None, quant_step: float = 1.0) -> list[TelemetryFrame]:
    """Parse a telemetry CSV into one frame per (node, socket), sorted by key.

    Every timestamp must carry one row per core, timestamps must increase
    along the file for each core, and per-package columns must agree across
    the core rows of a timestamp. Violations raise :class:`DataError`
    naming line numbers.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing = [c for c in TELEMETRY_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        pos = {c: header.index(c) for c in TELEMETRY_COLUMNS}
        groups: dict[tuple[str, int], list] = defaultdict(list)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                vals = [float(row[pos[c]]) for c in _NUMERIC]
                key = (row[pos["node"]].strip(), int(row[pos["socket"]]))
                core = int(row[pos["core"]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            groups[key].append((lineno, core, vals))

    frames = []
    for (node, socket), rows in sorted(groups.items()):
        frames.append(_frame_from_rows(path, node, socket, rows, sample_period, quant_step))
    if not frames:
        raise DataError(f"{path}: no data rows")
    return frames


def _frame_from_rows(path, node, socket, rows, sample_period, quant_step) -> TelemetryFrame:
    lines = np.array([r[0] for r in rows])
    cores = np.array([r[1] for r in rows])
    vals = np.array([r[2] for r in rows])
    ids = np.unique(cores)
    n_cores = ids.size
    if not np.array_equal(ids, np.arange(n_cores)):
        raise DataError(f"{path}: package {node}/{socket} has core ids {ids.tolist()}, expected 0..{n_cores - 1}")
    ts = vals[:, 0]
    for k in range(n_cores):
        sel = cores == k
        d = np.diff(ts[sel])
        bad = np.nonzero(d <= 0)[0]
        if bad.size:
            kind = "duplicate" if np.any(d[bad] == 0) else "non-monotone"
            where = ", ".join(str(x) for x in lines[sel][bad + 1][:5])
            raise DataError(f"{path}: {kind} timestamps for {node}/{socket} core {k} at line(s) {where}")
    counts = np.bincount(cores, minlength=n_cores)
    if np.any(counts != counts[0]):
        raise DataError(f"{path}: package {node}/{socket} has unequal row counts per core {counts.tolist()}")
    order = np.lexsort((cores, ts))
    grid = vals[order].reshape(counts[0], n_cores, -1)
    times = grid[:, 0, 0]
    if np.any(grid[:, :, 0] != times[:, None]):
        raise DataError(f"{path}: package {node}/{socket} has timestamps missing for some cores")
    col = {c: i for i, c in enumerate(_NUMERIC)}
    for c in _PKG_COLUMNS:
        block = grid[:, :, col[c]]
        if np.any(block != block[:, :1]):
            t_bad = times[np.nonzero(np.any(block != block[:, :1], axis=1))[0][0]]
            raise DataError(f"{path}: {c} differs between core rows at ts {t_bad!r}")
    temps = grid[:, :, col["core_temp_c"]].T
    period = sample_period
    if period is None:
        period = float(np.median(np.diff(times))) if times.size > 1 else 2.0
    quantized = bool(np.all(np.abs(temps / quant_step - np.round(temps / quant_step)) <= 1e-9))
    return TelemetryFrame(
        timestamps=times,
        core_metrics={MetricKind.CORE_FREQ_C0: grid[:, :, col["freq_c0_mhz"]].T},
        pkg_metrics={MetricKind.PKG_FREQ_C0: grid[:, 0, col["pkg_freq_c0_mhz"]],
                     MetricKind.ONE_MINUS_C0_PKG: grid[:, 0, col["one_minus_c0_pkg"]]},
        pkg_power=grid[:, 0, col["pkg_power_w"]],
        core_temps=temps,
        sample_period=period,
        temps_quantized=quantized,
        quant_step=quant_step,
        node=node,
        socket=socket,
    )


def ingest_csv(path, node: str | None = None, socket: int | None = None, **kw) -> TelemetryFrame:
    """The single package in ``path`` (or the one matching ``node``/``socket``)."""
    frames = read_telemetry_csv(path, **kw)
    if node is not None or socket is not None:
        frames = [f for f in frames if (node is None or f.node == node) and (socket is None or f.socket == socket)]
    if len(frames) != 1:
        raise DataError(f"{path}: {len(frames)} matching packages; pass node/socket to select one")
    return frames[0]


# -- model serialization -----------------------------------------------------------------


def _enc_array(a) -> dict:
    a = np.ascontiguousarray(a)
    if a.dtype.kind == "c":
        a = a.astype("<c16")
    elif a.dtype.kind == "f":
        a = a.astype("<f" + str(a.dtype.itemsize))
    elif a.dtype.kind in "iu":
        a = a.astype("<i8")
    return {"__array__": a.dtype.str, "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode()}


def _dec_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["__array__"])).reshape(d["shape"]).copy()


def _config_dict(cfg: TrainConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["algorithm"] = cfg.algorithm.value
    out["hidden"] = list(cfg.hidden)
    out["betas"] = list(cfg.betas)
    return out


def _config_from(d: dict) -> TrainConfig:
    d = dict(d)
    d["hidden"] = tuple(d["hidden"])
    d["betas"] = tuple(d["betas"])
    return TrainConfig(**d)


def _encode(obj) -> Any:
    if isinstance(obj, PowerModel):
        return {"__type__": "PowerModel", "alpha": _enc_array(obj.alpha), "beta": _enc_array(obj.beta),
                "intercept": obj.intercept, "n_cores": obj.n_cores,
                "uncore_metrics": [m.value for m in obj.uncore_metrics],
                "core_metrics": [m.value for m in obj.core_metrics]}
    if isinstance(obj, ArxModel):
        return {"__type__": "ArxModel", "a": _enc_array(obj.a), "b": _enc_array(obj.b),
                "sigma_w2": obj.sigma_w2, "sigma_v2": obj.sigma_v2, "offset": obj.offset,
                "core_id": obj.core_id}
    if isinstance(obj, Standardizer):
        return {"__type__": "Standardizer", "mean": _enc_array(obj.mean), "scale": _enc_array(obj.scale)}
    if isinstance(obj, SvmModel):
        return {"__type__": "SvmModel", "support_vectors": _enc_array(obj.support_vectors),
                "dual_coef": _enc_array(obj.dual_coef), "intercept": obj.intercept, "gamma": obj.gamma,
                "platt_a": obj.platt_a, "platt_b": obj.platt_b, "standardizer": _encode(obj.standardizer),
                "config": _config_dict(obj.config), "input_kind": obj.input_kind}
    if isinstance(obj, NetModel):
        state = {k: _enc_array(v.detach().cpu().numpy()) for k, v in obj.module.state_dict().items()}
        return {"__type__": "NetModel", "state": state, "standardizer": _encode(obj.standardizer),
                "config": _config_dict(obj.config), "n_inputs": obj.n_inputs,
                "history": list(obj.history)}
    if isinstance(obj, np.ndarray):
        return _enc_array(obj)
    if isinstance(obj, dict):
        return {"__type__": "dict", "items": [[str(k), _encode(v)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return {"__type__": "list", "items": [_encode(v) for v in obj]}
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if obj is None or isinstance(obj, (str, int, float, bool)):
        return obj
    raise ModelFormatError(f"cannot serialize objects of type {type(obj).__name__}")


def _decode(d) -> Any:
    if not isinstance(d, dict):
        return d
    if "__array__" in d:
        return _dec_array(d)
    t = d.get("__type__")
    if t == "dict":
        return {k: _decode(v) for k, v in d["items"]}
    if t == "list":
        return [_decode(v) for v in d["items"]]
    if t == "PowerModel":
        return PowerModel(alpha=_dec_array(d["alpha"]), beta=_dec_array(d["beta"]), intercept=d["intercept"],
                          n_cores=d["n_cores"], uncore_metrics=tuple(MetricKind(m) for m in d["uncore_metrics"]),
                          core_metrics=tuple(MetricKind(m) for m in d["core_metrics"]))
    if t == "ArxModel":
        return ArxModel(a=_dec_array(d["a"]), b=_dec_array(d["b"]), sigma_w2=d["sigma_w2"],
                        sigma_v2=d["sigma_v2"], offset=d["offset"], core_id=d["core_id"])
    if t == "Standardizer":
        return Standardizer(_dec_array(d["mean"]), _dec_array(d["scale"]))
    if t == "SvmModel":
        return SvmModel(support_vectors=_dec_array(d["support_vectors"]), dual_coef=_dec_array(d["dual_coef"]),
                        intercept=d["intercept"], gamma=d["gamma"], platt_a=d["platt_a"], platt_b=d["platt_b"],
                        standardizer=_decode(d["standardizer"]), config=_config_from(d["config"]),
                        input_kind=d["input_kind"])
    if t == "NetModel":
        cfg = _config_from(d["config"])
        module = build_module(cfg, d["n_inputs"])
        module.load_state_dict({k: torch.from_numpy(_dec_array(v)) for k, v in d["state"].items()})
        return NetModel(module.eval(), _decode(d["standardizer"]), cfg, d["n_inputs"], list(d["history"]))
    raise ModelFormatError(f"unknown record type {t!r}")


def serialize_models(models, path) -> Path:
    """Write models (a single model, list or str-keyed dict, nested freely)."""
    payload = json.dumps(_encode(models), separators=(",", ":"), sort_keys=True).encode()
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "length": len(payload),
              "sha256": hashlib.sha256(payload).hexdigest()}
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    return path


def load_models(path):
    raw = Path(path).read_bytes()
    head, sep, payload = raw.partition(b"\n")
    try:
        header = json.loads(head)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise ModelFormatError(f"{path}: unreadable header") from None
    if not sep or not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"{path}: not a {FORMAT_NAME} file")
    version = header.get("version")
    if version not in SUPPORTED_VERSIONS:
        raise UnsupportedVersionError(f"{path}: format version {version!r} is not supported "
                                      f"(this build reads {list(SUPPORTED_VERSIONS)})")
    if len(payload) != header.get("length") or hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise ChecksumError(f"{path}: payload length or checksum mismatch (truncated or corrupted file)")
    return _decode(json.loads(payload))


__all__ = [
    "TELEMETRY_COLUMNS", "write_telemetry_csv", "read_telemetry_csv", "ingest_csv",
    "serialize_models", "load_models", "FORMAT_VERSION",
]
