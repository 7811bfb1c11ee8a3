"""Command-line stages of the identification and classifier studies.

Every stage reads and writes files under ``--out-dir`` so a run can be
resumed from any stage::

    out/telemetry/*.csv        synth (or your own telemetry, --telemetry)
    out/power/                 fit-power
    out/ident/                 identify
    out/score/                 score
    out/label/                 label
    out/classify/              train-classifier
    out/evaluate/              evaluate
    out/report/                report (CSV tables and SVG plots)

Flags mirror :class:`~thermid.pipeline.PipelineConfig`; ``THERMID_<FIELD>``
environment variables override defaults and flags override both.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 completed
with recorded cell failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import pipeline as pl
from .errors import ConfigurationError, DataError, ThermidError
from .features import (TRACE_STATS, Label, deficient_ident_features, ident_feature_names, ident_features,
                       label_window, trace_signal_names)
from .io import load_models, read_telemetry_csv, serialize_models, write_telemetry_csv

log = logging.getLogger("thermid")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FAILURES = 0, 2, 3, 4
STUDY_COMMANDS = ("synth", "identify", "score", "label", "train-classifier", "evaluate")


class CellFailures(Exception):
    """A stage completed but recorded failing cells."""


def _key(node: str, socket, window=None, core=None) -> str:
    parts = [str(node), str(socket)] + [str(x) for x in (window, core) if x is not None]
    return "/".join(parts)


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    if not path.exists():
        raise DataError(f"{path} not found; run the stage that produces it first")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _dicts(path: Path) -> list[dict[str, str]]:
    header, rows = _read_csv(path)
    return [dict(zip(header, r)) for r in rows]


def _models(path: Path, stage: str):
    if not path.exists():
        raise DataError(f"{path} not found; run `thermid {stage}` first")
    return load_models(path)


def _write(report: pl.RunReport, out: Path, plots: bool = False) -> None:
    for p in report.write(out, plots=plots):
        log.info("wrote %s", p)


# -- package iteration ---------------------------------------------------------------------


def _telemetry_files(cfg: pl.PipelineConfig) -> list[Path]:
    path = Path(cfg.telemetry) if cfg.telemetry else Path(cfg.out_dir) / "telemetry"
    files = sorted(f for f in path.glob("*.csv") if f.name != "segments.csv") if path.is_dir() else [path]
    if not files or not all(f.exists() for f in files):
        raise DataError(f"no telemetry CSV at {path}; run `thermid synth` or pass --telemetry")
    return files


def _packages(cfg: pl.PipelineConfig):
    """Yield ``(index, frame)`` over every package of the telemetry, in file/key order."""
    index = 0
    for f in _telemetry_files(cfg):
        for frame in read_telemetry_csv(f, cfg.sample_period, cfg.quant_step):
            yield index, frame
            index += 1


def _segment_kinds(cfg: pl.PipelineConfig) -> dict[str, list[str]]:
    path = Path(cfg.out_dir) / "telemetry" / "segments.csv"
    if cfg.telemetry or not path.exists():
        return {}
    out: dict[str, list[str]] = {}
    for r in _dicts(path):
        if r["kind"] != "power_train":
            out.setdefault(_key(r["node"], r["socket"]), []).append(r["kind"])
    return out


def _prepared(cfg: pl.PipelineConfig):
    """Yield ``(index, frame, prepared)`` using the stored power models."""
    models = _models(Path(cfg.out_dir) / "power" / "models.thm", "fit-power")
    for index, frame in _packages(cfg):
        key = _key(frame.node, frame.socket)
        if key not in models:
            raise DataError(f"no power model for package {key}; rerun fit-power")
        yield index, frame, pl.prepare_package(frame, cfg, models[key])


# -- stages -------------------------------------------------------------------------------


def cmd_synth(cfg: pl.PipelineConfig, args) -> None:
    pl.check_label_separation(cfg)
    out = Path(cfg.out_dir) / "telemetry"
    out.mkdir(parents=True, exist_ok=True)
    seg_rows, truths = [], {}
    for i in range(cfg.n_packages):
        ds = pl.synth_package(cfg, i)
        fr = ds.frame
        write_telemetry_csv(fr, out / f"{fr.node}_s{fr.socket}.csv")
        start = 0
        for j, kind in enumerate(ds.segment_kinds):
            length = cfg.power_train_samples if j == 0 else cfg.window_len
            seg_rows.append([fr.node, fr.socket, j, kind, start, length])
            start += length
        truths[_key(fr.node, fr.socket)] = {"thermal": list(ds.truth.models), "power": ds.power_truth}
        log.info("package %s: %d samples", fr.node, fr.n_samples)
    rep = pl.RunReport({"segments": (["node", "socket", "segment", "kind", "start", "length"], seg_rows)})
    _write(rep, out)
    serialize_models(truths, Path(cfg.out_dir) / "truth.thm")


def cmd_fit_power(cfg: pl.PipelineConfig, args) -> None:
    out = Path(cfg.out_dir) / "power"
    out.mkdir(parents=True, exist_ok=True)
    models, rows = {}, []
    for index, frame in _packages(cfg):
        fr, pm, fit, evalf, *_ = pl.prepare_package(frame, cfg, None)
        models[_key(fr.node, fr.socket)] = pm
        rows.append([index, fr.node, fr.socket, fit[cfg.power_err_fine], fit[cfg.power_err_coarse],
                     evalf[cfg.power_err_fine], evalf[cfg.power_err_coarse]])
    serialize_models(models, out / "models.thm")
    header = ["package", "node", "socket", f"train_within_{cfg.power_err_fine}W",
              f"train_within_{cfg.power_err_coarse}W", f"windows_within_{cfg.power_err_fine}W",
              f"windows_within_{cfg.power_err_coarse}W"]
    _write(pl.RunReport({"power_fit": (header, rows)}), out)


def cmd_identify(cfg: pl.PipelineConfig, args) -> None:
    out = Path(cfg.out_dir) / "ident"
    out.mkdir(parents=True, exist_ok=True)
    kinds = _segment_kinds(cfg)
    names = ident_feature_names(cfg.n)
    models, rows, n_failed = {}, [], 0
    for index, frame, prep in _prepared(cfg):
        cells = pl.identify_package(prep[4], prep[5], cfg)
        k_list = kinds.get(_key(frame.node, frame.socket), ["unknown"] * cfg.window_count)
        for w, k, model, diag, status, msg in cells:
            if model is not None:
                models[_key(frame.node, frame.socket, w, k)] = model
                feats = ident_features(diag, model).vector
            else:
                feats = deficient_ident_features(cfg.n).vector
            n_failed += status == "failed"
            rows.append([index, frame.node, frame.socket, w, k, k_list[w], status,
                         *[float(v) for v in feats], msg.replace("\n", " ")])
    serialize_models(models, out / "models.thm")
    header = ["package", "node", "socket", "window", "core", "kind", "status", *names, "message"]
    _write(pl.RunReport({"cells": (header, rows)}), out)
    if n_failed:
        raise CellFailures(f"{n_failed} cell(s) failed identification; see {out / 'cells.csv'}")


def cmd_score(cfg: pl.PipelineConfig, args) -> None:
    out = Path(cfg.out_dir) / "score"
    out.mkdir(parents=True, exist_ok=True)
    models = _models(Path(cfg.out_dir) / "ident" / "models.thm", "identify")
    rows, n_failed = [], 0
    for index, frame, prep in _prepared(cfg):
        inputs, temps = prep[4], prep[5]
        cells = [(w, k) for w in range(cfg.window_count) for k in range(frame.n_cores)]
        have = [(w, k) for w, k in cells if _key(frame.node, frame.socket, w, k) in models]
        mae, std = pl.score_package([models[_key(frame.node, frame.socket, w, k)] for w, k in have],
                                    [k for _, k in have], inputs, temps, cfg.burn_in)
        scores = dict(zip(have, zip(mae, std)))
        for w, k in cells:
            e, s = scores.get((w, k), (math.inf, math.inf))
            n_failed += (w, k) in scores and not np.isfinite(e)
            rows.append([index, frame.node, frame.socket, w, k, float(e), float(s)])
    header = ["package", "node", "socket", "window", "core", "mean_err", "err_std"]
    _write(pl.RunReport({"scores": (header, rows)}), out)
    if n_failed:
        raise CellFailures(f"{n_failed} model(s) failed during Kalman scoring; see {out / 'scores.csv'}")


def cmd_label(cfg: pl.PipelineConfig, args) -> None:
    out = Path(cfg.out_dir) / "label"
    out.mkdir(parents=True, exist_ok=True)
    cells = _dicts(Path(cfg.out_dir) / "ident" / "cells.csv")
    scores = {(r["package"], r["window"], r["core"]): r for r in _dicts(Path(cfg.out_dir) / "score" / "scores.csv")}
    models = _models(Path(cfg.out_dir) / "ident" / "models.thm", "identify")
    names = ident_feature_names(cfg.n)
    tfeat = {}
    n_cores = None
    for index, frame, prep in _prepared(cfg):
        span = prep[8]
        pkg = span.pkg_power.reshape(cfg.window_count, cfg.window_len)
        tfeat[index] = pl.trace_feature_matrix(pkg, prep[4], prep[5])
        n_cores = frame.n_cores
    if n_cores is None:
        raise DataError("no packages found")
    lab_rows, tf_rows, if_rows = [], [], []
    for c in cells:
        pkg, w, k = int(c["package"]), int(c["window"]), int(c["core"])
        sc = scores.get((c["package"], c["window"], c["core"]))
        if sc is None:
            raise DataError(f"no score for package {pkg} window {w} core {k}; rerun score")
        e, s = float(sc["mean_err"]), float(sc["err_std"])
        model = models.get(_key(c["node"], c["socket"], w, k))
        status = c["status"]
        if model is not None and not np.isfinite(e):
            status = "failed"
        diag = SimpleNamespace(poles=model.poles()) if model is not None else None
        lab = label_window((e, s), diag, cfg.thresholds)
        meta = [pkg, c["node"], c["socket"], w, k, c["kind"], status]
        lab_rows.append([*meta, e, s, lab.label.value, lab.max_pole_modulus, lab.poles_real_stable])
        tf_rows.append([*meta, lab.label.value, *tfeat[pkg][w * n_cores + k]])
        if_rows.append([*meta, lab.label.value, *[float(c[n]) for n in names]])
    meta_h = ["package", "node", "socket", "window", "core", "kind", "status"]
    trace_names = [f"{s}.{f}" for s in trace_signal_names(n_cores) for f in TRACE_STATS]
    rep = pl.RunReport({
        "labels": ([*meta_h, "mean_err", "err_std", "label", "max_pole_modulus", "poles_real_stable"], lab_rows),
        "trace_features": ([*meta_h, "label", *trace_names], tf_rows),
        "ident_features": ([*meta_h, "label", *names], if_rows),
    })
    _write(rep, out)


def corpus_from_files(cfg: pl.PipelineConfig, with_traces: bool = False) -> pl.WindowCorpus:
    """Rebuild the window corpus from the label stage's CSVs."""
    d = Path(cfg.out_dir) / "label"
    labels = _dicts(d / "labels.csv")
    th, trows = _read_csv(d / "trace_features.csv")
    ih, irows = _read_csv(d / "ident_features.csv")
    n_meta = 8
    names = ident_feature_names(cfg.n)
    ident = np.array([[float(v) for v in r[n_meta:]] for r in irows])
    traces = None
    if with_traces:
        parts = []
        for _, _, prep in _prepared(cfg):
            span = prep[8]
            pkg = span.pkg_power.reshape(cfg.window_count, cfg.window_len)
            parts.append(pl.trace_tensor(pkg, prep[4], prep[5], cfg.trace_length))
        traces = np.concatenate(parts)
        if len(traces) != len(labels):
            raise DataError("telemetry does not match the labelled cells; rerun the earlier stages")
    return pl.WindowCorpus(
        keys=[(int(r["package"]), int(r["window"]), int(r["core"])) for r in labels],
        kinds=[r["kind"] for r in labels],
        labels=np.array([r["label"] for r in labels]),
        mae=np.array([float(r["mean_err"]) for r in labels]),
        std=np.array([float(r["err_std"]) for r in labels]),
        max_pole=np.array([float(r["max_pole_modulus"]) for r in labels]),
        log10_cond=ident[:, names.index("log10_cond_r")],
        trace_features=np.array([[float(v) for v in r[n_meta:]] for r in trows]),
        ident_features=ident,
        trace_names=th[n_meta:],
        ident_names=ih[n_meta:],
        traces=traces,
    )


def _selected(args) -> list[str]:
    return list(pl.CLASSIFIERS) if args.model == "all" else [args.model]


def cmd_train_classifier(cfg: pl.PipelineConfig, args) -> None:
    from .classify import train

    names = _selected(args)
    corpus = corpus_from_files(cfg, with_traces="cnn-trace" in names)
    used, train_idx, test_idx = pl.corpus_split(corpus, cfg)
    out = Path(cfg.out_dir) / "classify"
    out.mkdir(parents=True, exist_ok=True)
    part = np.full(len(corpus), "test", dtype=object)
    part[train_idx] = "train"
    in_use = np.zeros(len(corpus), bool)
    in_use[used] = True
    split_rows = [[i, *corpus.keys[i], part[i], in_use[i]] for i in range(len(corpus))]
    _write(pl.RunReport({"split": (["index", "package", "window", "core", "part", "used_for_training"],
                                   split_rows)}), out)
    y = corpus.is_good.astype(int)
    for name in names:
        X = corpus.inputs_for(name)
        model = train(pl.classifier_config(name, cfg), X[used], y[used])
        serialize_models(model, out / f"{name}.thm")
        log.info("trained %s", name)


def cmd_evaluate(cfg: pl.PipelineConfig, args) -> None:
    from .classify import report_from_likelihood

    names = _selected(args)
    d = Path(cfg.out_dir) / "classify"
    present = [n for n in names if (d / f"{n}.thm").exists()]
    if not present:
        raise DataError(f"no trained classifiers in {d}; run train-classifier first")
    corpus = corpus_from_files(cfg, with_traces="cnn-trace" in present)
    split = _dicts(d / "split.csv")
    test_idx = np.array([int(r["index"]) for r in split if r["part"] == "test"])
    models, lik, reports, iters = {}, {}, {}, {}
    for name in present:
        model = load_models(d / f"{name}.thm")
        models[name] = model
        iters[name] = len(getattr(model, "history", [])) or 1
        lik[name] = model.likelihood(corpus.inputs_for(name)[test_idx])
        for tau in cfg.tau_values:
            reports[(name, tau)] = report_from_likelihood(lik[name], corpus.is_good[test_idx], tau,
                                                          corpus.mae[test_idx])
    study = pl.ClassifierStudy(cfg, np.array([], int), test_idx, models, lik, reports, iters)
    rep = study.report()
    rep.plots = {}
    _write(rep, Path(cfg.out_dir) / "evaluate")


def cmd_report(cfg: pl.PipelineConfig, args) -> None:
    from . import plots

    root = Path(cfg.out_dir)
    out = root / "report"
    labels = _dicts(root / "label" / "labels.csv")
    ih, irows = _read_csv(root / "label" / "ident_features.csv")
    names = ident_feature_names(cfg.n)
    cell_rows = []
    for lab, ir in zip(labels, irows):
        feats = [float(v) for v in ir[8:]]
        cell_rows.append([int(lab["package"]), lab["node"], int(lab["socket"]), int(lab["window"]),
                          int(lab["core"]), lab["kind"], lab["status"], float(lab["mean_err"]),
                          float(lab["err_std"]), lab["label"], float(lab["max_pole_modulus"]),
                          lab["poles_real_stable"] == "1", *feats, ""])
    header = ["package", "node", "socket", "window", "core", "kind", "status", "mean_err", "err_std",
              "label", "max_pole_modulus", "poles_real_stable", *names, "message"]
    rep = pl.RunReport({"cells": (header, cell_rows)})

    by_w: dict[tuple, list] = {}
    for r in cell_rows:
        by_w.setdefault((r[0], r[1], r[2], r[3]), []).append(r)
    win_rows = []
    for (p, node, sock, w), rs in sorted(by_w.items(), key=lambda kv: (kv[0][0], kv[0][3])):
        errs = np.array([r[7] for r in rs])
        fin = errs[np.isfinite(errs)]
        win_rows.append([p, node, sock, w, rs[0][5], float(fin.mean()) if fin.size else math.inf,
                         int(fin.size), *[sum(r[9] == lab.value for r in rs) for lab in Label]])
    rep.tables["window_errors"] = (["package", "node", "socket", "window", "kind", "mean_err_cores",
                                    "n_scored", "n_good", "n_bad", "n_excluded"], win_rows)
    arr = (np.array([r[9] for r in cell_rows]), np.array([r[10] for r in cell_rows]),
           np.array([r[12 + names.index("log10_cond_r")] if r[6] == "ok" else np.nan for r in cell_rows]))
    rep.tables["pole_cond_summary"] = pl.pole_cond_summary(arr)
    rep.plots = {"window_errors": plots.plot_window_errors, "pole_cond": plots.plot_pole_cond}
    power = root / "power" / "power_fit.csv"
    if power.exists():
        rep.tables["power_fit"] = _read_csv(power)
    ev = root / "evaluate"
    if (ev / "classification.csv").exists():
        rep.tables["classification"] = _read_csv(ev / "classification.csv")
        h, rows = _read_csv(ev / "good_error_ecdf.csv")
        rep.tables["good_error_ecdf"] = (h, [[r[0], float(r[1]), int(r[2]), float(r[3]), float(r[4])]
                                             for r in rows])
        rep.plots["good_error_ecdf"] = plots.plot_ecdf
    _write(rep, out, plots=True)


COMMANDS = {
    "synth": (cmd_synth, "simulate synthetic packages and write telemetry CSV"),
    "fit-power": (cmd_fit_power, "fit one power model per package on its training span"),
    "identify": (cmd_identify, "identify a thermal model for every (window, core) cell"),
    "score": (cmd_score, "score every model on all windows of its package"),
    "label": (cmd_label, "label cells and write the trace and identification feature tables"),
    "train-classifier": (cmd_train_classifier, "train window classifiers on the labelled corpus"),
    "evaluate": (cmd_evaluate, "evaluate trained classifiers on the held-out windows"),
    "report": (cmd_report, "collect report tables and draw SVG plots"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thermid", description=__doc__.split("\n\n")[0],
                                     epilog=f"Environment overrides use the {pl.ENV_PREFIX}<FIELD> prefix, "
                                            f"e.g. {pl.ENV_PREFIX}WINDOW_LEN=6000.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        for field, typ in pl.PipelineConfig.field_types().items():
            flag = "--" + field.replace("_", "-")
            if field == "seed":
                p.add_argument(flag, type=int, required=name in STUDY_COMMANDS,
                               help="random seed (required for study commands)")
            else:
                default = getattr(pl.PipelineConfig, field)
                p.add_argument(flag, type=typ, default=None, metavar=typ.__name__.upper(),
                               help=f"default {default!r}")
        if name in ("train-classifier", "evaluate"):
            p.add_argument("--model", default="all", choices=["all", *pl.CLASSIFIERS])
    return parser


def config_from_args(args, environ=None) -> pl.PipelineConfig:
    fields = pl.PipelineConfig.field_types()
    overrides = {f: getattr(args, f) for f in fields if getattr(args, f, None) is not None}
    return pl.PipelineConfig.from_env(environ, **overrides)


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args, environ)
        COMMANDS[args.command][0](cfg, args)
    except ConfigurationError as exc:
        print(f"thermid: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CellFailures as exc:
        print(f"thermid: {exc}", file=sys.stderr)
        return EXIT_FAILURES
    except (DataError, ThermidError, OSError) as exc:
        print(f"thermid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
