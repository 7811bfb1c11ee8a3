import numpy as np
import pytest

from thermid import pipeline as pl
from thermid.errors import ConfigurationError, DataError, NumericalFailure
from thermid.features import Label

SMALL = dict(n_packages=3, n_cores=4, window_count=8, window_len=10800, power_train_days=0.25)


def small(**kw) -> pl.PipelineConfig:
    return pl.PipelineConfig(**{**SMALL, **kw})


def labels_of(study):
    return np.array([c.label.label for c in study.cells])


def not_good(study):
    # exclusion-band cells keep their hard-threshold label, which is never good
    return np.mean(labels_of(study) != Label.GOOD)


def test_defaults():
    c = pl.PipelineConfig()
    assert (c.sample_period, c.power_train_days, c.window_len, c.window_count, c.n) == (2.0, 3.0, 21600, 25, 2)
    t = c.thresholds
    assert (t.err, t.err_std, t.min_pole, t.excl_err, t.excl_std) == (1.2, 1.5, 0.8, 1.5, 2.0)
    assert (c.power_err_fine, c.power_err_coarse) == (3.23, 9.68)
    assert c.tau_values == (0.5, 0.8)
    assert c.power_train_samples == 129600
    assert c.min_corpus == 200 and c.train_fraction == 0.8


def test_environment_overrides():
    env = {"THERMID_WINDOW_LEN": "6000", "THERMID_METHOD": "iv", "THERMID_SEED": "4", "HOME": "/x"}
    c = pl.PipelineConfig.from_env(env, seed=9)
    assert c.window_len == 6000 and c.method == "iv" and c.seed == 9
    with pytest.raises(ConfigurationError, match="THERMID_N_CORES"):
        pl.PipelineConfig.from_env({"THERMID_N_CORES": "eight"})
    with pytest.raises(ConfigurationError, match="unknown"):
        pl.PipelineConfig.from_env({}, colour="red")


@pytest.mark.parametrize("kw", [dict(err_threshold=0.0), dict(window_len=-5), dict(excl_err=1.0),
                                dict(train_fraction=1.0), dict(method="ols"), dict(taus="0.4"),
                                dict(burn_in=30000), dict(mixture="prbs:0"), dict(sigma_w2=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        pl.PipelineConfig(**kw)


def test_parse_mixture():
    assert pl.parse_mixture("prbs:3, constant:1") == (("prbs", 0.75), ("constant", 0.25))
    assert pl.parse_mixture("prbs") == (("prbs", 1.0),)
    for bad in ("noise:1", "prbs:x", "prbs:-1", ""):
        with pytest.raises(ConfigurationError):
            pl.parse_mixture(bad)


def test_all_prbs_corpus_is_mostly_good():
    study = pl.run_identification_study(small(mixture="prbs"), keep_traces=False)
    assert len(study.cells) == 3 * 8 * 4 and study.n_failures == 0
    assert np.mean(labels_of(study) == Label.GOOD) >= 0.9


def test_all_constant_corpus_is_mostly_bad():
    study = pl.run_identification_study(small(mixture="constant"), keep_traces=False)
    assert not_good(study) >= 0.9


def test_mixed_corpus_shows_variable_windows():
    study = pl.run_identification_study(small(n_packages=1, mixture="prbs:1,constant:1", seed=3),
                                        keep_traces=False)
    errs = np.array(study.report().column("window_errors", "mean_err_cores"), float)
    assert errs.min() < 1.2 and errs.max() > 2.0
    kinds = {c.kind for c in study.cells}
    assert kinds == {"prbs", "constant"}


def test_every_cell_scored_on_all_windows(monkeypatch):
    seen = []
    real = pl.score_models

    def spy(models, temps, inputs, rows, burn_in):
        seen.append((len(models), temps.shape, inputs.shape))
        return real(models, temps, inputs, rows, burn_in)

    monkeypatch.setattr(pl, "score_models", spy)
    pl.run_identification_study(small(n_packages=1), keep_traces=False)
    assert seen == [(32, (4, 8, 10800), (8, 5, 10800))]


def test_failing_cell_is_isolated(monkeypatch):
    real = pl.identify_arrays

    def flaky(T, U, n, q, core_id=0, method="frisch"):
        if core_id == 2 and T[0] == flaky.first:
            raise NumericalFailure("synthetic breakdown")
        return real(T, U, n, q, core_id=core_id, method=method)

    cfg = small(n_packages=1)
    flaky.first = pl.prepare_package(pl.synth_package(cfg, 0).frame, cfg)[5][2, 0, 0]
    monkeypatch.setattr(pl, "identify_arrays", flaky)
    study = pl.run_identification_study(cfg, keep_traces=False)
    failed = [c for c in study.cells if c.status == "failed"]
    assert study.n_failures == len(failed) >= 1
    assert all(c.core == 2 and "synthetic breakdown" in c.message for c in failed)
    assert all(c.label.label is Label.BAD for c in failed)
    assert len(study.cells) == 32
    statuses = study.report().column("cells", "status")
    assert statuses.count("failed") == len(failed)


def test_reports_are_deterministic_and_complete(tmp_path):
    cfg = small(n_packages=2, seed=5, trace_length=256, mlp_trace_iterations=30, mlp_ident_iterations=30,
                cnn_max_iterations=5, min_corpus=20)
    outs = []
    for run in range(2):
        study = pl.run_identification_study(cfg)
        corpus = pl.build_corpus(study)
        cls = pl.run_classifier_study(cfg, corpus, ["svm-ident", "cnn-trace"])
        rep = study.report().merge(cls.report())
        paths = rep.write(tmp_path / str(run))
        outs.append({p.name: p.read_bytes() for p in paths if p.suffix == ".csv"})
        # every plotted figure reads only report tables, all of which are written as CSV
        assert {p.stem for p in paths if p.suffix == ".svg"} == {"window_errors", "pole_cond", "good_error_ecdf"}
    assert outs[0] == outs[1]
    assert set(outs[0]) == {"cells.csv", "window_errors.csv", "power_fit.csv", "pole_cond_summary.csv",
                            "classification.csv", "good_error_ecdf.csv"}
    rows = {(r.split(",")[0], r.split(",")[1]): r.split(",")
            for r in outs[0]["classification.csv"].decode().splitlines()[1:]}
    assert float(rows[("svm-ident", "0.5")][7]) == 0.0
    assert len(corpus) == 64 and corpus.traces.shape == (64, 7, 256)


def test_label_separation_check():
    cfg = pl.PipelineConfig(n_cores=4)
    res = pl.check_label_separation(cfg, n_truths=2, window_len=10800)
    assert res["prbs_good"] >= 0.95 and res["constant_bad"] >= 0.95
    with pytest.raises(ConfigurationError, match="label separation"):
        pl.check_label_separation(cfg, n_truths=1, window_len=10800, min_fraction=1.01)


def test_small_corpus_refused():
    cfg = small(n_packages=1)
    corpus = pl.build_corpus(pl.run_identification_study(cfg, keep_traces=False))
    with pytest.raises(DataError, match="fewer than 200.*n_packages"):
        pl.corpus_split(corpus, cfg)
    with pytest.raises(DataError, match="without traces"):
        corpus.inputs_for("cnn-trace")
    used, train_idx, test_idx = pl.corpus_split(corpus, small(n_packages=1, min_corpus=10))
    assert train_idx.size == 26 and test_idx.size == 6
    assert np.all(corpus.labels[used] != Label.EXCLUDED.value)
    with pytest.raises(ConfigurationError):
        pl.classifier_config("knn", cfg)


def test_parallel_workers_match_serial():
    a = pl.run_identification_study(small(n_packages=2), keep_traces=False)
    b = pl.run_identification_study(small(n_packages=2, workers=2), keep_traces=False)
    assert [c.mae for c in a.cells] == [c.mae for c in b.cells]
