from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from hybridts import config as cfgmod
from hybridts import container, gbt, lstm, pipeline
from hybridts.features import processed_column_names
from hybridts.pipeline import Experiment, LeakError, StageError


# ------------------------------------------------------------------ data guard


def test_guard_blocks_test_reads_until_opened(tiny_cfg):
    exp = Experiment(tiny_cfg)
    g = exp.guard
    g.read("train", "probe")
    with pytest.raises(LeakError):
        g.read("test", "probe")
    with pytest.raises(KeyError):
        g.read("holdout", "probe")
    g.open_test()
    assert len(g.read("test", "probe").surgeries) > 0
    assert [e.partition for e in g.log] == ["train", "test"]


def test_partitions_are_disjoint_and_exhaustive(tiny_cfg):
    exp = Experiment(tiny_cfg)
    exp.guard.open_test()
    ids = [s.surgery_id for p in pipeline.PARTITIONS for s in exp.guard.read(p, "probe").surgeries]
    assert sorted(ids) == sorted(s.surgery_id for s in exp.cohort.surgeries)
    assert len(ids) == len(set(ids))


def test_training_stages_never_touch_test(tiny_cfg):
    exp = Experiment(tiny_cfg)
    for k in cfgmod.ALL_MODELS:
        exp.fit_gbt(pipeline.MODEL_NAMES[k], *exp.model_columns(k))
    assert exp.access_log and all(e.partition != "test" for e in exp.access_log)
    assert not exp.guard.test_open


# ------------------------------------------------------------------ feature sets


def test_ablation_feature_sets(tiny_cfg):
    exp = Experiment(tiny_cfg)
    n2 = tiny_cfg.lstm.layer_sizes[1]
    names = {}
    for k in cfgmod.ALL_MODELS:
        f = exp.fit_gbt(pipeline.MODEL_NAMES[k], *exp.model_columns(k))
        names[k] = f.model.feature_names
    schema = exp.cohort.schema
    assert len(names[2]) == 5 * len(schema.time_series) + len(schema.statics) == 34
    assert names[1] == processed_column_names("sao2", tiny_cfg.ema)
    assert names[3] == [f"lstm_h{j}" for j in range(n2)]
    assert names[4] == names[2] + ["lstm_prob"]
    assert names[5] == names[2] + [f"lstm_h{j}" for j in range(n2)]
    # dropping the target removes exactly its five derived columns
    assert set(names[2]) - set(names[6][:-1]) == set(names[1]) and len(names[6]) == 34 - 5 + 1
    assert names[7] == names[6][:-1] + [f"lstm_h{j}" for j in range(n2)]


def test_one_lstm_serves_every_hybrid_model(tiny_cfg, monkeypatch):
    calls = []
    real = lstm.train

    def counting(*a, **kw):
        calls.append(1)
        return real(*a, **kw)

    monkeypatch.setattr(lstm, "train", counting)
    pipeline.run_ablation(tiny_cfg)
    assert len(calls) == 1


def test_rows_align_across_learners(tiny_cfg):
    exp = Experiment(tiny_cfg)
    for part in ("train", "validation"):
        fm = exp.processed(part)
        w = exp.windows(part, "sao2", tiny_cfg.lookback)
        assert np.array_equal(fm.surgery_ids, w.surgery_ids) and np.array_equal(fm.times, w.times)
        assert np.array_equal(fm.y, w.y)
        assert fm.times.min() >= tiny_cfg.lookback - 1
        hidden, prob = exp.lstm_outputs(part, "sao2", tiny_cfg.lookback)
        assert hidden.shape == (len(fm), tiny_cfg.lstm.layer_sizes[1]) and prob.shape == (len(fm),)


def test_processed_columns_use_training_statistics(tiny_cfg):
    exp = Experiment(tiny_cfg)
    X = exp.processed("train").X
    np.testing.assert_allclose(X.mean(0), 0, atol=1e-9)
    # validation is transformed with training moments, so it is not exactly centered
    assert np.abs(exp.processed("validation").X.mean(0)).max() > 1e-6


# ------------------------------------------------------------------ runners


def test_run_ablation_outputs(tiny_cfg, tmp_path):
    out = tmp_path / "abl"
    res = pipeline.run_ablation(tiny_cfg, out)
    assert [r.model for r in res] == [pipeline.MODEL_NAMES[k] for k in cfgmod.ALL_MODELS]
    assert all(0 <= r.test_pr_auc <= 1 and r.fingerprint == cfgmod.fingerprint(tiny_cfg) for r in res)
    lines = (out / "results.csv").read_text().splitlines()
    assert lines[0] == ",".join(pipeline.RESULT_HEADER) and len(lines) == 1 + 2 * 7
    for name in ("config.txt", "fingerprint.txt", "timings.csv", "access_log.csv"):
        assert (out / name).exists()
    assert cfgmod.load(out / "config.txt") == tiny_cfg
    assert len(list((out / "models").glob("*.tbst"))) == 8


def test_run_ablation_is_deterministic(tiny_cfg, tmp_path):
    pipeline.run_ablation(tiny_cfg, tmp_path / "a")
    pipeline.run_ablation(tiny_cfg, tmp_path / "b")
    for name in ("results.csv", "access_log.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for f in (tmp_path / "a" / "models").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "models" / f.name).read_bytes()


def test_selected_subset(tiny_cfg):
    res = pipeline.run_ablation(dataclasses.replace(tiny_cfg, ablation=(1, 2)))
    assert [r.model for r in res] == [pipeline.MODEL_NAMES[1], pipeline.MODEL_NAMES[2]]


def test_methodology_reads_test_only_while_evaluating(tiny_cfg, tmp_path):
    exp = Experiment(tiny_cfg)
    res = pipeline.run_methodology(exp, tmp_path / "m")
    log = exp.access_log
    first = next(i for i, e in enumerate(log) if e.partition == "test")
    assert all(e.stage.split("/")[0] == "evaluate" for e in log if e.partition == "test")
    assert any(e.stage == "evaluate/features[test]" for e in log)
    assert all(e.partition != "test" for e in log[:first])
    assert {r.model for r in res} >= {"baseline", "hybrid"}
    ranking = (tmp_path / "m" / "importance.csv").read_text().splitlines()
    assert len(ranking) == 1 + len(exp.cohort.schema.time_series)


def test_lookback_study(tiny_cfg, tmp_path):
    res = pipeline.run_lookback_study(tiny_cfg, tmp_path / "lb")
    names = {r.model for r in res}
    assert names == {pipeline.GBT_UNIVARIATE, "lstm_L5", "lstm_L10"}
    rows = (tmp_path / "lb" / "lookback.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 2
    with pytest.raises(ValueError):
        pipeline.run_lookback_study(dataclasses.replace(tiny_cfg, lookbacks=(10,)))


def test_stage_errors_name_the_stage(tiny_cfg):
    exp = Experiment(dataclasses.replace(tiny_cfg, cohort_path="missing.csv", schema_path="missing.txt"))
    with pytest.raises(StageError) as info:
        exp.cohort
    assert info.value.stage == "load"


def test_channel_importance_ranks_and_breaks_ties_by_schema_order(tiny_cfg):
    ema = tiny_cfg.ema
    imp = {processed_column_names("b", ema)[0]: 2.0, processed_column_names("c", ema)[1]: 2.0,
           processed_column_names("a", ema)[0]: 1.0}
    ranking = pipeline.channel_importance(imp, ["a", "b", "c", "d"], ema)
    assert [c for c, _ in ranking] == ["b", "c", "a", "d"]


# ------------------------------------------------------------------ persistence


def test_model_round_trip_is_bit_exact(tiny_cfg, tmp_path):
    exp = Experiment(tiny_cfg)
    f = exp.fit_gbt("M5", *exp.model_columns(5))
    model = exp.lstm_model("sao2", tiny_cfg.lookback)[0]
    pipeline.save_model(model, tmp_path / "l.tbst")
    pipeline.save_model(f.model, tmp_path / "g.tbst")
    lm = pipeline.load_model(tmp_path / "l.tbst", expect="lstm")
    gm = pipeline.load_model(tmp_path / "g.tbst", expect="gbt")
    for name, v in model.params.items():
        assert np.asarray(getattr(lm.params, name), dtype=np.float64).tobytes() == \
            np.asarray(v, dtype=np.float64).tobytes()
    assert lm.config == model.config and lm.lookback == model.lookback
    w = exp.windows("validation", "sao2", tiny_cfg.lookback)
    assert np.array_equal(lstm.predict_proba(lm, w.X), lstm.predict_proba(model, w.X))
    X, names, _ = exp._design("validation", f.columns, f.extra, "sao2")
    assert np.array_equal(gbt.predict_proba(gm, X, names), gbt.predict_proba(f.model, X, names))
    assert gm.feature_names == f.model.feature_names and gm.config == f.model.config
    # saving what was loaded reproduces the file byte for byte
    pipeline.save_model(gm, tmp_path / "g2.tbst")
    assert (tmp_path / "g2.tbst").read_bytes() == (tmp_path / "g.tbst").read_bytes()


def test_load_rejects_corruption_and_wrong_type(tiny_cfg, tmp_path):
    exp = Experiment(tiny_cfg)
    pipeline.save_model(exp.fit_gbt("M1", *exp.model_columns(1)).model, tmp_path / "g.tbst")
    with pytest.raises(container.ModelTypeError):
        pipeline.load_model(tmp_path / "g.tbst", expect="lstm")
    blob = bytearray((tmp_path / "g.tbst").read_bytes())
    blob[len(blob) // 2] ^= 1
    (tmp_path / "bad.tbst").write_bytes(bytes(blob))
    with pytest.raises(container.ChecksumError):
        pipeline.load_model(tmp_path / "bad.tbst")
    with pytest.raises(TypeError):
        pipeline.save_model(object(), tmp_path / "x.tbst")


def test_empty_gbt_round_trip(tmp_path):
    m = gbt.GBTModel(base_margin=0.0, trees=[], learning_rate=0.1, feature_names=["a"], config=gbt.GBTConfig())
    pipeline.save_model(m, tmp_path / "e.tbst")
    back = pipeline.load_model(tmp_path / "e.tbst")
    assert back.trees == [] and back.feature_names == ["a"]
