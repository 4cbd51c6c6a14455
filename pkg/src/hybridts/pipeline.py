"""End-to-end hybrid LSTM + boosted-tree experiments.

An :class:`Experiment` owns one cohort, one surgery-level split and every
intermediate artifact, computing each lazily and at most once. Models 3 to
7 of the ablation and the longest-lookback model of the lookback study
therefore share a single LSTM training.

Data access goes through a :class:`DataGuard`. The test partition is sealed
until :meth:`Experiment.evaluate` opens it; any earlier read raises
:class:`LeakError`, and every read is logged with the stage that asked.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import config as cfgmod
from . import container, gbt, lstm
from .config import ExperimentConfig
from .dataset import Cohort, SplitAssignment, load_cohort, load_schema, split_by_surgery
from .features import (
    STD_FLOOR,
    FeatureMatrix,
    NormalizationStats,
    WindowTensor,
    build_processed_features,
    impute_and_standardize,
    label_cohort,
    processed_column_names,
    window_samples,
)
from .metrics import pr_auc
from .synthgen import GroundTruth, generate

log = logging.getLogger(__name__)

PARTITIONS = ("train", "validation", "test")
MODEL_NAMES = {
    1: "M1_processed_target",
    2: "M2_processed_all",
    3: "M3_hidden",
    4: "M4_processed_prob",
    5: "M5_processed_hidden",
    6: "M6_no_target_prob",
    7: "M7_no_target_hidden",
}
RESULT_HEADER = ["model", "split", "pr_auc", "fingerprint"]


class LeakError(RuntimeError):
    """A stage tried to read the test partition before evaluation."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class AccessEvent:
    stage: str
    partition: str


class DataGuard:
    """Partition gatekeeper with an access log."""

    def __init__(self, cohort: Cohort, split: SplitAssignment):
        self._cohort = cohort
        self._split = split
        self._parts: dict[str, Cohort] = {}
        self.test_open = False
        self.log: list[AccessEvent] = []

    def read(self, partition: str, stage: str) -> Cohort:
        if partition not in PARTITIONS:
            raise KeyError(partition)
        if partition == "test" and not self.test_open:
            raise LeakError(f"stage {stage!r} read the test partition before evaluation")
        self.log.append(AccessEvent(stage, partition))
        if partition not in self._parts:
            self._parts[partition] = self._cohort.subset(sorted(self._split.partition(partition)))
        return self._parts[partition]

    def open_test(self) -> None:
        self.test_open = True


@dataclass(frozen=True)
class AblationResult:
    model: str
    val_pr_auc: float
    test_pr_auc: float
    train_seconds: float
    fingerprint: str
    n_features: int


@dataclass
class _Fitted:
    model: gbt.GBTModel
    columns: list[str]
    extra: str | None  # "hidden", "prob" or None
    seconds: float


def _column_stats(fm: FeatureMatrix) -> tuple[dict[str, float], dict[str, float]]:
    mean = fm.X.mean(axis=0)
    std = np.maximum(fm.X.std(axis=0), STD_FLOOR)
    return dict(zip(fm.columns, mean.tolist())), dict(zip(fm.columns, std.tolist()))


class Experiment:
    """Lazily computed, cached stages of one configured experiment."""

    def __init__(self, cfg: ExperimentConfig, cohort: Cohort | None = None):
        self.cfg = cfg
        self.fingerprint = cfgmod.fingerprint(cfg)
        self.truth: GroundTruth | None = None
        self._cohort = cohort
        self._guard: DataGuard | None = None
        self._stage = "setup"
        self._cache: dict = {}

    # ------------------------------------------------------------------ plumbing

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Run a block as stage ``name``; nested stages log as ``outer/name``."""
        outer = self._stage
        self._stage = name if outer == "setup" else f"{outer}/{name}"
        t0 = time.perf_counter()
        try:
            yield
        except (StageError, LeakError):
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, exc) from exc
        finally:
            log.info("stage %s: %.1fs", name, time.perf_counter() - t0)
            self._stage = outer

    def _cached(self, key, build: Callable):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @property
    def cohort(self) -> Cohort:
        if self._cohort is None:
            with self.stage("load"):
                c = self.cfg
                if c.cohort_path is not None:
                    self._cohort = load_cohort(c.cohort_path, load_schema(c.schema_path))
                else:
                    self._cohort, self.truth = generate(c.synth)
        return self._cohort

    @property
    def guard(self) -> DataGuard:
        if self._guard is None:
            cohort = self.cohort
            with self.stage("split"):
                split = split_by_surgery(cohort, tuple(self.cfg.split_fractions), self.cfg.split_seed)
            self._guard = DataGuard(cohort, split)
        return self._guard

    @property
    def access_log(self) -> list[AccessEvent]:
        return self.guard.log

    def _read(self, partition: str) -> Cohort:
        return self.guard.read(partition, self._stage)

    @property
    def target(self) -> str:
        return self.cohort.schema.target

    @property
    def min_time(self) -> int:
        """First sample minute; shared by every model so all see the same rows."""
        return self.cfg.lookback - 1

    # ------------------------------------------------------------------ data stages

    @property
    def stats(self) -> NormalizationStats:
        def build():
            with self.stage("normalization"):
                return NormalizationStats.fit(self._read("train"))
        return self._cached("stats", build)

    def labels(self, partition: str) -> dict[str, np.ndarray]:
        def build():
            with self.stage(f"labels[{partition}]"):
                return label_cohort(self._read(partition), self.cfg.label)
        return self._cached(("labels", partition), build)

    def _raw_processed(self, partition: str) -> FeatureMatrix:
        def build():
            stats = self.stats
            labels = self.labels(partition)
            with self.stage(f"features[{partition}]"):
                imputed = impute_and_standardize(self._read(partition), stats, standardize=False)
                return build_processed_features(imputed, labels, self.cfg.ema, min_time=self.min_time)
        return self._cached(("raw_processed", partition), build)

    @property
    def column_stats(self) -> tuple[dict[str, float], dict[str, float]]:
        return self._cached("column_stats", lambda: _column_stats(self._raw_processed("train")))

    def processed(self, partition: str) -> FeatureMatrix:
        """Processed + static columns, standardized with training-column statistics."""
        def build():
            fm = self._raw_processed(partition)
            mean, std = self.column_stats
            mu = np.array([mean[c] for c in fm.columns])
            sd = np.array([std[c] for c in fm.columns])
            return dataclasses.replace(fm, X=(fm.X - mu) / sd)
        return self._cached(("processed", partition), build)

    def windows(self, partition: str, channel: str, lookback: int) -> WindowTensor:
        def build():
            stats = self.stats
            labels = self.labels(partition)
            with self.stage(f"windows[{partition},L={lookback}]"):
                std = impute_and_standardize(self._read(partition), stats)
                return window_samples(std, [channel], lookback, labels, min_time=self.min_time)
        return self._cached(("windows", partition, channel, lookback), build)

    # ------------------------------------------------------------------ learners

    def lstm_model(self, channel: str, lookback: int) -> tuple[lstm.LSTMModel, lstm.TrainReport, float]:
        def build():
            tr = self.windows("train", channel, lookback)
            va = self.windows("validation", channel, lookback)
            with self.stage(f"train_lstm[{channel},L={lookback}]"):
                cfg = dataclasses.replace(self.cfg.lstm, input_dim=1)
                t0 = time.perf_counter()
                params, report = lstm.train(tr.X, tr.y, va.X, va.y, cfg)
                seconds = time.perf_counter() - t0
                s = self.stats
                model = lstm.LSTMModel(cfg, params, lookback, [channel],
                                       {channel: s.mean[channel]}, {channel: s.std[channel]})
                log.info("lstm %s L=%d: %d epochs, best %d (%s)", channel, lookback,
                         len(report.val_loss), report.best_epoch, report.stop_reason)
                return model, report, seconds
        return self._cached(("lstm", channel, lookback), build)

    def lstm_outputs(self, partition: str, channel: str, lookback: int) -> tuple[np.ndarray, np.ndarray]:
        """(hidden, probability) rows aligned with :meth:`processed` rows."""
        def build():
            model = self.lstm_model(channel, lookback)[0]
            w = self.windows(partition, channel, lookback)
            fm = self._raw_processed(partition)
            with self.stage(f"extract_hidden[{partition},L={lookback}]"):
                if not (np.array_equal(w.surgery_ids, fm.surgery_ids) and np.array_equal(w.times, fm.times)):
                    raise RuntimeError("window and feature rows are misaligned")
                hidden = lstm.extract_hidden(model, w.X)
                prob = lstm.predict_proba(model, w.X)
                return hidden, prob
        return self._cached(("lstm_out", partition, channel, lookback), build)

    def _design(self, partition: str, columns: Sequence[str], extra: str | None,
                channel: str) -> tuple[np.ndarray, list[str], np.ndarray]:
        fm = self.processed(partition)
        X = fm.select(list(columns)).X
        names = list(columns)
        if extra is not None:
            hidden, prob = self.lstm_outputs(partition, channel, self.cfg.lookback)
            if extra == "hidden":
                X = np.hstack([X, hidden])
                names += [f"lstm_h{k}" for k in range(hidden.shape[1])]
            else:
                X = np.hstack([X, prob[:, None]])
                names.append("lstm_prob")
        return X, names, fm.y

    def fit_gbt(self, name: str, columns: Sequence[str], extra: str | None = None,
                channel: str | None = None) -> _Fitted:
        channel = channel or self.target

        def build():
            Xtr, names, ytr = self._design("train", columns, extra, channel)
            Xva, _, yva = self._design("validation", columns, extra, channel)
            with self.stage(f"train_gbt[{name}]"):
                t0 = time.perf_counter()
                model, trace = gbt.train(Xtr, ytr, Xva, yva, self.cfg.gbt, feature_names=names)
                seconds = time.perf_counter() - t0
                mean, std = self.column_stats
                model.feature_mean = {c: mean[c] for c in columns}
                model.feature_std = {c: std[c] for c in columns}
                log.info("gbt %s: %d trees (%s)", name, len(model.trees), trace.stop_reason)
                return _Fitted(model, list(columns), extra, seconds)
        return self._cached(("gbt", name), build)

    def model_columns(self, k: int) -> tuple[list[str], str | None]:
        """Feature columns and LSTM extra of ablation model ``k``."""
        cols = self.processed("train").columns
        target_cols = set(processed_column_names(self.target, self.cfg.ema))
        no_target = [c for c in cols if c not in target_cols]
        return {
            1: ([c for c in cols if c in target_cols], None),
            2: (list(cols), None),
            3: ([], "hidden"),
            4: (list(cols), "prob"),
            5: (list(cols), "hidden"),
            6: (no_target, "prob"),
            7: (no_target, "hidden"),
        }[k]

    # ------------------------------------------------------------------ evaluation

    def scores(self, fitted: _Fitted, partition: str, channel: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        X, names, y = self._design(partition, fitted.columns, fitted.extra, channel or self.target)
        return gbt.predict_proba(fitted.model, X, names), y

    def evaluate(self, fitted: dict[str, _Fitted], lstms: dict[str, tuple[str, int]] | None = None,
                 out_dir: Path | None = None) -> list[AblationResult]:
        """Open the test partition and score every fitted model on validation and test.

        ``lstms`` maps a result name to the (channel, lookback) of a trained
        LSTM scored directly through its sigmoid head.
        """
        self.guard.open_test()
        results = []
        with self.stage("evaluate"):
            for name, f in fitted.items():
                aucs = {}
                for part in ("validation", "test"):
                    s, y = self.scores(f, part)
                    curve, aucs[part] = pr_auc(s, y)
                    if out_dir is not None and part == "test":
                        _write_scores(out_dir, name, self.processed(part), s, curve)
                results.append(AblationResult(name, aucs["validation"], aucs["test"], f.seconds,
                                              self.fingerprint, len(f.model.feature_names)))
            for name, (channel, L) in (lstms or {}).items():
                model, _, seconds = self.lstm_model(channel, L)
                aucs = {}
                for part in ("validation", "test"):
                    w = self.windows(part, channel, L)
                    s = lstm.predict_proba(model, w.X)
                    curve, aucs[part] = pr_auc(s, w.y)
                    if out_dir is not None and part == "test":
                        _write_scores(out_dir, name, w, s, curve)
                results.append(AblationResult(name, aucs["validation"], aucs["test"], seconds,
                                              self.fingerprint, model.config.layer_sizes[1]))
        return results


# --------------------------------------------------------------------- runners


def _write_scores(out_dir: Path, name: str, rows, scores: np.ndarray, curve) -> None:
    (out_dir / "scores").mkdir(parents=True, exist_ok=True)
    (out_dir / "curves").mkdir(parents=True, exist_ok=True)
    with open(out_dir / "scores" / f"{name}_test.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["surgery_id", "time_min", "label", "score"])
        for sid, t, y, s in zip(rows.surgery_ids.tolist(), rows.times.tolist(),
                                rows.y.tolist(), scores.tolist()):
            w.writerow([sid, t, y, repr(s)])
    curve.save_csv(out_dir / "curves" / f"{name}_test_pr.csv")


def write_results(results: Sequence[AblationResult], out_dir: str | Path) -> None:
    """``results.csv`` (deterministic numbers) and ``timings.csv`` (wall time)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_HEADER)
        for r in results:
            w.writerow([r.model, "validation", repr(r.val_pr_auc), r.fingerprint])
            w.writerow([r.model, "test", repr(r.test_pr_auc), r.fingerprint])
    with open(out / "timings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "train_seconds", "n_features"])
        for r in results:
            w.writerow([r.model, f"{r.train_seconds:.3f}", r.n_features])


def _write_common(exp: Experiment, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfgmod.dumps(exp.cfg), encoding="utf-8")
    (out / "fingerprint.txt").write_text(exp.fingerprint + "\n", encoding="utf-8")
    with open(out / "access_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["order", "stage", "partition"])
        for k, ev in enumerate(exp.access_log):
            w.writerow([k, ev.stage, ev.partition])


def _out(exp: Experiment, out_dir: str | Path | None) -> Path | None:
    return None if out_dir is None else Path(out_dir)


def run_methodology(exp: Experiment | ExperimentConfig, out_dir: str | Path | None = None) -> list[AblationResult]:
    """The five-step recipe.

    1. Boosted trees on processed + static features.
    2. Rank time-series channels by the summed gain of their derived columns.
    3. Univariate LSTM on the top channel's raw signal.
    4. Hidden features of the LSTM's second layer for every sample.
    5. Boosted trees on processed + static + hidden features.
    """
    exp = exp if isinstance(exp, Experiment) else Experiment(exp)
    out = _out(exp, out_dir)
    cols, _ = exp.model_columns(2)
    baseline = exp.fit_gbt("baseline", cols)
    with exp.stage("importance"):
        imp = gbt.feature_importance(baseline.model)
        ranking = channel_importance(imp, exp.cohort.schema.time_series, exp.cfg.ema)
        top = ranking[0][0]
    model, _, _ = exp.lstm_model(top, exp.cfg.lookback)
    exp.lstm_outputs("train", top, exp.cfg.lookback)
    exp.lstm_outputs("validation", top, exp.cfg.lookback)
    hybrid = exp.fit_gbt(f"hybrid[{top}]", cols, "hidden", channel=top)
    fitted = {"baseline": baseline}
    results = exp.evaluate(fitted, {f"lstm_{top}_L{exp.cfg.lookback}": (top, exp.cfg.lookback)}, out)
    # the hybrid scores through the top channel's LSTM, which may not be the target
    exp.guard.open_test()
    with exp.stage("evaluate"):
        aucs = {}
        for part in ("validation", "test"):
            s, y = exp.scores(hybrid, part, channel=top)
            curve, aucs[part] = pr_auc(s, y)
            if out is not None and part == "test":
                _write_scores(out, "hybrid", exp.processed(part), s, curve)
        results.append(AblationResult("hybrid", aucs["validation"], aucs["test"], hybrid.seconds,
                                      exp.fingerprint, len(hybrid.model.feature_names)))
    if out is not None:
        with open(out / "importance.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["channel", "gain"])
            for ch, g in ranking:
                w.writerow([ch, repr(g)])
        (out / "models").mkdir(parents=True, exist_ok=True)
        save_model(baseline.model, out / "models" / "baseline.tbst")
        save_model(hybrid.model, out / "models" / "hybrid.tbst")
        save_model(model, out / "models" / f"lstm_{top}_L{exp.cfg.lookback}.tbst")
        write_results(results, out)
        _write_common(exp, out)
    return results


def channel_importance(importance: dict[str, float], channels: Sequence[str], ema_cfg) -> list[tuple[str, float]]:
    """Time-series channels by summed gain of their derived columns, best first.

    Ties go to the channel listed first in the schema.
    """
    totals = [(c, float(sum(importance.get(n, 0.0) for n in processed_column_names(c, ema_cfg))))
              for c in channels]
    order = sorted(range(len(totals)), key=lambda k: (-totals[k][1], k))
    return [totals[k] for k in order]


def run_ablation(exp: Experiment | ExperimentConfig, out_dir: str | Path | None = None) -> list[AblationResult]:
    """Train the selected ablation models and score them on validation and test.

    All LSTM-based variants reuse one univariate LSTM on the target channel
    at the longest configured lookback.
    """
    exp = exp if isinstance(exp, Experiment) else Experiment(exp)
    out = _out(exp, out_dir)
    fitted = {}
    for k in sorted(exp.cfg.ablation):
        cols, extra = exp.model_columns(k)
        fitted[MODEL_NAMES[k]] = exp.fit_gbt(MODEL_NAMES[k], cols, extra)
    results = exp.evaluate(fitted, out_dir=out)
    if out is not None:
        (out / "models").mkdir(parents=True, exist_ok=True)
        for name, f in fitted.items():
            save_model(f.model, out / "models" / f"{name}.tbst")
        if any(f.extra for f in fitted.values()):
            model = exp.lstm_model(exp.target, exp.cfg.lookback)[0]
            save_model(model, out / "models" / f"lstm_{exp.target}_L{exp.cfg.lookback}.tbst")
        write_results(results, out)
        _write_common(exp, out)
    return results


def lstm_result_name(lookback: int) -> str:
    return f"lstm_L{lookback}"


GBT_UNIVARIATE = "gbt_univariate"


def run_lookback_study(exp: Experiment | ExperimentConfig, out_dir: str | Path | None = None) -> list[AblationResult]:
    """Univariate LSTM per lookback against the univariate processed-feature GBT.

    The GBT's moving averages run over the full history, so it has one
    result shared by every lookback.
    """
    exp = exp if isinstance(exp, Experiment) else Experiment(exp)
    if len(exp.cfg.lookbacks) < 2:
        raise ValueError("the lookback study needs at least two lookbacks")
    out = _out(exp, out_dir)
    cols, _ = exp.model_columns(1)
    fitted = {GBT_UNIVARIATE: exp.fit_gbt(MODEL_NAMES[1], cols)}
    for L in sorted(exp.cfg.lookbacks):
        exp.lstm_model(exp.target, L)
    lstms = {lstm_result_name(L): (exp.target, L) for L in sorted(exp.cfg.lookbacks)}
    results = exp.evaluate(fitted, lstms, out)
    if out is not None:
        by_name = {r.model: r for r in results}
        with open(out / "lookback.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["family", "lookback", "split", "pr_auc", "fingerprint"])
            for L in sorted(exp.cfg.lookbacks):
                for family, r in (("lstm", by_name[lstm_result_name(L)]), ("gbt", by_name[GBT_UNIVARIATE])):
                    w.writerow([family, L, "test", repr(r.test_pr_auc), r.fingerprint])
        (out / "models").mkdir(parents=True, exist_ok=True)
        for L in exp.cfg.lookbacks:
            save_model(exp.lstm_model(exp.target, L)[0], out / "models" / f"lstm_{exp.target}_L{L}.tbst")
        save_model(fitted[GBT_UNIVARIATE].model, out / "models" / f"{GBT_UNIVARIATE}.tbst")
        write_results(results, out)
        _write_common(exp, out)
    return results


# --------------------------------------------------------------------- persistence


def _config_dict(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


def _config_from(cls, d: dict):
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name in d:
            v = d[f.name]
            kw[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


def save_model(model: lstm.LSTMModel | gbt.GBTModel, path: str | Path) -> None:
    """Write either learner to the binary container, parameters in float64."""
    if isinstance(model, lstm.LSTMModel):
        tensors = {name: np.asarray(v, dtype=np.float64) for name, v in model.params.items()}
        meta = {
            "config": _config_dict(model.config),
            "lookback": model.lookback,
            "channels": list(model.channels),
            "normalization": {"mean": dict(model.input_mean), "std": dict(model.input_std)},
        }
        container.write(path, container.TYPE_LSTM, tensors, meta)
    elif isinstance(model, gbt.GBTModel):
        sizes = np.array([t.n_nodes for t in model.trees], dtype=np.int64)
        cat = (lambda attr, dt: np.concatenate([getattr(t, attr) for t in model.trees]).astype(dt)
               if model.trees else np.empty(0, dt))
        tensors = {
            "tree_sizes": sizes,
            "feature": cat("feature", np.int32),
            "value": cat("value", np.float64),
            "default_left": cat("default_left", np.uint8),
            "gain": cat("gain", np.float64),
            "base_margin": np.array(model.base_margin, dtype=np.float64),
            "learning_rate": np.array(model.learning_rate, dtype=np.float64),
        }
        meta = {
            "config": _config_dict(model.config),
            "feature_names": list(model.feature_names),
            "normalization": None if model.feature_mean is None
            else {"mean": model.feature_mean, "std": model.feature_std},
        }
        container.write(path, container.TYPE_GBT, tensors, meta)
    else:
        raise TypeError(f"cannot save {type(model).__name__}")


def load_model(path: str | Path, expect: str | None = None):
    """Read a container written by :func:`save_model`.

    Args:
        expect: ``"lstm"`` or ``"gbt"`` to reject the other type.

    Raises:
        container.ChecksumError, container.VersionError, container.ModelTypeError.
    """
    want = {None: None, "lstm": container.TYPE_LSTM, "gbt": container.TYPE_GBT}[expect]
    tag, t, meta = container.read(path, want)
    if tag == container.TYPE_LSTM:
        params = lstm.LSTMParams(**{name: t[name] for name in lstm.PARAM_NAMES})
        norm = meta["normalization"]
        return lstm.LSTMModel(_config_from(lstm.LSTMConfig, meta["config"]), params, int(meta["lookback"]),
                              list(meta["channels"]), norm["mean"], norm["std"])
    trees = []
    start = 0
    for n in t["tree_sizes"].tolist():
        sl = slice(start, start + n)
        trees.append(gbt.Tree.from_preorder(t["feature"][sl], t["value"][sl],
                                            t["default_left"][sl].astype(bool), t["gain"][sl]))
        start += n
    norm = meta.get("normalization")
    return gbt.GBTModel(
        base_margin=float(t["base_margin"]),
        trees=trees,
        learning_rate=float(t["learning_rate"]),
        feature_names=list(meta["feature_names"]),
        config=_config_from(gbt.GBTConfig, meta["config"]),
        feature_mean=None if norm is None else norm["mean"],
        feature_std=None if norm is None else norm["std"],
    )
