"""Command-line entry point.

Every subcommand takes ``--config`` (key=value file), ``--seed`` and
``--out``. Exit codes: 0 success, 1 invalid input or configuration,
2 failure while running.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps every reduction order, and so every result, reproducible
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import csv  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from contextlib import contextmanager  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import config as cfgmod  # noqa: E402
from . import container, gbt, lstm, pipeline, synthgen  # noqa: E402
from .features import NormalizationStats, impute_and_standardize, window_samples  # noqa: E402
from .metrics import pr_auc  # noqa: E402

log = logging.getLogger("hybridts")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
LOCK_NAME = ".hybridts.lock"


class LockedError(RuntimeError):
    pass


@contextmanager
def output_lock(out: Path):
    """Exclusive lock file so two runs never write one output directory."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"output directory {out} is locked by another run ({path})") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def _load_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    if args.seed is not None:
        cfg = cfgmod.with_seed(cfg, args.seed)
    if args.out is not None:
        cfg = cfgmod.loads(f"output_dir={args.out}", cfg)
    return cfg


def _print_results(results) -> None:
    for r in results:
        print(f"{r.model:<24} val {r.val_pr_auc:.4f}  test {r.test_pr_auc:.4f}")


# --------------------------------------------------------------------- commands


def cmd_gen_synth(exp: pipeline.Experiment, out: Path, args) -> None:
    cohort, truth = synthgen.generate(exp.cfg.synth)
    paths = synthgen.write_synth(cohort, truth, out)
    report = synthgen.validate_cohort(cohort, exp.cfg.synth, exp.cfg.label)
    (out / "synth_report.txt").write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    for line in report.lines():
        print(line)
    print(f"wrote {paths['cohort']}")


def cmd_featurize(exp: pipeline.Experiment, out: Path, args) -> None:
    # featurizing is not training: it may touch every partition
    exp.guard.open_test()
    with exp.stage("featurize"):
        for part in pipeline.PARTITIONS:
            fm = exp.processed(part)
            fm.save_csv(out / f"features_{part}.csv")
            print(f"{part}: {len(fm)} rows, {len(fm.columns)} columns")


def cmd_train_lstm(exp: pipeline.Experiment, out: Path, args) -> None:
    channel = args.channel or exp.target
    lookback = args.lookback or exp.cfg.lookback
    if lookback not in exp.cfg.lookbacks:
        raise cfgmod.ConfigError(f"lookback {lookback} is not among lookbacks={exp.cfg.lookbacks}")
    model, report, seconds = exp.lstm_model(channel, lookback)
    (out / "models").mkdir(parents=True, exist_ok=True)
    path = out / "models" / f"lstm_{channel}_L{lookback}.tbst"
    pipeline.save_model(model, path)
    with open(out / f"lstm_{channel}_L{lookback}_report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_pr_auc", "val_accuracy"])
        for k, row in enumerate(zip(report.train_loss, report.val_loss, report.val_pr_auc, report.val_accuracy)):
            w.writerow([k, *map(repr, row)])
    print(f"best epoch {report.best_epoch} ({report.stop_reason}); {seconds:.1f}s; wrote {path}")


def _lstm_windows(exp: pipeline.Experiment, model: lstm.LSTMModel, part: str):
    """Windows standardized with the statistics stored in the model file."""
    base = exp.stats
    stats = NormalizationStats({**base.mean, **model.input_mean}, {**base.std, **model.input_std})
    labels = exp.labels(part)
    with exp.stage(f"windows[{part}]"):
        std = impute_and_standardize(exp._read(part), stats)
        return window_samples(std, model.channels, model.lookback, labels, min_time=exp.min_time)


def cmd_extract_hidden(exp: pipeline.Experiment, out: Path, args) -> None:
    model = pipeline.load_model(args.model, expect="lstm")
    if model.lookback > exp.cfg.lookback:
        raise cfgmod.ConfigError("model lookback exceeds the configured sample alignment")
    exp.guard.open_test()
    for part in pipeline.PARTITIONS:
        w = _lstm_windows(exp, model, part)
        hidden = lstm.extract_hidden(model, w.X)
        with open(out / f"hidden_{part}.csv", "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["surgery_id", "time_min", *[f"lstm_h{k}" for k in range(hidden.shape[1])], "label"])
            for sid, t, row, y in zip(w.surgery_ids.tolist(), w.times.tolist(), hidden.tolist(), w.y.tolist()):
                wr.writerow([sid, t, *map(repr, row), y])
        print(f"{part}: {hidden.shape[0]} x {hidden.shape[1]}")


def cmd_train_gbt(exp: pipeline.Experiment, out: Path, args) -> None:
    k = args.model_set
    cols, extra = exp.model_columns(k)
    fitted = exp.fit_gbt(pipeline.MODEL_NAMES[k], cols, extra)
    (out / "models").mkdir(parents=True, exist_ok=True)
    path = out / "models" / f"{pipeline.MODEL_NAMES[k]}.tbst"
    pipeline.save_model(fitted.model, path)
    if extra:
        lm = exp.lstm_model(exp.target, exp.cfg.lookback)[0]
        pipeline.save_model(lm, out / "models" / f"lstm_{exp.target}_L{exp.cfg.lookback}.tbst")
    print(f"{len(fitted.model.trees)} trees; {fitted.seconds:.1f}s; wrote {path}")


def cmd_evaluate(exp: pipeline.Experiment, out: Path, args) -> None:
    model = pipeline.load_model(args.model)
    part = args.split
    exp.guard.open_test()
    if isinstance(model, lstm.LSTMModel):
        w = _lstm_windows(exp, model, part)
        scores, y, rows = lstm.predict_proba(model, w.X), w.y, w
    else:
        fm = exp._raw_processed(part)
        names = model.feature_names
        base = [c for c in names if not c.startswith("lstm_")]
        mean, std = model.feature_mean or {}, model.feature_std or {}
        X = (fm.select(base).X - np.array([mean.get(c, 0.0) for c in base])) / np.array(
            [std.get(c, 1.0) for c in base])
        if len(base) < len(names):
            if not args.lstm:
                raise cfgmod.ConfigError("this model uses LSTM features; pass --lstm <model file>")
            lm = pipeline.load_model(args.lstm, expect="lstm")
            w = _lstm_windows(exp, lm, part)
            if not (np.array_equal(w.surgery_ids, fm.surgery_ids) and np.array_equal(w.times, fm.times)):
                raise RuntimeError("window and feature rows are misaligned")
            extra = (lstm.predict_proba(lm, w.X)[:, None] if "lstm_prob" in names
                     else lstm.extract_hidden(lm, w.X))
            X = np.hstack([X, extra])
        scores, y, rows = gbt.predict_proba(model, X, names), fm.y, fm
    curve, auc = pr_auc(scores, y)
    name = Path(args.model).stem
    pipeline._write_scores(out, f"{name}_{part}", rows, scores, curve)
    with open(out / f"evaluate_{name}_{part}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(pipeline.RESULT_HEADER)
        w.writerow([name, part, repr(auc), exp.fingerprint])
    print(f"{name} {part} pr_auc {auc:.6f}")


def _runner(fn):
    def run(exp: pipeline.Experiment, out: Path, args) -> None:
        _print_results(fn(exp, out))
    return run


COMMANDS = {
    "gen-synth": (cmd_gen_synth, "generate a synthetic cohort (CSV, schema, ground truth)"),
    "featurize": (cmd_featurize, "write processed feature matrices for every partition"),
    "train-lstm": (cmd_train_lstm, "train a univariate LSTM and save it"),
    "extract-hidden": (cmd_extract_hidden, "write second-layer hidden features of a saved LSTM"),
    "train-gbt": (cmd_train_gbt, "train one ablation model's boosted trees"),
    "run-methodology": (_runner(pipeline.run_methodology), "the five-step hybrid recipe"),
    "run-ablation": (_runner(pipeline.run_ablation), "models 1-7 feature-set ablation"),
    "run-lookback": (_runner(pipeline.run_lookback_study), "LSTM per lookback vs univariate GBT"),
    "evaluate": (cmd_evaluate, "score a saved model on one partition"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridts", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="key=value configuration file")
        sp.add_argument("--seed", type=int, help="seed for generator, split and learners")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        if name == "train-lstm":
            sp.add_argument("--channel", help="time-series channel (default: target)")
            sp.add_argument("--lookback", type=int, help="window length (default: longest lookback)")
        if name == "extract-hidden":
            sp.add_argument("--model", required=True, help="LSTM container file")
        if name == "train-gbt":
            sp.add_argument("--model-set", type=int, default=2, choices=sorted(pipeline.MODEL_NAMES))
        if name == "evaluate":
            sp.add_argument("--model", required=True, help="model container file")
            sp.add_argument("--lstm", help="LSTM container feeding a hybrid GBT")
            sp.add_argument("--split", default="test", choices=["validation", "test"])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage; report it as invalid input
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
    except (cfgmod.ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(cfg.output_dir)
    fn = COMMANDS[args.command][0]
    try:
        with output_lock(out):
            fn(pipeline.Experiment(cfg), out, args)
    except (cfgmod.ConfigError, container.ContainerError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (LockedError, pipeline.StageError, pipeline.LeakError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
