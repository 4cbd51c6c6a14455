from __future__ import annotations

import subprocess
import sys

import pytest

from conftest import TINY_TEXT
from hybridts import cli
from hybridts.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, LOCK_NAME, main


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_TEXT)
    return p


def run(cfg_file, out, *args):
    return main([args[0], "--config", str(cfg_file), "--out", str(out), *args[1:]])


def test_gen_synth(cfg_file, tmp_path, capsys):
    out = tmp_path / "syn"
    assert run(cfg_file, out, "gen-synth", "--seed", "3") == EXIT_OK
    for name in ("cohort.csv", "schema.txt", "ground_truth.csv", "synth_report.txt"):
        assert (out / name).exists()
    assert "PASS sao2_bounds" in capsys.readouterr().out
    assert not (out / LOCK_NAME).exists()


def test_train_extract_evaluate_chain(cfg_file, tmp_path, capsys):
    out = tmp_path / "o"
    assert run(cfg_file, out, "featurize") == EXIT_OK
    assert (out / "features_test.csv").exists()
    assert run(cfg_file, out, "train-lstm") == EXIT_OK
    lstm_path = out / "models" / "lstm_sao2_L10.tbst"
    assert lstm_path.exists() and (out / "lstm_sao2_L10_report.csv").exists()
    assert run(cfg_file, out, "extract-hidden", "--model", str(lstm_path)) == EXIT_OK
    header = (out / "hidden_train.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["surgery_id", "time_min"] and len(header) == 2 + 3 + 1
    assert run(cfg_file, out, "train-gbt", "--model-set", "5") == EXIT_OK
    gbt_path = out / "models" / "M5_processed_hidden.tbst"
    assert run(cfg_file, out, "evaluate", "--model", str(gbt_path), "--lstm", str(lstm_path)) == EXIT_OK
    assert run(cfg_file, out, "evaluate", "--model", str(lstm_path), "--split", "validation") == EXIT_OK
    text = capsys.readouterr().out
    assert "M5_processed_hidden test pr_auc" in text and "lstm_sao2_L10 validation pr_auc" in text
    # the hybrid model needs its LSTM
    assert run(cfg_file, out, "evaluate", "--model", str(gbt_path)) == EXIT_INVALID


def test_evaluate_matches_the_pipeline(cfg_file, tmp_path, capsys):
    out = tmp_path / "o"
    assert run(cfg_file, out, "run-ablation") == EXIT_OK
    results = (out / "results.csv").read_text().splitlines()
    m4 = next(r for r in results if r.startswith("M4_processed_prob,test")).split(",")[2]
    m = out / "models"
    assert run(cfg_file, tmp_path / "e", "evaluate", "--model", str(m / "M4_processed_prob.tbst"),
               "--lstm", str(m / "lstm_sao2_L10.tbst")) == EXIT_OK
    line = (tmp_path / "e" / "evaluate_M4_processed_prob_test.csv").read_text().splitlines()[1]
    assert line.split(",")[2] == m4


@pytest.mark.parametrize("command", ["run-methodology", "run-lookback"])
def test_runners(cfg_file, tmp_path, command):
    assert run(cfg_file, tmp_path / command, command) == EXIT_OK
    assert (tmp_path / command / "results.csv").exists()


def test_invalid_input_exit_codes(cfg_file, tmp_path):
    assert main([]) == EXIT_INVALID
    assert main(["no-such-command"]) == EXIT_INVALID
    assert main(["run-ablation", "--seed", "x"]) == EXIT_INVALID
    bad = tmp_path / "bad.cfg"
    bad.write_text("lstm.nope=1\n")
    assert main(["run-ablation", "--config", str(bad), "--out", str(tmp_path / "b")]) == EXIT_INVALID
    assert main(["run-ablation", "--config", str(tmp_path / "missing.cfg")]) == EXIT_INVALID
    assert run(cfg_file, tmp_path / "o", "evaluate", "--model", str(tmp_path / "none.tbst")) == EXIT_INVALID
    assert run(cfg_file, tmp_path / "o", "train-lstm", "--lookback", "7") == EXIT_INVALID


def test_corrupted_model_is_invalid_input(cfg_file, tmp_path):
    out = tmp_path / "o"
    assert run(cfg_file, out, "train-gbt", "--model-set", "1") == EXIT_OK
    path = out / "models" / "M1_processed_target.tbst"
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0xFF
    path.write_bytes(bytes(blob))
    assert run(cfg_file, out, "evaluate", "--model", str(path)) == EXIT_INVALID
    assert run(cfg_file, out, "extract-hidden", "--model", str(path)) == EXIT_INVALID


def test_runtime_failures_exit_2(cfg_file, tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    (out / LOCK_NAME).write_text("123\n")
    assert run(cfg_file, out, "gen-synth") == EXIT_RUNTIME
    (out / LOCK_NAME).unlink()
    broken = tmp_path / "broken.cfg"
    broken.write_text(TINY_TEXT + f"data.cohort={tmp_path / 'nope.csv'}\ndata.schema={tmp_path / 'nope.txt'}\n")
    assert run(broken, tmp_path / "o2", "run-ablation") == EXIT_RUNTIME


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "run-ablation" in capsys.readouterr().out


def test_module_entry_point(tmp_path, cfg_file):
    r = subprocess.run([sys.executable, "-m", "hybridts", "gen-synth", "--config", str(cfg_file),
                        "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert cli.COMMANDS.keys() >= {"gen-synth", "run-ablation", "run-methodology", "run-lookback"}
