import json
import os
import subprocess
import sys

import numpy as np
import pytest

from t2vreg import dsp
from t2vreg.cli import main, parse_ranks
from t2vreg.errors import ConfigError
from t2vreg.pipeline import read_dataset

TINY_SPEC = {"utterances": 6, "durationSec": 0.5}
DNN = {"kind": "dnn", "input": {"contextFrames": 3}, "hiddenDims": [32, 32]}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth-data", "--spec", json.dumps(TINY_SPEC), "--out", str(out),
                 "--seed", "4"]) == 0
    return str(out)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    ckpt = str(tmp_path_factory.mktemp("ckpt") / "dnn.ckpt")
    assert main(["train", "--model", json.dumps(DNN), "--data", data_dir, "--out", ckpt,
                 "--epochs", "3", "--seed", "2"]) == 0
    return ckpt


def test_synth_counts_pairs(tmp_path, capsys):
    code, out, _ = run(capsys, "synth-data", "--spec", json.dumps({"utterances": 20}),
                       "--out", tmp_path / "d", "--seed", "1")
    assert code == 0
    assert json.loads(out)["pairs"] == 80
    with open(tmp_path / "d" / "manifest.json") as f:
        rows = json.load(f)["utterances"]
    assert len(rows) == 80
    assert len(os.listdir(tmp_path / "d" / "noisy")) == 80
    assert len(os.listdir(tmp_path / "d" / "clean")) == 80


def test_synth_is_byte_identical_and_snr_matches(tmp_path, capsys, data_dir):
    assert run(capsys, "synth-data", "--spec", json.dumps(TINY_SPEC), "--out", tmp_path / "again",
               "--seed", "4")[0] == 0
    for sub in ("clean", "noisy"):
        for name in os.listdir(os.path.join(data_dir, sub)):
            with open(os.path.join(data_dir, sub, name), "rb") as a, \
                    open(tmp_path / "again" / sub / name, "rb") as b:
                assert a.read() == b.read()
    for u in read_dataset(data_dir):
        assert abs(dsp.snr_db(u.clean, u.noisy[:, 0]) - u.snr_db) <= 0.01


def test_train_writes_checkpoint_and_log(trained, capsys):
    with open(trained + ".log.jsonl") as f:
        lines = [json.loads(s) for s in f]
    assert [r["epoch"] for r in lines] == [1, 2, 3]
    assert "wallMs" not in lines[0]


def test_train_rerun_gives_identical_log(tmp_path, data_dir, capsys):
    logs = []
    for i in range(2):
        out = tmp_path / f"m{i}.ckpt"
        code, summary, _ = run(capsys, "train", "--model", json.dumps(DNN), "--data", data_dir,
                               "--out", out, "--epochs", "2", "--seed", "7")
        assert code == 0
        logs.append(open(str(out) + ".log.jsonl").read())
        summary = json.loads(summary)
        assert summary["finalTrainMse"] < summary["initialTrainMse"]
    assert logs[0] == logs[1]


def test_train_zero_epochs_gives_loadable_checkpoint(tmp_path, data_dir, capsys):
    out = tmp_path / "init.ckpt"
    code, summary, _ = run(capsys, "train", "--model", json.dumps(DNN), "--data", data_dir,
                           "--out", out, "--epochs", "0")
    assert code == 0 and json.loads(summary)["epochs"] == 0
    code, metrics, _ = run(capsys, "eval", "--ckpt", out, "--data", data_dir)
    assert code == 0 and np.isfinite(json.loads(metrics)["mse"])


def test_eval_outputs_and_resynth(trained, data_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--ckpt", trained, "--data", data_dir,
                       "--resynth", tmp_path / "wav")
    assert code == 0
    m = json.loads(out)
    assert {"mse", "lsd", "segSnrIn", "segSnrOut"} <= set(m)
    assert len(os.listdir(tmp_path / "wav")) == m["utterances"]
    code, gv_out, _ = run(capsys, "eval", "--ckpt", trained, "--data", data_dir, "--gv")
    assert code == 0 and json.loads(gv_out) != m


def test_eval_identity_is_lossless_against_noisy(trained, data_dir, capsys):
    code, out, _ = run(capsys, "eval", "--ckpt", trained, "--data", data_dir, "--identity")
    assert code == 0
    assert json.loads(out)["lsdVsNoisy"] <= 1e-9


def test_params_string(capsys):
    code, out, _ = run(capsys, "params", "--model", "edinburgh_dnn")
    assert code == 0 and out.strip() == "5,515,521 (5.5M)"


def test_compress_unbounded_is_exact(trained, tmp_path, capsys):
    code, out, _ = run(capsys, "compress", "--ckpt", trained, "--kind", "tt", "--ranks", "full",
                       "--cores", "2", "--out", tmp_path / "tt.ckpt")
    assert code == 0
    line = [s for s in out.splitlines() if s.startswith("new/old output max abs diff")][0]
    assert float(line.split()[-1]) <= 1e-8
    assert "params" in out
    code, _, _ = run(capsys, "params", "--model", "edinburgh_dnn")
    assert code == 0


def test_compress_infeasible_rank_exits_2(trained, tmp_path, capsys):
    code, _, err = run(capsys, "compress", "--ckpt", trained, "--kind", "tt", "--ranks", "0",
                       "--out", tmp_path / "x.ckpt")
    assert code == 2 and "layer" in err
    code, _, err = run(capsys, "compress", "--ckpt", trained, "--kind", "tucker",
                       "--out", tmp_path / "x.ckpt")
    assert code == 2


def test_tradeoff_empty_suite_header_only(tmp_path, capsys):
    code, out, _ = run(capsys, "tradeoff", "--suite", json.dumps({"entries": []}),
                       "--out", tmp_path / "t.csv")
    assert code == 0
    assert open(tmp_path / "t.csv").read() == "model,kind,params,mse,lsd,segSnrOut\n"


def test_tradeoff_rerun_identical(tmp_path, data_dir, capsys):
    suite = json.dumps({"train": {"epochs": 1}, "entries": [{"name": "d", "config": DNN}]})
    texts = []
    for i in range(2):
        assert run(capsys, "tradeoff", "--suite", suite, "--data", data_dir,
                   "--out", tmp_path / f"{i}.csv")[0] == 0
        texts.append(open(tmp_path / f"{i}.csv", "rb").read())
    assert texts[0] == texts[1]
    assert len(texts[0].splitlines()) == 2


def test_bounds_command(tmp_path, capsys):
    params = {"configs": [{"id": "x", "q": 257, "d": 771, "B": 4, "L_B": 3, "C_B": 128}]}
    code, out, _ = run(capsys, "bounds", "--params", json.dumps(params), "--out", tmp_path / "b.csv")
    assert code == 0
    assert open(tmp_path / "b.csv").read() == out
    assert abs(float(out.splitlines()[2].split(",")[1]) - 254.66) < 0.005


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(tmp_path, data_dir, capsys):
    assert run(capsys, "train")[0] == 1                      # missing flags
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "params", "--model", json.dumps({"kind": "rnn"}))[0] == 2
    assert run(capsys, "synth-data", "--spec", json.dumps({"utterances": 0}),
               "--out", tmp_path / "z")[0] == 2
    assert run(capsys, "eval", "--ckpt", tmp_path / "missing.ckpt", "--data", data_dir)[0] == 2
    # a learning rate this large makes the loss overflow
    code, _, err = run(capsys, "train", "--model", json.dumps(DNN), "--data", data_dir,
                       "--out", tmp_path / "nan.ckpt", "--epochs", "3", "--lr", "1e200")
    assert code == 3 and "numerical" in err


def test_parse_ranks():
    assert parse_ranks("full", "tt") is None
    assert parse_ranks("4", "tt") == 4
    assert parse_ranks("2,3", "tt") == [2, 3]
    assert parse_ranks("4x8,2x2", "tucker") == [[4, 8], [2, 2]]
    assert parse_ranks("[[1, 2]]", "tucker") == [[1, 2]]
    with pytest.raises(ConfigError):
        parse_ranks("a,b", "tt")


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "t2vreg.cli", "params", "--model",
                           "edinburgh_dnn"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "5,515,521 (5.5M)"
    proc = subprocess.run([sys.executable, "-m", "t2vreg.cli", "bogus"], capture_output=True,
                          text=True)
    assert proc.returncode == 1
