import csv
import json
import subprocess
import sys

import pytest

from tstnet import cli
from tstnet.config import PRESETS
from tstnet.train import TrainingDiverged, train as real_train

SMALL = ["--preset", "synthetic", "--set", "D=8", "--set", "k=2", "--set", "budget=16",
         "--set", "epochs=2", "--set", "batch=4"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "tr"), "--episodes", "6"]) == 0
    assert cli.main(["synth", "--out", str(root / "te"), "--episodes", "3", "--first-index", "6"]) == 0
    assert cli.main(["train", "--data", str(root / "tr"), "--val", str(root / "te"),
                     "--out", str(root / "run"), "--eval-every", "1", "--seed", "3",
                     "--deterministic", *SMALL]) == 0
    return root


def test_train_writes_run_directory(workdir):
    run = workdir / "run"
    assert {"config.json", "train_log.jsonl", "checkpoint.pt"} <= {p.name for p in run.iterdir()}
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["seed"] == 3 and cfg["deterministic"] is True and cfg["D"] == 8
    lines = (run / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]


def test_resume_appends_epochs(workdir, tmp_path):
    run = tmp_path / "run"
    args = ["train", "--data", str(workdir / "tr"), "--out", str(run), "--eval-every", "0", *SMALL]
    assert cli.main([*args, "--set", "epochs=1"]) == 0
    assert cli.main([*args, "--resume", str(run / "checkpoint.pt")]) == 0
    log = [json.loads(x) for x in (run / "train_log.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in log] == [1, 2]


def test_eval_table_and_json(workdir, capsys, tmp_path):
    out = tmp_path / "eval.json"
    assert cli.main(["eval", "--checkpoint", str(workdir / "run" / "checkpoint.pt"),
                     "--data", str(workdir / "te"), "--out", str(out), "--label", "small",
                     "--throughput"]) == 0
    text = capsys.readouterr().out
    assert "R@1,IoU=0.5" in text and "small" in text and "R@5:" in text
    rep = json.loads(out.read_text())
    assert rep["episodes"] == 3 and rep["label"] == "small" and rep["v_qps"] > 0


def test_predict_jsonl(workdir, tmp_path):
    out = tmp_path / "p.jsonl"
    assert cli.main(["predict", "--checkpoint", str(workdir / "run" / "checkpoint.pt"),
                     "--data", str(workdir / "te"), "--out", str(out), "--top-n", "3"]) == 0
    rows = [json.loads(x) for x in out.read_text().splitlines()]
    assert len(rows) == 3
    for r in rows:
        assert len(r["predictions"]) == 3
        p = r["predictions"][0]
        assert 0 <= p["t_start"] < p["t_end"]


def test_report_writes_tables_and_figure(workdir, capsys, tmp_path):
    ev = tmp_path / "full.json"
    cli.main(["eval", "--checkpoint", str(workdir / "run" / "checkpoint.pt"), "--data",
              str(workdir / "te"), "--out", str(ev), "--label", "full"])
    capsys.readouterr()
    out = tmp_path / "rep"
    assert cli.main(["report", "--run", str(workdir / "run"), "--eval", str(ev), "--out", str(out),
                     "--delimiter", ";"]) == 0
    text = capsys.readouterr().out.splitlines()
    rows = list(csv.reader(text[:2], delimiter=";"))
    assert rows[0][0] == "method" and rows[0][-2:] == ["mIoU", "episodes"]
    assert rows[1][0] == "full" and rows[1][-1] == "3"
    assert any(line.startswith("figure ") for line in text)
    png = out / "loss_curve.png"
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    hist = list(csv.DictReader(open(out / "history.csv")))
    assert [h["epoch"] for h in hist] == ["1", "2"]
    assert (out / "results.csv").read_text().startswith("method;")


def test_gradcheck_sampled_passes(capsys):
    assert cli.main(["gradcheck", "--max-entries", "4"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "pipeline" in out and "all passed" in out


def test_config_resolution_order(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"preset": "tiny", "epochs": 7, "seed": 1}))
    args = cli.build_parser().parse_args(["train", "--data", "x", "--out", "y", "--config", str(f),
                                          "--set", "epochs=9", "--seed", "5", "--no-deterministic"])
    cfg = cli.resolve_config(args)
    assert cfg.D == PRESETS["tiny"].D
    assert (cfg.epochs, cfg.seed, cfg.deterministic) == (9, 5, False)


@pytest.mark.parametrize("argv", [
    ["train", "--data", "/nonexistent", "--out", "OUT"],
    ["train", "--data", "DATA", "--out", "OUT", "--set", "nope=1"],
    ["train", "--data", "DATA", "--out", "OUT", "--set", "epochs=many"],
    ["synth", "--out", "OUT", "--set", "noise=loud"],
    ["synth", "--out", "OUT", "--set", "M=1"],
])
def test_usage_errors_exit_2(argv, tmp_path, capsys, workdir):
    argv = [str(tmp_path / "o") if a == "OUT" else str(workdir / "tr") if a == "DATA" else a
            for a in argv]
    assert cli.main(argv) == cli.EXIT_USAGE
    assert "error:" in capsys.readouterr().err


def test_divergence_exit_code_keeps_last_good_state(workdir, tmp_path, monkeypatch):
    def diverging(cfg, ds, **kw):
        res = real_train(cfg, ds, epochs=1, eval_every=0)
        raise TrainingDiverged("non-finite loss at epoch 2", res.checkpoint)

    monkeypatch.setattr(cli, "train", diverging)
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(workdir / "tr"), "--out", str(run), *SMALL]) == cli.EXIT_DIVERGED
    assert (run / "checkpoint.pt").exists()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "tstnet", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("synth", "train", "eval", "predict", "gradcheck", "report"):
        assert sub in res.stdout
