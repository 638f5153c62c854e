import json
import subprocess
import sys

import numpy as np
import pytest

from mpvad.audio_io import read_wav
from mpvad.cli import main
from mpvad.models import load_checkpoint


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.startswith("{")]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["simulate", "--segments", "20", "--seed", "3", "--out", str(out), "--name", "train"]) == 0
    assert main(["simulate", "--segments", "2", "--seed", "4", "--out", str(out), "--name", "test",
                 "--condition", "set_c"]) == 0
    return out


def test_simulate_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        assert main(["simulate", "--segments", "3", "--seed", "7", "--out", str(tmp_path / d)]) == 0
    summary = _json_lines(capsys.readouterr().out)[0]
    assert summary["segments"] == 3 and summary["hours"] == round(60 / 3600, 4)
    ta, tb = _tree(tmp_path / "a" / "corpus"), _tree(tmp_path / "b" / "corpus")
    assert ta == tb and len(ta) == 3 * 3 + 2
    cfg = json.loads((tmp_path / "a" / "reports" / "simulate_config.json").read_text())
    assert cfg["seed"] == 7 and cfg["segments"] == 3


def test_train_mc_and_eval(run_dir, capsys):
    corpus = run_dir / "corpus" / "train"
    assert main(["train", "--model", "mc", "--corpus", str(corpus), "--epochs", "3", "--out", str(run_dir)]) == 0
    ckpt = run_dir / "checkpoints" / "mc.ckpt"
    assert load_checkpoint(ckpt).kind == "mc"
    log = [json.loads(line) for line in (run_dir / "reports" / "train_mc.jsonl").read_text().splitlines()]
    tr = [r["loss"] for r in log if r["split"] == "train"]
    assert len(tr) == 3 and tr[-1] < tr[0]
    capsys.readouterr()
    assert main(["eval", "--corpus", str(run_dir / "corpus" / "test"), "--model", str(ckpt),
                 "--out", str(run_dir)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["condition"] == "set_c" and 0 <= rep["accuracy"] <= 1 and rep["n_windows"] == 40
    assert (run_dir / "reports" / "confusion_set_c.csv").exists()


def test_eval_oracle(run_dir, capsys):
    assert main(["eval", "--oracle", "--corpus", str(run_dir / "corpus" / "test"), "--tag", "oracle",
                 "--out", str(run_dir)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["accuracy"] == 1.0
    conf = np.array(rep["confusion"])
    assert np.array_equal(conf, np.diag(np.diag(conf)))


def test_enhance_oracle(run_dir, capsys):
    assert main(["enhance", "--oracle", "--corpus", str(run_dir / "corpus" / "test"), "--out", str(run_dir)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["residual_crosstalk"] == 0.0
    wavs = sorted((run_dir / "enhanced" / "test").glob("*.wav"))
    assert len(wavs) == 2 and read_wav(wavs[0]).channels == 4


def test_train_energy_and_infer(run_dir, capsys):
    assert main(["train", "--model", "energy", "--corpus", str(run_dir / "corpus" / "train"),
                 "--out", str(run_dir)]) == 0
    assert load_checkpoint(run_dir / "checkpoints" / "energy.ckpt").kind == "energy"
    capsys.readouterr()
    from mpvad.models import Checkpoint, MCModel, save_checkpoint

    ckpt = run_dir / "checkpoints" / "mc_infer.ckpt"
    save_checkpoint(Checkpoint("mc", MCModel(seed=1)), ckpt)
    wav = next((run_dir / "corpus" / "test" / "segments").glob("*.wav"))
    assert main(["infer", "--stream", str(wav), "--model", str(ckpt), "--chunk", "777", "--out", str(run_dir)]) == 0
    lines = _json_lines(capsys.readouterr().out)
    assert [d["window"] for d in lines] == list(range(20))
    assert all(len(d["active"]) == 4 for d in lines)


def test_bench(run_dir, capsys):
    from mpvad.models import Checkpoint, MCModel, save_checkpoint

    ckpt = run_dir / "checkpoints" / "mc_bench.ckpt"
    save_checkpoint(Checkpoint("mc", MCModel(seed=1)), ckpt)
    assert main(["bench", "--model", str(ckpt), "--seconds", "5", "--runs", "3", "--out", str(run_dir)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["runs"] == 3 and res["rtf_mean"] > 0


def test_gradcheck(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    rows = _json_lines(capsys.readouterr().out)
    assert {r["check"] for r in rows} == {"gru", "fc", "bce", "sigmoid_bce", "sc_model", "mc_model"}
    assert all(r["max_rel_error"] < 1e-4 for r in rows)


def test_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--bogus"])
    assert exc.value.code == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(err)["error"] == "usage"
    assert main(["eval", "--corpus", str(tmp_path / "missing"), "--oracle", "--out", str(tmp_path)]) == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "missing_file"
    assert main(["infer", "--stream", str(tmp_path / "x.wav"), "--model", "m.ckpt", "--out", str(tmp_path)]) == 1


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults\nsegments = 2\ncondition = \"set_b\"\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert _json_lines(capsys.readouterr().out)[0]["segments"] == 2
    assert (tmp_path / "corpus" / "set_b" / "manifest.jsonl").exists()
    cfg.write_text("nonsense_key = 1\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert json.loads(capsys.readouterr().err.strip())["error"] == "config"


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mpvad.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
    r = subprocess.run([sys.executable, "-m", "mpvad.cli", "train"], capture_output=True, text=True)
    assert r.returncode == 2 and json.loads(r.stderr.strip().splitlines()[-1])["error"] == "usage"
