import json

import numpy as np
import pytest

from superfit.checkpoint import load_checkpoint
from superfit.cli import load_dataset, main
from superfit.evaluation import EvalReport, matrix_from_csv
from superfit.training import TrainLog

SMALL = "blobs:n=300,k=3,dim=50,box=10,part=train"
SMALL_TEST = "blobs:n=300,k=3,dim=50,box=10,part=test"


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "m.sfit"
    assert main(["train", "--data", SMALL, "--hidden", "16", "--iters", "200", "--objective", "ce",
                 "--out", str(path)]) == 0
    return path


def test_dataset_specs():
    tr, te = load_dataset(SMALL), load_dataset(SMALL_TEST)
    assert len(tr) == 200 and len(te) == 100 and tr.input_shape == (50,)
    assert len(load_dataset("blobs:n=40,k=2,dim=3")) == 40
    assert len(load_dataset(SMALL, subsample=25)) == 25
    desk = load_dataset("desk:part=test")
    assert len(desk) == 1000 and desk.input_shape == (2048,) and desk.num_classes == 2


def test_train_writes_checkpoint_and_log(tmp_path, capsys):
    out, log = tmp_path / "m.sfit", tmp_path / "log.jsonl"
    code = main(["train", "--data", SMALL, "--hidden", "8", "--iters", "20", "--eval-every", "10",
                 "--target-vanished", "none", "--out", str(out), "--log", str(log)])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["iterations"] == 20 and summary["config"]["target_vanished"] is None
    assert load_checkpoint(out).iteration == 20
    assert [r.iteration for r in TrainLog.load(log)] == [10, 20]


def test_train_from_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"objective": "ce", "max_iterations": 3, "learning_rate": 0.01}))
    assert main(["train", "--data", SMALL, "--hidden", "4", "--config", str(cfg), "--iters", "5",
                 "--out", str(tmp_path / "m.sfit")]) == 0
    assert load_checkpoint(tmp_path / "m.sfit").iteration == 5


def test_eval_without_attacks(checkpoint, capsys):
    assert main(["eval", "--checkpoint", str(checkpoint), "--data", SMALL_TEST]) == 0
    report = EvalReport.from_json(capsys.readouterr().out)
    assert report.robust_accuracy == {} and report.n_examples == 100 and report.clean_accuracy > 0.9


def test_eval_with_attacks_and_table(checkpoint, tmp_path, capsys):
    out = tmp_path / "r.json"
    assert main(["eval", "--checkpoint", str(checkpoint), "--data", SMALL_TEST, "--attack", "fgsm:epsilon=0.05",
                 "--attack", "pgd-5:epsilon=0.05", "--seed", "1", "--table", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "pgd-5" in text and "fgsm" in text
    assert set(EvalReport.from_json(out.read_text()).robust_accuracy) == {"fgsm", "pgd-5"}


def test_attack_command(checkpoint, capsys):
    assert main(["attack", "--checkpoint", str(checkpoint), "--data", SMALL_TEST, "--subsample", "20",
                 "--attack", "bim-3:epsilon=0.1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["n_examples"] == 20 and out["max_linf"] <= 0.1 + 1e-7 and out["config"]["method"] == "bim"


def test_logits_stats_command(checkpoint, tmp_path, capsys):
    assert main(["logits-stats", "--checkpoint", str(checkpoint), "--data", SMALL_TEST,
                 "--out", str(tmp_path / "s.csv")]) == 0
    m = matrix_from_csv(capsys.readouterr().out)
    assert m.shape == (3, 3)
    assert np.all(m.argmax(axis=1) == np.arange(3))


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--op-seeds", "1", "--network-seeds", "1"]) == 0
    assert "gradient checks passed" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["train", "--data", "nope:x", "--out", "m.sfit"],
    ["train", "--data", "blobs:n=30,colour=red", "--out", "m.sfit"],
    ["eval", "--checkpoint", "/does/not/exist.sfit", "--data", SMALL],
    ["attack", "--checkpoint", "/does/not/exist.sfit", "--data", SMALL],
])
def test_errors_exit_with_2(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    assert "error:" in capsys.readouterr().err


def test_bad_attack_spec(checkpoint, capsys):
    assert main(["attack", "--checkpoint", str(checkpoint), "--data", SMALL, "--attack", "cw-10"]) == 2


def test_argparse_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2


@pytest.mark.slow
def test_desk_training_superfits(tmp_path, capsys):
    out = tmp_path / "desk.sfit"
    assert main(["train", "--data", "desk", "--eval-data", "desk:part=test", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["vanished_fraction"] >= 0.99 and summary["iterations"] <= 500
