import json
import subprocess
import sys

import pytest

from earthgate.cli import main
from earthgate.config import dump_config
from earthgate.synth import manifest_dict

from helpers import tiny_bench, tiny_config

HEADER = "event_index,iteration,layer,kind,raw_score,normalized_score,selected"


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "data.json").write_text(json.dumps(manifest_dict(tiny_bench())))
    cfg = tiny_config(T=6, selection_count=2)
    cfg.dataset = "data.json"
    (tmp_path / "run.ini").write_text(dump_config(cfg))
    return tmp_path


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "x.ini", "--no-such-flag"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_frozen_with_toolbox_flags_is_an_error(workspace, capsys):
    code = main(["train", str(workspace / "run.ini"), "--mode", "Frozen", "--spatial-rank", "2"])
    assert code == 1
    assert "--spatial-rank" in capsys.readouterr().err


def test_missing_config_is_an_error(tmp_path, capsys):
    assert main(["train", str(tmp_path / "absent.ini")]) == 1
    assert "error" in capsys.readouterr().err


def test_train_eval_export(workspace, capsys):
    out = workspace / "run"
    assert main(["train", str(workspace / "run.ini"), "--seed", "3", "--out", str(out)]) == 0
    for name in ("config.ini", "metrics.csv", "losses.csv", "importance.csv", "summary.json", "checkpoint.ckpt"):
        assert (out / name).exists(), name
    assert "seed = 3" in (out / "config.ini").read_text()
    capsys.readouterr()

    assert main(["eval", str(out / "checkpoint.ckpt"), str(workspace / "data.json"), "--domain", "frequency"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "iteration,domain,iou_0,iou_1,iou_2,iou_3,iou_4,miou"
    assert len(lines) == 2 and lines[1].startswith("6,frequency,")
    # eval reproduces the final metrics written during training
    final = [l for l in (out / "metrics.csv").read_text().splitlines() if l.startswith("6,frequency,")]
    assert final == lines[1:]

    csv_path = workspace / "imp.csv"
    assert main(["export-importance", str(out), str(csv_path)]) == 0
    text = csv_path.read_text().splitlines()
    assert text[0] == HEADER
    assert len(text) == 1 + 2 * 6
    assert text == (out / "importance.csv").read_text().splitlines()


def test_eval_unknown_domain(workspace, capsys):
    out = workspace / "r"
    main(["train", str(workspace / "run.ini"), "--mode", "Frozen", "--out", str(out)])
    assert main(["eval", str(out / "checkpoint.ckpt"), str(workspace / "data.json"), "--domain", "mars"]) == 1
    assert main(["export-importance", str(out), str(workspace / "x.csv")]) == 1


def test_gen_data_then_train_from_dump(workspace):
    assert main(["gen-data", str(workspace / "data.json"), str(workspace / "dump")]) == 0
    assert (workspace / "dump" / "manifest.json").exists()
    assert main(["train", str(workspace / "run.ini"), "--out", str(workspace / "r1")]) == 0
    ini = (workspace / "run.ini").read_text().replace("dataset = data.json", "dataset = dump")
    (workspace / "run2.ini").write_text(ini)
    assert main(["train", str(workspace / "run2.ini"), "--out", str(workspace / "r2")]) == 0
    assert (workspace / "r1" / "metrics.csv").read_bytes() == (workspace / "r2" / "metrics.csv").read_bytes()


def test_ablate_prints_table(workspace, capsys):
    code = main(["ablate", str(workspace / "run.ini"), "--seeds", "0,1",
                 "--modes", "Frozen,CrossEarthGate", "--iterations", "4"])
    assert code == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["mode", "mIoU", "std", "trainable"]
    assert [l.split()[0] for l in out[1:]] == ["Frozen", "CrossEarthGate"]


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "earthgate.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("gen-data", "train", "eval", "export-importance", "ablate"):
        assert sub in res.stdout
