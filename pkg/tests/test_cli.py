import csv
import json

import pytest

from mmsa.cli import DESIGN_AXES, load_config, main

FAST = ["--set", "agent.hidden=16", "--set", "train.total_steps=40", "--set", "train.batch_size=8",
        "--set", "train.test_interval=20", "--set", "train.test_episodes=2"]


def test_train_then_evaluate(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--out", str(run), "--seed", "3", *FAST]) == 0
    man = json.loads((run / "manifest.json").read_text())
    assert man["status"] == "complete" and man["seeds"] == [3]
    assert man["overrides"]["train.total_steps"] == 40
    capsys.readouterr()
    assert main(["evaluate", "--run", str(run), "--episodes", "3", "--json"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["episodes"] == 3 and len(rec["returns"]) == 3


def test_default_run_directory_uses_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("MMSA_OUT_DIR", str(tmp_path))
    assert main(["train", *FAST]) == 0
    (run,) = list(tmp_path.iterdir())
    assert run.name.startswith("coordination-full-seed1-")


def test_config_file_and_manifest_reload(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("train.lr = 0.0005\nenv.name = climbing\n")
    cfg = load_config(str(cfg_file), ["train.seed=9"])
    assert cfg["train.lr"] == 5e-4 and cfg["train.seed"] == 9 and cfg["env.name"] == "climbing"


def test_bad_config_exits_with_code_2(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "train.nope=1"]) == 2
    assert "valid keys" in capsys.readouterr().err
    assert main(["evaluate"]) == 2


def test_ablate_writes_summary_and_curves(tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--out", str(out), "--seeds", "1", "2", "--variants", "full", "no_wm", *FAST]) == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert [r["series"] for r in rows] == ["full", "no_wm"]
    assert all(r["n"] == "2" for r in rows)
    assert (out / "curves.svg").exists()
    assert (out / "no_wm" / "seed2" / "manifest.json").exists()


def test_plot_collects_runs_by_label(tmp_path, capsys):
    out = tmp_path / "abl"
    main(["ablate", "--out", str(out), "--seeds", "1", "--variants", "full", "no_gs", *FAST])
    capsys.readouterr()
    assert main(["plot", str(out), "--out", str(tmp_path / "p")]) == 0
    assert "2 series" in capsys.readouterr().out


def test_verify_exit_codes(capsys):
    assert main(["verify", "--only", "mixer.igm", "--quick"]) == 0
    assert main(["verify", "--only", "mixer", "--quick", "--inject", "mixer.sign_flip", "--json"]) == 1
    out = capsys.readouterr().out
    report = json.loads(out[out.index("{"):])
    assert report["inject"] == "mixer.sign_flip" and report["failed"]
    assert main(["verify", "--only", "nothing"]) == 2


def test_design_axes():
    assert DESIGN_AXES["horizon"][1] == (1, 2, 3, 10)
    assert DESIGN_AXES["lr"][0] == "train.lr"


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for cmd in ("train", "evaluate", "ablate", "verify", "plot"):
        assert cmd in text
